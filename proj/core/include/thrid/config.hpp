#pragma once

#include <filesystem>
#include <string>

#include "thrid/train.hpp"

namespace thrid {

// Flat key=value run configuration ('#' starts a comment). Unknown keys are
// hard errors. Serialization uses a fixed key order and shortest round-trip
// float formatting, so an echoed config is byte-stable under reparsing.
struct RunConfig {
  TrainConfig train;
  std::string manifest;       // dataset manifest path
  std::string donor_weights;  // donor weights path ("" = none)

  static RunConfig desk_defaults();   // 96-px network, 100 epochs
  static RunConfig paper_defaults();  // same network, 350 epochs
};

RunConfig parse_run_config(const std::string& text, const RunConfig& base);
RunConfig load_run_config(const std::filesystem::path& path, const RunConfig& base);
std::string serialize_run_config(const RunConfig& config);
void save_run_config(const RunConfig& config, const std::filesystem::path& path);

}  // namespace thrid
