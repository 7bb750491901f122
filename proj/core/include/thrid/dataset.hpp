#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "thrid/image.hpp"
#include "thrid/rng.hpp"
#include "thrid/tensor.hpp"

namespace thrid {

enum class Split { unassigned, train, val, test };

std::string split_name(Split s);
Split split_from_name(const std::string& name);

struct ManifestRecord {
  std::string id;
  std::string path;  // relative to the manifest's directory
  std::string label;
  Split split = Split::unassigned;
};

struct DatasetManifest {
  std::filesystem::path dir;  // directory the manifest lives in
  std::vector<ManifestRecord> records;

  std::vector<std::string> class_labels() const;  // sorted distinct labels
  int label_index(const std::string& label) const;
  std::filesystem::path resolve(const ManifestRecord& rec) const { return dir / rec.path; }
  std::vector<std::size_t> indices_in(Split s) const;
};

// JSON Lines, one record per line: {"id","label","path","split"}.
DatasetManifest load_manifest(const std::filesystem::path& file);
void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& file);

struct SplitRatios {
  double train = 0.8;
  double val = 0.1;
  double test = 0.1;
};

// Largest-remainder apportionment of n into bins proportional to ratios.
// Floors every quota, then hands the leftover units to the largest fractional
// parts (ties broken by bin order).
std::vector<int> largest_remainder(int n, const std::vector<double>& ratios);

// Per-class largest-remainder split with a seeded shuffle inside each class.
// Per-class counts are invariant across seeds; only the assignment permutes.
// Errors when a class is too small to populate a nonzero-ratio split.
void stratified_split(DatasetManifest& manifest, const SplitRatios& ratios, std::uint64_t seed);

struct AugmentParams {
  double rotation_deg = 10.0;   // theta ~ U(-r, r)
  double scale_frac = 0.10;     // s ~ U(1-m, 1+m)
  double translate_frac = 0.05; // dx,dy ~ U(-t, t) * size
  bool enabled = true;
};

// Random rotation, then isotropic scale, then translation, sampled about the
// image center with bilinear interpolation and edge-value padding. Identity
// parameters reproduce the input within one gray level.
GrayImage augment(const GrayImage& image, const AugmentParams& params, Rng& rng);

// Per-image standardization into a [1,1,S,S] tensor: subtract mean, divide by
// population std (epsilon-guarded, so constant images map to all zeros).
Tensor normalize(const GrayImage& image);

}  // namespace thrid
