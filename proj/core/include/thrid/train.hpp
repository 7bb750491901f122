#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <unordered_map>
#include <vector>

#include "thrid/dataset.hpp"
#include "thrid/densenet.hpp"

namespace thrid {

enum class InitMode { gaussian, pretrained_frozen };

std::string init_mode_name(InitMode m);
InitMode init_mode_from_name(const std::string& name);

struct TrainConfig {
  double learning_rate = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double lr_decay = 1.0;  // multiplicative per epoch, 1 = off
  int batch_size = 5;
  int epochs = 350;
  std::uint64_t seed = 42;
  InitMode init_mode = InitMode::gaussian;
  AugmentParams augment;
  NetworkSpec network;

  void validate() const;
};

struct AdamHyper {
  double lr = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// First and second moment estimates per parameter tensor, plus the shared
// step counter (t starts at 1 on the first step).
struct AdamState {
  std::unordered_map<std::string, std::pair<std::vector<float>, std::vector<float>>> moments;
  std::int64_t t = 0;
};

// m <- b1*m + (1-b1)*g;  v <- b2*v + (1-b2)*g^2;
// param <- param - lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps).
// Names in params.frozen (or without a gradient entry) are untouched.
void adam_step(NetworkState& params,
               const std::unordered_map<std::string, std::vector<float>>& grads, AdamState& state,
               const AdamHyper& hyper);

struct RunRecord {
  std::vector<double> train_loss;    // one entry per epoch
  std::vector<double> val_accuracy;  // one entry per epoch
  double wall_seconds = 0;
  int best_epoch = -1;  // 1-based epoch of the checkpointed state
  std::string abort_reason;  // nonempty when the NaN guard stopped the run
  // pipeline audit: augmentation must only ever touch train samples
  std::int64_t augmented_train_samples = 0;
  std::int64_t augmented_eval_samples = 0;
};

struct TrainOutput {
  NetworkState best_state;   // highest validation accuracy (first on ties)
  NetworkState final_state;  // after the last epoch
  RunRecord record;
};

// Adam training over the manifest's train split with online augmentation;
// validation accuracy is measured each epoch in eval mode without
// augmentation. Fully deterministic given (config, seed) for any thread
// count. A NaN loss aborts the run and reports the reason in the record.
TrainOutput train(const TrainConfig& config, const DatasetManifest& manifest,
                  const NetworkState* donor = nullptr);

struct Prediction {
  std::string id;
  std::string label;
  std::string predicted;
  std::vector<float> logits;
  double localization = -1.0;  // filled by the saliency pass when masks exist
};

struct EvalResult {
  double accuracy = 0;
  std::vector<std::vector<int>> confusion;  // [true][predicted]
  double mean_latency_seconds = 0;          // per image: load -> logits
  std::vector<Prediction> predictions;
};

// Per-image eval-mode forward over a split (no augmentation).
EvalResult evaluate(DenseNet& net, const DatasetManifest& manifest, Split split);

// Value lists for the searched keys; an empty list means "use the base value".
struct GridSpec {
  std::vector<double> learning_rate;
  std::vector<double> lr_decay;
  std::vector<int> batch_size;
  std::vector<int> epochs;
  std::vector<double> aug_rotation_deg;
  std::vector<double> aug_scale_frac;
  std::vector<double> aug_translate_frac;
};

struct GridTrial {
  TrainConfig config;
  double val_accuracy = 0;      // best epoch's validation accuracy
  double final_train_loss = 0;  // last epoch's train loss
};

struct GridResult {
  int best_index = 0;
  std::vector<GridTrial> trials;
};

// Cartesian product in fixed key order (learning_rate, lr_decay, batch_size,
// epochs, rotation, scale, translation), every trial run with the base seed.
// Best = max val accuracy; ties broken by lower final train loss, then by
// enumeration order.
GridResult grid_search(const TrainConfig& base, const GridSpec& grid,
                       const DatasetManifest& manifest, const NetworkState* donor = nullptr);

// Trains a donor network from scratch on a foreign-task manifest (for example
// the shapes corpus); the result feeds load_pretrained_frozen.
TrainOutput pretrain_donor(const TrainConfig& config, const DatasetManifest& donor_manifest);

struct CompareVerdict {
  double acc_gaussian = 0;  // final-epoch validation accuracy
  double acc_frozen = 0;
  double acc_difference = 0;        // gaussian - frozen
  double loss_ratio_gaussian = 0;   // epoch-1 train loss / final train loss
  double loss_ratio_frozen = 0;
};

struct CompareResult {
  RunRecord gaussian;
  RunRecord frozen;
  CompareVerdict verdict;
  NetworkState best_gaussian;
};

// Runs the same config twice (gaussian vs frozen donor features) with an
// identical seed and data order and reports both curve sets plus the verdict.
CompareResult compare_init_modes(const TrainConfig& config, const DatasetManifest& manifest,
                                 const NetworkState& donor);

// Emission helpers (CSV floats use shortest round-trip formatting).
void write_metrics_csv(const RunRecord& record, const std::filesystem::path& path);
void write_predictions_jsonl(const std::vector<Prediction>& predictions,
                             const std::filesystem::path& path);
void write_trials_csv(const GridResult& result, const std::filesystem::path& path);
void write_verdict_csv(const CompareVerdict& verdict, const std::filesystem::path& path);

std::string format_double(double v);  // shortest round-trip decimal

}  // namespace thrid
