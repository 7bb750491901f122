#pragma once

#include <cstdint>
#include <filesystem>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "thrid/ops.hpp"
#include "thrid/rng.hpp"

namespace thrid {

// Architecture description. Dense blocks are separated by transition layers
// (norm -> relu -> 1x1 compression conv -> 2x2 average pool, stride 2); the
// head is a global average pool into a linear classifier.
struct NetworkSpec {
  int input_size = 96;
  int initial_channels = 16;
  int growth_rate = 12;
  std::vector<int> block_layout{4, 4, 4};
  double compression = 0.5;
  int num_classes = 3;
  double bn_momentum = 0.9;
  double bn_epsilon = 1e-5;

  bool operator==(const NetworkSpec&) const = default;

  void validate() const;
  // Channel count entering each block (index 0 = after the initial conv);
  // one extra entry gives the would-be input of a block after the last.
  std::vector<int> channels_entering_blocks() const;
  int feature_channels() const;        // channels after the last block
  std::vector<int> spatial_sizes() const;  // per stage, ending before the head
};

// Named weight tensors keyed by the canonical layer naming scheme:
//   init_conv.{weight,bias}
//   block<i>.layer<j>.bn.{gamma,beta,running_mean,running_var}
//   block<i>.layer<j>.conv.{weight,bias}
//   trans<i>.bn.{...}  trans<i>.conv.{weight,bias}
//   head.{weight,bias}
// (i and j are 1-based.)
struct NetworkState {
  std::vector<std::string> order;  // canonical slot order
  std::unordered_map<std::string, Tensor> tensors;
  std::set<std::string> frozen;  // excluded from optimizer updates

  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;
  bool has(const std::string& name) const { return tensors.count(name) > 0; }
  NetworkState clone() const;
};

class DenseNet {
 public:
  explicit DenseNet(NetworkSpec spec);  // builds an all-zeros skeleton

  // Maps [N,1,S,S] to logits [N,num_classes]. Dense layer j of a block sees
  // the concatenation of the block input and every previous layer output.
  // Train mode uses batch statistics except for frozen norm layers, which
  // stay in eval behavior (their running stats never move).
  Tensor forward(Tape* tape, const Tensor& x, bool train);

  // Zero-mean Gaussian with std sqrt(2 / fan_in) for conv and linear weights;
  // biases 0; norm gamma 1, beta 0, running mean 0, running var 1.
  void init_weights(std::uint64_t seed);

  // Copies all non-head weights from the donor and freezes everything not in
  // `trainable`; the head is reinitialized. Donor must match the spec in all
  // non-head tensor shapes.
  void load_pretrained_frozen(const NetworkState& donor, const std::set<std::string>& trainable,
                              std::uint64_t seed);

  // Canonical-order parameter names the optimizer may update (frozen names
  // and running statistics excluded).
  std::vector<std::string> trainable_names() const;

  static const std::set<std::string>& head_names();

  NetworkSpec spec;
  NetworkState state;
};

// Bit-exact weights file: magic "THRW", u32 LE version, u32 LE tensor count,
// then per tensor: u16 LE name length + UTF-8 name, u8 rank, u32 LE dims,
// raw little-endian float32 values.
void save_weights(const NetworkState& state, const std::filesystem::path& path);
NetworkState load_weights(const std::filesystem::path& path);

// Errors unless both states carry exactly the same tensor names and shapes.
void check_compatible(const NetworkState& expected, const NetworkState& loaded);

}  // namespace thrid
