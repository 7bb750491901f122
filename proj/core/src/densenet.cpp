#include "thrid/densenet.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "thrid/error.hpp"

namespace thrid {

static_assert(std::endian::native == std::endian::little,
              "weights file I/O assumes a little-endian host");

void NetworkSpec::validate() const {
  if (input_size < 4) throw ShapeError("network spec: input_size too small");
  if (initial_channels < 1 || growth_rate < 1) {
    throw ShapeError("network spec: channels and growth rate must be positive");
  }
  if (block_layout.empty()) throw ShapeError("network spec: block_layout must be nonempty");
  for (int l : block_layout) {
    if (l < 1) throw ShapeError("network spec: block layer counts must be positive");
  }
  if (compression <= 0.0 || compression > 1.0) {
    throw ShapeError("network spec: compression must be in (0,1]");
  }
  if (num_classes < 2) throw ShapeError("network spec: num_classes must be >= 2");
  // Spatial bookkeeping: each transition halves via a 2x2/2 pool.
  int size = input_size;
  for (std::size_t b = 0; b + 1 < block_layout.size(); ++b) {
    if (size < 2) {
      throw ShapeError("network spec: input_size " + std::to_string(input_size) +
                       " underflows after " + std::to_string(b) + " transitions");
    }
    size = (size - 2) / 2 + 1;
  }
  if (size < 1) throw ShapeError("network spec: spatial size underflow");
}

std::vector<int> NetworkSpec::channels_entering_blocks() const {
  std::vector<int> entering;
  int ch = initial_channels;
  for (std::size_t b = 0; b < block_layout.size(); ++b) {
    entering.push_back(ch);
    const int out = ch + block_layout[b] * growth_rate;
    ch = static_cast<int>(std::floor(compression * out));
  }
  entering.push_back(ch);  // would-be input of a block after the last
  return entering;
}

int NetworkSpec::feature_channels() const {
  const auto entering = channels_entering_blocks();
  return entering[block_layout.size() - 1] +
         block_layout.back() * growth_rate;
}

std::vector<int> NetworkSpec::spatial_sizes() const {
  std::vector<int> sizes{input_size};
  int size = input_size;
  for (std::size_t b = 0; b + 1 < block_layout.size(); ++b) {
    size = (size - 2) / 2 + 1;
    sizes.push_back(size);
  }
  return sizes;
}

Tensor& NetworkState::at(const std::string& name) {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw Error("network state has no tensor '" + name + "'");
  return it->second;
}

const Tensor& NetworkState::at(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw Error("network state has no tensor '" + name + "'");
  return it->second;
}

NetworkState NetworkState::clone() const {
  NetworkState copy;
  copy.order = order;
  copy.frozen = frozen;
  for (const auto& name : order) {
    const Tensor& t = at(name);
    copy.tensors.emplace(name,
                         Tensor(t.shape(), std::vector<float>(t.values().begin(),
                                                              t.values().end())));
  }
  return copy;
}

namespace {

void add_slot(NetworkState& state, const std::string& name, Shape shape) {
  state.order.push_back(name);
  state.tensors.emplace(name, Tensor::zeros(shape));
}

void add_bn_slots(NetworkState& state, const std::string& prefix, int channels) {
  add_slot(state, prefix + ".gamma", Shape{channels});
  add_slot(state, prefix + ".beta", Shape{channels});
  add_slot(state, prefix + ".running_mean", Shape{channels});
  add_slot(state, prefix + ".running_var", Shape{channels});
}

bool is_running_stat(const std::string& name) {
  return name.ends_with(".running_mean") || name.ends_with(".running_var");
}

}  // namespace

DenseNet::DenseNet(NetworkSpec s) : spec(std::move(s)) {
  spec.validate();
  add_slot(state, "init_conv.weight", Shape{spec.initial_channels, 1, 3, 3});
  add_slot(state, "init_conv.bias", Shape{spec.initial_channels});

  const auto entering = spec.channels_entering_blocks();
  for (std::size_t b = 0; b < spec.block_layout.size(); ++b) {
    int ch = entering[b];
    const std::string block = "block" + std::to_string(b + 1);
    for (int l = 0; l < spec.block_layout[b]; ++l) {
      const std::string layer = block + ".layer" + std::to_string(l + 1);
      add_bn_slots(state, layer + ".bn", ch);
      add_slot(state, layer + ".conv.weight", Shape{spec.growth_rate, ch, 3, 3});
      add_slot(state, layer + ".conv.bias", Shape{spec.growth_rate});
      ch += spec.growth_rate;
    }
    if (b + 1 < spec.block_layout.size()) {
      const std::string trans = "trans" + std::to_string(b + 1);
      const int out_ch = entering[b + 1];
      add_bn_slots(state, trans + ".bn", ch);
      add_slot(state, trans + ".conv.weight", Shape{out_ch, ch, 1, 1});
      add_slot(state, trans + ".conv.bias", Shape{out_ch});
    }
  }
  add_slot(state, "head.weight", Shape{spec.num_classes, spec.feature_channels()});
  add_slot(state, "head.bias", Shape{spec.num_classes});
}

Tensor DenseNet::forward(Tape* tape, const Tensor& x, bool train) {
  const Shape& xs = x.shape();
  if (xs.rank != 4 || xs[1] != 1 || xs[2] != spec.input_size || xs[3] != spec.input_size) {
    throw ShapeError("forward: expected [N,1," + std::to_string(spec.input_size) + "," +
                     std::to_string(spec.input_size) + "], got " + xs.str());
  }

  auto bn_layer = [&](const Tensor& in, const std::string& prefix) {
    const bool frozen = state.frozen.count(prefix + ".gamma") > 0;
    const BnMode mode = (train && !frozen) ? BnMode::train : BnMode::eval;
    return batch_norm(tape, in, state.at(prefix + ".gamma"), state.at(prefix + ".beta"),
                      state.at(prefix + ".running_mean"), state.at(prefix + ".running_var"), mode,
                      static_cast<float>(spec.bn_momentum), static_cast<float>(spec.bn_epsilon));
  };

  Tensor cur = conv2d(tape, x, state.at("init_conv.weight"), &state.at("init_conv.bias"), 1, 1);
  for (std::size_t b = 0; b < spec.block_layout.size(); ++b) {
    const std::string block = "block" + std::to_string(b + 1);
    for (int l = 0; l < spec.block_layout[b]; ++l) {
      const std::string layer = block + ".layer" + std::to_string(l + 1);
      Tensor y = bn_layer(cur, layer + ".bn");
      y = relu(tape, y);
      y = conv2d(tape, y, state.at(layer + ".conv.weight"), &state.at(layer + ".conv.bias"), 1, 1);
      cur = concat_channels(tape, cur, y);
    }
    if (b + 1 < spec.block_layout.size()) {
      const std::string trans = "trans" + std::to_string(b + 1);
      Tensor y = bn_layer(cur, trans + ".bn");
      y = relu(tape, y);
      y = conv2d(tape, y, state.at(trans + ".conv.weight"), &state.at(trans + ".conv.bias"), 1, 0);
      cur = avg_pool2d(tape, y, 2, 2);
    }
  }
  Tensor features = global_avg_pool(tape, cur);
  return linear(tape, features, state.at("head.weight"), state.at("head.bias"));
}

void DenseNet::init_weights(std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0x1A17));
  for (const std::string& name : state.order) {
    Tensor& t = state.at(name);
    std::vector<float> values(t.size());
    if (name.ends_with(".weight") && !name.starts_with("head")) {
      // conv kernel [Cout, Cin, kh, kw]: fan_in = Cin*kh*kw
      const Shape& s = t.shape();
      const double fan_in = static_cast<double>(s[1]) * s[2] * s[3];
      const double std_dev = std::sqrt(2.0 / fan_in);
      for (auto& v : values) v = static_cast<float>(rng.normal(0.0, std_dev));
    } else if (name == "head.weight") {
      const double fan_in = static_cast<double>(t.shape()[1]);
      const double std_dev = std::sqrt(2.0 / fan_in);
      for (auto& v : values) v = static_cast<float>(rng.normal(0.0, std_dev));
    } else if (name.ends_with(".gamma") || name.ends_with(".running_var")) {
      std::fill(values.begin(), values.end(), 1.0f);
    } else {
      // biases, beta, running_mean
      std::fill(values.begin(), values.end(), 0.0f);
    }
    t.assign(std::move(values));
  }
  state.frozen.clear();
}

const std::set<std::string>& DenseNet::head_names() {
  static const std::set<std::string> kHead{"head.weight", "head.bias"};
  return kHead;
}

void DenseNet::load_pretrained_frozen(const NetworkState& donor,
                                      const std::set<std::string>& trainable,
                                      std::uint64_t seed) {
  // Donor must agree outside the head.
  for (const std::string& name : state.order) {
    if (head_names().count(name) > 0) continue;
    if (!donor.has(name)) {
      throw FormatError("donor state missing tensor '" + name + "'");
    }
    if (!(donor.at(name).shape() == state.at(name).shape())) {
      throw FormatError("donor tensor '" + name + "' shape " + donor.at(name).shape().str() +
                        " != " + state.at(name).shape().str());
    }
  }
  init_weights(seed);  // head (and any trainable tensor) starts fresh
  for (const std::string& name : state.order) {
    if (head_names().count(name) > 0) continue;
    const Tensor& src = donor.at(name);
    state.at(name).assign(std::vector<float>(src.values().begin(), src.values().end()));
  }
  state.frozen.clear();
  for (const std::string& name : state.order) {
    if (trainable.count(name) == 0) state.frozen.insert(name);
  }
}

std::vector<std::string> DenseNet::trainable_names() const {
  std::vector<std::string> names;
  for (const std::string& name : state.order) {
    if (is_running_stat(name)) continue;
    if (state.frozen.count(name) > 0) continue;
    names.push_back(name);
  }
  return names;
}

namespace {

constexpr char kMagic[4] = {'T', 'H', 'R', 'W'};
constexpr std::uint32_t kVersion = 1;

void put_u16(std::ofstream& out, std::uint16_t v) {
  out.put(static_cast<char>(v & 0xFF));
  out.put(static_cast<char>(v >> 8));
}

void put_u32(std::ofstream& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.put(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::uint16_t get_u16(std::ifstream& in) {
  unsigned char b[2];
  in.read(reinterpret_cast<char*>(b), 2);
  if (!in) throw FormatError("weights file truncated");
  return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
}

std::uint32_t get_u32(std::ifstream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (!in) throw FormatError("weights file truncated");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace

void save_weights(const NetworkState& state, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write weights file " + path.string());
  out.write(kMagic, 4);
  put_u32(out, kVersion);
  put_u32(out, static_cast<std::uint32_t>(state.order.size()));
  for (const std::string& name : state.order) {
    const Tensor& t = state.at(name);
    put_u16(out, static_cast<std::uint16_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    out.put(static_cast<char>(t.shape().rank));
    for (int i = 0; i < t.shape().rank; ++i) {
      put_u32(out, static_cast<std::uint32_t>(t.shape()[i]));
    }
    out.write(reinterpret_cast<const char*>(t.data()),
              static_cast<std::streamsize>(t.size() * sizeof(float)));
  }
  if (!out) throw IoError("short write to weights file " + path.string());
}

NetworkState load_weights(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open weights file " + path.string());
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0) {
    throw FormatError("bad magic in weights file " + path.string());
  }
  const std::uint32_t version = get_u32(in);
  if (version != kVersion) {
    throw FormatError("unsupported weights file version " + std::to_string(version));
  }
  const std::uint32_t count = get_u32(in);
  NetworkState state;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint16_t name_len = get_u16(in);
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    if (!in) throw FormatError("weights file truncated in tensor name");
    const int rank = in.get();
    if (rank < 0 || rank > 4) throw FormatError("bad tensor rank in weights file");
    Shape shape;
    shape.rank = rank;
    std::size_t numel = 1;
    for (int d = 0; d < rank; ++d) {
      const std::uint32_t dim = get_u32(in);
      shape.d[static_cast<std::size_t>(d)] = static_cast<int>(dim);
      numel *= dim;
    }
    std::vector<float> values(numel);
    in.read(reinterpret_cast<char*>(values.data()),
            static_cast<std::streamsize>(numel * sizeof(float)));
    if (!in) throw FormatError("weights file truncated in tensor '" + name + "'");
    state.order.push_back(name);
    state.tensors.emplace(name, Tensor(shape, std::move(values)));
  }
  return state;
}

void check_compatible(const NetworkState& expected, const NetworkState& loaded) {
  for (const std::string& name : expected.order) {
    if (!loaded.has(name)) {
      throw FormatError("weights name-set mismatch: missing tensor '" + name + "'");
    }
    if (!(loaded.at(name).shape() == expected.at(name).shape())) {
      throw FormatError("weights shape mismatch for '" + name + "': " +
                        loaded.at(name).shape().str() + " != " + expected.at(name).shape().str());
    }
  }
  for (const std::string& name : loaded.order) {
    if (!expected.has(name)) {
      throw FormatError("weights name-set mismatch: unexpected tensor '" + name + "'");
    }
  }
}

}  // namespace thrid
