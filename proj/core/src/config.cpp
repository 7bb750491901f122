#include "thrid/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include "thrid/error.hpp"

namespace thrid {
namespace {

std::string trim(const std::string& s) {
  std::size_t b = 0, e = s.size();
  while (b < e && (s[b] == ' ' || s[b] == '\t' || s[b] == '\r')) ++b;
  while (e > b && (s[e - 1] == ' ' || s[e - 1] == '\t' || s[e - 1] == '\r')) --e;
  return s.substr(b, e - b);
}

double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw FormatError("config key '" + key + "': bad number '" + v + "'");
  }
}

long long parse_int(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const long long d = std::stoll(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw FormatError("config key '" + key + "': bad integer '" + v + "'");
  }
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw FormatError("config key '" + key + "': bad boolean '" + v + "'");
}

std::vector<int> parse_int_list(const std::string& key, const std::string& v) {
  std::vector<int> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    out.push_back(static_cast<int>(parse_int(key, trim(item))));
  }
  if (out.empty()) throw FormatError("config key '" + key + "': empty list");
  return out;
}

std::string join_ints(const std::vector<int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s += ',';
    s += std::to_string(v[i]);
  }
  return s;
}

}  // namespace

RunConfig RunConfig::desk_defaults() {
  RunConfig c;
  c.train.epochs = 100;
  return c;
}

RunConfig RunConfig::paper_defaults() {
  RunConfig c;
  c.train.epochs = 350;
  return c;
}

RunConfig parse_run_config(const std::string& text, const RunConfig& base) {
  RunConfig c = base;
  std::stringstream ss(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(ss, line)) {
    ++line_no;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos) {
      throw FormatError("config line " + std::to_string(line_no) + ": expected key=value");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));

    if (key == "manifest") {
      c.manifest = value;
    } else if (key == "donor_weights") {
      c.donor_weights = value;
    } else if (key == "init_mode") {
      c.train.init_mode = init_mode_from_name(value);
    } else if (key == "learning_rate") {
      c.train.learning_rate = parse_double(key, value);
    } else if (key == "beta1") {
      c.train.beta1 = parse_double(key, value);
    } else if (key == "beta2") {
      c.train.beta2 = parse_double(key, value);
    } else if (key == "epsilon") {
      c.train.epsilon = parse_double(key, value);
    } else if (key == "lr_decay") {
      c.train.lr_decay = parse_double(key, value);
    } else if (key == "batch_size") {
      c.train.batch_size = static_cast<int>(parse_int(key, value));
    } else if (key == "epochs") {
      c.train.epochs = static_cast<int>(parse_int(key, value));
    } else if (key == "seed") {
      c.train.seed = static_cast<std::uint64_t>(parse_int(key, value));
    } else if (key == "augment_enabled") {
      c.train.augment.enabled = parse_bool(key, value);
    } else if (key == "aug_rotation_deg") {
      c.train.augment.rotation_deg = parse_double(key, value);
    } else if (key == "aug_scale_frac") {
      c.train.augment.scale_frac = parse_double(key, value);
    } else if (key == "aug_translate_frac") {
      c.train.augment.translate_frac = parse_double(key, value);
    } else if (key == "input_size") {
      c.train.network.input_size = static_cast<int>(parse_int(key, value));
    } else if (key == "initial_channels") {
      c.train.network.initial_channels = static_cast<int>(parse_int(key, value));
    } else if (key == "growth_rate") {
      c.train.network.growth_rate = static_cast<int>(parse_int(key, value));
    } else if (key == "block_layout") {
      c.train.network.block_layout = parse_int_list(key, value);
    } else if (key == "compression") {
      c.train.network.compression = parse_double(key, value);
    } else if (key == "num_classes") {
      c.train.network.num_classes = static_cast<int>(parse_int(key, value));
    } else if (key == "bn_momentum") {
      c.train.network.bn_momentum = parse_double(key, value);
    } else if (key == "bn_epsilon") {
      c.train.network.bn_epsilon = parse_double(key, value);
    } else {
      throw FormatError("unknown config key '" + key + "' on line " + std::to_string(line_no));
    }
  }
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path, const RunConfig& base) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open config " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_run_config(buf.str(), base);
}

std::string serialize_run_config(const RunConfig& c) {
  std::string out;
  auto put = [&out](const std::string& key, const std::string& value) {
    out += key;
    out += '=';
    out += value;
    out += '\n';
  };
  put("manifest", c.manifest);
  put("donor_weights", c.donor_weights);
  put("init_mode", init_mode_name(c.train.init_mode));
  put("learning_rate", format_double(c.train.learning_rate));
  put("beta1", format_double(c.train.beta1));
  put("beta2", format_double(c.train.beta2));
  put("epsilon", format_double(c.train.epsilon));
  put("lr_decay", format_double(c.train.lr_decay));
  put("batch_size", std::to_string(c.train.batch_size));
  put("epochs", std::to_string(c.train.epochs));
  put("seed", std::to_string(c.train.seed));
  put("augment_enabled", c.train.augment.enabled ? "true" : "false");
  put("aug_rotation_deg", format_double(c.train.augment.rotation_deg));
  put("aug_scale_frac", format_double(c.train.augment.scale_frac));
  put("aug_translate_frac", format_double(c.train.augment.translate_frac));
  put("input_size", std::to_string(c.train.network.input_size));
  put("initial_channels", std::to_string(c.train.network.initial_channels));
  put("growth_rate", std::to_string(c.train.network.growth_rate));
  put("block_layout", join_ints(c.train.network.block_layout));
  put("compression", format_double(c.train.network.compression));
  put("num_classes", std::to_string(c.train.network.num_classes));
  put("bn_momentum", format_double(c.train.network.bn_momentum));
  put("bn_epsilon", format_double(c.train.network.bn_epsilon));
  return out;
}

void save_run_config(const RunConfig& config, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write config " + path.string());
  out << serialize_run_config(config);
}

}  // namespace thrid
