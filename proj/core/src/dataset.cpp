#include "thrid/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <set>

#include <nlohmann/json.hpp>

#include "thrid/error.hpp"

namespace thrid {

std::string split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
    case Split::unassigned: return "unassigned";
  }
  return "unassigned";
}

Split split_from_name(const std::string& name) {
  if (name == "train") return Split::train;
  if (name == "val") return Split::val;
  if (name == "test") return Split::test;
  if (name == "unassigned" || name.empty()) return Split::unassigned;
  throw FormatError("unknown split name '" + name + "'");
}

std::vector<std::string> DatasetManifest::class_labels() const {
  std::set<std::string> labels;
  for (const auto& r : records) labels.insert(r.label);
  return std::vector<std::string>(labels.begin(), labels.end());
}

int DatasetManifest::label_index(const std::string& label) const {
  const auto labels = class_labels();
  const auto it = std::lower_bound(labels.begin(), labels.end(), label);
  if (it == labels.end() || *it != label) {
    throw FormatError("label '" + label + "' not present in manifest");
  }
  return static_cast<int>(it - labels.begin());
}

std::vector<std::size_t> DatasetManifest::indices_in(Split s) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (records[i].split == s) out.push_back(i);
  }
  return out;
}

DatasetManifest load_manifest(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw IoError("cannot open manifest " + file.string());
  DatasetManifest m;
  m.dir = file.parent_path();
  std::string line;
  std::set<std::string> seen_ids;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json row;
    try {
      row = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("manifest " + file.string() + " line " + std::to_string(line_no) + ": " +
                        e.what());
    }
    ManifestRecord rec;
    rec.id = row.at("id").get<std::string>();
    rec.path = row.at("path").get<std::string>();
    rec.label = row.at("label").get<std::string>();
    if (row.contains("split")) rec.split = split_from_name(row["split"].get<std::string>());
    if (!seen_ids.insert(rec.id).second) {
      throw FormatError("duplicate manifest id '" + rec.id + "'");
    }
    if (!std::filesystem::exists(m.dir / rec.path)) {
      throw IoError("manifest entry '" + rec.id + "' points to missing file " +
                    (m.dir / rec.path).string());
    }
    m.records.push_back(std::move(rec));
  }
  return m;
}

void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& file) {
  std::ofstream out(file, std::ios::binary);
  if (!out) throw IoError("cannot write manifest " + file.string());
  for (const auto& rec : manifest.records) {
    nlohmann::json row;
    row["id"] = rec.id;
    row["path"] = rec.path;
    row["label"] = rec.label;
    row["split"] = split_name(rec.split);
    out << row.dump() << '\n';
  }
}

std::vector<int> largest_remainder(int n, const std::vector<double>& ratios) {
  std::vector<int> counts(ratios.size(), 0);
  std::vector<std::pair<double, std::size_t>> fractions;  // (-frac, bin) for stable ordering
  int assigned = 0;
  for (std::size_t i = 0; i < ratios.size(); ++i) {
    const double quota = static_cast<double>(n) * ratios[i];
    counts[i] = static_cast<int>(std::floor(quota));
    assigned += counts[i];
    fractions.emplace_back(-(quota - std::floor(quota)), i);
  }
  std::sort(fractions.begin(), fractions.end());
  for (int left = n - assigned, k = 0; left > 0; --left, ++k) {
    counts[fractions[static_cast<std::size_t>(k)].second] += 1;
  }
  return counts;
}

void stratified_split(DatasetManifest& manifest, const SplitRatios& ratios, std::uint64_t seed) {
  const std::vector<double> r{ratios.train, ratios.val, ratios.test};
  const double total = r[0] + r[1] + r[2];
  if (std::abs(total - 1.0) > 1e-9) {
    throw FormatError("split ratios must sum to 1, got " + std::to_string(total));
  }
  for (double v : r) {
    if (v < 0.0) throw FormatError("split ratios must be nonnegative");
  }

  std::map<std::string, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < manifest.records.size(); ++i) {
    by_class[manifest.records[i].label].push_back(i);
  }
  if (by_class.empty()) throw FormatError("cannot split an empty manifest");

  static const Split kSplits[3] = {Split::train, Split::val, Split::test};
  std::size_t class_idx = 0;
  for (auto& [label, indices] : by_class) {
    const int n = static_cast<int>(indices.size());
    const std::vector<int> counts = largest_remainder(n, r);
    for (std::size_t j = 0; j < 3; ++j) {
      if (r[j] > 0.0 && counts[j] == 0) {
        throw FormatError("class '" + label + "' has " + std::to_string(n) +
                          " records, too few to populate the " + split_name(kSplits[j]) +
                          " split");
      }
    }
    Rng rng(derive_seed(seed, 0x5EED5, class_idx));
    rng.shuffle(indices);
    std::size_t pos = 0;
    for (std::size_t j = 0; j < 3; ++j) {
      for (int k = 0; k < counts[j]; ++k) {
        manifest.records[indices[pos++]].split = kSplits[j];
      }
    }
    ++class_idx;
  }
}

GrayImage augment(const GrayImage& image, const AugmentParams& params, Rng& rng) {
  if (image.width != image.height) {
    throw ShapeError("augment: input must be square, got " + std::to_string(image.width) + "x" +
                     std::to_string(image.height));
  }
  const int size = image.width;
  // Fixed draw order: rotation, scale, translation.
  const double theta = rng.uniform(-params.rotation_deg, params.rotation_deg) * M_PI / 180.0;
  const double scale = rng.uniform(1.0 - params.scale_frac, 1.0 + params.scale_frac);
  const double dx = rng.uniform(-params.translate_frac, params.translate_frac) * size;
  const double dy = rng.uniform(-params.translate_frac, params.translate_frac) * size;

  const double c = std::cos(theta), s = std::sin(theta);
  const double cx = (size - 1) * 0.5, cy = (size - 1) * 0.5;
  const int max_idx = size - 1;

  GrayImage out(size, size);
  for (int oy = 0; oy < size; ++oy) {
    for (int ox = 0; ox < size; ++ox) {
      // Invert q = scale * R(theta) * p + t, all about the image center.
      const double vx = (ox - cx - dx) / scale;
      const double vy = (oy - cy - dy) / scale;
      const double px = vx * c + vy * s + cx;
      const double py = -vx * s + vy * c + cy;

      const double fx = std::floor(px), fy = std::floor(py);
      const double wx = px - fx, wy = py - fy;
      const int x0 = std::clamp(static_cast<int>(fx), 0, max_idx);
      const int x1 = std::clamp(static_cast<int>(fx) + 1, 0, max_idx);
      const int y0 = std::clamp(static_cast<int>(fy), 0, max_idx);
      const int y1 = std::clamp(static_cast<int>(fy) + 1, 0, max_idx);
      const double v = (1 - wy) * ((1 - wx) * image.at(x0, y0) + wx * image.at(x1, y0)) +
                       wy * ((1 - wx) * image.at(x0, y1) + wx * image.at(x1, y1));
      out.set(ox, oy, static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L)));
    }
  }
  return out;
}

Tensor normalize(const GrayImage& image) {
  const std::size_t n = image.size();
  if (n == 0) throw ShapeError("normalize: empty image");
  double acc = 0.0;
  for (std::uint8_t p : image.pixels) acc += p;
  const double mean = acc / static_cast<double>(n);
  double var = 0.0;
  for (std::uint8_t p : image.pixels) {
    const double d = p - mean;
    var += d * d;
  }
  const double std_dev = std::sqrt(var / static_cast<double>(n));
  const double denom = std_dev + 1e-8;

  std::vector<float> data(n);
  for (std::size_t i = 0; i < n; ++i) {
    data[i] = static_cast<float>((image.pixels[i] - mean) / denom);
  }
  return Tensor(Shape{1, 1, image.height, image.width}, std::move(data));
}

}  // namespace thrid
