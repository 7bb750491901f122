#include "thrid/saliency.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numeric>

#include "thrid/error.hpp"
#include "thrid/ops.hpp"

namespace thrid {

SaliencyMap compute_saliency(DenseNet& net, const Tensor& image, int class_index) {
  const Shape& s = image.shape();
  if (s.rank != 4 || s[0] != 1 || s[1] != 1) {
    throw ShapeError("compute_saliency: expected [1,1,S,S] input, got " + s.str());
  }

  Tape tape;
  Tensor x = image;
  tape.watch(x);
  const Tensor logits = net.forward(&tape, x, /*train=*/false);
  const int k = logits.shape()[1];

  int target = class_index;
  if (target < 0) {
    target = 0;
    for (int j = 1; j < k; ++j) {
      if (logits.value_at(static_cast<std::size_t>(j)) >
          logits.value_at(static_cast<std::size_t>(target))) {
        target = j;
      }
    }
  }
  if (target >= k) {
    throw ShapeError("compute_saliency: class index " + std::to_string(target) +
                     " out of range [0," + std::to_string(k) + ")");
  }

  const Tensor score = pick(&tape, logits, static_cast<std::size_t>(target));
  tape.backward(score);
  const auto grad = tape.grad(x);

  SaliencyMap map;
  map.width = s[3];
  map.height = s[2];
  map.class_index = target;
  map.scores.resize(grad.size());
  float mx = 0.0f;
  for (std::size_t i = 0; i < grad.size(); ++i) {
    map.scores[i] = std::abs(grad[i]);
    mx = std::max(mx, map.scores[i]);
  }
  if (mx > 0.0f) {
    const float inv = 1.0f / mx;
    for (float& v : map.scores) v *= inv;
  } else {
    map.degenerate = true;  // all-zero gradient: left unnormalized
  }
  return map;
}

RgbImage render_overlay(const GrayImage& image, const SaliencyMap& map) {
  if (image.width != map.width || image.height != map.height) {
    throw ShapeError("render_overlay: image " + std::to_string(image.width) + "x" +
                     std::to_string(image.height) + " vs map " + std::to_string(map.width) + "x" +
                     std::to_string(map.height));
  }
  constexpr double kAlpha = 0.4;
  RgbImage out(image.width, image.height);
  for (std::size_t i = 0; i < image.pixels.size(); ++i) {
    const double g = image.pixels[i];
    const double s = std::clamp(static_cast<double>(map.scores[i]), 0.0, 1.0);
    const double r = (1.0 - kAlpha) * g + kAlpha * 255.0 * s;
    const double gg = (1.0 - kAlpha) * g;
    const double b = (1.0 - kAlpha) * g + kAlpha * 255.0 * (1.0 - s);
    out.pixels[3 * i + 0] = static_cast<std::uint8_t>(std::lround(r));
    out.pixels[3 * i + 1] = static_cast<std::uint8_t>(std::lround(gg));
    out.pixels[3 * i + 2] = static_cast<std::uint8_t>(std::lround(b));
  }
  return out;
}

double localization_score(const SaliencyMap& map, const std::vector<const GrayImage*>& masks,
                          double top_fraction) {
  if (top_fraction <= 0.0 || top_fraction > 1.0) {
    throw FormatError("localization_score: top_fraction must lie in (0,1]");
  }
  const std::size_t total = map.scores.size();
  std::vector<bool> in_union(total, false);
  std::size_t union_count = 0;
  for (const GrayImage* mask : masks) {
    if (!mask) continue;
    if (mask->width != map.width || mask->height != map.height) {
      throw ShapeError("localization_score: mask dimensions do not match the map");
    }
    for (std::size_t i = 0; i < total; ++i) {
      if (mask->pixels[i] != 0 && !in_union[i]) {
        in_union[i] = true;
        ++union_count;
      }
    }
  }
  if (union_count == 0) {
    std::cerr << "warning: localization_score called with an empty mask union\n";
    return 0.0;
  }

  const std::size_t k = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::llround(top_fraction * static_cast<double>(total))));
  std::vector<std::size_t> idx(total);
  std::iota(idx.begin(), idx.end(), 0);
  // descending score; equal scores keep row-major order
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    return map.scores[a] > map.scores[b];
  });

  std::size_t hits = 0;
  for (std::size_t i = 0; i < k; ++i) {
    if (in_union[idx[i]]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(k);
}

}  // namespace thrid
