#pragma once

#include <vector>

#include "thrid/densenet.hpp"
#include "thrid/image.hpp"

namespace thrid {

// Per-pixel influence scores: |d logit(class) / d pixel|, max-normalized to
// [0,1]. A network with an identically zero gradient yields a degenerate map
// (all zeros, normalization skipped, flag set).
struct SaliencyMap {
  int width = 0;
  int height = 0;
  std::vector<float> scores;  // row-major
  int class_index = 0;
  bool degenerate = false;
};

// Eval-mode gradient of one logit with respect to the (normalized) input
// image. class_index == -1 differentiates the predicted class.
SaliencyMap compute_saliency(DenseNet& net, const Tensor& image, int class_index = -1);

// Blue (score 0) to red (score 1) tint composited over the grayscale image at
// fixed alpha 0.4 with linear RGB interpolation between the endpoints.
RgbImage render_overlay(const GrayImage& image, const SaliencyMap& map);

// Fraction of the top `top_fraction` scoring pixels (ties broken by row-major
// order) that land inside the union of the masks. Selection size is
// max(1, round(top_fraction * pixels)). An empty mask union scores 0 with a
// warning on stderr.
double localization_score(const SaliencyMap& map, const std::vector<const GrayImage*>& masks,
                          double top_fraction = 0.10);

}  // namespace thrid
