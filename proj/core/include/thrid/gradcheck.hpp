#pragma once

#include <functional>
#include <vector>

#include "thrid/rng.hpp"
#include "thrid/tensor.hpp"

namespace thrid {

// Compares tape gradients against central finite differences in 64-bit mode.
// The checked function may return any shape; it is contracted to a scalar with
// a fixed random weighting so a single backward pass covers all outputs.
struct GradCheckOptions {
  double step = 1e-5;
  int probes_per_input = 8;  // random coordinates probed per input tensor
};

using CheckedFn =
    std::function<TensorT<double>(TapeT<double>*, std::vector<TensorT<double>>&)>;

// Returns the max relative error over the probed coordinates, where
// rel = |analytic - numeric| / max(|analytic|, |numeric|, 1e-6).
double grad_check(const CheckedFn& fn, std::vector<TensorT<double>> inputs, Rng& rng,
                  const GradCheckOptions& opt = {});

}  // namespace thrid
