#include "thrid/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "thrid/ops.hpp"

namespace thrid {
namespace {

double weighted_output(const CheckedFn& fn, std::vector<TensorT<double>>& inputs,
                       const std::vector<double>& weights) {
  TapeD tape;  // nothing watched: plain forward
  TensorD y = fn(&tape, inputs);
  double acc = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) acc += y.data()[i] * weights[i];
  return acc;
}

}  // namespace

double grad_check(const CheckedFn& fn, std::vector<TensorT<double>> inputs, Rng& rng,
                  const GradCheckOptions& opt) {
  // Analytic gradients of s = sum(w .* f(x)).
  TapeD tape;
  for (auto& t : inputs) tape.watch(t);
  TensorD y = fn(&tape, inputs);
  std::vector<double> weights(y.size());
  for (auto& w : weights) w = rng.uniform(-1.0, 1.0);
  TensorD w_t(y.shape(), std::vector<double>(weights));
  TensorD s = sum(&tape, mul(&tape, y, w_t));
  tape.backward(s);

  double max_rel = 0.0;
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    const auto analytic = tape.grad(inputs[t]);
    const std::size_t n = inputs[t].size();
    const int probes = std::min<int>(opt.probes_per_input, static_cast<int>(n));
    for (int p = 0; p < probes; ++p) {
      const std::size_t idx = static_cast<std::size_t>(rng.below(n));
      std::vector<double> bumped(inputs[t].values().begin(), inputs[t].values().end());
      const double orig = bumped[idx];
      bumped[idx] = orig + opt.step;
      inputs[t].assign(std::vector<double>(bumped));
      const double plus = weighted_output(fn, inputs, weights);
      bumped[idx] = orig - opt.step;
      inputs[t].assign(std::vector<double>(bumped));
      const double minus = weighted_output(fn, inputs, weights);
      bumped[idx] = orig;
      inputs[t].assign(std::move(bumped));

      const double numeric = (plus - minus) / (2.0 * opt.step);
      const double a = analytic[idx];
      const double rel =
          std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-6});
      max_rel = std::max(max_rel, rel);
    }
  }
  return max_rel;
}

}  // namespace thrid
