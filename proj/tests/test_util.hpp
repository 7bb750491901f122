#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "thrid/rng.hpp"
#include "thrid/tensor.hpp"

namespace thrid::test {

// Unique scratch directory removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::atomic<std::uint64_t> counter{0};
    const auto base = std::filesystem::temp_directory_path();
    path_ = base / ("thrid_" + tag + "_" + std::to_string(::getpid()) + "_" +
                    std::to_string(counter.fetch_add(1)));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

template <typename T>
TensorT<T> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<T> data(shape.numel());
  for (auto& v : data) v = static_cast<T>(rng.uniform(lo, hi));
  return TensorT<T>(shape, std::move(data));
}

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::vector<std::uint8_t>((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
}

// ---- independent oracles (kept apart from the implementations they check) ----

// Plain six-loop cross-correlation.
template <typename T>
TensorT<T> reference_conv2d(const TensorT<T>& input, const TensorT<T>& kernel,
                            const TensorT<T>* bias, int stride, int padding) {
  const int N = input.shape()[0], Cin = input.shape()[1], H = input.shape()[2],
            W = input.shape()[3];
  const int Cout = kernel.shape()[0], kh = kernel.shape()[2], kw = kernel.shape()[3];
  const int Ho = (H + 2 * padding - kh) / stride + 1;
  const int Wo = (W + 2 * padding - kw) / stride + 1;
  std::vector<T> out(static_cast<std::size_t>(N) * Cout * Ho * Wo, T(0));
  for (int n = 0; n < N; ++n)
    for (int co = 0; co < Cout; ++co)
      for (int oh = 0; oh < Ho; ++oh)
        for (int ow = 0; ow < Wo; ++ow) {
          T acc = bias ? bias->values()[static_cast<std::size_t>(co)] : T(0);
          for (int ci = 0; ci < Cin; ++ci)
            for (int i = 0; i < kh; ++i)
              for (int j = 0; j < kw; ++j) {
                const int ih = oh * stride + i - padding;
                const int iw = ow * stride + j - padding;
                if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
                acc += input.at(n, ci, ih, iw) * kernel.at(co, ci, i, j);
              }
          out[((static_cast<std::size_t>(n) * Cout + co) * Ho + oh) * Wo + ow] = acc;
        }
  return TensorT<T>(Shape{N, Cout, Ho, Wo}, std::move(out));
}

template <typename T>
TensorT<T> reference_avg_pool2d(const TensorT<T>& input, int window, int stride) {
  const int N = input.shape()[0], C = input.shape()[1], H = input.shape()[2],
            W = input.shape()[3];
  const int Ho = (H - window) / stride + 1;
  const int Wo = (W - window) / stride + 1;
  std::vector<T> out(static_cast<std::size_t>(N) * C * Ho * Wo, T(0));
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      for (int oh = 0; oh < Ho; ++oh)
        for (int ow = 0; ow < Wo; ++ow) {
          T acc = 0;
          for (int i = 0; i < window; ++i)
            for (int j = 0; j < window; ++j)
              acc += input.at(n, c, oh * stride + i, ow * stride + j);
          out[((static_cast<std::size_t>(n) * C + c) * Ho + oh) * Wo + ow] =
              acc / static_cast<T>(window * window);
        }
  return TensorT<T>(Shape{N, C, Ho, Wo}, std::move(out));
}

// Hand-rolled Adam recurrence on a scalar, kept independent of the optimizer.
struct ScalarAdamOracle {
  double m = 0, v = 0, param;
  long t = 0;
  double lr, b1, b2, eps;
  ScalarAdamOracle(double p0, double lr_, double b1_, double b2_, double eps_)
      : param(p0), lr(lr_), b1(b1_), b2(b2_), eps(eps_) {}
  void step(double g) {
    t += 1;
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    const double mh = m / (1 - std::pow(b1, t));
    const double vh = v / (1 - std::pow(b2, t));
    param -= lr * mh / (std::sqrt(vh) + eps);
  }
};

}  // namespace thrid::test
