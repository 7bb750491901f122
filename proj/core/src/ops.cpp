#include "thrid/ops.hpp"

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstring>
#include <memory>

#include "thrid/parallel.hpp"

namespace thrid {
namespace {

#ifndef NDEBUG
template <typename T>
void debug_check_finite(const std::vector<T>& v, const char* op) {
  for (const T x : v) assert(std::isfinite(static_cast<double>(x)) && op);
  (void)op;
}
#define THRID_CHECK_FINITE(vec, op) debug_check_finite(vec, op)
#else
#define THRID_CHECK_FINITE(vec, op) ((void)0)
#endif

inline int ceil_div_pos(int a, int b) { return (a + b - 1) / b; }

// First output index with in-bounds source: o*stride + k - padding >= 0.
inline int out_lo(int k, int padding, int stride) {
  const int excess = padding - k;
  return excess <= 0 ? 0 : ceil_div_pos(excess, stride);
}

// One past the last output index with in-bounds source:
// o*stride + k - padding <= extent - 1.
inline int out_hi(int k, int padding, int stride, int extent, int out_extent) {
  const int top = extent - 1 + padding - k;
  if (top < 0) return 0;
  return std::min(out_extent, top / stride + 1);
}

}  // namespace

template <typename T>
TensorT<T> conv2d(TapeT<T>* tape, const TensorT<T>& input, const TensorT<T>& kernel,
                  const TensorT<T>* bias, int stride, int padding) {
  const Shape& is = input.shape();
  const Shape& ks = kernel.shape();
  if (is.rank != 4 || ks.rank != 4) {
    throw ShapeError("conv2d: expected rank-4 input and kernel, got " + is.str() + " and " +
                     ks.str());
  }
  if (stride < 1) throw ShapeError("conv2d: stride must be >= 1");
  if (padding < 0) throw ShapeError("conv2d: padding must be >= 0");
  const int N = is[0], Cin = is[1], H = is[2], W = is[3];
  const int Cout = ks[0], KCin = ks[1], kh = ks[2], kw = ks[3];
  if (Cin != KCin) {
    throw ShapeError("conv2d: input channels " + std::to_string(Cin) +
                     " != kernel channels " + std::to_string(KCin));
  }
  if (H + 2 * padding < kh || W + 2 * padding < kw) {
    throw ShapeError("conv2d: kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                     " exceeds padded input " + std::to_string(H + 2 * padding) + "x" +
                     std::to_string(W + 2 * padding));
  }
  const int Ho = (H + 2 * padding - kh) / stride + 1;
  const int Wo = (W + 2 * padding - kw) / stride + 1;
  if (Ho < 1 || Wo < 1) {
    throw ShapeError("conv2d: zero-size output " + std::to_string(Ho) + "x" + std::to_string(Wo));
  }
  if (bias) {
    if (bias->shape().rank != 1 || (*bias).shape()[0] != Cout) {
      throw ShapeError("conv2d: bias shape " + bias->shape().str() + " != [" +
                       std::to_string(Cout) + "]");
    }
  }

  const T* in = input.data();
  const T* kn = kernel.data();
  const T* bs = bias ? bias->data() : nullptr;
  std::vector<T> out_data(static_cast<std::size_t>(N) * Cout * Ho * Wo);
  T* out = out_data.data();

  parallel_chunks(static_cast<std::size_t>(N) * Cout, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t slot = lo; slot < hi; ++slot) {
      const int n = static_cast<int>(slot) / Cout;
      const int co = static_cast<int>(slot) % Cout;
      T* plane = out + slot * static_cast<std::size_t>(Ho) * Wo;
      const T fill = bs ? bs[co] : T(0);
      std::fill(plane, plane + static_cast<std::size_t>(Ho) * Wo, fill);
      for (int ci = 0; ci < Cin; ++ci) {
        const T* in_base = in + (static_cast<std::size_t>(n) * Cin + ci) *
                                    static_cast<std::size_t>(H) * W;
        for (int ki = 0; ki < kh; ++ki) {
          const int oh_lo = out_lo(ki, padding, stride);
          const int oh_hi = out_hi(ki, padding, stride, H, Ho);
          for (int kj = 0; kj < kw; ++kj) {
            const T w = kn[((static_cast<std::size_t>(co) * Cin + ci) * kh + ki) * kw + kj];
            if (stride == 1) {
              const int iw0 = kj - padding;
              const int ow_lo = std::max(0, -iw0);
              const int ow_hi = std::min(Wo, W - iw0);
              for (int oh = oh_lo; oh < oh_hi; ++oh) {
                const T* in_row = in_base + static_cast<std::size_t>(oh + ki - padding) * W;
                T* out_row = plane + static_cast<std::size_t>(oh) * Wo;
                for (int ow = ow_lo; ow < ow_hi; ++ow) out_row[ow] += w * in_row[ow + iw0];
              }
            } else {
              const int ow_lo = out_lo(kj, padding, stride);
              const int ow_hi = out_hi(kj, padding, stride, W, Wo);
              for (int oh = oh_lo; oh < oh_hi; ++oh) {
                const int ih = oh * stride + ki - padding;
                const T* in_row = in_base + static_cast<std::size_t>(ih) * W;
                T* out_row = plane + static_cast<std::size_t>(oh) * Wo;
                for (int ow = ow_lo; ow < ow_hi; ++ow) {
                  out_row[ow] += w * in_row[ow * stride + kj - padding];
                }
              }
            }
          }
        }
      }
    }
  });
  THRID_CHECK_FINITE(out_data, "conv2d");

  TensorT<T> out_t(Shape{N, Cout, Ho, Wo}, std::move(out_data));
  const int in_node = tape ? tape->node_of(input) : -1;
  const int k_node = tape ? tape->node_of(kernel) : -1;
  const int b_node = (tape && bias) ? tape->node_of(*bias) : -1;
  if (tape && (in_node >= 0 || k_node >= 0 || b_node >= 0)) {
    auto in_store = input.shared_values();
    auto k_store = kernel.shared_values();
    tape->emit(out_t, {in_node, k_node, b_node},
               [=](TapeT<T>& tp, int self) {
                 const std::vector<T>& go = tp.grad_of(self);
                 const T* g = go.data();
                 const T* inv = in_store->data();
                 const T* knv = k_store->data();
                 if (in_node >= 0) {
                   T* din = tp.grad_of(in_node).data();
                   parallel_chunks(static_cast<std::size_t>(N) * Cin,
                                   [&](std::size_t lo, std::size_t hi) {
                     for (std::size_t slot = lo; slot < hi; ++slot) {
                       const int n = static_cast<int>(slot) / Cin;
                       const int ci = static_cast<int>(slot) % Cin;
                       T* din_base = din + slot * static_cast<std::size_t>(H) * W;
                       for (int co = 0; co < Cout; ++co) {
                         const T* g_base = g + (static_cast<std::size_t>(n) * Cout + co) *
                                                   static_cast<std::size_t>(Ho) * Wo;
                         for (int ki = 0; ki < kh; ++ki) {
                           const int oh_lo = out_lo(ki, padding, stride);
                           const int oh_hi = out_hi(ki, padding, stride, H, Ho);
                           for (int kj = 0; kj < kw; ++kj) {
                             const T w =
                                 knv[((static_cast<std::size_t>(co) * Cin + ci) * kh + ki) * kw +
                                     kj];
                             if (stride == 1) {
                               const int iw0 = kj - padding;
                               const int ow_lo = std::max(0, -iw0);
                               const int ow_hi = std::min(Wo, W - iw0);
                               for (int oh = oh_lo; oh < oh_hi; ++oh) {
                                 T* din_row =
                                     din_base + static_cast<std::size_t>(oh + ki - padding) * W;
                                 const T* g_row = g_base + static_cast<std::size_t>(oh) * Wo;
                                 for (int ow = ow_lo; ow < ow_hi; ++ow) {
                                   din_row[ow + iw0] += w * g_row[ow];
                                 }
                               }
                             } else {
                               const int ow_lo = out_lo(kj, padding, stride);
                               const int ow_hi = out_hi(kj, padding, stride, W, Wo);
                               for (int oh = oh_lo; oh < oh_hi; ++oh) {
                                 const int ih = oh * stride + ki - padding;
                                 T* din_row = din_base + static_cast<std::size_t>(ih) * W;
                                 const T* g_row = g_base + static_cast<std::size_t>(oh) * Wo;
                                 for (int ow = ow_lo; ow < ow_hi; ++ow) {
                                   din_row[ow * stride + kj - padding] += w * g_row[ow];
                                 }
                               }
                             }
                           }
                         }
                       }
                     }
                   });
                 }
                 if (k_node >= 0) {
                   T* dk = tp.grad_of(k_node).data();
                   parallel_chunks(static_cast<std::size_t>(Cout) * Cin,
                                   [&](std::size_t lo, std::size_t hi) {
                     for (std::size_t slot = lo; slot < hi; ++slot) {
                       const int co = static_cast<int>(slot) / Cin;
                       const int ci = static_cast<int>(slot) % Cin;
                       for (int ki = 0; ki < kh; ++ki) {
                         const int oh_lo = out_lo(ki, padding, stride);
                         const int oh_hi = out_hi(ki, padding, stride, H, Ho);
                         for (int kj = 0; kj < kw; ++kj) {
                           const int ow_lo =
                               stride == 1 ? std::max(0, padding - kj) : out_lo(kj, padding, stride);
                           const int ow_hi = stride == 1 ? std::min(Wo, W - kj + padding)
                                                         : out_hi(kj, padding, stride, W, Wo);
                           T a0 = 0, a1 = 0, a2 = 0, a3 = 0;
                           for (int n = 0; n < N; ++n) {
                             const T* g_base = g + (static_cast<std::size_t>(n) * Cout + co) *
                                                       static_cast<std::size_t>(Ho) * Wo;
                             const T* in_base =
                                 inv + (static_cast<std::size_t>(n) * Cin + ci) *
                                           static_cast<std::size_t>(H) * W;
                             for (int oh = oh_lo; oh < oh_hi; ++oh) {
                               const int ih = oh * stride + ki - padding;
                               const T* g_row = g_base + static_cast<std::size_t>(oh) * Wo;
                               const T* in_row = in_base + static_cast<std::size_t>(ih) * W;
                               int ow = ow_lo;
                               if (stride == 1) {
                                 const int iw0 = kj - padding;
                                 for (; ow + 4 <= ow_hi; ow += 4) {
                                   a0 += g_row[ow] * in_row[ow + iw0];
                                   a1 += g_row[ow + 1] * in_row[ow + 1 + iw0];
                                   a2 += g_row[ow + 2] * in_row[ow + 2 + iw0];
                                   a3 += g_row[ow + 3] * in_row[ow + 3 + iw0];
                                 }
                                 for (; ow < ow_hi; ++ow) a0 += g_row[ow] * in_row[ow + iw0];
                               } else {
                                 for (; ow < ow_hi; ++ow) {
                                   a0 += g_row[ow] * in_row[ow * stride + kj - padding];
                                 }
                               }
                             }
                           }
                           dk[(slot * kh + ki) * kw + kj] += (a0 + a1) + (a2 + a3);
                         }
                       }
                     }
                   });
                 }
                 if (b_node >= 0) {
                   T* db = tp.grad_of(b_node).data();
                   for (int co = 0; co < Cout; ++co) {
                     T acc = 0;
                     for (int n = 0; n < N; ++n) {
                       const T* g_base = g + (static_cast<std::size_t>(n) * Cout + co) *
                                                 static_cast<std::size_t>(Ho) * Wo;
                       for (std::size_t i = 0; i < static_cast<std::size_t>(Ho) * Wo; ++i) {
                         acc += g_base[i];
                       }
                     }
                     db[co] += acc;
                   }
                 }
               });
  }
  return out_t;
}

template <typename T>
TensorT<T> avg_pool2d(TapeT<T>* tape, const TensorT<T>& input, int window, int stride) {
  const Shape& is = input.shape();
  if (is.rank != 4) throw ShapeError("avg_pool2d: expected rank-4 input, got " + is.str());
  if (window < 1 || stride < 1) throw ShapeError("avg_pool2d: window and stride must be >= 1");
  const int N = is[0], C = is[1], H = is[2], W = is[3];
  if (H < window || W < window) {
    throw ShapeError("avg_pool2d: window " + std::to_string(window) + " larger than input " +
                     std::to_string(H) + "x" + std::to_string(W));
  }
  const int Ho = (H - window) / stride + 1;
  const int Wo = (W - window) / stride + 1;
  const T inv_area = T(1) / static_cast<T>(window * window);

  const T* in = input.data();
  std::vector<T> out_data(static_cast<std::size_t>(N) * C * Ho * Wo);
  T* out = out_data.data();
  parallel_chunks(static_cast<std::size_t>(N) * C, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t slot = lo; slot < hi; ++slot) {
      const T* in_base = in + slot * static_cast<std::size_t>(H) * W;
      T* out_base = out + slot * static_cast<std::size_t>(Ho) * Wo;
      for (int oh = 0; oh < Ho; ++oh) {
        for (int ow = 0; ow < Wo; ++ow) {
          T acc = 0;
          for (int i = 0; i < window; ++i) {
            const T* row = in_base + static_cast<std::size_t>(oh * stride + i) * W + ow * stride;
            for (int j = 0; j < window; ++j) acc += row[j];
          }
          out_base[static_cast<std::size_t>(oh) * Wo + ow] = acc * inv_area;
        }
      }
    }
  });
  THRID_CHECK_FINITE(out_data, "avg_pool2d");

  TensorT<T> out_t(Shape{N, C, Ho, Wo}, std::move(out_data));
  const int in_node = tape ? tape->node_of(input) : -1;
  if (tape && in_node >= 0) {
    tape->emit(out_t, {in_node}, [=](TapeT<T>& tp, int self) {
      const T* g = tp.grad_of(self).data();
      T* din = tp.grad_of(in_node).data();
      parallel_chunks(static_cast<std::size_t>(N) * C, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t slot = lo; slot < hi; ++slot) {
          const T* g_base = g + slot * static_cast<std::size_t>(Ho) * Wo;
          T* din_base = din + slot * static_cast<std::size_t>(H) * W;
          for (int oh = 0; oh < Ho; ++oh) {
            for (int ow = 0; ow < Wo; ++ow) {
              const T gv = g_base[static_cast<std::size_t>(oh) * Wo + ow] * inv_area;
              for (int i = 0; i < window; ++i) {
                T* row = din_base + static_cast<std::size_t>(oh * stride + i) * W + ow * stride;
                for (int j = 0; j < window; ++j) row[j] += gv;
              }
            }
          }
        }
      });
    });
  }
  return out_t;
}

template <typename T>
TensorT<T> global_avg_pool(TapeT<T>* tape, const TensorT<T>& input) {
  const Shape& is = input.shape();
  if (is.rank != 4) throw ShapeError("global_avg_pool: expected rank-4 input, got " + is.str());
  const int N = is[0], C = is[1], H = is[2], W = is[3];
  const std::size_t hw = static_cast<std::size_t>(H) * W;
  const T inv = T(1) / static_cast<T>(hw);

  const T* in = input.data();
  std::vector<T> out_data(static_cast<std::size_t>(N) * C);
  for (std::size_t slot = 0; slot < out_data.size(); ++slot) {
    const T* base = in + slot * hw;
    T acc = 0;
    for (std::size_t i = 0; i < hw; ++i) acc += base[i];
    out_data[slot] = acc * inv;
  }
  THRID_CHECK_FINITE(out_data, "global_avg_pool");

  TensorT<T> out_t(Shape{N, C}, std::move(out_data));
  const int in_node = tape ? tape->node_of(input) : -1;
  if (tape && in_node >= 0) {
    tape->emit(out_t, {in_node}, [=](TapeT<T>& tp, int self) {
      const T* g = tp.grad_of(self).data();
      T* din = tp.grad_of(in_node).data();
      for (std::size_t slot = 0; slot < static_cast<std::size_t>(N) * C; ++slot) {
        const T gv = g[slot] * inv;
        T* base = din + slot * hw;
        for (std::size_t i = 0; i < hw; ++i) base[i] += gv;
      }
    });
  }
  return out_t;
}

template <typename T>
TensorT<T> concat_channels(TapeT<T>* tape, const TensorT<T>& a, const TensorT<T>& b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (as.rank != 4 || bs.rank != 4) {
    throw ShapeError("concat_channels: expected rank-4 inputs, got " + as.str() + " and " +
                     bs.str());
  }
  if (as[0] != bs[0] || as[2] != bs[2] || as[3] != bs[3]) {
    throw ShapeError("concat_channels: batch/spatial mismatch " + as.str() + " vs " + bs.str());
  }
  const int N = as[0], Ca = as[1], Cb = bs[1], H = as[2], W = as[3];
  const std::size_t hw = static_cast<std::size_t>(H) * W;
  const std::size_t plane_a = static_cast<std::size_t>(Ca) * hw;
  const std::size_t plane_b = static_cast<std::size_t>(Cb) * hw;

  std::vector<T> out_data(static_cast<std::size_t>(N) * (plane_a + plane_b));
  for (int n = 0; n < N; ++n) {
    T* dst = out_data.data() + static_cast<std::size_t>(n) * (plane_a + plane_b);
    if (plane_a) std::memcpy(dst, a.data() + n * plane_a, plane_a * sizeof(T));
    if (plane_b) std::memcpy(dst + plane_a, b.data() + n * plane_b, plane_b * sizeof(T));
  }

  TensorT<T> out_t(Shape{N, Ca + Cb, H, W}, std::move(out_data));
  const int a_node = tape ? tape->node_of(a) : -1;
  const int b_node = tape ? tape->node_of(b) : -1;
  if (tape && (a_node >= 0 || b_node >= 0)) {
    tape->emit(out_t, {a_node, b_node}, [=](TapeT<T>& tp, int self) {
      const T* g = tp.grad_of(self).data();
      for (int n = 0; n < N; ++n) {
        const T* src = g + static_cast<std::size_t>(n) * (plane_a + plane_b);
        if (a_node >= 0) {
          T* da = tp.grad_of(a_node).data() + n * plane_a;
          for (std::size_t i = 0; i < plane_a; ++i) da[i] += src[i];
        }
        if (b_node >= 0) {
          T* db = tp.grad_of(b_node).data() + n * plane_b;
          for (std::size_t i = 0; i < plane_b; ++i) db[i] += src[plane_a + i];
        }
      }
    });
  }
  return out_t;
}

template <typename T>
TensorT<T> slice_channels(const TensorT<T>& t, int c0, int c1) {
  const Shape& s = t.shape();
  if (s.rank != 4) throw ShapeError("slice_channels: expected rank-4 input, got " + s.str());
  if (c0 < 0 || c1 < c0 || c1 > s[1]) {
    throw ShapeError("slice_channels: bad range [" + std::to_string(c0) + "," +
                     std::to_string(c1) + ") for " + s.str());
  }
  const int N = s[0], C = s[1], H = s[2], W = s[3];
  const std::size_t hw = static_cast<std::size_t>(H) * W;
  const int Cs = c1 - c0;
  std::vector<T> out_data(static_cast<std::size_t>(N) * Cs * hw);
  for (int n = 0; n < N; ++n) {
    const T* src = t.data() + (static_cast<std::size_t>(n) * C + c0) * hw;
    T* dst = out_data.data() + static_cast<std::size_t>(n) * Cs * hw;
    std::memcpy(dst, src, static_cast<std::size_t>(Cs) * hw * sizeof(T));
  }
  return TensorT<T>(Shape{N, Cs, H, W}, std::move(out_data));
}

template <typename T>
TensorT<T> batch_norm(TapeT<T>* tape, const TensorT<T>& input, const TensorT<T>& gamma,
                      const TensorT<T>& beta, TensorT<T>& running_mean, TensorT<T>& running_var,
                      BnMode mode, T momentum, T epsilon) {
  const Shape& is = input.shape();
  if (is.rank != 4) throw ShapeError("batch_norm: expected rank-4 input, got " + is.str());
  const int N = is[0], C = is[1], H = is[2], W = is[3];
  auto check_param = [&](const TensorT<T>& p, const char* name) {
    if (p.shape().rank != 1 || p.shape()[0] != C) {
      throw ShapeError(std::string("batch_norm: ") + name + " shape " + p.shape().str() +
                       " != [" + std::to_string(C) + "]");
    }
  };
  check_param(gamma, "gamma");
  check_param(beta, "beta");
  check_param(running_mean, "running_mean");
  check_param(running_var, "running_var");

  const std::size_t hw = static_cast<std::size_t>(H) * W;
  const std::size_t m = static_cast<std::size_t>(N) * hw;
  const T* in = input.data();
  const T* gm = gamma.data();
  const T* bt = beta.data();

  std::vector<T> out_data(input.size());
  const int in_node = tape ? tape->node_of(input) : -1;
  const int g_node = tape ? tape->node_of(gamma) : -1;
  const int b_node = tape ? tape->node_of(beta) : -1;
  const bool track = tape && (in_node >= 0 || g_node >= 0 || b_node >= 0);

  if (mode == BnMode::train) {
    if (m < 2) {
      throw ShapeError("batch_norm: train mode needs N*H*W >= 2, got " + std::to_string(m));
    }
    auto xhat = std::make_shared<std::vector<T>>(input.size());
    auto inv_std = std::make_shared<std::vector<T>>(static_cast<std::size_t>(C));
    std::vector<T> new_mean(static_cast<std::size_t>(C));
    std::vector<T> new_var(static_cast<std::size_t>(C));

    parallel_chunks(static_cast<std::size_t>(C), [&](std::size_t lo, std::size_t hi) {
      for (std::size_t c = lo; c < hi; ++c) {
        double acc = 0.0;
        for (int n = 0; n < N; ++n) {
          const T* base = in + (static_cast<std::size_t>(n) * C + c) * hw;
          for (std::size_t i = 0; i < hw; ++i) acc += static_cast<double>(base[i]);
        }
        const double mean = acc / static_cast<double>(m);
        double vacc = 0.0;
        for (int n = 0; n < N; ++n) {
          const T* base = in + (static_cast<std::size_t>(n) * C + c) * hw;
          for (std::size_t i = 0; i < hw; ++i) {
            const double d = static_cast<double>(base[i]) - mean;
            vacc += d * d;
          }
        }
        const double var = vacc / static_cast<double>(m);
        const double inv = 1.0 / std::sqrt(var + static_cast<double>(epsilon));
        (*inv_std)[c] = static_cast<T>(inv);
        new_mean[c] = static_cast<T>(mean);
        new_var[c] = static_cast<T>(var);
        for (int n = 0; n < N; ++n) {
          const T* base = in + (static_cast<std::size_t>(n) * C + c) * hw;
          T* xh = xhat->data() + (static_cast<std::size_t>(n) * C + c) * hw;
          T* ob = out_data.data() + (static_cast<std::size_t>(n) * C + c) * hw;
          const T mu = static_cast<T>(mean);
          const T iv = static_cast<T>(inv);
          for (std::size_t i = 0; i < hw; ++i) {
            const T v = (base[i] - mu) * iv;
            xh[i] = v;
            ob[i] = gm[c] * v + bt[c];
          }
        }
      }
    });

    // Fold the batch statistics into the running estimates.
    std::vector<T> rm(running_mean.values().begin(), running_mean.values().end());
    std::vector<T> rv(running_var.values().begin(), running_var.values().end());
    for (int c = 0; c < C; ++c) {
      rm[static_cast<std::size_t>(c)] =
          momentum * rm[static_cast<std::size_t>(c)] + (T(1) - momentum) * new_mean[c];
      rv[static_cast<std::size_t>(c)] =
          momentum * rv[static_cast<std::size_t>(c)] + (T(1) - momentum) * new_var[c];
    }
    running_mean.assign(std::move(rm));
    running_var.assign(std::move(rv));

    THRID_CHECK_FINITE(out_data, "batch_norm");
    TensorT<T> out_t(is, std::move(out_data));
    if (track) {
      auto g_store = gamma.shared_values();
      tape->emit(out_t, {in_node, g_node, b_node}, [=](TapeT<T>& tp, int self) {
        const T* g = tp.grad_of(self).data();
        const T* xh = xhat->data();
        const T* gv = g_store->data();
        T* din = in_node >= 0 ? tp.grad_of(in_node).data() : nullptr;
        T* dgm = g_node >= 0 ? tp.grad_of(g_node).data() : nullptr;
        T* dbt = b_node >= 0 ? tp.grad_of(b_node).data() : nullptr;
        parallel_chunks(static_cast<std::size_t>(C), [&](std::size_t lo, std::size_t hi) {
          for (std::size_t c = lo; c < hi; ++c) {
            double sum_dy = 0.0, sum_dy_xhat = 0.0;
            for (int n = 0; n < N; ++n) {
              const std::size_t off = (static_cast<std::size_t>(n) * C + c) * hw;
              for (std::size_t i = 0; i < hw; ++i) {
                sum_dy += static_cast<double>(g[off + i]);
                sum_dy_xhat += static_cast<double>(g[off + i]) * static_cast<double>(xh[off + i]);
              }
            }
            if (dgm) dgm[c] += static_cast<T>(sum_dy_xhat);
            if (dbt) dbt[c] += static_cast<T>(sum_dy);
            if (din) {
              const T mean_dy = static_cast<T>(sum_dy / static_cast<double>(m));
              const T mean_dy_xhat = static_cast<T>(sum_dy_xhat / static_cast<double>(m));
              const T scale = gv[c] * (*inv_std)[c];
              for (int n = 0; n < N; ++n) {
                const std::size_t off = (static_cast<std::size_t>(n) * C + c) * hw;
                for (std::size_t i = 0; i < hw; ++i) {
                  din[off + i] += scale * (g[off + i] - mean_dy - xh[off + i] * mean_dy_xhat);
                }
              }
            }
          }
        });
      });
    }
    return out_t;
  }

  // Eval mode: normalize with the running statistics.
  const T* rm = running_mean.data();
  const T* rv = running_var.data();
  std::vector<T> inv_std(static_cast<std::size_t>(C));
  for (int c = 0; c < C; ++c) {
    inv_std[static_cast<std::size_t>(c)] =
        static_cast<T>(1.0 / std::sqrt(static_cast<double>(rv[c]) + static_cast<double>(epsilon)));
  }
  parallel_chunks(static_cast<std::size_t>(N) * C, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t slot = lo; slot < hi; ++slot) {
      const int c = static_cast<int>(slot) % C;
      const T* base = in + slot * hw;
      T* ob = out_data.data() + slot * hw;
      const T mu = rm[c];
      const T iv = inv_std[static_cast<std::size_t>(c)];
      for (std::size_t i = 0; i < hw; ++i) ob[i] = gm[c] * (base[i] - mu) * iv + bt[c];
    }
  });
  THRID_CHECK_FINITE(out_data, "batch_norm");

  TensorT<T> out_t(is, std::move(out_data));
  if (track) {
    auto in_store = input.shared_values();
    auto g_store = gamma.shared_values();
    auto rm_store = running_mean.shared_values();
    auto iv_store = std::make_shared<std::vector<T>>(std::move(inv_std));
    tape->emit(out_t, {in_node, g_node, b_node}, [=](TapeT<T>& tp, int self) {
      const T* g = tp.grad_of(self).data();
      const T* xv = in_store->data();
      const T* gv = g_store->data();
      const T* rmv = rm_store->data();
      const T* iv = iv_store->data();
      T* din = in_node >= 0 ? tp.grad_of(in_node).data() : nullptr;
      T* dgm = g_node >= 0 ? tp.grad_of(g_node).data() : nullptr;
      T* dbt = b_node >= 0 ? tp.grad_of(b_node).data() : nullptr;
      for (int c = 0; c < C; ++c) {
        double sum_dy = 0.0, sum_dy_xhat = 0.0;
        const T scale = gv[c] * iv[c];
        for (int n = 0; n < N; ++n) {
          const std::size_t off = (static_cast<std::size_t>(n) * C + c) * hw;
          for (std::size_t i = 0; i < hw; ++i) {
            const T xhat = (xv[off + i] - rmv[c]) * iv[c];
            sum_dy += static_cast<double>(g[off + i]);
            sum_dy_xhat += static_cast<double>(g[off + i]) * static_cast<double>(xhat);
            if (din) din[off + i] += scale * g[off + i];
          }
        }
        if (dgm) dgm[c] += static_cast<T>(sum_dy_xhat);
        if (dbt) dbt[c] += static_cast<T>(sum_dy);
      }
    });
  }
  return out_t;
}

template <typename T>
TensorT<T> relu(TapeT<T>* tape, const TensorT<T>& input) {
  std::vector<T> out_data(input.size());
  const T* in = input.data();
  for (std::size_t i = 0; i < out_data.size(); ++i) out_data[i] = in[i] > T(0) ? in[i] : T(0);

  TensorT<T> out_t(input.shape(), std::move(out_data));
  const int in_node = tape ? tape->node_of(input) : -1;
  if (tape && in_node >= 0) {
    auto in_store = input.shared_values();
    tape->emit(out_t, {in_node}, [=](TapeT<T>& tp, int self) {
      const T* g = tp.grad_of(self).data();
      const T* x = in_store->data();
      T* din = tp.grad_of(in_node).data();
      const std::size_t n = in_store->size();
      for (std::size_t i = 0; i < n; ++i) {
        if (x[i] > T(0)) din[i] += g[i];
      }
    });
  }
  return out_t;
}

template <typename T>
TensorT<T> linear(TapeT<T>* tape, const TensorT<T>& input, const TensorT<T>& weight,
                  const TensorT<T>& bias) {
  const Shape& is = input.shape();
  const Shape& ws = weight.shape();
  if (is.rank != 2 || ws.rank != 2) {
    throw ShapeError("linear: expected rank-2 input and weight, got " + is.str() + " and " +
                     ws.str());
  }
  const int N = is[0], F = is[1];
  const int K = ws[0], WF = ws[1];
  if (F != WF) {
    throw ShapeError("linear: feature dims mismatch, input " + std::to_string(F) + " vs weight " +
                     std::to_string(WF));
  }
  if (bias.shape().rank != 1 || bias.shape()[0] != K) {
    throw ShapeError("linear: bias shape " + bias.shape().str() + " != [" + std::to_string(K) +
                     "]");
  }

  const T* in = input.data();
  const T* w = weight.data();
  const T* b = bias.data();
  std::vector<T> out_data(static_cast<std::size_t>(N) * K);
  for (int n = 0; n < N; ++n) {
    const T* in_row = in + static_cast<std::size_t>(n) * F;
    T* out_row = out_data.data() + static_cast<std::size_t>(n) * K;
    for (int k = 0; k < K; ++k) {
      const T* w_row = w + static_cast<std::size_t>(k) * F;
      T acc = 0;
      for (int f = 0; f < F; ++f) acc += in_row[f] * w_row[f];
      out_row[k] = acc + b[k];
    }
  }
  THRID_CHECK_FINITE(out_data, "linear");

  TensorT<T> out_t(Shape{N, K}, std::move(out_data));
  const int in_node = tape ? tape->node_of(input) : -1;
  const int w_node = tape ? tape->node_of(weight) : -1;
  const int b_node = tape ? tape->node_of(bias) : -1;
  if (tape && (in_node >= 0 || w_node >= 0 || b_node >= 0)) {
    auto in_store = input.shared_values();
    auto w_store = weight.shared_values();
    tape->emit(out_t, {in_node, w_node, b_node}, [=](TapeT<T>& tp, int self) {
      const T* g = tp.grad_of(self).data();
      if (in_node >= 0) {
        T* din = tp.grad_of(in_node).data();
        const T* wv = w_store->data();
        for (int n = 0; n < N; ++n) {
          const T* g_row = g + static_cast<std::size_t>(n) * K;
          T* d_row = din + static_cast<std::size_t>(n) * F;
          for (int k = 0; k < K; ++k) {
            const T gv = g_row[k];
            const T* w_row = wv + static_cast<std::size_t>(k) * F;
            for (int f = 0; f < F; ++f) d_row[f] += gv * w_row[f];
          }
        }
      }
      if (w_node >= 0) {
        T* dw = tp.grad_of(w_node).data();
        const T* xv = in_store->data();
        for (int n = 0; n < N; ++n) {
          const T* g_row = g + static_cast<std::size_t>(n) * K;
          const T* x_row = xv + static_cast<std::size_t>(n) * F;
          for (int k = 0; k < K; ++k) {
            const T gv = g_row[k];
            T* dw_row = dw + static_cast<std::size_t>(k) * F;
            for (int f = 0; f < F; ++f) dw_row[f] += gv * x_row[f];
          }
        }
      }
      if (b_node >= 0) {
        T* db = tp.grad_of(b_node).data();
        for (int n = 0; n < N; ++n) {
          const T* g_row = g + static_cast<std::size_t>(n) * K;
          for (int k = 0; k < K; ++k) db[k] += g_row[k];
        }
      }
    });
  }
  return out_t;
}

template <typename T>
CrossEntropyOut<T> softmax_cross_entropy(TapeT<T>* tape, const TensorT<T>& logits,
                                         const std::vector<int>& labels) {
  const Shape& ls = logits.shape();
  if (ls.rank != 2) throw ShapeError("softmax_cross_entropy: expected rank-2 logits, got " + ls.str());
  const int N = ls[0], K = ls[1];
  if (static_cast<int>(labels.size()) != N) {
    throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(N) + " rows");
  }
  for (int n = 0; n < N; ++n) {
    if (labels[static_cast<std::size_t>(n)] < 0 || labels[static_cast<std::size_t>(n)] >= K) {
      throw ShapeError("softmax_cross_entropy: label " +
                       std::to_string(labels[static_cast<std::size_t>(n)]) + " out of range [0," +
                       std::to_string(K) + ")");
    }
  }

  const T* x = logits.data();
  std::vector<T> probs_data(static_cast<std::size_t>(N) * K);
  double loss_acc = 0.0;
  for (int n = 0; n < N; ++n) {
    const T* row = x + static_cast<std::size_t>(n) * K;
    T mx = row[0];
    for (int k = 1; k < K; ++k) mx = std::max(mx, row[k]);
    double z = 0.0;
    for (int k = 0; k < K; ++k) z += std::exp(static_cast<double>(row[k] - mx));
    const double logz = std::log(z);
    T* p_row = probs_data.data() + static_cast<std::size_t>(n) * K;
    for (int k = 0; k < K; ++k) {
      p_row[k] = static_cast<T>(std::exp(static_cast<double>(row[k] - mx)) / z);
    }
    loss_acc += -(static_cast<double>(row[labels[static_cast<std::size_t>(n)]] - mx) - logz);
  }
  const T loss_value = static_cast<T>(loss_acc / static_cast<double>(N));

  CrossEntropyOut<T> out;
  out.probs = TensorT<T>(Shape{N, K}, std::vector<T>(probs_data));
  out.loss = TensorT<T>(Shape{1}, std::vector<T>{loss_value});
  const int l_node = tape ? tape->node_of(logits) : -1;
  if (tape && l_node >= 0) {
    auto p_store = std::make_shared<std::vector<T>>(std::move(probs_data));
    auto y = std::make_shared<std::vector<int>>(labels);
    tape->emit(out.loss, {l_node}, [=](TapeT<T>& tp, int self) {
      const T gl = tp.grad_of(self)[0];
      T* dl = tp.grad_of(l_node).data();
      const T* p = p_store->data();
      const T inv_n = T(1) / static_cast<T>(N);
      for (int n = 0; n < N; ++n) {
        const int yn = (*y)[static_cast<std::size_t>(n)];
        for (int k = 0; k < K; ++k) {
          const T delta = k == yn ? T(1) : T(0);
          dl[static_cast<std::size_t>(n) * K + k] +=
              gl * (p[static_cast<std::size_t>(n) * K + k] - delta) * inv_n;
        }
      }
    });
  }
  return out;
}

template <typename T>
TensorT<T> add(TapeT<T>* tape, const TensorT<T>& a, const TensorT<T>& b) {
  if (!(a.shape() == b.shape())) {
    throw ShapeError("add: shape mismatch " + a.shape().str() + " vs " + b.shape().str());
  }
  std::vector<T> out_data(a.size());
  for (std::size_t i = 0; i < out_data.size(); ++i) out_data[i] = a.data()[i] + b.data()[i];
  TensorT<T> out_t(a.shape(), std::move(out_data));
  const int a_node = tape ? tape->node_of(a) : -1;
  const int b_node = tape ? tape->node_of(b) : -1;
  if (tape && (a_node >= 0 || b_node >= 0)) {
    tape->emit(out_t, {a_node, b_node}, [=](TapeT<T>& tp, int self) {
      const std::vector<T>& g = tp.grad_of(self);
      if (a_node >= 0) {
        T* da = tp.grad_of(a_node).data();
        for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i];
      }
      if (b_node >= 0) {
        T* db = tp.grad_of(b_node).data();
        for (std::size_t i = 0; i < g.size(); ++i) db[i] += g[i];
      }
    });
  }
  return out_t;
}

template <typename T>
TensorT<T> mul(TapeT<T>* tape, const TensorT<T>& a, const TensorT<T>& b) {
  if (!(a.shape() == b.shape())) {
    throw ShapeError("mul: shape mismatch " + a.shape().str() + " vs " + b.shape().str());
  }
  std::vector<T> out_data(a.size());
  for (std::size_t i = 0; i < out_data.size(); ++i) out_data[i] = a.data()[i] * b.data()[i];
  TensorT<T> out_t(a.shape(), std::move(out_data));
  const int a_node = tape ? tape->node_of(a) : -1;
  const int b_node = tape ? tape->node_of(b) : -1;
  if (tape && (a_node >= 0 || b_node >= 0)) {
    auto a_store = a.shared_values();
    auto b_store = b.shared_values();
    tape->emit(out_t, {a_node, b_node}, [=](TapeT<T>& tp, int self) {
      const std::vector<T>& g = tp.grad_of(self);
      if (a_node >= 0) {
        T* da = tp.grad_of(a_node).data();
        for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * (*b_store)[i];
      }
      if (b_node >= 0) {
        T* db = tp.grad_of(b_node).data();
        for (std::size_t i = 0; i < g.size(); ++i) db[i] += g[i] * (*a_store)[i];
      }
    });
  }
  return out_t;
}

template <typename T>
TensorT<T> sum(TapeT<T>* tape, const TensorT<T>& t) {
  double acc = 0.0;
  for (std::size_t i = 0; i < t.size(); ++i) acc += static_cast<double>(t.data()[i]);
  TensorT<T> out_t(Shape{1}, std::vector<T>{static_cast<T>(acc)});
  const int t_node = tape ? tape->node_of(t) : -1;
  if (tape && t_node >= 0) {
    const std::size_t n = t.size();
    tape->emit(out_t, {t_node}, [=](TapeT<T>& tp, int self) {
      const T g = tp.grad_of(self)[0];
      T* dt = tp.grad_of(t_node).data();
      for (std::size_t i = 0; i < n; ++i) dt[i] += g;
    });
  }
  return out_t;
}

template <typename T>
TensorT<T> pick(TapeT<T>* tape, const TensorT<T>& t, std::size_t flat_index) {
  if (flat_index >= t.size()) {
    throw ShapeError("pick: index " + std::to_string(flat_index) + " out of range for " +
                     std::to_string(t.size()) + " elements");
  }
  TensorT<T> out_t(Shape{1}, std::vector<T>{t.data()[flat_index]});
  const int t_node = tape ? tape->node_of(t) : -1;
  if (tape && t_node >= 0) {
    tape->emit(out_t, {t_node}, [=](TapeT<T>& tp, int self) {
      tp.grad_of(t_node)[flat_index] += tp.grad_of(self)[0];
    });
  }
  return out_t;
}

template <typename T>
TensorT<T> reshape(TapeT<T>* tape, const TensorT<T>& t, Shape shape) {
  if (shape.numel() != t.size()) {
    throw ShapeError("reshape: cannot view " + t.shape().str() + " as " + shape.str());
  }
  TensorT<T> out_t(shape, std::vector<T>(t.values().begin(), t.values().end()));
  const int t_node = tape ? tape->node_of(t) : -1;
  if (tape && t_node >= 0) {
    tape->emit(out_t, {t_node}, [=](TapeT<T>& tp, int self) {
      const std::vector<T>& g = tp.grad_of(self);
      T* dt = tp.grad_of(t_node).data();
      for (std::size_t i = 0; i < g.size(); ++i) dt[i] += g[i];
    });
  }
  return out_t;
}

#define THRID_INSTANTIATE_OPS(T)                                                               \
  template TensorT<T> conv2d<T>(TapeT<T>*, const TensorT<T>&, const TensorT<T>&,               \
                                const TensorT<T>*, int, int);                                  \
  template TensorT<T> avg_pool2d<T>(TapeT<T>*, const TensorT<T>&, int, int);                   \
  template TensorT<T> global_avg_pool<T>(TapeT<T>*, const TensorT<T>&);                        \
  template TensorT<T> concat_channels<T>(TapeT<T>*, const TensorT<T>&, const TensorT<T>&);     \
  template TensorT<T> slice_channels<T>(const TensorT<T>&, int, int);                          \
  template TensorT<T> batch_norm<T>(TapeT<T>*, const TensorT<T>&, const TensorT<T>&,           \
                                    const TensorT<T>&, TensorT<T>&, TensorT<T>&, BnMode, T, T); \
  template TensorT<T> relu<T>(TapeT<T>*, const TensorT<T>&);                                   \
  template TensorT<T> linear<T>(TapeT<T>*, const TensorT<T>&, const TensorT<T>&,               \
                                const TensorT<T>&);                                            \
  template CrossEntropyOut<T> softmax_cross_entropy<T>(TapeT<T>*, const TensorT<T>&,           \
                                                       const std::vector<int>&);               \
  template TensorT<T> add<T>(TapeT<T>*, const TensorT<T>&, const TensorT<T>&);                 \
  template TensorT<T> mul<T>(TapeT<T>*, const TensorT<T>&, const TensorT<T>&);                 \
  template TensorT<T> sum<T>(TapeT<T>*, const TensorT<T>&);                                    \
  template TensorT<T> pick<T>(TapeT<T>*, const TensorT<T>&, std::size_t);                      \
  template TensorT<T> reshape<T>(TapeT<T>*, const TensorT<T>&, Shape);

THRID_INSTANTIATE_OPS(float)
THRID_INSTANTIATE_OPS(double)

#undef THRID_INSTANTIATE_OPS

}  // namespace thrid
