#pragma once

#include <cstddef>
#include <vector>

#include "thrid/tensor.hpp"

namespace thrid {

// Neural-network operations over rank-4 (and rank-2) tensors. Every op is a
// pure function of its inputs; passing a tape records a backward rule when at
// least one operand is tracked on that tape. tape == nullptr runs plain
// forward. Accumulation orders are fixed, so results do not depend on the
// worker thread count.

enum class BnMode { train, eval };

// Cross-correlation of input [N,Cin,H,W] with kernel [Cout,Cin,kh,kw].
// H' = (H + 2*padding - kh) / stride + 1, likewise W'.
template <typename T>
TensorT<T> conv2d(TapeT<T>* tape, const TensorT<T>& input, const TensorT<T>& kernel,
                  const TensorT<T>* bias, int stride, int padding);

// Mean over window x window patches; H' = (H - window) / stride + 1.
template <typename T>
TensorT<T> avg_pool2d(TapeT<T>* tape, const TensorT<T>& input, int window, int stride);

// [N,C,H,W] -> [N,C]: mean over the spatial extent.
template <typename T>
TensorT<T> global_avg_pool(TapeT<T>* tape, const TensorT<T>& input);

// [N,Ca,H,W] ++ [N,Cb,H,W] -> [N,Ca+Cb,H,W]; values are copied bit-exactly.
template <typename T>
TensorT<T> concat_channels(TapeT<T>* tape, const TensorT<T>& a, const TensorT<T>& b);

// Channel slice [c0, c1) of a rank-4 tensor. Forward-only helper.
template <typename T>
TensorT<T> slice_channels(const TensorT<T>& t, int c0, int c1);

// Batch normalization over (N,H,W) per channel. Train mode normalizes with
// batch statistics (population variance) and folds them into the running
// stats by exponential moving average; eval mode normalizes with the running
// stats. running_mean / running_var are updated in place (single writer).
template <typename T>
TensorT<T> batch_norm(TapeT<T>* tape, const TensorT<T>& input, const TensorT<T>& gamma,
                      const TensorT<T>& beta, TensorT<T>& running_mean, TensorT<T>& running_var,
                      BnMode mode, T momentum, T epsilon);

// max(0, x); gradient is 0 at x == 0 (subgradient choice, relied upon by the
// finite-difference checks which avoid the kink).
template <typename T>
TensorT<T> relu(TapeT<T>* tape, const TensorT<T>& input);

// input [N,F] * weight [K,F]^T + bias [K] -> [N,K].
template <typename T>
TensorT<T> linear(TapeT<T>* tape, const TensorT<T>& input, const TensorT<T>& weight,
                  const TensorT<T>& bias);

template <typename T>
struct CrossEntropyOut {
  TensorT<T> loss;   // scalar: mean over the batch of -log p[label]
  TensorT<T> probs;  // [N,K] softmax rows (detached)
};

// Softmax cross-entropy with max-subtraction for stability.
template <typename T>
CrossEntropyOut<T> softmax_cross_entropy(TapeT<T>* tape, const TensorT<T>& logits,
                                         const std::vector<int>& labels);

// Small graph utilities (tests, saliency probes).
template <typename T>
TensorT<T> add(TapeT<T>* tape, const TensorT<T>& a, const TensorT<T>& b);
template <typename T>
TensorT<T> mul(TapeT<T>* tape, const TensorT<T>& a, const TensorT<T>& b);
template <typename T>
TensorT<T> sum(TapeT<T>* tape, const TensorT<T>& t);
template <typename T>
TensorT<T> pick(TapeT<T>* tape, const TensorT<T>& t, std::size_t flat_index);
template <typename T>
TensorT<T> reshape(TapeT<T>* tape, const TensorT<T>& t, Shape shape);

}  // namespace thrid
