#pragma once

#include <array>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "thrid/error.hpp"

namespace thrid {

// Dense row-major shape, rank <= 4. Image tensors use (batch, channels,
// height, width) order.
struct Shape {
  std::array<int, 4> d{1, 1, 1, 1};
  int rank = 0;

  Shape() = default;
  Shape(std::initializer_list<int> dims);

  int operator[](int i) const { return d[static_cast<std::size_t>(i)]; }
  std::size_t numel() const;
  bool operator==(const Shape& other) const { return rank == other.rank && d == other.d; }
  std::string str() const;  // e.g. "2x3x4"
};

template <typename T>
class TapeT;

// Value-semantic tensor. The payload is shared, so copies are cheap and tape
// closures can capture inputs without duplicating them. Payloads are treated
// as immutable once an operation has consumed them; assign() swaps in a fresh
// buffer instead of mutating in place.
template <typename T>
class TensorT {
 public:
  TensorT() = default;
  TensorT(Shape shape, std::vector<T> values);

  static TensorT zeros(Shape shape);
  static TensorT full(Shape shape, T value);

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return store_ ? store_->size() : 0; }
  bool empty() const { return size() == 0; }

  std::span<const T> values() const {
    return store_ ? std::span<const T>(*store_) : std::span<const T>();
  }
  // Borrow the payload (for tape closures); never mutated once shared.
  std::shared_ptr<const std::vector<T>> shared_values() const { return store_; }
  const T* data() const { return store_ ? store_->data() : nullptr; }
  T value_at(std::size_t i) const { return (*store_)[i]; }

  // 4-D accessor (rank must be 4); used mostly by tests.
  T at(int n, int c, int h, int w) const;

  // Replace the payload with a fresh buffer of identical length.
  void assign(std::vector<T> values);

  // Tape binding: a tensor participates in gradient flow only for the tape
  // whose tag it carries.
  bool requires_grad = false;
  int node = -1;
  const void* tape_tag = nullptr;

 private:
  Shape shape_;
  std::shared_ptr<std::vector<T>> store_;

  friend class TapeT<T>;
};

// Reverse-mode tape. Operations append nodes in topological order (inputs
// always precede their consumers); backward() replays them exactly once in
// reverse. Gradients accumulate by summation. A tape is single-use: one
// forward pass, one backward().
template <typename T>
class TapeT {
 public:
  using BackwardFn = std::function<void(TapeT&, int self)>;

  TapeT() = default;
  TapeT(const TapeT&) = delete;
  TapeT& operator=(const TapeT&) = delete;

  // Registers a leaf whose gradient should be tracked. Idempotent per tape.
  int watch(TensorT<T>& t);

  bool tracked(const TensorT<T>& t) const { return t.tape_tag == this && t.node >= 0; }
  int node_of(const TensorT<T>& t) const { return tracked(t) ? t.node : -1; }

  // Records an operation node producing `out`. `inputs` may contain -1 for
  // untracked operands; `back` reads grad_of(self) and accumulates into the
  // tracked inputs' buffers.
  int emit(TensorT<T>& out, std::initializer_list<int> inputs, BackwardFn back);

  // Seeds d(loss)/d(loss) = 1 and runs every recorded rule once, in reverse
  // topological order. The tape is consumed afterwards.
  void backward(const TensorT<T>& loss);

  // Gradient of a tracked tensor; all zeros when nothing flowed into it.
  std::span<const T> grad(const TensorT<T>& t) const;

  std::vector<T>& grad_of(int node) { return grads_[static_cast<std::size_t>(node)]; }
  const std::vector<T>& grad_of(int node) const { return grads_[static_cast<std::size_t>(node)]; }

  std::size_t num_nodes() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

 private:
  struct Node {
    std::array<int, 4> inputs{-1, -1, -1, -1};
    BackwardFn back;  // empty for leaves
  };

  std::vector<Node> nodes_;
  std::vector<std::vector<T>> grads_;
  bool consumed_ = false;
};

using Tensor = TensorT<float>;
using Tape = TapeT<float>;
using TensorD = TensorT<double>;
using TapeD = TapeT<double>;

}  // namespace thrid
