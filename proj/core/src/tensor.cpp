#include "thrid/tensor.hpp"

#include <sstream>

namespace thrid {

Shape::Shape(std::initializer_list<int> dims) {
  if (dims.size() > 4) throw ShapeError("shape rank > 4");
  for (int v : dims) {
    if (v < 0) throw ShapeError("negative dimension in shape");
    d[static_cast<std::size_t>(rank++)] = v;
  }
}

std::size_t Shape::numel() const {
  std::size_t n = 1;
  for (int i = 0; i < rank; ++i) n *= static_cast<std::size_t>(d[static_cast<std::size_t>(i)]);
  return n;
}

std::string Shape::str() const {
  std::ostringstream os;
  for (int i = 0; i < rank; ++i) {
    if (i) os << 'x';
    os << d[static_cast<std::size_t>(i)];
  }
  return os.str();
}

template <typename T>
TensorT<T>::TensorT(Shape shape, std::vector<T> values)
    : shape_(shape), store_(std::make_shared<std::vector<T>>(std::move(values))) {
  if (shape_.numel() != store_->size()) {
    throw ShapeError("tensor data length " + std::to_string(store_->size()) +
                     " does not match shape " + shape_.str());
  }
}

template <typename T>
TensorT<T> TensorT<T>::zeros(Shape shape) {
  return TensorT(shape, std::vector<T>(shape.numel(), T(0)));
}

template <typename T>
TensorT<T> TensorT<T>::full(Shape shape, T value) {
  return TensorT(shape, std::vector<T>(shape.numel(), value));
}

template <typename T>
T TensorT<T>::at(int n, int c, int h, int w) const {
  if (shape_.rank != 4) throw ShapeError("at() requires rank-4 tensor, got " + shape_.str());
  const std::size_t idx =
      ((static_cast<std::size_t>(n) * static_cast<std::size_t>(shape_[1]) +
        static_cast<std::size_t>(c)) *
           static_cast<std::size_t>(shape_[2]) +
       static_cast<std::size_t>(h)) *
          static_cast<std::size_t>(shape_[3]) +
      static_cast<std::size_t>(w);
  return (*store_)[idx];
}

template <typename T>
void TensorT<T>::assign(std::vector<T> values) {
  if (values.size() != shape_.numel()) {
    throw ShapeError("assign length mismatch for shape " + shape_.str());
  }
  store_ = std::make_shared<std::vector<T>>(std::move(values));
}

template <typename T>
int TapeT<T>::watch(TensorT<T>& t) {
  if (t.empty()) throw ShapeError("cannot watch an empty tensor");
  if (tracked(t)) return t.node;
  const int id = static_cast<int>(nodes_.size());
  nodes_.push_back(Node{});
  grads_.emplace_back(t.size(), T(0));
  t.node = id;
  t.tape_tag = this;
  t.requires_grad = true;
  return id;
}

template <typename T>
int TapeT<T>::emit(TensorT<T>& out, std::initializer_list<int> inputs, BackwardFn back) {
  Node node;
  int k = 0;
  for (int in : inputs) {
    if (k < 4) node.inputs[static_cast<std::size_t>(k++)] = in;
  }
  node.back = std::move(back);
  const int id = static_cast<int>(nodes_.size());
  nodes_.push_back(std::move(node));
  grads_.emplace_back(out.size(), T(0));
  out.node = id;
  out.tape_tag = this;
  return id;
}

template <typename T>
void TapeT<T>::backward(const TensorT<T>& loss) {
  if (consumed_) throw Error("tape already consumed by backward()");
  if (!tracked(loss)) throw Error("backward: loss tensor is not on this tape");
  if (loss.size() != 1) {
    throw ShapeError("backward: loss must be scalar, got shape " + loss.shape().str());
  }
  consumed_ = true;
  grads_[static_cast<std::size_t>(loss.node)][0] = T(1);
  for (std::size_t i = nodes_.size(); i-- > 0;) {
    if (nodes_[i].back) nodes_[i].back(*this, static_cast<int>(i));
  }
}

template <typename T>
std::span<const T> TapeT<T>::grad(const TensorT<T>& t) const {
  if (!tracked(t)) throw Error("grad: tensor is not on this tape");
  return grads_[static_cast<std::size_t>(t.node)];
}

template class TensorT<float>;
template class TensorT<double>;
template class TapeT<float>;
template class TapeT<double>;

}  // namespace thrid
