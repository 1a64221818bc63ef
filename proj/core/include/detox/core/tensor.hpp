#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <new>
#include <span>
#include <string>
#include <vector>

namespace detox::core {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_string(const Shape& shape);

// Gradient recording is on by default. NoGradGuard switches it off for the
// current thread, e.g. while decoding or scoring.
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// 64-byte aligned storage. Vectorized kernels pick their loop peeling from
// the address, so a fixed alignment keeps results bit-identical across runs.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlignment{64};

  AlignedAllocator() noexcept = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) {
    return static_cast<T*>(::operator new(n * sizeof(T), kAlignment));
  }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlignment); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept {
    return true;
  }
};

template <typename T>
using Buffer = std::vector<T, AlignedAllocator<T>>;

template <typename T>
class Tensor;

namespace detail {

template <typename T>
struct Node {
  Shape shape;
  Buffer<T> data;
  Buffer<T> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into the parents' grads.
  std::function<void(Node&)> backward;

  Buffer<T>& ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad;
  }
};

}  // namespace detail

// Dense row-major array with an optional gradient buffer. Copies share the
// underlying storage; use clone() for a deep copy.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value, bool requires_grad = false);
  static Tensor from(Shape shape, Buffer<T> values, bool requires_grad = false);
  static Tensor from(Shape shape, std::span<const T> values, bool requires_grad = false);
  static Tensor from(Shape shape, std::initializer_list<T> values, bool requires_grad = false) {
    return from(std::move(shape), Buffer<T>(values), requires_grad);
  }
  static Tensor scalar(T value);

  bool defined() const { return node_ != nullptr; }
  explicit operator bool() const { return defined(); }

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t size() const { return node_->data.size(); }
  // Rows/columns of a rank-2 tensor; rank-1 tensors count as a single row.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<T> data() { return node_->data; }
  std::span<const T> data() const { return node_->data; }
  T* raw() { return node_->data.data(); }
  const T* raw() const { return node_->data.data(); }
  T item() const;
  T& operator[](std::size_t i) { return node_->data[i]; }
  T operator[](std::size_t i) const { return node_->data[i]; }

  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<T> grad() { return node_->ensure_grad(); }
  std::span<const T> grad() const { return node_->grad; }
  void zero_grad();

  // Reverse-mode sweep from a scalar. Seeds d(self)/d(self) = 1.
  void backward();

  Tensor clone() const;
  // Same data, cut off from the graph.
  Tensor detach() const;

  std::shared_ptr<detail::Node<T>>& node() { return node_; }
  const std::shared_ptr<detail::Node<T>>& node() const { return node_; }

  // Builds an op result. The backward closure is kept only when recording is
  // enabled and at least one parent requires a gradient.
  static Tensor make_result(Shape shape, Buffer<T> values,
                            std::vector<Tensor> parents,
                            std::function<void(detail::Node<T>&)> backward);

 private:
  explicit Tensor(std::shared_ptr<detail::Node<T>> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node<T>> node_;
};

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace detox::core
