#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace mctseg {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
/// Renders as "[1, 64, 500, 250]".
std::string shape_str(const Shape& shape);

enum class Mode { train, eval };

namespace detail {

template <typename T>
struct TensorImpl;

template <typename T>
struct GradFn {
  const char* op = "";
  std::vector<std::shared_ptr<TensorImpl<T>>> inputs;
  // Receives d(loss)/d(output) and accumulates into the inputs' grad buffers.
  std::function<void(std::span<const T>)> apply;
};

template <typename T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;
  bool requires_grad = false;
  std::shared_ptr<GradFn<T>> grad_fn;

  bool tracks_grad() const { return requires_grad || grad_fn != nullptr; }

  std::span<T> grad_buffer() {
    if (grad.size() != data.size()) grad.assign(data.size(), T{});
    return grad;
  }
};

}  // namespace detail

/// Whether operators currently record history for backward.
bool grad_enabled();

/// Disables history recording for its lifetime (thread-local).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Row-major N-dimensional array with optional reverse-mode gradient tracking.
///
/// A Tensor is a shared handle: copies alias the same storage and grad
/// buffer, which is what lets parameters be referenced from both a model and
/// an optimizer. Use clone() for an independent copy.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false);

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, T value);
  static Tensor scalar(T value);
  static Tensor from_impl(std::shared_ptr<detail::TensorImpl<T>> impl);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const T> data() const;
  /// Direct write access; reserved for parameter initialization and optimizer updates.
  std::span<T> mutable_data();
  T operator[](std::size_t i) const { return data()[i]; }
  T item() const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool value);
  bool has_history() const;

  bool has_grad() const;
  std::span<const T> grad() const;
  std::span<T> mutable_grad();
  void zero_grad();

  /// Reverse-mode sweep from this scalar. Leaf gradients accumulate across calls.
  void backward() const;

  Tensor detach() const;
  Tensor clone() const;

  const std::shared_ptr<detail::TensorImpl<T>>& impl() const { return impl_; }
  bool aliases(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  std::shared_ptr<detail::TensorImpl<T>> impl_;
};

/// Creates an operator output. When recording is enabled and any input tracks
/// gradients, `apply` is attached as the output's backward function.
template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> data, const std::vector<Tensor<T>>& inputs,
                      const char* op, std::function<void(std::span<const T>)> apply);

/// Gradient buffer of `t` if it participates in differentiation, else an empty span.
template <typename T>
std::span<T> grad_sink(const Tensor<T>& t);

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace mctseg
