#include "mctseg/tensor.hpp"

#include <numeric>
#include <sstream>
#include <unordered_set>
#include <utility>

#include "mctseg/errors.hpp"

namespace mctseg {

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
  os << ']';
  return os.str();
}

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data, bool requires_grad) {
  if (shape_numel(shape) != data.size()) {
    throw ShapeError("tensor data length " + std::to_string(data.size()) +
                     " does not match shape " + shape_str(shape));
  }
  for (std::size_t extent : shape) {
    if (extent == 0) throw ShapeError("tensor extents must be positive: " + shape_str(shape));
  }
  impl_ = std::make_shared<detail::TensorImpl<T>>();
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
  impl_->requires_grad = requires_grad;
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape) {
  return full(std::move(shape), T{});
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value) {
  const std::size_t n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<T>(n, value));
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value) {
  return Tensor(Shape{1}, std::vector<T>{value});
}

template <typename T>
Tensor<T> Tensor<T>::from_impl(std::shared_ptr<detail::TensorImpl<T>> impl) {
  Tensor t;
  t.impl_ = std::move(impl);
  return t;
}

template <typename T>
const Shape& Tensor<T>::shape() const {
  if (!impl_) throw Error("access to an undefined tensor");
  return impl_->shape;
}

template <typename T>
std::size_t Tensor<T>::dim(std::size_t axis) const {
  const Shape& s = shape();
  if (axis >= s.size()) throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  return s[axis];
}

template <typename T>
std::size_t Tensor<T>::numel() const {
  return shape_numel(shape());
}

template <typename T>
std::span<const T> Tensor<T>::data() const {
  if (!impl_) throw Error("access to an undefined tensor");
  return impl_->data;
}

template <typename T>
std::span<T> Tensor<T>::mutable_data() {
  if (!impl_) throw Error("access to an undefined tensor");
  return impl_->data;
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw ShapeError("item() on a tensor of shape " + shape_str(shape()));
  return impl_->data[0];
}

template <typename T>
bool Tensor<T>::requires_grad() const {
  return impl_ && impl_->tracks_grad();
}

template <typename T>
Tensor<T>& Tensor<T>::set_requires_grad(bool value) {
  if (!impl_) throw Error("access to an undefined tensor");
  if (impl_->grad_fn) throw Error("requires_grad can only be set on leaf tensors");
  impl_->requires_grad = value;
  return *this;
}

template <typename T>
bool Tensor<T>::has_history() const {
  return impl_ && impl_->grad_fn != nullptr;
}

template <typename T>
bool Tensor<T>::has_grad() const {
  return impl_ && impl_->grad.size() == impl_->data.size();
}

template <typename T>
std::span<const T> Tensor<T>::grad() const {
  if (!has_grad()) throw Error("tensor has no gradient");
  return impl_->grad;
}

template <typename T>
std::span<T> Tensor<T>::mutable_grad() {
  if (!impl_) throw Error("access to an undefined tensor");
  return impl_->grad_buffer();
}

template <typename T>
void Tensor<T>::zero_grad() {
  if (impl_ && !impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), T{});
}

template <typename T>
void Tensor<T>::backward() const {
  if (!impl_) throw Error("backward() on an undefined tensor");
  if (numel() != 1) throw ShapeError("backward() requires a scalar, got " + shape_str(shape()));
  if (!impl_->grad_fn) throw Error("backward() on a tensor with no recorded history");

  // Iterative post-order DFS over nodes that carry a backward function.
  using Impl = detail::TensorImpl<T>;
  std::vector<Impl*> order;
  std::unordered_set<Impl*> visited;
  std::vector<std::pair<Impl*, std::size_t>> stack{{impl_.get(), 0}};
  visited.insert(impl_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    const auto& inputs = node->grad_fn->inputs;
    if (next < inputs.size()) {
      Impl* child = inputs[next++].get();
      if (child->grad_fn && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  // Interior gradients are per-sweep; only leaves accumulate across calls.
  for (Impl* node : order) node->grad.assign(node->data.size(), T{});
  impl_->grad[0] = T{1};
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Impl* node = *it;
    node->grad_fn->apply(node->grad);
    if (node != impl_.get()) {
      node->grad.clear();
      node->grad.shrink_to_fit();
    }
  }
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return Tensor(shape(), impl_->data);
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
  Tensor t(shape(), impl_->data, impl_->requires_grad && !impl_->grad_fn);
  if (has_grad()) t.impl_->grad = impl_->grad;
  return t;
}

template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> data, const std::vector<Tensor<T>>& inputs,
                      const char* op, std::function<void(std::span<const T>)> apply) {
  Tensor<T> out(std::move(shape), std::move(data));
  if (!grad_enabled()) return out;
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (!any) return out;
  auto fn = std::make_shared<detail::GradFn<T>>();
  fn->op = op;
  for (const auto& in : inputs) fn->inputs.push_back(in.impl());
  fn->apply = std::move(apply);
  out.impl()->grad_fn = std::move(fn);
  return out;
}

template <typename T>
std::span<T> grad_sink(const Tensor<T>& t) {
  if (!t.defined() || !t.impl()->tracks_grad()) return {};
  return t.impl()->grad_buffer();
}

template class Tensor<float>;
template class Tensor<double>;
template Tensor<float> make_result(Shape, std::vector<float>, const std::vector<Tensor<float>>&, const char*,
                                   std::function<void(std::span<const float>)>);
template Tensor<double> make_result(Shape, std::vector<double>, const std::vector<Tensor<double>>&, const char*,
                                    std::function<void(std::span<const double>)>);
template std::span<float> grad_sink(const Tensor<float>&);
template std::span<double> grad_sink(const Tensor<double>&);

}  // namespace mctseg
