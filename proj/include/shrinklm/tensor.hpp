#pragma once

// Dense row-major tensors with a dynamically recorded reverse-mode graph.
//
// Every op whose inputs require gradients records a Node on its output. The
// graph is the DAG reachable through those nodes; backward() orders it
// topologically, runs each node's adjoint once, then releases the nodes.
// Calling backward() a second time on a consumed graph throws UsageError.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "shrinklm/errors.hpp"

namespace shrinklm {

using Shape = std::vector<std::size_t>;

inline std::size_t numel_of(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

namespace detail {

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

template <class T>
struct TensorImpl;

template <class T>
struct Node {
  std::vector<std::shared_ptr<TensorImpl<T>>> inputs;
  // Reads out.grad (and out.data if needed), accumulates into input grads.
  std::function<void(TensorImpl<T>& out)> backward;
};

template <class T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until an adjoint is accumulated
  bool requires_grad = false;
  bool graph_released = false;
  std::shared_ptr<Node<T>> grad_fn;

  std::vector<T>& grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad;
  }
};

}  // namespace detail

/// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

inline bool grad_enabled() { return detail::grad_mode_flag(); }

template <class T>
class Tensor {
 public:
  using value_type = T;
  using Impl = detail::TensorImpl<T>;

  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    std::vector<T> data(numel_of(shape), T(0));
    return from(std::move(shape), std::move(data), requires_grad);
  }

  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    std::vector<T> data(numel_of(shape), value);
    return from(std::move(shape), std::move(data), requires_grad);
  }

  static Tensor from(Shape shape, std::vector<T> data, bool requires_grad = false) {
    if (shape.empty()) shape = {1};
    for (auto e : shape)
      if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
    if (numel_of(shape) != data.size())
      throw DimensionError("shape " + shape_str(shape) + " does not match buffer of " +
                           std::to_string(data.size()) + " values");
    auto impl = std::make_shared<Impl>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
  }

  static Tensor scalar(T value, bool requires_grad = false) {
    return from({1}, {value}, requires_grad);
  }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<const T> data() const { return impl_->data; }
  /// In-place access for optimizers and initializers; callers must own the step.
  std::span<T> mutable_data() { return impl_->data; }
  T item() const {
    if (numel() != 1) throw UsageError("item() on tensor of shape " + shape_str(shape()));
    return impl_->data[0];
  }
  T operator[](std::size_t i) const { return impl_->data[i]; }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool on) {
    if (impl_->grad_fn) throw UsageError("requires_grad can only be set on leaf tensors");
    impl_->requires_grad = on;
    if (!on) impl_->grad.clear();
  }
  bool is_leaf() const { return impl_->grad_fn == nullptr; }
  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const T> grad() const { return impl_->grad; }
  void zero_grad() { impl_->grad.clear(); }

  bool all_finite() const {
    return std::all_of(impl_->data.begin(), impl_->data.end(),
                       [](T v) { return std::isfinite(v); });
  }

  /// Deep copy as a fresh leaf; keeps requires_grad, drops graph and grad.
  Tensor clone() const {
    return from(impl_->shape, impl_->data, impl_->requires_grad);
  }
  /// Deep copy as a leaf that never requires grad.
  Tensor detach() const { return from(impl_->shape, impl_->data, false); }

  template <class U>
  Tensor<U> cast() const {
    std::vector<U> out(impl_->data.begin(), impl_->data.end());
    return Tensor<U>::from(impl_->shape, std::move(out), impl_->requires_grad);
  }

  const void* identity() const { return impl_.get(); }
  Impl& impl() const { return *impl_; }
  const std::shared_ptr<Impl>& impl_ptr() const { return impl_; }

  explicit Tensor(std::shared_ptr<Impl> impl) : impl_(std::move(impl)) {}

 private:
  std::shared_ptr<Impl> impl_;
};

/// Builds an op output; records `backward` when any input requires grad.
/// `backward` receives the output impl (grad populated) and must accumulate
/// into the grad_buffer() of each input that requires grad.
template <class T, class Backward>
Tensor<T> make_result(Shape shape, std::vector<T> data, std::initializer_list<Tensor<T>> inputs,
                      Backward&& backward) {
  auto out = Tensor<T>::from(std::move(shape), std::move(data));
  if (!grad_enabled()) return out;
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (!any) return out;
  auto node = std::make_shared<detail::Node<T>>();
  for (const auto& in : inputs) node->inputs.push_back(in.impl_ptr());
  node->backward = std::forward<Backward>(backward);
  out.impl().requires_grad = true;
  out.impl().grad_fn = std::move(node);
  return out;
}

/// Accumulates adjoints of `loss` into every reachable requires-grad leaf and
/// releases the graph. Rejects non-scalar losses and already-consumed graphs.
template <class T>
void backward(const Tensor<T>& loss) {
  using Impl = detail::TensorImpl<T>;
  if (loss.numel() != 1)
    throw UsageError("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
  Impl& root = loss.impl();
  if (root.graph_released) throw UsageError("backward() called twice on the same graph");
  if (!root.requires_grad) throw UsageError("backward() on a tensor that does not require grad");

  // Iterative DFS post-order gives inputs before consumers. Holding shared
  // pointers keeps intermediates alive while consumer nodes are released.
  std::vector<std::shared_ptr<Impl>> order;
  std::unordered_set<Impl*> visited;
  std::vector<std::pair<std::shared_ptr<Impl>, std::size_t>> stack{{loss.impl_ptr(), 0}};
  visited.insert(&root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (node->grad_fn && next < node->grad_fn->inputs.size()) {
      const auto& child = node->grad_fn->inputs[next++];
      if (child->requires_grad && visited.insert(child.get()).second) stack.push_back({child, 0});
      continue;
    }
    order.push_back(std::move(node));
    stack.pop_back();
  }

  root.grad_buffer()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Impl* t = it->get();
    if (!t->grad_fn) continue;
    if (!t->grad.empty()) t->grad_fn->backward(*t);
    t->grad_fn.reset();
    t->graph_released = true;
    if (t != &root) t->grad.clear();
  }
}

}  // namespace shrinklm
