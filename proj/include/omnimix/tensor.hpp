#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

namespace omnimix {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream oss;
  oss << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) oss << ", ";
    oss << shape[i];
  }
  oss << ']';
  return oss.str();
}

// Error kinds shared by every module.
struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct DomainError : std::domain_error {
  using std::domain_error::domain_error;
};
struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};

namespace detail {
inline thread_local bool grad_mode = true;
// Multiply-accumulate counter bumped by the matmul and convolution kernels.
inline thread_local std::uint64_t mac_count = 0;
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode; }

class GradModeGuard {
 public:
  explicit GradModeGuard(bool enabled) : previous_(detail::grad_mode) {
    detail::grad_mode = enabled;
  }
  ~GradModeGuard() { detail::grad_mode = previous_; }
  GradModeGuard(const GradModeGuard&) = delete;
  GradModeGuard& operator=(const GradModeGuard&) = delete;

 private:
  bool previous_;
};

class NoGradGuard : public GradModeGuard {
 public:
  NoGradGuard() : GradModeGuard(false) {}
};

// Counts multiply-accumulates issued by the compute kernels while alive.
class MacCounter {
 public:
  MacCounter() : start_(detail::mac_count) {}
  std::uint64_t count() const { return detail::mac_count - start_; }

 private:
  std::uint64_t start_;
};

template <typename T>
class Tensor;

template <typename T>
struct Node {
  std::vector<Tensor<T>> inputs;
  virtual ~Node() = default;
  // Returns one gradient per input; entries for inputs with need[i] == false
  // may be left undefined.
  virtual std::vector<Tensor<T>> backward(const Tensor<T>& grad_output,
                                          const std::vector<bool>& need) = 0;
  virtual std::string_view name() const = 0;
};

template <typename T>
struct TensorImpl {
  Shape shape;
  std::shared_ptr<std::vector<T>> storage;
  bool requires_grad = false;
  std::shared_ptr<Node<T>> grad_fn;
  std::shared_ptr<TensorImpl<T>> grad;
};

/// Dense row-major array with optional reverse-mode gradient tracking.
///
/// Tensors are handles: copying one shares the underlying impl. Data is
/// treated as immutable once an op has produced it; only leaves (parameters)
/// are updated in place through mutable_data().
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false) {
    if (numel(shape) != data.size()) {
      throw ShapeError("tensor data length " + std::to_string(data.size()) +
                       " does not match shape " + omnimix::to_string(shape));
    }
    for (auto extent : shape) {
      if (extent == 0) {
        throw ShapeError("tensor extents must be positive, got " +
                         omnimix::to_string(shape));
      }
    }
    impl_ = std::make_shared<TensorImpl<T>>();
    impl_->shape = std::move(shape);
    impl_->storage = std::make_shared<std::vector<T>>(std::move(data));
    impl_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
  }
  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    auto n = numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, value), requires_grad);
  }
  static Tensor ones(Shape shape) { return full(std::move(shape), T(1)); }
  static Tensor scalar(T value) { return Tensor(Shape{}, {value}); }

  bool defined() const { return static_cast<bool>(impl_); }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t size() const { return impl_->storage->size(); }

  std::span<const T> data() const { return *impl_->storage; }
  std::span<T> mutable_data() { return *impl_->storage; }
  const std::vector<T>& vec() const { return *impl_->storage; }
  T operator[](std::size_t i) const { return (*impl_->storage)[i]; }

  T item() const {
    if (size() != 1) {
      throw ContractError("item() on tensor of shape " +
                          omnimix::to_string(shape()));
    }
    return (*impl_->storage)[0];
  }

  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  Tensor& set_requires_grad(bool flag) {
    impl_->requires_grad = flag;
    return *this;
  }
  bool is_leaf() const { return !impl_->grad_fn; }
  const std::shared_ptr<Node<T>>& grad_fn() const { return impl_->grad_fn; }

  bool has_grad() const { return impl_ && impl_->grad; }
  /// Accumulated gradient; all zeros if nothing reached this tensor.
  Tensor grad() const {
    if (!impl_->grad) return zeros(shape());
    Tensor g;
    g.impl_ = impl_->grad;
    return g;
  }
  void zero_grad() { impl_->grad.reset(); }

  /// New handle over the same storage with no gradient history.
  Tensor detach() const {
    Tensor out;
    out.impl_ = std::make_shared<TensorImpl<T>>();
    out.impl_->shape = impl_->shape;
    out.impl_->storage = impl_->storage;
    return out;
  }

  /// Deep copy with no gradient history.
  Tensor clone() const { return Tensor(shape(), vec()); }

  /// Shares storage under a new shape; used by reshape().
  Tensor view_as(Shape shape) const {
    if (numel(shape) != size()) {
      throw ShapeError("cannot view " + omnimix::to_string(this->shape()) +
                       " as " + omnimix::to_string(shape));
    }
    Tensor out;
    out.impl_ = std::make_shared<TensorImpl<T>>();
    out.impl_->shape = std::move(shape);
    out.impl_->storage = impl_->storage;
    return out;
  }

  const TensorImpl<T>* id() const { return impl_.get(); }

  void backward(bool retain_graph = false) const;

  // Engine and op plumbing.
  TensorImpl<T>* impl() const { return impl_.get(); }
  void attach(std::shared_ptr<Node<T>> node) {
    impl_->requires_grad = true;
    impl_->grad_fn = std::move(node);
  }
  static Tensor from_impl(std::shared_ptr<TensorImpl<T>> impl) {
    Tensor t;
    t.impl_ = std::move(impl);
    return t;
  }
  std::shared_ptr<TensorImpl<T>> shared_impl() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl<T>> impl_;
};

template <typename T, typename Fn>
struct LambdaNode final : Node<T> {
  LambdaNode(std::vector<Tensor<T>> in, Fn fn, std::string_view label)
      : fn_(std::move(fn)), label_(label) {
    this->inputs = std::move(in);
  }
  std::vector<Tensor<T>> backward(const Tensor<T>& grad_output,
                                  const std::vector<bool>& need) override {
    return fn_(grad_output, this->inputs, need);
  }
  std::string_view name() const override { return label_; }

 private:
  Fn fn_;
  std::string_view label_;
};

/// Attaches a backward rule to `out` when grad mode is on and any input
/// requires a gradient. `fn(grad, inputs, need)` must build its results from
/// differentiable ops so that gradients of gradients work.
template <typename T, typename Fn>
Tensor<T> record(Tensor<T> out, std::vector<Tensor<T>> inputs,
                 std::string_view label, Fn fn) {
  if (!grad_enabled()) return out;
  bool any = std::any_of(inputs.begin(), inputs.end(),
                         [](const Tensor<T>& t) { return t.requires_grad(); });
  if (!any) return out;
  out.attach(std::make_shared<LambdaNode<T, Fn>>(std::move(inputs),
                                                 std::move(fn), label));
  return out;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);

namespace detail {

template <typename T>
std::vector<TensorImpl<T>*> topo_order(TensorImpl<T>* root) {
  // Iterative post-order DFS over the gradient graph.
  std::vector<TensorImpl<T>*> order;
  std::unordered_set<TensorImpl<T>*> seen;
  std::vector<std::pair<TensorImpl<T>*, std::size_t>> stack;
  stack.emplace_back(root, 0);
  seen.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    const auto& fn = node->grad_fn;
    if (fn && next < fn->inputs.size()) {
      auto* child = fn->inputs[next++].impl();
      if (child && child->requires_grad && seen.insert(child).second) {
        stack.emplace_back(child, 0);
      }
      continue;
    }
    order.push_back(node);
    stack.pop_back();
  }
  return order;  // children before parents
}

template <typename T>
struct GradSlot {
  Tensor<T> owner;  // keeps the impl alive after the graph is released
  Tensor<T> grad;
};

template <typename T>
std::unordered_map<TensorImpl<T>*, GradSlot<T>> propagate(
    const Tensor<T>& root, const Tensor<T>& seed,
    const std::unordered_set<TensorImpl<T>*>* targets, bool create_graph,
    bool retain_graph) {
  GradModeGuard mode(create_graph);
  auto order = topo_order(root.impl());
  // Releasing the graph below drops edges; hold every node until we finish.
  std::vector<Tensor<T>> keep{root};
  for (auto* impl : order) {
    if (impl->grad_fn) keep.insert(keep.end(), impl->grad_fn->inputs.begin(), impl->grad_fn->inputs.end());
  }

  // With explicit targets, only walk edges that lead to one of them.
  std::unordered_set<TensorImpl<T>*> useful;
  if (targets) {
    for (auto* impl : order) {
      bool hit = targets->count(impl) > 0;
      if (!hit && impl->grad_fn) {
        for (const auto& in : impl->grad_fn->inputs) {
          if (useful.count(in.impl())) {
            hit = true;
            break;
          }
        }
      }
      if (hit) useful.insert(impl);
    }
  }

  std::unordered_map<TensorImpl<T>*, GradSlot<T>> grads;
  grads[root.impl()] = GradSlot<T>{root, seed};
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorImpl<T>* impl = *it;
    auto found = grads.find(impl);
    if (found == grads.end() || !impl->grad_fn) continue;
    auto node = impl->grad_fn;
    std::vector<bool> need(node->inputs.size());
    bool any = false;
    for (std::size_t i = 0; i < need.size(); ++i) {
      auto* child = node->inputs[i].impl();
      need[i] = child && child->requires_grad &&
                (!targets || useful.count(child) > 0);
      any = any || need[i];
    }
    if (any) {
      Tensor<T> g = found->second.grad;
      auto input_grads = node->backward(g, need);
      for (std::size_t i = 0; i < need.size(); ++i) {
        if (!need[i] || !input_grads[i].defined()) continue;
        auto* child = node->inputs[i].impl();
        if (input_grads[i].shape() != child->shape) {
          throw ContractError(std::string("backward of ") +
                              std::string(node->name()) +
                              " produced gradient of shape " +
                              to_string(input_grads[i].shape()) + " for input " +
                              to_string(child->shape));
        }
        auto slot = grads.find(child);
        if (slot == grads.end()) {
          grads.emplace(child, GradSlot<T>{node->inputs[i], input_grads[i]});
        } else {
          slot->second.grad = add(slot->second.grad, input_grads[i]);
        }
      }
    }
    if (!targets || !targets->count(impl)) grads.erase(impl);
    if (!retain_graph) {
      node->inputs.clear();
      impl->grad_fn.reset();
      impl->requires_grad = false;
    }
  }
  return grads;
}

}  // namespace detail

/// Accumulates d(this)/d(leaf) into every reachable leaf that requires a
/// gradient. Unless retain_graph is set the graph is released afterwards.
template <typename T>
void Tensor<T>::backward(bool retain_graph) const {
  if (size() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " +
                        omnimix::to_string(shape()));
  }
  if (!requires_grad()) return;
  Tensor<T> seed = Tensor<T>::full(shape(), T(1));
  auto grads = detail::propagate<T>(*this, seed, nullptr, false, retain_graph);
  for (auto& [impl, slot] : grads) {
    if (impl->grad_fn || !impl->requires_grad) continue;
    const Tensor<T>& g = slot.grad;
    if (!impl->grad) {
      impl->grad = g.detach().shared_impl();
    } else {
      NoGradGuard guard;
      impl->grad = add(Tensor<T>::from_impl(impl->grad), g).shared_impl();
    }
  }
}

/// Gradient of scalar `output` with respect to each of `inputs`, returned
/// without touching accumulated leaf gradients. With create_graph the results
/// are themselves differentiable, which is how gradient penalties are built.
/// Inputs the output does not depend on get an all-zero gradient.
template <typename T>
std::vector<Tensor<T>> grad(const Tensor<T>& output,
                            const std::vector<Tensor<T>>& inputs,
                            bool create_graph = false,
                            bool retain_graph = false) {
  if (output.size() != 1) {
    throw ContractError("grad() needs a scalar output, got shape " +
                        to_string(output.shape()));
  }
  std::vector<Tensor<T>> result;
  result.reserve(inputs.size());
  if (!output.requires_grad()) {
    for (const auto& in : inputs) result.push_back(Tensor<T>::zeros(in.shape()));
    return result;
  }
  std::unordered_set<TensorImpl<T>*> targets;
  for (const auto& in : inputs) targets.insert(in.impl());
  auto grads = detail::propagate(output, Tensor<T>::full(output.shape(), T(1)),
                                 &targets, create_graph,
                                 retain_graph || create_graph);
  for (const auto& in : inputs) {
    auto it = grads.find(in.impl());
    result.push_back(it == grads.end() ? Tensor<T>::zeros(in.shape())
                                       : it->second.grad);
  }
  return result;
}

}  // namespace omnimix
