#pragma once

// Dense row-major f64 tensor with a dynamically recorded reverse-mode graph.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace monoformer {

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

struct TensorImpl;

// One executed primitive. `backward` reads out.grad and accumulates into the
// grads of `inputs`.
struct Node {
  const char* op = "";
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  std::function<void(TensorImpl& out)> backward;
};

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  std::shared_ptr<Node> node;

  double* grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    return grad.data();
  }
};

namespace detail {
inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}
inline bool& fault_injection_flag() {
  thread_local bool enabled = false;
  return enabled;
}
}  // namespace detail

// Disables graph recording on this thread for the guard's lifetime.
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

// Debug switch: while active, every recorded op scales its upstream gradient
// by 1.05 before applying its rule. Used as a negative control for gradient
// checking.
class GradientFaultInjection {
 public:
  GradientFaultInjection() : previous_(detail::fault_injection_flag()) {
    detail::fault_injection_flag() = true;
  }
  ~GradientFaultInjection() { detail::fault_injection_flag() = previous_; }
  GradientFaultInjection(const GradientFaultInjection&) = delete;
  GradientFaultInjection& operator=(const GradientFaultInjection&) = delete;

 private:
  bool previous_;
};

class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0) : impl_(std::make_shared<TensorImpl>()) {
    for (auto e : shape)
      if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
    impl_->data.assign(shape_numel(shape), fill);
    impl_->shape = std::move(shape);
  }

  Tensor(Shape shape, std::vector<double> data) : impl_(std::make_shared<TensorImpl>()) {
    for (auto e : shape)
      if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
    if (shape_numel(shape) != data.size())
      throw DimensionError("data length " + std::to_string(data.size()) + " does not match shape " +
                           shape_str(shape));
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
  }

  static Tensor zeros(Shape s) { return Tensor(std::move(s), 0.0); }
  static Tensor ones(Shape s) { return Tensor(std::move(s), 1.0); }
  static Tensor scalar(double v) { return Tensor(Shape{1}, v); }
  static Tensor eye(std::size_t n) {
    Tensor t({n, n});
    for (std::size_t i = 0; i < n; ++i) t.impl_->data[i * n + i] = 1.0;
    return t;
  }

  bool defined() const { return static_cast<bool>(impl_); }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<double> data() { return impl_->data; }
  std::span<const double> data() const { return impl_->data; }
  const std::vector<double>& values() const { return impl_->data; }

  bool has_grad() const { return !impl_->grad.empty(); }
  // Gradient buffer; zeros if backward has not reached this tensor.
  std::vector<double> grad() const {
    return impl_->grad.empty() ? std::vector<double>(numel(), 0.0) : impl_->grad;
  }
  void zero_grad() { impl_->grad.clear(); }

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool on = true) {
    impl_->requires_grad = on;
    return *this;
  }
  bool is_leaf() const { return !impl_->node; }

  double item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return impl_->data[0];
  }

  double& operator[](std::size_t i) { return impl_->data[i]; }
  double operator[](std::size_t i) const { return impl_->data[i]; }

  double at(std::initializer_list<std::size_t> idx) const { return impl_->data[offset(idx)]; }
  double& at(std::initializer_list<std::size_t> idx) { return impl_->data[offset(idx)]; }

  // Copy of the values with no graph history.
  Tensor detach() const { return Tensor(shape(), impl_->data); }

  bool all_finite() const {
    return std::all_of(impl_->data.begin(), impl_->data.end(), [](double v) { return std::isfinite(v); });
  }

  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

 private:
  std::size_t offset(std::initializer_list<std::size_t> idx) const {
    if (idx.size() != rank()) throw DimensionError("index rank mismatch for shape " + shape_str(shape()));
    std::size_t off = 0, k = 0;
    for (auto i : idx) {
      if (i >= impl_->shape[k]) throw DimensionError("index out of range for shape " + shape_str(shape()));
      off = off * impl_->shape[k++] + i;
    }
    return off;
  }

  std::shared_ptr<TensorImpl> impl_;
};

// Builds the result of a primitive. When grad mode is on and any input needs
// a gradient, the op is recorded with `backward`.
inline Tensor make_result(const char* op, Shape shape, std::vector<double> data,
                          std::vector<Tensor> inputs,
                          std::function<void(TensorImpl& out)> backward) {
  Tensor out(std::move(shape), std::move(data));
  if (!grad_enabled()) return out;
  bool needs = false;
  for (const auto& in : inputs) needs = needs || in.requires_grad();
  if (!needs) return out;
  auto node = std::make_shared<Node>();
  node->op = op;
  node->inputs.reserve(inputs.size());
  for (auto& in : inputs) node->inputs.push_back(in.impl());
  node->backward = std::move(backward);
  out.impl()->node = std::move(node);
  out.impl()->requires_grad = true;
  return out;
}

// Topologically ordered record of the ops reachable from a root.
struct Graph {
  std::vector<TensorImpl*> order;  // inputs precede consumers

  static Graph trace(const Tensor& root) {
    Graph g;
    std::unordered_set<TensorImpl*> seen;
    std::vector<std::pair<TensorImpl*, std::size_t>> stack;
    stack.emplace_back(root.impl().get(), 0);
    seen.insert(root.impl().get());
    while (!stack.empty()) {
      auto& [t, next] = stack.back();
      const std::size_t n_inputs = t->node ? t->node->inputs.size() : 0;
      if (next < n_inputs) {
        TensorImpl* child = t->node->inputs[next++].get();
        if (seen.insert(child).second) stack.emplace_back(child, 0);
      } else {
        g.order.push_back(t);
        stack.pop_back();
      }
    }
    return g;
  }

  // Name of the first op whose output contains a non-finite value, or "".
  std::string first_non_finite() const {
    for (auto* t : order) {
      bool bad = std::any_of(t->data.begin(), t->data.end(), [](double v) { return !std::isfinite(v); });
      if (bad) {
        std::string name = t->node ? t->node->op : "leaf";
        return name + " " + shape_str(t->shape);
      }
    }
    return {};
  }
};

// Reverse pass from a scalar loss. Leaf gradients accumulate across calls;
// the recorded graph is released afterwards unless `retain_graph` is set.
inline void backward(const Tensor& loss, bool retain_graph = false) {
  if (loss.numel() != 1) throw ContractError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
  if (!loss.requires_grad()) throw ContractError("backward: loss is not connected to any tensor requiring grad");
  Graph g = Graph::trace(loss);
  loss.impl()->grad_buffer()[0] += 1.0;
  const bool fault = detail::fault_injection_flag();
  for (auto it = g.order.rbegin(); it != g.order.rend(); ++it) {
    TensorImpl* t = *it;
    if (!t->node || t->grad.empty()) continue;
    if (fault)
      for (auto& v : t->grad) v *= 1.05;
    t->node->backward(*t);
  }
  if (!retain_graph) {
    // Nodes own their inputs; keep them alive until every record is cleared.
    std::vector<std::shared_ptr<Node>> released;
    released.reserve(g.order.size());
    for (auto* t : g.order) {
      if (t->node) {
        released.push_back(std::move(t->node));
        t->grad.clear();
        t->grad.shrink_to_fit();
      }
    }
  }
}

}  // namespace monoformer
