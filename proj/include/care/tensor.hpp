#pragma once

// Dense 2-D float64 tensors with a dynamic reverse-mode differentiation tape.
//
// A Tensor is a shared handle to a node. Kernels that see at least one input
// requiring gradients record their inputs and a backward rule on the output
// node; the tape is the topological order of the nodes reachable from a loss.
// Everything in the model is a matrix, so rank is fixed at two; scalars are 1x1.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "care/errors.hpp"

namespace care {

struct Shape {
  std::size_t rows = 0;
  std::size_t cols = 0;

  constexpr std::size_t size() const noexcept { return rows * cols; }
  friend constexpr bool operator==(const Shape&, const Shape&) = default;
};

inline std::string to_string(Shape s) {
  return std::to_string(s.rows) + "x" + std::to_string(s.cols);
}

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads `self.grad` and accumulates into the inputs' gradients.
  std::function<void(Node& self)> backward;

  std::vector<double>& ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

inline thread_local bool grad_enabled = true;

}  // namespace detail

/// Disables recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() noexcept : previous_(detail::grad_enabled) { detail::grad_enabled = false; }
  ~NoGradGuard() { detail::grad_enabled = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::size_t rows, std::size_t cols, bool requires_grad = false) {
    return from(rows, cols, std::vector<double>(rows * cols, 0.0), requires_grad);
  }

  static Tensor full(std::size_t rows, std::size_t cols, double value) {
    return from(rows, cols, std::vector<double>(rows * cols, value));
  }

  static Tensor from(std::size_t rows, std::size_t cols, std::vector<double> values,
                     bool requires_grad = false) {
    if (values.size() != rows * cols) {
      throw DimensionError("tensor data length " + std::to_string(values.size()) +
                           " does not match shape " + to_string(Shape{rows, cols}));
    }
    auto node = std::make_shared<detail::Node>();
    node->shape = {rows, cols};
    node->value = std::move(values);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  /// Row-major nested literal, e.g. `Tensor::matrix({{1, 2}, {3, 4}})`.
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows,
                       bool requires_grad = false) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<double> values;
    values.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw DimensionError("ragged matrix literal");
      values.insert(values.end(), row.begin(), row.end());
    }
    return from(r, c, std::move(values), requires_grad);
  }

  static Tensor scalar(double v, bool requires_grad = false) { return from(1, 1, {v}, requires_grad); }

  /// Output of a kernel. Records the backward rule only when some input needs
  /// gradients and recording is enabled.
  static Tensor make_result(Shape shape, std::vector<double> values,
                            std::initializer_list<Tensor> inputs,
                            std::function<void(detail::Node&)> backward) {
    return make_result(shape, std::move(values), std::vector<Tensor>(inputs), std::move(backward));
  }

  static Tensor make_result(Shape shape, std::vector<double> values, const std::vector<Tensor>& inputs,
                            std::function<void(detail::Node&)> backward) {
    auto node = std::make_shared<detail::Node>();
    node->shape = shape;
    node->value = std::move(values);
    if (detail::grad_enabled) {
      const bool any = std::any_of(inputs.begin(), inputs.end(),
                                   [](const Tensor& t) { return t.requires_grad(); });
      if (any) {
        node->requires_grad = true;
        node->inputs.reserve(inputs.size());
        for (const auto& t : inputs) node->inputs.push_back(t.node_);
        node->backward = std::move(backward);
      }
    }
    return Tensor(std::move(node));
  }

  bool defined() const noexcept { return static_cast<bool>(node_); }
  Shape shape() const { return node_->shape; }
  std::size_t rows() const { return node_->shape.rows; }
  std::size_t cols() const { return node_->shape.cols; }
  std::size_t size() const { return node_->value.size(); }

  std::span<const double> data() const& { return node_->value; }
  /// A temporary may hold the last reference to its node, so it hands out a copy.
  std::vector<double> data() const&& { return node_->value; }
  /// Direct write access; only for leaves (parameters, optimizer, tests).
  std::span<double> mutable_data() { return node_->value; }
  double at(std::size_t r, std::size_t c) const { return node_->value[r * cols() + c]; }
  double item() const {
    if (size() != 1) throw ContractError("item() on non-scalar tensor " + to_string(shape()));
    return node_->value[0];
  }

  bool requires_grad() const noexcept { return node_ && node_->requires_grad; }
  /// Only meaningful on leaves.
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  bool is_leaf() const noexcept { return node_ && node_->inputs.empty(); }
  bool has_grad() const noexcept { return node_ && !node_->grad.empty(); }
  std::span<const double> grad() const& { return node_->grad; }
  std::vector<double> grad() const&& { return node_->grad; }
  std::span<double> mutable_grad() { return node_->ensure_grad(); }
  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
  }

  /// Copy of the values, no history.
  Tensor detach() const { return from(rows(), cols(), node_->value); }

  detail::Node& node() const { return *node_; }
  bool same_node(const Tensor& other) const noexcept { return node_ == other.node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;
};

/// Topologically ordered view of the recorded history behind a root tensor.
class Tape {
 public:
  static Tape record(const Tensor& root) {
    Tape tape;
    tape.root_ = root;
    if (!root.requires_grad()) return tape;
    // Iterative post-order DFS: a node is emitted after all of its inputs.
    std::unordered_set<const detail::Node*> visited;
    std::vector<std::pair<detail::Node*, std::size_t>> stack;
    stack.emplace_back(&root.node(), 0);
    visited.insert(&root.node());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->inputs.size()) {
        detail::Node* child = node->inputs[next++].get();
        if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
      } else {
        tape.order_.push_back(node);
        stack.pop_back();
      }
    }
    return tape;
  }

  std::size_t size() const noexcept { return order_.size(); }
  std::span<detail::Node* const> nodes() const noexcept { return order_; }

  /// Seeds the root gradient with `seed` and runs every backward rule in reverse order.
  void backward(double seed = 1.0) const {
    if (!root_.defined() || root_.size() != 1) {
      throw ContractError("backward() requires a scalar loss");
    }
    if (order_.empty()) return;
    root_.node().ensure_grad()[0] += seed;
    for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
      detail::Node* node = *it;
      if (node->backward && !node->grad.empty()) node->backward(*node);
    }
  }

 private:
  Tensor root_;
  std::vector<detail::Node*> order_;
};

/// Accumulates dLoss/dT into every tensor that requires gradients.
inline void backward(const Tensor& loss, double seed = 1.0) {
  if (!loss.defined() || loss.size() != 1) {
    throw ContractError("backward() requires a scalar loss, got " +
                        (loss.defined() ? to_string(loss.shape()) : std::string("undefined")));
  }
  Tape::record(loss).backward(seed);
}

inline bool all_finite(std::span<const double> values) {
  return std::all_of(values.begin(), values.end(), [](double v) { return std::isfinite(v); });
}

}  // namespace care
