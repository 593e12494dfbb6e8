// Dense row-major tensors with a reverse-mode differentiation tape.
//
// A BasicTensor is a cheap handle onto a shared Node. Operations that see at
// least one input with requires_grad (while grad mode is on) attach a backward
// closure to their output; backward() sorts the reachable graph into a Tape
// and replays it in reverse.
#pragma once

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

namespace sdetr {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
  os << ']';
  return os.str();
}

/// Thrown for any operand-shape violation; the message names the operation
/// and the offending shapes.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline ShapeError shape_error(const char* op, const Shape& a, const Shape& b) {
  return ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

namespace detail {
inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

/// Disables graph recording on this thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <class T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until first touched by backward
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this node's grad and accumulates into inputs that require grad.
  std::function<void(Node&)> backward;

  bool is_leaf() const { return !backward; }
  std::vector<T>& ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
    return grad;
  }
};

template <class T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() : node_(std::make_shared<Node<T>>()) {}

  explicit BasicTensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  BasicTensor(Shape shape, std::vector<T> data, bool requires_grad = false)
      : node_(std::make_shared<Node<T>>()) {
    if (shape_numel(shape) != data.size()) {
      throw ShapeError("tensor: shape " + shape_str(shape) + " needs " + std::to_string(shape_numel(shape)) +
                       " elements, got " + std::to_string(data.size()));
    }
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static BasicTensor zeros(Shape shape, bool requires_grad = false) {
    auto n = shape_numel(shape);
    return BasicTensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
  }
  static BasicTensor full(Shape shape, T value, bool requires_grad = false) {
    auto n = shape_numel(shape);
    return BasicTensor(std::move(shape), std::vector<T>(n, value), requires_grad);
  }
  static BasicTensor scalar(T value, bool requires_grad = false) {
    return BasicTensor(Shape{}, std::vector<T>{value}, requires_grad);
  }

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<const T> data() const { return node_->data; }
  std::span<T> mutable_data() { return node_->data; }
  const std::vector<T>& values() const { return node_->data; }
  T operator[](std::size_t i) const { return node_->data[i]; }
  T item() const {
    if (numel() != 1) throw ShapeError("item: tensor of shape " + shape_str(shape()) + " is not a scalar");
    return node_->data[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  bool has_grad() const { return node_->grad.size() == node_->data.size() && !node_->data.empty(); }
  /// Gradient buffer; empty span when no gradient has been accumulated yet.
  std::span<const T> grad() const {
    if (node_->grad.size() != node_->data.size()) return {};
    return node_->grad;
  }
  std::span<T> mutable_grad() { return node_->ensure_grad(); }
  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
  }

  const char* op() const { return node_->op; }
  Node<T>& node() const { return *node_; }
  const std::shared_ptr<Node<T>>& node_ptr() const { return node_; }
  bool same_node(const BasicTensor& other) const { return node_ == other.node_; }

  /// Deep copy of values into a fresh leaf.
  BasicTensor clone(bool requires_grad = false) const { return BasicTensor(shape(), node_->data, requires_grad); }

 private:
  std::shared_ptr<Node<T>> node_;
};

using Tensor = BasicTensor<float>;

/// Topologically ordered record of the primitive applications reachable from
/// a root tensor. Leaves are included so their gradients can be inspected.
template <class T>
class Tape {
 public:
  static Tape record(const BasicTensor<T>& root) {
    Tape tape;
    tape.root_ = root.node_ptr();
    std::unordered_set<const Node<T>*> seen;
    // Iterative post-order DFS; inputs always precede their consumers.
    std::vector<std::pair<Node<T>*, std::size_t>> stack;
    stack.emplace_back(root.node_ptr().get(), 0);
    seen.insert(root.node_ptr().get());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->inputs.size()) {
        Node<T>* child = node->inputs[next++].get();
        if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
      } else {
        tape.order_.push_back(node);
        stack.pop_back();
      }
    }
    return tape;
  }

  std::size_t size() const { return order_.size(); }
  const std::vector<Node<T>*>& order() const { return order_; }

  /// Seeds the root with 1 and runs every recorded backward closure in
  /// reverse order. Leaf gradients accumulate across calls; interior
  /// gradients are reset so the same graph can be replayed.
  void run_backward() {
    for (Node<T>* node : order_) {
      if (!node->is_leaf()) node->grad.assign(node->data.size(), T(0));
    }
    auto& root_grad = root_->ensure_grad();
    root_grad[0] += T(1);
    for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
      Node<T>* node = *it;
      if (!node->is_leaf()) node->backward(*node);
    }
  }

 private:
  std::shared_ptr<Node<T>> root_;
  std::vector<Node<T>*> order_;
};

template <class T>
void backward(const BasicTensor<T>& loss) {
  if (loss.numel() != 1) {
    throw ShapeError("backward: loss must be a scalar, got shape " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) return;
  Tape<T>::record(loss).run_backward();
}

namespace detail {

template <class T>
bool any_requires_grad(std::initializer_list<const BasicTensor<T>*> inputs) {
  if (!grad_enabled()) return false;
  for (const auto* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

/// Builds an op result; attaches `fn` only when some input needs a gradient.
template <class T, class Fn>
BasicTensor<T> make_result(const char* op, Shape shape, std::vector<T> data,
                           std::vector<BasicTensor<T>> inputs, Fn&& fn) {
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->op = op;
  bool needs = false;
  if (grad_enabled()) {
    for (const auto& in : inputs) needs = needs || in.requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    node->inputs.reserve(inputs.size());
    for (auto& in : inputs) node->inputs.push_back(in.node_ptr());
    node->backward = std::forward<Fn>(fn);
  }
  return BasicTensor<T>(std::move(node));
}

/// Gradient buffer of input `i`, or nullptr if that input is not tracked.
template <class T>
std::vector<T>* input_grad(Node<T>& self, std::size_t i) {
  Node<T>& in = *self.inputs[i];
  return in.requires_grad ? &in.ensure_grad() : nullptr;
}

}  // namespace detail

/// Same values, cut from the graph: no gradient ever flows into the source.
template <class T>
BasicTensor<T> detach(const BasicTensor<T>& x) {
  return BasicTensor<T>(x.shape(), x.values(), false);
}

/// Converts values between scalar types, producing a leaf.
template <class To, class From>
BasicTensor<To> cast(const BasicTensor<From>& x, bool requires_grad = false) {
  std::vector<To> out(x.data().begin(), x.data().end());
  return BasicTensor<To>(x.shape(), std::move(out), requires_grad);
}

}  // namespace sdetr
