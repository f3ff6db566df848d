#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

namespace rfw {

using Shape = std::vector<int>;

// Raised when a computation produces or receives non-finite values where
// finite ones are required. The CLI maps it to exit code 2.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline std::int64_t numel_of(const Shape& s) {
  std::int64_t n = 1;
  for (int d : s) {
    if (d <= 0) throw std::invalid_argument("shape dimensions must be positive");
    n *= d;
  }
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

namespace detail {
struct Node;
}

// Redirection target for leaf gradients. When a backward pass runs through
// backward_into(), gradients of tape leaves land here instead of on the nodes
// themselves. Each thread uses its own sink, so tapes that share parameter
// leaves can run backward concurrently without racing on the shared nodes.
struct GradSink {
  std::unordered_map<detail::Node*, std::vector<double>> grads;
};

namespace detail {

inline GradSink*& active_sink() {
  thread_local GradSink* sink = nullptr;
  return sink;
}

struct Node {
  Shape shape;
  std::vector<double> data;
  // Persistent gradient, populated by backward() for tape leaves only.
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(const std::vector<double>& gout)> backward_fn;

  std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
  bool is_leaf() const { return parents.empty(); }

  // Gradient accumulation target during backward; nullptr for nodes outside
  // the tape. Leaf gradients divert to the active sink when one is set.
  double* grad_buf() {
    if (!requires_grad) return nullptr;
    if (is_leaf()) {
      if (GradSink* sink = active_sink()) {
        std::vector<double>& g = sink->grads[this];
        if (g.empty()) g.assign(data.size(), 0.0);
        return g.data();
      }
    }
    if (grad.empty()) grad.assign(data.size(), 0.0);
    return grad.data();
  }
};

inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

// Disables tape recording in a scope (inference paths).
struct NoGradGuard {
  NoGradGuard() : prev_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// Dense row-major tensor handle. Copies alias the same storage; the gradient
// tape hangs off the shared nodes. All dimensions are NCHW ordered where a
// layout is implied.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}

  static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false) {
    if (numel_of(shape) != static_cast<std::int64_t>(data.size())) {
      throw std::invalid_argument("Tensor::from: data length " + std::to_string(data.size()) +
                                  " does not match shape " + shape_str(shape));
    }
    auto n = std::make_shared<detail::Node>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    n->requires_grad = requires_grad && detail::grad_mode();
    return Tensor(std::move(n));
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto count = numel_of(shape);
    return from(std::move(shape), std::vector<double>(static_cast<std::size_t>(count), 0.0),
                requires_grad);
  }

  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    auto count = numel_of(shape);
    return from(std::move(shape), std::vector<double>(static_cast<std::size_t>(count), value),
                requires_grad);
  }

  static Tensor scalar(double value, bool requires_grad = false) {
    return from({1}, {value}, requires_grad);
  }

  bool defined() const { return node_ != nullptr; }

  const Shape& shape() const { return check().shape; }
  int ndim() const { return static_cast<int>(check().shape.size()); }
  int dim(int i) const {
    const Shape& s = check().shape;
    if (i < 0) i += static_cast<int>(s.size());
    if (i < 0 || i >= static_cast<int>(s.size()))
      throw std::invalid_argument("Tensor::dim: axis " + std::to_string(i) + " out of range for " +
                                  shape_str(s));
    return s[static_cast<std::size_t>(i)];
  }
  std::int64_t numel() const { return check().numel(); }

  std::vector<double>& data() { return check().data; }
  const std::vector<double>& data() const { return check().data; }
  double* ptr() { return check().data.data(); }
  const double* ptr() const { return check().data.data(); }

  bool requires_grad() const { return check().requires_grad; }
  Tensor& set_requires_grad(bool v) {
    detail::Node& n = check();
    if (!n.is_leaf() && v)
      throw std::invalid_argument("set_requires_grad: only leaf tensors may be marked");
    n.requires_grad = v;
    return *this;
  }

  bool has_grad() const { return defined() && !node_->grad.empty(); }
  const std::vector<double>& grad() const {
    const detail::Node& n = check();
    if (n.grad.empty())
      throw std::runtime_error("Tensor::grad: gradient not populated; call backward() first");
    return n.grad;
  }
  void zero_grad() {
    detail::Node& n = check();
    if (!n.grad.empty()) n.grad.assign(n.data.size(), 0.0);
  }

  double item() const {
    const detail::Node& n = check();
    if (n.numel() != 1)
      throw std::invalid_argument("Tensor::item: tensor has " + std::to_string(n.numel()) +
                                  " elements, expected 1");
    return n.data[0];
  }

  double at(const std::vector<int>& idx) const {
    const detail::Node& n = check();
    if (idx.size() != n.shape.size())
      throw std::invalid_argument("Tensor::at: index rank mismatch");
    std::int64_t flat = 0;
    for (std::size_t i = 0; i < idx.size(); ++i) {
      if (idx[i] < 0 || idx[i] >= n.shape[i])
        throw std::invalid_argument("Tensor::at: index out of bounds at axis " + std::to_string(i));
      flat = flat * n.shape[i] + idx[i];
    }
    return n.data[static_cast<std::size_t>(flat)];
  }

  detail::Node* node() const { return node_.get(); }
  const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }

  // Runs reverse-mode accumulation from this scalar. Gradients of tape
  // leaves accumulate across repeated calls; interior buffers are reset
  // per call.
  void backward() const;
  // backward() with leaf gradients diverted into `sink`; see GradSink.
  void backward_into(GradSink& sink) const;

 private:
  detail::Node& check() const {
    if (!node_) throw std::invalid_argument("operation on undefined Tensor");
    return *node_;
  }

  std::shared_ptr<detail::Node> node_;
};

namespace detail {

// Builds an op result node. `bw` receives the output gradient and is
// responsible for accumulating into the parents' grad_buf().
inline Tensor make_op(Shape shape, std::vector<double> data, const std::vector<Tensor>& inputs,
                      std::function<void(const std::vector<double>&)> bw) {
  if (numel_of(shape) != static_cast<std::int64_t>(data.size()))
    throw std::logic_error("make_op: shape/data mismatch");
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  if (grad_mode()) {
    for (const Tensor& t : inputs) {
      if (t.defined() && t.node()->requires_grad) n->parents.push_back(t.node_ptr());
    }
    if (!n->parents.empty()) {
      n->requires_grad = true;
      n->backward_fn = std::move(bw);
    }
  }
  return Tensor(std::move(n));
}

inline std::vector<Node*> topo_order(Node* root) {
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  // Iterative post-order DFS; graphs from long training runs get deep.
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root, 0);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next == 0 && visited.count(node)) {
      stack.pop_back();
      continue;
    }
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (!visited.count(p)) stack.emplace_back(p, 0);
    } else {
      visited.insert(node);
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

}  // namespace detail

inline void Tensor::backward() const {
  detail::Node& root = check();
  if (root.numel() != 1)
    throw std::invalid_argument("backward: loss must be scalar, got shape " +
                                shape_str(root.shape));
  if (!root.requires_grad) return;  // nothing on the tape

  const bool sunk = detail::active_sink() != nullptr;
  std::vector<detail::Node*> order = detail::topo_order(&root);
  for (detail::Node* n : order) {
    if (!n->is_leaf()) {
      n->grad.assign(n->data.size(), 0.0);
    } else if (!sunk && n->requires_grad && n->grad.empty()) {
      n->grad.assign(n->data.size(), 0.0);
    }
  }
  if (double* rg = root.grad_buf()) rg[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    if (n->backward_fn) n->backward_fn(n->grad);
  }
}

inline void Tensor::backward_into(GradSink& sink) const {
  GradSink*& slot = detail::active_sink();
  GradSink* prev = slot;
  slot = &sink;
  try {
    backward();
  } catch (...) {
    slot = prev;
    throw;
  }
  slot = prev;
}

}  // namespace rfw
