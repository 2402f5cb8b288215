#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <new>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace disent {

using Shape = std::vector<std::size_t>;

/// Allocator with a fixed 64-byte alignment. Eigen's vectorized kernels peel a scalar head up to
/// the first aligned element, so buffers at varying alignments round differently.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t n) noexcept { ::operator delete(p, n * sizeof(T), kAlign); }

  template <class U>
  bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

/// Storage for tensor values and gradients.
using Buffer = std::vector<double, AlignedAllocator<double>>;

/// Raised for incompatible tensor shapes or invalid layer geometry.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a computation produces NaN/inf where it must not.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised for invalid user configuration (unknown keys, bad values, conflicting terms).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

namespace detail {

struct Node {
  Shape shape;
  Buffer data;
  Buffer grad;  // empty until first needed
  bool requires_grad = false;
  bool is_leaf = true;
  std::uint64_t seq = 0;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this node's grad and accumulates into inputs that require grad.
  std::function<void(Node&)> backward_fn;

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};

inline std::uint64_t next_seq() {
  static std::atomic<std::uint64_t> counter{0};
  return ++counter;
}

inline bool& grad_disabled() {
  thread_local bool disabled = false;
  return disabled;
}

}  // namespace detail

/// While alive, newly created tensors are not recorded on the gradient tape.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_disabled()) { detail::grad_disabled() = true; }
  ~NoGradGuard() { detail::grad_disabled() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Dense row-major array of doubles, optionally recorded on a define-by-run tape.
///
/// Copies share storage (handle semantics); use clone() for a deep copy.
/// Every operation that consumes a tensor requiring grad records a node whose
/// sequence number exceeds those of its inputs, so sorting reachable nodes by
/// descending sequence number replays the tape in reverse topological order.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0) : node_(std::make_shared<detail::Node>()) {
    node_->data.assign(disent::numel(shape), fill);
    node_->shape = std::move(shape);
    node_->seq = detail::next_seq();
  }

  Tensor(Shape shape, std::vector<double> data) : node_(std::make_shared<detail::Node>()) {
    if (disent::numel(shape) != data.size()) {
      throw ShapeError("tensor data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
    }
    node_->shape = std::move(shape);
    node_->data.assign(data.begin(), data.end());
    node_->seq = detail::next_seq();
  }

  static Tensor from_buffer(Shape shape, Buffer data) {
    if (disent::numel(shape) != data.size()) {
      throw ShapeError("tensor data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
    }
    Tensor t;
    t.node_ = std::make_shared<detail::Node>();
    t.node_->shape = std::move(shape);
    t.node_->data = std::move(data);
    t.node_->seq = detail::next_seq();
    return t;
  }

  static Tensor scalar(double value) { return Tensor(Shape{}, std::vector<double>{value}); }

  /// Leaf tensor that accumulates gradient.
  static Tensor parameter(Shape shape, std::vector<double> data) {
    Tensor t(std::move(shape), std::move(data));
    t.node_->requires_grad = true;
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim() const { return node_->shape.size(); }
  std::size_t size(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<const double> data() const { return node_->data; }
  /// Mutable view for in-place parameter updates; does not touch the tape.
  std::span<double> mutable_data() { return node_->data; }

  bool has_grad() const { return node_->grad.size() == node_->data.size(); }
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad() {
    node_->ensure_grad();
    return node_->grad;
  }

  double item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }
  double operator[](std::size_t i) const { return node_->data[i]; }

  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return node_->is_leaf; }
  Tensor& set_requires_grad(bool value) {
    if (!node_->is_leaf) throw std::logic_error("set_requires_grad on a non-leaf tensor");
    node_->requires_grad = value;
    return *this;
  }

  /// Same values, cut from the tape; never receives gradient.
  Tensor detach() const { return from_buffer(shape(), node_->data); }
  Tensor clone() const {
    Tensor t = from_buffer(shape(), node_->data);
    t.node_->requires_grad = node_->requires_grad && node_->is_leaf;
    return t;
  }

  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
  }

  /// Accumulate d(this)/d(leaf) into every reachable leaf requiring grad.
  void backward() const;

  const std::shared_ptr<detail::Node>& node() const { return node_; }

  /// Build an op result. Records a tape node only when some input requires grad
  /// and recording is enabled.
  static Tensor make_result(Shape shape, Buffer data, std::vector<Tensor> inputs,
                            std::function<void(detail::Node&)> backward_fn, const char* op) {
    Tensor out = from_buffer(std::move(shape), std::move(data));
    if (detail::grad_disabled()) return out;
    bool needs = false;
    for (const auto& in : inputs) needs = needs || in.requires_grad();
    if (!needs) return out;
    out.node_->requires_grad = true;
    out.node_->is_leaf = false;
    out.node_->op = op;
    out.node_->inputs.reserve(inputs.size());
    for (auto& in : inputs) out.node_->inputs.push_back(in.node_);
    out.node_->backward_fn = std::move(backward_fn);
    return out;
  }

 private:
  std::shared_ptr<detail::Node> node_;
};

inline void Tensor::backward() const {
  if (numel() != 1) throw ShapeError("backward() requires a scalar loss, got " + shape_str(shape()));
  if (!requires_grad()) throw std::logic_error("backward() on a tensor that is not on the tape");

  std::vector<detail::Node*> order;
  std::vector<detail::Node*> stack{node_.get()};
  // Graphs hold at most a few hundred nodes; a sorted vector is enough.
  std::vector<const detail::Node*> seen_sorted;
  auto mark = [&](detail::Node* n) {
    auto it = std::lower_bound(seen_sorted.begin(), seen_sorted.end(), n);
    if (it != seen_sorted.end() && *it == n) return false;
    seen_sorted.insert(it, n);
    return true;
  };
  mark(node_.get());
  while (!stack.empty()) {
    detail::Node* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (auto& in : n->inputs) {
      if (in->requires_grad && mark(in.get())) stack.push_back(in.get());
    }
  }
  std::sort(order.begin(), order.end(),
            [](const detail::Node* a, const detail::Node* b) { return a->seq > b->seq; });

  for (detail::Node* n : order) {
    if (!n->is_leaf) n->grad.assign(n->data.size(), 0.0);
  }
  node_->ensure_grad();
  node_->grad[0] += 1.0;
  for (detail::Node* n : order) {
    if (!n->is_leaf && n->backward_fn) n->backward_fn(*n);
  }
}

inline Tensor full(Shape shape, double value) { return Tensor(std::move(shape), value); }
inline Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }
inline Tensor ones(Shape shape) { return Tensor(std::move(shape), 1.0); }

}  // namespace disent
