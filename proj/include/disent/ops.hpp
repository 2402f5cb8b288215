#pragma once

#include <Eigen/Core>

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "disent/tensor.hpp"

namespace disent {

/// Inputs to log and denominators of div are clamped to at least this magnitude.
inline constexpr double kLogClamp = 1e-12;

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

inline std::vector<std::size_t> strides_of(const Shape& shape) {
  std::vector<std::size_t> s(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) s[i - 1] = s[i] * shape[i];
  return s;
}

/// Numpy-style broadcast: align trailing dimensions, extents must match or be 1.
inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t n = std::max(a.size(), b.size());
  Shape out(n, 1);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t da = i < n - a.size() ? 1 : a[i - (n - a.size())];
    const std::size_t db = i < n - b.size() ? 1 : b[i - (n - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw ShapeError("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    }
    out[i] = da == 1 ? db : da;
  }
  return out;
}

/// For each flat index of `out`, the flat index of the broadcast source `in`.
inline std::vector<std::size_t> broadcast_index(const Shape& out, const Shape& in) {
  const std::size_t total = numel(out);
  std::vector<std::size_t> idx(total);
  const std::size_t offset = out.size() - in.size();
  const auto in_strides = strides_of(in);
  std::vector<std::size_t> step(out.size(), 0);
  for (std::size_t i = 0; i < in.size(); ++i) step[offset + i] = in[i] == 1 ? 0 : in_strides[i];
  std::vector<std::size_t> counter(out.size(), 0);
  std::size_t pos = 0;
  for (std::size_t flat = 0; flat < total; ++flat) {
    idx[flat] = pos;
    for (std::size_t ax = out.size(); ax-- > 0;) {
      if (++counter[ax] < out[ax]) {
        pos += step[ax];
        break;
      }
      pos -= step[ax] * (out[ax] - 1);
      counter[ax] = 0;
    }
  }
  return idx;
}

inline double safe_den(double v) {
  if (std::abs(v) >= kLogClamp) return v;
  return v < 0 ? -kLogClamp : kLogClamp;
}

template <typename F, typename DA, typename DB>
Tensor binary_op(const Tensor& a, const Tensor& b, F f, DA da, DB db, const char* name) {
  const Shape out_shape = broadcast_shape(a.shape(), b.shape());
  const std::size_t n = numel(out_shape);
  Buffer out(n);
  const auto& ad = a.node()->data;
  const auto& bd = b.node()->data;
  if (a.shape() == out_shape && b.shape() == out_shape) {
    for (std::size_t i = 0; i < n; ++i) out[i] = f(ad[i], bd[i]);
    return Tensor::make_result(out_shape, std::move(out), {a, b}, [da, db](Node& self) {
      auto& A = *self.inputs[0];
      auto& B = *self.inputs[1];
      if (A.requires_grad) {
        A.ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) A.grad[i] += self.grad[i] * da(A.data[i], B.data[i]);
      }
      if (B.requires_grad) {
        B.ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) B.grad[i] += self.grad[i] * db(A.data[i], B.data[i]);
      }
    }, name);
  }
  auto ia = std::make_shared<std::vector<std::size_t>>(broadcast_index(out_shape, a.shape()));
  auto ib = std::make_shared<std::vector<std::size_t>>(broadcast_index(out_shape, b.shape()));
  for (std::size_t i = 0; i < n; ++i) out[i] = f(ad[(*ia)[i]], bd[(*ib)[i]]);
  return Tensor::make_result(out_shape, std::move(out), {a, b}, [ia, ib, da, db](Node& self) {
    auto& A = *self.inputs[0];
    auto& B = *self.inputs[1];
    if (A.requires_grad) {
      A.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        A.grad[(*ia)[i]] += self.grad[i] * da(A.data[(*ia)[i]], B.data[(*ib)[i]]);
      }
    }
    if (B.requires_grad) {
      B.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        B.grad[(*ib)[i]] += self.grad[i] * db(A.data[(*ia)[i]], B.data[(*ib)[i]]);
      }
    }
  }, name);
}

// The derivative is expressed in terms of the input value and the output value.
template <typename F, typename D>
Tensor unary_op(const Tensor& x, F f, D d, const char* name) {
  const auto& xd = x.node()->data;
  Buffer out(xd.size());
  for (std::size_t i = 0; i < xd.size(); ++i) out[i] = f(xd[i]);
  return Tensor::make_result(x.shape(), std::move(out), {x}, [d](Node& self) {
    auto& X = *self.inputs[0];
    X.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) X.grad[i] += self.grad[i] * d(X.data[i], self.data[i]);
  }, name);
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; }, "add");
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; }, "sub");
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; }, "mul");
}

/// a / b with |b| clamped to at least kLogClamp (sign preserved).
inline Tensor div(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      a, b, [](double x, double y) { return x / detail::safe_den(y); },
      [](double, double y) { return 1.0 / detail::safe_den(y); },
      [](double x, double y) {
        if (std::abs(y) < kLogClamp) return 0.0;
        return -x / (y * y);
      },
      "div");
}

inline Tensor exp(const Tensor& x) {
  return detail::unary_op(
      x, [](double v) { return std::exp(v); }, [](double, double y) { return y; }, "exp");
}

/// Natural log of max(x, kLogClamp); zero gradient inside the clamp band.
inline Tensor log(const Tensor& x) {
  return detail::unary_op(
      x, [](double v) { return std::log(std::max(v, kLogClamp)); },
      [](double v, double) { return v >= kLogClamp ? 1.0 / v : 0.0; }, "log");
}

inline Tensor abs(const Tensor& x) {
  return detail::unary_op(
      x, [](double v) { return std::abs(v); },
      [](double v, double) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); }, "abs");
}

inline Tensor pow(const Tensor& x, double p) {
  return detail::unary_op(
      x, [p](double v) { return std::pow(v, p); },
      [p](double v, double) { return p == 0.0 ? 0.0 : p * std::pow(v, p - 1.0); }, "pow");
}

inline Tensor square(const Tensor& x) {
  return detail::unary_op(
      x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; }, "square");
}

inline Tensor relu(const Tensor& x) {
  return detail::unary_op(
      x, [](double v) { return v > 0 ? v : 0.0; }, [](double v, double) { return v > 0 ? 1.0 : 0.0; },
      "relu");
}

inline Tensor leaky_relu(const Tensor& x, double slope) {
  return detail::unary_op(
      x, [slope](double v) { return v > 0 ? v : slope * v; },
      [slope](double v, double) { return v > 0 ? 1.0 : slope; }, "leaky_relu");
}

inline Tensor sigmoid(const Tensor& x) {
  return detail::unary_op(
      x,
      [](double v) {
        if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); }, "sigmoid");
}

inline Tensor softplus(const Tensor& x) {
  return detail::unary_op(
      x, [](double v) { return std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v))); },
      [](double v, double) {
        if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      "softplus");
}

inline Tensor tanh(const Tensor& x) {
  return detail::unary_op(
      x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; }, "tanh");
}

/// Clamp to [lo, hi]; gradient passes only strictly inside the interval.
inline Tensor clamp(const Tensor& x, double lo, double hi) {
  return detail::unary_op(
      x, [lo, hi](double v) { return std::clamp(v, lo, hi); },
      [lo, hi](double v, double) { return (v > lo && v < hi) ? 1.0 : 0.0; }, "clamp");
}

inline Tensor neg(const Tensor& x) {
  return detail::unary_op(
      x, [](double v) { return -v; }, [](double, double) { return -1.0; }, "neg");
}

inline Tensor scale(const Tensor& x, double s) {
  return detail::unary_op(
      x, [s](double v) { return s * v; }, [s](double, double) { return s; }, "scale");
}

inline Tensor add_scalar(const Tensor& x, double s) {
  return detail::unary_op(
      x, [s](double v) { return v + s; }, [](double, double) { return 1.0; }, "add_scalar");
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator-(const Tensor& a) { return neg(a); }
inline Tensor operator+(const Tensor& a, double s) { return add_scalar(a, s); }
inline Tensor operator+(double s, const Tensor& a) { return add_scalar(a, s); }
inline Tensor operator-(const Tensor& a, double s) { return add_scalar(a, -s); }
inline Tensor operator-(double s, const Tensor& a) { return add_scalar(neg(a), s); }
inline Tensor operator*(const Tensor& a, double s) { return scale(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return scale(a, s); }
inline Tensor operator/(const Tensor& a, double s) { return scale(a, 1.0 / s); }

enum class ElementwiseOp { add, sub, mul, div, exp, log, abs, pow, relu, sigmoid, softplus, tanh };

/// Dispatch by op kind. Unary kinds ignore `b` except pow, which reads its exponent from b.
inline Tensor elementwise(ElementwiseOp op, const Tensor& a, const Tensor& b) {
  switch (op) {
    case ElementwiseOp::add: return add(a, b);
    case ElementwiseOp::sub: return sub(a, b);
    case ElementwiseOp::mul: return mul(a, b);
    case ElementwiseOp::div: return div(a, b);
    case ElementwiseOp::exp: return exp(a);
    case ElementwiseOp::log: return log(a);
    case ElementwiseOp::abs: return abs(a);
    case ElementwiseOp::pow: return pow(a, b.item());
    case ElementwiseOp::relu: return relu(a);
    case ElementwiseOp::sigmoid: return sigmoid(a);
    case ElementwiseOp::softplus: return softplus(a);
    case ElementwiseOp::tanh: return tanh(a);
  }
  throw std::invalid_argument("unknown elementwise op");
}

// ---------------------------------------------------------------- reductions

enum class ReduceOp { sum, mean, logsumexp };

namespace detail {

struct ReducePlan {
  Shape out_shape;
  std::vector<std::size_t> out_index;  // input flat -> output flat
  std::size_t group = 1;               // inputs per output
};

inline ReducePlan plan_reduce(const Shape& in, std::vector<int> axes, bool keepdims) {
  const int nd = static_cast<int>(in.size());
  std::vector<bool> reduced(in.size(), false);
  for (int ax : axes) {
    const int a = ax < 0 ? ax + nd : ax;
    if (a < 0 || a >= nd) throw ShapeError("reduction axis " + std::to_string(ax) + " out of range for " + shape_str(in));
    if (in[a] == 0) throw ShapeError("reduction over empty axis " + std::to_string(ax) + " of " + shape_str(in));
    reduced[a] = true;
  }
  ReducePlan plan;
  Shape kept(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) {
    kept[i] = reduced[i] ? 1 : in[i];
    if (reduced[i]) plan.group *= in[i];
    if (!reduced[i]) plan.out_shape.push_back(in[i]);
    else if (keepdims) plan.out_shape.push_back(1);
  }
  plan.out_index = broadcast_index(in, kept);
  return plan;
}

}  // namespace detail

/// Reduce over `axes` (negative axes count from the end). An empty axis list reduces everything.
inline Tensor reduce(ReduceOp op, const Tensor& x, std::vector<int> axes = {}, bool keepdims = false) {
  if (axes.empty()) {
    for (int i = 0; i < static_cast<int>(x.dim()); ++i) axes.push_back(i);
    if (x.numel() == 0) throw ShapeError("reduction of an empty tensor");
  }
  auto plan = std::make_shared<detail::ReducePlan>(detail::plan_reduce(x.shape(), axes, keepdims));
  const auto& xd = x.node()->data;
  const std::size_t n_out = numel(plan->out_shape);
  Buffer out(n_out, 0.0);
  const auto& oi = plan->out_index;
  switch (op) {
    case ReduceOp::sum:
    case ReduceOp::mean: {
      for (std::size_t i = 0; i < xd.size(); ++i) out[oi[i]] += xd[i];
      if (op == ReduceOp::mean) {
        const double inv = 1.0 / static_cast<double>(plan->group);
        for (auto& v : out) v *= inv;
      }
      const double scale = op == ReduceOp::mean ? 1.0 / static_cast<double>(plan->group) : 1.0;
      return Tensor::make_result(plan->out_shape, std::move(out), {x}, [plan, scale](detail::Node& self) {
        auto& X = *self.inputs[0];
        X.ensure_grad();
        for (std::size_t i = 0; i < X.grad.size(); ++i) X.grad[i] += scale * self.grad[plan->out_index[i]];
      }, op == ReduceOp::sum ? "sum" : "mean");
    }
    case ReduceOp::logsumexp: {
      Buffer mx(n_out, -std::numeric_limits<double>::infinity());
      for (std::size_t i = 0; i < xd.size(); ++i) mx[oi[i]] = std::max(mx[oi[i]], xd[i]);
      for (auto& m : mx) {
        if (!std::isfinite(m)) m = 0.0;
      }
      for (std::size_t i = 0; i < xd.size(); ++i) out[oi[i]] += std::exp(xd[i] - mx[oi[i]]);
      for (std::size_t o = 0; o < n_out; ++o) out[o] = mx[o] + std::log(out[o]);
      return Tensor::make_result(plan->out_shape, std::move(out), {x}, [plan](detail::Node& self) {
        auto& X = *self.inputs[0];
        X.ensure_grad();
        for (std::size_t i = 0; i < X.grad.size(); ++i) {
          const std::size_t o = plan->out_index[i];
          X.grad[i] += self.grad[o] * std::exp(X.data[i] - self.data[o]);
        }
      }, "logsumexp");
    }
  }
  throw std::invalid_argument("unknown reduce op");
}

inline Tensor sum(const Tensor& x, std::vector<int> axes = {}, bool keepdims = false) {
  return reduce(ReduceOp::sum, x, std::move(axes), keepdims);
}
inline Tensor mean(const Tensor& x, std::vector<int> axes = {}, bool keepdims = false) {
  return reduce(ReduceOp::mean, x, std::move(axes), keepdims);
}
inline Tensor logsumexp(const Tensor& x, std::vector<int> axes = {}, bool keepdims = false) {
  return reduce(ReduceOp::logsumexp, x, std::move(axes), keepdims);
}

// ---------------------------------------------------------------- shape ops

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.numel()) {
    throw ShapeError("cannot reshape " + shape_str(x.shape()) + " to " + shape_str(shape));
  }
  return Tensor::make_result(std::move(shape), x.node()->data, {x}, [](detail::Node& self) {
    auto& X = *self.inputs[0];
    X.ensure_grad();
    for (std::size_t i = 0; i < X.grad.size(); ++i) X.grad[i] += self.grad[i];
  }, "reshape");
}

/// Elements [begin, end) along `axis`.
inline Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end) {
  const Shape& in = x.shape();
  if (axis >= in.size() || begin > end || end > in[axis]) {
    throw ShapeError("invalid slice [" + std::to_string(begin) + "," + std::to_string(end) + ") on axis " +
                     std::to_string(axis) + " of " + shape_str(in));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= in[i];
  for (std::size_t i = axis + 1; i < in.size(); ++i) inner *= in[i];
  Shape out_shape = in;
  out_shape[axis] = end - begin;
  const std::size_t len = (end - begin) * inner;
  const std::size_t row = in[axis] * inner;
  Buffer out(outer * len);
  const auto& xd = x.node()->data;
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(xd.begin() + o * row + begin * inner, len, out.begin() + o * len);
  }
  return Tensor::make_result(out_shape, std::move(out), {x}, [=](detail::Node& self) {
    auto& X = *self.inputs[0];
    X.ensure_grad();
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t i = 0; i < len; ++i) X.grad[o * row + begin * inner + i] += self.grad[o * len + i];
    }
  }, "slice");
}

inline Tensor concat(const std::vector<Tensor>& xs, std::size_t axis) {
  if (xs.empty()) throw ShapeError("concat of no tensors");
  Shape out_shape = xs[0].shape();
  if (axis >= out_shape.size()) throw ShapeError("concat axis out of range");
  out_shape[axis] = 0;
  for (const auto& t : xs) {
    if (t.dim() != out_shape.size()) throw ShapeError("concat rank mismatch");
    for (std::size_t i = 0; i < t.dim(); ++i) {
      if (i != axis && t.size(i) != xs[0].size(i)) {
        throw ShapeError("concat shape mismatch: " + shape_str(t.shape()) + " vs " + shape_str(xs[0].shape()));
      }
    }
    out_shape[axis] += t.size(axis);
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= out_shape[i];
  for (std::size_t i = axis + 1; i < out_shape.size(); ++i) inner *= out_shape[i];
  const std::size_t out_row = out_shape[axis] * inner;
  Buffer out(numel(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& t : xs) {
    offsets.push_back(off);
    const std::size_t len = t.size(axis) * inner;
    const auto& td = t.node()->data;
    for (std::size_t o = 0; o < outer; ++o) std::copy_n(td.begin() + o * len, len, out.begin() + o * out_row + off);
    off += len;
  }
  return Tensor::make_result(out_shape, std::move(out), xs, [=](detail::Node& self) {
    for (std::size_t k = 0; k < self.inputs.size(); ++k) {
      auto& X = *self.inputs[k];
      if (!X.requires_grad) continue;
      X.ensure_grad();
      const std::size_t len = X.data.size() / outer;
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t i = 0; i < len; ++i) X.grad[o * len + i] += self.grad[o * out_row + offsets[k] + i];
      }
    }
  }, "concat");
}

inline Tensor transpose(const Tensor& x) {
  if (x.dim() != 2) throw ShapeError("transpose expects a matrix, got " + shape_str(x.shape()));
  const std::size_t m = x.size(0), n = x.size(1);
  Buffer out(m * n);
  detail::MapMat(out.data(), n, m) = detail::ConstMapMat(x.data().data(), m, n).transpose();
  return Tensor::make_result({n, m}, std::move(out), {x}, [m, n](detail::Node& self) {
    auto& X = *self.inputs[0];
    X.ensure_grad();
    detail::MapMat(X.grad.data(), m, n) += detail::ConstMapMat(self.grad.data(), n, m).transpose();
  }, "transpose");
}

// ---------------------------------------------------------------- linear algebra

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.dim() != 2 || b.dim() != 2 || a.size(1) != b.size(0)) {
    throw ShapeError("matmul shape mismatch: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const std::size_t m = a.size(0), k = a.size(1), n = b.size(1);
  Buffer out(m * n);
  detail::MapMat(out.data(), m, n).noalias() =
      detail::ConstMapMat(a.data().data(), m, k) * detail::ConstMapMat(b.data().data(), k, n);
  return Tensor::make_result({m, n}, std::move(out), {a, b}, [m, k, n](detail::Node& self) {
    auto& A = *self.inputs[0];
    auto& B = *self.inputs[1];
    detail::ConstMapMat g(self.grad.data(), m, n);
    if (A.requires_grad) {
      A.ensure_grad();
      detail::MapMat(A.grad.data(), m, k).noalias() += g * detail::ConstMapMat(B.data.data(), k, n).transpose();
    }
    if (B.requires_grad) {
      B.ensure_grad();
      detail::MapMat(B.grad.data(), k, n).noalias() += detail::ConstMapMat(A.data.data(), m, k).transpose() * g;
    }
  }, "matmul");
}

/// x (B, in) * w (out, in)^T + bias (out).
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  if (x.dim() != 2 || w.dim() != 2 || x.size(1) != w.size(1)) {
    throw ShapeError("linear shape mismatch: " + shape_str(x.shape()) + " with weight " + shape_str(w.shape()));
  }
  const std::size_t bsz = x.size(0), in = x.size(1), out_n = w.size(0);
  Buffer out(bsz * out_n);
  detail::MapMat o(out.data(), bsz, out_n);
  o.noalias() = detail::ConstMapMat(x.data().data(), bsz, in) * detail::ConstMapMat(w.data().data(), out_n, in).transpose();
  if (bias.defined()) {
    Eigen::Map<const Eigen::RowVectorXd> bv(bias.data().data(), out_n);
    o.rowwise() += bv;
  }
  std::vector<Tensor> inputs{x, w};
  if (bias.defined()) inputs.push_back(bias);
  return Tensor::make_result({bsz, out_n}, std::move(out), inputs, [bsz, in, out_n](detail::Node& self) {
    auto& X = *self.inputs[0];
    auto& W = *self.inputs[1];
    detail::ConstMapMat g(self.grad.data(), bsz, out_n);
    if (X.requires_grad) {
      X.ensure_grad();
      detail::MapMat(X.grad.data(), bsz, in).noalias() += g * detail::ConstMapMat(W.data.data(), out_n, in);
    }
    if (W.requires_grad) {
      W.ensure_grad();
      detail::MapMat(W.grad.data(), out_n, in).noalias() += g.transpose() * detail::ConstMapMat(X.data.data(), bsz, in);
    }
    if (self.inputs.size() > 2 && self.inputs[2]->requires_grad) {
      auto& Bv = *self.inputs[2];
      Bv.ensure_grad();
      Eigen::Map<Eigen::RowVectorXd>(Bv.grad.data(), out_n) += g.colwise().sum();
    }
  }, "linear");
}

// ---------------------------------------------------------------- convolution

struct ConvGeometry {
  std::size_t batch, channels, height, width;  // image side
  std::size_t kh, kw, stride, padding;
  std::size_t out_h, out_w;                    // column side

  std::size_t patch() const { return channels * kh * kw; }
  std::size_t columns() const { return batch * out_h * out_w; }
};

namespace detail {

inline std::size_t conv_out_extent(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad,
                                   const char* what) {
  const long long num = static_cast<long long>(in) + 2 * static_cast<long long>(pad) - static_cast<long long>(k);
  if (stride == 0 || num < 0) {
    throw ShapeError(std::string(what) + ": non-positive output extent (input " + std::to_string(in) + ", kernel " +
                     std::to_string(k) + ", stride " + std::to_string(stride) + ", padding " + std::to_string(pad) + ")");
  }
  return static_cast<std::size_t>(num) / stride + 1;
}

// cols[(c*kh + i)*kw + j][(b*out_h + oy)*out_w + ox] = img[b, c, oy*s - p + i, ox*s - p + j]
inline void im2col(const double* img, const ConvGeometry& g, double* cols) {
  const std::size_t ncol = g.columns();
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        double* row = cols + ((c * g.kh + i) * g.kw + j) * ncol;
        for (std::size_t b = 0; b < g.batch; ++b) {
          const double* plane = img + (b * g.channels + c) * g.height * g.width;
          for (std::size_t oy = 0; oy < g.out_h; ++oy) {
            const long long y = static_cast<long long>(oy * g.stride + i) - static_cast<long long>(g.padding);
            double* dst = row + (b * g.out_h + oy) * g.out_w;
            if (y < 0 || y >= static_cast<long long>(g.height)) {
              std::fill_n(dst, g.out_w, 0.0);
              continue;
            }
            const double* src = plane + static_cast<std::size_t>(y) * g.width;
            for (std::size_t ox = 0; ox < g.out_w; ++ox) {
              const long long x = static_cast<long long>(ox * g.stride + j) - static_cast<long long>(g.padding);
              dst[ox] = (x < 0 || x >= static_cast<long long>(g.width)) ? 0.0 : src[x];
            }
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatter-add columns back into the image.
inline void col2im(const double* cols, const ConvGeometry& g, double* img) {
  const std::size_t ncol = g.columns();
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        const double* row = cols + ((c * g.kh + i) * g.kw + j) * ncol;
        for (std::size_t b = 0; b < g.batch; ++b) {
          double* plane = img + (b * g.channels + c) * g.height * g.width;
          for (std::size_t oy = 0; oy < g.out_h; ++oy) {
            const long long y = static_cast<long long>(oy * g.stride + i) - static_cast<long long>(g.padding);
            if (y < 0 || y >= static_cast<long long>(g.height)) continue;
            const double* src = row + (b * g.out_h + oy) * g.out_w;
            double* dst = plane + static_cast<std::size_t>(y) * g.width;
            for (std::size_t ox = 0; ox < g.out_w; ++ox) {
              const long long x = static_cast<long long>(ox * g.stride + j) - static_cast<long long>(g.padding);
              if (x >= 0 && x < static_cast<long long>(g.width)) dst[x] += src[ox];
            }
          }
        }
      }
    }
  }
}

// (B, C, HW) <-> (C, B*HW)
inline void batch_to_channel_major(const double* src, std::size_t b, std::size_t c, std::size_t hw, double* dst) {
  for (std::size_t bi = 0; bi < b; ++bi)
    for (std::size_t ci = 0; ci < c; ++ci)
      std::copy_n(src + (bi * c + ci) * hw, hw, dst + (ci * b + bi) * hw);
}
inline void channel_to_batch_major(const double* src, std::size_t b, std::size_t c, std::size_t hw, double* dst) {
  for (std::size_t bi = 0; bi < b; ++bi)
    for (std::size_t ci = 0; ci < c; ++ci)
      std::copy_n(src + (ci * b + bi) * hw, hw, dst + (bi * c + ci) * hw);
}

}  // namespace detail

/// Cross-correlation of x (B, Cin, H, W) with w (Cout, Cin, kh, kw); bias (Cout) optional.
inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, std::size_t stride, std::size_t padding,
                     const std::string& layer = "conv2d") {
  if (x.dim() != 4 || w.dim() != 4 || x.size(1) != w.size(1)) {
    throw ShapeError(layer + ": conv2d input " + shape_str(x.shape()) + " incompatible with weight " + shape_str(w.shape()));
  }
  ConvGeometry g{x.size(0), x.size(1), x.size(2), x.size(3), w.size(2), w.size(3), stride, padding, 0, 0};
  g.out_h = detail::conv_out_extent(g.height, g.kh, stride, padding, layer.c_str());
  g.out_w = detail::conv_out_extent(g.width, g.kw, stride, padding, layer.c_str());
  const std::size_t cout = w.size(0);
  const std::size_t hw = g.out_h * g.out_w;
  auto cols = std::make_shared<Buffer>(g.patch() * g.columns());
  detail::im2col(x.data().data(), g, cols->data());
  Buffer ymat(cout * g.columns());
  detail::MapMat Y(ymat.data(), cout, g.columns());
  Y.noalias() = detail::ConstMapMat(w.data().data(), cout, g.patch()) * detail::ConstMapMat(cols->data(), g.patch(), g.columns());
  if (bias.defined()) {
    Eigen::Map<const Eigen::VectorXd> bv(bias.data().data(), cout);
    Y.colwise() += bv;
  }
  Buffer out(ymat.size());
  detail::channel_to_batch_major(ymat.data(), g.batch, cout, hw, out.data());
  std::vector<Tensor> inputs{x, w};
  if (bias.defined()) inputs.push_back(bias);
  return Tensor::make_result({g.batch, cout, g.out_h, g.out_w}, std::move(out), inputs, [g, cout, hw, cols](detail::Node& self) {
    auto& X = *self.inputs[0];
    auto& W = *self.inputs[1];
    Buffer gmat(self.grad.size());
    detail::batch_to_channel_major(self.grad.data(), g.batch, cout, hw, gmat.data());
    detail::ConstMapMat G(gmat.data(), cout, g.columns());
    if (W.requires_grad) {
      W.ensure_grad();
      detail::MapMat(W.grad.data(), cout, g.patch()).noalias() +=
          G * detail::ConstMapMat(cols->data(), g.patch(), g.columns()).transpose();
    }
    if (self.inputs.size() > 2 && self.inputs[2]->requires_grad) {
      auto& Bv = *self.inputs[2];
      Bv.ensure_grad();
      Eigen::Map<Eigen::VectorXd>(Bv.grad.data(), cout) += G.rowwise().sum();
    }
    if (X.requires_grad) {
      X.ensure_grad();
      Buffer dcols(g.patch() * g.columns());
      detail::MapMat(dcols.data(), g.patch(), g.columns()).noalias() =
          detail::ConstMapMat(W.data.data(), cout, g.patch()).transpose() * G;
      detail::col2im(dcols.data(), g, X.grad.data());
    }
  }, "conv2d");
}

/// Transposed convolution: the exact adjoint of conv2d with weight w (Cin, Cout, kh, kw),
/// mapping x (B, Cin, H, W) to (B, Cout, (H-1)*stride - 2*padding + kh, ...).
inline Tensor conv_transpose2d(const Tensor& x, const Tensor& w, const Tensor& bias, std::size_t stride,
                               std::size_t padding, const std::string& layer = "conv_transpose2d") {
  if (x.dim() != 4 || w.dim() != 4 || x.size(1) != w.size(0)) {
    throw ShapeError(layer + ": conv_transpose2d input " + shape_str(x.shape()) + " incompatible with weight " +
                     shape_str(w.shape()));
  }
  const std::size_t cin = w.size(0), cout = w.size(1), kh = w.size(2), kw = w.size(3);
  const long long oh = (static_cast<long long>(x.size(2)) - 1) * static_cast<long long>(stride) -
                       2 * static_cast<long long>(padding) + static_cast<long long>(kh);
  const long long ow = (static_cast<long long>(x.size(3)) - 1) * static_cast<long long>(stride) -
                       2 * static_cast<long long>(padding) + static_cast<long long>(kw);
  if (stride == 0 || oh < 1 || ow < 1) {
    throw ShapeError(layer + ": non-positive output extent for conv_transpose2d on " + shape_str(x.shape()));
  }
  // Geometry of the forward conv2d this op is the adjoint of.
  ConvGeometry g{x.size(0), cout, static_cast<std::size_t>(oh), static_cast<std::size_t>(ow), kh, kw, stride, padding,
                 x.size(2), x.size(3)};
  const std::size_t hw_in = g.out_h * g.out_w;
  auto xmat = std::make_shared<Buffer>(x.numel());
  detail::batch_to_channel_major(x.data().data(), g.batch, cin, hw_in, xmat->data());
  Buffer cols(g.patch() * g.columns());
  detail::MapMat(cols.data(), g.patch(), g.columns()).noalias() =
      detail::ConstMapMat(w.data().data(), cin, g.patch()).transpose() * detail::ConstMapMat(xmat->data(), cin, g.columns());
  Buffer out(g.batch * cout * g.height * g.width, 0.0);
  detail::col2im(cols.data(), g, out.data());
  if (bias.defined()) {
    const std::size_t plane = g.height * g.width;
    for (std::size_t b = 0; b < g.batch; ++b)
      for (std::size_t c = 0; c < cout; ++c) {
        double* p = out.data() + (b * cout + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) p[i] += bias[c];
      }
  }
  std::vector<Tensor> inputs{x, w};
  if (bias.defined()) inputs.push_back(bias);
  return Tensor::make_result({g.batch, cout, g.height, g.width}, std::move(out), inputs,
                             [g, cin, cout, hw_in, xmat](detail::Node& self) {
    auto& X = *self.inputs[0];
    auto& W = *self.inputs[1];
    Buffer gcols(g.patch() * g.columns());
    detail::im2col(self.grad.data(), g, gcols.data());
    detail::ConstMapMat GC(gcols.data(), g.patch(), g.columns());
    if (W.requires_grad) {
      W.ensure_grad();
      detail::MapMat(W.grad.data(), cin, g.patch()).noalias() +=
          detail::ConstMapMat(xmat->data(), cin, g.columns()) * GC.transpose();
    }
    if (X.requires_grad) {
      X.ensure_grad();
      Buffer dx(cin * g.columns());
      detail::MapMat(dx.data(), cin, g.columns()).noalias() = detail::ConstMapMat(W.data.data(), cin, g.patch()) * GC;
      Buffer dxb(dx.size());
      detail::channel_to_batch_major(dx.data(), g.batch, cin, hw_in, dxb.data());
      for (std::size_t i = 0; i < dxb.size(); ++i) X.grad[i] += dxb[i];
    }
    if (self.inputs.size() > 2 && self.inputs[2]->requires_grad) {
      auto& Bv = *self.inputs[2];
      Bv.ensure_grad();
      const std::size_t plane = g.height * g.width;
      for (std::size_t b = 0; b < g.batch; ++b)
        for (std::size_t c = 0; c < cout; ++c) {
          const double* p = self.grad.data() + (b * cout + c) * plane;
          double acc = 0.0;
          for (std::size_t i = 0; i < plane; ++i) acc += p[i];
          Bv.grad[c] += acc;
        }
    }
  }, "conv_transpose2d");
}

// ---------------------------------------------------------------- composites

inline Tensor log_softmax(const Tensor& logits, int axis = -1) {
  return logits - logsumexp(logits, {axis}, true);
}

/// Mean softmax cross-entropy of logits (B, K) against integer labels.
inline Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
  if (logits.dim() != 2 || logits.size(0) != labels.size()) {
    throw ShapeError("cross_entropy: logits " + shape_str(logits.shape()) + " vs " + std::to_string(labels.size()) + " labels");
  }
  const std::size_t k = logits.size(1);
  Tensor onehot({labels.size(), k}, 0.0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= k) throw ShapeError("cross_entropy: label out of range");
    onehot.mutable_data()[i * k + static_cast<std::size_t>(labels[i])] = 1.0;
  }
  return -mean(sum(log_softmax(logits) * onehot, {1}));
}

}  // namespace disent
