#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "disent/nn.hpp"

namespace disent {

struct AdamHyper {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam moments for one parameter group, in the group's parameter order.
struct AdamState {
  AdamHyper hyper;
  std::uint64_t t = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;

  AdamState() = default;
  AdamState(AdamHyper h, const std::vector<NamedTensor>& params) : hyper(h) {
    for (const auto& p : params) {
      m.emplace_back(p.tensor.numel(), 0.0);
      v.emplace_back(p.tensor.numel(), 0.0);
    }
  }
};

/// One bias-corrected Adam update. Gradients are read, not cleared.
/// A parameter that never received a gradient is treated as having a zero gradient.
inline void adam_step(AdamState& state, std::vector<NamedTensor>& params) {
  if (state.m.size() != params.size()) throw std::logic_error("adam_step: state does not match parameter group");
  for (const auto& p : params) {
    if (!p.tensor.has_grad()) continue;
    for (double g : p.tensor.grad()) {
      if (!std::isfinite(g)) throw NumericError("non-finite gradient in parameter " + p.name);
    }
  }
  state.t += 1;
  const auto& h = state.hyper;
  const double bc1 = 1.0 - std::pow(h.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(h.beta2, static_cast<double>(state.t));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = params[k].tensor;
    auto& m = state.m[k];
    auto& v = state.v[k];
    if (m.size() != p.numel()) throw std::logic_error("adam_step: moment shape mismatch for " + params[k].name);
    auto w = p.mutable_data();
    const bool has = p.has_grad();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double g = has ? p.grad()[i] : 0.0;
      m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g;
      v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g * g;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      w[i] -= h.lr * mhat / (std::sqrt(vhat) + h.eps);
    }
  }
}

inline void zero_grad(std::vector<NamedTensor>& params) {
  for (auto& p : params) p.tensor.zero_grad();
}

}  // namespace disent
