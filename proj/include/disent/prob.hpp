#pragma once

#include <cmath>
#include <numbers>
#include <random>
#include <string>

#include "disent/nn.hpp"
#include "disent/ops.hpp"

namespace disent {

inline constexpr double kLog2Pi = 1.8378770664093454835606594728112;  // ln(2*pi)
inline constexpr double kProbClamp = 1e-7;

/// Standard normal draws of the given shape from a seeded engine.
inline Tensor standard_normal(Shape shape, std::mt19937_64& rng) {
  std::normal_distribution<double> n01(0.0, 1.0);
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = n01(rng);
  return Tensor(std::move(shape), std::move(v));
}

/// z = mu + exp(0.5 logvar) * eps with a caller-supplied eps (no grad through eps).
inline Tensor reparameterize(const Tensor& mu, const Tensor& logvar, const Tensor& eps) {
  if (mu.shape() != logvar.shape() || mu.shape() != eps.shape()) {
    throw ShapeError("reparameterize: shapes " + shape_str(mu.shape()) + ", " + shape_str(logvar.shape()) + ", " +
                     shape_str(eps.shape()) + " differ");
  }
  return mu + exp(logvar * 0.5) * eps.detach();
}

/// Draws eps from `rng`, fills post.z and post.eps.
inline void reparameterize(LatentPosterior& post, std::mt19937_64& rng) {
  post.eps = standard_normal(post.mu.shape(), rng);
  post.z = reparameterize(post.mu, post.logvar, post.eps);
}

/// Per-sample KL(N(mu, exp(logvar)) || N(0, I)), shape (B,).
inline Tensor kl_to_standard_normal(const Tensor& mu, const Tensor& logvar) {
  if (mu.shape() != logvar.shape() || mu.dim() != 2) {
    throw ShapeError("kl_to_standard_normal: expected matching (B,d) tensors");
  }
  return sum(square(mu) + exp(logvar) - logvar - 1.0, {1}) * 0.5;
}

/// Entry (i, j, k) = log N(z[i,k]; mu[j,k], exp(logvar[j,k])), shape (B, B', d).
inline Tensor log_density_diag_gaussian(const Tensor& z, const Tensor& mu, const Tensor& logvar) {
  if (z.dim() != 2 || mu.dim() != 2 || mu.shape() != logvar.shape() || z.size(1) != mu.size(1)) {
    throw ShapeError("log_density_diag_gaussian: incompatible shapes " + shape_str(z.shape()) + " / " +
                     shape_str(mu.shape()));
  }
  const std::size_t b = z.size(0), bp = mu.size(0), d = z.size(1);
  Tensor zi = reshape(z, {b, 1, d});
  Tensor mj = reshape(mu, {1, bp, d});
  Tensor lj = reshape(logvar, {1, bp, d});
  Tensor diff = zi - mj;
  return (square(diff) * exp(-lj) + lj + kLog2Pi) * -0.5;
}

/// Elementwise log N(z; 0, 1), same shape as z.
inline Tensor log_standard_normal(const Tensor& z) { return (square(z) + kLog2Pi) * -0.5; }

enum class ReconKind { bernoulli, mse };

NLOHMANN_JSON_SERIALIZE_ENUM(ReconKind, {{ReconKind::bernoulli, "bernoulli"}, {ReconKind::mse, "mse"}})

inline ReconKind parse_recon_kind(const std::string& s) {
  if (s == "bernoulli") return ReconKind::bernoulli;
  if (s == "mse") return ReconKind::mse;
  throw ConfigError("unknown reconstruction kind '" + s + "' (valid: bernoulli, mse)");
}

/// Reconstruction loss summed over pixels and averaged over the batch.
/// Bernoulli clamps x_hat to [1e-7, 1 - 1e-7].
inline Tensor recon_loss(const Tensor& x, const Tensor& x_hat, ReconKind kind) {
  if (x.shape() != x_hat.shape() || x.dim() < 1) {
    throw ShapeError("recon_loss: shapes " + shape_str(x.shape()) + " and " + shape_str(x_hat.shape()) + " differ");
  }
  const std::size_t batch = x.size(0);
  Tensor flat_x = reshape(x, {batch, x.numel() / batch});
  Tensor flat_h = reshape(x_hat, {batch, x.numel() / batch});
  switch (kind) {
    case ReconKind::bernoulli: {
      Tensor p = clamp(flat_h, kProbClamp, 1.0 - kProbClamp);
      Tensor ll = flat_x * log(p) + (1.0 - flat_x) * log(1.0 - p);
      return -mean(sum(ll, {1}));
    }
    case ReconKind::mse: return mean(sum(square(flat_x - flat_h), {1}));
  }
  throw ConfigError("unknown reconstruction kind");
}

}  // namespace disent
