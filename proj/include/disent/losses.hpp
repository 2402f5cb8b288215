#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "disent/nn.hpp"
#include "disent/ops.hpp"
#include "disent/optim.hpp"
#include "disent/prob.hpp"
#include "disent/synth_data.hpp"

namespace disent {

// ---------------------------------------------------------------- term configuration

/// beta * |KL - C|. With C = 0 and beta = 1 this is the KL of the plain ELBO.
struct KlTerm {
  std::string name = "VAE";
  double beta = 1.0;
  bool use_capacity = false;
};

/// Minibatch-weighted decomposition alpha*MI + beta*TC + gamma*dimKL. With use_capacity the
/// non-TC part is priced as |alpha*MI + gamma*dimKL - C|.
struct BtcTerm {
  std::string name = "BTCVAE";
  double alpha = 1.0;
  double beta = 2.0;
  double gamma = 1.0;
  std::size_t dataset_size = 0;  // 0: taken from the dataset
  bool use_capacity = false;
};

/// Adversarial total-correlation estimate via a real-vs-permuted discriminator.
struct FactorTcTerm {
  std::string name = "FactorVAE";
  double gamma_tc = 10.0;
  std::size_t disc_hidden = 256;
  std::size_t disc_layers = 4;
  double disc_lr = 1e-4;
  double disc_beta1 = 0.5;
  double disc_beta2 = 0.9;
};

enum class BandwidthMode { latent_dim, fixed };

/// lambda * MMD^2 between q(z) samples and N(0, I) draws, RBF kernel.
struct MmdTerm {
  std::string name = "InfoVAE";
  double lambda = 10.0;
  BandwidthMode bandwidth_mode = BandwidthMode::latent_dim;
  double sigma2 = 1.0;  // used when bandwidth_mode == fixed
};

enum class DipMode { I, II };

struct DipTerm {
  std::string name = "DIP_I";
  DipMode mode = DipMode::I;
  double lambda_od = 10.0;
  double lambda_d = 100.0;
};

/// Conditions encoder and decoder on a one-hot factor; contributes no loss of its own.
struct CvaeTerm {
  std::string name = "CVAE";
  std::string condition_factor = "shape";
};

/// Reserves the first `label_dims` latents for a known attribute: an auxiliary classifier
/// must predict it from them, an adversarial one must fail to predict it from the rest.
struct IfcvaeTerm {
  std::string name = "IFCVAE";
  std::string label_factor = "shape";
  std::size_t label_dims = 1;
  double w_aux = 1.0;
  double w_adv = 1.0;
  std::size_t clf_hidden = 64;
  double clf_lr = 1e-3;
};

using TermConfig = std::variant<KlTerm, BtcTerm, FactorTcTerm, MmdTerm, DipTerm, CvaeTerm, IfcvaeTerm>;

inline const std::string& term_name(const TermConfig& t) {
  return std::visit([](const auto& v) -> const std::string& { return v.name; }, t);
}

/// Terms that re-price the KL content of the posterior.
inline bool is_kl_family(const TermConfig& t) {
  return std::holds_alternative<KlTerm>(t) || std::holds_alternative<BtcTerm>(t);
}

struct ObjectiveSpec {
  std::vector<TermConfig> terms;
  ReconKind recon_kind = ReconKind::bernoulli;
  bool allow_term_overlap = false;

  template <typename T>
  const T* find() const {
    for (const auto& t : terms)
      if (const T* p = std::get_if<T>(&t)) return p;
    return nullptr;
  }

  /// Checks the term invariants; throws ConfigError naming the offending term(s).
  void validate(std::size_t latent_dim, std::size_t batch_size, std::size_t dataset_size) const {
    auto nonneg = [](const std::string& term, const char* what, double v) {
      if (!std::isfinite(v) || v < 0.0) {
        throw ConfigError(term + ": weight " + what + " must be finite and >= 0 (got " + std::to_string(v) + ")");
      }
    };
    if (!allow_term_overlap) {
      for (std::size_t i = 0; i < terms.size(); ++i)
        for (std::size_t j = i + 1; j < terms.size(); ++j)
          if (is_kl_family(terms[i]) && is_kl_family(terms[j])) {
            throw ConfigError("loss terms " + term_name(terms[i]) + " and " + term_name(terms[j]) +
                              " both re-weight the KL term; set allow_term_overlap to combine them");
          }
    }
    std::size_t n_cvae = 0, n_ifcvae = 0, n_factor = 0;
    for (const auto& t : terms) {
      std::visit(
          [&](const auto& v) {
            using V = std::decay_t<decltype(v)>;
            if constexpr (std::is_same_v<V, KlTerm>) {
              nonneg(v.name, "beta", v.beta);
            } else if constexpr (std::is_same_v<V, BtcTerm>) {
              nonneg(v.name, "alpha", v.alpha);
              nonneg(v.name, "beta", v.beta);
              nonneg(v.name, "gamma", v.gamma);
              const std::size_t n = v.dataset_size ? v.dataset_size : dataset_size;
              if (batch_size < 2) throw ConfigError(v.name + ": minibatch-weighted sampling needs batch size >= 2");
              if (n < batch_size) throw ConfigError(v.name + ": dataset_size must be >= batch size");
            } else if constexpr (std::is_same_v<V, FactorTcTerm>) {
              nonneg(v.name, "gamma_tc", v.gamma_tc);
              if (v.disc_layers == 0 || v.disc_hidden == 0) throw ConfigError(v.name + ": discriminator needs hidden layers");
              ++n_factor;
            } else if constexpr (std::is_same_v<V, MmdTerm>) {
              nonneg(v.name, "lambda", v.lambda);
              if (v.bandwidth_mode == BandwidthMode::fixed && !(v.sigma2 > 0.0)) throw ConfigError(v.name + ": sigma2 must be > 0");
              if (batch_size < 2) throw ConfigError(v.name + ": needs batch size >= 2");
            } else if constexpr (std::is_same_v<V, DipTerm>) {
              nonneg(v.name, "lambda_od", v.lambda_od);
              nonneg(v.name, "lambda_d", v.lambda_d);
              if (batch_size < 2) throw ConfigError(v.name + ": needs batch size >= 2");
            } else if constexpr (std::is_same_v<V, CvaeTerm>) {
              ++n_cvae;
            } else if constexpr (std::is_same_v<V, IfcvaeTerm>) {
              nonneg(v.name, "w_aux", v.w_aux);
              nonneg(v.name, "w_adv", v.w_adv);
              if (v.label_dims == 0 || v.label_dims > latent_dim) {
                throw ConfigError(v.name + ": label_dims must be in [1, latent_dim=" + std::to_string(latent_dim) + "]");
              }
              ++n_ifcvae;
            }
          },
          t);
    }
    if (n_cvae > 1 || n_ifcvae > 1 || n_factor > 1) throw ConfigError("CVAE, IFCVAE and FactorVAE may each appear at most once");
  }
};

// ---------------------------------------------------------------- individual terms

/// beta * |mean(kl) - C|.
inline Tensor term_kl_capacity(const Tensor& kl_per_sample, double beta, double capacity) {
  return abs(mean(kl_per_sample) - capacity) * beta;
}

struct BtcDecomposition {
  Tensor mi;      // mean_i[log q(z_i|x_i) - log q(z_i)]
  Tensor tc;      // mean_i[log q(z_i) - log prod_k q(z_ik)]
  Tensor dim_kl;  // mean_i[log prod_k q(z_ik) - log p(z_i)]
  Tensor log_qz_given_x;  // (B,)
  Tensor log_pz;          // (B,)
};

/// Minibatch-weighted sampling estimate of the KL decomposition for a batch drawn from a
/// dataset of `dataset_size` examples.
inline BtcDecomposition btc_decompose(const LatentPosterior& post, std::size_t dataset_size) {
  const std::size_t b = post.z.size(0);
  if (b < 2) throw ConfigError("btc_decompose: batch size must be >= 2");
  if (dataset_size < b) throw ConfigError("btc_decompose: dataset_size must be >= batch size");
  const double log_nb = std::log(static_cast<double>(dataset_size) * static_cast<double>(b));

  Tensor m = log_density_diag_gaussian(post.z, post.mu, post.logvar);  // (B, B, d)
  Tensor eye({b, b, 1}, 0.0);
  for (std::size_t i = 0; i < b; ++i) eye.mutable_data()[i * b + i] = 1.0;
  BtcDecomposition out;
  out.log_qz_given_x = sum(sum(m * eye, {1}), {1});                 // sum_k M[i,i,k]
  Tensor log_qz = logsumexp(sum(m, {2}), {1}) - log_nb;             // (B,)
  Tensor log_prod_qzk = sum(logsumexp(m, {1}) - log_nb, {1});       // (B,)
  out.log_pz = sum(log_standard_normal(post.z), {1});
  out.mi = mean(out.log_qz_given_x - log_qz);
  out.tc = mean(log_qz - log_prod_qzk);
  out.dim_kl = mean(log_prod_qzk - out.log_pz);
  return out;
}

/// Independently permutes each column across the batch. Output is cut from the tape.
inline Tensor permute_dims(const Tensor& z, std::mt19937_64& rng) {
  if (z.dim() != 2 || z.size(0) < 1) throw ShapeError("permute_dims expects (B, d) with B >= 1");
  const std::size_t b = z.size(0), d = z.size(1);
  std::vector<double> out(z.numel());
  for (std::size_t k = 0; k < d; ++k) {
    const auto perm = Shapes5::permutation(b, rng);
    for (std::size_t i = 0; i < b; ++i) out[i * d + k] = z[perm[i] * d + k];
  }
  return Tensor(z.shape(), std::move(out));
}

/// gamma * mean[logit_real(z) - logit_permuted(z)]; logit 0 = "drawn from q(z)".
inline Tensor factor_tc_term(const Tensor& z, const Sequential& disc, double gamma_tc) {
  Tensor logits = disc.forward(z);
  if (logits.dim() != 2 || logits.size(1) != 2) throw ShapeError("factor discriminator must output 2 logits");
  return mean(slice(logits, 1, 0, 1) - slice(logits, 1, 1, 2)) * gamma_tc;
}

struct ClassifierStep {
  double loss = 0.0;
  double accuracy = 0.0;
};

namespace detail {

inline double argmax_accuracy(const Tensor& logits, const std::vector<int>& labels) {
  const std::size_t k = logits.size(1);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < k; ++c)
      if (logits[i * k + c] > logits[i * k + best]) best = c;
    if (static_cast<int>(best) == labels[i]) ++correct;
  }
  return labels.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(labels.size());
}

/// One supervised classifier update; gradients of `params` are cleared before and after.
inline ClassifierStep classifier_step(const Sequential& clf, AdamState& opt, const Tensor& inputs,
                                      const std::vector<int>& labels) {
  auto params = clf.parameters();
  zero_grad(params);
  Tensor logits = clf.forward(inputs.detach());
  Tensor loss = cross_entropy(logits, labels);
  loss.backward();
  adam_step(opt, params);
  zero_grad(params);
  return {loss.item(), argmax_accuracy(logits, labels)};
}

}  // namespace detail

/// Trains the discriminator one step: label 0 for z, label 1 for permuted z (both detached).
inline ClassifierStep factor_disc_step(const Tensor& z, const Tensor& z_perm, const Sequential& disc, AdamState& opt) {
  const std::size_t b = z.size(0), bp = z_perm.size(0);
  std::vector<int> labels(b + bp, 0);
  std::fill(labels.begin() + static_cast<std::ptrdiff_t>(b), labels.end(), 1);
  return detail::classifier_step(disc, opt, concat({z.detach(), z_perm.detach()}, 0), labels);
}

/// RBF kernel matrix exp(-||x_i - y_j||^2 / (2 sigma2)) for x (n,d), y (m,d).
inline Tensor rbf_kernel(const Tensor& x, const Tensor& y, double sigma2) {
  if (x.dim() != 2 || y.dim() != 2 || x.size(1) != y.size(1)) throw ShapeError("rbf_kernel: shape mismatch");
  const std::size_t n = x.size(0), m = y.size(0), d = x.size(1);
  Tensor diff = reshape(x, {n, 1, d}) - reshape(y, {1, m, d});
  return exp(sum(square(diff), {2}) * (-0.5 / sigma2));
}

/// Biased (V-statistic) MMD^2 between sample sets x and y.
inline Tensor mmd_squared(const Tensor& x, const Tensor& y, double sigma2) {
  return mean(rbf_kernel(x, x, sigma2)) + mean(rbf_kernel(y, y, sigma2)) - mean(rbf_kernel(x, y, sigma2)) * 2.0;
}

inline double mmd_bandwidth(const MmdTerm& t, std::size_t latent_dim) {
  return t.bandwidth_mode == BandwidthMode::latent_dim ? static_cast<double>(latent_dim) : t.sigma2;
}

/// lambda * MMD^2(z, prior draws); the prior draws come from `rng`.
inline Tensor mmd_term(const Tensor& z, std::mt19937_64& rng, double lambda, double sigma2) {
  if (z.dim() != 2 || z.size(0) < 2) throw ConfigError("mmd_term: batch size must be >= 2");
  Tensor prior = standard_normal(z.shape(), rng);
  return mmd_squared(z, prior, sigma2) * lambda;
}

/// Batch covariance of mu (mode I) or of the full posterior mixture (mode II).
inline Tensor dip_covariance(const LatentPosterior& post, DipMode mode) {
  const std::size_t b = post.mu.size(0);
  Tensor centered = post.mu - mean(post.mu, {0}, true);
  Tensor cov = matmul(transpose(centered), centered) / static_cast<double>(b);
  if (mode == DipMode::II) {
    const std::size_t d = post.mu.size(1);
    Tensor eye({d, d}, 0.0);
    for (std::size_t i = 0; i < d; ++i) eye.mutable_data()[i * d + i] = 1.0;
    Tensor var_mean = reshape(mean(exp(post.logvar), {0}), {1, d});
    cov = cov + eye * var_mean;
  }
  return cov;
}

/// lambda_od * sum_{i!=j} Cov[i,j]^2 + lambda_d * sum_i (Cov[i,i] - 1)^2.
inline Tensor dip_term(const LatentPosterior& post, DipMode mode, double lambda_od, double lambda_d) {
  if (post.mu.dim() != 2 || post.mu.size(0) < 2) throw ConfigError("dip_term: batch size must be >= 2");
  const std::size_t d = post.mu.size(1);
  Tensor cov = dip_covariance(post, mode);
  Tensor eye({d, d}, 0.0);
  for (std::size_t i = 0; i < d; ++i) eye.mutable_data()[i * d + i] = 1.0;
  Tensor off = cov * (1.0 - eye);
  Tensor diag = sum(cov * eye, {1});
  return sum(square(off)) * lambda_od + sum(square(diag - 1.0)) * lambda_d;
}

struct IfcvaeParts {
  Tensor aux_ce;
  Tensor adv_ce;
  Tensor value;  // w_aux * aux_ce - w_adv * adv_ce
};

/// Model-side IFCVAE objective for latent z (B, d) and integer labels.
inline IfcvaeParts ifcvae_terms(const Tensor& z, const std::vector<int>& labels, const Sequential& aux_clf,
                                const Sequential& adv_clf, std::size_t label_dims, double w_aux, double w_adv) {
  const std::size_t d = z.size(1);
  if (label_dims == 0 || label_dims > d) throw ConfigError("ifcvae_terms: label_dims must be in [1, d]");
  IfcvaeParts p;
  p.aux_ce = cross_entropy(aux_clf.forward(slice(z, 1, 0, label_dims)), labels);
  if (label_dims < d) {
    p.adv_ce = cross_entropy(adv_clf.forward(slice(z, 1, label_dims, d)), labels);
  } else {
    p.adv_ce = Tensor::scalar(0.0);
  }
  p.value = p.aux_ce * w_aux - p.adv_ce * w_adv;
  return p;
}

// ---------------------------------------------------------------- composition

/// Per-term values of one objective evaluation.
struct TermBreakdown {
  double recon = 0.0;
  double recon_weight = 1.0;
  std::vector<std::pair<std::string, double>> terms;  // in spec order
  std::map<std::string, double> diagnostics;          // not part of the total
  double total = 0.0;

  double sum_of_parts() const {
    double s = recon_weight * recon;
    for (const auto& [_, v] : terms) s += v;
    return s;
  }
};

/// Auxiliary networks and optimizers owned by adversarial/supervised terms.
class TermRuntime {
 public:
  TermRuntime() = default;

  TermRuntime(const ObjectiveSpec& spec, std::size_t latent_dim, std::size_t num_label_classes, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    if (const auto* f = spec.find<FactorTcTerm>()) {
      disc_ = make_mlp("factor_disc", latent_dim, f->disc_hidden, f->disc_layers, 2, Activation::leaky_relu, rng);
      disc_opt_ = AdamState({f->disc_lr, f->disc_beta1, f->disc_beta2, 1e-8}, disc_->parameters());
    }
    if (const auto* t = spec.find<IfcvaeTerm>()) {
      if (num_label_classes < 2) throw ConfigError("IFCVAE: label factor needs at least 2 classes");
      aux_ = make_mlp("ifcvae_aux", t->label_dims, t->clf_hidden, 1, num_label_classes, Activation::relu, rng);
      if (t->label_dims < latent_dim) {
        adv_ = make_mlp("ifcvae_adv", latent_dim - t->label_dims, t->clf_hidden, 1, num_label_classes, Activation::relu, rng);
        adv_opt_ = AdamState({t->clf_lr, 0.9, 0.999, 1e-8}, adv_->parameters());
      }
    }
  }

  const std::optional<Sequential>& discriminator() const { return disc_; }
  std::optional<Sequential>& discriminator() { return disc_; }
  const std::optional<Sequential>& aux_classifier() const { return aux_; }
  const std::optional<Sequential>& adv_classifier() const { return adv_; }
  AdamState& disc_optimizer() { return disc_opt_; }
  AdamState& adv_optimizer() { return adv_opt_; }
  const AdamState& disc_optimizer() const { return disc_opt_; }
  const AdamState& adv_optimizer() const { return adv_opt_; }

  /// Parameters trained together with the model (the auxiliary classifier).
  std::vector<NamedTensor> model_side_parameters() const { return aux_ ? aux_->parameters() : std::vector<NamedTensor>{}; }

  /// Parameters with their own optimizers, as (group name, params) pairs.
  std::vector<NamedTensor> adversary_parameters() const {
    std::vector<NamedTensor> out;
    if (disc_) {
      auto p = disc_->parameters();
      out.insert(out.end(), p.begin(), p.end());
    }
    if (adv_) {
      auto p = adv_->parameters();
      out.insert(out.end(), p.begin(), p.end());
    }
    return out;
  }

  /// Alternating updates after the model step: the FactorVAE discriminator on (z, permuted z)
  /// and the IFCVAE adversarial classifier on the non-label latents. z is detached here.
  std::map<std::string, double> adversary_updates(const ObjectiveSpec& spec, const Tensor& z,
                                                  const std::vector<int>* labels, std::mt19937_64& rng) {
    std::map<std::string, double> diag;
    auto all = adversary_parameters();
    zero_grad(all);
    Tensor zd = z.detach();
    if (disc_) {
      Tensor zp = permute_dims(zd, rng);
      auto r = factor_disc_step(zd, zp, *disc_, disc_opt_);
      diag["factor_disc_loss"] = r.loss;
      diag["factor_disc_acc"] = r.accuracy;
    }
    if (adv_) {
      const auto* t = spec.find<IfcvaeTerm>();
      if (!labels) throw ConfigError("IFCVAE requires labels");
      auto r = detail::classifier_step(*adv_, adv_opt_, slice(zd, 1, t->label_dims, zd.size(1)), *labels);
      diag["ifcvae_adv_loss"] = r.loss;
      diag["ifcvae_adv_acc"] = r.accuracy;
    }
    return diag;
  }

 private:
  std::optional<Sequential> disc_;
  std::optional<Sequential> aux_;
  std::optional<Sequential> adv_;
  AdamState disc_opt_;
  AdamState adv_opt_;
};

/// Everything a single objective evaluation consumes.
struct ObjectiveInputs {
  Tensor x;       // targets (B, C, H, W)
  Tensor x_hat;   // reconstructions, same shape
  LatentPosterior post;
  double capacity = 0.0;
  double recon_weight = 1.0;
  std::size_t dataset_size = 0;
  const std::vector<int>* labels = nullptr;  // IFCVAE
  std::uint64_t term_seed = 0;               // seeds per-term randomness (MMD prior draws)
};

/// Engine for term `index` of a composed objective: deterministic in (term_seed, index).
inline std::mt19937_64 term_rng(std::uint64_t term_seed, std::size_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(term_seed), static_cast<std::uint32_t>(term_seed >> 32),
                    static_cast<std::uint32_t>(index), 0x7e57u};
  return std::mt19937_64(seq);
}

struct ComposedObjective {
  Tensor loss;
  TermBreakdown breakdown;
};

/// loss = w_recon * recon + sum of enabled terms, evaluated in spec order.
inline ComposedObjective compose_objective(const ObjectiveSpec& spec, const ObjectiveInputs& in, const TermRuntime& rt) {
  ComposedObjective out;
  auto& bd = out.breakdown;
  Tensor recon = recon_loss(in.x, in.x_hat, spec.recon_kind);
  bd.recon = recon.item();
  bd.recon_weight = in.recon_weight;
  Tensor loss = recon * in.recon_weight;
  const std::size_t d = in.post.mu.size(1);

  std::optional<Tensor> kl_cache;
  auto kl_per_sample = [&]() -> const Tensor& {
    if (!kl_cache) kl_cache = kl_to_standard_normal(in.post.mu, in.post.logvar);
    return *kl_cache;
  };

  for (std::size_t i = 0; i < spec.terms.size(); ++i) {
    std::optional<Tensor> value;
    std::visit(
        [&](const auto& t) {
          using T = std::decay_t<decltype(t)>;
          if constexpr (std::is_same_v<T, KlTerm>) {
            const Tensor& kl = kl_per_sample();
            bd.diagnostics["kl"] = mean(kl).item();
            value = term_kl_capacity(kl, t.beta, t.use_capacity ? in.capacity : 0.0);
          } else if constexpr (std::is_same_v<T, BtcTerm>) {
            const std::size_t n = t.dataset_size ? t.dataset_size : in.dataset_size;
            auto parts = btc_decompose(in.post, n);
            bd.diagnostics["mi"] = parts.mi.item();
            bd.diagnostics["tc"] = parts.tc.item();
            bd.diagnostics["dim_kl"] = parts.dim_kl.item();
            Tensor non_tc = parts.mi * t.alpha + parts.dim_kl * t.gamma;
            if (t.use_capacity) non_tc = abs(non_tc - in.capacity);
            value = non_tc + parts.tc * t.beta;
          } else if constexpr (std::is_same_v<T, FactorTcTerm>) {
            if (!rt.discriminator()) throw std::logic_error("FactorVAE term without a discriminator");
            value = factor_tc_term(in.post.z, *rt.discriminator(), t.gamma_tc);
          } else if constexpr (std::is_same_v<T, MmdTerm>) {
            auto rng = term_rng(in.term_seed, i);
            value = mmd_term(in.post.z, rng, t.lambda, mmd_bandwidth(t, d));
          } else if constexpr (std::is_same_v<T, DipTerm>) {
            value = dip_term(in.post, t.mode, t.lambda_od, t.lambda_d);
          } else if constexpr (std::is_same_v<T, CvaeTerm>) {
            // conditioning only
          } else if constexpr (std::is_same_v<T, IfcvaeTerm>) {
            if (!in.labels) throw ConfigError("IFCVAE requires labels");
            const Sequential empty;
            const Sequential& adv = rt.adv_classifier() ? *rt.adv_classifier() : empty;
            auto parts = ifcvae_terms(in.post.z, *in.labels, *rt.aux_classifier(), adv, t.label_dims, t.w_aux, t.w_adv);
            bd.diagnostics["ifcvae_aux_ce"] = parts.aux_ce.item();
            bd.diagnostics["ifcvae_adv_ce"] = parts.adv_ce.item();
            value = parts.value;
          }
        },
        spec.terms[i]);
    if (!value) continue;
    const double v = value->item();
    bd.terms.emplace_back(term_name(spec.terms[i]), v);
    loss = loss + *value;
  }
  bd.total = loss.item();
  out.loss = loss;
  return out;
}

}  // namespace disent
