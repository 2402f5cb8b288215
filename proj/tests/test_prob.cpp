#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "disent/prob.hpp"
#include "support/gradcheck.hpp"

using namespace disent;
using disent::testing::gradcheck;
using disent::testing::random_tensor;

TEST(Reparameterize, ClosedForms) {
  EXPECT_EQ(reparameterize(Tensor({1}, {0.3}), Tensor({1}, {1.7}), Tensor({1}, {0.0}))[0], 0.3);
  EXPECT_EQ(reparameterize(Tensor({1}, {0.0}), Tensor({1}, {0.0}), Tensor({1}, {-1.25}))[0], -1.25);
  EXPECT_NEAR(reparameterize(Tensor({1}, {1.0}), Tensor({1}, {std::log(4.0)}), Tensor({1}, {0.5}))[0], 2.0, 1e-15);
}

TEST(Reparameterize, GradientSkipsEps) {
  Tensor mu = Tensor::parameter({2}, {0.1, -0.2});
  Tensor lv = Tensor::parameter({2}, {0.0, std::log(4.0)});
  Tensor eps({2}, {0.5, 1.0});
  eps.set_requires_grad(true);
  sum(reparameterize(mu, lv, eps)).backward();
  EXPECT_EQ(mu.grad()[0], 1.0);
  EXPECT_NEAR(lv.grad()[1], 0.5 * 2.0 * 1.0, 1e-15);
  EXPECT_FALSE(eps.has_grad());
}

TEST(Reparameterize, SeededDrawsAreBitReproducible) {
  auto draw = [] {
    LatentPosterior post{Tensor({4, 3}, 0.2), Tensor({4, 3}, -0.5), {}, {}};
    std::mt19937_64 rng(77);
    reparameterize(post, rng);
    return std::vector<double>(post.z.data().begin(), post.z.data().end());
  };
  EXPECT_EQ(draw(), draw());
}

TEST(KlToStandardNormal, ClosedForms) {
  EXPECT_EQ(kl_to_standard_normal(Tensor({1, 1}, {0.0}), Tensor({1, 1}, {0.0}))[0], 0.0);
  EXPECT_NEAR(kl_to_standard_normal(Tensor({1, 1}, {1.0}), Tensor({1, 1}, {0.0}))[0], 0.5, 1e-9);
  EXPECT_NEAR(kl_to_standard_normal(Tensor({1, 1}, {0.0}), Tensor({1, 1}, {std::log(4.0)}))[0], 0.806853, 1e-6);
  EXPECT_NEAR(kl_to_standard_normal(Tensor({1, 1}, {0.0}), Tensor({1, 1}, {std::log(4.0)}))[0],
              0.5 * (4.0 - std::log(4.0) - 1.0), 1e-12);
}

TEST(KlToStandardNormal, NonNegativeOnRandomInputs) {
  std::mt19937_64 rng(4);
  for (int t = 0; t < 50; ++t) {
    Tensor kl = kl_to_standard_normal(random_tensor({8, 5}, rng, -3, 3), random_tensor({8, 5}, rng, -6, 6));
    for (double v : kl.data()) EXPECT_GE(v, 0.0);
  }
}

TEST(KlToStandardNormal, MatchesMonteCarlo) {
  // mean over draws of log q(z|x) - log p(z) for one posterior with d = 3
  Tensor mu({1, 3}, {0.8, -0.3, 0.1});
  Tensor lv({1, 3}, {-0.7, 0.4, -1.5});
  const double analytic = kl_to_standard_normal(mu, lv)[0];
  std::mt19937_64 rng(123);
  std::normal_distribution<double> n01;
  const int draws = 100000;
  double acc = 0.0;
  for (int s = 0; s < draws; ++s) {
    double lq = 0.0, lp = 0.0;
    for (int k = 0; k < 3; ++k) {
      const double e = n01(rng);
      const double z = mu[k] + std::exp(0.5 * lv[k]) * e;
      lq += -0.5 * (kLog2Pi + lv[k] + e * e);
      lp += -0.5 * (kLog2Pi + z * z);
    }
    acc += lq - lp;
  }
  EXPECT_NEAR(acc / draws, analytic, 0.01 * analytic);
}

TEST(LogDensity, ClosedForms) {
  Tensor m = log_density_diag_gaussian(Tensor({1, 1}, {0.0}), Tensor({1, 1}, {0.0}), Tensor({1, 1}, {0.0}));
  EXPECT_NEAR(m[0], -0.918939, 1e-6);
  Tensor z({2, 3}, {0.5, -1, 2, 0.25, 0.75, -3});
  Tensor at_self = log_density_diag_gaussian(z, z, Tensor({2, 3}, 0.0));
  ASSERT_EQ(at_self.shape(), (Shape{2, 2, 3}));
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t k = 0; k < 3; ++k) EXPECT_NEAR(at_self[(i * 2 + i) * 3 + k], -0.5 * kLog2Pi, 1e-15);
}

TEST(LogDensity, EntryLayoutIsSampleComponentDim) {
  Tensor z({2, 1}, {0.0, 1.0});
  Tensor mu({3, 1}, {0.0, 1.0, -1.0});
  Tensor lv({3, 1}, {0.0, std::log(2.0), 0.0});
  Tensor m = log_density_diag_gaussian(z, mu, lv);
  ASSERT_EQ(m.shape(), (Shape{2, 3, 1}));
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 3; ++j) {
      const double var = std::exp(lv[j]);
      const double expect = -0.5 * (kLog2Pi + std::log(var) + (z[i] - mu[j]) * (z[i] - mu[j]) / var);
      EXPECT_NEAR(m[i * 3 + j], expect, 1e-14);
    }
}

TEST(LogDensity, IntegratesToOne) {
  // importance sampling under a slightly wider proposal: E_u[q(u) / r(u)] = 1
  const double mu = 0.7, lv = std::log(0.5), proposal_sd = 1.0;
  std::mt19937_64 rng(8);
  std::normal_distribution<double> prop(mu, proposal_sd);
  const int n = 100000;
  std::vector<double> zs(n);
  for (auto& z : zs) z = prop(rng);
  Tensor m = log_density_diag_gaussian(Tensor({static_cast<std::size_t>(n), 1}, zs), Tensor({1, 1}, {mu}), Tensor({1, 1}, {lv}));
  double acc = 0.0;
  for (int i = 0; i < n; ++i) {
    const double log_r = -0.5 * (kLog2Pi + 2 * std::log(proposal_sd) + (zs[i] - mu) * (zs[i] - mu) / (proposal_sd * proposal_sd));
    acc += std::exp(m[i] - log_r);
  }
  EXPECT_NEAR(acc / n, 1.0, 0.01);
}

TEST(ReconLoss, ClosedForms) {
  Tensor x({2, 1, 2, 2}, {0, 1, 0.5, 0.25, 1, 1, 0, 0});
  EXPECT_EQ(recon_loss(x, x, ReconKind::mse).item(), 0.0);
  EXPECT_NEAR(recon_loss(Tensor({1, 1}, {0.5}), Tensor({1, 1}, {0.5}), ReconKind::bernoulli).item(), std::log(2.0), 1e-15);
  // summed over pixels, averaged over the batch
  Tensor a({2, 2}, {0, 0, 1, 1}), b({2, 2}, {1, 0, 0, 0});
  EXPECT_EQ(recon_loss(a, b, ReconKind::mse).item(), (1.0 + 2.0) / 2.0);
  EXPECT_THROW(parse_recon_kind("laplace"), ConfigError);
  EXPECT_THROW(recon_loss(a, Tensor({2, 3}), ReconKind::mse), ShapeError);
}

TEST(ReconLoss, BernoulliMinimizedAtTarget) {
  for (double x : {0.0, 0.2, 0.5, 0.9, 1.0}) {
    double best = 0.0, best_loss = std::numeric_limits<double>::infinity();
    for (int g = 0; g <= 1000; ++g) {
      const double p = g / 1000.0;
      const double l = recon_loss(Tensor({1, 1}, {x}), Tensor({1, 1}, {p}), ReconKind::bernoulli).item();
      if (l < best_loss) {
        best_loss = l;
        best = p;
      }
    }
    EXPECT_NEAR(best, x, 1e-3) << "x = " << x;
  }
}

TEST(ReconLoss, SaturatedPredictionsStayFinite) {
  Tensor x = Tensor::parameter({1, 2}, {0.0, 1.0});
  Tensor p = Tensor::parameter({1, 2}, {1.0, 0.0});
  Tensor l = recon_loss(x, p, ReconKind::bernoulli);
  EXPECT_TRUE(std::isfinite(l.item()));
  EXPECT_NEAR(l.item(), -2.0 * std::log(kProbClamp), 1e-6);
}

TEST(GradCheck, ProbabilityOps) {
  std::mt19937_64 rng(31);
  auto kl = [](const std::vector<Tensor>& in) { return sum(kl_to_standard_normal(in[0], in[1])); };
  EXPECT_LT(gradcheck(kl, {random_tensor({4, 3}, rng), random_tensor({4, 3}, rng)}).max_rel_err, 1e-5);

  auto dens = [](const std::vector<Tensor>& in) { return sum(log_density_diag_gaussian(in[0], in[1], in[2])); };
  auto r = gradcheck(dens, {random_tensor({3, 2}, rng), random_tensor({4, 2}, rng), random_tensor({4, 2}, rng)}, 2, 30);
  EXPECT_LT(r.max_rel_err, 1e-5) << r.worst;

  Tensor target = random_tensor({3, 5}, rng, 0, 1);
  auto bce = [&](const std::vector<Tensor>& in) { return recon_loss(target, sigmoid(in[0]), ReconKind::bernoulli); };
  r = gradcheck(bce, {random_tensor({3, 5}, rng, -2, 2)}, 3, 30);
  EXPECT_LT(r.max_rel_err, 1e-5) << r.worst;

  auto mse = [&](const std::vector<Tensor>& in) { return recon_loss(target, in[0], ReconKind::mse); };
  EXPECT_LT(gradcheck(mse, {random_tensor({3, 5}, rng)}).max_rel_err, 1e-5);
}
