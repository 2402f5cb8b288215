#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "disent/synth_data.hpp"

namespace disent {

/// Raised when a metric cannot be computed for the given representation.
class MetricError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Maps a batch of observations to its codes (rows = samples). Must be deterministic.
struct Representation {
  std::function<Eigen::MatrixXd(const FactorBatch&)> fn;
  std::size_t dim = 0;
};

struct Observations {
  Eigen::MatrixXi factors;  // n x K
  Eigen::MatrixXd codes;    // n x d
};

/// Where metrics get (factor, code) pairs from: a dataset plus representation, or a fixed table.
class GroundTruthSource {
 public:
  virtual ~GroundTruthSource() = default;
  virtual const FactorSpace& space() const = 0;
  virtual std::size_t code_dim() const = 0;
  /// Number of distinct observations available for enumeration.
  virtual std::size_t num_observations() const = 0;
  /// Every observation when n >= num_observations(), else n uniform draws.
  virtual Observations sample(std::size_t n, std::mt19937_64& rng) const = 0;
  /// Codes of n draws with factor k pinned to `value`.
  virtual Eigen::MatrixXd sample_fixed(std::size_t n, std::size_t k, int value, std::mt19937_64& rng) const = 0;
};

namespace detail {

inline Eigen::MatrixXi to_factor_matrix(const std::vector<int>& flat, std::size_t k) {
  const std::size_t n = flat.size() / k;
  Eigen::MatrixXi m(n, k);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < k; ++j) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = flat[i * k + j];
  return m;
}

}  // namespace detail

/// Shapes5 observations encoded by a representation function.
class DatasetSource final : public GroundTruthSource {
 public:
  DatasetSource(const Shapes5& data, Representation rep, std::size_t chunk = 512)
      : data_(&data), rep_(std::move(rep)), chunk_(chunk) {}

  const FactorSpace& space() const override { return data_->space(); }
  std::size_t code_dim() const override { return rep_.dim; }
  std::size_t num_observations() const override { return data_->size(); }

  Observations sample(std::size_t n, std::mt19937_64& rng) const override {
    auto flat = n >= data_->size() ? data_->all_factors() : data_->sample_factors(n, rng);
    return {detail::to_factor_matrix(flat, space().num_factors()), encode(flat)};
  }

  Eigen::MatrixXd sample_fixed(std::size_t n, std::size_t k, int value, std::mt19937_64& rng) const override {
    auto b = data_->sample_with_fixed_factor(n, k, value, rng);
    return encode(b.factors);
  }

  Eigen::MatrixXd encode(const std::vector<int>& flat) const {
    const std::size_t k = space().num_factors();
    const std::size_t n = flat.size() / k;
    Eigen::MatrixXd out(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(rep_.dim));
    for (std::size_t start = 0; start < n; start += chunk_) {
      const std::size_t len = std::min(chunk_, n - start);
      std::vector<int> part(flat.begin() + static_cast<std::ptrdiff_t>(start * k),
                            flat.begin() + static_cast<std::ptrdiff_t>((start + len) * k));
      Eigen::MatrixXd codes = rep_.fn(data_->make_batch(std::move(part)));
      if (codes.rows() != static_cast<Eigen::Index>(len) || codes.cols() != static_cast<Eigen::Index>(rep_.dim)) {
        throw MetricError("representation returned codes of the wrong shape");
      }
      out.middleRows(static_cast<Eigen::Index>(start), static_cast<Eigen::Index>(len)) = codes;
    }
    return out;
  }

 private:
  const Shapes5* data_;
  Representation rep_;
  std::size_t chunk_;
};

/// Precomputed (factors, codes) rows, e.g. loaded from CSV. Interventional draws pick
/// rows whose factor matches uniformly with replacement.
class TableSource final : public GroundTruthSource {
 public:
  TableSource(FactorSpace space, Eigen::MatrixXi factors, Eigen::MatrixXd codes)
      : space_(std::move(space)), factors_(std::move(factors)), codes_(std::move(codes)) {
    if (factors_.rows() != codes_.rows()) throw MetricError("factor and code tables have different row counts");
    if (factors_.cols() != static_cast<Eigen::Index>(space_.num_factors())) throw MetricError("factor table has wrong width");
    rows_by_value_.resize(space_.num_factors());
    for (std::size_t k = 0; k < space_.num_factors(); ++k) {
      rows_by_value_[k].resize(static_cast<std::size_t>(space_.sizes[k]));
      for (Eigen::Index i = 0; i < factors_.rows(); ++i) {
        const int v = factors_(i, static_cast<Eigen::Index>(k));
        if (v < 0 || v >= space_.sizes[k]) throw MetricError("factor value out of range in table");
        rows_by_value_[k][static_cast<std::size_t>(v)].push_back(static_cast<std::size_t>(i));
      }
    }
  }

  const FactorSpace& space() const override { return space_; }
  std::size_t code_dim() const override { return static_cast<std::size_t>(codes_.cols()); }
  std::size_t num_observations() const override { return static_cast<std::size_t>(codes_.rows()); }

  Observations sample(std::size_t n, std::mt19937_64& rng) const override {
    if (n >= num_observations()) return {factors_, codes_};
    Observations o{Eigen::MatrixXi(static_cast<Eigen::Index>(n), factors_.cols()),
                   Eigen::MatrixXd(static_cast<Eigen::Index>(n), codes_.cols())};
    for (std::size_t i = 0; i < n; ++i) {
      const auto r = static_cast<Eigen::Index>(Shapes5::uniform_int(rng, static_cast<int>(num_observations())));
      o.factors.row(static_cast<Eigen::Index>(i)) = factors_.row(r);
      o.codes.row(static_cast<Eigen::Index>(i)) = codes_.row(r);
    }
    return o;
  }

  Eigen::MatrixXd sample_fixed(std::size_t n, std::size_t k, int value, std::mt19937_64& rng) const override {
    const auto& rows = rows_by_value_.at(k).at(static_cast<std::size_t>(value));
    if (rows.empty()) throw MetricError("no rows with factor " + space_.names[k] + " = " + std::to_string(value));
    Eigen::MatrixXd out(static_cast<Eigen::Index>(n), codes_.cols());
    for (std::size_t i = 0; i < n; ++i) {
      const auto r = rows[static_cast<std::size_t>(Shapes5::uniform_int(rng, static_cast<int>(rows.size())))];
      out.row(static_cast<Eigen::Index>(i)) = codes_.row(static_cast<Eigen::Index>(r));
    }
    return out;
  }

 private:
  FactorSpace space_;
  Eigen::MatrixXi factors_;
  Eigen::MatrixXd codes_;
  std::vector<std::vector<std::vector<std::size_t>>> rows_by_value_;
};

// ---------------------------------------------------------------- discrete information helpers

namespace detail {

/// Equal-count bins: bin(v) = min(bins-1, floor(bins * #{u < v} / n)). Ties share a bin.
inline std::vector<int> quantile_bins(const Eigen::VectorXd& values, int bins) {
  const std::size_t n = static_cast<std::size_t>(values.size());
  std::vector<double> sorted(values.data(), values.data() + n);
  std::sort(sorted.begin(), sorted.end());
  std::vector<int> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto less = static_cast<std::size_t>(std::lower_bound(sorted.begin(), sorted.end(), values[static_cast<Eigen::Index>(i)]) - sorted.begin());
    out[i] = std::min(bins - 1, static_cast<int>((static_cast<std::size_t>(bins) * less) / n));
  }
  return out;
}

inline double entropy(const std::vector<int>& labels, int cardinality) {
  std::vector<double> counts(static_cast<std::size_t>(cardinality), 0.0);
  for (int v : labels) counts[static_cast<std::size_t>(v)] += 1.0;
  const double n = static_cast<double>(labels.size());
  double h = 0.0;
  for (double c : counts)
    if (c > 0) h -= (c / n) * std::log(c / n);
  return h;
}

/// Plug-in mutual information (nats) from joint counts.
inline double mutual_info(const std::vector<int>& a, int na, const std::vector<int>& b, int nb) {
  std::vector<double> joint(static_cast<std::size_t>(na * nb), 0.0), pa(static_cast<std::size_t>(na), 0.0),
      pb(static_cast<std::size_t>(nb), 0.0);
  for (std::size_t i = 0; i < a.size(); ++i) {
    joint[static_cast<std::size_t>(a[i] * nb + b[i])] += 1.0;
    pa[static_cast<std::size_t>(a[i])] += 1.0;
    pb[static_cast<std::size_t>(b[i])] += 1.0;
  }
  const double n = static_cast<double>(a.size());
  double mi = 0.0;
  for (int i = 0; i < na; ++i)
    for (int j = 0; j < nb; ++j) {
      const double c = joint[static_cast<std::size_t>(i * nb + j)];
      if (c > 0) mi += (c / n) * std::log(c * n / (pa[static_cast<std::size_t>(i)] * pb[static_cast<std::size_t>(j)]));
    }
  return std::max(mi, 0.0);
}

inline std::vector<int> column(const Eigen::MatrixXi& m, Eigen::Index k) {
  std::vector<int> out(static_cast<std::size_t>(m.rows()));
  for (Eigen::Index i = 0; i < m.rows(); ++i) out[static_cast<std::size_t>(i)] = m(i, k);
  return out;
}

struct DiscreteMi {
  Eigen::MatrixXd mi;          // d x K
  Eigen::VectorXd factor_entropy;  // K
};

inline DiscreteMi discrete_mi(const Observations& obs, const FactorSpace& space, int bins) {
  const Eigen::Index d = obs.codes.cols(), k = obs.factors.cols();
  DiscreteMi out{Eigen::MatrixXd::Zero(d, k), Eigen::VectorXd::Zero(k)};
  std::vector<std::vector<int>> fcols;
  for (Eigen::Index f = 0; f < k; ++f) {
    fcols.push_back(column(obs.factors, f));
    out.factor_entropy[f] = entropy(fcols.back(), space.sizes[static_cast<std::size_t>(f)]);
  }
  for (Eigen::Index j = 0; j < d; ++j) {
    const auto zb = quantile_bins(obs.codes.col(j), bins);
    for (Eigen::Index f = 0; f < k; ++f) {
      out.mi(j, f) = mutual_info(zb, bins, fcols[static_cast<std::size_t>(f)], space.sizes[static_cast<std::size_t>(f)]);
    }
  }
  return out;
}

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), 0x5eedu};
  std::uint32_t words[2];
  seq.generate(words, words + 2);
  return (static_cast<std::uint64_t>(words[0]) << 32) | words[1];
}

/// Linear-interpolated quantile of `v` (q in [0, 1]); sorts a copy.
inline double quantile(std::vector<double> v, double q) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (v[hi] - v[lo]) * (pos - static_cast<double>(lo));
}

inline void warn(std::vector<std::string>* warnings, std::string msg) {
  if (warnings) warnings->push_back(std::move(msg));
}

/// Multinomial logistic regression on standardized features, full-batch gradient descent.
class LogisticRegression {
 public:
  void fit(const Eigen::MatrixXd& x, const std::vector<int>& y, int classes, int iters = 500, double lr = 0.5,
           double l2 = 1e-3) {
    classes_ = classes;
    mean_ = x.colwise().mean();
    scale_ = ((x.rowwise() - mean_).array().square().colwise().mean()).sqrt();
    for (Eigen::Index j = 0; j < scale_.size(); ++j)
      if (scale_[j] < 1e-12) scale_[j] = 1.0;
    const Eigen::MatrixXd xs = standardize(x);
    const auto n = static_cast<double>(x.rows());
    w_ = Eigen::MatrixXd::Zero(x.cols(), classes);
    b_ = Eigen::RowVectorXd::Zero(classes);
    Eigen::MatrixXd onehot = Eigen::MatrixXd::Zero(x.rows(), classes);
    for (std::size_t i = 0; i < y.size(); ++i) onehot(static_cast<Eigen::Index>(i), y[i]) = 1.0;
    for (int it = 0; it < iters; ++it) {
      Eigen::MatrixXd p = softmax((xs * w_).rowwise() + b_);
      Eigen::MatrixXd g = (p - onehot) / n;
      w_ -= lr * (xs.transpose() * g + l2 * w_);
      b_ -= lr * g.colwise().sum();
    }
  }

  std::vector<int> predict(const Eigen::MatrixXd& x) const {
    Eigen::MatrixXd logits = (standardize(x) * w_).rowwise() + b_;
    std::vector<int> out(static_cast<std::size_t>(x.rows()));
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
      Eigen::Index best = 0;
      logits.row(i).maxCoeff(&best);
      out[static_cast<std::size_t>(i)] = static_cast<int>(best);
    }
    return out;
  }

 private:
  Eigen::MatrixXd standardize(const Eigen::MatrixXd& x) const {
    return (x.rowwise() - mean_).array().rowwise() / scale_.array();
  }
  static Eigen::MatrixXd softmax(Eigen::MatrixXd logits) {
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
      const double m = logits.row(i).maxCoeff();
      logits.row(i) = (logits.row(i).array() - m).exp();
      logits.row(i) /= logits.row(i).sum();
    }
    return logits;
  }

  int classes_ = 0;
  Eigen::RowVectorXd mean_, scale_;
  Eigen::MatrixXd w_;
  Eigen::RowVectorXd b_;
};

inline double accuracy(const std::vector<int>& pred, const std::vector<int>& truth) {
  if (truth.empty()) return 0.0;
  std::size_t ok = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) ok += pred[i] == truth[i];
  return static_cast<double>(ok) / static_cast<double>(truth.size());
}

}  // namespace detail

// ---------------------------------------------------------------- metrics

/// Mutual Information Gap on quantile-discretized codes.
inline double mig(const GroundTruthSource& src, std::size_t num_points, int bins, std::mt19937_64& rng) {
  if (bins < 2) throw MetricError("mig: bins must be >= 2");
  if (num_points < 1000 && num_points < src.num_observations()) throw MetricError("mig: num_points must be >= 1000");
  const auto obs = src.sample(num_points, rng);
  const auto dm = detail::discrete_mi(obs, src.space(), bins);
  double total = 0.0;
  int counted = 0;
  for (Eigen::Index k = 0; k < dm.mi.cols(); ++k) {
    if (dm.factor_entropy[k] <= 0.0) continue;
    std::vector<double> col(dm.mi.col(k).data(), dm.mi.col(k).data() + dm.mi.rows());
    std::sort(col.begin(), col.end(), std::greater<>());
    const double second = col.size() > 1 ? col[1] : 0.0;
    total += (col[0] - second) / dm.factor_entropy[k];
    ++counted;
  }
  return counted ? std::clamp(total / counted, 0.0, 1.0) : 0.0;
}

/// Accuracy of a linear classifier predicting which factor was held fixed from the mean
/// absolute code difference between two batches sharing that factor.
inline double betavae_score(const GroundTruthSource& src, std::size_t num_pairs, std::size_t batch_per_pair,
                            std::mt19937_64& rng, std::vector<std::string>* warnings = nullptr) {
  if (num_pairs < 50) throw MetricError("betavae_score: num_pairs must be >= 50");
  const auto& space = src.space();
  const int kf = static_cast<int>(space.num_factors());
  const auto d = static_cast<Eigen::Index>(src.code_dim());
  auto draw = [&](std::size_t count, Eigen::MatrixXd& feats, std::vector<int>& labels) {
    feats.resize(static_cast<Eigen::Index>(count), d);
    labels.resize(count);
    for (std::size_t i = 0; i < count; ++i) {
      const int k = Shapes5::uniform_int(rng, kf);
      const int v = Shapes5::uniform_int(rng, space.sizes[static_cast<std::size_t>(k)]);
      Eigen::MatrixXd a = src.sample_fixed(batch_per_pair, static_cast<std::size_t>(k), v, rng);
      Eigen::MatrixXd b = src.sample_fixed(batch_per_pair, static_cast<std::size_t>(k), v, rng);
      feats.row(static_cast<Eigen::Index>(i)) = (a - b).cwiseAbs().colwise().mean();
      labels[i] = k;
    }
  };
  Eigen::MatrixXd xtr, xte;
  std::vector<int> ytr, yte;
  draw(num_pairs, xtr, ytr);
  draw(std::max<std::size_t>(50, num_pairs / 2), xte, yte);
  if ((xtr.rowwise() - xtr.colwise().mean()).cwiseAbs().maxCoeff() < 1e-12) {
    detail::warn(warnings, "betavae: features are constant; score is at chance");
  }
  detail::LogisticRegression clf;
  clf.fit(xtr, ytr, kf);
  return detail::accuracy(clf.predict(xte), yte);
}

/// Majority-vote accuracy of "dimension with least normalized variance -> fixed factor".
inline double factorvae_score(const GroundTruthSource& src, std::size_t num_votes, std::size_t batch_per_vote,
                              std::mt19937_64& rng, std::size_t std_points = 10000,
                              std::vector<std::string>* warnings = nullptr) {
  if (num_votes < 1 || batch_per_vote < 2) throw MetricError("factorvae_score: need votes >= 1 and batch >= 2");
  const auto& space = src.space();
  const std::size_t npts = std::max<std::size_t>(std_points, 1000);
  const auto obs = src.sample(npts, rng);
  const Eigen::RowVectorXd mu = obs.codes.colwise().mean();
  const Eigen::RowVectorXd sd =
      ((obs.codes.rowwise() - mu).array().square().colwise().sum() / static_cast<double>(obs.codes.rows() - 1)).sqrt();
  std::vector<Eigen::Index> active;
  for (Eigen::Index j = 0; j < sd.size(); ++j)
    if (sd[j] >= 0.02) active.push_back(j);
  if (active.empty()) throw MetricError("collapsed representation: every dimension has std < 0.02");
  if (active.size() < static_cast<std::size_t>(sd.size())) {
    detail::warn(warnings, "factorvae: pruned " + std::to_string(sd.size() - static_cast<Eigen::Index>(active.size())) +
                               " collapsed dimensions");
  }
  const int kf = static_cast<int>(space.num_factors());
  auto vote = [&](int& factor) {
    factor = Shapes5::uniform_int(rng, kf);
    const int v = Shapes5::uniform_int(rng, space.sizes[static_cast<std::size_t>(factor)]);
    Eigen::MatrixXd c = src.sample_fixed(batch_per_vote, static_cast<std::size_t>(factor), v, rng);
    c = c.array().rowwise() / sd.array();
    const Eigen::RowVectorXd m = c.colwise().mean();
    std::size_t best = 0;
    double best_var = std::numeric_limits<double>::infinity();
    for (std::size_t a = 0; a < active.size(); ++a) {
      const double var = (c.col(active[a]).array() - m[active[a]]).square().sum() / static_cast<double>(c.rows() - 1);
      if (var < best_var) {
        best_var = var;
        best = a;
      }
    }
    return best;
  };
  std::vector<std::vector<std::size_t>> table(active.size(), std::vector<std::size_t>(static_cast<std::size_t>(kf), 0));
  for (std::size_t i = 0; i < num_votes; ++i) {
    int f = 0;
    const auto dim = vote(f);
    table[dim][static_cast<std::size_t>(f)] += 1;
  }
  std::vector<int> assign(active.size());
  for (std::size_t a = 0; a < active.size(); ++a) {
    assign[a] = static_cast<int>(std::max_element(table[a].begin(), table[a].end()) - table[a].begin());
  }
  const std::size_t eval = std::max<std::size_t>(1, num_votes / 2);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < eval; ++i) {
    int f = 0;
    const auto dim = vote(f);
    correct += assign[dim] == f;
  }
  return static_cast<double>(correct) / static_cast<double>(eval);
}

namespace detail {

struct Split {
  std::vector<Eigen::Index> train, test;
};

inline Split split_rows(Eigen::Index n, double test_fraction, std::mt19937_64& rng) {
  auto perm = Shapes5::permutation(static_cast<std::size_t>(n), rng);
  const auto ntest = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(n)));
  Split s;
  for (std::size_t i = 0; i < perm.size(); ++i) (i < ntest ? s.test : s.train).push_back(static_cast<Eigen::Index>(perm[i]));
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.test.begin(), s.test.end());
  return s;
}

/// Informedness (TPR + TNR - 1) on test rows of the best single-threshold rule for
/// "factor == cls" fitted on train rows; negative values clip to 0. Returns -1 when undefined.
inline double threshold_informedness(const Eigen::VectorXd& z, const std::vector<int>& f, int cls, const Split& sp) {
  std::vector<std::pair<double, int>> tr;
  tr.reserve(sp.train.size());
  double pos = 0, neg = 0;
  for (auto i : sp.train) {
    const int y = f[static_cast<std::size_t>(i)] == cls;
    tr.emplace_back(z[i], y);
    (y ? pos : neg) += 1;
  }
  if (pos == 0 || neg == 0) return -1.0;
  std::sort(tr.begin(), tr.end());
  // Rule "z <= t -> positive"; J for its mirror is -J.
  double best_abs = 0.0, best_t = -std::numeric_limits<double>::infinity();
  int best_dir = 1;
  double cp = 0, cn = 0;
  for (std::size_t i = 0; i < tr.size(); ++i) {
    (tr[i].second ? cp : cn) += 1;
    if (i + 1 < tr.size() && tr[i + 1].first == tr[i].first) continue;
    const double j = cp / pos + (neg - cn) / neg - 1.0;
    if (std::abs(j) > best_abs + 1e-12) {
      best_abs = std::abs(j);
      best_t = i + 1 < tr.size() ? 0.5 * (tr[i].first + tr[i + 1].first) : tr[i].first;
      best_dir = j >= 0 ? 1 : -1;
    }
  }
  double tp = 0, tn = 0, tpos = 0, tneg = 0;
  for (auto i : sp.test) {
    const bool y = f[static_cast<std::size_t>(i)] == cls;
    const bool pred = best_dir > 0 ? z[i] <= best_t : z[i] > best_t;
    if (y) {
      tpos += 1;
      tp += pred;
    } else {
      tneg += 1;
      tn += !pred;
    }
  }
  if (tpos == 0 || tneg == 0) return -1.0;
  if (best_abs == 0.0) return 0.0;
  return std::max(0.0, tp / tpos + tn / tneg - 1.0);
}

}  // namespace detail

/// Separated Attribute Predictability: mean over factors of the gap between the two best
/// single-dimension predictabilities (one-vs-rest threshold informedness, averaged over classes).
inline double sap(const GroundTruthSource& src, std::size_t num_points, std::mt19937_64& rng) {
  const auto obs = src.sample(num_points, rng);
  const auto sp = detail::split_rows(obs.codes.rows(), 1.0 / 3.0, rng);
  const Eigen::Index d = obs.codes.cols(), kf = obs.factors.cols();
  Eigen::MatrixXd score = Eigen::MatrixXd::Zero(d, kf);
  for (Eigen::Index k = 0; k < kf; ++k) {
    const auto f = detail::column(obs.factors, k);
    for (Eigen::Index j = 0; j < d; ++j) {
      const Eigen::VectorXd z = obs.codes.col(j);
      double acc = 0.0;
      int n = 0;
      for (int c = 0; c < src.space().sizes[static_cast<std::size_t>(k)]; ++c) {
        const double v = detail::threshold_informedness(z, f, c, sp);
        if (v < 0) continue;
        acc += v;
        ++n;
      }
      score(j, k) = n ? acc / n : 0.0;
    }
  }
  double total = 0.0;
  for (Eigen::Index k = 0; k < kf; ++k) {
    std::vector<double> col(score.col(k).data(), score.col(k).data() + d);
    std::sort(col.begin(), col.end(), std::greater<>());
    total += col[0] - (col.size() > 1 ? col[1] : 0.0);
  }
  return kf ? std::clamp(total / static_cast<double>(kf), 0.0, 1.0) : 0.0;
}

struct DciScores {
  double disentanglement = 0.0;
  double completeness = 0.0;
  double informativeness = 0.0;
  Eigen::MatrixXd importance;  // d x K
};

namespace detail {

inline double normalized_entropy(const Eigen::VectorXd& w, std::size_t base) {
  if (base <= 1) return 0.0;
  const double s = w.sum();
  double h = 0.0;
  for (Eigen::Index i = 0; i < w.size(); ++i) {
    const double p = w[i] / s;
    if (p > 0) h -= p * std::log(p);
  }
  return h / std::log(static_cast<double>(base));
}

/// Held-out accuracy of a nearest-centroid classifier, with each dimension scaled by its pooled
/// within-class standard deviation (floored relative to the global spread).
inline double nearest_centroid_accuracy(const Eigen::MatrixXd& codes, const std::vector<int>& y, int classes,
                                        const Split& sp) {
  const Eigen::Index d = codes.cols();
  Eigen::MatrixXd centroids = Eigen::MatrixXd::Zero(classes, d);
  std::vector<double> counts(static_cast<std::size_t>(classes), 0.0);
  Eigen::RowVectorXd mu = Eigen::RowVectorXd::Zero(d);
  for (auto i : sp.train) {
    centroids.row(y[static_cast<std::size_t>(i)]) += codes.row(i);
    counts[static_cast<std::size_t>(y[static_cast<std::size_t>(i)])] += 1.0;
    mu += codes.row(i);
  }
  mu /= static_cast<double>(sp.train.size());
  for (int c = 0; c < classes; ++c)
    if (counts[static_cast<std::size_t>(c)] > 0) centroids.row(c) /= counts[static_cast<std::size_t>(c)];
  Eigen::RowVectorXd within = Eigen::RowVectorXd::Zero(d), global = Eigen::RowVectorXd::Zero(d);
  for (auto i : sp.train) {
    within += (codes.row(i) - centroids.row(y[static_cast<std::size_t>(i)])).array().square().matrix();
    global += (codes.row(i) - mu).array().square().matrix();
  }
  Eigen::RowVectorXd sd(d);
  for (Eigen::Index j = 0; j < d; ++j) {
    const double g = std::sqrt(global[j] / static_cast<double>(sp.train.size()));
    const double w = std::sqrt(within[j] / static_cast<double>(sp.train.size()));
    sd[j] = g < 1e-12 ? 1.0 : std::max(w, 1e-6 * g);
  }
  centroids = centroids.array().rowwise() / sd.array();
  std::size_t ok = 0;
  for (auto i : sp.test) {
    const Eigen::RowVectorXd x = codes.row(i).array() / sd.array();
    int best = -1;
    double best_d = std::numeric_limits<double>::infinity();
    for (int c = 0; c < classes; ++c) {
      if (counts[static_cast<std::size_t>(c)] == 0) continue;
      const double dist = (centroids.row(c) - x).squaredNorm();
      if (dist < best_d) {
        best_d = dist;
        best = c;
      }
    }
    ok += best == y[static_cast<std::size_t>(i)];
  }
  return sp.test.empty() ? 0.0 : static_cast<double>(ok) / static_cast<double>(sp.test.size());
}

}  // namespace detail

/// Disentanglement / completeness from a normalized-MI importance matrix, informativeness
/// as nearest-centroid accuracy per factor.
inline DciScores dci(const GroundTruthSource& src, std::size_t num_points, int bins, std::mt19937_64& rng) {
  if (num_points < 1000 && num_points < src.num_observations()) throw MetricError("dci: num_points must be >= 1000");
  const auto obs = src.sample(num_points, rng);
  const auto dm = detail::discrete_mi(obs, src.space(), bins);
  const Eigen::Index d = dm.mi.rows(), kf = dm.mi.cols();
  DciScores s;
  s.importance = Eigen::MatrixXd::Zero(d, kf);
  for (Eigen::Index k = 0; k < kf; ++k)
    if (dm.factor_entropy[k] > 0) s.importance.col(k) = dm.mi.col(k) / dm.factor_entropy[k];
  const double total = s.importance.sum();
  if (total > 0) {
    for (Eigen::Index j = 0; j < d; ++j) {
      const double row = s.importance.row(j).sum();
      if (row <= 0) continue;
      s.disentanglement += (row / total) * (1.0 - detail::normalized_entropy(s.importance.row(j).transpose(), static_cast<std::size_t>(kf)));
    }
    for (Eigen::Index k = 0; k < kf; ++k) {
      const double col = s.importance.col(k).sum();
      if (col <= 0) continue;
      s.completeness += (col / total) * (1.0 - detail::normalized_entropy(s.importance.col(k), static_cast<std::size_t>(d)));
    }
  }
  const auto sp = detail::split_rows(obs.codes.rows(), 1.0 / 3.0, rng);
  double info = 0.0;
  for (Eigen::Index k = 0; k < kf; ++k) {
    info += detail::nearest_centroid_accuracy(obs.codes, detail::column(obs.factors, k),
                                              src.space().sizes[static_cast<std::size_t>(k)], sp);
  }
  s.informativeness = kf ? info / static_cast<double>(kf) : 0.0;
  s.disentanglement = std::clamp(s.disentanglement, 0.0, 1.0);
  s.completeness = std::clamp(s.completeness, 0.0, 1.0);
  return s;
}

/// Interventional Robustness Score. For each latent j the parent factor is the one with the
/// largest |correlation|; robustness is 1 minus the diff_quantile of |z_j - E[z_j | parent]|
/// as the remaining factors vary, averaged over parent values and normalized by the largest
/// deviation of z_j from its mean. Dimensions are weighted by their variance.
inline double irs(const GroundTruthSource& src, std::size_t num_points, double diff_quantile, std::mt19937_64& rng,
                  std::vector<std::string>* warnings = nullptr) {
  if (num_points < 1000 && num_points < src.num_observations()) throw MetricError("irs: num_points must be >= 1000");
  const auto obs = src.sample(num_points, rng);
  const Eigen::Index d = obs.codes.cols(), kf = obs.factors.cols();
  const auto n = static_cast<double>(obs.codes.rows());
  double weighted = 0.0, weights = 0.0;
  for (Eigen::Index j = 0; j < d; ++j) {
    const Eigen::VectorXd z = obs.codes.col(j);
    const double zm = z.mean();
    const double var = (z.array() - zm).square().sum() / n;
    const double max_dev = (z.array() - zm).abs().maxCoeff();
    if (var <= 0.0 || max_dev <= 0.0) continue;
    Eigen::Index parent = -1;
    double best_corr = -1.0;
    for (Eigen::Index k = 0; k < kf; ++k) {
      const Eigen::VectorXd f = obs.factors.col(k).cast<double>();
      const double fm = f.mean();
      const double fv = (f.array() - fm).square().sum();
      if (fv <= 0) continue;
      const double c = std::abs(((z.array() - zm) * (f.array() - fm)).sum()) / std::sqrt(var * n * fv);
      if (c > best_corr) {
        best_corr = c;
        parent = k;
      }
    }
    if (parent < 0) continue;
    const int card = src.space().sizes[static_cast<std::size_t>(parent)];
    std::vector<std::vector<double>> groups(static_cast<std::size_t>(card));
    for (Eigen::Index i = 0; i < obs.codes.rows(); ++i) groups[static_cast<std::size_t>(obs.factors(i, parent))].push_back(z[i]);
    double empida = 0.0;
    int used = 0;
    for (auto& g : groups) {
      if (g.empty()) continue;
      const double gm = std::accumulate(g.begin(), g.end(), 0.0) / static_cast<double>(g.size());
      std::vector<double> dev(g.size());
      for (std::size_t i = 0; i < g.size(); ++i) dev[i] = std::abs(g[i] - gm);
      empida += detail::quantile(std::move(dev), diff_quantile);
      ++used;
    }
    empida /= used;
    const double score = std::clamp(1.0 - empida / max_dev, 0.0, 1.0);
    weighted += var * score;
    weights += var;
  }
  if (weights <= 0.0) {
    detail::warn(warnings, "irs: every dimension has zero variance; score defined as 0");
    return 0.0;
  }
  return weighted / weights;
}

// ---------------------------------------------------------------- aggregate report

struct MetricConfig {
  std::size_t num_points = 10000;
  int bins = 20;
  std::size_t betavae_pairs = 500;
  std::size_t betavae_batch = 64;
  std::size_t factorvae_votes = 500;
  std::size_t factorvae_batch = 64;
  std::size_t factorvae_std_points = 10000;
  double irs_quantile = 0.99;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(MetricConfig, num_points, bins, betavae_pairs, betavae_batch,
                                                factorvae_votes, factorvae_batch, factorvae_std_points, irs_quantile)

/// Scores in [0, 1] keyed by metric, with per-metric errors for metrics that could not run.
struct MetricReport {
  std::map<std::string, double> scores;  // betavae, factorvae, mig, sap, irs, dci_*
  std::map<std::string, std::string> errors;
  std::vector<std::string> warnings;
  MetricConfig config;
  std::uint64_t seed = 0;

  nlohmann::json to_json() const {
    nlohmann::json j;
    for (const char* k : {"betavae", "factorvae", "mig", "sap", "irs"}) {
      auto it = scores.find(k);
      j[k] = it == scores.end() ? nlohmann::json(nullptr) : nlohmann::json(it->second);
    }
    if (scores.count("dci_disentanglement")) {
      j["dci"] = {{"disentanglement", scores.at("dci_disentanglement")},
                  {"completeness", scores.at("dci_completeness")},
                  {"informativeness", scores.at("dci_informativeness")}};
    } else {
      j["dci"] = nullptr;
    }
    j["config"] = config;
    j["seed"] = seed;
    if (!errors.empty()) j["errors"] = errors;
    if (!warnings.empty()) j["warnings"] = warnings;
    return j;
  }
};

/// Runs all six metrics, each with its own seed derived from `seed`.
inline MetricReport evaluate_all(const GroundTruthSource& src, const MetricConfig& cfg, std::uint64_t seed) {
  MetricReport r;
  r.config = cfg;
  r.seed = seed;
  auto run = [&](const std::string& name, std::uint64_t stream, auto&& fn) {
    std::mt19937_64 rng(detail::mix_seed(seed, stream));
    try {
      fn(rng);
    } catch (const std::exception& e) {
      r.errors[name] = e.what();
    }
  };
  run("betavae", 1, [&](auto& rng) {
    r.scores["betavae"] = betavae_score(src, cfg.betavae_pairs, cfg.betavae_batch, rng, &r.warnings);
  });
  run("factorvae", 2, [&](auto& rng) {
    r.scores["factorvae"] =
        factorvae_score(src, cfg.factorvae_votes, cfg.factorvae_batch, rng, cfg.factorvae_std_points, &r.warnings);
  });
  run("mig", 3, [&](auto& rng) { r.scores["mig"] = mig(src, cfg.num_points, cfg.bins, rng); });
  run("sap", 4, [&](auto& rng) { r.scores["sap"] = sap(src, cfg.num_points, rng); });
  run("dci", 5, [&](auto& rng) {
    const auto s = dci(src, cfg.num_points, cfg.bins, rng);
    r.scores["dci_disentanglement"] = s.disentanglement;
    r.scores["dci_completeness"] = s.completeness;
    r.scores["dci_informativeness"] = s.informativeness;
  });
  run("irs", 6, [&](auto& rng) { r.scores["irs"] = irs(src, cfg.num_points, cfg.irs_quantile, rng, &r.warnings); });
  return r;
}

// ---------------------------------------------------------------- CSV input

namespace detail {

inline std::vector<std::vector<std::string>> read_csv(const std::string& path, std::vector<std::string>& header) {
  std::ifstream in(path);
  if (!in) throw MetricError("cannot open " + path);
  auto split = [](const std::string& line) {
    std::vector<std::string> out;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) out.push_back(cell);
    return out;
  };
  std::string line;
  if (!std::getline(in, line)) throw MetricError(path + ": empty file");
  header = split(line);
  std::vector<std::vector<std::string>> rows;
  while (std::getline(in, line)) {
    if (line.empty() || line == "\r") continue;
    if (line.back() == '\r') line.pop_back();
    auto r = split(line);
    if (r.size() != header.size()) throw MetricError(path + ": row width differs from header");
    rows.push_back(std::move(r));
  }
  return rows;
}

}  // namespace detail

/// Builds a table source from a codes CSV (floats) and a factors CSV (integers), both with a
/// header row and matching row order. Factor values are re-indexed to 0..n-1 in sorted order.
inline TableSource load_csv_source(const std::string& codes_path, const std::string& factors_path) {
  std::vector<std::string> ch, fh;
  const auto crows = detail::read_csv(codes_path, ch);
  const auto frows = detail::read_csv(factors_path, fh);
  if (crows.size() != frows.size()) throw MetricError("codes and factors CSVs have different row counts");
  Eigen::MatrixXd codes(static_cast<Eigen::Index>(crows.size()), static_cast<Eigen::Index>(ch.size()));
  for (std::size_t i = 0; i < crows.size(); ++i)
    for (std::size_t j = 0; j < ch.size(); ++j) codes(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = std::stod(crows[i][j]);
  FactorSpace space;
  space.names = fh;
  Eigen::MatrixXi factors(static_cast<Eigen::Index>(frows.size()), static_cast<Eigen::Index>(fh.size()));
  for (std::size_t k = 0; k < fh.size(); ++k) {
    std::vector<long> values;
    for (const auto& r : frows) values.push_back(std::stol(r[k]));
    std::vector<long> uniq = values;
    std::sort(uniq.begin(), uniq.end());
    uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());
    space.sizes.push_back(static_cast<int>(uniq.size()));
    for (std::size_t i = 0; i < values.size(); ++i) {
      factors(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) =
          static_cast<int>(std::lower_bound(uniq.begin(), uniq.end(), values[i]) - uniq.begin());
    }
  }
  return TableSource(std::move(space), std::move(factors), std::move(codes));
}

}  // namespace disent
