#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "disent/checkpoint.hpp"
#include "disent/config.hpp"
#include "disent/image_io.hpp"
#include "disent/losses.hpp"
#include "disent/metrics.hpp"
#include "disent/nn.hpp"
#include "disent/optim.hpp"
#include "disent/prob.hpp"
#include "disent/schedules.hpp"
#include "disent/synth_data.hpp"

namespace disent {

namespace fs = std::filesystem;

/// Seed for a named stream of a run, e.g. ("init", 0) or ("iter", 17).
inline std::uint64_t stream_seed(std::uint64_t seed, std::uint32_t stream, std::uint64_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), stream,
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
  std::uint32_t w[2];
  seq.generate(w, w + 2);
  return (static_cast<std::uint64_t>(w[0]) << 32) | w[1];
}

enum : std::uint32_t { kStreamInit = 1, kStreamEpoch = 2, kStreamIter = 3, kStreamTerms = 4 };

/// One-hot rows for factor k of a batch.
inline Tensor one_hot_factor(const FactorBatch& b, std::size_t k, std::size_t classes) {
  std::vector<double> v(b.size * classes, 0.0);
  for (std::size_t i = 0; i < b.size; ++i) v[i * classes + static_cast<std::size_t>(b.factor(i, k))] = 1.0;
  return Tensor({b.size, classes}, std::move(v));
}

inline std::vector<int> factor_labels(const FactorBatch& b, std::size_t k) {
  std::vector<int> out(b.size);
  for (std::size_t i = 0; i < b.size; ++i) out[i] = b.factor(i, k);
  return out;
}

/// How a trained network consumes dataset factors: the CVAE condition and the IFCVAE label.
struct FactorWiring {
  int condition_factor = -1;
  std::size_t condition_classes = 0;
  int label_factor = -1;
  std::size_t label_classes = 0;

  static FactorWiring from(const ObjectiveSpec& spec, const FactorSpace& space) {
    FactorWiring w;
    if (const auto* c = spec.find<CvaeTerm>()) {
      w.condition_factor = space.index_of(c->condition_factor);
      if (w.condition_factor < 0) throw ConfigError("CVAE: unknown factor " + c->condition_factor);
      w.condition_classes = static_cast<std::size_t>(space.sizes[static_cast<std::size_t>(w.condition_factor)]);
    }
    if (const auto* t = spec.find<IfcvaeTerm>()) {
      w.label_factor = space.index_of(t->label_factor);
      if (w.label_factor < 0) throw ConfigError("IFCVAE: unknown factor " + t->label_factor);
      w.label_classes = static_cast<std::size_t>(space.sizes[static_cast<std::size_t>(w.label_factor)]);
    }
    return w;
  }

  std::optional<Tensor> condition(const FactorBatch& b) const {
    if (condition_factor < 0) return std::nullopt;
    return one_hot_factor(b, static_cast<std::size_t>(condition_factor), condition_classes);
  }
};

/// Posterior means for a batch, computed without recording a tape.
inline Eigen::MatrixXd posterior_means(const Network& net, const FactorWiring& wiring, const FactorBatch& b) {
  NoGradGuard guard;
  const auto cond = wiring.condition(b);
  const auto post = forward_encode(net, b.images, cond ? &*cond : nullptr);
  Eigen::MatrixXd out(static_cast<Eigen::Index>(b.size), static_cast<Eigen::Index>(net.spec().latent_dim));
  const auto d = net.spec().latent_dim;
  for (std::size_t i = 0; i < b.size; ++i)
    for (std::size_t j = 0; j < d; ++j) out(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = post.mu[i * d + j];
  return out;
}

// ---------------------------------------------------------------- run state

/// Everything that evolves during training; checkpoints capture exactly this.
struct TrainState {
  Network net;
  TermRuntime runtime;
  AdamState opt;
  PlateauLRState plateau;
  std::uint64_t iter = 0;  // completed iterations
  double epoch_sum = 0.0;
  std::uint64_t epoch_count = 0;

  std::vector<NamedTensor> model_parameters() const {
    auto p = net.parameters();
    auto aux = runtime.model_side_parameters();
    p.insert(p.end(), aux.begin(), aux.end());
    return p;
  }
};

inline TrainState init_state(const TrainConfig& cfg, const FactorSpace& space) {
  TrainState s;
  s.net = build_model(cfg.model, stream_seed(cfg.seed, kStreamInit, 0));
  const auto wiring = FactorWiring::from(cfg.objective, space);
  s.runtime = TermRuntime(cfg.objective, cfg.model.latent_dim, wiring.label_classes, stream_seed(cfg.seed, kStreamInit, 1));
  s.opt = AdamState(cfg.optimizer, s.model_parameters());
  s.plateau = cfg.plateau;
  return s;
}

namespace detail {

inline Json adam_meta(const AdamState& a) {
  return {{"lr", a.hyper.lr}, {"beta1", a.hyper.beta1}, {"beta2", a.hyper.beta2}, {"eps", a.hyper.eps}, {"t", a.t}};
}

inline void adam_restore(AdamState& a, const Json& j) {
  a.hyper = {j.at("lr").get<double>(), j.at("beta1").get<double>(), j.at("beta2").get<double>(), j.at("eps").get<double>()};
  a.t = j.at("t").get<std::uint64_t>();
}

inline void add_group(Checkpoint& ck, const std::string& prefix, const std::vector<NamedTensor>& params,
                      const AdamState& opt) {
  for (const auto& p : params) ck.add("param/" + p.name, p.tensor.shape(), std::vector<double>(p.tensor.data().begin(), p.tensor.data().end()));
  for (std::size_t k = 0; k < params.size(); ++k) ck.add(prefix + ".m/" + params[k].name, params[k].tensor.shape(), opt.m[k]);
  for (std::size_t k = 0; k < params.size(); ++k) ck.add(prefix + ".v/" + params[k].name, params[k].tensor.shape(), opt.v[k]);
}

inline void restore_params(const Checkpoint& ck, std::vector<NamedTensor> params) {
  for (auto& p : params) {
    const auto& b = ck.blob("param/" + p.name);
    if (b.shape != p.tensor.shape()) {
      throw CheckpointError("parameter " + p.name + " has shape " + shape_str(b.shape) + " in checkpoint, expected " +
                            shape_str(p.tensor.shape()));
    }
    std::copy(b.data.begin(), b.data.end(), p.tensor.mutable_data().begin());
  }
}

inline void restore_group(const Checkpoint& ck, const std::string& prefix, const std::vector<NamedTensor>& params,
                          AdamState& opt) {
  restore_params(ck, params);
  for (std::size_t k = 0; k < params.size(); ++k) {
    opt.m[k] = ck.blob(prefix + ".m/" + params[k].name).data;
    opt.v[k] = ck.blob(prefix + ".v/" + params[k].name).data;
  }
}

/// The config tree minus keys that only say where output goes.
inline Json portable_config(const Json& tree) {
  Json t = tree;
  t.erase("output_dir");
  return t;
}

inline std::vector<NamedTensor> group_params(const std::optional<Sequential>& s) {
  return s ? s->parameters() : std::vector<NamedTensor>{};
}

}  // namespace detail

inline Checkpoint make_checkpoint(const TrainConfig& cfg, const TrainState& s) {
  Checkpoint ck;
  ck.meta["model_spec"] = s.net.spec();
  ck.meta["step"] = s.iter;
  ck.meta["seed"] = cfg.seed;
  ck.meta["config"] = detail::portable_config(cfg.tree);
  ck.meta["optimizer"] = detail::adam_meta(s.opt);
  ck.meta["plateau"] = {{"current_lr", s.plateau.current_lr},
                        {"best_value", std::isinf(s.plateau.best_value) ? Json(nullptr) : Json(s.plateau.best_value)},
                        {"epochs_since_best", s.plateau.epochs_since_best}};
  ck.meta["epoch_sum"] = s.epoch_sum;
  ck.meta["epoch_count"] = s.epoch_count;
  detail::add_group(ck, "adam", s.model_parameters(), s.opt);
  if (s.runtime.discriminator()) {
    ck.meta["disc_optimizer"] = detail::adam_meta(s.runtime.disc_optimizer());
    detail::add_group(ck, "disc_adam", detail::group_params(s.runtime.discriminator()), s.runtime.disc_optimizer());
  }
  if (s.runtime.adv_classifier()) {
    ck.meta["adv_optimizer"] = detail::adam_meta(s.runtime.adv_optimizer());
    detail::add_group(ck, "adv_adam", detail::group_params(s.runtime.adv_classifier()), s.runtime.adv_optimizer());
  }
  return ck;
}

/// Rebuilds the full training state from a checkpoint written for the same config.
inline TrainState restore_state(const TrainConfig& cfg, const FactorSpace& space, const Checkpoint& ck) {
  if (ck.meta.at("config") != detail::portable_config(cfg.tree)) {
    throw ConfigError("checkpoint was written by a different configuration");
  }
  TrainState s = init_state(cfg, space);
  s.iter = ck.meta.at("step").get<std::uint64_t>();
  detail::adam_restore(s.opt, ck.meta.at("optimizer"));
  detail::restore_group(ck, "adam", s.model_parameters(), s.opt);
  if (s.runtime.discriminator()) {
    detail::adam_restore(s.runtime.disc_optimizer(), ck.meta.at("disc_optimizer"));
    detail::restore_group(ck, "disc_adam", detail::group_params(s.runtime.discriminator()), s.runtime.disc_optimizer());
  }
  if (s.runtime.adv_classifier()) {
    detail::adam_restore(s.runtime.adv_optimizer(), ck.meta.at("adv_optimizer"));
    detail::restore_group(ck, "adv_adam", detail::group_params(s.runtime.adv_classifier()), s.runtime.adv_optimizer());
  }
  const auto& pl = ck.meta.at("plateau");
  s.plateau.current_lr = pl.at("current_lr").get<double>();
  s.plateau.best_value = pl.at("best_value").is_null() ? std::numeric_limits<double>::infinity() : pl.at("best_value").get<double>();
  s.plateau.epochs_since_best = pl.at("epochs_since_best").get<std::uint64_t>();
  s.epoch_sum = ck.meta.at("epoch_sum").get<double>();
  s.epoch_count = ck.meta.at("epoch_count").get<std::uint64_t>();
  return s;
}

/// Network (model parameters only) from a checkpoint, for evaluation and traversal.
inline Network load_network(const Checkpoint& ck) {
  Network net(ck.meta.at("model_spec").get<ModelSpec>(), 0);
  detail::restore_params(ck, net.parameters());
  return net;
}

inline ObjectiveSpec checkpoint_objective(const Checkpoint& ck) {
  const Json& tree = ck.meta.at("config");
  return make_objective(tree.at("loss_terms").get<std::vector<std::string>>(), tree);
}

// ---------------------------------------------------------------- logging

/// One RunLog record. Wall time is kept out of it (timing.csv) so logs replay byte-identically.
struct RunRecord {
  std::uint64_t iter = 0;
  std::uint64_t epoch = 0;
  double lr = 0.0;
  double capacity = 0.0;
  TermBreakdown breakdown;

  Json to_json() const {
    Json terms = Json::object();
    for (const auto& [k, v] : breakdown.terms) terms[k] = v;
    return {{"iter", iter},     {"epoch", epoch},      {"total", breakdown.total}, {"recon", breakdown.recon},
            {"w_recon", breakdown.recon_weight},       {"terms", terms},           {"lr", lr},
            {"C", capacity},    {"diagnostics", breakdown.diagnostics}};
  }
};

struct RunPaths {
  fs::path dir;
  fs::path runlog() const { return dir / "runlog.jsonl"; }
  fs::path runlog_csv() const { return dir / "runlog.csv"; }
  fs::path epochs() const { return dir / "epochs.jsonl"; }
  fs::path timing() const { return dir / "timing.csv"; }
  fs::path checkpoint(std::uint64_t iter) const {
    char name[40];
    std::snprintf(name, sizeof(name), "ckpt_%08llu.ck", static_cast<unsigned long long>(iter));
    return dir / "checkpoints" / name;
  }
  fs::path final_checkpoint() const { return dir / "checkpoints" / "final.ck"; }
};

namespace detail {

inline std::string fmt_double(double v) {
  // Same round-trip text as the JSONL records.
  return Json(v).dump();
}

/// Keeps lines whose leading integer field (JSON "iter" or first CSV column) is <= max_iter.
inline void truncate_log(const fs::path& path, std::uint64_t max_iter, bool csv, const char* json_key = "iter") {
  if (!fs::exists(path)) return;
  std::ifstream in(path);
  std::vector<std::string> keep;
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (csv && first) {
      keep.push_back(line);
      first = false;
      continue;
    }
    first = false;
    std::uint64_t it = 0;
    if (csv) {
      it = std::stoull(line.substr(0, line.find(',')));
    } else {
      it = Json::parse(line).at(json_key).get<std::uint64_t>();
    }
    if (it <= max_iter) keep.push_back(line);
  }
  in.close();
  std::ofstream out(path, std::ios::trunc);
  for (const auto& l : keep) out << l << '\n';
}

}  // namespace detail

class RunLogWriter {
 public:
  RunLogWriter(RunPaths paths, bool append) : paths_(std::move(paths)) {
    fs::create_directories(paths_.dir);
    const auto mode = append ? std::ios::app : std::ios::trunc;
    jsonl_.open(paths_.runlog(), mode);
    csv_.open(paths_.runlog_csv(), mode);
    epochs_.open(paths_.epochs(), mode);
    timing_.open(paths_.timing(), mode);
    if (!jsonl_ || !csv_ || !epochs_ || !timing_) throw std::runtime_error("cannot open run logs in " + paths_.dir.string());
    csv_header_written_ = append && fs::file_size(paths_.runlog_csv()) > 0;
    if (!append) timing_ << "iter,wall_ms\n";
  }

  void write(const RunRecord& r, double wall_ms) {
    jsonl_ << r.to_json().dump() << '\n';
    if (!csv_header_written_) {
      csv_ << "iter,epoch,total,recon,w_recon";
      for (const auto& [k, _] : r.breakdown.terms) csv_ << ',' << k;
      csv_ << ",lr,C\n";
      csv_header_written_ = true;
    }
    csv_ << r.iter << ',' << r.epoch << ',' << detail::fmt_double(r.breakdown.total) << ','
         << detail::fmt_double(r.breakdown.recon) << ',' << detail::fmt_double(r.breakdown.recon_weight);
    for (const auto& [_, v] : r.breakdown.terms) csv_ << ',' << detail::fmt_double(v);
    csv_ << ',' << detail::fmt_double(r.lr) << ',' << detail::fmt_double(r.capacity) << '\n';
    timing_ << r.iter << ',' << wall_ms << '\n';
    jsonl_.flush();
    csv_.flush();
    timing_.flush();
  }

  void write_epoch(std::uint64_t epoch, std::uint64_t iter, double mean_objective, double lr) {
    epochs_ << Json{{"epoch", epoch}, {"iter", iter}, {"mean_objective", mean_objective}, {"lr", lr}}.dump() << '\n';
    epochs_.flush();
  }

 private:
  RunPaths paths_;
  std::ofstream jsonl_, csv_, epochs_, timing_;
  bool csv_header_written_ = false;
};

// ---------------------------------------------------------------- training loop

struct TrainOptions {
  std::optional<fs::path> resume;  // checkpoint to continue from
  std::uint64_t stop_at = 0;       // stop after this many iterations (0: max_iters); schedules still use max_iters
  bool quiet = true;
};

struct TrainResult {
  fs::path final_checkpoint;
  std::uint64_t iterations = 0;
};

/// Executes a single optimization step and returns its objective breakdown.
inline TermBreakdown train_step(const TrainConfig& cfg, const Shapes5& data, const FactorWiring& wiring, TrainState& s,
                                const FactorBatch& batch) {
  std::mt19937_64 rng(stream_seed(cfg.seed, kStreamIter, s.iter));
  const auto cond = wiring.condition(batch);
  std::optional<std::vector<int>> labels;
  if (wiring.label_factor >= 0) labels = factor_labels(batch, static_cast<std::size_t>(wiring.label_factor));

  LatentPosterior post = forward_encode(s.net, batch.images, cond ? &*cond : nullptr);
  reparameterize(post, rng);
  Tensor x_hat = forward_decode(s.net, post.z, cond ? &*cond : nullptr);

  ObjectiveInputs in;
  in.x = batch.images;
  in.x_hat = x_hat;
  in.post = post;
  in.capacity = capacity_at(cfg.capacity, s.iter);
  in.recon_weight = recon_weight_at(cfg.recon_weight, s.iter);
  in.dataset_size = data.size();
  in.labels = labels ? &*labels : nullptr;
  in.term_seed = stream_seed(cfg.seed, kStreamTerms, s.iter);
  auto obj = compose_objective(cfg.objective, in, s.runtime);
  if (!std::isfinite(obj.breakdown.total)) {
    throw NumericError("non-finite objective at iteration " + std::to_string(s.iter + 1));
  }

  auto params = s.model_parameters();
  zero_grad(params);
  obj.loss.backward();
  s.opt.hyper.lr = s.plateau.current_lr;
  adam_step(s.opt, params);
  auto diag = s.runtime.adversary_updates(cfg.objective, post.z, labels ? &*labels : nullptr, rng);
  obj.breakdown.diagnostics.insert(diag.begin(), diag.end());
  s.iter += 1;
  return obj.breakdown;
}

/// Runs (or resumes) training. On a NumericError the last written checkpoint is left intact.
inline TrainResult train(const TrainConfig& cfg, const TrainOptions& opts = {}) {
  if (cfg.dataset != "shapes5") {
    throw ConfigError("dataset '" + cfg.dataset + "' is not bundled; only 'shapes5' can be trained here");
  }
  const Shapes5 data;
  if (cfg.model.image_shape != Shapes5::image_shape()) {
    throw ConfigError("model image shape " + shape_str(cfg.model.image_shape) + " does not match dataset shape " +
                      shape_str(Shapes5::image_shape()));
  }
  const auto wiring = FactorWiring::from(cfg.objective, data.space());
  const RunPaths paths{cfg.output_dir};

  TrainState s;
  if (opts.resume) {
    s = restore_state(cfg, data.space(), load_checkpoint(*opts.resume));
    detail::truncate_log(paths.runlog(), s.iter, false);
    detail::truncate_log(paths.runlog_csv(), s.iter, true);
    detail::truncate_log(paths.epochs(), s.iter, false);
    detail::truncate_log(paths.timing(), s.iter, true);
  } else {
    s = init_state(cfg, data.space());
  }
  RunLogWriter log(paths, opts.resume.has_value());

  const std::uint64_t end = opts.stop_at ? std::min(opts.stop_at, cfg.max_iters) : cfg.max_iters;
  const std::size_t per_epoch = (data.size() + cfg.batch_size - 1) / cfg.batch_size;
  std::optional<EpochIterator> epoch_it;
  std::uint64_t epoch_of_it = ~0ull;
  const auto t0 = std::chrono::steady_clock::now();

  while (s.iter < end) {
    const std::uint64_t epoch = s.iter / per_epoch;
    const std::size_t b = static_cast<std::size_t>(s.iter % per_epoch);
    if (epoch != epoch_of_it) {
      std::mt19937_64 erng(stream_seed(cfg.seed, kStreamEpoch, epoch));
      epoch_it.emplace(data, cfg.batch_size, erng);
      epoch_of_it = epoch;
    }
    const auto batch = data.batch_from_indices(epoch_it->batch_indices(b));
    const double lr_used = s.plateau.current_lr;
    const double cap = capacity_at(cfg.capacity, s.iter);
    TermBreakdown bd = train_step(cfg, data, wiring, s, batch);

    s.epoch_sum += bd.total;
    s.epoch_count += 1;
    if (b + 1 == per_epoch) {
      const double mean_obj = s.epoch_sum / static_cast<double>(s.epoch_count);
      if (cfg.plateau_enabled) plateau_update(s.plateau, mean_obj);
      log.write_epoch(epoch, s.iter, mean_obj, s.plateau.current_lr);
      s.epoch_sum = 0.0;
      s.epoch_count = 0;
    }
    if (s.iter % cfg.log_every == 0 || s.iter == end) {
      const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
      log.write({s.iter, epoch, lr_used, cap, bd}, ms);
      if (!opts.quiet) {
        std::fprintf(stderr, "iter %llu  total %.4f  recon %.4f  lr %.3g\n", static_cast<unsigned long long>(s.iter),
                     bd.total, bd.recon, lr_used);
      }
    }
    if (cfg.checkpoint_every && s.iter % cfg.checkpoint_every == 0) {
      save_checkpoint(paths.checkpoint(s.iter), make_checkpoint(cfg, s));
    }
  }
  save_checkpoint(paths.final_checkpoint(), make_checkpoint(cfg, s));
  return {paths.final_checkpoint(), s.iter};
}

// ---------------------------------------------------------------- evaluation

inline Representation network_representation(const Network& net, FactorWiring wiring) {
  return {[&net, wiring](const FactorBatch& b) { return posterior_means(net, wiring, b); }, net.spec().latent_dim};
}

inline MetricReport evaluate_network(const Network& net, const ObjectiveSpec& objective, const MetricConfig& mc,
                                     std::uint64_t seed) {
  const Shapes5 data;
  if (net.spec().image_shape != Shapes5::image_shape()) {
    throw ShapeError("checkpoint image shape " + shape_str(net.spec().image_shape) + " does not match dataset shape " +
                     shape_str(Shapes5::image_shape()));
  }
  DatasetSource src(data, network_representation(net, FactorWiring::from(objective, data.space())));
  return evaluate_all(src, mc, seed);
}

/// Scores a checkpoint and writes the report. Metric settings and seed default to the run's own.
inline MetricReport evaluate_checkpoint(const fs::path& checkpoint, const fs::path& out,
                                        std::optional<MetricConfig> mc = std::nullopt,
                                        std::optional<std::uint64_t> seed = std::nullopt) {
  const Checkpoint ck = load_checkpoint(checkpoint);
  const Network net = load_network(ck);
  const MetricConfig cfg = mc ? *mc : ck.meta.at("config").at("metrics").get<MetricConfig>();
  const auto report = evaluate_network(net, checkpoint_objective(ck), cfg, seed ? *seed : ck.meta.at("seed").get<std::uint64_t>());
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  std::ofstream f(out);
  if (!f) throw std::runtime_error("cannot write " + out.string());
  f << report.to_json().dump(2) << '\n';
  return report;
}

// ---------------------------------------------------------------- traversals

struct TraversalResult {
  fs::path grid;
  std::vector<fs::path> rows;
  fs::path recon_pair;
  fs::path stats;
  std::vector<double> max_pixel_change;  // per latent dimension
  std::vector<bool> inert;
};

/// Sweeps each latent of the sample's posterior mean over [-range, range] in `steps` decodes.
/// Writes traversal_grid.pgm (d rows x steps columns of tiles), traversal_dim_XX.pgm,
/// recon_pair.pgm (input | reconstruction) and traversal_stats.json. A dimension is inert
/// when no pixel moves by more than `inert_threshold` across its sweep.
inline TraversalResult export_traversals(const Network& net, const ObjectiveSpec& objective, std::size_t sample,
                                         double range, std::size_t steps, const fs::path& out_dir,
                                         double inert_threshold = 0.5) {
  if (steps < 2) throw ConfigError("traversal needs at least 2 steps");
  const Shapes5 data;
  if (sample >= data.size()) throw ConfigError("sample index " + std::to_string(sample) + " out of range");
  const auto wiring = FactorWiring::from(objective, data.space());
  const std::size_t idx[] = {sample};
  const auto batch = data.batch_from_indices(idx);
  const Eigen::MatrixXd mu = posterior_means(net, wiring, batch);
  const std::size_t d = net.spec().latent_dim;
  const auto& ishape = net.spec().image_shape;
  const std::size_t h = ishape[1], w = ishape[2], px = h * w;

  auto decode = [&](const std::vector<double>& z, std::size_t n) {
    NoGradGuard guard;
    Tensor zt({n, d}, z);
    std::optional<Tensor> cond;
    if (wiring.condition_factor >= 0) {
      std::vector<int> f;
      for (std::size_t i = 0; i < n; ++i) f.insert(f.end(), batch.factors.begin(), batch.factors.end());
      cond = one_hot_factor(data.make_batch(std::move(f)), static_cast<std::size_t>(wiring.condition_factor),
                            wiring.condition_classes);
    }
    return forward_decode(net, zt, cond ? &*cond : nullptr);
  };
  // Only the first channel is drawn; shapes5 is grayscale.
  auto tile = [&](const Tensor& imgs, std::size_t i) {
    const std::size_t per = numel(ishape);
    return std::span<const double>(imgs.data().data() + i * per, px);
  };

  fs::create_directories(out_dir);
  TraversalResult res;
  GrayImage grid(steps * w, d * h);
  Json per_dim = Json::array();
  for (std::size_t j = 0; j < d; ++j) {
    std::vector<double> z(steps * d);
    for (std::size_t s = 0; s < steps; ++s) {
      for (std::size_t k = 0; k < d; ++k) z[s * d + k] = mu(0, static_cast<Eigen::Index>(k));
      z[s * d + j] = -range + 2.0 * range * static_cast<double>(s) / static_cast<double>(steps - 1);
    }
    const Tensor imgs = decode(z, steps);
    GrayImage row(steps * w, h);
    double change = 0.0;
    for (std::size_t p = 0; p < px; ++p) {
      double lo = std::numeric_limits<double>::infinity(), hi = -lo;
      for (std::size_t s = 0; s < steps; ++s) {
        const double v = tile(imgs, s)[p];
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
      change = std::max(change, hi - lo);
    }
    for (std::size_t s = 0; s < steps; ++s) {
      grid.blit(tile(imgs, s), w, h, s * w, j * h);
      row.blit(tile(imgs, s), w, h, s * w, 0);
    }
    char name[40];
    std::snprintf(name, sizeof(name), "traversal_dim_%02zu.pgm", j);
    write_pgm(out_dir / name, row);
    res.rows.push_back(out_dir / name);
    res.max_pixel_change.push_back(change);
    res.inert.push_back(change < inert_threshold);
    per_dim.push_back({{"dim", j}, {"max_pixel_change", change}, {"inert", change < inert_threshold}});
  }
  res.grid = out_dir / "traversal_grid.pgm";
  write_pgm(res.grid, grid);

  std::vector<double> zmean(d);
  for (std::size_t k = 0; k < d; ++k) zmean[k] = mu(0, static_cast<Eigen::Index>(k));
  const Tensor recon = decode(zmean, 1);
  GrayImage pair(2 * w, h);
  pair.blit(std::span<const double>(batch.images.data().data(), px), w, h, 0, 0);
  pair.blit(tile(recon, 0), w, h, w, 0);
  res.recon_pair = out_dir / "recon_pair.pgm";
  write_pgm(res.recon_pair, pair);

  std::size_t n_inert = 0;
  for (bool b : res.inert) n_inert += b;
  res.stats = out_dir / "traversal_stats.json";
  std::ofstream(res.stats) << Json{{"sample", sample},
                                   {"range", range},
                                   {"steps", steps},
                                   {"inert_threshold", inert_threshold},
                                   {"num_inert", n_inert},
                                   {"dims", per_dim}}
                                  .dump(2)
                           << '\n';
  return res;
}

}  // namespace disent
