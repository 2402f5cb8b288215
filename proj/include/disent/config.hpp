#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "disent/losses.hpp"
#include "disent/metrics.hpp"
#include "disent/nn.hpp"
#include "disent/optim.hpp"
#include "disent/schedules.hpp"
#include "disent/synth_data.hpp"

namespace disent {

using Json = nlohmann::json;

/// Canonical spellings accepted by --loss_terms (matched case-insensitively).
inline const std::vector<std::string>& loss_term_names() {
  static const std::vector<std::string> names{"VAE",     "BetaVAE", "BTCVAE", "FactorVAE", "InfoVAE",
                                              "DIP_I",   "DIP_II",  "CVAE",   "IFCVAE"};
  return names;
}

/// Fully resolved training configuration. `tree` is the JSON it was built from.
struct TrainConfig {
  Json tree;
  std::string dataset;
  std::string model_profile;
  ModelSpec model;
  ObjectiveSpec objective;
  AdamHyper optimizer;
  CapacitySchedule capacity;
  ReconWeightSchedule recon_weight;
  PlateauLRState plateau;
  bool plateau_enabled = true;
  std::uint64_t max_iters = 0;
  std::size_t batch_size = 0;
  std::uint64_t seed = 0;
  std::uint64_t log_every = 0;
  std::uint64_t checkpoint_every = 0;
  std::filesystem::path output_dir;
  MetricConfig metrics;
};

/// Every recognised key with its default. Keys whose default is null accept any JSON value.
inline Json default_config_tree() {
  return Json::parse(R"({
    "profile": null,
    "seed": null,
    "dataset": "shapes5",
    "model": {"profile": "shapes5_conv", "latent_dim": 8, "spec": null},
    "loss_terms": ["BTCVAE"],
    "recon": "bernoulli",
    "allow_term_overlap": false,
    "vae": {"beta": 1.0, "use_capacity": false},
    "betavae": {"beta": 4.0, "use_capacity": false},
    "btc": {"alpha": 1.0, "beta": 2.0, "gamma": 1.0, "dataset_size": 0, "use_capacity": false},
    "factorvae": {"gamma_tc": 10.0, "disc_hidden": 256, "disc_layers": 4, "disc_lr": 1e-4,
                  "disc_beta1": 0.5, "disc_beta2": 0.9},
    "infovae": {"lambda": 10.0, "bandwidth": "latent_dim", "sigma2": 1.0},
    "dip": {"lambda_od": 10.0, "lambda_d": 100.0},
    "cvae": {"condition_factor": "shape"},
    "ifcvae": {"label_factor": "shape", "label_dims": 1, "w_aux": 1.0, "w_adv": 1.0,
               "clf_hidden": 64, "clf_lr": 1e-3},
    "optimizer": {"lr": 1e-3, "beta1": 0.9, "beta2": 0.999, "eps": 1e-8},
    "capacity": {"c_start": 0.0, "c_max": 25.0, "ramp_iters": null},
    "recon_weight": {"w_start": 1.0, "w_end": 1.0, "ramp_iters": null},
    "plateau": {"enabled": true, "factor": 0.95, "patience": 3, "threshold": 1e-4, "min_lr": 1e-5},
    "max_iters": 5000,
    "batch_size": 64,
    "log_every": 50,
    "checkpoint_every": 1000,
    "output_dir": "runs/default",
    "metrics": {"num_points": 10000, "bins": 20, "betavae_pairs": 500, "betavae_batch": 64,
                "factorvae_votes": 500, "factorvae_batch": 64, "factorvae_std_points": 10000,
                "irs_quantile": 0.99}
  })");
}

namespace detail {

inline std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

/// Merges `src` into `dst`; every key of `src` must already exist in `dst`.
inline void merge_known(Json& dst, const Json& src, const std::string& path) {
  if (!src.is_object()) throw ConfigError((path.empty() ? std::string("config") : path) + " must be a JSON object");
  for (const auto& [key, value] : src.items()) {
    const std::string full = path.empty() ? key : path + "." + key;
    if (!dst.contains(key)) throw ConfigError("unknown config key '" + full + "'");
    Json& slot = dst[key];
    if (slot.is_object() && value.is_object()) {
      merge_known(slot, value, full);
    } else {
      slot = value;
    }
  }
}

inline Json parse_scalar_like(const Json& existing, const std::string& key, const std::string& raw) {
  try {
    if (existing.is_boolean()) {
      const auto v = lower(raw);
      if (v == "true" || v == "1") return true;
      if (v == "false" || v == "0") return false;
      throw ConfigError("");
    }
    if (existing.is_number_integer() || existing.is_number_unsigned()) {
      std::size_t used = 0;
      const long long v = std::stoll(raw, &used);
      if (used != raw.size()) throw ConfigError("");
      return v;
    }
    if (existing.is_number()) {
      std::size_t used = 0;
      const double v = std::stod(raw, &used);
      if (used != raw.size()) throw ConfigError("");
      return v;
    }
  } catch (const std::exception&) {
    throw ConfigError("cannot parse value '" + raw + "' for config key '" + key + "'");
  }
  if (existing.is_string()) return raw;
  // Free-form slot: accept JSON literals, fall back to a plain string.
  try {
    return Json::parse(raw);
  } catch (const Json::exception&) {
    return raw;
  }
}

template <typename T>
T get_as(const Json& tree, const char* a, const char* b = nullptr) {
  const Json& v = b ? tree.at(a).at(b) : tree.at(a);
  const std::string key = b ? std::string(a) + "." + b : std::string(a);
  try {
    if constexpr (std::is_unsigned_v<T> && std::is_integral_v<T> && !std::is_same_v<T, bool>) {
      if (v.is_number_integer() && v.get<long long>() < 0) throw ConfigError(key + " must be non-negative");
      if (!v.is_number_integer() && !v.is_number_unsigned()) throw ConfigError(key + " must be an integer");
    }
    return v.get<T>();
  } catch (const Json::exception&) {
    throw ConfigError("config key '" + key + "' has the wrong type");
  }
}

}  // namespace detail

/// Key overrides layered on top of the defaults by a named profile.
inline Json profile_tree(const std::string& name) {
  if (name == "btcvae_paper") {
    // 90k iterations, batch 64, beta 2, lr 1e-3 decayed by 0.95 on plateau, capacity 0 -> 25, 20 latents.
    return Json::parse(R"({
      "dataset": "mpi3d_toy",
      "model": {"profile": "paper_conv64", "latent_dim": 20},
      "loss_terms": ["BTCVAE"],
      "btc": {"beta": 2.0, "use_capacity": true},
      "capacity": {"c_start": 0.0, "c_max": 25.0},
      "optimizer": {"lr": 1e-3},
      "plateau": {"factor": 0.95},
      "max_iters": 90000,
      "batch_size": 64
    })");
  }
  if (name == "btcvae_shapes5") {
    return Json::parse(R"({
      "dataset": "shapes5",
      "model": {"profile": "shapes5_conv", "latent_dim": 8},
      "loss_terms": ["BTCVAE"],
      "btc": {"beta": 2.0, "use_capacity": false},
      "optimizer": {"lr": 1e-3},
      "plateau": {"factor": 0.95},
      "max_iters": 5000,
      "batch_size": 64
    })");
  }
  throw ConfigError("unknown profile '" + name + "' (valid: btcvae_paper, btcvae_shapes5)");
}

/// Builds one term from its name and the per-term keys of the tree.
inline TermConfig make_term(const std::string& requested, const Json& tree) {
  std::string name;
  for (const auto& n : loss_term_names())
    if (detail::lower(n) == detail::lower(requested)) name = n;
  if (name.empty()) {
    std::string valid;
    for (const auto& n : loss_term_names()) valid += (valid.empty() ? "" : ", ") + n;
    throw ConfigError("unknown loss term '" + requested + "' (valid: " + valid + ")");
  }
  using detail::get_as;
  if (name == "VAE" || name == "BetaVAE") {
    const char* key = name == "VAE" ? "vae" : "betavae";
    return KlTerm{name, get_as<double>(tree, key, "beta"), get_as<bool>(tree, key, "use_capacity")};
  }
  if (name == "BTCVAE") {
    return BtcTerm{name,
                   get_as<double>(tree, "btc", "alpha"),
                   get_as<double>(tree, "btc", "beta"),
                   get_as<double>(tree, "btc", "gamma"),
                   get_as<std::size_t>(tree, "btc", "dataset_size"),
                   get_as<bool>(tree, "btc", "use_capacity")};
  }
  if (name == "FactorVAE") {
    return FactorTcTerm{name,
                        get_as<double>(tree, "factorvae", "gamma_tc"),
                        get_as<std::size_t>(tree, "factorvae", "disc_hidden"),
                        get_as<std::size_t>(tree, "factorvae", "disc_layers"),
                        get_as<double>(tree, "factorvae", "disc_lr"),
                        get_as<double>(tree, "factorvae", "disc_beta1"),
                        get_as<double>(tree, "factorvae", "disc_beta2")};
  }
  if (name == "InfoVAE") {
    const auto bw = get_as<std::string>(tree, "infovae", "bandwidth");
    if (bw != "latent_dim" && bw != "fixed") throw ConfigError("infovae.bandwidth must be 'latent_dim' or 'fixed'");
    return MmdTerm{name, get_as<double>(tree, "infovae", "lambda"),
                   bw == "fixed" ? BandwidthMode::fixed : BandwidthMode::latent_dim,
                   get_as<double>(tree, "infovae", "sigma2")};
  }
  if (name == "DIP_I" || name == "DIP_II") {
    return DipTerm{name, name == "DIP_I" ? DipMode::I : DipMode::II, get_as<double>(tree, "dip", "lambda_od"),
                   get_as<double>(tree, "dip", "lambda_d")};
  }
  if (name == "CVAE") return CvaeTerm{name, get_as<std::string>(tree, "cvae", "condition_factor")};
  return IfcvaeTerm{name,
                    get_as<std::string>(tree, "ifcvae", "label_factor"),
                    get_as<std::size_t>(tree, "ifcvae", "label_dims"),
                    get_as<double>(tree, "ifcvae", "w_aux"),
                    get_as<double>(tree, "ifcvae", "w_adv"),
                    get_as<std::size_t>(tree, "ifcvae", "clf_hidden"),
                    get_as<double>(tree, "ifcvae", "clf_lr")};
}

/// Term list for the given names, in order. A VAE term is prepended when no term prices the KL.
inline ObjectiveSpec make_objective(const std::vector<std::string>& names, const Json& tree) {
  ObjectiveSpec spec;
  if (names.empty()) throw ConfigError("loss_terms is empty");
  for (const auto& n : names) {
    auto t = make_term(n, tree);
    for (const auto& existing : spec.terms)
      if (term_name(existing) == term_name(t)) throw ConfigError("loss term '" + term_name(t) + "' listed twice");
    spec.terms.push_back(std::move(t));
  }
  if (std::none_of(spec.terms.begin(), spec.terms.end(), is_kl_family)) {
    spec.terms.insert(spec.terms.begin(), make_term("VAE", tree));
  }
  spec.recon_kind = parse_recon_kind(detail::get_as<std::string>(tree, "recon"));
  spec.allow_term_overlap = detail::get_as<bool>(tree, "allow_term_overlap");
  return spec;
}

/// Cardinality of a named dataset factor (for CVAE conditioning and IFCVAE labels).
inline std::size_t factor_cardinality(const FactorSpace& space, const std::string& factor, const char* term) {
  const int k = space.index_of(factor);
  if (k < 0) throw ConfigError(std::string(term) + ": dataset has no factor named '" + factor + "'");
  return static_cast<std::size_t>(space.sizes[static_cast<std::size_t>(k)]);
}

/// Resolves and validates a merged tree. The DISENT_SEED environment variable wins over "seed".
inline TrainConfig resolve_config(Json tree) {
  using detail::get_as;
  if (const char* env = std::getenv("DISENT_SEED"); env && *env) {
    try {
      std::size_t used = 0;
      const unsigned long long s = std::stoull(env, &used);
      if (used != std::string(env).size()) throw std::invalid_argument(env);
      tree["seed"] = s;
    } catch (const std::exception&) {
      throw ConfigError(std::string("DISENT_SEED is not an unsigned integer: ") + env);
    }
  }
  if (tree.at("seed").is_null()) throw ConfigError("seed is required (set \"seed\" or DISENT_SEED)");

  TrainConfig c;
  c.seed = get_as<std::uint64_t>(tree, "seed");
  c.dataset = get_as<std::string>(tree, "dataset");
  c.max_iters = get_as<std::uint64_t>(tree, "max_iters");
  c.batch_size = get_as<std::size_t>(tree, "batch_size");
  c.log_every = get_as<std::uint64_t>(tree, "log_every");
  c.checkpoint_every = get_as<std::uint64_t>(tree, "checkpoint_every");
  c.output_dir = get_as<std::string>(tree, "output_dir");
  if (c.max_iters < 1) throw ConfigError("max_iters must be >= 1");
  if (c.batch_size < 2) throw ConfigError("batch_size must be >= 2");
  if (c.log_every < 1) throw ConfigError("log_every must be >= 1");

  std::vector<std::string> names;
  try {
    names = tree.at("loss_terms").get<std::vector<std::string>>();
  } catch (const Json::exception&) {
    throw ConfigError("loss_terms must be a list of term names");
  }
  c.objective = make_objective(names, tree);

  c.optimizer = {get_as<double>(tree, "optimizer", "lr"), get_as<double>(tree, "optimizer", "beta1"),
                 get_as<double>(tree, "optimizer", "beta2"), get_as<double>(tree, "optimizer", "eps")};
  if (!(c.optimizer.lr > 0.0)) throw ConfigError("optimizer.lr must be > 0");

  auto ramp = [&](const char* block) -> std::uint64_t {
    const Json& r = tree.at(block).at("ramp_iters");
    if (r.is_null()) {
      // Capacity reaches its target at 60% of training; the recon weight ramps over all of it.
      const double frac = std::string(block) == "capacity" ? 0.6 : 1.0;
      return std::max<std::uint64_t>(1, static_cast<std::uint64_t>(std::llround(frac * static_cast<double>(c.max_iters))));
    }
    return get_as<std::uint64_t>(tree, block, "ramp_iters");
  };
  c.capacity = {get_as<double>(tree, "capacity", "c_start"), get_as<double>(tree, "capacity", "c_max"), ramp("capacity")};
  c.capacity.validate();
  c.recon_weight = {get_as<double>(tree, "recon_weight", "w_start"), get_as<double>(tree, "recon_weight", "w_end"),
                    ramp("recon_weight")};
  c.recon_weight.validate();

  c.plateau_enabled = get_as<bool>(tree, "plateau", "enabled");
  c.plateau.current_lr = c.optimizer.lr;
  c.plateau.factor = get_as<double>(tree, "plateau", "factor");
  c.plateau.patience = get_as<std::uint64_t>(tree, "plateau", "patience");
  c.plateau.threshold = get_as<double>(tree, "plateau", "threshold");
  c.plateau.min_lr = std::min(get_as<double>(tree, "plateau", "min_lr"), c.optimizer.lr);
  c.plateau.validate();

  try {
    c.metrics = tree.at("metrics").get<MetricConfig>();
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("metrics block: ") + e.what());
  }

  // Model: conditioning width comes from the CVAE factor when that term is enabled.
  std::size_t cond = 0;
  const Shapes5 shapes;
  if (const auto* cv = c.objective.find<CvaeTerm>()) {
    if (c.dataset != "shapes5") throw ConfigError("CVAE conditioning is only available for the shapes5 dataset");
    cond = factor_cardinality(shapes.space(), cv->condition_factor, "CVAE");
  }
  if (const auto* ifc = c.objective.find<IfcvaeTerm>()) {
    factor_cardinality(shapes.space(), ifc->label_factor, "IFCVAE");
  }
  c.model_profile = get_as<std::string>(tree, "model", "profile");
  const auto latent = get_as<std::size_t>(tree, "model", "latent_dim");
  if (latent < 1) throw ConfigError("model.latent_dim must be >= 1");
  const Json& custom = tree.at("model").at("spec");
  if (custom.is_null()) {
    c.model = model_profile(c.model_profile, latent, cond);
  } else {
    try {
      c.model = custom.get<ModelSpec>();
    } catch (const Json::exception& e) {
      throw ConfigError(std::string("model.spec: ") + e.what());
    }
    c.model_profile = "custom";
  }
  try {
    validate_model_spec(c.model);
  } catch (const ShapeError& e) {
    throw ConfigError(std::string("model: ") + e.what());
  }

  const std::size_t n = c.dataset == "shapes5" ? shapes.size() : 0;
  c.objective.validate(c.model.latent_dim, c.batch_size, n ? n : std::numeric_limits<std::size_t>::max());
  c.tree = std::move(tree);
  return c;
}

/// (dotted key, values) pairs as given on the command line.
using ConfigOverrides = std::vector<std::pair<std::string, std::vector<std::string>>>;

/// Splits "--a.b 1 --loss_terms X Y" into key/value groups.
inline ConfigOverrides parse_override_args(const std::vector<std::string>& args) {
  ConfigOverrides out;
  for (const auto& a : args) {
    if (a.rfind("--", 0) == 0 && a.size() > 2) {
      const auto eq = a.find('=');
      if (eq != std::string::npos) {
        out.push_back({a.substr(2, eq - 2), {a.substr(eq + 1)}});
      } else {
        out.push_back({a.substr(2), {}});
      }
    } else {
      if (out.empty()) throw ConfigError("unexpected argument '" + a + "'");
      out.back().second.push_back(a);
    }
  }
  return out;
}

inline void apply_override(Json& tree, const std::string& key, const std::vector<std::string>& values) {
  Json* slot = &tree;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (!slot->is_object() || !slot->contains(part)) throw ConfigError("unknown config key '" + key + "'");
    slot = &(*slot)[part];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  if (slot->is_object()) throw ConfigError("config key '" + key + "' is a section, not a value");
  if (slot->is_array()) {
    *slot = values;
    return;
  }
  if (values.size() != 1) throw ConfigError("config key '" + key + "' takes exactly one value");
  *slot = detail::parse_scalar_like(*slot, key, values[0]);
}

/// Layers defaults, the file's profile, the file, and command-line overrides (last wins).
inline Json build_config_tree(const Json& file, const ConfigOverrides& overrides) {
  Json tree = default_config_tree();
  std::string profile;
  if (file.is_object() && file.contains("profile") && file["profile"].is_string()) profile = file["profile"];
  for (const auto& [k, v] : overrides)
    if (k == "profile" && v.size() == 1) profile = v[0];
  if (!profile.empty()) detail::merge_known(tree, profile_tree(profile), "");
  detail::merge_known(tree, file, "");
  for (const auto& [k, v] : overrides) apply_override(tree, k, v);
  return tree;
}

inline Json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  try {
    return Json::parse(in);
  } catch (const Json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

inline void write_resolved_config(const TrainConfig& c) {
  std::filesystem::create_directories(c.output_dir);
  std::ofstream out(c.output_dir / "config.resolved.json");
  if (!out) throw ConfigError("cannot write " + (c.output_dir / "config.resolved.json").string());
  out << c.tree.dump(2) << '\n';
}

/// Reads a JSON config file, applies overrides, validates, and writes config.resolved.json.
inline TrainConfig parse_config(const std::filesystem::path& path, const ConfigOverrides& overrides = {},
                                bool echo = true) {
  Json file = read_json_file(path);
  if (!file.is_object()) throw ConfigError(path.string() + ": top level must be a JSON object");
  TrainConfig c = resolve_config(build_config_tree(file, overrides));
  if (echo) write_resolved_config(c);
  return c;
}

}  // namespace disent
