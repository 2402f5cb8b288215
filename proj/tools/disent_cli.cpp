// disent: train, evaluate and inspect disentangled VAEs on the shapes5 dataset.
//
//   disent train --config run.json [--resume ck] [--key.sub value ...]
//   disent evaluate --checkpoint ck --out report.json
//   disent evaluate --codes codes.csv --factors factors.csv --out report.json --seed 1
//   disent traverse --checkpoint ck --sample 0 --steps 8 --range 3
//   disent render-dataset --out DIR
//
// Exit codes: 0 success, 1 other failure, 2 configuration error, 3 numeric failure.

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "disent/disent.hpp"

namespace {

constexpr int kExitOther = 1;
constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;

std::optional<disent::MetricConfig> metric_config_from(const std::string& path) {
  if (path.empty()) return std::nullopt;
  try {
    return disent::read_json_file(path).get<disent::MetricConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw disent::ConfigError(path + ": " + e.what());
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Train and evaluate disentangled latent-variable models"};
  app.require_subcommand(1);

  auto* train = app.add_subcommand("train", "Train a model from a JSON config; extra --key value pairs override it");
  std::string config_path, resume_path;
  std::uint64_t stop_at = 0;
  bool verbose = false;
  train->add_option("--config", config_path, "JSON config file")->required()->check(CLI::ExistingFile);
  train->add_option("--resume", resume_path, "Continue from this checkpoint");
  train->add_option("--stop-at", stop_at, "Stop after this many iterations (schedules still use max_iters)");
  train->add_flag("-v,--verbose", verbose, "Print progress to stderr");
  train->allow_extras();

  auto* evaluate = app.add_subcommand("evaluate", "Score a checkpoint (or a codes/factors CSV pair) with all metrics");
  std::string eval_ck, eval_out = "report.json", codes_csv, factors_csv, metrics_path;
  std::optional<std::uint64_t> eval_seed;
  evaluate->add_option("--checkpoint", eval_ck, "Checkpoint file");
  evaluate->add_option("--codes", codes_csv, "CSV of latent codes (header row, floats)");
  evaluate->add_option("--factors", factors_csv, "CSV of ground-truth factors (header row, integers)");
  evaluate->add_option("--out", eval_out, "Report path");
  evaluate->add_option("--seed", eval_seed, "Metric seed (default: the run's seed)");
  evaluate->add_option("--metrics-config", metrics_path, "JSON file with metric sampling parameters");

  auto* traverse = app.add_subcommand("traverse", "Export latent traversal images for one dataset sample");
  std::string trav_ck, trav_out;
  std::size_t sample = 0, steps = 8;
  double range = 3.0, inert_threshold = 0.5;
  traverse->add_option("--checkpoint", trav_ck, "Checkpoint file")->required()->check(CLI::ExistingFile);
  traverse->add_option("--sample", sample, "Dataset index of the sample to encode");
  traverse->add_option("--steps", steps, "Decodes per latent dimension (>= 2)");
  traverse->add_option("--range", range, "Sweep each latent over [-range, range]");
  traverse->add_option("--out", trav_out, "Output directory (default: traversals/ next to the checkpoint)");
  traverse->add_option("--inert-threshold", inert_threshold, "Max pixel change below which a dimension is inert");

  auto* render = app.add_subcommand("render-dataset", "Write every shapes5 image as PGM plus factors.csv");
  std::string render_out;
  render->add_option("--out", render_out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (*train) {
      const auto overrides = disent::parse_override_args(train->remaining());
      const auto cfg = disent::parse_config(config_path, overrides);
      disent::TrainOptions opts;
      if (!resume_path.empty()) opts.resume = resume_path;
      opts.stop_at = stop_at;
      opts.quiet = !verbose;
      const auto result = disent::train(cfg, opts);
      std::cout << result.final_checkpoint.string() << '\n';
    } else if (*evaluate) {
      const auto mc = metric_config_from(metrics_path);
      if (!codes_csv.empty() || !factors_csv.empty()) {
        if (codes_csv.empty() || factors_csv.empty()) throw disent::ConfigError("--codes and --factors go together");
        if (!eval_seed) throw disent::ConfigError("--seed is required in CSV mode");
        const auto src = disent::load_csv_source(codes_csv, factors_csv);
        const auto report = disent::evaluate_all(src, mc ? *mc : disent::MetricConfig{}, *eval_seed);
        std::ofstream(eval_out) << report.to_json().dump(2) << '\n';
      } else {
        if (eval_ck.empty()) throw disent::ConfigError("evaluate needs --checkpoint or --codes/--factors");
        disent::evaluate_checkpoint(eval_ck, eval_out, mc, eval_seed);
      }
      std::cout << eval_out << '\n';
    } else if (*traverse) {
      const auto ck = disent::load_checkpoint(trav_ck);
      const auto net = disent::load_network(ck);
      const std::filesystem::path out =
          trav_out.empty() ? std::filesystem::path(trav_ck).parent_path() / "traversals" : std::filesystem::path(trav_out);
      const auto res = disent::export_traversals(net, disent::checkpoint_objective(ck), sample, range, steps, out,
                                                 inert_threshold);
      std::cout << res.grid.string() << '\n';
      for (std::size_t j = 0; j < res.max_pixel_change.size(); ++j) {
        std::printf("dim %2zu  max_pixel_change %.4f%s\n", j, res.max_pixel_change[j], res.inert[j] ? "  inert" : "");
      }
    } else if (*render) {
      disent::Shapes5().dump(render_out);
      std::cout << render_out << '\n';
    }
  } catch (const disent::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const disent::NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitOther;
  }
  return 0;
}
