// Command-line driver for the staged pipeline.

#include <CLI11.hpp>

#include <iostream>

#include "icl/pipeline.hpp"

namespace pl = icl::pipeline;

namespace {

constexpr int kOk = 0;
constexpr int kConfigError = 2;
constexpr int kStale = 3;
constexpr int kNumerical = 4;

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"In-context addition workbench: train, localize, analyze, report"};
  app.require_subcommand(1);

  std::string config_path;
  std::string run_dir = "runs/default";
  std::optional<std::uint64_t> seed;
  bool fixture = false;
  bool full_scale = false;
  bool reuse = false;
  std::optional<int> steps;

  const std::vector<std::pair<std::string, std::string>> stages{
      {"train", "train the model and report clean accuracy"},
      {"headvectors", "compute per-task head vectors (or the planted table with --fixture)"},
      {"localize", "fit sparse head coefficients"},
      {"refine", "layer and single-head ablation scans"},
      {"subspace", "PCA subspaces, trigonometric features and causal projections"},
      {"trace", "extraction/direction profiles and self-correction statistics"},
      {"report", "collect a CSV/JSON bundle for plotting"}};
  for (const auto& [name, help] : stages) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("--config", config_path, "JSON config file (defaults when omitted)");
    sub->add_option("--run-dir", run_dir, "run directory")->capture_default_str();
    sub->add_option("--seed", seed, "master seed override");
    sub->add_flag("--fixture", fixture, "use the planted fixture instead of a trained model");
    sub->add_flag("--full-scale-config", full_scale, "full-size task ranges (x 1..100, k 1..30)");
    sub->add_flag("--reuse", reuse, "skip the stage when its manifest entry is current");
    if (name == "train") sub->add_option("--steps", steps, "override train.steps");
  }
  app.add_subcommand("schema", "print the report bundle schema");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfigError;
  }

  auto* sub = app.get_subcommands().front();
  if (sub->get_name() == "schema") {
    std::cout << pl::bundle_schema().dump(2) << '\n';
    return kOk;
  }

  try {
    pl::RunOptions opts;
    opts.config = config_path.empty() ? pl::Config::defaults() : pl::load_config(config_path);
    if (full_scale) opts.config.apply_full_scale();
    if (seed) opts.config.seed = *seed;
    if (steps) opts.config.train.steps = *steps;
    opts.run_dir = run_dir;
    opts.fixture = fixture;
    opts.reuse = reuse;
    opts.log = &std::cerr;
    const auto result = pl::run_stage(pl::stage_from_string(sub->get_name()), opts);
    std::cout << result.summary.dump(2) << '\n';
    return kOk;
  } catch (const pl::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const pl::StaleError& e) {
    std::cerr << "stale artifact: " << e.what() << '\n';
    return kStale;
  } catch (const pl::NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return kNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
