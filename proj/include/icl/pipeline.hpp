#pragma once

// Staged reproduction driver: one JSON config, a run directory with a
// manifest of stage digests, and per-stage CSV/JSON artifacts.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "icl/corpus.hpp"
#include "icl/localizer.hpp"
#include "icl/subspace.hpp"
#include "icl/tinyformer.hpp"

namespace icl::pipeline {

namespace fs = std::filesystem;

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct StaleError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct HeadVectorsConfig {
  std::size_t prompts_per_task = 100;
};

struct LocalizeConfig {
  localizer::OptimizerConfig optimizer;
  std::array<double, 3> split{0.7, 0.15, 0.15};
};

struct RefineConfig {
  int coeff_min = 0;
  int coeff_max = 10;
  std::size_t top_heads = 3;
  std::size_t random_sets = 20;
};

struct SubspaceConfig {
  double variance_target = 0.97;
  bool center = true;
  subspace::TrigFitConfig trig;
};

struct TraceConfig {
  std::size_t correlation_prompts = 100;
  std::size_t mixed_prompts = 20;
};

struct Config {
  std::uint64_t seed = 1234;
  corpus::TaskFamily family;
  std::size_t n_ood_tasks = 2;
  model::ModelConfig model;
  model::TrainConfig train;
  HeadVectorsConfig headvectors;
  LocalizeConfig localize;
  RefineConfig refine;
  SubspaceConfig subspace;
  TraceConfig trace;
  subspace::FixtureConfig fixture;

  /// Desk-scale defaults with the model vocabulary sized to the family.
  static Config defaults();
  /// Full-size task ranges: x in [1,100], k in [1,30], 5 held-out tasks.
  void apply_full_scale();
  void validate() const;

  nlohmann::json to_json() const;
  /// Missing keys take defaults; unknown top-level keys are rejected.
  static Config from_json(const nlohmann::json& j);
};

Config load_config(const fs::path& path);

enum class Stage { Train, HeadVectors, Localize, Refine, Subspace, Trace, Report };

std::string to_string(Stage s);
Stage stage_from_string(const std::string& name);
std::vector<Stage> predecessors(Stage s);

struct RunOptions {
  fs::path run_dir;
  Config config;
  bool fixture = false;
  /// Skip a stage whose manifest entry is already current.
  bool reuse = false;
  std::ostream* log = nullptr;
};

struct StageResult {
  bool skipped = false;
  std::vector<fs::path> outputs;
  nlohmann::json summary;
};

StageResult run_stage(Stage stage, const RunOptions& options);

std::string sha256_hex(std::string_view data);
std::string file_sha256(const fs::path& path);

/// Every CSV kind the report bundle may contain, with its header.
nlohmann::json bundle_schema();
/// Checks a bundle directory against bundle_schema(); returns the problems found.
std::vector<std::string> validate_bundle(const fs::path& bundle_dir);

}  // namespace icl::pipeline
