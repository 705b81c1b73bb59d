#include "icl/pipeline.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include "icl/patchlab.hpp"
#include "icl/tracer.hpp"

namespace icl::pipeline {

namespace {

constexpr int kStageVersion = 1;

const std::vector<std::pair<Stage, std::string>> kStageNames{
    {Stage::Train, "train"},       {Stage::HeadVectors, "headvectors"}, {Stage::Localize, "localize"},
    {Stage::Refine, "refine"},     {Stage::Subspace, "subspace"},       {Stage::Trace, "trace"},
    {Stage::Report, "report"}};

nlohmann::json heads_json(const std::vector<HeadId>& hs) {
  nlohmann::json a = nlohmann::json::array();
  for (const auto& h : hs) a.push_back({h.layer, h.head});
  return a;
}

std::vector<HeadId> heads_from_json(const nlohmann::json& a) {
  std::vector<HeadId> out;
  for (const auto& p : a) out.push_back({p.at(0).get<int>(), p.at(1).get<int>()});
  return out;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw StaleError("cannot read artifact " + p.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

nlohmann::json design_decisions(const Config& c) {
  return {{"prompt_separator_after_every_demo", true},
          {"train_objective", "answer cross-entropy + aux next-token loss"},
          {"aux_lm_weight", c.train.aux_lm_weight},
          {"analysis_space", "residual (post O_h)"},
          {"pca_centered", c.subspace.center},
          {"projection", "affine about the task-vector mean"},
          {"l1_subgradient", "+lambda on [0,1], projection absorbs it at 0"},
          {"coefficient_init", c.localize.optimizer.init},
          {"coefficient_weight_decay", c.localize.optimizer.weight_decay},
          {"hhat", "project onto basis then normalize"},
          {"trace_signal", "<basis^T O_h V_h z_t, hhat_k>"},
          {"degenerate_correlation_pairs", "skipped and counted"},
          {"mixed_k_prompts", "distinct k per demo"},
          {"fixture_readout_window", subspace::FixtureReadout::kWindow}};
}

struct Manifest {
  nlohmann::json doc = {{"format", 1}, {"stages", nlohmann::json::object()}};

  static Manifest load(const fs::path& dir) {
    Manifest m;
    const auto p = dir / "manifest.json";
    if (fs::exists(p)) {
      try {
        m.doc = nlohmann::json::parse(read_file(p));
      } catch (const nlohmann::json::exception& e) {
        throw StaleError("manifest " + p.string() + " is unreadable: " + e.what());
      }
    }
    return m;
  }
  void save(const fs::path& dir) const {
    std::ofstream out(dir / "manifest.json", std::ios::binary);
    out << doc.dump(2) << '\n';
  }
  const nlohmann::json* entry(Stage s) const {
    const auto& st = doc.at("stages");
    const auto it = st.find(to_string(s));
    return it == st.end() ? nullptr : &*it;
  }
};

/// Digest of everything that determines a stage's outputs besides its inputs.
std::string config_digest(const RunOptions& o) {
  nlohmann::json j = o.config.to_json();
  j["mode"] = o.fixture ? "fixture" : "model";
  return sha256_hex(j.dump());
}

void check_outputs(const fs::path& dir, const nlohmann::json& entry, const std::string& stage) {
  for (const auto& [rel, digest] : entry.at("outputs").items()) {
    const auto p = dir / rel;
    if (!fs::exists(p)) {
      throw StaleError("artifact " + rel + " of stage '" + stage + "' is missing (manifest sha256 " +
                       digest.get<std::string>() + ")");
    }
    const auto actual = file_sha256(p);
    if (actual != digest.get<std::string>()) {
      throw StaleError("artifact " + rel + " has sha256 " + actual + " but the manifest records " +
                       digest.get<std::string>());
    }
  }
}

void check_predecessor(const fs::path& dir, const Manifest& m, Stage pred, const std::string& cfg_digest) {
  const auto* e = m.entry(pred);
  const auto name = to_string(pred);
  if (!e) throw StaleError("required stage '" + name + "' has not been run in " + dir.string());
  if (e->at("config_sha256") != cfg_digest) {
    throw StaleError("stage '" + name + "' was run with config sha256 " + e->at("config_sha256").get<std::string>() +
                     ", current config is " + cfg_digest);
  }
  check_outputs(dir, *e, name);
}

bool entry_current(const fs::path& dir, const Manifest& m, Stage s, const std::string& cfg_digest) {
  const auto* e = m.entry(s);
  if (!e || e->at("config_sha256") != cfg_digest || e->value("stage_version", 0) != kStageVersion) return false;
  try {
    check_outputs(dir, *e, to_string(s));
    for (const auto& [rel, digest] : e->at("inputs").items())
      if (!fs::exists(dir / rel) || file_sha256(dir / rel) != digest.get<std::string>()) return false;
  } catch (const StaleError&) {
    return false;
  }
  return true;
}

struct Mode {
  corpus::IntRange x;
  corpus::IntRange k;
  std::size_t n_ood;
};

Mode mode_of(const RunOptions& o) {
  if (o.fixture) return {o.config.fixture.x, o.config.fixture.k, o.config.fixture.n_ood};
  return {o.config.family.x, o.config.family.k, o.config.n_ood_tasks};
}

class StageContext {
 public:
  StageContext(Stage s, const RunOptions& o) : stage_(s), opts_(o), dir_(o.run_dir), out_dir_(dir_ / to_string(s)) {}

  const RunOptions& opts() const { return opts_; }
  const Config& cfg() const { return opts_.config; }
  std::uint64_t seed(std::uint64_t salt) const { return corpus::mix_seed(cfg().seed, salt); }

  fs::path input(const std::string& rel) {
    const auto p = dir_ / rel;
    if (!fs::exists(p)) throw StaleError("missing input artifact " + rel);
    inputs_[rel] = file_sha256(p);
    return p;
  }

  nlohmann::json input_json(const std::string& rel) { return nlohmann::json::parse(read_file(input(rel))); }

  void write(const std::string& name, const std::string& content) {
    const auto p = out_dir_ / name;
    fs::create_directories(p.parent_path());
    std::ofstream out(p, std::ios::binary);
    out << content;
    out.close();
    if (!out) throw std::runtime_error("failed to write " + p.string());
    outputs_.push_back(p);
  }
  void write_json(const std::string& name, const nlohmann::json& j) { write(name, j.dump(2) + "\n"); }
  fs::path out_path(const std::string& name) {
    fs::create_directories(out_dir_);
    outputs_.push_back(out_dir_ / name);
    return out_dir_ / name;
  }

  void log(const std::string& line) const {
    if (opts_.log) *opts_.log << "[" << to_string(stage_) << "] " << line << '\n';
  }

  StageResult finish(Manifest& m, const std::string& cfg_digest, nlohmann::json summary, double elapsed) {
    nlohmann::json e;
    e["stage_version"] = kStageVersion;
    e["mode"] = opts_.fixture ? "fixture" : "model";
    e["config_sha256"] = cfg_digest;
    e["seed"] = cfg().seed;
    e["inputs"] = nlohmann::json::object();
    for (const auto& [rel, d] : inputs_) e["inputs"][rel] = d;
    e["outputs"] = nlohmann::json::object();
    for (const auto& p : outputs_) e["outputs"][fs::relative(p, dir_).generic_string()] = file_sha256(p);
    e["design_decisions"] = design_decisions(cfg());
    e["completed_at"] = utc_now();
    e["elapsed_seconds"] = elapsed;
    e["summary"] = summary;
    m.doc["stages"][to_string(stage_)] = e;
    m.doc["config"] = cfg().to_json();
    m.save(dir_);
    return {false, outputs_, std::move(summary)};
  }

  void clear_outputs() const { fs::remove_all(out_dir_); }

 private:
  Stage stage_;
  const RunOptions& opts_;
  fs::path dir_;
  fs::path out_dir_;
  std::map<std::string, std::string> inputs_;
  std::vector<fs::path> outputs_;
};

model::Checkpoint load_model(StageContext& ctx) {
  return model::load_checkpoint(ctx.input("train/checkpoint.iclt").string());
}

patchlab::HeadVectorTable load_table(StageContext& ctx) {
  return patchlab::HeadVectorTable::from_tensor_file(io::read_tensor_file(ctx.input("headvectors/table.iclt").string()));
}

// ---------------------------------------------------------------------------

nlohmann::json stage_train(StageContext& ctx) {
  if (ctx.opts().fixture) throw ConfigError("train: fixture mode has no model to train");
  const auto& c = ctx.cfg();
  auto hp = c.train;
  hp.seed = c.seed;
  std::ostringstream log;
  log.precision(10);
  model::Checkpoint ckpt;
  try {
    ckpt = model::train(c.model, c.family, hp, [&](const model::TrainLogEntry& e) {
      log << nlohmann::json{{"step", e.step}, {"loss", e.loss}, {"lr", e.lr}}.dump() << '\n';
      ctx.log("step " + std::to_string(e.step) + " loss " + std::to_string(e.loss));
    });
  } catch (const model::TrainingError& e) {
    throw NumericalError(e.what());
  }
  model::save_checkpoint(ctx.out_path("checkpoint.iclt").string(), ckpt);
  ctx.write("train_log.jsonl", log.str());
  const auto acc = patchlab::clean_accuracy(ckpt, c.family, c.family.k.values(), ctx.seed(0x11));
  ctx.write("clean_accuracy.csv", acc.to_csv());
  const double five_shot = ckpt.metadata.value("five_shot_accuracy", 0.0);
  nlohmann::json metrics{{"five_shot_accuracy", five_shot},
                         {"clean_accuracy", acc.to_json()},
                         {"target_accuracy", 0.90},
                         {"meets_target", five_shot >= 0.90},
                         {"final_train_loss", ckpt.metadata.value("final_train_loss", 0.0)},
                         {"steps", hp.steps},
                         {"model", c.model.to_json()}};
  ctx.write_json("metrics.json", metrics);
  ctx.log("five-shot accuracy " + std::to_string(five_shot));
  return metrics;
}

nlohmann::json stage_headvectors(StageContext& ctx) {
  const auto& c = ctx.cfg();
  patchlab::HeadVectorTable table;
  nlohmann::json summary;
  if (ctx.opts().fixture) {
    auto fx = subspace::make_planted_fixture(c.fixture);
    table = std::move(fx.table);
    summary["fixture"] = c.fixture.to_json();
    summary["planted_heads"] = heads_json(c.fixture.planted);
  } else {
    const auto ckpt = load_model(ctx);
    table = patchlab::compute_head_vectors(ckpt, c.family, c.family.k.values(), c.headvectors.prompts_per_task,
                                           ctx.seed(0x22));
  }
  io::write_tensor_file(ctx.out_path("table.iclt").string(), table.to_tensor_file());
  summary["n_tasks"] = table.tasks().size();
  summary["n_heads"] = table.heads().size();
  summary["d_model"] = table.d_model();
  ctx.write_json("headvectors.json", summary);
  return summary;
}

struct Analysis {
  std::unique_ptr<model::Checkpoint> ckpt;
  std::unique_ptr<subspace::PlantedFixture> fixture;
  std::unique_ptr<patchlab::InterventionModel> model;
};

Analysis make_analysis(StageContext& ctx) {
  Analysis a;
  if (ctx.opts().fixture) {
    a.fixture = std::make_unique<subspace::PlantedFixture>(subspace::make_planted_fixture(ctx.cfg().fixture));
    a.model = std::make_unique<subspace::FixtureReadout>(*a.fixture);
  } else {
    a.ckpt = std::make_unique<model::Checkpoint>(load_model(ctx));
    a.model = std::make_unique<patchlab::TransformerIntervention>(*a.ckpt, ctx.cfg().family.vocabulary());
  }
  return a;
}

corpus::TaskSplit task_split(const StageContext& ctx) {
  const auto m = mode_of(ctx.opts());
  return corpus::split_tasks(m.k, m.n_ood, ctx.seed(0x33));
}

nlohmann::json stage_localize(StageContext& ctx) {
  const auto& c = ctx.cfg();
  const auto table = load_table(ctx);
  auto an = make_analysis(ctx);
  const auto m = mode_of(ctx.opts());
  const auto split = task_split(ctx);
  const auto data = localizer::make_localization_data(split, m.x, c.localize.split, ctx.seed(0x44));
  auto oc = c.localize.optimizer;
  oc.seed = ctx.seed(0x55);
  localizer::CoefficientVector coef;
  try {
    coef = localizer::optimize(*an.model, table, data, oc);
  } catch (const localizer::OptimizationError& e) {
    throw NumericalError(e.what());
  }
  const auto sig = localizer::significant_heads(coef, oc.threshold);
  ctx.write("coefficients.csv", coef.heatmap_csv());
  ctx.write("optimization_log.jsonl", coef.log_jsonl());
  nlohmann::json summary{
      {"significant_heads", heads_json(sig)},
      {"threshold", oc.threshold},
      {"train_tasks", split.train},
      {"ood_tasks", split.ood},
      {"weighted_accuracy", {{"test", localizer::weighted_accuracy(*an.model, table, coef.c, data.test)},
                             {"ood", localizer::weighted_accuracy(*an.model, table, coef.c, data.ood)}}},
      {"unit_weight_accuracy", {{"test", localizer::unit_weight_accuracy(*an.model, table, sig, data.test)},
                                {"ood", localizer::unit_weight_accuracy(*an.model, table, sig, data.ood)}}}};
  if (ctx.opts().fixture) {
    auto planted = c.fixture.planted;
    std::sort(planted.begin(), planted.end());
    summary["recovered_planted_set"] = planted == sig;
  }
  ctx.write_json("localize.json", summary);
  ctx.log(std::to_string(sig.size()) + " significant heads");
  return summary;
}

nlohmann::json stage_refine(StageContext& ctx) {
  const auto& c = ctx.cfg();
  const auto table = load_table(ctx);
  const auto loc = ctx.input_json("localize/localize.json");
  const auto sig = heads_from_json(loc.at("significant_heads"));
  const auto train_tasks = loc.at("train_tasks").get<std::vector<int>>();
  auto an = make_analysis(ctx);
  const auto m = mode_of(ctx.opts());

  nlohmann::json summary{{"significant_heads", heads_json(sig)}};
  std::vector<localizer::LayerScanRow> layer_rows;
  std::vector<localizer::HeadScaleResult> scale_rows;
  std::vector<HeadId> top;
  if (!sig.empty()) {
    layer_rows = localizer::layer_ablation_scan(*an.model, table, sig, localizer::default_layer_subsets(sig),
                                                train_tasks, m.x);
    scale_rows = localizer::head_scale_scan(*an.model, table, sig, sig, c.refine.coeff_min, c.refine.coeff_max,
                                            train_tasks, m.x);
    auto ranked = scale_rows;
    std::stable_sort(ranked.begin(), ranked.end(),
                     [](const auto& a, const auto& b) { return a.best_accuracy > b.best_accuracy; });
    for (std::size_t i = 0; i < std::min(c.refine.top_heads, ranked.size()); ++i) top.push_back(ranked[i].head);
  }
  ctx.write("layer_scan.csv", localizer::layer_scan_csv(layer_rows));
  ctx.write("head_scale.csv", localizer::head_scale_csv(scale_rows));

  nlohmann::json best = nlohmann::json::array();
  for (const auto& r : scale_rows)
    best.push_back({{"head", {r.head.layer, r.head.head}}, {"coeff", r.best_coeff}, {"accuracy", r.best_accuracy}});
  summary["head_scale_best"] = best;
  summary["top_heads"] = heads_json(top);

  // top-n recipes: keep the first n top heads, ablate the other significant heads
  nlohmann::json topn = nlohmann::json::array();
  for (std::size_t n = 1; n <= top.size(); ++n) {
    patchlab::FvRecipe r;
    r.kept.assign(top.begin(), top.begin() + static_cast<std::ptrdiff_t>(n));
    for (const auto& h : sig)
      if (std::find(r.kept.begin(), r.kept.end(), h) == r.kept.end()) r.ablated.push_back(h);
    const auto acc = patchlab::intervention_accuracy(
        *an.model, [&](int k) { return patchlab::build_fv(table, k, r).vector; }, train_tasks, m.x);
    topn.push_back({{"n", n}, {"accuracy", acc.mean}, {"recipe", r.to_json()}});
  }
  summary["top_n_accuracy"] = topn;

  std::ostringstream abl;
  abl.precision(17);
  abl << "set,heads,accuracy\n";
  if (an.ckpt && !top.empty()) {
    const auto tasks = c.family.k.values();
    auto fmt = [](const std::vector<HeadId>& hs) {
      std::string s;
      for (const auto& h : hs) s += (s.empty() ? "" : ";") + std::to_string(h.layer) + "." + std::to_string(h.head);
      return s;
    };
    const auto clean = patchlab::clean_accuracy(*an.ckpt, c.family, tasks, ctx.seed(0x66));
    abl << "clean,," << clean.mean << '\n';
    const auto ablated = patchlab::five_shot_head_ablation(*an.ckpt, table, top, c.family, tasks, ctx.seed(0x66));
    abl << "top,\"" << fmt(top) << "\"," << ablated.mean << '\n';
    std::vector<HeadId> pool;
    for (const auto& h : table.heads())
      if (std::find(top.begin(), top.end(), h) == top.end()) pool.push_back(h);
    const auto sets = patchlab::random_head_sets(pool, top.size(), c.refine.random_sets, ctx.seed(0x77));
    std::vector<double> rand_acc;
    for (std::size_t i = 0; i < sets.size(); ++i) {
      const auto r = patchlab::five_shot_head_ablation(*an.ckpt, table, sets[i], c.family, tasks, ctx.seed(0x66));
      rand_acc.push_back(r.mean);
      abl << "random_" << i << ",\"" << fmt(sets[i]) << "\"," << r.mean << '\n';
    }
    summary["five_shot_ablation"] = {{"clean", clean.mean}, {"top_heads", ablated.mean}, {"random_sets", rand_acc}};
  }
  ctx.write("head_ablation.csv", abl.str());
  ctx.write_json("refine.json", summary);
  return summary;
}

std::string fmt_csv_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

nlohmann::json stage_subspace(StageContext& ctx) {
  const auto& c = ctx.cfg();
  const auto table = load_table(ctx);
  const auto ref = ctx.input_json("refine/refine.json");
  const auto top = heads_from_json(ref.at("top_heads"));
  const auto sig = heads_from_json(ref.at("significant_heads"));
  auto an = make_analysis(ctx);
  const auto m = mode_of(ctx.opts());
  const auto tasks = table.tasks();

  std::ostringstream ev, coords_csv, trig_csv, causal_csv;
  ev << "layer,head,component,ratio,cumulative\n";
  coords_csv << "layer,head,k,component,value\n";
  trig_csv << "layer,head,period,phase,r2,selected\n";
  causal_csv << "layer,head,subspace,mode,k,unit_digit_error,final_answer_error\n";
  io::TensorFile bases;
  bases.metadata = {{"kind", "subspace_bases"}};
  nlohmann::json heads_summary = nlohmann::json::array();

  for (const auto& h : top) {
    const std::string tag = std::to_string(h.layer) + "," + std::to_string(h.head) + ",";
    subspace::SubspaceBasis basis;
    try {
      basis = subspace::fit_task_subspace(table.task_means(h), c.subspace.variance_target, c.subspace.center, h);
    } catch (const numkit::RankError& e) {
      throw NumericalError(std::string("subspace for head ") + h.str() + ": " + e.what());
    }
    double cum = 0.0;
    for (std::size_t j = 0; j < basis.explained_variance.size(); ++j) {
      cum += basis.explained_variance[j];
      ev << tag << j << ',' << fmt_csv_double(basis.explained_variance[j]) << ',' << fmt_csv_double(cum) << '\n';
    }
    const auto coords = subspace::coordinate_functions(basis, table.task_means(h));
    for (std::size_t i = 0; i < coords.rows(); ++i)
      for (std::size_t j = 0; j < coords.cols(); ++j)
        coords_csv << tag << tasks[i] << ',' << j << ',' << fmt_csv_double(coords(i, j)) << '\n';

    nlohmann::json hs{{"head", {h.layer, h.head}},
                      {"rank", basis.rank()},
                      {"cumulative_variance", basis.cumulative_variance()}};
    subspace::TrigFitResult fit;
    if (coords.rows() >= coords.cols() + 2) {
      fit = subspace::fit_trig_features(coords, tasks, c.subspace.trig, &basis);
    } else {
      fit.failure = "too few tasks for the trigonometric regression";
    }
    std::set<std::pair<double, double>> chosen;
    for (const auto& f : fit.features) chosen.insert({f.period, f.phase});
    for (const auto& cand : fit.candidates)
      trig_csv << tag << fmt_csv_double(cand.period) << ',' << fmt_csv_double(cand.phase) << ','
               << fmt_csv_double(cand.r2) << ',' << (chosen.contains({cand.period, cand.phase}) ? 1 : 0) << '\n';
    const auto dec = subspace::decompose_features(fit.features);
    hs["periods"] = fit.periods();
    hs["trig_complete"] = fit.complete;
    hs["trig_failure"] = fit.failure;
    hs["matches_expected_periods"] = dec.matches_expected;
    hs["warnings"] = dec.warnings;
    hs["unit_dim"] = dec.unit_basis.cols();
    hs["magnitude_dim"] = dec.magnitude_basis.cols();

    // The planted heads are redundant copies of one signal, so on the fixture
    // the probed head is tested alone at its best scale; on a model the other
    // top heads stay intact.
    patchlab::FvRecipe recipe;
    if (ctx.opts().fixture) {
      recipe.kept = {h};
      for (const auto& b : ref.at("head_scale_best"))
        if (heads_from_json(nlohmann::json::array({b.at("head")})).front() == h) recipe.coeffs[h] = b.at("coeff");
    } else {
      recipe.kept = top;
    }
    for (const auto& s : sig)
      if (std::find(recipe.kept.begin(), recipe.kept.end(), s) == recipe.kept.end()) recipe.ablated.push_back(s);

    std::vector<std::pair<std::string, const numkit::Matrix*>> parts{{"full", &basis.basis}};
    if (dec.unit_basis.cols() > 0) parts.push_back({"unit", &dec.unit_basis});
    if (dec.magnitude_basis.cols() > 0) parts.push_back({"magnitude", &dec.magnitude_basis});
    nlohmann::json causal = nlohmann::json::object();
    for (const auto& [name, part] : parts) {
      for (auto mode : {subspace::ProjectionMode::Onto, subspace::ProjectionMode::OutOf}) {
        const std::string mode_name = mode == subspace::ProjectionMode::Onto ? "onto" : "out_of";
        const auto rows =
            subspace::causal_subspace_test(*an.model, table, h, *part, basis.mean, mode, recipe, tasks, m.x);
        double unit_err = 0.0, final_err = 0.0;
        for (const auto& r : rows) {
          causal_csv << tag << name << ',' << mode_name << ',' << r.k << ',' << fmt_csv_double(r.unit_digit_error) << ','
                     << fmt_csv_double(r.final_answer_error) << '\n';
          unit_err += r.unit_digit_error / static_cast<double>(rows.size());
          final_err += r.final_answer_error / static_cast<double>(rows.size());
        }
        causal[name + "_" + mode_name] = {{"unit_digit_error", unit_err}, {"final_answer_error", final_err}};
      }
    }
    hs["causal"] = causal;
    hs["causal_recipe"] = recipe.to_json();

    if (an.fixture && an.fixture->planted_maps.contains(h) && dec.unit_basis.cols() > 0) {
      const auto overlap = numkit::singular_values(
          numkit::matmul(an.fixture->planted_unit_span(h).transpose(), dec.unit_basis));
      hs["planted_unit_overlap_min_sv"] = overlap.empty() ? 0.0 : overlap.back();
    }

    const auto suffix = std::to_string(h.layer) + "." + std::to_string(h.head);
    bases.tensors.push_back({"basis." + suffix, {basis.basis.rows(), basis.basis.cols()}, io::Dtype::F64,
                             std::vector<double>(basis.basis.data().begin(), basis.basis.data().end())});
    bases.tensors.push_back({"mean." + suffix, {basis.mean.size()}, io::Dtype::F64, basis.mean});
    heads_summary.push_back(hs);
  }
  ctx.write("explained_variance.csv", ev.str());
  ctx.write("coordinates.csv", coords_csv.str());
  ctx.write("trig_fit.csv", trig_csv.str());
  ctx.write("causal.csv", causal_csv.str());
  io::write_tensor_file(ctx.out_path("bases.iclt").string(), bases);
  nlohmann::json summary{{"heads", heads_summary}, {"variance_target", c.subspace.variance_target}};
  ctx.write_json("subspace.json", summary);
  return summary;
}

subspace::SubspaceBasis basis_from_file(const io::TensorFile& f, HeadId h) {
  const auto suffix = std::to_string(h.layer) + "." + std::to_string(h.head);
  const auto& b = f.get("basis." + suffix);
  const auto& mean = f.get("mean." + suffix);
  subspace::SubspaceBasis out;
  out.head = h;
  out.basis = numkit::Matrix(b.dims.at(0), b.dims.at(1), b.values);
  out.mean = mean.values;
  return out;
}

nlohmann::json stage_trace(StageContext& ctx) {
  const auto& c = ctx.cfg();
  const auto ref = ctx.input_json("refine/refine.json");
  const auto top = heads_from_json(ref.at("top_heads"));
  std::vector<tracer::CorrelationReport> reports;
  std::vector<tracer::ExtractionProfile> extraction;
  std::vector<tracer::DirectionProfile> direction;
  nlohmann::json heads_summary = nlohmann::json::array();

  if (ctx.opts().fixture) {
    // the planted table carries no token-level activations; trace the planted signal oracle
    const auto tasks = c.fixture.k.values();
    const HeadId h = top.empty() ? HeadId{} : top.front();
    auto planted = tracer::correlation_report(
        tracer::planted_signals(tasks, c.trace.correlation_prompts, true, ctx.seed(0x88)), h);
    planted.source = "planted_sum_to_zero";
    auto control = tracer::correlation_report(
        tracer::planted_signals(tasks, c.trace.correlation_prompts, false, ctx.seed(0x99)), h);
    control.source = "planted_independent";
    reports = {planted, control};
  } else {
    const auto ckpt = load_model(ctx);
    const auto table = load_table(ctx);
    const auto bases = io::read_tensor_file(ctx.input("subspace/bases.iclt").string());
    const auto vocab = c.family.vocabulary();
    const auto mixed = corpus::gen_mixed_prompts(c.trace.mixed_prompts, c.family.x, c.family.k, ctx.seed(0xAA));
    for (const auto& h : top) {
      const auto basis = basis_from_file(bases, h);
      std::size_t norm_peaks = 0, alpha_peaks = 0, matches = 0, demos = 0;
      for (std::size_t p = 0; p < mixed.size(); ++p) {
        const auto prompt = corpus::render(mixed[p], vocab);
        auto ex = tracer::extraction_profile(ckpt, prompt, h, basis.basis);
        ex.prompt = p;
        norm_peaks += ex.norm_peaks_at_y;
        alpha_peaks += ex.alpha_peaks_at_y;
        extraction.push_back(std::move(ex));
        auto dp = tracer::direction_profile(ckpt, mixed[p], vocab, h, basis, table);
        dp.prompt = p;
        matches += dp.matches;
        demos += dp.demo_k.size();
        direction.push_back(std::move(dp));
      }
      auto rep = tracer::self_correction_stats(ckpt, h, basis, table, c.family, table.tasks(),
                                               c.trace.correlation_prompts, ctx.seed(0xBB));
      const double n = std::max<std::size_t>(1, mixed.size());
      heads_summary.push_back({{"head", {h.layer, h.head}},
                               {"norm_peaks_at_y_fraction", norm_peaks / n},
                               {"alpha_peaks_at_y_fraction", alpha_peaks / n},
                               {"direction_argmax_match_fraction",
                                demos ? static_cast<double>(matches) / static_cast<double>(demos) : 0.0}});
      reports.push_back(std::move(rep));
    }
  }
  ctx.write("extraction.csv", tracer::extraction_csv(extraction));
  ctx.write("direction.csv", tracer::direction_csv(direction));
  ctx.write("correlation_pairs.csv", tracer::correlation_pairs_csv(reports));
  ctx.write("correlation_summary.csv", tracer::correlation_summary_csv(reports));
  nlohmann::json corr = nlohmann::json::array();
  for (const auto& r : reports) corr.push_back(r.to_json());
  nlohmann::json summary{{"heads", heads_summary}, {"correlation", corr}};
  ctx.write_json("trace.json", summary);
  return summary;
}

struct BundleKind {
  std::string kind;
  Stage stage;
  std::string source;  // relative to the run dir
  std::vector<std::string> columns;
  std::string description;
};

const std::vector<BundleKind>& bundle_kinds() {
  static const std::vector<BundleKind> kinds{
      {"clean_accuracy", Stage::Train, "train/clean_accuracy.csv", {"task", "k", "accuracy"},
       "five-shot clean accuracy per task"},
      {"coefficient_heatmap", Stage::Localize, "localize/coefficients.csv", {"layer", "head", "c"},
       "learned head coefficients"},
      {"optimization_log", Stage::Localize, "localize/optimization_log.jsonl",
       {"epoch", "train_loss", "val_acc", "ood_acc", "nnz_above_threshold"}, "per-epoch localization log"},
      {"layer_scan", Stage::Refine, "refine/layer_scan.csv", {"layers", "n_kept", "accuracy"},
       "intervention accuracy keeping significant heads in a layer subset"},
      {"head_scale", Stage::Refine, "refine/head_scale.csv", {"layer", "head", "coeff", "accuracy", "is_best"},
       "single-head scaling scan"},
      {"head_ablation", Stage::Refine, "refine/head_ablation.csv", {"set", "heads", "accuracy"},
       "five-shot accuracy with head outputs replaced by their overall means"},
      {"explained_variance", Stage::Subspace, "subspace/explained_variance.csv",
       {"layer", "head", "component", "ratio", "cumulative"}, "PCA explained variance of task vectors"},
      {"coordinates", Stage::Subspace, "subspace/coordinates.csv", {"layer", "head", "k", "component", "value"},
       "principal-component coordinates as functions of k"},
      {"trig_fit", Stage::Subspace, "subspace/trig_fit.csv", {"layer", "head", "period", "phase", "r2", "selected"},
       "cosine regression over the period/phase grid"},
      {"causal", Stage::Subspace, "subspace/causal.csv",
       {"layer", "head", "subspace", "mode", "k", "unit_digit_error", "final_answer_error"},
       "onto/out-of subspace projection errors"},
      {"extraction", Stage::Trace, "trace/extraction.csv",
       {"layer", "head", "prompt", "position", "token", "is_y", "norm", "alpha"},
       "per-position extraction strength and attention"},
      {"direction", Stage::Trace, "trace/direction.csv", {"layer", "head", "prompt", "demo", "demo_k", "k", "inner"},
       "inner products of extracted vectors with projected task directions"},
      {"correlation_pairs", Stage::Trace, "trace/correlation_pairs.csv",
       {"source", "layer", "head", "k", "i", "j", "r"}, "pairwise demo-signal correlations"},
      {"correlation_summary", Stage::Trace, "trace/correlation_summary.csv",
       {"source", "layer", "head", "k", "neg_sum", "pos_sum", "skipped"}, "per-task correlation sums"},
  };
  return kinds;
}

std::string jsonl_to_csv(const std::string& jsonl, const std::vector<std::string>& columns) {
  std::ostringstream os;
  os.precision(17);
  for (std::size_t i = 0; i < columns.size(); ++i) os << (i ? "," : "") << columns[i];
  os << '\n';
  std::istringstream in(jsonl);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    for (std::size_t i = 0; i < columns.size(); ++i) {
      os << (i ? "," : "");
      const auto& v = j.at(columns[i]);
      if (v.is_number_float()) os << v.get<double>();
      else os << v.dump();
    }
    os << '\n';
  }
  return os.str();
}

nlohmann::json stage_report(StageContext& ctx, const Manifest& m, const std::string& cfg_digest) {
  const auto& dir = ctx.opts().run_dir;
  std::vector<Stage> done;
  for (const auto& [s, name] : kStageNames) {
    if (s == Stage::Report || !m.entry(s)) continue;
    check_predecessor(dir, m, s, cfg_digest);
    done.push_back(s);
  }
  if (done.empty()) {
    std::string req;
    for (const auto& [s, name] : kStageNames)
      if (s != Stage::Report) req += (req.empty() ? "" : ", ") + name;
    throw StaleError("no completed stages in " + dir.string() + "; run at least one of: " + req);
  }
  nlohmann::json files = nlohmann::json::array();
  for (const auto& k : bundle_kinds()) {
    if (std::find(done.begin(), done.end(), k.stage) == done.end() || !fs::exists(dir / k.source)) continue;
    std::string content = read_file(ctx.input(k.source));
    if (k.source.ends_with(".jsonl")) content = jsonl_to_csv(content, k.columns);
    ctx.write("bundle/" + k.kind + ".csv", content);
    const auto rows = std::count(content.begin(), content.end(), '\n') - 1;
    files.push_back({{"kind", k.kind}, {"file", k.kind + ".csv"}, {"rows", rows}});
  }
  nlohmann::json summaries = nlohmann::json::object();
  for (auto s : done) {
    const auto name = to_string(s);
    summaries[name] = m.entry(s)->at("summary");
  }
  nlohmann::json index{{"schema_version", 1},
                       {"mode", ctx.opts().fixture ? "fixture" : "model"},
                       {"config_sha256", cfg_digest},
                       {"files", files},
                       {"summaries", summaries}};
  ctx.write_json("bundle/bundle.json", index);
  ctx.write_json("bundle/schema.json", bundle_schema());
  const auto problems = validate_bundle(dir / "report" / "bundle");
  if (!problems.empty()) throw std::runtime_error("bundle failed schema validation: " + problems.front());
  return {{"files", files.size()}, {"stages", summaries.size()}};
}

}  // namespace

// ---------------------------------------------------------------------------

Config Config::defaults() {
  Config c;
  c.model.vocab_size = c.family.y_max() + 5;
  c.train.steps = 4000;
  return c;
}

void Config::apply_full_scale() {
  family = {{1, 100}, {1, 30}};
  n_ood_tasks = 5;
  model.vocab_size = family.y_max() + 5;
}

void Config::validate() const {
  if (family.x.lo < 0 || family.x.hi < family.x.lo || family.k.lo < 0 || family.k.hi < family.k.lo)
    throw ConfigError("task_family: ranges must be nonnegative and ordered");
  if (static_cast<int>(n_ood_tasks) >= family.k.size()) throw ConfigError("n_ood_tasks must leave at least one training task");
  if (model.vocab_size != family.y_max() + 5)
    throw ConfigError("model.vocab_size must be " + std::to_string(family.y_max() + 5) + " for this task family");
  if (model.max_seq_len < 4 * corpus::kShots + 3) throw ConfigError("model.max_seq_len too short for five-shot prompts");
  try {
    model.validate();
    localize.optimizer.validate();
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  if (train.steps < 0 || train.batch_size <= 0) throw ConfigError("train: steps >= 0 and batch_size > 0 required");
  if (std::abs(localize.split[0] + localize.split[1] + localize.split[2] - 1.0) > 1e-9)
    throw ConfigError("localize.split must sum to 1");
  if (refine.coeff_max < refine.coeff_min) throw ConfigError("refine: coeff_max < coeff_min");
  if (!(subspace.variance_target > 0.0 && subspace.variance_target <= 1.0))
    throw ConfigError("subspace.variance_target must lie in (0, 1]");
  if (trace.correlation_prompts < 2) throw ConfigError("trace.correlation_prompts must be >= 2");
  if (static_cast<int>(fixture.n_ood) >= fixture.k.size()) throw ConfigError("fixture.n_ood must leave training tasks");
}

nlohmann::json Config::to_json() const {
  auto opt = localize.optimizer.to_json();
  opt.erase("seed");
  return {{"seed", seed},
          {"task_family", {{"x_min", family.x.lo}, {"x_max", family.x.hi}, {"k_min", family.k.lo}, {"k_max", family.k.hi}}},
          {"n_ood_tasks", n_ood_tasks},
          {"model", model.to_json()},
          {"train", train.to_json()},
          {"headvectors", {{"prompts_per_task", headvectors.prompts_per_task}}},
          {"localize", {{"optimizer", opt}, {"split", localize.split}}},
          {"refine",
           {{"coeff_min", refine.coeff_min},
            {"coeff_max", refine.coeff_max},
            {"top_heads", refine.top_heads},
            {"random_sets", refine.random_sets}}},
          {"subspace",
           {{"variance_target", subspace.variance_target}, {"center", subspace.center}, {"trig", subspace.trig.to_json()}}},
          {"trace", {{"correlation_prompts", trace.correlation_prompts}, {"mixed_prompts", trace.mixed_prompts}}},
          {"fixture", fixture.to_json()}};
}

Config Config::from_json(const nlohmann::json& j) {
  static const std::set<std::string> known{"seed",    "task_family", "n_ood_tasks", "model",   "train",  "headvectors",
                                           "localize", "refine",     "subspace",    "trace",   "fixture", "full_scale"};
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  for (const auto& [key, _] : j.items())
    if (!known.contains(key)) throw ConfigError("unknown config key '" + key + "'");
  try {
    Config c = defaults();
    c.seed = j.value("seed", c.seed);
    if (j.value("full_scale", false)) c.apply_full_scale();
    if (j.contains("task_family")) {
      const auto& f = j["task_family"];
      c.family.x = {f.value("x_min", c.family.x.lo), f.value("x_max", c.family.x.hi)};
      c.family.k = {f.value("k_min", c.family.k.lo), f.value("k_max", c.family.k.hi)};
    }
    c.n_ood_tasks = j.value("n_ood_tasks", c.n_ood_tasks);
    auto model_json = c.model.to_json();
    if (j.contains("model")) model_json.update(j["model"]);
    if (!j.contains("model") || !j["model"].contains("vocab_size")) model_json["vocab_size"] = c.family.y_max() + 5;
    c.model = model::ModelConfig::from_json(model_json);
    if (j.contains("train")) {
      auto t = c.train.to_json();
      t.update(j["train"]);
      c.train = model::TrainConfig::from_json(t);
    }
    if (j.contains("headvectors"))
      c.headvectors.prompts_per_task = j["headvectors"].value("prompts_per_task", c.headvectors.prompts_per_task);
    if (j.contains("localize")) {
      const auto& l = j["localize"];
      if (l.contains("optimizer")) c.localize.optimizer = localizer::OptimizerConfig::from_json(l["optimizer"]);
      c.localize.split = l.value("split", c.localize.split);
    }
    if (j.contains("refine")) {
      const auto& r = j["refine"];
      c.refine.coeff_min = r.value("coeff_min", c.refine.coeff_min);
      c.refine.coeff_max = r.value("coeff_max", c.refine.coeff_max);
      c.refine.top_heads = r.value("top_heads", c.refine.top_heads);
      c.refine.random_sets = r.value("random_sets", c.refine.random_sets);
    }
    if (j.contains("subspace")) {
      const auto& s = j["subspace"];
      c.subspace.variance_target = s.value("variance_target", c.subspace.variance_target);
      c.subspace.center = s.value("center", c.subspace.center);
      if (s.contains("trig")) c.subspace.trig = subspace::TrigFitConfig::from_json(s["trig"]);
    }
    if (j.contains("trace")) {
      const auto& t = j["trace"];
      c.trace.correlation_prompts = t.value("correlation_prompts", c.trace.correlation_prompts);
      c.trace.mixed_prompts = t.value("mixed_prompts", c.trace.mixed_prompts);
    }
    if (j.contains("fixture")) c.fixture = subspace::FixtureConfig::from_json(j["fixture"]);
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
}

Config load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
  return Config::from_json(j);
}

std::string to_string(Stage s) {
  for (const auto& [st, name] : kStageNames)
    if (st == s) return name;
  return "?";
}

Stage stage_from_string(const std::string& name) {
  for (const auto& [st, n] : kStageNames)
    if (n == name) return st;
  throw ConfigError("unknown stage '" + name + "'");
}

std::vector<Stage> predecessors(Stage s) {
  switch (s) {
    case Stage::Train: return {};
    case Stage::HeadVectors: return {Stage::Train};
    case Stage::Localize: return {Stage::Train, Stage::HeadVectors};
    case Stage::Refine: return {Stage::Train, Stage::HeadVectors, Stage::Localize};
    case Stage::Subspace: return {Stage::Train, Stage::HeadVectors, Stage::Refine};
    case Stage::Trace: return {Stage::Train, Stage::HeadVectors, Stage::Refine, Stage::Subspace};
    case Stage::Report: return {};
  }
  return {};
}

StageResult run_stage(Stage stage, const RunOptions& options) {
  options.config.validate();
  fs::create_directories(options.run_dir);
  auto manifest = Manifest::load(options.run_dir);
  const auto digest = config_digest(options);

  for (auto p : predecessors(stage)) {
    if (options.fixture && p == Stage::Train) continue;
    check_predecessor(options.run_dir, manifest, p, digest);
  }
  if (options.reuse && stage != Stage::Report && entry_current(options.run_dir, manifest, stage, digest)) {
    if (options.log) *options.log << "[" << to_string(stage) << "] up to date, skipped\n";
    return {true, {}, manifest.entry(stage)->at("summary")};
  }

  StageContext ctx(stage, options);
  ctx.clear_outputs();
  const auto t0 = std::chrono::steady_clock::now();
  nlohmann::json summary;
  try {
    switch (stage) {
      case Stage::Train: summary = stage_train(ctx); break;
      case Stage::HeadVectors: summary = stage_headvectors(ctx); break;
      case Stage::Localize: summary = stage_localize(ctx); break;
      case Stage::Refine: summary = stage_refine(ctx); break;
      case Stage::Subspace: summary = stage_subspace(ctx); break;
      case Stage::Trace: summary = stage_trace(ctx); break;
      case Stage::Report: summary = stage_report(ctx, manifest, digest); break;
    }
  } catch (const numkit::RankError& e) {
    throw NumericalError(e.what());
  } catch (const numkit::DegenerateCorrelationError& e) {
    throw NumericalError(e.what());
  }
  const double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return ctx.finish(manifest, digest, std::move(summary), elapsed);
}

std::string sha256_hex(std::string_view data) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), md, &len, EVP_sha256(), nullptr) != 1)
    throw std::runtime_error("sha256 failed");
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
  return os.str();
}

std::string file_sha256(const fs::path& path) { return sha256_hex(read_file(path)); }

nlohmann::json bundle_schema() {
  nlohmann::json kinds = nlohmann::json::object();
  for (const auto& k : bundle_kinds()) {
    kinds[k.kind] = {{"file", k.kind + ".csv"},
                     {"stage", to_string(k.stage)},
                     {"columns", k.columns},
                     {"description", k.description}};
  }
  return {{"schema_version", 1},
          {"index", "bundle.json"},
          {"index_fields", {"schema_version", "mode", "config_sha256", "files", "summaries"}},
          {"kinds", kinds}};
}

std::vector<std::string> validate_bundle(const fs::path& bundle_dir) {
  std::vector<std::string> problems;
  const auto schema = bundle_schema();
  const auto index_path = bundle_dir / "bundle.json";
  if (!fs::exists(index_path)) return {"missing bundle.json"};
  nlohmann::json index;
  try {
    index = nlohmann::json::parse(read_file(index_path));
  } catch (const std::exception& e) {
    return {std::string("bundle.json unreadable: ") + e.what()};
  }
  for (const auto& f : schema["index_fields"])
    if (!index.contains(f.get<std::string>())) problems.push_back("bundle.json lacks field " + f.get<std::string>());
  if (!index.contains("files")) return problems;
  for (const auto& entry : index["files"]) {
    const auto kind = entry.value("kind", "");
    if (!schema["kinds"].contains(kind)) {
      problems.push_back("unknown kind '" + kind + "'");
      continue;
    }
    const auto& spec = schema["kinds"][kind];
    const auto p = bundle_dir / spec["file"].get<std::string>();
    if (!fs::exists(p)) {
      problems.push_back("missing file " + p.filename().string());
      continue;
    }
    std::ifstream in(p);
    std::string header;
    std::getline(in, header);
    std::string expected;
    for (const auto& c : spec["columns"]) expected += (expected.empty() ? "" : ",") + c.get<std::string>();
    if (header != expected) problems.push_back(kind + ": header '" + header + "' != '" + expected + "'");
  }
  return problems;
}

}  // namespace icl::pipeline
