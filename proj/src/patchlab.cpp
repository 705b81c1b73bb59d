#include "icl/patchlab.hpp"

#include <algorithm>
#include <random>
#include <set>
#include <sstream>

namespace icl::patchlab {

HeadVectorTable::HeadVectorTable(int n_layers, int n_heads, int d_model, std::vector<int> tasks)
    : n_layers_(n_layers), n_heads_(n_heads), d_model_(d_model), tasks_(std::move(tasks)) {
  if (n_layers <= 0 || n_heads <= 0 || d_model <= 0) throw std::invalid_argument("HeadVectorTable: sizes must be positive");
  if (tasks_.empty()) throw std::invalid_argument("HeadVectorTable: no tasks");
  const auto n = static_cast<std::size_t>(n_layers * n_heads);
  task_means_.assign(n, Matrix(tasks_.size(), static_cast<std::size_t>(d_model)));
  overall_.assign(n, Vector(static_cast<std::size_t>(d_model), 0.0));
}

std::size_t HeadVectorTable::task_index(int k) const {
  const auto it = std::find(tasks_.begin(), tasks_.end(), k);
  if (it == tasks_.end()) throw std::out_of_range("task " + std::to_string(k) + " not in head vector table");
  return static_cast<std::size_t>(std::distance(tasks_.begin(), it));
}

bool HeadVectorTable::has_task(int k) const { return std::find(tasks_.begin(), tasks_.end(), k) != tasks_.end(); }

std::vector<HeadId> HeadVectorTable::heads() const {
  std::vector<HeadId> out;
  for (int l = 0; l < n_layers_; ++l)
    for (int h = 0; h < n_heads_; ++h) out.push_back({l, h});
  return out;
}

void HeadVectorTable::check_head(HeadId h) const {
  if (h.layer < 0 || h.layer >= n_layers_ || h.head < 0 || h.head >= n_heads_) {
    throw model::HeadIdError("unknown head " + h.str());
  }
}

std::size_t HeadVectorTable::flat(HeadId h) const {
  check_head(h);
  return static_cast<std::size_t>(h.layer * n_heads_ + h.head);
}

const Matrix& HeadVectorTable::task_means(HeadId h) const { return task_means_[flat(h)]; }
Matrix& HeadVectorTable::task_means(HeadId h) { return task_means_[flat(h)]; }

std::span<const double> HeadVectorTable::task_mean(HeadId h, int k) const {
  return task_means_[flat(h)].row(task_index(k));
}

const Vector& HeadVectorTable::overall_mean(HeadId h) const { return overall_[flat(h)]; }

void HeadVectorTable::recompute_overall_means() {
  for (std::size_t i = 0; i < task_means_.size(); ++i) overall_[i] = numkit::column_mean(task_means_[i]);
}

io::TensorFile HeadVectorTable::to_tensor_file() const {
  io::TensorFile file;
  for (const auto h : heads()) {
    const auto& m = task_means(h);
    const std::string p = "head." + std::to_string(h.layer) + "." + std::to_string(h.head);
    file.tensors.push_back({p + ".task_means", {m.rows(), m.cols()}, io::Dtype::F64, m.storage()});
    const auto& o = overall_mean(h);
    file.tensors.push_back({p + ".overall_mean", {o.size()}, io::Dtype::F64, o});
  }
  file.metadata = {{"kind", "head_vector_table"}, {"n_layers", n_layers_}, {"n_heads", n_heads_},
                   {"d_model", d_model_},         {"tasks", tasks_},       {"provenance", provenance}};
  return file;
}

HeadVectorTable HeadVectorTable::from_tensor_file(const io::TensorFile& file) {
  const auto& md = file.metadata;
  if (md.value("kind", "") != "head_vector_table") throw io::FormatError("not a head vector table");
  HeadVectorTable t(md.at("n_layers").get<int>(), md.at("n_heads").get<int>(), md.at("d_model").get<int>(),
                    md.at("tasks").get<std::vector<int>>());
  t.provenance = md.value("provenance", nlohmann::json::object());
  for (const auto h : t.heads()) {
    const std::string p = "head." + std::to_string(h.layer) + "." + std::to_string(h.head);
    const auto& tm = file.get(p + ".task_means");
    const auto& om = file.get(p + ".overall_mean");
    auto& m = t.task_means(h);
    if (tm.values.size() != m.storage().size() || om.values.size() != static_cast<std::size_t>(t.d_model())) {
      throw io::FormatError("tensor shapes for head " + h.str() + " do not match table metadata");
    }
    m = Matrix(m.rows(), m.cols(), tm.values);
    t.overall_[t.flat(h)] = om.values;
  }
  return t;
}

HeadVectorTable compute_head_vectors(const model::Checkpoint& ckpt, const corpus::TaskFamily& family,
                                     const std::vector<int>& tasks, std::size_t n_prompts_per_task,
                                     std::uint64_t seed) {
  const auto& cfg = ckpt.config;
  HeadVectorTable table(cfg.n_layers, cfg.n_heads, cfg.d_model, tasks);
  const auto vocab = family.vocabulary();
  for (std::size_t ti = 0; ti < tasks.size(); ++ti) {
    const int k = tasks[ti];
    const auto prompts = corpus::gen_task_prompts(k, n_prompts_per_task, family.x, seed);
    for (const auto& spec : prompts) {
      const auto rendered = corpus::render(spec, vocab);
      model::ActivationTape tape;
      model::forward(ckpt, rendered.tokens, &tape);
      for (int l = 0; l < cfg.n_layers; ++l) {
        const auto& out = tape.layers[static_cast<std::size_t>(l)].head_out_last;
        for (int h = 0; h < cfg.n_heads; ++h) {
          auto row = table.task_means({l, h}).row(ti);
          for (int j = 0; j < cfg.d_model; ++j) row[static_cast<std::size_t>(j)] += out(h, j);
        }
      }
    }
    const double inv = 1.0 / static_cast<double>(prompts.size());
    for (const auto h : table.heads())
      for (double& x : table.task_means(h).row(ti)) x *= inv;
  }
  table.recompute_overall_means();
  table.provenance = {{"source", "checkpoint"}, {"n_prompts_per_task", n_prompts_per_task}, {"seed", seed}};
  return table;
}

Vector HeadProjection::apply(std::span<const double> h) const {
  if (h.size() != basis.rows()) throw numkit::ShapeError("HeadProjection: vector length does not match basis");
  Vector centered = center.empty() ? Vector(h.begin(), h.end()) : numkit::subtract(h, center);
  const Vector coords = numkit::matvec_t(basis, centered);
  const Vector proj = numkit::matvec(basis, coords);
  Vector out = complement ? numkit::subtract(centered, proj) : proj;
  if (!center.empty()) numkit::axpy(1.0, center, out);
  return out;
}

nlohmann::json FvRecipe::to_json() const {
  auto heads_json = [](const std::vector<HeadId>& hs) {
    nlohmann::json a = nlohmann::json::array();
    for (const auto& h : hs) a.push_back({h.layer, h.head});
    return a;
  };
  nlohmann::json j{{"kept", heads_json(kept)}, {"ablated", heads_json(ablated)}};
  nlohmann::json c = nlohmann::json::array();
  for (const auto& [h, v] : coeffs) c.push_back({{"head", {h.layer, h.head}}, {"coeff", v}});
  j["coeffs"] = c;
  nlohmann::json p = nlohmann::json::array();
  for (const auto& [h, proj] : projections) {
    p.push_back({{"head", {h.layer, h.head}}, {"rank", proj.basis.cols()}, {"complement", proj.complement}});
  }
  j["projections"] = p;
  return j;
}

FunctionVector build_fv(const HeadVectorTable& table, int k, const FvRecipe& recipe) {
  std::set<HeadId> kept(recipe.kept.begin(), recipe.kept.end());
  std::set<HeadId> ablated(recipe.ablated.begin(), recipe.ablated.end());
  for (const auto& h : kept) {
    table.check_head(h);
    if (ablated.contains(h)) throw RecipeError("head " + h.str() + " is both kept and ablated");
  }
  for (const auto& h : ablated) table.check_head(h);

  FunctionVector fv;
  fv.task = k;
  fv.recipe = recipe;
  fv.vector.assign(static_cast<std::size_t>(table.d_model()), 0.0);
  for (const auto& h : ablated) numkit::axpy(1.0, table.overall_mean(h), fv.vector);
  for (const auto& h : kept) {
    const auto hk = table.task_mean(h, k);
    const auto pit = recipe.projections.find(h);
    const auto cit = recipe.coeffs.find(h);
    const double c = cit == recipe.coeffs.end() ? 1.0 : cit->second;
    if (pit == recipe.projections.end()) {
      numkit::axpy(c, hk, fv.vector);
    } else {
      numkit::axpy(c, pit->second.apply(hk), fv.vector);
    }
  }
  return fv;
}

Vector plain_fv(const HeadVectorTable& table, int k, std::vector<HeadId> heads) {
  std::sort(heads.begin(), heads.end());
  heads.erase(std::unique(heads.begin(), heads.end()), heads.end());
  Vector v(static_cast<std::size_t>(table.d_model()), 0.0);
  for (const auto& h : heads) numkit::axpy(1.0, table.task_mean(h, k), v);
  return v;
}

TransformerIntervention::TransformerIntervention(const model::Checkpoint& ckpt, corpus::Vocabulary vocab)
    : ckpt_(ckpt), vocab_(vocab), layer_(ckpt.config.resolved_patch_layer()) {
  if (vocab_.size() != ckpt.config.vocab_size) throw model::ShapeError("vocabulary does not match checkpoint");
}

std::vector<corpus::TokenId> TransformerIntervention::zero_shot_tokens(int query) const {
  return corpus::render(corpus::PromptSpec::zero_shot(query), vocab_).tokens;
}

std::optional<int> TransformerIntervention::predict(int query, std::span<const double> v) const {
  const auto tokens = zero_shot_tokens(query);
  const auto logits = model::forward_patched(ckpt_, tokens, layer_, tokens.size() - 1, v, model::PatchMode::Add);
  return vocab_.decode(static_cast<corpus::TokenId>(model::argmax(logits)));
}

model::LossAndGrad TransformerIntervention::loss_and_grad(int query, int target, std::span<const double> v) const {
  const auto tokens = zero_shot_tokens(query);
  return model::loss_and_grad_wrt_patch(ckpt_, tokens, vocab_.number(target), layer_, v);
}

nlohmann::json AccuracyReport::to_json() const {
  nlohmann::json per = nlohmann::json::object();
  for (const auto& [k, a] : per_task) per[std::to_string(k)] = a;
  return {{"mean", mean}, {"per_task", per}};
}

std::string AccuracyReport::to_csv() const {
  std::ostringstream os;
  os << "task,k,accuracy\n";
  for (const auto& [k, a] : per_task) os << "add-" << k << ',' << k << ',' << a << '\n';
  return os.str();
}

namespace {

AccuracyReport finish(std::map<int, double> per_task) {
  AccuracyReport r;
  r.per_task = std::move(per_task);
  double sum = 0.0;
  for (const auto& [k, a] : r.per_task) sum += a;
  r.mean = r.per_task.empty() ? 0.0 : sum / static_cast<double>(r.per_task.size());
  return r;
}

}  // namespace

AccuracyReport intervention_accuracy(const InterventionModel& model, const FvBuilder& builder,
                                     const std::vector<int>& tasks, corpus::IntRange x_range) {
  std::map<int, double> per;
  for (int k : tasks) {
    const Vector v = builder(k);
    if (v.size() != static_cast<std::size_t>(model.d_model())) throw numkit::ShapeError("function vector has wrong length");
    int correct = 0;
    for (int q = x_range.lo; q <= x_range.hi; ++q) {
      const auto pred = model.predict(q, v);
      if (pred && *pred == q + k) ++correct;
    }
    per[k] = static_cast<double>(correct) / static_cast<double>(x_range.size());
  }
  return finish(std::move(per));
}

namespace {

AccuracyReport five_shot_eval(const model::Checkpoint& ckpt, const corpus::TaskFamily& family,
                              const std::vector<int>& tasks, std::uint64_t seed, const model::HeadOverrides& overrides) {
  const auto vocab = family.vocabulary();
  std::map<int, double> per;
  for (int k : tasks) {
    const auto prompts = corpus::gen_task_prompts(k, static_cast<std::size_t>(family.x.size()), family.x, seed);
    int correct = 0;
    for (const auto& spec : prompts) {
      const auto rendered = corpus::render(spec, vocab);
      model::ForwardOptions opts;
      opts.overrides = overrides;
      const auto logits = model::forward_with_options(ckpt, rendered.tokens, opts);
      if (static_cast<int>(model::argmax(logits)) == vocab.number(*rendered.answer)) ++correct;
    }
    per[k] = static_cast<double>(correct) / static_cast<double>(prompts.size());
  }
  return finish(std::move(per));
}

}  // namespace

AccuracyReport clean_accuracy(const model::Checkpoint& ckpt, const corpus::TaskFamily& family,
                              const std::vector<int>& tasks, std::uint64_t seed) {
  return five_shot_eval(ckpt, family, tasks, seed, {});
}

AccuracyReport five_shot_head_ablation(const model::Checkpoint& ckpt, const HeadVectorTable& table,
                                       const std::vector<HeadId>& heads, const corpus::TaskFamily& family,
                                       const std::vector<int>& tasks, std::uint64_t seed) {
  model::HeadOverrides overrides;
  for (const auto& h : heads) overrides[h] = table.overall_mean(h);
  return five_shot_eval(ckpt, family, tasks, seed, overrides);
}

std::vector<std::vector<HeadId>> random_head_sets(const std::vector<HeadId>& pool, std::size_t size,
                                                  std::size_t n_draws, std::uint64_t seed) {
  if (size > pool.size()) throw std::invalid_argument("random_head_sets: set larger than pool");
  std::mt19937_64 rng(corpus::mix_seed(seed, 0x4EAD5));
  std::vector<std::vector<HeadId>> out;
  for (std::size_t d = 0; d < n_draws; ++d) {
    auto p = pool;
    std::shuffle(p.begin(), p.end(), rng);
    p.resize(size);
    std::sort(p.begin(), p.end());
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace icl::patchlab
