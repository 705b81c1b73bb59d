#include "icl/localizer.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <set>
#include <sstream>

namespace icl::localizer {

void OptimizerConfig::validate() const {
  if (lambda < 0) throw std::invalid_argument("localizer: lambda must be nonnegative");
  if (batch_size == 0) throw std::invalid_argument("localizer: batch_size must be positive");
  if (learning_rate <= 0) throw std::invalid_argument("localizer: learning_rate must be positive");
  if (init < 0 || init > 1) throw std::invalid_argument("localizer: init must lie in [0, 1]");
}

nlohmann::json OptimizerConfig::to_json() const {
  return {{"learning_rate", learning_rate}, {"batch_size", batch_size}, {"lambda", lambda},
          {"epochs", epochs},               {"seed", seed},             {"init", init},
          {"beta1", beta1},                 {"beta2", beta2},           {"eps", eps},
          {"weight_decay", weight_decay},   {"threshold", threshold}};
}

OptimizerConfig OptimizerConfig::from_json(const nlohmann::json& j) {
  OptimizerConfig c;
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.lambda = j.value("lambda", c.lambda);
  c.epochs = j.value("epochs", c.epochs);
  c.seed = j.value("seed", c.seed);
  c.init = j.value("init", c.init);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.eps = j.value("eps", c.eps);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.threshold = j.value("threshold", c.threshold);
  return c;
}

nlohmann::json EpochLog::to_json() const {
  return {{"epoch", epoch}, {"train_loss", train_loss}, {"val_acc", val_acc}, {"ood_acc", ood_acc},
          {"nnz_above_threshold", nnz_above_threshold}};
}

double CoefficientVector::at(HeadId h) const {
  const auto it = std::find(heads.begin(), heads.end(), h);
  if (it == heads.end()) throw model::HeadIdError("unknown head " + h.str());
  return c[static_cast<std::size_t>(std::distance(heads.begin(), it))];
}

std::string CoefficientVector::heatmap_csv() const {
  std::ostringstream os;
  os.precision(17);
  os << "layer,head,c\n";
  for (std::size_t i = 0; i < heads.size(); ++i) os << heads[i].layer << ',' << heads[i].head << ',' << c[i] << '\n';
  return os.str();
}

std::string CoefficientVector::log_jsonl() const {
  std::string out;
  for (const auto& e : history) out += e.to_json().dump() + "\n";
  return out;
}

LocalizationData make_localization_data(const corpus::TaskSplit& tasks, corpus::IntRange x_range,
                                        std::array<double, 3> fractions, std::uint64_t seed) {
  auto split = corpus::split_datapoints(corpus::all_datapoints(tasks.train, x_range), fractions, seed);
  return {std::move(split.train), std::move(split.val), std::move(split.test),
          corpus::all_datapoints(tasks.ood, x_range)};
}

Vector weighted_fv(const patchlab::HeadVectorTable& table, int k, std::span<const double> c) {
  const auto heads = table.heads();
  if (c.size() != heads.size()) throw numkit::ShapeError("coefficient vector length does not match head count");
  Vector v(static_cast<std::size_t>(table.d_model()), 0.0);
  for (std::size_t i = 0; i < heads.size(); ++i)
    if (c[i] != 0.0) numkit::axpy(c[i], table.task_mean(heads[i], k), v);
  return v;
}

ObjectiveValue objective_and_grad(const patchlab::InterventionModel& model, const patchlab::HeadVectorTable& table,
                                  std::span<const double> c, const std::vector<corpus::DataPoint>& batch,
                                  double lambda) {
  if (batch.empty()) throw std::invalid_argument("objective_and_grad: empty batch");
  const auto heads = table.heads();
  std::map<int, Vector> fv_cache;
  std::map<int, Vector> grad_v_sum;
  ObjectiveValue out;
  for (const auto& p : batch) {
    auto it = fv_cache.find(p.k);
    if (it == fv_cache.end()) it = fv_cache.emplace(p.k, weighted_fv(table, p.k, c)).first;
    const auto lg = model.loss_and_grad(p.query, p.target(), it->second);
    out.data_loss += lg.loss;
    auto& acc = grad_v_sum[p.k];
    if (acc.empty()) acc.assign(lg.grad.size(), 0.0);
    numkit::axpy(1.0, lg.grad, acc);
  }
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  out.data_loss *= inv_b;

  out.grad.assign(heads.size(), lambda);
  for (const auto& [k, gsum] : grad_v_sum)
    for (std::size_t i = 0; i < heads.size(); ++i) out.grad[i] += inv_b * numkit::dot(gsum, table.task_mean(heads[i], k));

  double l1 = 0.0;
  for (double x : c) l1 += std::abs(x);
  out.objective = out.data_loss + lambda * l1;
  return out;
}

double weighted_accuracy(const patchlab::InterventionModel& model, const patchlab::HeadVectorTable& table,
                         std::span<const double> c, const std::vector<corpus::DataPoint>& points) {
  if (points.empty()) return 0.0;
  std::map<int, Vector> fv_cache;
  std::size_t correct = 0;
  for (const auto& p : points) {
    auto it = fv_cache.find(p.k);
    if (it == fv_cache.end()) it = fv_cache.emplace(p.k, weighted_fv(table, p.k, c)).first;
    const auto pred = model.predict(p.query, it->second);
    if (pred && *pred == p.target()) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(points.size());
}

CoefficientVector optimize(const patchlab::InterventionModel& model, const patchlab::HeadVectorTable& table,
                           const LocalizationData& data, const OptimizerConfig& config) {
  config.validate();
  if (data.train.empty()) throw std::invalid_argument("optimize: no training data");
  for (const auto& p : data.train)
    if (!table.has_task(p.k)) throw std::invalid_argument("optimize: table lacks task " + std::to_string(p.k));

  CoefficientVector out;
  out.heads = table.heads();
  const std::size_t n = out.heads.size();
  out.c.assign(n, config.init);
  Vector m(n, 0.0), v(n, 0.0);
  std::mt19937_64 rng(corpus::mix_seed(config.seed, 0xC0EF));
  std::size_t step = 0;
  auto points = data.train;

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(points.begin(), points.end(), rng);
    double loss_sum = 0.0;
    std::size_t n_batches = 0;
    for (std::size_t start = 0; start < points.size(); start += config.batch_size) {
      const std::vector<corpus::DataPoint> batch(
          points.begin() + static_cast<std::ptrdiff_t>(start),
          points.begin() + static_cast<std::ptrdiff_t>(std::min(points.size(), start + config.batch_size)));
      const auto obj = objective_and_grad(model, table, out.c, batch, config.lambda);
      if (!std::isfinite(obj.data_loss)) {
        throw OptimizationError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                                std::to_string(n_batches));
      }
      ++step;
      const double bc1 = 1.0 - std::pow(config.beta1, static_cast<double>(step));
      const double bc2 = 1.0 - std::pow(config.beta2, static_cast<double>(step));
      for (std::size_t i = 0; i < n; ++i) {
        const double g = obj.grad[i];
        m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * g;
        v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * g * g;
        double ci = out.c[i] * (1.0 - config.learning_rate * config.weight_decay);
        ci -= config.learning_rate * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + config.eps);
        out.c[i] = std::clamp(ci, 0.0, 1.0);
      }
      loss_sum += obj.data_loss;
      ++n_batches;
    }
    EpochLog log;
    log.epoch = epoch;
    log.train_loss = loss_sum / static_cast<double>(std::max<std::size_t>(1, n_batches));
    log.val_acc = weighted_accuracy(model, table, out.c, data.val);
    log.ood_acc = weighted_accuracy(model, table, out.c, data.ood);
    log.nnz_above_threshold =
        static_cast<std::size_t>(std::count_if(out.c.begin(), out.c.end(), [&](double x) { return x > config.threshold; }));
    out.history.push_back(log);
  }
  return out;
}

std::vector<HeadId> significant_heads(const CoefficientVector& c, double threshold) {
  std::vector<HeadId> out;
  for (std::size_t i = 0; i < c.heads.size(); ++i)
    if (c.c[i] > threshold) out.push_back(c.heads[i]);
  std::sort(out.begin(), out.end());
  return out;
}

double unit_weight_accuracy(const patchlab::InterventionModel& model, const patchlab::HeadVectorTable& table,
                            const std::vector<HeadId>& heads, const std::vector<corpus::DataPoint>& points) {
  const auto all = table.heads();
  std::set<HeadId> keep(heads.begin(), heads.end());
  Vector c(all.size(), 0.0);
  for (std::size_t i = 0; i < all.size(); ++i)
    if (keep.contains(all[i])) c[i] = 1.0;
  return weighted_accuracy(model, table, c, points);
}

std::vector<LayerScanRow> layer_ablation_scan(const patchlab::InterventionModel& model,
                                              const patchlab::HeadVectorTable& table,
                                              const std::vector<HeadId>& sig_heads,
                                              const std::vector<std::vector<int>>& layer_subsets,
                                              const std::vector<int>& tasks, corpus::IntRange x_range) {
  if (sig_heads.empty()) throw std::invalid_argument("layer_ablation_scan: no significant heads");
  std::vector<LayerScanRow> rows;
  for (const auto& subset : layer_subsets) {
    const std::set<int> layers(subset.begin(), subset.end());
    patchlab::FvRecipe recipe;
    for (const auto& h : sig_heads) (layers.contains(h.layer) ? recipe.kept : recipe.ablated).push_back(h);
    const auto report = patchlab::intervention_accuracy(
        model, [&](int k) { return patchlab::build_fv(table, k, recipe).vector; }, tasks, x_range);
    rows.push_back({std::vector<int>(layers.begin(), layers.end()), recipe.kept, report.mean});
  }
  return rows;
}

std::vector<std::vector<int>> default_layer_subsets(const std::vector<HeadId>& sig_heads) {
  std::set<int> layer_set;
  for (const auto& h : sig_heads) layer_set.insert(h.layer);
  const std::vector<int> layers(layer_set.begin(), layer_set.end());
  std::vector<std::vector<int>> out{{}};
  for (int l : layers) out.push_back({l});
  for (std::size_t i = 0; i < layers.size(); ++i)
    for (std::size_t j = i + 1; j < layers.size(); ++j) out.push_back({layers[i], layers[j]});
  if (layers.size() > 2) out.push_back(layers);
  return out;
}

std::string layer_scan_csv(const std::vector<LayerScanRow>& rows) {
  std::ostringstream os;
  os << "layers,n_kept,accuracy\n";
  for (const auto& r : rows) {
    std::string ls;
    for (std::size_t i = 0; i < r.layers.size(); ++i) ls += (i ? ";" : "") + std::to_string(r.layers[i]);
    os << '"' << ls << '"' << ',' << r.kept.size() << ',' << r.accuracy << '\n';
  }
  return os.str();
}

std::vector<HeadScaleResult> head_scale_scan(const patchlab::InterventionModel& model,
                                             const patchlab::HeadVectorTable& table,
                                             const std::vector<HeadId>& sig_heads,
                                             const std::vector<HeadId>& candidates, int coeff_lo, int coeff_hi,
                                             const std::vector<int>& tasks, corpus::IntRange x_range) {
  if (coeff_hi < coeff_lo) throw std::invalid_argument("head_scale_scan: empty coefficient range");
  std::vector<HeadScaleResult> out;
  for (const auto& cand : candidates) {
    patchlab::FvRecipe recipe;
    recipe.kept = {cand};
    for (const auto& h : sig_heads)
      if (h != cand) recipe.ablated.push_back(h);
    HeadScaleResult res{cand, {}, coeff_lo, -1.0};
    for (int c = coeff_lo; c <= coeff_hi; ++c) {
      recipe.coeffs[cand] = static_cast<double>(c);
      const auto report = patchlab::intervention_accuracy(
          model, [&](int k) { return patchlab::build_fv(table, k, recipe).vector; }, tasks, x_range);
      res.curve.emplace_back(c, report.mean);
      if (report.mean > res.best_accuracy) {
        res.best_accuracy = report.mean;
        res.best_coeff = c;
      }
    }
    out.push_back(std::move(res));
  }
  return out;
}

std::string head_scale_csv(const std::vector<HeadScaleResult>& rows) {
  std::ostringstream os;
  os << "layer,head,coeff,accuracy,is_best\n";
  for (const auto& r : rows)
    for (const auto& [c, a] : r.curve)
      os << r.head.layer << ',' << r.head.head << ',' << c << ',' << a << ',' << (c == r.best_coeff ? 1 : 0) << '\n';
  return os.str();
}

}  // namespace icl::localizer
