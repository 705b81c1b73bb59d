#include "icl/subspace.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>
#include <set>

namespace icl::subspace {

namespace {

bool same_period(double a, double b) { return std::abs(a - b) < 1e-9; }
bool is_unit_period(double p) { return same_period(p, 2) || same_period(p, 5) || same_period(p, 10); }
bool is_magnitude_period(double p) { return same_period(p, 25) || same_period(p, 50); }

Matrix stack_columns(const std::vector<Vector>& cols, std::size_t rows) {
  Matrix m(rows, cols.size());
  for (std::size_t j = 0; j < cols.size(); ++j) m.set_col(j, cols[j]);
  return m;
}

}  // namespace

double SubspaceBasis::cumulative_variance() const {
  return std::accumulate(explained_variance.begin(), explained_variance.begin() + static_cast<std::ptrdiff_t>(rank()), 0.0);
}

Matrix SubspaceBasis::projector() const { return numkit::matmul(basis, basis.transpose()); }

Matrix SubspaceBasis::complement_projector() const {
  return numkit::subtract(Matrix::identity(basis.rows()), projector());
}

patchlab::HeadProjection SubspaceBasis::projection(bool complement) const { return {basis, mean, complement}; }

SubspaceBasis fit_task_subspace(const Matrix& task_vectors, double variance_target, bool center, HeadId head) {
  if (task_vectors.rows() < 2) throw numkit::InsufficientDataError("fit_task_subspace: need at least 2 tasks");
  const auto p = numkit::pca(task_vectors, center);
  double scale = 0.0, spread = 0.0;
  for (std::size_t i = 0; i < task_vectors.rows(); ++i)
    for (std::size_t j = 0; j < task_vectors.cols(); ++j) {
      scale = std::max(scale, std::abs(task_vectors(i, j)));
      spread = std::max(spread, std::abs(task_vectors(i, j) - (center ? p.mean[j] : 0.0)));
    }
  if (p.basis.cols() == 0 || spread <= 1e-12 * scale) throw numkit::RankError("fit_task_subspace: task vectors are degenerate (zero variance)");
  std::size_t r = 0;
  double cum = 0.0;
  while (r < p.explained_variance_ratio.size()) {
    cum += p.explained_variance_ratio[r];
    ++r;
    if (cum >= variance_target - 1e-12) break;
  }
  SubspaceBasis out;
  out.head = head;
  out.basis = p.basis.cols_range(0, r);
  out.explained_variance = p.explained_variance_ratio;
  out.mean = p.mean;
  out.centered = center;
  return out;
}

Matrix coordinate_functions(const SubspaceBasis& basis, const Matrix& task_vectors) {
  if (task_vectors.cols() != basis.basis.rows()) throw numkit::ShapeError("coordinate_functions: dimension mismatch");
  Matrix coords(task_vectors.rows(), basis.rank());
  for (std::size_t i = 0; i < task_vectors.rows(); ++i) {
    const Vector centered = numkit::subtract(task_vectors.row(i), basis.mean);
    const Vector c = numkit::matvec_t(basis.basis, centered);
    std::copy(c.begin(), c.end(), coords.row(i).begin());
  }
  return coords;
}

nlohmann::json TrigFitConfig::to_json() const {
  return {{"period_grid", period_grid}, {"phase_steps", phase_steps}, {"r2_floor", r2_floor},
          {"max_condition", max_condition}};
}

TrigFitConfig TrigFitConfig::from_json(const nlohmann::json& j) {
  TrigFitConfig c;
  c.period_grid = j.value("period_grid", c.period_grid);
  c.phase_steps = j.value("phase_steps", c.phase_steps);
  c.r2_floor = j.value("r2_floor", c.r2_floor);
  c.max_condition = j.value("max_condition", c.max_condition);
  return c;
}

std::vector<double> TrigFitResult::periods() const {
  std::vector<double> out;
  for (const auto& f : features) out.push_back(f.period);
  std::sort(out.begin(), out.end());
  return out;
}

double cosine_feature(double period, double phase, double k) {
  return std::cos(2.0 * std::numbers::pi * (k + phase) / period);
}

TrigFitResult fit_trig_features(const Matrix& coords, const std::vector<int>& tasks, const TrigFitConfig& config,
                                const SubspaceBasis* basis) {
  const std::size_t n = coords.rows();
  const std::size_t r = coords.cols();
  if (tasks.size() != n) throw numkit::ShapeError("fit_trig_features: one task per coordinate row required");
  if (basis && basis->rank() != r) throw numkit::ShapeError("fit_trig_features: basis rank does not match coordinates");
  if (n < r + 2) throw numkit::InsufficientDataError("fit_trig_features: too few tasks for the regression");

  Matrix design(n, r + 1);
  for (std::size_t i = 0; i < n; ++i) {
    design(i, 0) = 1.0;
    for (std::size_t j = 0; j < r; ++j) design(i, j + 1) = coords(i, j);
  }

  TrigFitResult out;
  for (double period : config.period_grid) {
    for (int s = 0; s < config.phase_steps; ++s) {
      TrigCandidate cand;
      cand.period = period;
      cand.phase = period * static_cast<double>(s) / static_cast<double>(config.phase_steps);
      Vector target(n);
      for (std::size_t i = 0; i < n; ++i) target[i] = cosine_feature(period, cand.phase, tasks[i]);
      const double mean = std::accumulate(target.begin(), target.end(), 0.0) / static_cast<double>(n);
      double ss_tot = 0.0;
      for (double t : target) ss_tot += (t - mean) * (t - mean);
      cand.coefficients.assign(r, 0.0);
      if (ss_tot > 1e-12 * static_cast<double>(n)) {
        const Matrix beta = numkit::lstsq(design, Matrix::column(target));
        const Vector fitted = numkit::matvec(design, beta.col(0));
        double ss_res = 0.0;
        for (std::size_t i = 0; i < n; ++i) ss_res += (target[i] - fitted[i]) * (target[i] - fitted[i]);
        cand.r2 = std::clamp(1.0 - ss_res / ss_tot, 0.0, 1.0);
        cand.intercept = beta(0, 0);
        for (std::size_t j = 0; j < r; ++j) cand.coefficients[j] = beta(j + 1, 0);
      }
      out.candidates.push_back(std::move(cand));
    }
  }

  std::vector<std::size_t> order(out.candidates.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return out.candidates[a].r2 > out.candidates[b].r2; });

  std::vector<std::size_t> selected;
  for (std::size_t idx : order) {
    if (selected.size() == r) break;
    const auto& cand = out.candidates[idx];
    if (cand.r2 < config.r2_floor) break;
    std::vector<Vector> rows;
    for (std::size_t s : selected) rows.push_back(out.candidates[s].coefficients);
    rows.push_back(cand.coefficients);
    Matrix trial(rows.size(), r);
    for (std::size_t i = 0; i < rows.size(); ++i) std::copy(rows[i].begin(), rows[i].end(), trial.row(i).begin());
    const auto sv = numkit::singular_values(trial);
    const double smin = sv.back();
    if (smin <= 0.0 || sv.front() / smin > config.max_condition) continue;
    selected.push_back(idx);
  }

  std::sort(selected.begin(), selected.end(), [&](std::size_t a, std::size_t b) {
    const auto& ca = out.candidates[a];
    const auto& cb = out.candidates[b];
    return std::tie(ca.period, ca.phase) < std::tie(cb.period, cb.phase);
  });

  out.linear_map = Matrix(r, selected.size());
  for (std::size_t j = 0; j < selected.size(); ++j) {
    const auto& cand = out.candidates[selected[j]];
    out.linear_map.set_col(j, cand.coefficients);
    TrigFeature f;
    f.period = cand.period;
    f.phase = cand.phase;
    f.fit_r2 = cand.r2;
    if (basis) {
      f.direction = numkit::matvec(basis->basis, cand.coefficients);
      const double nd = numkit::norm(f.direction);
      if (nd > 0)
        for (double& x : f.direction) x /= nd;
    }
    out.features.push_back(std::move(f));
  }
  out.complete = selected.size() == r;
  if (!out.complete) {
    out.failure = "only " + std::to_string(selected.size()) + " of " + std::to_string(r) +
                  " independent trigonometric candidates reached R^2 >= " + std::to_string(config.r2_floor);
  }
  return out;
}

FeatureDecomposition decompose_features(const std::vector<TrigFeature>& features) {
  FeatureDecomposition out;
  std::vector<double> periods;
  for (const auto& f : features) {
    periods.push_back(f.period);
    if (same_period(f.period, 2) && !out.parity) out.parity = f;
    if (is_unit_period(f.period)) out.unit.push_back(f);
    if (is_magnitude_period(f.period)) out.magnitude.push_back(f);
    if (!is_unit_period(f.period) && !is_magnitude_period(f.period)) {
      out.warnings.push_back("feature with period " + std::to_string(f.period) + " is neither unit nor magnitude");
    }
  }
  std::sort(periods.begin(), periods.end());
  const std::vector<double> expected{2, 5, 10, 10, 25, 50};
  out.matches_expected = periods.size() == expected.size() &&
                         std::equal(periods.begin(), periods.end(), expected.begin(), same_period);
  if (!out.matches_expected) {
    std::string got;
    for (double p : periods) got += (got.empty() ? "" : ",") + std::to_string(p);
    out.warnings.push_back("period multiset {" + got + "} differs from {2,5,10,10,25,50}");
  }
  if (!out.parity) out.warnings.push_back("no period-2 (parity) feature");

  auto span_of = [&](const std::vector<TrigFeature>& fs, const char* name) {
    if (fs.empty() || fs.front().direction.empty()) return Matrix();
    std::vector<Vector> cols;
    for (const auto& f : fs) cols.push_back(f.direction);
    try {
      return numkit::orthonormalize_columns(stack_columns(cols, cols.front().size()));
    } catch (const numkit::RankError&) {
      out.warnings.push_back(std::string(name) + " directions are linearly dependent; degenerate decomposition");
      return Matrix();
    }
  };
  out.unit_basis = span_of(out.unit, "unit");
  out.magnitude_basis = span_of(out.magnitude, "magnitude");
  return out;
}

std::vector<CausalTaskResult> causal_subspace_test(const patchlab::InterventionModel& model,
                                                   const patchlab::HeadVectorTable& table, HeadId head,
                                                   const Matrix& basis_part, const Vector& center,
                                                   ProjectionMode mode, const patchlab::FvRecipe& recipe,
                                                   const std::vector<int>& tasks, corpus::IntRange x_range) {
  patchlab::FvRecipe r = recipe;
  if (std::find(r.kept.begin(), r.kept.end(), head) == r.kept.end()) r.kept.push_back(head);
  std::erase(r.ablated, head);
  const Matrix ortho = basis_part.cols() > 0 ? numkit::orthonormalize_columns(basis_part)
                                             : Matrix(static_cast<std::size_t>(table.d_model()), 0);
  r.projections[head] = patchlab::HeadProjection{ortho, center, mode == ProjectionMode::OutOf};

  std::vector<CausalTaskResult> out;
  for (int k : tasks) {
    const auto v = patchlab::build_fv(table, k, r).vector;
    int unit_wrong = 0, final_wrong = 0;
    for (int q = x_range.lo; q <= x_range.hi; ++q) {
      const auto pred = model.predict(q, v);
      const int answer = q + k;
      if (!pred || *pred != answer) ++final_wrong;
      if (!pred || *pred % 10 != answer % 10) ++unit_wrong;
    }
    const double n = static_cast<double>(x_range.size());
    out.push_back({k, unit_wrong / n, final_wrong / n});
  }
  return out;
}

std::vector<PlantedFeatureSpec> default_planted_features() {
  return {{2, 0}, {5, 0}, {10, 0}, {10, 2.5}, {25, 3.125}, {50, 9.375}};
}

Vector planted_feature_values(int k, const std::vector<PlantedFeatureSpec>& features) {
  Vector out;
  out.reserve(features.size());
  for (const auto& f : features) out.push_back(cosine_feature(f.period, f.phase, k));
  return out;
}

nlohmann::json FixtureConfig::to_json() const {
  nlohmann::json planted_json = nlohmann::json::array();
  for (const auto& h : planted) planted_json.push_back({h.layer, h.head});
  return {{"n_layers", n_layers},   {"n_heads", n_heads},       {"d_model", d_model},
          {"planted", planted_json}, {"sigma", sigma},           {"seed", seed},
          {"k_min", k.lo},          {"k_max", k.hi},             {"x_min", x.lo},
          {"x_max", x.hi},          {"n_ood", n_ood},            {"amplitude", amplitude},
          {"mean_scale", mean_scale}, {"readout_beta", readout_beta}};
}

FixtureConfig FixtureConfig::from_json(const nlohmann::json& j) {
  FixtureConfig c;
  c.n_layers = j.value("n_layers", c.n_layers);
  c.n_heads = j.value("n_heads", c.n_heads);
  c.d_model = j.value("d_model", c.d_model);
  if (j.contains("planted")) {
    c.planted.clear();
    for (const auto& p : j["planted"]) c.planted.push_back({p.at(0).get<int>(), p.at(1).get<int>()});
  }
  c.sigma = j.value("sigma", c.sigma);
  c.seed = j.value("seed", c.seed);
  c.k = {j.value("k_min", c.k.lo), j.value("k_max", c.k.hi)};
  c.x = {j.value("x_min", c.x.lo), j.value("x_max", c.x.hi)};
  c.n_ood = j.value("n_ood", c.n_ood);
  c.amplitude = j.value("amplitude", c.amplitude);
  c.mean_scale = j.value("mean_scale", c.mean_scale);
  c.readout_beta = j.value("readout_beta", c.readout_beta);
  return c;
}

namespace {

Matrix columns_where(const Matrix& m, const std::vector<PlantedFeatureSpec>& features, bool (*pred)(double)) {
  std::vector<Vector> cols;
  for (std::size_t j = 0; j < features.size(); ++j)
    if (pred(features[j].period)) cols.push_back(m.col(j));
  return stack_columns(cols, m.rows());
}

}  // namespace

Matrix PlantedFixture::planted_unit_span(HeadId head) const {
  return numkit::orthonormalize_columns(columns_where(planted_maps.at(head), features, is_unit_period));
}

Matrix PlantedFixture::planted_magnitude_span(HeadId head) const {
  return numkit::orthonormalize_columns(columns_where(planted_maps.at(head), features, is_magnitude_period));
}

PlantedFixture make_planted_fixture(const FixtureConfig& config) {
  PlantedFixture fx;
  fx.config = config;
  fx.features = default_planted_features();
  const auto d = static_cast<std::size_t>(config.d_model);
  const std::size_t n_feat = fx.features.size();
  const std::size_t n_planted = config.planted.size();
  if (n_planted == 0) throw std::invalid_argument("fixture: no planted heads");
  if (d < n_feat * n_planted + 1) throw std::invalid_argument("fixture: d_model too small for the planted blocks");

  fx.table = patchlab::HeadVectorTable(config.n_layers, config.n_heads, config.n_layers > 0 ? config.d_model : 0,
                                       config.k.values());
  for (const auto& h : config.planted) fx.table.check_head(h);
  if (std::set<HeadId>(config.planted.begin(), config.planted.end()).size() != n_planted) {
    throw std::invalid_argument("fixture: duplicate planted heads");
  }

  std::mt19937_64 rng(corpus::mix_seed(config.seed, 0xF1C5));
  std::normal_distribution<double> normal(0.0, 1.0);

  // Random orthonormal frame: planted blocks first, the rest carries head means.
  Matrix gauss(d, d);
  for (double& x : gauss.data()) x = normal(rng);
  const Matrix frame = numkit::orthonormalize_columns(gauss);

  std::vector<std::size_t> unit_idx, mag_idx;
  for (std::size_t j = 0; j < n_feat; ++j) (is_magnitude_period(fx.features[j].period) ? mag_idx : unit_idx).push_back(j);

  auto random_rotation = [&](std::size_t n) {
    Matrix g(n, n);
    for (double& x : g.data()) x = normal(rng);
    return numkit::orthonormalize_columns(g);
  };

  // Standardize each feature over the task range so no direction is swamped.
  const auto tasks = config.k.values();
  Vector feature_std(n_feat, 0.0);
  {
    Matrix phi(tasks.size(), n_feat);
    for (std::size_t i = 0; i < tasks.size(); ++i) {
      const Vector v = planted_feature_values(tasks[i], fx.features);
      std::copy(v.begin(), v.end(), phi.row(i).begin());
    }
    const Vector mu = numkit::column_mean(phi);
    for (std::size_t i = 0; i < tasks.size(); ++i)
      for (std::size_t j = 0; j < n_feat; ++j) feature_std[j] += (phi(i, j) - mu[j]) * (phi(i, j) - mu[j]);
    for (double& sd : feature_std) {
      sd = std::sqrt(sd / static_cast<double>(tasks.size()));
      if (sd < 1e-9) throw std::invalid_argument("fixture: a planted feature is constant over the task range");
    }
  }

  std::size_t next_col = 0;
  for (const auto& h : config.planted) {
    Matrix map(d, n_feat);
    for (const auto* group : {&unit_idx, &mag_idx}) {
      const std::size_t g = group->size();
      const Matrix block = frame.cols_range(next_col, g);
      next_col += g;
      const Matrix mixed = numkit::matmul(block, random_rotation(g));
      for (std::size_t a = 0; a < g; ++a) {
        Vector col = mixed.col(a);
        for (double& x : col) x *= config.amplitude / feature_std[(*group)[a]];
        map.set_col((*group)[a], col);
      }
    }
    fx.planted_maps.emplace(h, std::move(map));
  }
  const Matrix mean_frame = frame.cols_range(next_col, d - next_col);

  const double noise_std = config.sigma / std::sqrt(static_cast<double>(d));
  for (const auto& h : fx.table.heads()) {
    Vector coeff(mean_frame.cols());
    for (double& x : coeff) x = normal(rng);
    Vector base = numkit::matvec(mean_frame, coeff);
    const double nb = numkit::norm(base);
    for (double& x : base) x *= config.mean_scale / nb;
    const auto pit = fx.planted_maps.find(h);
    auto& m = fx.table.task_means(h);
    for (std::size_t ti = 0; ti < tasks.size(); ++ti) {
      Vector hk = base;
      if (pit != fx.planted_maps.end()) {
        numkit::axpy(1.0, numkit::matvec(pit->second, planted_feature_values(tasks[ti], fx.features)), hk);
      }
      for (double& x : hk) x += noise_std * normal(rng);
      std::copy(hk.begin(), hk.end(), m.row(ti).begin());
    }
  }
  fx.table.recompute_overall_means();
  fx.table.provenance = {{"source", "planted_fixture"}, {"fixture", config.to_json()}};

  // readout = (1/n_planted) Σ_h pinv(map_h); maps occupy mutually orthogonal blocks.
  fx.readout = Matrix(n_feat, d);
  for (const auto& [h, map] : fx.planted_maps) {
    const Matrix x = numkit::lstsq(map, Matrix::identity(d));  // n_feat x d
    for (std::size_t i = 0; i < n_feat; ++i)
      for (std::size_t j = 0; j < d; ++j) fx.readout(i, j) += x(i, j) / static_cast<double>(n_planted);
  }
  return fx;
}

FixtureReadout::FixtureReadout(const PlantedFixture& fixture)
    : readout_(fixture.readout),
      features_(fixture.features),
      beta_(fixture.config.readout_beta) {}

Vector FixtureReadout::logits(int, std::span<const double> v) const {
  const Vector s = numkit::matvec(readout_, v);
  Vector out(kWindow);
  for (int j = 0; j < kWindow; ++j) {
    const Vector phi = planted_feature_values(j, features_);
    out[static_cast<std::size_t>(j)] = beta_ * (2.0 * numkit::dot(s, phi) - numkit::dot(phi, phi));
  }
  return out;
}

std::optional<int> FixtureReadout::predict(int query, std::span<const double> v) const {
  return query + static_cast<int>(model::argmax(logits(query, v)));
}

model::LossAndGrad FixtureReadout::loss_and_grad(int query, int target, std::span<const double> v) const {
  const int offset = target - query;
  if (offset < 0 || offset >= kWindow) throw corpus::RangeError("fixture readout: target outside answer window");
  const Vector lg = logits(query, v);
  const double lse = numkit::log_sum_exp(lg);
  model::LossAndGrad out;
  out.loss = lse - lg[static_cast<std::size_t>(offset)];
  Vector ds(features_.size(), 0.0);
  for (int j = 0; j < kWindow; ++j) {
    const double p = std::exp(lg[static_cast<std::size_t>(j)] - lse);
    numkit::axpy(2.0 * beta_ * p, planted_feature_values(j, features_), ds);
  }
  numkit::axpy(-2.0 * beta_, planted_feature_values(target - query, features_), ds);
  out.grad = numkit::matvec_t(readout_, ds);
  return out;
}

}  // namespace icl::subspace
