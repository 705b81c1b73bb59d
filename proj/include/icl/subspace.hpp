#pragma once

// Per-head task subspaces: PCA over task vectors, trigonometric feature
// directions, unit/magnitude decomposition and onto/out-of causal tests.
// Also hosts the planted fixture that gives the analysis stages a ground truth.

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "icl/corpus.hpp"
#include "icl/head_id.hpp"
#include "icl/numkit.hpp"
#include "icl/patchlab.hpp"

namespace icl::subspace {

using numkit::Matrix;
using numkit::Vector;

struct SubspaceBasis {
  HeadId head;
  Matrix basis;                // d x r, orthonormal columns
  Vector explained_variance;   // ratio per principal component (all retained components)
  Vector mean;                 // task-vector mean (zeros when not centered)
  bool centered = true;

  std::size_t rank() const { return basis.cols(); }
  double cumulative_variance() const;
  /// P = basis basisᵀ
  Matrix projector() const;
  /// I - P
  Matrix complement_projector() const;
  patchlab::HeadProjection projection(bool complement = false) const;
};

/// Top-r principal directions, r the smallest count whose cumulative
/// explained variance reaches `variance_target`.
SubspaceBasis fit_task_subspace(const Matrix& task_vectors, double variance_target = 0.97, bool center = true,
                                HeadId head = {});

/// (n_tasks x r) coordinates ⟨h_k - mean, basis_j⟩.
Matrix coordinate_functions(const SubspaceBasis& basis, const Matrix& task_vectors);

struct TrigCandidate {
  double period = 0.0;
  double phase = 0.0;  // in task units: cos(2π (k + phase) / period)
  double r2 = 0.0;
  Vector coefficients;  // length r (intercept excluded)
  double intercept = 0.0;
};

struct TrigFeature {
  double period = 0.0;
  double phase = 0.0;
  Vector direction;  // unit norm in residual space
  double fit_r2 = 0.0;
};

struct TrigFitConfig {
  std::vector<double> period_grid{2, 2.5, 4, 5, 10, 20, 25, 50};
  int phase_steps = 16;
  double r2_floor = 0.9;
  double max_condition = 1e6;

  nlohmann::json to_json() const;
  static TrigFitConfig from_json(const nlohmann::json& j);
};

struct TrigFitResult {
  Matrix linear_map;  // r x n_selected: column j maps PC coordinates to feature j
  std::vector<TrigFeature> features;
  std::vector<TrigCandidate> candidates;  // full grid, in grid order
  bool complete = false;
  std::string failure;  // set when fewer than r features pass the floor

  std::vector<double> periods() const;
};

double cosine_feature(double period, double phase, double k);

/// Regresses every (period, phase) cosine on the coordinate functions and
/// greedily selects the best-fitting linearly independent candidates.
/// Feature directions are produced when `basis` is given.
TrigFitResult fit_trig_features(const Matrix& coords, const std::vector<int>& tasks, const TrigFitConfig& config,
                                const SubspaceBasis* basis = nullptr);

struct FeatureDecomposition {
  std::optional<TrigFeature> parity;
  std::vector<TrigFeature> unit;
  std::vector<TrigFeature> magnitude;
  Matrix unit_basis;       // orthonormalized span of unit directions
  Matrix magnitude_basis;  // orthonormalized span of magnitude directions
  bool matches_expected = false;
  std::vector<std::string> warnings;
};

/// Parity = the period-2 feature; unit = periods {2, 5, 10}; magnitude = {25, 50}.
FeatureDecomposition decompose_features(const std::vector<TrigFeature>& features);

enum class ProjectionMode { Onto, OutOf };

struct CausalTaskResult {
  int k = 0;
  double unit_digit_error = 0.0;
  double final_answer_error = 0.0;
};

/// Replaces `head`'s h_k in `recipe` by its projection onto (or out of) the
/// span of `basis_part`, centered at `center`, then evaluates zero-shot
/// interventions.
std::vector<CausalTaskResult> causal_subspace_test(const patchlab::InterventionModel& model,
                                                   const patchlab::HeadVectorTable& table, HeadId head,
                                                   const Matrix& basis_part, const Vector& center,
                                                   ProjectionMode mode, const patchlab::FvRecipe& recipe,
                                                   const std::vector<int>& tasks, corpus::IntRange x_range);

// ---------------------------------------------------------------------------
// Planted fixture

struct PlantedFeatureSpec {
  double period;
  double phase;
};

std::vector<PlantedFeatureSpec> default_planted_features();
/// The planted sinusoids evaluated at task offset k.
Vector planted_feature_values(int k, const std::vector<PlantedFeatureSpec>& features);

struct FixtureConfig {
  int n_layers = 8;
  int n_heads = 8;
  int d_model = 64;
  std::vector<HeadId> planted{{2, 3}, {5, 1}, {5, 6}};
  double sigma = 0.01;  // expected norm of the per-vector noise
  std::uint64_t seed = 7;
  corpus::IntRange k{1, 30};
  corpus::IntRange x{1, 100};
  std::size_t n_ood = 5;
  double amplitude = 1.0;
  double mean_scale = 1.0;
  double readout_beta = 1.0;

  nlohmann::json to_json() const;
  static FixtureConfig from_json(const nlohmann::json& j);
};

struct PlantedFixture {
  FixtureConfig config;
  std::vector<PlantedFeatureSpec> features;
  patchlab::HeadVectorTable table;
  std::map<HeadId, Matrix> planted_maps;  // d x 6: h_k = h̄ + map φ(k) (+ noise)
  Matrix readout;                         // 6 x d with readout·map = I / n_planted

  /// Span of the planted unit (periods 2/5/10) directions for `head`.
  Matrix planted_unit_span(HeadId head) const;
  Matrix planted_magnitude_span(HeadId head) const;
};

PlantedFixture make_planted_fixture(const FixtureConfig& config);

/// Zero-shot readout standing in for a model on the fixture: s = readout·v,
/// logit(y) = β (2⟨s, φ(y - x_q)⟩ - ‖φ(y - x_q)‖²) over y - x_q in [0, 50),
/// one full period of the slowest planted feature.
class FixtureReadout final : public patchlab::InterventionModel {
 public:
  explicit FixtureReadout(const PlantedFixture& fixture);

  int d_model() const override { return static_cast<int>(readout_.cols()); }
  std::optional<int> predict(int query, std::span<const double> v) const override;
  model::LossAndGrad loss_and_grad(int query, int target, std::span<const double> v) const override;

  /// Indexed by offset y - x_q.
  Vector logits(int query, std::span<const double> v) const;
  static constexpr int kWindow = 50;

 private:
  Matrix readout_;
  std::vector<PlantedFeatureSpec> features_;
  double beta_;
};

}  // namespace icl::subspace
