#pragma once

// Sparse head localization: box-constrained, l1-regularized coefficients over
// all heads, fitted by projected Adam steps on the zero-shot intervention loss,
// plus the layer and single-head ablation scans used to refine the result.

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "icl/corpus.hpp"
#include "icl/head_id.hpp"
#include "icl/patchlab.hpp"

namespace icl::localizer {

using numkit::Vector;

struct OptimizationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct OptimizerConfig {
  double learning_rate = 0.01;
  std::size_t batch_size = 128;
  double lambda = 0.05;
  int epochs = 50;
  std::uint64_t seed = 0;
  double init = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;  // decoupled, as in AdamW
  double threshold = 0.2;

  void validate() const;
  nlohmann::json to_json() const;
  static OptimizerConfig from_json(const nlohmann::json& j);
};

struct EpochLog {
  int epoch = 0;
  double train_loss = 0.0;  // mean data loss over the epoch's batches
  double val_acc = 0.0;
  double ood_acc = 0.0;
  std::size_t nnz_above_threshold = 0;

  nlohmann::json to_json() const;
};

struct CoefficientVector {
  std::vector<HeadId> heads;  // (layer, head) order
  Vector c;                   // each entry in [0, 1]
  std::vector<EpochLog> history;

  double at(HeadId h) const;
  std::string heatmap_csv() const;
  std::string log_jsonl() const;
};

struct LocalizationData {
  std::vector<corpus::DataPoint> train;
  std::vector<corpus::DataPoint> val;
  std::vector<corpus::DataPoint> test;
  std::vector<corpus::DataPoint> ood;
};

/// Zero-shot data points for train/OOD task splits, with the train tasks'
/// points partitioned by `fractions`.
LocalizationData make_localization_data(const corpus::TaskSplit& tasks, corpus::IntRange x_range,
                                        std::array<double, 3> fractions, std::uint64_t seed);

/// v_k(c) = Σ_h c_h h_k over all heads in table order.
Vector weighted_fv(const patchlab::HeadVectorTable& table, int k, std::span<const double> c);

struct ObjectiveValue {
  double data_loss = 0.0;  // mean cross-entropy over the batch
  double objective = 0.0;  // data_loss + λ‖c‖₁
  Vector grad;             // d objective / d c (subgradient +λ for the l1 term)
};

/// Batched objective and its chain-rule gradient: one backward per data point
/// gives ∂ℓ/∂v, which is dotted with each head's h_k.
ObjectiveValue objective_and_grad(const patchlab::InterventionModel& model, const patchlab::HeadVectorTable& table,
                                  std::span<const double> c, const std::vector<corpus::DataPoint>& batch,
                                  double lambda);

/// Fraction of points whose argmax under v_k(c) is x_q + k.
double weighted_accuracy(const patchlab::InterventionModel& model, const patchlab::HeadVectorTable& table,
                         std::span<const double> c, const std::vector<corpus::DataPoint>& points);

CoefficientVector optimize(const patchlab::InterventionModel& model, const patchlab::HeadVectorTable& table,
                           const LocalizationData& data, const OptimizerConfig& config);

/// Heads with c_h > threshold, sorted by (layer, head).
std::vector<HeadId> significant_heads(const CoefficientVector& c, double threshold = 0.2);

/// Unit-weight accuracy: Σ_{h ∈ heads} h_k as the function vector.
double unit_weight_accuracy(const patchlab::InterventionModel& model, const patchlab::HeadVectorTable& table,
                            const std::vector<HeadId>& heads, const std::vector<corpus::DataPoint>& points);

struct LayerScanRow {
  std::vector<int> layers;
  std::vector<HeadId> kept;
  double accuracy = 0.0;
};

/// Keeps h_k for significant heads inside each layer subset, ablates the rest to h̄.
std::vector<LayerScanRow> layer_ablation_scan(const patchlab::InterventionModel& model,
                                              const patchlab::HeadVectorTable& table,
                                              const std::vector<HeadId>& sig_heads,
                                              const std::vector<std::vector<int>>& layer_subsets,
                                              const std::vector<int>& tasks, corpus::IntRange x_range);

/// Empty set, every single layer, every pair, and the full set of layers that
/// contain significant heads.
std::vector<std::vector<int>> default_layer_subsets(const std::vector<HeadId>& sig_heads);

std::string layer_scan_csv(const std::vector<LayerScanRow>& rows);

struct HeadScaleResult {
  HeadId head;
  std::vector<std::pair<int, double>> curve;  // (coeff, accuracy)
  int best_coeff = 0;
  double best_accuracy = 0.0;
};

/// For each candidate: all other significant heads ablated to h̄, candidate
/// kept and scaled by each integer coefficient in [coeff_lo, coeff_hi].
std::vector<HeadScaleResult> head_scale_scan(const patchlab::InterventionModel& model,
                                             const patchlab::HeadVectorTable& table,
                                             const std::vector<HeadId>& sig_heads,
                                             const std::vector<HeadId>& candidates, int coeff_lo, int coeff_hi,
                                             const std::vector<int>& tasks, corpus::IntRange x_range);

std::string head_scale_csv(const std::vector<HeadScaleResult>& rows);

}  // namespace icl::localizer
