#pragma once

// Function-vector machinery: task-conditioned head means, mean-ablation,
// function-vector assembly and zero-shot intervention evaluation.

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "icl/corpus.hpp"
#include "icl/head_id.hpp"
#include "icl/numkit.hpp"
#include "icl/tensor_file.hpp"
#include "icl/tinyformer.hpp"

namespace icl::patchlab {

using numkit::Matrix;
using numkit::Vector;

struct RecipeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Task means h_k and overall means h̄ (mean of h_k over tasks) per head,
/// all in residual space.
class HeadVectorTable {
 public:
  HeadVectorTable() = default;
  HeadVectorTable(int n_layers, int n_heads, int d_model, std::vector<int> tasks);

  int n_layers() const { return n_layers_; }
  int n_heads() const { return n_heads_; }
  int d_model() const { return d_model_; }
  const std::vector<int>& tasks() const { return tasks_; }
  std::size_t task_index(int k) const;
  bool has_task(int k) const;
  std::vector<HeadId> heads() const;
  void check_head(HeadId h) const;

  /// n_tasks x d_model, row i is h_k for tasks()[i].
  const Matrix& task_means(HeadId h) const;
  Matrix& task_means(HeadId h);
  std::span<const double> task_mean(HeadId h, int k) const;
  const Vector& overall_mean(HeadId h) const;

  void recompute_overall_means();

  nlohmann::json provenance = nlohmann::json::object();

  io::TensorFile to_tensor_file() const;
  static HeadVectorTable from_tensor_file(const io::TensorFile& file);

 private:
  std::size_t flat(HeadId h) const;

  int n_layers_ = 0;
  int n_heads_ = 0;
  int d_model_ = 0;
  std::vector<int> tasks_;
  std::vector<Matrix> task_means_;
  std::vector<Vector> overall_;
};

HeadVectorTable compute_head_vectors(const model::Checkpoint& ckpt, const corpus::TaskFamily& family,
                                     const std::vector<int>& tasks, std::size_t n_prompts_per_task,
                                     std::uint64_t seed);

/// Affine projection center + P (h - center), or its complement
/// center + (I - P)(h - center), with P = basis basisᵀ.
struct HeadProjection {
  Matrix basis;  // d x r, orthonormal columns
  Vector center;
  bool complement = false;

  Vector apply(std::span<const double> h) const;
};

struct FvRecipe {
  std::vector<HeadId> kept;
  std::vector<HeadId> ablated;
  std::map<HeadId, double> coeffs;  // default 1
  std::map<HeadId, HeadProjection> projections;

  nlohmann::json to_json() const;
};

struct FunctionVector {
  int task = 0;
  Vector vector;
  FvRecipe recipe;
};

/// v_k = Σ_{h ∈ ablated} h̄ + Σ_{h ∈ kept} c_h P_h(h_k).
FunctionVector build_fv(const HeadVectorTable& table, int k, const FvRecipe& recipe);

/// Σ_{h ∈ heads} h_k, summed in (layer, head) order.
Vector plain_fv(const HeadVectorTable& table, int k, std::vector<HeadId> heads);

/// Zero-shot model with a patch site; implemented by the transformer and by
/// the planted-fixture readout.
class InterventionModel {
 public:
  virtual ~InterventionModel() = default;
  virtual int d_model() const = 0;
  /// Predicted integer for query "x_q ->" with v added at the patch site;
  /// nullopt when the argmax is not a number.
  virtual std::optional<int> predict(int query, std::span<const double> v) const = 0;
  /// Cross-entropy of `target` and its gradient with respect to v.
  virtual model::LossAndGrad loss_and_grad(int query, int target, std::span<const double> v) const = 0;
};

class TransformerIntervention final : public InterventionModel {
 public:
  TransformerIntervention(const model::Checkpoint& ckpt, corpus::Vocabulary vocab);

  int d_model() const override { return ckpt_.config.d_model; }
  std::optional<int> predict(int query, std::span<const double> v) const override;
  model::LossAndGrad loss_and_grad(int query, int target, std::span<const double> v) const override;
  int patch_layer() const { return layer_; }

 private:
  std::vector<corpus::TokenId> zero_shot_tokens(int query) const;

  const model::Checkpoint& ckpt_;
  corpus::Vocabulary vocab_;
  int layer_;
};

struct AccuracyReport {
  std::map<int, double> per_task;
  double mean = 0.0;

  nlohmann::json to_json() const;
  std::string to_csv() const;
};

using FvBuilder = std::function<Vector(int k)>;

AccuracyReport intervention_accuracy(const InterventionModel& model, const FvBuilder& builder,
                                     const std::vector<int>& tasks, corpus::IntRange x_range);

/// Five-shot accuracy per task; queries cover x_range once per task.
AccuracyReport clean_accuracy(const model::Checkpoint& ckpt, const corpus::TaskFamily& family,
                              const std::vector<int>& tasks, std::uint64_t seed);

/// Five-shot accuracy with each listed head's final-position output replaced by h̄.
AccuracyReport five_shot_head_ablation(const model::Checkpoint& ckpt, const HeadVectorTable& table,
                                       const std::vector<HeadId>& heads, const corpus::TaskFamily& family,
                                       const std::vector<int>& tasks, std::uint64_t seed);

/// `n_draws` random head sets of size `size` drawn without replacement from `pool`.
std::vector<std::vector<HeadId>> random_head_sets(const std::vector<HeadId>& pool, std::size_t size,
                                                  std::size_t n_draws, std::uint64_t seed);

}  // namespace icl::patchlab
