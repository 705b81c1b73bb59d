#pragma once

// Extractor/aggregator tracing: exact per-token decomposition of a head's
// final-position output, extraction and direction profiles, and the
// pairwise correlation statistics of per-demo task signals.

#include <cstdint>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "icl/corpus.hpp"
#include "icl/head_id.hpp"
#include "icl/numkit.hpp"
#include "icl/patchlab.hpp"
#include "icl/subspace.hpp"
#include "icl/tinyformer.hpp"

namespace icl::tracer {

using numkit::Matrix;
using numkit::Vector;

struct TapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct TokenContribution {
  std::size_t position = 0;
  corpus::TokenId token = 0;
  double alpha = 0.0;
  Vector extracted;  // O_h V_h z_t
  Vector weighted;   // alpha * extracted
  Vector projected;  // basisᵀ extracted (empty without a basis)
};

/// Decomposition from one layer's capture. `output` is O_h (d_head x d_model).
std::vector<TokenContribution> decompose_head(const model::LayerTape& layer, int head, const model::Mat& output,
                                              std::span<const corpus::TokenId> tokens,
                                              const Matrix* basis = nullptr);

std::vector<TokenContribution> decompose_head(const model::ActivationTape& tape, const model::Checkpoint& ckpt,
                                              HeadId head, std::span<const corpus::TokenId> tokens,
                                              const Matrix* basis = nullptr);

/// ‖Σ weighted − head_output‖.
double reconstruction_error(const std::vector<TokenContribution>& parts, std::span<const double> head_output);

struct ExtractionPoint {
  std::size_t position = 0;
  corpus::TokenId token = 0;
  bool is_y = false;
  double norm = 0.0;  // ‖basisᵀ extracted‖
  double alpha = 0.0;
};

struct ExtractionProfile {
  HeadId head;
  std::size_t prompt = 0;
  std::vector<ExtractionPoint> points;
  std::vector<std::size_t> y_positions;
  bool norm_peaks_at_y = false;   // top-5 positions by norm are exactly the y positions
  bool alpha_peaks_at_y = false;  // same for attention
};

ExtractionProfile extraction_profile(const model::Checkpoint& ckpt, const corpus::RenderedPrompt& prompt, HeadId head,
                                     const Matrix& basis);

/// ĥ_k = normalize(basisᵀ (h_k − center)); zero when the projection vanishes.
Vector projected_task_direction(const patchlab::HeadVectorTable& table, HeadId head, int k, const Matrix& basis,
                                std::span<const double> center);

struct DirectionProfile {
  HeadId head;
  std::size_t prompt = 0;
  std::vector<int> tasks;      // columns of `inner`
  std::vector<int> demo_k;     // y_i − x_i
  Matrix inner;                // demo x task: ⟨basisᵀ extracted at y_i, ĥ_k⟩
  std::vector<int> argmax_k;   // per demo
  std::size_t matches = 0;     // demos whose argmax equals demo_k
};

DirectionProfile direction_profile(const model::Checkpoint& ckpt, const corpus::PromptSpec& spec,
                                   const corpus::Vocabulary& vocab, HeadId head,
                                   const subspace::SubspaceBasis& basis, const patchlab::HeadVectorTable& table);

struct PairCorrelation {
  int i = 0;
  int j = 0;
  double r = 0.0;
};

struct TaskCorrelation {
  int k = 0;
  std::vector<PairCorrelation> pairs;
  std::size_t skipped = 0;  // zero-variance pairs
  double neg_sum = 0.0;
  double pos_sum = 0.0;
};

struct Range3 {
  double min = 0.0;
  double avg = 0.0;
  double max = 0.0;
};

struct CorrelationReport {
  HeadId head;
  std::string source = "model";
  std::vector<TaskCorrelation> tasks;
  Range3 abs_neg_sum;
  Range3 pos_sum;
  std::size_t skipped_pairs = 0;

  nlohmann::json to_json() const;
};

/// signals[k] is n_prompts x 5: column i holds the demo-i signal per prompt.
CorrelationReport correlation_report(const std::map<int, Matrix>& signals, HeadId head = {});

/// Per task k: five-shot prompts, signal_i = ⟨basisᵀ O_h V_h z_{y_i}, ĥ_k⟩.
std::map<int, Matrix> task_signals(const model::Checkpoint& ckpt, HeadId head, const subspace::SubspaceBasis& basis,
                                   const patchlab::HeadVectorTable& table, const corpus::TaskFamily& family,
                                   const std::vector<int>& tasks, std::size_t n_prompts, std::uint64_t seed);

CorrelationReport self_correction_stats(const model::Checkpoint& ckpt, HeadId head,
                                        const subspace::SubspaceBasis& basis, const patchlab::HeadVectorTable& table,
                                        const corpus::TaskFamily& family, const std::vector<int>& tasks,
                                        std::size_t n_prompts, std::uint64_t seed);

/// Synthetic signals s_i = mu + eps_i. With `sum_to_zero` the noise is
/// centered across the five demos (exchangeable, pairwise correlation -1/4);
/// otherwise i.i.d.
std::map<int, Matrix> planted_signals(const std::vector<int>& tasks, std::size_t n_prompts, bool sum_to_zero,
                                      std::uint64_t seed);

std::string extraction_csv(const std::vector<ExtractionProfile>& profiles);
std::string direction_csv(const std::vector<DirectionProfile>& profiles);
std::string correlation_pairs_csv(const std::vector<CorrelationReport>& reports);
std::string correlation_summary_csv(const std::vector<CorrelationReport>& reports);

}  // namespace icl::tracer
