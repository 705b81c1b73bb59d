#pragma once

// Decoder-only transformer with activation capture, residual patching and
// head-output overrides. Pre-norm blocks, learned positions, GELU MLP,
// bias-free attention projections. All math in f64.

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "icl/corpus.hpp"
#include "icl/head_id.hpp"
#include "icl/tensor_file.hpp"

namespace icl::model {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using corpus::TokenId;

struct ModelError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct VocabError : ModelError {
  using ModelError::ModelError;
};
struct ShapeError : ModelError {
  using ModelError::ModelError;
};
struct HeadIdError : ModelError {
  using ModelError::ModelError;
};
struct TrainingError : ModelError {
  using ModelError::ModelError;
};

struct ModelConfig {
  int n_layers = 6;
  int n_heads = 4;
  int d_model = 64;
  int d_mlp = 256;
  int vocab_size = 65;
  int max_seq_len = 32;
  std::optional<int> patch_layer;  // defaults to n_layers / 3

  int d_head() const { return d_model / n_heads; }
  int resolved_patch_layer() const { return patch_layer.value_or(n_layers / 3); }
  void validate() const;

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

struct LayerWeights {
  Mat ln1_g, ln1_b;          // 1 x d
  Mat wq, wk, wv;            // d x d; head h owns columns [h*dh, (h+1)*dh)
  Mat wo;                    // d x d; head h owns rows [h*dh, (h+1)*dh)
  Mat ln2_g, ln2_b;          // 1 x d
  Mat w1, b1;                // d x m, 1 x m
  Mat w2, b2;                // m x d, 1 x d
};

struct Weights {
  Mat tok_emb;  // V x d
  Mat pos_emb;  // S x d
  std::vector<LayerWeights> layers;
  Mat lnf_g, lnf_b;
  Mat unembed;  // d x V

  static Weights zeros_like(const ModelConfig& cfg);
  static Weights initialized(const ModelConfig& cfg, std::uint64_t seed);

  /// Visits every tensor with a stable name; `decay` marks matrices subject to weight decay.
  void for_each(const std::function<void(const std::string& name, Mat& t, bool decay)>& fn);
  void for_each(const std::function<void(const std::string& name, const Mat& t, bool decay)>& fn) const;
};

struct Checkpoint {
  ModelConfig config;
  Weights weights;
  nlohmann::json metadata = nlohmann::json::object();

  /// V_h as a d_model x d_head block (row vector z maps to z * V_h).
  Mat value_matrix(HeadId h) const;
  /// O_h as a d_head x d_model block.
  Mat output_matrix(HeadId h) const;

  void check_head(HeadId h) const;
  int n_heads_total() const { return config.n_layers * config.n_heads; }
  std::vector<HeadId> all_heads() const;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);
io::TensorFile to_tensor_file(const Checkpoint& ckpt);
Checkpoint from_tensor_file(const io::TensorFile& file);

/// Per-layer captures for one prompt.
struct LayerTape {
  Mat resid_in;       // T x d: residual stream entering the layer (after any patch)
  Mat attn_in;        // T x d: post-norm vectors z_t multiplied by Q/K/V
  Mat values;         // T x d: concatenated per-head value vectors z_t V_h
  Mat attn_last;      // H x T: attention row of the final position, per head
  Mat head_out_last;  // H x d: per-head contribution at the final position
};

struct ActivationTape {
  std::vector<LayerTape> layers;
  std::vector<double> final_logits;

  std::size_t seq_len() const { return layers.empty() ? 0 : static_cast<std::size_t>(layers.front().attn_in.rows()); }
};

enum class PatchMode { Add, Replace };

struct Patch {
  int layer = 0;
  std::size_t position = 0;
  std::vector<double> vector;
  PatchMode mode = PatchMode::Add;
};

using HeadOverrides = std::map<HeadId, std::vector<double>>;

struct ForwardOptions {
  std::optional<Patch> patch;
  HeadOverrides overrides;  // final-position head contributions
};

/// Final-position logits; optionally fills a tape.
std::vector<double> forward(const Checkpoint& ckpt, std::span<const TokenId> tokens, ActivationTape* tape = nullptr);

std::vector<double> forward_patched(const Checkpoint& ckpt, std::span<const TokenId> tokens, int layer,
                                    std::size_t position, std::span<const double> v, PatchMode mode);

std::vector<double> forward_with_head_override(const Checkpoint& ckpt, std::span<const TokenId> tokens,
                                               const HeadOverrides& overrides);

std::vector<double> forward_with_options(const Checkpoint& ckpt, std::span<const TokenId> tokens,
                                         const ForwardOptions& options, ActivationTape* tape = nullptr);

struct LossAndGrad {
  double loss = 0.0;
  std::vector<double> grad;
};

/// Cross-entropy of `target` at the final position when `v` is added to the
/// residual stream entering `layer` at the final position; gradient is taken
/// by reverse mode through layers >= `layer` with weights frozen.
LossAndGrad loss_and_grad_wrt_patch(const Checkpoint& ckpt, std::span<const TokenId> tokens, TokenId target,
                                    int layer, std::span<const double> v);

std::size_t argmax(std::span<const double> v);

struct TrainConfig {
  std::uint64_t seed = 1234;
  int steps = 6000;
  int batch_size = 32;
  double lr = 3e-3;
  double min_lr_ratio = 0.1;
  int warmup_steps = 200;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-8;
  double grad_clip = 1.0;
  double aux_lm_weight = 0.1;
  int eval_prompts = 1000;
  int log_every = 500;

  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

struct TrainLogEntry {
  int step = 0;
  double loss = 0.0;
  double lr = 0.0;
};

/// Trains on freshly sampled five-shot prompts from `family`. Metadata of the
/// returned checkpoint records the held-out five-shot accuracy.
Checkpoint train(const ModelConfig& config, const corpus::TaskFamily& family, const TrainConfig& hp,
                 const std::function<void(const TrainLogEntry&)>& log = {});

/// Five-shot argmax accuracy over `n_prompts` fresh prompts.
double five_shot_accuracy(const Checkpoint& ckpt, const corpus::TaskFamily& family, std::size_t n_prompts,
                          std::uint64_t seed);

/// Mean loss and full gradient for a batch of equal-length sequences; used by
/// training and exposed for gradient tests.
double batch_loss_and_grad(const Checkpoint& ckpt, const std::vector<std::vector<TokenId>>& batch,
                           const std::vector<TokenId>& answers, double aux_lm_weight, Weights* grads);

}  // namespace icl::model
