#pragma once

// Batched forward/backward internals shared by inference, patching and training.

#include <vector>

#include "icl/tinyformer.hpp"

namespace icl::model::detail {

struct LnCache {
  Mat xhat;
  Eigen::VectorXd rstd;
};

struct LayerCache {
  LnCache ln1;
  Mat a1;  // post-norm attention input
  Mat q, k, v;
  std::vector<Mat> probs;  // index b * n_heads + h, each T x T
  Mat cat;
  LnCache ln2;
  Mat a2;
  Mat hpre, hact;
};

struct ForwardCache {
  Eigen::Index batch = 0;
  Eigen::Index seq_len = 0;
  std::vector<LayerCache> layers;
  LnCache lnf;
  Mat final_normed;
  std::vector<std::vector<TokenId>> tokens;
};

/// Logits for every position, (B*T) x V. Sequences must share a length.
Mat run_forward(const Checkpoint& ckpt, const std::vector<std::vector<TokenId>>& batch, const ForwardOptions& options,
                ForwardCache* cache, ActivationTape* tape);

/// Backpropagates `dlogits` through layers >= stop_layer. Accumulates weight
/// gradients into `grads` when non-null and returns d(loss)/d(residual entering
/// stop_layer).
Mat run_backward(const Checkpoint& ckpt, const ForwardCache& cache, const Mat& dlogits, int stop_layer,
                 Weights* grads);

}  // namespace icl::model::detail
