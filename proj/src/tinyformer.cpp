#include "icl/tinyformer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include "tinyformer_engine.hpp"

namespace icl::model {

void ModelConfig::validate() const {
  if (n_layers <= 0 || n_heads <= 0 || d_model <= 0 || d_mlp <= 0 || vocab_size <= 0 || max_seq_len <= 0) {
    throw ShapeError("model config: all sizes must be positive");
  }
  if (d_model % n_heads != 0) {
    throw ShapeError("model config: d_model " + std::to_string(d_model) + " not divisible by n_heads " +
                     std::to_string(n_heads));
  }
  const int pl = resolved_patch_layer();
  if (pl < 0 || pl >= n_layers) throw ShapeError("model config: patch_layer " + std::to_string(pl) + " out of range");
}

nlohmann::json ModelConfig::to_json() const {
  nlohmann::json j{{"n_layers", n_layers}, {"n_heads", n_heads},         {"d_model", d_model},
                   {"d_mlp", d_mlp},       {"vocab_size", vocab_size},   {"max_seq_len", max_seq_len}};
  j["patch_layer"] = patch_layer ? nlohmann::json(*patch_layer) : nlohmann::json(nullptr);
  return j;
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.n_layers = j.value("n_layers", c.n_layers);
  c.n_heads = j.value("n_heads", c.n_heads);
  c.d_model = j.value("d_model", c.d_model);
  c.d_mlp = j.value("d_mlp", c.d_mlp);
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.max_seq_len = j.value("max_seq_len", c.max_seq_len);
  if (j.contains("patch_layer") && !j["patch_layer"].is_null()) c.patch_layer = j["patch_layer"].get<int>();
  return c;
}

Weights Weights::zeros_like(const ModelConfig& cfg) {
  const int d = cfg.d_model, m = cfg.d_mlp, v = cfg.vocab_size;
  Weights w;
  w.tok_emb = Mat::Zero(v, d);
  w.pos_emb = Mat::Zero(cfg.max_seq_len, d);
  w.layers.resize(static_cast<std::size_t>(cfg.n_layers));
  for (auto& l : w.layers) {
    l.ln1_g = Mat::Zero(1, d);
    l.ln1_b = Mat::Zero(1, d);
    l.wq = Mat::Zero(d, d);
    l.wk = Mat::Zero(d, d);
    l.wv = Mat::Zero(d, d);
    l.wo = Mat::Zero(d, d);
    l.ln2_g = Mat::Zero(1, d);
    l.ln2_b = Mat::Zero(1, d);
    l.w1 = Mat::Zero(d, m);
    l.b1 = Mat::Zero(1, m);
    l.w2 = Mat::Zero(m, d);
    l.b2 = Mat::Zero(1, d);
  }
  w.lnf_g = Mat::Zero(1, d);
  w.lnf_b = Mat::Zero(1, d);
  w.unembed = Mat::Zero(d, v);
  return w;
}

Weights Weights::initialized(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Weights w = zeros_like(cfg);
  std::mt19937_64 rng(corpus::mix_seed(seed, 0x1417));
  std::normal_distribution<double> normal(0.0, 1.0);
  const double base = 0.02;
  const double resid = base / std::sqrt(2.0 * cfg.n_layers);
  w.for_each([&](const std::string& name, Mat& t, bool decay) {
    const bool is_gain = name.ends_with("_g");
    if (is_gain) {
      t.setOnes();
      return;
    }
    if (!decay && !name.ends_with("emb")) return;  // biases stay zero
    const double std = (name.ends_with(".wo") || name.ends_with(".w2")) ? resid : base;
    for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = std * normal(rng);
  });
  return w;
}

void Weights::for_each(const std::function<void(const std::string&, Mat&, bool)>& fn) {
  fn("tok_emb", tok_emb, false);
  fn("pos_emb", pos_emb, false);
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const std::string p = "layers." + std::to_string(i);
    auto& l = layers[i];
    fn(p + ".ln1_g", l.ln1_g, false);
    fn(p + ".ln1_b", l.ln1_b, false);
    fn(p + ".wq", l.wq, true);
    fn(p + ".wk", l.wk, true);
    fn(p + ".wv", l.wv, true);
    fn(p + ".wo", l.wo, true);
    fn(p + ".ln2_g", l.ln2_g, false);
    fn(p + ".ln2_b", l.ln2_b, false);
    fn(p + ".w1", l.w1, true);
    fn(p + ".b1", l.b1, false);
    fn(p + ".w2", l.w2, true);
    fn(p + ".b2", l.b2, false);
  }
  fn("lnf_g", lnf_g, false);
  fn("lnf_b", lnf_b, false);
  fn("unembed", unembed, true);
}

void Weights::for_each(const std::function<void(const std::string&, const Mat&, bool)>& fn) const {
  const_cast<Weights*>(this)->for_each([&](const std::string& n, Mat& t, bool d) { fn(n, t, d); });
}

void Checkpoint::check_head(HeadId h) const {
  if (h.layer < 0 || h.layer >= config.n_layers || h.head < 0 || h.head >= config.n_heads) {
    throw HeadIdError("unknown head " + h.str());
  }
}

Mat Checkpoint::value_matrix(HeadId h) const {
  check_head(h);
  const int dh = config.d_head();
  return weights.layers[static_cast<std::size_t>(h.layer)].wv.middleCols(h.head * dh, dh);
}

Mat Checkpoint::output_matrix(HeadId h) const {
  check_head(h);
  const int dh = config.d_head();
  return weights.layers[static_cast<std::size_t>(h.layer)].wo.middleRows(h.head * dh, dh);
}

std::vector<HeadId> Checkpoint::all_heads() const {
  std::vector<HeadId> out;
  for (int l = 0; l < config.n_layers; ++l)
    for (int h = 0; h < config.n_heads; ++h) out.push_back({l, h});
  return out;
}

io::TensorFile to_tensor_file(const Checkpoint& ckpt) {
  io::TensorFile file;
  ckpt.weights.for_each([&](const std::string& name, const Mat& t, bool) {
    io::Tensor tensor;
    tensor.name = name;
    tensor.dims = {static_cast<std::uint64_t>(t.rows()), static_cast<std::uint64_t>(t.cols())};
    tensor.dtype = io::Dtype::F64;
    tensor.values.assign(t.data(), t.data() + t.size());
    file.tensors.push_back(std::move(tensor));
  });
  file.metadata = ckpt.metadata;
  file.metadata["config"] = ckpt.config.to_json();
  return file;
}

Checkpoint from_tensor_file(const io::TensorFile& file) {
  Checkpoint ckpt;
  if (!file.metadata.contains("config")) throw io::FormatError("checkpoint metadata lacks 'config'");
  ckpt.config = ModelConfig::from_json(file.metadata["config"]);
  ckpt.config.validate();
  ckpt.metadata = file.metadata;
  ckpt.metadata.erase("config");
  ckpt.weights = Weights::zeros_like(ckpt.config);
  ckpt.weights.for_each([&](const std::string& name, Mat& t, bool) {
    const auto& tensor = file.get(name);
    if (tensor.dims.size() != 2 || tensor.dims[0] != static_cast<std::uint64_t>(t.rows()) ||
        tensor.dims[1] != static_cast<std::uint64_t>(t.cols())) {
      throw io::FormatError("tensor '" + name + "' has shape inconsistent with the model config");
    }
    std::copy(tensor.values.begin(), tensor.values.end(), t.data());
    if (!t.allFinite()) throw io::FormatError("tensor '" + name + "' has non-finite entries");
  });
  return ckpt;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) { io::write_tensor_file(path, to_tensor_file(ckpt)); }

Checkpoint load_checkpoint(const std::string& path) { return from_tensor_file(io::read_tensor_file(path)); }

std::size_t argmax(std::span<const double> v) {
  return static_cast<std::size_t>(std::distance(v.begin(), std::max_element(v.begin(), v.end())));
}

namespace {

std::vector<double> last_row(const Mat& logits) {
  const auto r = logits.rows() - 1;
  return std::vector<double>(logits.row(r).data(), logits.row(r).data() + logits.cols());
}

}  // namespace

std::vector<double> forward_with_options(const Checkpoint& ckpt, std::span<const TokenId> tokens,
                                         const ForwardOptions& options, ActivationTape* tape) {
  const std::vector<std::vector<TokenId>> batch{std::vector<TokenId>(tokens.begin(), tokens.end())};
  const Mat logits = detail::run_forward(ckpt, batch, options, nullptr, tape);
  auto out = last_row(logits);
  if (tape) tape->final_logits = out;
  return out;
}

std::vector<double> forward(const Checkpoint& ckpt, std::span<const TokenId> tokens, ActivationTape* tape) {
  return forward_with_options(ckpt, tokens, {}, tape);
}

std::vector<double> forward_patched(const Checkpoint& ckpt, std::span<const TokenId> tokens, int layer,
                                    std::size_t position, std::span<const double> v, PatchMode mode) {
  ForwardOptions opts;
  opts.patch = Patch{layer, position, std::vector<double>(v.begin(), v.end()), mode};
  return forward_with_options(ckpt, tokens, opts);
}

std::vector<double> forward_with_head_override(const Checkpoint& ckpt, std::span<const TokenId> tokens,
                                               const HeadOverrides& overrides) {
  ForwardOptions opts;
  opts.overrides = overrides;
  return forward_with_options(ckpt, tokens, opts);
}

LossAndGrad loss_and_grad_wrt_patch(const Checkpoint& ckpt, std::span<const TokenId> tokens, TokenId target,
                                    int layer, std::span<const double> v) {
  if (target < 0 || target >= ckpt.config.vocab_size) throw VocabError("target token out of range");
  ForwardOptions opts;
  const std::size_t final_pos = tokens.size() - 1;
  opts.patch = Patch{layer, final_pos, std::vector<double>(v.begin(), v.end()), PatchMode::Add};
  const std::vector<std::vector<TokenId>> batch{std::vector<TokenId>(tokens.begin(), tokens.end())};
  detail::ForwardCache cache;
  const Mat logits = detail::run_forward(ckpt, batch, opts, &cache, nullptr);

  const auto row = logits.row(logits.rows() - 1);
  const double mx = row.maxCoeff();
  const double lse = mx + std::log((row.array() - mx).exp().sum());
  LossAndGrad out;
  out.loss = lse - row(target);

  Mat dlogits = Mat::Zero(logits.rows(), logits.cols());
  dlogits.row(logits.rows() - 1) = (row.array() - lse).exp();
  dlogits(logits.rows() - 1, target) -= 1.0;
  const Mat dresid = detail::run_backward(ckpt, cache, dlogits, layer, nullptr);
  const auto g = dresid.row(static_cast<Eigen::Index>(final_pos));
  out.grad.assign(g.data(), g.data() + g.size());
  return out;
}

double batch_loss_and_grad(const Checkpoint& ckpt, const std::vector<std::vector<TokenId>>& batch,
                           const std::vector<TokenId>& answers, double aux_lm_weight, Weights* grads) {
  if (batch.size() != answers.size() || batch.empty()) throw ShapeError("batch/answers size mismatch");
  detail::ForwardCache cache;
  const Mat logits = detail::run_forward(ckpt, batch, {}, grads ? &cache : nullptr, nullptr);
  const auto B = static_cast<Eigen::Index>(batch.size());
  const auto T = static_cast<Eigen::Index>(batch.front().size());
  const double inv_b = 1.0 / static_cast<double>(B);
  const double aux_w = T > 1 ? aux_lm_weight / static_cast<double>(T - 1) : 0.0;

  Mat dlogits = Mat::Zero(logits.rows(), logits.cols());
  double loss = 0.0;
  auto ce = [&](Eigen::Index r, TokenId target, double weight) {
    const auto row = logits.row(r);
    const double mx = row.maxCoeff();
    const double lse = mx + std::log((row.array() - mx).exp().sum());
    loss += weight * (lse - row(target));
    dlogits.row(r) += weight * (row.array() - lse).exp().matrix();
    dlogits(r, target) -= weight;
  };
  for (Eigen::Index b = 0; b < B; ++b) {
    const auto& seq = batch[static_cast<std::size_t>(b)];
    ce(b * T + T - 1, answers[static_cast<std::size_t>(b)], inv_b);
    if (aux_w > 0)
      for (Eigen::Index t = 0; t + 1 < T; ++t) ce(b * T + t, seq[static_cast<std::size_t>(t + 1)], aux_w * inv_b);
  }
  if (grads) detail::run_backward(ckpt, cache, dlogits, 0, grads);
  return loss;
}

}  // namespace icl::model
