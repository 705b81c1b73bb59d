#include "tinyformer_engine.hpp"

#include <cmath>
#include <limits>

namespace icl::model::detail {

namespace {

constexpr double kLnEps = 1e-5;
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

Mat layer_norm(const Mat& x, const Mat& g, const Mat& b, LnCache* cache) {
  const Eigen::Index n = x.rows();
  Mat y(n, x.cols());
  if (cache) {
    cache->xhat.resize(n, x.cols());
    cache->rstd.resize(n);
  }
  for (Eigen::Index r = 0; r < n; ++r) {
    const double mean = x.row(r).mean();
    const double var = (x.row(r).array() - mean).square().mean();
    const double rstd = 1.0 / std::sqrt(var + kLnEps);
    const Eigen::RowVectorXd xhat = (x.row(r).array() - mean) * rstd;
    y.row(r) = (xhat.array() * g.row(0).array() + b.row(0).array()).matrix();
    if (cache) {
      cache->xhat.row(r) = xhat;
      cache->rstd(r) = rstd;
    }
  }
  return y;
}

Mat layer_norm_backward(const Mat& dy, const Mat& g, const LnCache& c, Mat* dg, Mat* db) {
  const Eigen::Index n = dy.rows();
  Mat dx(n, dy.cols());
  for (Eigen::Index r = 0; r < n; ++r) {
    const Eigen::ArrayXd dxhat = (dy.row(r).array() * g.row(0).array()).transpose();
    const Eigen::ArrayXd xhat = c.xhat.row(r).array().transpose();
    const double m1 = dxhat.mean();
    const double m2 = (dxhat * xhat).mean();
    dx.row(r) = (c.rstd(r) * (dxhat - m1 - xhat * m2)).matrix().transpose();
  }
  if (dg) *dg += (dy.array() * c.xhat.array()).colwise().sum().matrix();
  if (db) *db += dy.colwise().sum();
  return dx;
}

double gelu(double x) { return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x))); }

double gelu_grad(double x) {
  const double u = kGeluC * (x + kGeluA * x * x * x);
  const double t = std::tanh(u);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * x * x);
}

void check_tokens(const Checkpoint& ckpt, const std::vector<std::vector<TokenId>>& batch) {
  if (batch.empty()) throw ShapeError("empty batch");
  const std::size_t T = batch.front().size();
  if (T == 0) throw ShapeError("empty token sequence");
  if (T > static_cast<std::size_t>(ckpt.config.max_seq_len)) {
    throw ShapeError("sequence length " + std::to_string(T) + " exceeds max_seq_len " +
                     std::to_string(ckpt.config.max_seq_len));
  }
  for (const auto& seq : batch) {
    if (seq.size() != T) throw ShapeError("batch sequences must share a length");
    for (TokenId t : seq)
      if (t < 0 || t >= ckpt.config.vocab_size) throw VocabError("unknown token id " + std::to_string(t));
  }
}

}  // namespace

Mat run_forward(const Checkpoint& ckpt, const std::vector<std::vector<TokenId>>& batch, const ForwardOptions& options,
                ForwardCache* cache, ActivationTape* tape) {
  check_tokens(ckpt, batch);
  const auto& cfg = ckpt.config;
  const auto& w = ckpt.weights;
  const auto B = static_cast<Eigen::Index>(batch.size());
  const auto T = static_cast<Eigen::Index>(batch.front().size());
  const int H = cfg.n_heads;
  const int dh = cfg.d_head();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  if (tape && B != 1) throw ShapeError("activation capture requires a single prompt");
  for (const auto& [hid, vec] : options.overrides) {
    ckpt.check_head(hid);
    if (vec.size() != static_cast<std::size_t>(cfg.d_model)) throw ShapeError("override vector has wrong length");
  }
  if (options.patch) {
    const auto& p = *options.patch;
    if (p.layer < 0 || p.layer >= cfg.n_layers) throw ShapeError("patch layer out of range");
    if (p.position >= static_cast<std::size_t>(T)) throw ShapeError("patch position out of range");
    if (p.vector.size() != static_cast<std::size_t>(cfg.d_model)) throw ShapeError("patch vector has wrong length");
  }

  Mat x(B * T, cfg.d_model);
  for (Eigen::Index b = 0; b < B; ++b)
    for (Eigen::Index t = 0; t < T; ++t)
      x.row(b * T + t) = w.tok_emb.row(batch[static_cast<std::size_t>(b)][static_cast<std::size_t>(t)]) + w.pos_emb.row(t);

  if (cache) {
    cache->batch = B;
    cache->seq_len = T;
    cache->layers.assign(static_cast<std::size_t>(cfg.n_layers), {});
    cache->tokens = batch;
  }
  if (tape) tape->layers.assign(static_cast<std::size_t>(cfg.n_layers), {});

  for (int l = 0; l < cfg.n_layers; ++l) {
    const auto& lw = w.layers[static_cast<std::size_t>(l)];
    if (options.patch && options.patch->layer == l) {
      const auto& p = *options.patch;
      const Eigen::Map<const Eigen::RowVectorXd> pv(p.vector.data(), cfg.d_model);
      for (Eigen::Index b = 0; b < B; ++b) {
        auto row = x.row(b * T + static_cast<Eigen::Index>(p.position));
        if (p.mode == PatchMode::Add) {
          row += pv;
        } else {
          row = pv;
        }
      }
    }

    LayerCache local;
    LayerCache& lc = cache ? cache->layers[static_cast<std::size_t>(l)] : local;
    lc.a1 = layer_norm(x, lw.ln1_g, lw.ln1_b, &lc.ln1);
    lc.q = lc.a1 * lw.wq;
    lc.k = lc.a1 * lw.wk;
    lc.v = lc.a1 * lw.wv;
    lc.cat = Mat::Zero(B * T, cfg.d_model);
    lc.probs.assign(static_cast<std::size_t>(B * H), Mat());

    for (Eigen::Index b = 0; b < B; ++b) {
      for (int h = 0; h < H; ++h) {
        const auto Q = lc.q.block(b * T, h * dh, T, dh);
        const auto K = lc.k.block(b * T, h * dh, T, dh);
        const auto V = lc.v.block(b * T, h * dh, T, dh);
        Mat P = (Q * K.transpose()) * scale;
        for (Eigen::Index i = 0; i < T; ++i) {
          const double mx = P.row(i).head(i + 1).maxCoeff();
          double sum = 0.0;
          for (Eigen::Index j = 0; j <= i; ++j) {
            P(i, j) = std::exp(P(i, j) - mx);
            sum += P(i, j);
          }
          for (Eigen::Index j = 0; j <= i; ++j) P(i, j) /= sum;
          for (Eigen::Index j = i + 1; j < T; ++j) P(i, j) = 0.0;
        }
        lc.cat.block(b * T, h * dh, T, dh) = P * V;
        lc.probs[static_cast<std::size_t>(b * H + h)] = std::move(P);
      }
    }

    Mat attn_out = lc.cat * lw.wo;
    if (tape) {
      auto& lt = tape->layers[static_cast<std::size_t>(l)];
      lt.resid_in = x;
      lt.attn_in = lc.a1;
      lt.values = lc.v;
      lt.attn_last.resize(H, T);
      lt.head_out_last.resize(H, cfg.d_model);
      for (int h = 0; h < H; ++h) {
        lt.attn_last.row(h) = lc.probs[static_cast<std::size_t>(h)].row(T - 1);
        lt.head_out_last.row(h) = lc.cat.row(T - 1).segment(h * dh, dh) * lw.wo.middleRows(h * dh, dh);
      }
    }
    for (const auto& [hid, vec] : options.overrides) {
      if (hid.layer != l) continue;
      const Eigen::Map<const Eigen::RowVectorXd> ov(vec.data(), cfg.d_model);
      for (Eigen::Index b = 0; b < B; ++b) {
        const Eigen::Index r = b * T + T - 1;
        const Eigen::RowVectorXd contrib = lc.cat.row(r).segment(hid.head * dh, dh) * lw.wo.middleRows(hid.head * dh, dh);
        attn_out.row(r) += ov - contrib;
      }
      if (tape) tape->layers[static_cast<std::size_t>(l)].head_out_last.row(hid.head) = ov;
    }

    x += attn_out;
    lc.a2 = layer_norm(x, lw.ln2_g, lw.ln2_b, &lc.ln2);
    lc.hpre = lc.a2 * lw.w1;
    lc.hpre.rowwise() += lw.b1.row(0);
    lc.hact = lc.hpre.unaryExpr([](double v) { return gelu(v); });
    Mat mlp = lc.hact * lw.w2;
    mlp.rowwise() += lw.b2.row(0);
    x += mlp;
  }

  LnCache lnf_local;
  Mat normed = layer_norm(x, w.lnf_g, w.lnf_b, cache ? &cache->lnf : &lnf_local);
  Mat logits = normed * w.unembed;
  if (cache) cache->final_normed = std::move(normed);
  return logits;
}

Mat run_backward(const Checkpoint& ckpt, const ForwardCache& cache, const Mat& dlogits, int stop_layer,
                 Weights* grads) {
  const auto& cfg = ckpt.config;
  const auto& w = ckpt.weights;
  const Eigen::Index B = cache.batch;
  const Eigen::Index T = cache.seq_len;
  const int H = cfg.n_heads;
  const int dh = cfg.d_head();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  if (grads) grads->unembed.noalias() += cache.final_normed.transpose() * dlogits;
  Mat dx = layer_norm_backward(dlogits * w.unembed.transpose(), w.lnf_g, cache.lnf, grads ? &grads->lnf_g : nullptr,
                               grads ? &grads->lnf_b : nullptr);

  for (int l = cfg.n_layers - 1; l >= stop_layer; --l) {
    const auto& lw = w.layers[static_cast<std::size_t>(l)];
    const auto& lc = cache.layers[static_cast<std::size_t>(l)];
    LayerWeights* lg = grads ? &grads->layers[static_cast<std::size_t>(l)] : nullptr;

    // MLP branch
    if (lg) {
      lg->w2.noalias() += lc.hact.transpose() * dx;
      lg->b2 += dx.colwise().sum();
    }
    Mat dh_pre = dx * lw.w2.transpose();
    dh_pre.array() *= lc.hpre.unaryExpr([](double v) { return gelu_grad(v); }).array();
    if (lg) {
      lg->w1.noalias() += lc.a2.transpose() * dh_pre;
      lg->b1 += dh_pre.colwise().sum();
    }
    Mat dx_mid = dx + layer_norm_backward(dh_pre * lw.w1.transpose(), lw.ln2_g, lc.ln2, lg ? &lg->ln2_g : nullptr,
                                          lg ? &lg->ln2_b : nullptr);

    // attention branch
    if (lg) lg->wo.noalias() += lc.cat.transpose() * dx_mid;
    const Mat dcat = dx_mid * lw.wo.transpose();
    Mat dq = Mat::Zero(B * T, cfg.d_model);
    Mat dk = Mat::Zero(B * T, cfg.d_model);
    Mat dv = Mat::Zero(B * T, cfg.d_model);
    for (Eigen::Index b = 0; b < B; ++b) {
      for (int h = 0; h < H; ++h) {
        const Mat& P = lc.probs[static_cast<std::size_t>(b * H + h)];
        const auto dO = dcat.block(b * T, h * dh, T, dh);
        const auto V = lc.v.block(b * T, h * dh, T, dh);
        const auto Q = lc.q.block(b * T, h * dh, T, dh);
        const auto K = lc.k.block(b * T, h * dh, T, dh);
        const Mat dP = dO * V.transpose();
        dv.block(b * T, h * dh, T, dh) = P.transpose() * dO;
        const Eigen::VectorXd rowdot = (dP.array() * P.array()).rowwise().sum();
        Mat dS = (P.array() * (dP.colwise() - rowdot).array()).matrix() * scale;
        dq.block(b * T, h * dh, T, dh) = dS * K;
        dk.block(b * T, h * dh, T, dh) = dS.transpose() * Q;
      }
    }
    if (lg) {
      lg->wq.noalias() += lc.a1.transpose() * dq;
      lg->wk.noalias() += lc.a1.transpose() * dk;
      lg->wv.noalias() += lc.a1.transpose() * dv;
    }
    const Mat da1 = dq * lw.wq.transpose() + dk * lw.wk.transpose() + dv * lw.wv.transpose();
    dx = dx_mid + layer_norm_backward(da1, lw.ln1_g, lc.ln1, lg ? &lg->ln1_g : nullptr, lg ? &lg->ln1_b : nullptr);
  }

  if (grads && stop_layer == 0) {
    for (Eigen::Index b = 0; b < B; ++b) {
      for (Eigen::Index t = 0; t < T; ++t) {
        const TokenId tok = cache.tokens[static_cast<std::size_t>(b)][static_cast<std::size_t>(t)];
        grads->tok_emb.row(tok) += dx.row(b * T + t);
        grads->pos_emb.row(t) += dx.row(b * T + t);
      }
    }
  }
  return dx;
}

}  // namespace icl::model::detail
