#include <cmath>
#include <numbers>
#include <random>

#include "icl/tinyformer.hpp"
#include "tinyformer_engine.hpp"

namespace icl::model {

nlohmann::json TrainConfig::to_json() const {
  return {{"seed", seed},
          {"steps", steps},
          {"batch_size", batch_size},
          {"lr", lr},
          {"min_lr_ratio", min_lr_ratio},
          {"warmup_steps", warmup_steps},
          {"weight_decay", weight_decay},
          {"beta1", beta1},
          {"beta2", beta2},
          {"eps", eps},
          {"grad_clip", grad_clip},
          {"aux_lm_weight", aux_lm_weight},
          {"eval_prompts", eval_prompts},
          {"log_every", log_every}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.seed = j.value("seed", c.seed);
  c.steps = j.value("steps", c.steps);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.lr = j.value("lr", c.lr);
  c.min_lr_ratio = j.value("min_lr_ratio", c.min_lr_ratio);
  c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.eps = j.value("eps", c.eps);
  c.grad_clip = j.value("grad_clip", c.grad_clip);
  c.aux_lm_weight = j.value("aux_lm_weight", c.aux_lm_weight);
  c.eval_prompts = j.value("eval_prompts", c.eval_prompts);
  c.log_every = j.value("log_every", c.log_every);
  return c;
}

namespace {

struct Sample {
  std::vector<TokenId> tokens;
  TokenId answer;
};

Sample sample_five_shot(const corpus::TaskFamily& family, const corpus::Vocabulary& vocab, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> draw_x(family.x.lo, family.x.hi);
  std::uniform_int_distribution<int> draw_k(family.k.lo, family.k.hi);
  const int k = draw_k(rng);
  std::vector<int> demos(corpus::kShots);
  for (int& d : demos) d = draw_x(rng);
  const int q = draw_x(rng);
  const auto rendered = corpus::render(corpus::PromptSpec::five_shot(k, std::move(demos), q), vocab);
  return {rendered.tokens, vocab.number(*rendered.answer)};
}

double scheduled_lr(const TrainConfig& hp, int step) {
  if (step < hp.warmup_steps) return hp.lr * static_cast<double>(step + 1) / static_cast<double>(hp.warmup_steps);
  const double span = std::max(1, hp.steps - hp.warmup_steps);
  const double progress = std::min(1.0, static_cast<double>(step - hp.warmup_steps) / span);
  const double cosine = 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
  return hp.lr * (hp.min_lr_ratio + (1.0 - hp.min_lr_ratio) * cosine);
}

}  // namespace

double five_shot_accuracy(const Checkpoint& ckpt, const corpus::TaskFamily& family, std::size_t n_prompts,
                          std::uint64_t seed) {
  if (n_prompts == 0) return 0.0;
  const auto vocab = family.vocabulary();
  std::mt19937_64 rng(corpus::mix_seed(seed, 0xE7A1));
  constexpr std::size_t kChunk = 128;
  std::size_t correct = 0;
  for (std::size_t start = 0; start < n_prompts; start += kChunk) {
    const std::size_t n = std::min(kChunk, n_prompts - start);
    std::vector<std::vector<TokenId>> batch;
    std::vector<TokenId> answers;
    for (std::size_t i = 0; i < n; ++i) {
      auto s = sample_five_shot(family, vocab, rng);
      batch.push_back(std::move(s.tokens));
      answers.push_back(s.answer);
    }
    const Mat logits = detail::run_forward(ckpt, batch, {}, nullptr, nullptr);
    const auto T = static_cast<Eigen::Index>(batch.front().size());
    for (std::size_t i = 0; i < n; ++i) {
      Eigen::Index best = 0;
      logits.row(static_cast<Eigen::Index>(i) * T + T - 1).maxCoeff(&best);
      if (best == answers[i]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(n_prompts);
}

Checkpoint train(const ModelConfig& config, const corpus::TaskFamily& family, const TrainConfig& hp,
                 const std::function<void(const TrainLogEntry&)>& log) {
  config.validate();
  const auto vocab = family.vocabulary();
  if (vocab.size() != config.vocab_size) {
    throw ShapeError("model vocab_size " + std::to_string(config.vocab_size) + " does not match task family vocabulary " +
                     std::to_string(vocab.size()));
  }
  Checkpoint ckpt;
  ckpt.config = config;
  ckpt.weights = Weights::initialized(config, hp.seed);

  Weights m = Weights::zeros_like(config);
  Weights v = Weights::zeros_like(config);
  std::mt19937_64 rng(corpus::mix_seed(hp.seed, 0x7EA1));

  double last_loss = std::numeric_limits<double>::quiet_NaN();
  for (int step = 0; step < hp.steps; ++step) {
    std::vector<std::vector<TokenId>> batch;
    std::vector<TokenId> answers;
    for (int i = 0; i < hp.batch_size; ++i) {
      auto s = sample_five_shot(family, vocab, rng);
      batch.push_back(std::move(s.tokens));
      answers.push_back(s.answer);
    }
    Weights g = Weights::zeros_like(config);
    const double loss = batch_loss_and_grad(ckpt, batch, answers, hp.aux_lm_weight, &g);
    if (!std::isfinite(loss)) throw TrainingError("training loss diverged at step " + std::to_string(step));
    last_loss = loss;

    double sq = 0.0;
    g.for_each([&](const std::string&, const Mat& t, bool) { sq += t.squaredNorm(); });
    const double gnorm = std::sqrt(sq);
    const double clip = (hp.grad_clip > 0 && gnorm > hp.grad_clip) ? hp.grad_clip / gnorm : 1.0;

    const double lr = scheduled_lr(hp, step);
    const double bc1 = 1.0 - std::pow(hp.beta1, step + 1);
    const double bc2 = 1.0 - std::pow(hp.beta2, step + 1);

    std::vector<Mat*> gs, ms, vs;
    g.for_each([&](const std::string&, Mat& t, bool) { gs.push_back(&t); });
    m.for_each([&](const std::string&, Mat& t, bool) { ms.push_back(&t); });
    v.for_each([&](const std::string&, Mat& t, bool) { vs.push_back(&t); });
    std::size_t idx = 0;
    ckpt.weights.for_each([&](const std::string&, Mat& p, bool decay) {
      Mat& gt = *gs[idx];
      Mat& mt = *ms[idx];
      Mat& vt = *vs[idx];
      ++idx;
      gt *= clip;
      mt = hp.beta1 * mt + (1.0 - hp.beta1) * gt;
      vt = hp.beta2 * vt + (1.0 - hp.beta2) * gt.cwiseProduct(gt);
      if (decay) p *= (1.0 - lr * hp.weight_decay);
      p.array() -= lr * (mt.array() / bc1) / ((vt.array() / bc2).sqrt() + hp.eps);
    });

    if (log && (step % std::max(1, hp.log_every) == 0 || step + 1 == hp.steps)) log({step, loss, lr});
  }

  const double acc = five_shot_accuracy(ckpt, family, static_cast<std::size_t>(hp.eval_prompts),
                                        corpus::mix_seed(hp.seed, 0xE7A1E7A1));
  ckpt.metadata["train"] = hp.to_json();
  ckpt.metadata["final_train_loss"] = hp.steps > 0 ? nlohmann::json(last_loss) : nlohmann::json(nullptr);
  ckpt.metadata["five_shot_accuracy"] = acc;
  ckpt.metadata["task_family"] = {{"x_min", family.x.lo}, {"x_max", family.x.hi}, {"k_min", family.k.lo},
                                  {"k_max", family.k.hi}};
  return ckpt;
}

}  // namespace icl::model
