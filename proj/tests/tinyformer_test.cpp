#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "icl/tinyformer.hpp"
#include "test_util.hpp"

using namespace icl;
using namespace icl::model;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.n_layers = 3;
  c.n_heads = 2;
  c.d_model = 8;
  c.d_mlp = 16;
  c.vocab_size = 65;
  c.max_seq_len = 24;
  return c;
}

Checkpoint tiny_model(std::uint64_t seed = 5) {
  Checkpoint ck;
  ck.config = tiny_config();
  ck.weights = Weights::initialized(ck.config, seed);
  // Larger weights than the init give gradients with some curvature.
  ck.weights.for_each([](const std::string&, Mat& t, bool decay) {
    if (decay) t *= 4.0;
  });
  return ck;
}

std::vector<TokenId> prompt_tokens() {
  const corpus::Vocabulary vocab(60);
  return corpus::render(corpus::PromptSpec::five_shot(4, {3, 10, 7, 22, 5}, 9), vocab).tokens;
}

}  // namespace

TEST_CASE("config validation") {
  auto c = tiny_config();
  CHECK_NOTHROW(c.validate());
  c.n_heads = 3;
  CHECK_THROWS_AS(c.validate(), ModelError);
  c = tiny_config();
  c.patch_layer = 7;
  CHECK_THROWS_AS(c.validate(), ModelError);
  CHECK(ModelConfig::from_json(tiny_config().to_json()).to_json() == tiny_config().to_json());
}

TEST_CASE("forward is deterministic and validates inputs") {
  const auto ck = tiny_model();
  const auto toks = prompt_tokens();
  const auto a = forward(ck, toks);
  const auto b = forward(ck, toks);
  CHECK(a == b);
  CHECK(a.size() == 65);
  std::vector<TokenId> bad = toks;
  bad[2] = 99;
  CHECK_THROWS_AS(forward(ck, bad), VocabError);
  std::vector<TokenId> longp(30, 1);
  CHECK_THROWS_AS(forward(ck, longp), ShapeError);
  CHECK_THROWS_AS(ck.check_head({3, 0}), HeadIdError);
}

TEST_CASE("patch gradient matches central finite differences") {
  const auto ck = tiny_model();
  const auto toks = prompt_tokens();
  for (int layer = 0; layer < 3; ++layer) {
    const auto v = testutil::random_vector(8, 30 + static_cast<std::uint64_t>(layer), 0.5);
    const auto lg = loss_and_grad_wrt_patch(ck, toks, 13, layer, v);
    for (std::size_t i = 0; i < v.size(); ++i) {
      auto vp = v, vm = v;
      vp[i] += 1e-4;
      vm[i] -= 1e-4;
      const double fd =
          (loss_and_grad_wrt_patch(ck, toks, 13, layer, vp).loss - loss_and_grad_wrt_patch(ck, toks, 13, layer, vm).loss) /
          2e-4;
      CHECK(std::abs(fd - lg.grad[i]) <= 1e-5 * std::max(1.0, std::abs(fd)));
    }
  }
}

TEST_CASE("patching and overrides have the documented no-op cases") {
  const auto ck = tiny_model();
  const auto toks = prompt_tokens();
  const auto plain = forward(ck, toks);
  const std::vector<double> zero(8, 0.0);
  CHECK(forward_patched(ck, toks, 1, toks.size() - 1, zero, PatchMode::Add) == plain);

  ActivationTape tape;
  forward(ck, toks, &tape);
  const auto& row = tape.layers[1].resid_in.row(static_cast<Eigen::Index>(toks.size() - 1));
  std::vector<double> self(row.data(), row.data() + row.size());
  const auto rep = forward_patched(ck, toks, 1, toks.size() - 1, self, PatchMode::Replace);
  for (std::size_t i = 0; i < plain.size(); ++i) CHECK(rep[i] == doctest::Approx(plain[i]).epsilon(1e-12));

  HeadOverrides ov;
  for (HeadId h : ck.all_heads()) {
    const auto r = tape.layers[static_cast<std::size_t>(h.layer)].head_out_last.row(h.head);
    ov[h] = std::vector<double>(r.data(), r.data() + r.size());
  }
  const auto same = forward_with_head_override(ck, toks, ov);
  for (std::size_t i = 0; i < plain.size(); ++i) CHECK(same[i] == doctest::Approx(plain[i]).epsilon(1e-12));

  // An override actually changes the output.
  ov.begin()->second.assign(8, 3.0);
  CHECK(forward_with_head_override(ck, toks, ov) != plain);
}

TEST_CASE("tape is consistent") {
  const auto ck = tiny_model();
  const auto toks = prompt_tokens();
  ActivationTape tape;
  const auto logits = forward(ck, toks, &tape);
  CHECK(tape.seq_len() == toks.size());
  CHECK(tape.final_logits == logits);
  for (const auto& l : tape.layers) {
    for (int h = 0; h < 2; ++h) CHECK(l.attn_last.row(h).sum() == doctest::Approx(1.0));
    CHECK(l.values.rows() == static_cast<Eigen::Index>(toks.size()));
  }
}

TEST_CASE("checkpoint round trip is byte-identical") {
  auto ck = tiny_model();
  ck.metadata = {{"five_shot_accuracy", 0.5}};
  const auto dir = std::filesystem::temp_directory_path();
  const auto p1 = (dir / "icl_ck1.iclt").string();
  const auto p2 = (dir / "icl_ck2.iclt").string();
  save_checkpoint(p1, ck);
  const auto back = load_checkpoint(p1);
  save_checkpoint(p2, back);
  CHECK(io::serialize(to_tensor_file(ck)) == io::serialize(to_tensor_file(back)));
  CHECK(forward(back, prompt_tokens()) == forward(ck, prompt_tokens()));
  std::filesystem::remove(p1);
  std::filesystem::remove(p2);
}

TEST_CASE("batch gradient matches finite differences on sampled weights") {
  const auto ck = tiny_model(9);
  const std::vector<std::vector<TokenId>> batch{prompt_tokens(), prompt_tokens()};
  auto b2 = batch;
  b2[1][1] = 20;
  const std::vector<TokenId> answers{13, 30};
  Weights g = Weights::zeros_like(ck.config);
  batch_loss_and_grad(ck, b2, answers, 0.1, &g);

  std::vector<std::pair<std::string, double>> analytic;
  g.for_each([&](const std::string& name, const Mat& t, bool) { analytic.emplace_back(name, t(0, 0)); });
  std::size_t idx = 0;
  Checkpoint probe = ck;
  probe.weights.for_each([&](const std::string& name, Mat& t, bool) {
    const double orig = t(0, 0);
    t(0, 0) = orig + 1e-5;
    const double lp = batch_loss_and_grad(probe, b2, answers, 0.1, nullptr);
    t(0, 0) = orig - 1e-5;
    const double lm = batch_loss_and_grad(probe, b2, answers, 0.1, nullptr);
    t(0, 0) = orig;
    const double fd = (lp - lm) / 2e-5;
    INFO(name);
    CHECK(analytic[idx].first == name);
    CHECK(std::abs(fd - analytic[idx].second) <= 1e-5 * std::max(1.0, std::abs(fd)) + 1e-8);
    ++idx;
  });
}

TEST_CASE("short training is deterministic and reduces loss") {
  corpus::TaskFamily fam;
  TrainConfig hp;
  hp.steps = 120;
  hp.batch_size = 16;
  hp.eval_prompts = 20;
  hp.warmup_steps = 10;
  hp.lr = 1e-2;
  hp.log_every = 1;
  std::vector<double> losses;
  const auto a = train(tiny_config(), fam, hp, [&](const TrainLogEntry& e) { losses.push_back(e.loss); });
  const auto b = train(tiny_config(), fam, hp);
  CHECK(io::serialize(to_tensor_file(a)) == io::serialize(to_tensor_file(b)));
  REQUIRE(losses.size() >= 40);
  double head = 0, tail = 0;
  for (std::size_t i = 0; i < 20; ++i) head += losses[i], tail += losses[losses.size() - 1 - i];
  CHECK(tail < head);
  CHECK(a.metadata.contains("five_shot_accuracy"));
}
