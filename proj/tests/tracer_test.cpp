#include <doctest.h>

#include "icl/tracer.hpp"
#include "test_util.hpp"

using namespace icl;
using namespace icl::tracer;

namespace {

model::Checkpoint tiny_model() {
  model::Checkpoint ck;
  ck.config.n_layers = 2;
  ck.config.n_heads = 2;
  ck.config.d_model = 8;
  ck.config.d_mlp = 16;
  ck.config.vocab_size = 65;
  ck.config.max_seq_len = 24;
  ck.weights = model::Weights::initialized(ck.config, 21);
  ck.weights.for_each([](const std::string&, model::Mat& t, bool decay) {
    if (decay) t *= 3.0;
  });
  return ck;
}

Vector head_output(const model::ActivationTape& tape, HeadId h) {
  const auto r = tape.layers[static_cast<std::size_t>(h.layer)].head_out_last.row(h.head);
  return Vector(r.data(), r.data() + r.size());
}

}  // namespace

TEST_CASE("single-token prompt puts all attention on itself") {
  const auto ck = tiny_model();
  const std::vector<corpus::TokenId> toks{corpus::Vocabulary(60).bos()};
  model::ActivationTape tape;
  model::forward(ck, toks, &tape);
  for (HeadId h : ck.all_heads()) {
    const auto parts = decompose_head(tape, ck, h, toks);
    REQUIRE(parts.size() == 1);
    CHECK(parts[0].alpha == doctest::Approx(1.0));
    CHECK(reconstruction_error(parts, head_output(tape, h)) < 1e-12);
  }
}

TEST_CASE("five-shot decomposition reconstructs every head output") {
  const auto ck = tiny_model();
  const corpus::Vocabulary vocab(60);
  for (const auto& spec : corpus::gen_task_prompts(3, 10, {1, 50}, 2)) {
    const auto r = corpus::render(spec, vocab);
    model::ActivationTape tape;
    model::forward(ck, r.tokens, &tape);
    for (HeadId h : ck.all_heads()) {
      const auto parts = decompose_head(tape, ck, h, r.tokens);
      const auto out = head_output(tape, h);
      CHECK(reconstruction_error(parts, out) <= 1e-6 * (1.0 + numkit::norm(out)));
      double s = 0;
      for (const auto& p : parts) s += p.alpha;
      CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    }
  }
}

TEST_CASE("uniform synthetic tape averages the extracted vectors") {
  const int T = 4, H = 2, dh = 3, d = 5;
  model::LayerTape lt;
  lt.values = model::Mat::Random(T, H * dh);
  lt.attn_last = model::Mat::Constant(H, T, 1.0 / T);
  const model::Mat o = model::Mat::Random(dh, d);
  const std::vector<corpus::TokenId> toks{1, 2, 3, 4};
  const auto basis = numkit::orthonormalize_columns(testutil::random_matrix(d, 2, 1));
  const auto parts = decompose_head(lt, 1, o, toks, &basis);
  const model::Mat expected = lt.values.block(0, dh, T, dh).colwise().mean() * o;
  Vector sum(d, 0.0);
  for (const auto& p : parts) {
    numkit::axpy(1.0, p.weighted, sum);
    CHECK(p.projected.size() == 2);
  }
  for (int j = 0; j < d; ++j) CHECK(sum[static_cast<std::size_t>(j)] == doctest::Approx(expected(0, j)));

  CHECK_THROWS_AS(decompose_head(lt, 2, o, toks), TapeError);
  CHECK_THROWS_AS(decompose_head(lt, 0, o, std::vector<corpus::TokenId>{1, 2}), TapeError);
  model::LayerTape empty;
  CHECK_THROWS_AS(decompose_head(empty, 0, o, std::vector<corpus::TokenId>{}), TapeError);
}

TEST_CASE("zero basis gives zero extraction norms") {
  const auto ck = tiny_model();
  const auto r = corpus::render(corpus::PromptSpec::five_shot(2, {1, 2, 3, 4, 5}, 6), corpus::Vocabulary(60));
  const auto prof = extraction_profile(ck, r, {1, 0}, Matrix(8, 2));
  CHECK(prof.points.size() == r.tokens.size());
  for (const auto& p : prof.points) CHECK(p.norm == 0.0);
  std::size_t ys = 0;
  for (const auto& p : prof.points) ys += p.is_y;
  CHECK(ys == 5);
  CHECK(extraction_csv({prof}).find("layer,head,prompt,position,token,is_y,norm,alpha\n") == 0);
}

TEST_CASE("sum-to-zero signals give the exchangeable negative correlation") {
  std::vector<int> tasks;
  for (int k = 1; k <= 10; ++k) tasks.push_back(k);
  const auto rep = correlation_report(planted_signals(tasks, 2000, true, 5), {2, 3});
  for (const auto& t : rep.tasks) {
    CHECK(t.pairs.size() == 10);
    for (const auto& p : t.pairs) CHECK(p.r == doctest::Approx(-0.25).epsilon(0.2));
    CHECK(t.neg_sum == doctest::Approx(-2.5).epsilon(0.12));
    double total = 0;
    for (const auto& p : t.pairs) total += p.r;
    CHECK(t.neg_sum + t.pos_sum == doctest::Approx(total));
  }
  CHECK(rep.abs_neg_sum.avg == doctest::Approx(2.5).epsilon(0.12));
}

TEST_CASE("independent signals stay near zero") {
  std::vector<int> tasks;
  for (int k = 1; k <= 10; ++k) tasks.push_back(k);
  const auto rep = correlation_report(planted_signals(tasks, 100, false, 5));
  CHECK(rep.abs_neg_sum.avg <= 1.0);
  CHECK(rep.pos_sum.avg <= 1.0);
  CHECK(rep.skipped_pairs == 0);
  CHECK(planted_signals(tasks, 100, false, 5).at(3) == planted_signals(tasks, 100, false, 5).at(3));
}

TEST_CASE("constant columns are skipped, not failed") {
  Matrix s(6, 5);
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = 0; j < 5; ++j) s(i, j) = j == 4 ? 1.0 : static_cast<double>((i * 7 + j * 3) % 5);
  const auto rep = correlation_report({{1, s}});
  CHECK(rep.skipped_pairs == 4);
  CHECK(rep.tasks[0].pairs.size() == 6);
  CHECK_THROWS_AS(correlation_report({{1, Matrix(1, 5)}}), numkit::InsufficientDataError);
  const auto j = rep.to_json();
  CHECK(j.at("skipped_pairs") == 4);
  CHECK(correlation_summary_csv({rep}).find("source,layer,head,k,neg_sum,pos_sum,skipped\n") == 0);
  CHECK(correlation_pairs_csv({rep}).find("source,layer,head,k,i,j,r\n") == 0);
}

TEST_CASE("projected task directions are unit vectors aligned with their own task") {
  const auto fx = subspace::make_planted_fixture({});
  const HeadId h{2, 3};
  const auto b = subspace::fit_task_subspace(fx.table.task_means(h), 0.97, true, h);
  for (int k : fx.table.tasks()) {
    const auto hk = projected_task_direction(fx.table, h, k, b.basis, b.mean);
    CHECK(numkit::norm(hk) == doctest::Approx(1.0));
    const auto raw = numkit::matvec_t(b.basis, numkit::subtract(fx.table.task_mean(h, k), b.mean));
    int best = 0;
    double best_ip = -2;
    for (int k2 : fx.table.tasks()) {
      const double ip = numkit::dot(raw, projected_task_direction(fx.table, h, k2, b.basis, b.mean));
      if (ip > best_ip) best_ip = ip, best = k2;
    }
    CHECK(best == k);
  }
  const Matrix zero(64, 6);
  const auto z = projected_task_direction(fx.table, h, 1, zero, b.mean);
  CHECK(numkit::norm(z) == 0.0);
}
