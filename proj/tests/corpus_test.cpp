#include <doctest.h>

#include <algorithm>
#include <set>

#include "icl/corpus.hpp"

using namespace icl::corpus;

TEST_CASE("five-shot render matches the worked example") {
  const Vocabulary vocab(60);
  const auto spec = PromptSpec::five_shot(4, {3, 10, 7, 22, 5}, 9);
  const auto r = render(spec, vocab);
  CHECK(vocab.text(r.tokens) == "3 → 7 # 10 → 14 # 7 → 11 # 22 → 26 # 5 → 9 # 9 →");
  CHECK(r.tokens.size() == 23);
  CHECK(r.tokens.front() == vocab.bos());
  CHECK(r.answer == 13);
  CHECK(r.final_position == 22);
  CHECK(r.tokens.back() == vocab.arrow());
  REQUIRE(r.y_positions.size() == 5);
  for (std::size_t i = 0; i < 5; ++i) {
    CHECK(vocab.decode(r.tokens[r.y_positions[i]]) == spec.demo_inputs[i] + 4);
    CHECK(vocab.decode(r.tokens[r.x_positions[i]]) == spec.demo_inputs[i]);
  }
}

TEST_CASE("zero-shot and mixed-k prompts") {
  const Vocabulary vocab(60);
  const auto z = render(PromptSpec::zero_shot(41), vocab);
  CHECK(vocab.text(z.tokens) == "41 →");
  CHECK(z.y_positions.empty());

  const auto m = PromptSpec::mixed_k({1, 2, 3, 4, 5}, {10, 10, 10, 10, 10}, 7);
  CHECK(m.labels() == std::vector<int>{11, 12, 13, 14, 15});
  CHECK_FALSE(m.answer().has_value());
  const auto rm = render(m, vocab);
  for (std::size_t i = 0; i < 5; ++i) CHECK(vocab.decode(rm.tokens[rm.y_positions[i]]) == 11 + static_cast<int>(i));
}

TEST_CASE("vocabulary round trip and specials") {
  const Vocabulary vocab(60);
  CHECK(vocab.size() == 65);
  for (int n = 0; n <= 60; ++n) CHECK(vocab.decode(vocab.number(n)) == n);
  const std::set<TokenId> specials{vocab.separator(), vocab.arrow(), vocab.bos(), vocab.pad()};
  CHECK(specials.size() == 4);
  for (auto t : specials) CHECK_FALSE(vocab.decode(t).has_value());
  CHECK_THROWS_AS(vocab.number(61), RangeError);
  CHECK_THROWS_AS(vocab.number(-1), RangeError);
}

TEST_CASE("render_checked rejects out-of-range inputs") {
  const TaskFamily family;
  CHECK_THROWS_AS(render_checked(PromptSpec::five_shot(3, {1, 2, 3, 4, 51}, 5), family), RangeError);
  CHECK_THROWS_AS(render_checked(PromptSpec::zero_shot(0), family), RangeError);
  CHECK_NOTHROW(render_checked(PromptSpec::five_shot(10, {1, 2, 3, 4, 50}, 50), family));
}

TEST_CASE("task prompts cover every query once and are seed-deterministic") {
  const IntRange x{1, 100};
  const auto a = gen_task_prompts(3, 100, x, 42);
  std::vector<int> queries;
  for (const auto& p : a) {
    queries.push_back(p.query);
    CHECK(p.demo_inputs.size() == 5);
    for (int d : p.demo_inputs) CHECK(x.contains(d));
  }
  std::sort(queries.begin(), queries.end());
  CHECK(queries == x.values());

  const auto b = gen_task_prompts(3, 100, x, 42);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].demo_inputs == b[i].demo_inputs);
    CHECK(a[i].query == b[i].query);
  }
  // query stream does not depend on k
  const auto c = gen_task_prompts(17, 100, x, 42);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].query == c[i].query);
}

TEST_CASE("different seeds give different demo multisets") {
  const IntRange x{1, 100};
  int differ = 0;
  for (std::uint64_t s = 0; s < 100; ++s) {
    const auto a = gen_task_prompts(5, 1, x, s);
    const auto b = gen_task_prompts(5, 1, x, s + 1000);
    auto da = a[0].demo_inputs, db = b[0].demo_inputs;
    std::sort(da.begin(), da.end());
    std::sort(db.begin(), db.end());
    differ += da != db;
  }
  CHECK(differ >= 99);
}

TEST_CASE("mixed prompts use distinct offsets") {
  const auto ps = gen_mixed_prompts(50, {1, 50}, {1, 10}, 9);
  for (const auto& p : ps) {
    std::set<int> ks(p.ks.begin(), p.ks.end());
    CHECK(ks.size() == 5);
    for (int k : p.ks) CHECK((k >= 1 && k <= 10));
  }
}

TEST_CASE("task splits") {
  const auto s = split_tasks({1, 30}, 5, 3);
  CHECK(s.train.size() == 25);
  CHECK(s.ood.size() == 5);
  std::set<int> all(s.train.begin(), s.train.end());
  all.insert(s.ood.begin(), s.ood.end());
  CHECK(all.size() == 30);
  const auto d = split_tasks({1, 10}, 2, 3);
  CHECK(d.train.size() == 8);
  CHECK(d.ood.size() == 2);
  const auto none = split_tasks({1, 10}, 0, 3);
  CHECK(none.train.size() == 10);
  CHECK(none.ood.empty());
  const auto again = split_tasks({1, 30}, 5, 3);
  CHECK(again.ood == s.ood);
}

TEST_CASE("datapoint splits") {
  std::vector<int> pts(1000);
  for (int i = 0; i < 1000; ++i) pts[static_cast<std::size_t>(i)] = i;
  const auto s = split_datapoints(pts, {0.7, 0.15, 0.15}, 1);
  CHECK(s.train.size() == 700);
  CHECK(s.val.size() == 150);
  CHECK(s.test.size() == 150);
  std::set<int> all(s.train.begin(), s.train.end());
  all.insert(s.val.begin(), s.val.end());
  all.insert(s.test.begin(), s.test.end());
  CHECK(all.size() == 1000);

  std::vector<int> ten(10);
  const auto t = split_datapoints(ten, {0.7, 0.15, 0.15}, 1);
  CHECK(t.train.size() + t.val.size() + t.test.size() == 10);
  CHECK(t.train.size() == 7);
  const auto only = split_datapoints(ten, {1.0, 0.0, 0.0}, 1);
  CHECK(only.train.size() == 10);
}

TEST_CASE("jsonl export fields") {
  const Vocabulary vocab(60);
  const auto spec = PromptSpec::five_shot(4, {3, 10, 7, 22, 5}, 9);
  const auto j = to_json(spec, render(spec, vocab));
  CHECK(j.at("kind") == "five_shot");
  CHECK(j.at("k") == 4);
  CHECK(j.at("query") == 9);
  CHECK(j.at("answer") == 13);
  CHECK(j.at("tokens").size() == 23);
  const auto m = PromptSpec::mixed_k({1, 2, 3, 4, 5}, {10, 10, 10, 10, 10}, 7);
  const auto jm = to_json(m, render(m, vocab));
  CHECK(jm.at("k_list").size() == 5);
}
