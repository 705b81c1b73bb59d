#include "icl/corpus.hpp"

namespace icl::corpus {

std::vector<int> IntRange::values() const {
  std::vector<int> out(static_cast<std::size_t>(std::max(0, size())));
  std::iota(out.begin(), out.end(), lo);
  return out;
}

Vocabulary::Vocabulary(int y_max) : y_max_(y_max) {
  if (y_max < 0) throw RangeError("Vocabulary: y_max must be nonnegative");
}

TokenId Vocabulary::number(int n) const {
  if (n < 0 || n > y_max_) {
    throw RangeError("number " + std::to_string(n) + " outside vocabulary range [0, " + std::to_string(y_max_) + "]");
  }
  return n;
}

std::optional<int> Vocabulary::decode(TokenId t) const {
  if (is_number(t)) return t;
  return std::nullopt;
}

std::string Vocabulary::text(TokenId t) const {
  if (is_number(t)) return std::to_string(t);
  if (t == separator()) return "#";
  if (t == arrow()) return "\xE2\x86\x92";
  if (t == bos()) return "<bos>";
  if (t == pad()) return "<pad>";
  throw RangeError("unknown token id " + std::to_string(t));
}

std::string Vocabulary::text(const std::vector<TokenId>& tokens) const {
  std::string out;
  for (TokenId t : tokens) {
    if (t == bos()) continue;
    if (!out.empty()) out += ' ';
    out += text(t);
  }
  return out;
}

std::string to_string(PromptKind kind) {
  switch (kind) {
    case PromptKind::FiveShot: return "five_shot";
    case PromptKind::MixedK: return "mixed_k";
    case PromptKind::ZeroShot: return "zero_shot";
  }
  return "unknown";
}

PromptSpec PromptSpec::five_shot(int k, std::vector<int> demos, int query) {
  if (demos.size() != kShots) throw RangeError("five-shot prompt needs exactly 5 demos");
  return PromptSpec{PromptKind::FiveShot, {k}, std::move(demos), query};
}

PromptSpec PromptSpec::mixed_k(std::vector<int> ks, std::vector<int> demos, int query) {
  if (demos.size() != kShots || ks.size() != kShots) throw RangeError("mixed-k prompt needs exactly 5 demos and 5 offsets");
  return PromptSpec{PromptKind::MixedK, std::move(ks), std::move(demos), query};
}

PromptSpec PromptSpec::zero_shot(int query) { return PromptSpec{PromptKind::ZeroShot, {}, {}, query}; }

int PromptSpec::k_for_demo(std::size_t i) const {
  switch (kind) {
    case PromptKind::FiveShot: return ks.at(0);
    case PromptKind::MixedK: return ks.at(i);
    case PromptKind::ZeroShot: break;
  }
  throw RangeError("zero-shot prompt has no demos");
}

std::vector<int> PromptSpec::labels() const {
  std::vector<int> out;
  out.reserve(demo_inputs.size());
  for (std::size_t i = 0; i < demo_inputs.size(); ++i) out.push_back(demo_inputs[i] + k_for_demo(i));
  return out;
}

std::optional<int> PromptSpec::answer() const {
  if (kind == PromptKind::FiveShot) return query + ks.at(0);
  return std::nullopt;
}

RenderedPrompt render(const PromptSpec& spec, const Vocabulary& vocab) {
  const std::size_t expected_demos = spec.kind == PromptKind::ZeroShot ? 0 : kShots;
  if (spec.demo_inputs.size() != expected_demos) {
    throw RangeError(to_string(spec.kind) + " prompt has " + std::to_string(spec.demo_inputs.size()) + " demos");
  }
  RenderedPrompt out;
  out.tokens.push_back(vocab.bos());
  const auto labels = spec.labels();
  for (std::size_t i = 0; i < spec.demo_inputs.size(); ++i) {
    out.x_positions.push_back(out.tokens.size());
    out.tokens.push_back(vocab.number(spec.demo_inputs[i]));
    out.tokens.push_back(vocab.arrow());
    out.y_positions.push_back(out.tokens.size());
    out.tokens.push_back(vocab.number(labels[i]));
    out.tokens.push_back(vocab.separator());
  }
  out.tokens.push_back(vocab.number(spec.query));
  out.tokens.push_back(vocab.arrow());
  out.final_position = out.tokens.size() - 1;
  out.answer = spec.answer();
  if (out.answer) vocab.number(*out.answer);
  return out;
}

RenderedPrompt render_checked(const PromptSpec& spec, const TaskFamily& family) {
  auto check_x = [&](int x) {
    if (!family.x.contains(x)) {
      throw RangeError("input " + std::to_string(x) + " outside [" + std::to_string(family.x.lo) + ", " +
                       std::to_string(family.x.hi) + "]");
    }
  };
  for (int x : spec.demo_inputs) check_x(x);
  check_x(spec.query);
  for (int k : spec.ks) {
    if (!family.k.contains(k)) throw RangeError("task offset " + std::to_string(k) + " outside configured k range");
  }
  return render(spec, family.vocabulary());
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
  // splitmix64 finalizer over the combined value
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (salt + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

namespace {

std::vector<int> cycled_queries(std::size_t n, IntRange x_range, std::uint64_t seed) {
  std::mt19937_64 rng(mix_seed(seed, 0xA11CE));
  std::vector<int> out;
  out.reserve(n);
  const auto base = x_range.values();
  while (out.size() < n) {
    auto block = base;
    std::shuffle(block.begin(), block.end(), rng);
    for (int q : block) {
      if (out.size() == n) break;
      out.push_back(q);
    }
  }
  return out;
}

}  // namespace

std::vector<PromptSpec> gen_task_prompts(int k, std::size_t n_prompts, IntRange x_range, std::uint64_t seed) {
  if (n_prompts == 0) throw std::invalid_argument("gen_task_prompts: n_prompts must be >= 1");
  if (x_range.size() <= 0) throw RangeError("gen_task_prompts: empty x range");
  const auto queries = cycled_queries(n_prompts, x_range, seed);
  std::mt19937_64 rng(mix_seed(seed, 0x10000 + static_cast<std::uint64_t>(k)));
  std::uniform_int_distribution<int> draw(x_range.lo, x_range.hi);

  std::vector<PromptSpec> out;
  out.reserve(n_prompts);
  for (std::size_t p = 0; p < n_prompts; ++p) {
    std::vector<int> demos(kShots);
    for (int& d : demos) d = draw(rng);
    out.push_back(PromptSpec::five_shot(k, std::move(demos), queries[p]));
  }
  return out;
}

std::vector<PromptSpec> gen_mixed_prompts(std::size_t n_prompts, IntRange x_range, IntRange k_range,
                                          std::uint64_t seed) {
  if (k_range.size() < kShots) throw RangeError("gen_mixed_prompts: need at least 5 distinct task offsets");
  std::mt19937_64 rng(mix_seed(seed, 0x3113D));
  std::uniform_int_distribution<int> draw(x_range.lo, x_range.hi);
  std::vector<PromptSpec> out;
  out.reserve(n_prompts);
  for (std::size_t p = 0; p < n_prompts; ++p) {
    auto ks = k_range.values();
    std::shuffle(ks.begin(), ks.end(), rng);
    ks.resize(kShots);
    std::vector<int> demos(kShots);
    for (int& d : demos) d = draw(rng);
    out.push_back(PromptSpec::mixed_k(std::move(ks), std::move(demos), draw(rng)));
  }
  return out;
}

TaskSplit split_tasks(IntRange all_k, std::size_t n_holdout, std::uint64_t seed) {
  auto ks = all_k.values();
  if (n_holdout >= ks.size()) throw std::invalid_argument("split_tasks: holdout must be smaller than the task count");
  std::mt19937_64 rng(mix_seed(seed, 0x7A5C));
  std::shuffle(ks.begin(), ks.end(), rng);
  TaskSplit out;
  out.ood.assign(ks.end() - static_cast<std::ptrdiff_t>(n_holdout), ks.end());
  out.train.assign(ks.begin(), ks.end() - static_cast<std::ptrdiff_t>(n_holdout));
  std::sort(out.train.begin(), out.train.end());
  std::sort(out.ood.begin(), out.ood.end());
  return out;
}

std::vector<DataPoint> all_datapoints(const std::vector<int>& tasks, IntRange x_range) {
  std::vector<DataPoint> out;
  for (int k : tasks)
    for (int q = x_range.lo; q <= x_range.hi; ++q) out.push_back({q, k});
  return out;
}

nlohmann::json to_json(const PromptSpec& spec, const RenderedPrompt& rendered) {
  nlohmann::json j;
  j["kind"] = to_string(spec.kind);
  if (spec.kind == PromptKind::FiveShot) j["k"] = spec.ks.at(0);
  if (spec.kind == PromptKind::MixedK) j["k_list"] = spec.ks;
  j["demos"] = spec.demo_inputs;
  j["query"] = spec.query;
  j["answer"] = rendered.answer ? nlohmann::json(*rendered.answer) : nlohmann::json(nullptr);
  j["tokens"] = rendered.tokens;
  return j;
}

}  // namespace icl::corpus
