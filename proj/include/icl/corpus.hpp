#pragma once

// Tokenizer and prompt generator for the add-k task family.

#include <array>
#include <cstdint>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

namespace icl::corpus {

using TokenId = std::int32_t;

struct RangeError : std::out_of_range {
  using std::out_of_range::out_of_range;
};

struct IntRange {
  int lo = 1;
  int hi = 50;  // inclusive

  int size() const { return hi - lo + 1; }
  bool contains(int v) const { return v >= lo && v <= hi; }
  std::vector<int> values() const;
};

/// Integers 0..y_max map to token ids 0..y_max; four specials follow.
class Vocabulary {
 public:
  explicit Vocabulary(int y_max);

  int y_max() const { return y_max_; }
  int size() const { return y_max_ + 5; }

  TokenId number(int n) const;
  TokenId separator() const { return y_max_ + 1; }
  TokenId arrow() const { return y_max_ + 2; }
  TokenId bos() const { return y_max_ + 3; }
  TokenId pad() const { return y_max_ + 4; }

  bool is_number(TokenId t) const { return t >= 0 && t <= y_max_; }
  /// Integer value of a number token; nullopt for specials.
  std::optional<int> decode(TokenId t) const;
  std::string text(TokenId t) const;
  std::string text(const std::vector<TokenId>& tokens) const;

 private:
  int y_max_;
};

enum class PromptKind { FiveShot, MixedK, ZeroShot };

std::string to_string(PromptKind kind);

inline constexpr int kShots = 5;

struct PromptSpec {
  PromptKind kind = PromptKind::ZeroShot;
  std::vector<int> ks;           // 1 entry (FiveShot), 5 (MixedK), 0 (ZeroShot)
  std::vector<int> demo_inputs;  // 5 entries for few-shot kinds
  int query = 0;

  static PromptSpec five_shot(int k, std::vector<int> demos, int query);
  static PromptSpec mixed_k(std::vector<int> ks, std::vector<int> demos, int query);
  static PromptSpec zero_shot(int query);

  /// Task offset applied to demo i.
  int k_for_demo(std::size_t i) const;
  std::vector<int> labels() const;
  /// x_q + k for FiveShot; nullopt otherwise (the rule is not determined).
  std::optional<int> answer() const;
};

struct RenderedPrompt {
  std::vector<TokenId> tokens;
  std::vector<std::size_t> y_positions;
  std::vector<std::size_t> x_positions;
  std::size_t final_position = 0;
  std::optional<int> answer;
};

/// Configured ranges; y_max for the vocabulary is x.hi + k.hi.
struct TaskFamily {
  IntRange x{1, 50};
  IntRange k{1, 10};

  int y_max() const { return x.hi + k.hi; }
  Vocabulary vocabulary() const { return Vocabulary(y_max()); }
};

/// Layout: BOS, then per demo x_i -> y_i #, then x_q ->.
RenderedPrompt render(const PromptSpec& spec, const Vocabulary& vocab);

/// Validates demo/query inputs against the family's x range before rendering.
RenderedPrompt render_checked(const PromptSpec& spec, const TaskFamily& family);

/// Five-shot add-k prompts. Queries cycle through shuffled copies of the x
/// range, so n == |x_range| covers each input exactly once; the query stream
/// depends on the seed only, never on k.
std::vector<PromptSpec> gen_task_prompts(int k, std::size_t n_prompts, IntRange x_range, std::uint64_t seed);

/// Mixed-k prompts with distinct k_i per demo.
std::vector<PromptSpec> gen_mixed_prompts(std::size_t n_prompts, IntRange x_range, IntRange k_range,
                                          std::uint64_t seed);

struct TaskSplit {
  std::vector<int> train;
  std::vector<int> ood;
};

TaskSplit split_tasks(IntRange all_k, std::size_t n_holdout, std::uint64_t seed);

/// (query, k) pair for zero-shot intervention training/evaluation.
struct DataPoint {
  int query = 0;
  int k = 0;
  int target() const { return query + k; }
  friend bool operator==(const DataPoint&, const DataPoint&) = default;
};

template <typename T>
struct DataSplit {
  std::vector<T> train, val, test;
};

std::vector<DataPoint> all_datapoints(const std::vector<int>& tasks, IntRange x_range);

/// Shuffled partition with sizes round(f0*n), round(f1*n), remainder.
template <typename T>
DataSplit<T> split_datapoints(std::vector<T> points, std::array<double, 3> fractions, std::uint64_t seed);

nlohmann::json to_json(const PromptSpec& spec, const RenderedPrompt& rendered);

/// Deterministic seed mixing for derived streams.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt);

}  // namespace icl::corpus

#include "icl/corpus_impl.hpp"
