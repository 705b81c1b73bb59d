#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>

namespace icl::corpus {

template <typename T>
DataSplit<T> split_datapoints(std::vector<T> points, std::array<double, 3> fractions, std::uint64_t seed) {
  const double total = fractions[0] + fractions[1] + fractions[2];
  if (std::abs(total - 1.0) > 1e-9 || std::any_of(fractions.begin(), fractions.end(), [](double f) { return f < 0; })) {
    throw std::invalid_argument("split_datapoints: fractions must be nonnegative and sum to 1");
  }
  std::mt19937_64 rng(mix_seed(seed, 0x5011));
  std::shuffle(points.begin(), points.end(), rng);

  const auto n = static_cast<double>(points.size());
  const auto n_train = std::min(points.size(), static_cast<std::size_t>(std::llround(fractions[0] * n)));
  const auto n_val = std::min(points.size() - n_train, static_cast<std::size_t>(std::llround(fractions[1] * n)));

  DataSplit<T> out;
  const auto b = points.begin();
  out.train.assign(b, b + static_cast<std::ptrdiff_t>(n_train));
  out.val.assign(b + static_cast<std::ptrdiff_t>(n_train), b + static_cast<std::ptrdiff_t>(n_train + n_val));
  out.test.assign(b + static_cast<std::ptrdiff_t>(n_train + n_val), points.end());
  return out;
}

}  // namespace icl::corpus
