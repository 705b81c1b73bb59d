#pragma once

#include <random>

#include "icl/numkit.hpp"

namespace testutil {

inline icl::numkit::Matrix random_matrix(std::size_t r, std::size_t c, std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, scale);
  icl::numkit::Matrix m(r, c);
  for (double& x : m.data()) x = n(rng);
  return m;
}

inline icl::numkit::Vector random_vector(std::size_t n, std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d(0.0, scale);
  icl::numkit::Vector v(n);
  for (double& x : v) x = d(rng);
  return v;
}

}  // namespace testutil
