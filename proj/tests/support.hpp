#pragma once

// Small random generators for property tests.

#include <random>

#include "skipalign/numeric.hpp"
#include "skipalign/types.hpp"

namespace testing {

using skipalign::Mat;
using skipalign::Vec;

inline Vec gaussian_vec(std::size_t d, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n01(0.0, 1.0);
  Vec v(d);
  for (double& x : v) x = scale * n01(rng);
  return v;
}

inline Mat gaussian_mat(std::size_t r, std::size_t c, std::mt19937_64& rng, double scale = 1.0) {
  Mat m(r, c);
  const Vec v = gaussian_vec(r * c, rng, scale);
  std::copy(v.begin(), v.end(), m.data().begin());
  return m;
}

inline std::size_t pick(std::size_t lo, std::size_t hi, std::mt19937_64& rng) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

inline double pick_real(double lo, double hi, std::mt19937_64& rng) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

/// Rows of the identity: K orthonormal prototypes in d ≥ K dimensions.
inline skipalign::PrototypeSet orthonormal_protos(std::size_t k, std::size_t d) {
  Mat mu(k, d);
  for (std::size_t i = 0; i < k; ++i) mu(i, i) = 1.0;
  return skipalign::PrototypeSet::from_directions(mu);
}

}  // namespace testing
