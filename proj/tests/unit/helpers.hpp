#pragma once

#include "selfcons/rng.hpp"
#include "selfcons/types.hpp"

#include <algorithm>
#include <cmath>

namespace testing {

using selfcons::Mat;
using selfcons::Vec;

inline double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-300});
}

template <typename A, typename B>
double rel_err(const A& a, const B& b) {
  const double scale = std::max(a.norm(), b.norm());
  return scale == 0.0 ? 0.0 : (a - b).norm() / scale;
}

inline Mat random_matrix(selfcons::Rng& rng, Eigen::Index r, Eigen::Index c) {
  Mat m(r, c);
  rng.fill_normal(m);
  return m;
}

inline Vec random_vector(selfcons::Rng& rng, Eigen::Index n) {
  Vec v(n);
  rng.fill_normal(v);
  return v;
}

inline Mat random_spd(selfcons::Rng& rng, Eigen::Index n, double shift = 0.0) {
  const Mat A = random_matrix(rng, n, n);
  Mat K = A * A.transpose() / static_cast<double>(n);
  K.diagonal().array() += shift;
  return K;
}

/// Integer in [lo, hi].
inline int uniform_int(selfcons::Rng& rng, int lo, int hi) {
  return lo + static_cast<int>(rng.bits() % static_cast<std::uint64_t>(hi - lo + 1));
}

}  // namespace testing
