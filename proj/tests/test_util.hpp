#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>

#include "mapet/matrix.hpp"
#include "mapet/random.hpp"

namespace mapet::test {

template <typename S>
Matrix<S> random_matrix(std::size_t r, std::size_t c, Rng& rng, double scale = 1.0) {
  Matrix<S> m(r, c);
  for (auto& v : m.values()) v = S(rng.uniform(-scale, scale));
  return m;
}

// max_i |a_i - b_i| / max(1, |b_i|)
template <typename S>
double max_rel_diff(const Matrix<S>& a, const Matrix<S>& b) {
  if (!a.same_shape(b)) return INFINITY;
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = std::abs(double(a.data()[i]) - double(b.data()[i]));
    worst = std::max(worst, d / std::max(1.0, std::abs(double(b.data()[i]))));
  }
  return worst;
}

}  // namespace mapet::test
