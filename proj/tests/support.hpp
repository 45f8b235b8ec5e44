#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "scm/autodiff.hpp"
#include "scm/rng.hpp"

namespace scm::testutil {

inline double rel_err(double analytic, double numeric, double floor = 1e-6) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

inline std::vector<double> random_values(std::size_t n, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(n);
  for (auto& x : v) x = lo + (hi - lo) * uniform01(rng);
  return v;
}

// Central difference of a scalar function with respect to one entry of a leaf.
inline double central_difference(const std::function<double()>& f, ad::Tensor& leaf, std::size_t index,
                                 double step = 1e-5) {
  auto v = leaf.mutable_values();
  const double orig = v[index];
  v[index] = orig + step;
  const double plus = f();
  v[index] = orig - step;
  const double minus = f();
  v[index] = orig;
  return (plus - minus) / (2.0 * step);
}

}  // namespace scm::testutil
