#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>

#include "singleadv/core.hpp"
#include "singleadv/models.hpp"

namespace singleadv::testing {

/// Central finite differences of a scalar function over every entry of x.
inline Tensor finite_difference(const std::function<double(const Tensor&)>& f, const Tensor& x, double step) {
  Tensor g(x.shape, 0.0);
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + step;
    const double up = f(probe);
    probe[i] = orig - step;
    const double down = f(probe);
    probe[i] = orig;
    g[i] = (up - down) / (2.0 * step);
  }
  return g;
}

/// True when central differences at `step` and `step / 2` agree, i.e. no kink of a
/// piecewise-smooth f lies inside the stencil around x.
inline bool smooth_at(const std::function<double(const Tensor&)>& f, const Tensor& x, double step,
                      double agreement = 1e-5) {
  const Tensor a = finite_difference(f, x, step);
  const Tensor b = finite_difference(f, x, step / 2);
  for (std::size_t i = 0; i < a.size(); ++i)
    if (std::abs(a[i] - b[i]) > agreement) return false;
  return true;
}

/// Draws inputs from rng until f is smooth around one; gradient checks need a differentiable point.
inline Tensor differentiable_point(const std::function<double(const Tensor&)>& f, const Shape& shape,
                                   RandomSource& rng, double step, int attempts = 50) {
  for (int i = 0; i < attempts; ++i) {
    Tensor x(shape);
    for (double& v : x.data) v = rng.uniform();
    if (smooth_at(f, x, step)) return x;
  }
  throw std::runtime_error("no differentiable point found");
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline Tensor random_tensor(const Shape& s, RandomSource& rng, double lo = 0.0, double hi = 1.0) {
  Tensor t(s);
  for (double& v : t.data) v = rng.uniform(lo, hi);
  return t;
}

/// Small GAP-head network used where a full trained model is unnecessary.
inline Classifier toy_classifier(std::uint64_t seed, ImageShape shape = {2, 6, 6}, int categories = 3) {
  ArchSpec arch{"toy", {{4, 1}, {5, 2}}, HeadKind::kGapLinear};
  return Classifier(arch, shape, categories, seed);
}

}  // namespace singleadv::testing
