#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "gbt/gbt.hpp"

namespace gbt::testing {

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0,
                            bool requires_grad = true) {
  std::uniform_real_distribution<double> d(lo, hi);
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = d(rng);
  return Tensor::from_vector(std::move(shape), std::move(v), requires_grad);
}

/// |analytic - numeric| / max(|analytic| + |numeric|, 1e-3).
inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(std::abs(analytic) + std::abs(numeric), 1e-3);
}

/// Central-difference check of every input element of a scalar function.
/// The output is contracted against fixed random weights so that every
/// output element contributes. Returns the worst relative error.
inline double gradient_check(const std::function<Tensor(const std::vector<Tensor>&)>& f, std::vector<Tensor> inputs,
                             std::uint64_t weight_seed = 99, double h = 1e-5) {
  std::mt19937_64 rng(weight_seed);
  Tensor probe;
  auto loss = [&](const std::vector<Tensor>& in) {
    Tensor out = f(in);
    if (!probe.defined()) probe = random_tensor(out.shape(), rng, -1.0, 1.0, false);
    return sum(mul(out, probe));
  };
  for (Tensor& t : inputs) t.zero_grad();
  backward(loss(inputs));
  double worst = 0.0;
  for (Tensor& t : inputs) {
    if (!t.requires_grad()) continue;
    std::vector<double> analytic(t.numel(), 0.0);
    if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), analytic.begin());
    auto v = t.mutable_values();
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double orig = v[i];
      double up = 0.0, down = 0.0;
      {
        NoGradGuard ng;
        v[i] = orig + h;
        up = loss(inputs).item();
        v[i] = orig - h;
        down = loss(inputs).item();
      }
      v[i] = orig;
      worst = std::max(worst, relative_error(analytic[i], (up - down) / (2.0 * h)));
    }
  }
  return worst;
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = a.size() == b.size() ? 0.0 : INFINITY;
  for (std::size_t i = 0; i < std::min(a.size(), b.size()); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace gbt::testing
