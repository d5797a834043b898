#pragma once

// Test-only reference computations, kept independent of the library's
// differentiation and loss code paths.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "dmue/diffcore.hpp"
#include "dmue/random.hpp"

namespace dmue::oracle {

/// Central differences of a scalar function of one tensor's values.
inline std::vector<double> central_difference(const std::function<double()>& fn, Tensor& at, double h) {
  auto v = at.mutable_values();
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double saved = v[i];
    v[i] = saved + h;
    const double plus = fn();
    v[i] = saved - h;
    const double minus = fn();
    v[i] = saved;
    out[i] = (plus - minus) / (2.0 * h);
  }
  return out;
}

inline double max_relative_error(std::span<const double> analytic, const std::vector<double>& numeric) {
  double worst = 0.0;
  for (std::size_t i = 0; i < numeric.size(); ++i) {
    const double a = analytic.empty() ? 0.0 : analytic[i];
    worst = std::max(worst, std::abs(a - numeric[i]) / std::max(1.0, std::abs(numeric[i])));
  }
  return worst;
}

inline Tensor random_tensor(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0, bool grad = true) {
  std::vector<double> v(s.size());
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor::from(s, std::move(v), grad);
}

/// Max relative error between backward() and central differences of fn
/// with respect to x.
inline double gradient_error(const std::function<Tensor()>& fn, Tensor& x, double h = 1e-6) {
  x.zero_grad();
  backward(fn());
  std::vector<double> analytic(x.grad().begin(), x.grad().end());
  NoGradScope ng;
  auto numeric = central_difference([&] { return fn().item(); }, x, h);
  return max_relative_error(analytic, numeric);
}

/// Plain softmax of a row of doubles.
inline std::vector<double> softmax(const std::vector<double>& z) {
  double mx = z[0];
  for (double v : z) mx = std::max(mx, v);
  std::vector<double> e(z.size());
  double s = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    e[i] = std::exp(z[i] - mx);
    s += e[i];
  }
  for (auto& v : e) v /= s;
  return e;
}

}  // namespace dmue::oracle
