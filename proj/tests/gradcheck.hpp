#pragma once

// Central finite-difference oracle for the autograd engine.

#include <cmath>
#include <functional>
#include <vector>

#include "d3gzsl/tensor.hpp"

namespace gradcheck {

using d3gzsl::Tensor;

struct Result {
  double rel_error = 0.0;     // ||analytic - numeric|| / max(||analytic||, ||numeric||)
  double analytic_norm = 0.0;
};

// `f` maps the given leaves to a scalar. The leaves are made trainable, one
// backward pass gives the analytic gradient, and every element is then
// perturbed by +-h with gradient tracking off.
inline Result check(const std::function<Tensor(const std::vector<Tensor>&)>& f, std::vector<Tensor> leaves, double h = 1e-5) {
  d3gzsl::tape().reset();
  for (auto& t : leaves) {
    t.zero_grad();
    t.set_requires_grad(true);
  }
  Tensor loss = f(leaves);
  d3gzsl::backward(loss);
  d3gzsl::tape().reset();

  std::vector<double> analytic, numeric;
  d3gzsl::NoGradGuard no_grad;
  for (auto& t : leaves) {
    for (std::size_t i = 0; i < t.numel(); ++i) analytic.push_back(t.has_grad() ? t.grad()[i] : 0.0);
    auto data = t.mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double x0 = data[i];
      data[i] = x0 + h;
      const double up = f(leaves).item();
      data[i] = x0 - h;
      const double down = f(leaves).item();
      data[i] = x0;
      numeric.push_back((up - down) / (2.0 * h));
    }
  }
  double diff = 0.0, na = 0.0, nn = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
    na += analytic[i] * analytic[i];
    nn += numeric[i] * numeric[i];
  }
  Result r;
  r.analytic_norm = std::sqrt(na);
  const double denom = std::max({std::sqrt(na), std::sqrt(nn), 1e-12});
  r.rel_error = std::sqrt(diff) / denom;
  return r;
}

// Uniform values in [lo, hi] whose magnitude is at least `min_abs`, so that
// kinks of relu-like ops at zero are avoided.
inline Tensor random_tensor(d3gzsl::Shape shape, d3gzsl::Rng& rng, double lo = -2.0, double hi = 2.0, double min_abs = 0.0) {
  Tensor t = Tensor::uniform(shape, rng, lo, hi);
  for (auto& v : t.mutable_data())
    while (std::abs(v) < min_abs) v = rng.uniform(lo, hi);
  return t;
}

// Scalarizes a tensor output with fixed random weights so that every
// output element contributes to the checked gradient.
inline Tensor weighted_sum(const Tensor& y, const Tensor& w) { return d3gzsl::reduce_sum(d3gzsl::mul(y, w)); }

}  // namespace gradcheck
