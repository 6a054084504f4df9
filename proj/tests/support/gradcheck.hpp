#pragma once

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "gfbs/autograd.hpp"

namespace gfbs::testing {

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0,
                            DType dtype = DType::f64) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& x : v) x = dist(rng);
  return Tensor::from_values(std::move(shape), v, dtype);
}

// sum_i r_i * y_i, with its own backward node. Turns any output into a
// scalar whose gradient seeds y.grad with r.
inline Tensor weighted_sum(const Tensor& y, const std::vector<double>& r, Tape* tape) {
  const auto v = y.to_vector();
  double acc = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) acc += v[i] * r[i];
  Tensor out = Tensor::from_values({1}, {acc}, y.dtype());
  if (tape && y.requires_grad()) {
    out.set_requires_grad(true);
    tape->record("weighted_sum", {y}, out, [y, r, out]() {
      const double seed = out.grad_at(0);
      dispatch(y.dtype(), [&]<class T>() {
        auto g = y.grad<T>();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += static_cast<T>(seed * r[i]);
      });
    });
  }
  return out;
}

// ||a - b|| / (||a|| + ||b||); zero when both vanish.
inline double relative_error(const std::vector<double>& a, const std::vector<double>& b) {
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double denom = std::sqrt(na) + std::sqrt(nb);
  return denom == 0.0 ? 0.0 : std::sqrt(diff) / denom;
}

// Compares tape gradients of every leaf with central differences of a
// random projection of forward(). Returns the worst relative error.
inline double gradient_error(const std::function<Tensor(Tape*)>& forward, std::vector<Tensor> leaves,
                             std::mt19937_64& rng, double h = 1e-5) {
  for (auto& leaf : leaves) {
    leaf.drop_grad();
    leaf.set_requires_grad(true);
  }
  Tape tape;
  Tensor out = forward(&tape);
  std::normal_distribution<double> normal;
  std::vector<double> r(static_cast<std::size_t>(out.numel()));
  for (auto& x : r) x = normal(rng);
  Tensor l = weighted_sum(out, r, &tape);
  tape.backward(l);

  double worst = 0.0;
  for (auto& leaf : leaves) {
    const auto analytic = leaf.grad_vector();
    std::vector<double> numeric(analytic.size());
    for (std::int64_t i = 0; i < leaf.numel(); ++i) {
      const double x0 = leaf.at(i);
      leaf.set(i, x0 + h);
      const double up = weighted_sum(forward(nullptr), r, nullptr).item();
      leaf.set(i, x0 - h);
      const double down = weighted_sum(forward(nullptr), r, nullptr).item();
      leaf.set(i, x0);
      numeric[static_cast<std::size_t>(i)] = (up - down) / (2.0 * h);
    }
    worst = std::max(worst, relative_error(analytic, numeric));
    leaf.drop_grad();
  }
  return worst;
}

}  // namespace gfbs::testing
