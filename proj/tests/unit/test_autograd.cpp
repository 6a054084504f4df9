#include "doctest.h"
#include "gfbs/autograd.hpp"
#include "gfbs/errors.hpp"
#include "support/gradcheck.hpp"

#include <cmath>
#include <random>

using namespace gfbs;
using gfbs::testing::gradient_error;
using gfbs::testing::random_tensor;

namespace {

constexpr double kTol = 1e-5;

// Keeps inputs away from the ReLU kink so central differences stay valid.
Tensor away_from_zero(Tensor t) {
  for (std::int64_t i = 0; i < t.numel(); ++i) {
    const double v = t.at(i);
    if (std::abs(v) < 0.05) t.set(i, v < 0 ? -0.05 : 0.05);
  }
  return t;
}

}  // namespace

TEST_CASE("autograd: conv2d gradients over several geometries") {
  std::mt19937_64 rng(11);
  struct Geo {
    int n, c_in, c_out, size, k, stride, pad;
  };
  for (const Geo g : {Geo{2, 3, 4, 5, 3, 1, 1}, Geo{1, 2, 3, 6, 3, 2, 0}, Geo{2, 1, 2, 4, 1, 1, 0},
                      Geo{1, 2, 2, 5, 3, 2, 2}}) {
    auto x = random_tensor({g.n, g.c_in, g.size, g.size}, rng);
    auto p = ParamSet::conv(g.c_out, g.c_in, g.k, false, DType::f64);
    p.weight = random_tensor(p.weight.shape(), rng);
    p.bias = random_tensor(p.bias.shape(), rng);
    auto fwd = [&](Tape* t) { return conv2d(x, p, g.stride, g.pad, t); };
    CHECK(gradient_error(fwd, {x, p.weight, p.bias}, rng) < kTol);
  }
}

TEST_CASE("autograd: batchnorm gradients in train and eval mode") {
  std::mt19937_64 rng(12);
  auto x = random_tensor({3, 4, 3, 2}, rng, -2.0, 2.0);
  auto p = ParamSet::conv(4, 1, 1, true, DType::f64);
  p.gamma = random_tensor({4}, rng, 0.5, 1.5);
  p.beta = random_tensor({4}, rng);
  auto train = [&](Tape* t) { return batchnorm(x, p, BnMode::train, t); };
  CHECK(gradient_error(train, {x, p.gamma, p.beta}, rng) < kTol);
  p.running_mean = random_tensor({4}, rng);
  p.running_var = random_tensor({4}, rng, 0.5, 2.0);
  auto eval = [&](Tape* t) { return batchnorm(x, p, BnMode::eval, t); };
  CHECK(gradient_error(eval, {x, p.gamma, p.beta}, rng) < kTol);
}

TEST_CASE("autograd: elementwise, pooling and shape ops") {
  std::mt19937_64 rng(13);
  auto x = away_from_zero(random_tensor({2, 3, 4, 4}, rng));
  auto y = random_tensor({2, 3, 4, 4}, rng);
  CHECK(gradient_error([&](Tape* t) { return relu(x, t); }, {x}, rng) < kTol);
  CHECK(gradient_error([&](Tape* t) { return add(x, y, t); }, {x, y}, rng) < kTol);
  CHECK(gradient_error([&](Tape* t) { return avg_pool2d(x, 2, 2, t); }, {x}, rng) < kTol);
  CHECK(gradient_error([&](Tape* t) { return avg_pool2d(x, 0, 1, t); }, {x}, rng) < kTol);
  CHECK(gradient_error([&](Tape* t) { return flatten(x, t); }, {x}, rng) < kTol);
  CHECK(gradient_error([&](Tape* t) { return scale(x, -0.7, t); }, {x}, rng) < kTol);
  CHECK(gradient_error([&](Tape* t) { return sum(x, t); }, {x}, rng) < kTol);
}

TEST_CASE("autograd: linear and losses") {
  std::mt19937_64 rng(14);
  auto x = random_tensor({4, 6}, rng);
  auto w = random_tensor({6, 3}, rng);
  auto b = random_tensor({3}, rng);
  CHECK(gradient_error([&](Tape* t) { return linear(x, w, b, t); }, {x, w, b}, rng) < kTol);

  const std::vector<int> labels{0, 2, 1, 2};
  CHECK(gradient_error([&](Tape* t) { return cross_entropy(x, labels, t); }, {x}, rng) < kTol);
  auto target = random_tensor({4, 6}, rng);
  CHECK(gradient_error([&](Tape* t) { return mse(x, target, t); }, {x}, rng) < kTol);
}

TEST_CASE("autograd: relu gradient at exactly zero is zero") {
  auto x = Tensor::from_values({3}, {-1.0, 0.0, 2.0}, DType::f64);
  x.set_requires_grad(true);
  Tape tape;
  auto y = sum(relu(x, &tape), &tape);
  tape.backward(y);
  CHECK(x.grad_vector() == std::vector<double>{0.0, 0.0, 1.0});
}

TEST_CASE("autograd: conv2d is cross-correlation") {
  // 1x1x3x3 input, 2x2 kernel, no padding: hand-computed sliding dot products.
  auto x = Tensor::from_values({1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9}, DType::f64);
  auto p = ParamSet::conv(1, 1, 2, false, DType::f64);
  p.weight = Tensor::from_values({1, 1, 2, 2}, {1, 0, 0, -1}, DType::f64);
  p.bias = Tensor::from_values({1}, {0.5}, DType::f64);
  auto y = conv2d(x, p, 1, 0, nullptr);
  CHECK(y.to_vector() == std::vector<double>{1 - 5 + 0.5, 2 - 6 + 0.5, 4 - 8 + 0.5, 5 - 9 + 0.5});
}

TEST_CASE("autograd: cross entropy of uniform logits is log K") {
  auto logits = Tensor::zeros({2, 4}, DType::f64);
  const std::vector<int> labels{1, 3};
  CHECK(cross_entropy(logits, labels, nullptr).item() == doctest::Approx(std::log(4.0)).epsilon(1e-12));
}

TEST_CASE("autograd: batchnorm statistics") {
  std::mt19937_64 rng(15);
  auto x = random_tensor({4, 2, 3, 3}, rng, -3.0, 5.0);
  auto p = ParamSet::conv(2, 1, 1, true, DType::f64);
  auto y = batchnorm(x, p, BnMode::train, nullptr);
  const auto v = y.to_vector();
  const auto xv = x.to_vector();
  for (int c = 0; c < 2; ++c) {
    double mean = 0, sq = 0, xmean = 0, xsq = 0;
    int m = 0;
    for (int n = 0; n < 4; ++n) {
      for (int i = 0; i < 9; ++i) {
        const auto idx = (n * 2 + c) * 9 + i;
        mean += v[idx];
        sq += v[idx] * v[idx];
        xmean += xv[idx];
        ++m;
      }
    }
    mean /= m;
    xmean /= m;
    for (int n = 0; n < 4; ++n) {
      for (int i = 0; i < 9; ++i) xsq += std::pow(xv[(n * 2 + c) * 9 + i] - xmean, 2);
    }
    CHECK(std::abs(mean) < 1e-12);
    // Biased variance is used for normalisation.
    CHECK(sq / m == doctest::Approx(xsq / m / (xsq / m + 1e-5)).epsilon(1e-10));
    // Running statistics: momentum 0.1 towards the batch mean and the
    // unbiased batch variance.
    CHECK(p.running_mean.at(c) == doctest::Approx(0.1 * xmean).epsilon(1e-12));
    CHECK(p.running_var.at(c) == doctest::Approx(0.9 + 0.1 * xsq / (m - 1)).epsilon(1e-12));
  }
}

TEST_CASE("autograd: tape replays once") {
  auto x = Tensor::from_values({2}, {1.0, 2.0}, DType::f64);
  x.set_requires_grad(true);
  Tape tape;
  auto y = sum(scale(x, 3.0, &tape), &tape);
  tape.backward(y);
  CHECK(x.grad_vector() == std::vector<double>{3.0, 3.0});
  CHECK(tape.consumed());
  CHECK_THROWS_AS(tape.backward(y), ConfigError);
}

TEST_CASE("autograd: nothing is recorded without trainable inputs") {
  auto x = Tensor::from_values({2}, {1.0, 2.0}, DType::f64);
  Tape tape;
  auto y = relu(x, &tape);
  CHECK(tape.size() == 0);
  CHECK_FALSE(y.requires_grad());
}

TEST_CASE("autograd: non-finite values raise NumericError") {
  auto x = Tensor::from_values({1, 2}, {1e308, 1e308}, DType::f64);
  CHECK_THROWS_AS(scale(x, 10.0, nullptr), NumericError);
}

TEST_CASE("autograd: channel_grad_mask is identity forward and cuts gradients") {
  std::mt19937_64 rng(16);
  auto x = random_tensor({2, 3, 2, 2}, rng);
  x.set_requires_grad(true);
  Tape tape;
  auto y = channel_grad_mask(x, {1.0, 0.0, 1.0}, &tape);
  CHECK(y.to_vector() == x.to_vector());
  auto l = sum(y, &tape);
  tape.backward(l);
  const auto g = x.grad_vector();
  for (int n = 0; n < 2; ++n) {
    for (int c = 0; c < 3; ++c) {
      for (int i = 0; i < 4; ++i) CHECK(g[(n * 3 + c) * 4 + i] == (c == 1 ? 0.0 : 1.0));
    }
  }
}
