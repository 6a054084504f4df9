#pragma once

#include <vector>

#include "gfbs/tensor.hpp"

namespace gfbs {

// Momentum SGD with L2 weight decay:
//   v <- momentum * v + (g + weight_decay * w);  w <- w - lr * v
class Sgd {
 public:
  Sgd(std::vector<Tensor> params, double lr, double momentum = 0.0, double weight_decay = 0.0);

  // Applies one update and clears every gradient. Throws ConfigError when
  // a parameter has no gradient.
  void step();
  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> velocity_;
  double lr_, momentum_, weight_decay_;
};

// Adam (bias-corrected first and second moments).
class Adam {
 public:
  Adam(std::vector<Tensor> params, double lr, double beta1 = 0.9, double beta2 = 0.999,
       double eps = 1e-8, double weight_decay = 0.0);

  void step();
  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> m_, v_;
  double lr_, beta1_, beta2_, eps_, weight_decay_;
  long long t_ = 0;
};

// One plain momentum-SGD update over loose tensors, with caller-held state.
void sgd_step(std::vector<Tensor>& params, std::vector<std::vector<double>>& velocity, double lr,
              double momentum, double weight_decay);

}  // namespace gfbs
