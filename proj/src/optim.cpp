#include "gfbs/optim.hpp"

#include <cmath>

namespace gfbs {

namespace {

void require_grads(const std::vector<Tensor>& params) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].has_grad()) {
      throw ConfigError("optimizer step: parameter " + std::to_string(i) + " has no gradient");
    }
  }
}

}  // namespace

void sgd_step(std::vector<Tensor>& params, std::vector<std::vector<double>>& velocity, double lr,
              double momentum, double weight_decay) {
  require_grads(params);
  const bool fresh = velocity.size() != params.size();
  if (fresh) {
    velocity.clear();
    for (const auto& p : params) velocity.emplace_back(static_cast<std::size_t>(p.numel()), 0.0);
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    auto& v = velocity[i];
    dispatch(p.dtype(), [&]<class T>() {
      auto w = p.data<T>();
      auto g = p.grad<T>();
      for (std::size_t j = 0; j < w.size(); ++j) {
        const double d = static_cast<double>(g[j]) + weight_decay * w[j];
        v[j] = fresh ? d : momentum * v[j] + d;
        w[j] = static_cast<T>(w[j] - lr * v[j]);
      }
    });
    p.zero_grad();
  }
}

Sgd::Sgd(std::vector<Tensor> params, double lr, double momentum, double weight_decay)
    : params_(std::move(params)), lr_(lr), momentum_(momentum), weight_decay_(weight_decay) {}

void Sgd::step() { sgd_step(params_, velocity_, lr_, momentum_, weight_decay_); }

Adam::Adam(std::vector<Tensor> params, double lr, double beta1, double beta2, double eps,
           double weight_decay)
    : params_(std::move(params)),
      lr_(lr),
      beta1_(beta1),
      beta2_(beta2),
      eps_(eps),
      weight_decay_(weight_decay) {
  for (const auto& p : params_) {
    m_.emplace_back(static_cast<std::size_t>(p.numel()), 0.0);
    v_.emplace_back(static_cast<std::size_t>(p.numel()), 0.0);
  }
}

void Adam::step() {
  require_grads(params_);
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    dispatch(p.dtype(), [&]<class T>() {
      auto w = p.data<T>();
      auto g = p.grad<T>();
      for (std::size_t j = 0; j < w.size(); ++j) {
        const double d = static_cast<double>(g[j]) + weight_decay_ * w[j];
        m_[i][j] = beta1_ * m_[i][j] + (1.0 - beta1_) * d;
        v_[i][j] = beta2_ * v_[i][j] + (1.0 - beta2_) * d * d;
        const double mhat = m_[i][j] / c1;
        const double vhat = v_[i][j] / c2;
        w[j] = static_cast<T>(w[j] - lr_ * mhat / (std::sqrt(vhat) + eps_));
      }
    });
    p.zero_grad();
  }
}

}  // namespace gfbs
