#pragma once

#include "gfbs/surgeon.hpp"

namespace gfbs::testing {

// Reference for surgery: a copy of `net` at full width where every removed
// channel has its filter, bias, gamma and beta set to zero.
inline Network masked_copy(const Network& net, const PrunePlan& plan) {
  Network out = net.clone();
  for (const auto& r : plan.removed) {
    auto& p = out.layer_params(r.layer);
    const auto per = p.weight.numel() / p.weight.dim(0);
    for (std::int64_t i = 0; i < per; ++i) p.weight.set(r.channel * per + i, 0.0);
    p.bias.set(r.channel, 0.0);
    p.gamma.set(r.channel, 0.0);
    p.beta.set(r.channel, 0.0);
  }
  return out;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  const auto x = a.to_vector(), y = b.to_vector();
  double worst = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) worst = std::max(worst, std::abs(x[i] - y[i]));
  return worst;
}

}  // namespace gfbs::testing
