#include "gfbs/autograd.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <utility>

namespace gfbs {

namespace {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

void check_same_dtype(const Tensor& a, const Tensor& b, const char* op) {
  if (a.dtype() != b.dtype()) {
    throw ConfigError(std::string(op) + ": dtype mismatch (" + to_string(a.dtype()) + " vs " +
                      to_string(b.dtype()) + ")");
  }
}

void check_finite(const Tensor& t, const char* op) {
  if (!t.all_finite()) throw NumericError(std::string(op) + ": non-finite output");
}

// Records `backward` only when there is something to differentiate.
void maybe_record(Tape* tape, const char* op, std::vector<Tensor> inputs, Tensor& output,
                  std::function<void()> backward) {
  bool needs = false;
  for (const auto& t : inputs) needs = needs || (t.defined() && t.requires_grad());
  if (!needs) return;
  output.set_requires_grad(true);
  if (tape) tape->record(op, std::move(inputs), output, std::move(backward));
}

struct ConvGeometry {
  std::int64_t n, c_in, h, w, c_out, k, h_out, w_out;
  int stride, pad;
  std::int64_t patch() const { return c_in * k * k; }
  std::int64_t pixels() const { return h_out * w_out; }
};

template <class T>
void im2col(const T* x, const ConvGeometry& g, T* col) {
  for (std::int64_t c = 0; c < g.c_in; ++c) {
    for (std::int64_t ki = 0; ki < g.k; ++ki) {
      for (std::int64_t kj = 0; kj < g.k; ++kj) {
        T* row = col + ((c * g.k + ki) * g.k + kj) * g.pixels();
        for (std::int64_t oy = 0; oy < g.h_out; ++oy) {
          const std::int64_t iy = oy * g.stride - g.pad + ki;
          for (std::int64_t ox = 0; ox < g.w_out; ++ox) {
            const std::int64_t ix = ox * g.stride - g.pad + kj;
            const bool inside = iy >= 0 && iy < g.h && ix >= 0 && ix < g.w;
            row[oy * g.w_out + ox] = inside ? x[(c * g.h + iy) * g.w + ix] : T(0);
          }
        }
      }
    }
  }
}

template <class T>
void col2im_add(const T* col, const ConvGeometry& g, T* dx) {
  for (std::int64_t c = 0; c < g.c_in; ++c) {
    for (std::int64_t ki = 0; ki < g.k; ++ki) {
      for (std::int64_t kj = 0; kj < g.k; ++kj) {
        const T* row = col + ((c * g.k + ki) * g.k + kj) * g.pixels();
        for (std::int64_t oy = 0; oy < g.h_out; ++oy) {
          const std::int64_t iy = oy * g.stride - g.pad + ki;
          if (iy < 0 || iy >= g.h) continue;
          for (std::int64_t ox = 0; ox < g.w_out; ++ox) {
            const std::int64_t ix = ox * g.stride - g.pad + kj;
            if (ix < 0 || ix >= g.w) continue;
            dx[(c * g.h + iy) * g.w + ix] += row[oy * g.w_out + ox];
          }
        }
      }
    }
  }
}

void expect_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.ndim() != rank) {
    throw ConfigError(std::string(op) + ": expected rank-" + std::to_string(rank) +
                      " input, got " + shape_to_string(t.shape()));
  }
}

}  // namespace

LossKind parse_loss_kind(const std::string& name) {
  if (name == "cross_entropy" || name == "ce") return LossKind::cross_entropy;
  if (name == "mse") return LossKind::mse;
  throw ConfigError("unknown loss kind '" + name + "'");
}

std::string to_string(LossKind kind) {
  return kind == LossKind::mse ? "mse" : "cross_entropy";
}

// ---------------------------------------------------------------------------
// ParamSet

ParamSet ParamSet::conv(std::int64_t c_out, std::int64_t c_in, std::int64_t kernel, bool with_bn,
                        DType dtype) {
  ParamSet p;
  p.weight = Tensor({c_out, c_in, kernel, kernel}, dtype).set_requires_grad(true);
  p.bias = Tensor({c_out}, dtype).set_requires_grad(true);
  if (with_bn) {
    p.gamma = Tensor::full({c_out}, 1.0, dtype).set_requires_grad(true);
    p.beta = Tensor({c_out}, dtype).set_requires_grad(true);
    p.running_mean = Tensor({c_out}, dtype);
    p.running_var = Tensor::full({c_out}, 1.0, dtype);
  }
  return p;
}

void ParamSet::validate() const {
  if (!weight.defined() || weight.ndim() != 4) throw ConfigError("conv weight must be rank 4");
  const auto c = weight.dim(0);
  auto check_len = [&](const Tensor& t, const char* name) {
    if (!t.defined() || t.ndim() != 1 || t.dim(0) != c) {
      throw ConfigError(std::string("param '") + name + "' must have length C_out=" +
                        std::to_string(c));
    }
    if (t.dtype() != weight.dtype()) throw ConfigError(std::string("param '") + name + "' dtype mismatch");
  };
  check_len(bias, "bias");
  if (has_bn()) {
    check_len(gamma, "gamma");
    check_len(beta, "beta");
    check_len(running_mean, "running_mean");
    check_len(running_var, "running_var");
    for (double v : running_var.to_vector()) {
      if (!(v >= 0.0)) throw ConfigError("running_var must be non-negative");
    }
  }
  if (!(eps > 0.0)) throw ConfigError("BN eps must be positive");
  if (!(momentum > 0.0 && momentum < 1.0)) throw ConfigError("BN momentum must be in (0,1)");
}

ParamSet ParamSet::clone() const {
  ParamSet p;
  p.weight = weight.clone();
  p.bias = bias.clone();
  if (has_bn()) {
    p.gamma = gamma.clone();
    p.beta = beta.clone();
    p.running_mean = running_mean.clone();
    p.running_var = running_var.clone();
  }
  p.eps = eps;
  p.momentum = momentum;
  return p;
}

std::vector<Tensor> ParamSet::learnable() const {
  std::vector<Tensor> out{weight, bias};
  if (has_bn()) {
    out.push_back(gamma);
    out.push_back(beta);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Tape

void Tape::record(std::string op, std::vector<Tensor> inputs, Tensor output,
                  std::function<void()> backward) {
  if (consumed_) throw ConfigError("cannot record on a consumed tape");
  nodes_.push_back(Node{std::move(op), std::move(inputs), std::move(output), std::move(backward)});
}

void Tape::backward(Tensor& loss) {
  if (consumed_) throw ConfigError("backward called twice on a consumed tape");
  if (loss.numel() != 1) throw ConfigError("backward requires a scalar loss");
  consumed_ = true;
  dispatch(loss.dtype(), [&]<class T>() { loss.grad<T>()[0] += T(1); });
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    if (it->output.has_grad()) it->backward();
  }
  nodes_.clear();
}

// ---------------------------------------------------------------------------
// conv2d

Tensor conv2d(const Tensor& input, ParamSet& params, int stride, int padding, Tape* tape) {
  expect_rank(input, 4, "conv2d");
  check_same_dtype(input, params.weight, "conv2d");
  if (stride <= 0 || padding < 0) throw ConfigError("conv2d: invalid stride/padding");
  ConvGeometry g{};
  g.n = input.dim(0);
  g.c_in = input.dim(1);
  g.h = input.dim(2);
  g.w = input.dim(3);
  g.c_out = params.weight.dim(0);
  g.k = params.weight.dim(2);
  g.stride = stride;
  g.pad = padding;
  if (params.weight.dim(1) != g.c_in) {
    throw ConfigError("conv2d: input has " + std::to_string(g.c_in) + " channels, weight expects " +
                      std::to_string(params.weight.dim(1)));
  }
  if (g.h + 2 * padding < g.k || g.w + 2 * padding < g.k) {
    throw ConfigError("conv2d: kernel larger than padded input");
  }
  g.h_out = (g.h + 2 * padding - g.k) / stride + 1;
  g.w_out = (g.w + 2 * padding - g.k) / stride + 1;

  Tensor out({g.n, g.c_out, g.h_out, g.w_out}, input.dtype());
  Tensor weight = params.weight;
  Tensor bias = params.bias;

  dispatch(input.dtype(), [&]<class T>() {
    const T* x = input.data<T>().data();
    T* y = out.data<T>().data();
    ConstMatMap<T> wm(weight.data<T>().data(), g.c_out, g.patch());
    Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> bv(bias.data<T>().data(), g.c_out);
    RowMat<T> col(g.patch(), g.pixels());
    for (std::int64_t n = 0; n < g.n; ++n) {
      im2col(x + n * g.c_in * g.h * g.w, g, col.data());
      MatMap<T> ym(y + n * g.c_out * g.pixels(), g.c_out, g.pixels());
      ym.noalias() = wm * col;
      ym.colwise() += bv;
    }
  });
  check_finite(out, "conv2d");

  maybe_record(tape, "conv2d", {input, weight, bias}, out, [input, weight, bias, out, g]() mutable {
    dispatch(out.dtype(), [&]<class T>() {
      const T* x = input.data<T>().data();
      const T* dy = out.grad<T>().data();
      const bool need_w = weight.requires_grad();
      const bool need_b = bias.requires_grad();
      const bool need_x = input.requires_grad();
      RowMat<T> col(g.patch(), g.pixels());
      RowMat<T> dcol;
      ConstMatMap<T> wm(weight.data<T>().data(), g.c_out, g.patch());
      RowMat<T> dw = RowMat<T>::Zero(g.c_out, g.patch());
      for (std::int64_t n = 0; n < g.n; ++n) {
        ConstMatMap<T> dym(dy + n * g.c_out * g.pixels(), g.c_out, g.pixels());
        if (need_w) {
          im2col(x + n * g.c_in * g.h * g.w, g, col.data());
          dw.noalias() += dym * col.transpose();
        }
        if (need_b) {
          auto db = bias.grad<T>();
          for (std::int64_t c = 0; c < g.c_out; ++c) db[c] += dym.row(c).sum();
        }
        if (need_x) {
          dcol.noalias() = wm.transpose() * dym;
          col2im_add(dcol.data(), g, input.grad<T>().data() + n * g.c_in * g.h * g.w);
        }
      }
      if (need_w) {
        auto gw = weight.grad<T>();
        for (std::int64_t i = 0; i < dw.size(); ++i) gw[i] += dw.data()[i];
      }
    });
  });
  return out;
}

// ---------------------------------------------------------------------------
// batchnorm

Tensor batchnorm(const Tensor& input, ParamSet& params, BnMode mode, Tape* tape) {
  expect_rank(input, 4, "batchnorm");
  if (!params.has_bn()) throw ConfigError("batchnorm: parameter set has no BN affine pair");
  check_same_dtype(input, params.gamma, "batchnorm");
  const std::int64_t n = input.dim(0), c = input.dim(1), hw = input.dim(2) * input.dim(3);
  const std::int64_t m = n * hw;
  if (c != params.gamma.dim(0)) {
    throw ConfigError("batchnorm: input has " + std::to_string(c) + " channels, params have " +
                      std::to_string(params.gamma.dim(0)));
  }
  if (mode == BnMode::train && m < 2) {
    throw ConfigError("batchnorm: train mode needs N*H*W >= 2 per channel");
  }

  Tensor out(input.shape(), input.dtype());
  // Cached per-channel statistics: mean and 1/sqrt(var + eps).
  std::vector<double> mean(c), var(c), inv_std(c);
  Tensor gamma = params.gamma;
  Tensor beta = params.beta;

  dispatch(input.dtype(), [&]<class T>() {
    const T* x = input.data<T>().data();
    T* y = out.data<T>().data();
    auto g = gamma.data<T>();
    auto b = beta.data<T>();
    auto rm = params.running_mean.data<T>();
    auto rv = params.running_var.data<T>();
    for (std::int64_t ch = 0; ch < c; ++ch) {
      if (mode == BnMode::train) {
        double s = 0.0;
        for (std::int64_t i = 0; i < n; ++i) {
          const T* p = x + (i * c + ch) * hw;
          for (std::int64_t j = 0; j < hw; ++j) s += p[j];
        }
        mean[ch] = s / static_cast<double>(m);
        double sq = 0.0;
        for (std::int64_t i = 0; i < n; ++i) {
          const T* p = x + (i * c + ch) * hw;
          for (std::int64_t j = 0; j < hw; ++j) {
            const double d = p[j] - mean[ch];
            sq += d * d;
          }
        }
        var[ch] = sq / static_cast<double>(m);
        const double unbiased = sq / static_cast<double>(m - 1);
        rm[ch] = static_cast<T>((1.0 - params.momentum) * rm[ch] + params.momentum * mean[ch]);
        rv[ch] = static_cast<T>((1.0 - params.momentum) * rv[ch] + params.momentum * unbiased);
      } else {
        mean[ch] = rm[ch];
        var[ch] = rv[ch];
      }
      inv_std[ch] = 1.0 / std::sqrt(var[ch] + params.eps);
      const double gc = g[ch], bc = b[ch];
      for (std::int64_t i = 0; i < n; ++i) {
        const T* p = x + (i * c + ch) * hw;
        T* q = y + (i * c + ch) * hw;
        for (std::int64_t j = 0; j < hw; ++j) {
          q[j] = static_cast<T>(gc * ((p[j] - mean[ch]) * inv_std[ch]) + bc);
        }
      }
    }
  });
  check_finite(out, "batchnorm");

  const double eps = params.eps;
  maybe_record(tape, "batchnorm", {input, gamma, beta}, out,
               [input, gamma, beta, out, mean, var, inv_std, mode, n, c, hw, m, eps]() mutable {
    dispatch(out.dtype(), [&]<class T>() {
      const T* x = input.data<T>().data();
      const T* dy = out.grad<T>().data();
      auto g = gamma.data<T>();
      const bool need_x = input.requires_grad();
      const double inv_m = 1.0 / static_cast<double>(m);
      for (std::int64_t ch = 0; ch < c; ++ch) {
        const double mu = mean[ch], is = inv_std[ch], gc = g[ch];
        // dL/dgamma = sum dL/dF_bar * F_hat ; dL/dbeta = sum dL/dF_bar
        double dgamma = 0.0, dbeta = 0.0;
        // dL/dvar = sum dL/dF_hat * (x - mu) * -1/2 (var + eps)^(-3/2)
        double dvar_acc = 0.0, dxhat_sum = 0.0, centered_sum = 0.0;
        for (std::int64_t i = 0; i < n; ++i) {
          const T* p = x + (i * c + ch) * hw;
          const T* q = dy + (i * c + ch) * hw;
          for (std::int64_t j = 0; j < hw; ++j) {
            const double centered = p[j] - mu;
            const double xhat = centered * is;
            const double dxhat = q[j] * gc;
            dgamma += q[j] * xhat;
            dbeta += q[j];
            dvar_acc += dxhat * centered;
            dxhat_sum += dxhat;
            centered_sum += centered;
          }
        }
        if (gamma.requires_grad()) gamma.grad<T>()[ch] += static_cast<T>(dgamma);
        if (beta.requires_grad()) beta.grad<T>()[ch] += static_cast<T>(dbeta);
        if (!need_x) continue;
        T* dx = input.grad<T>().data();
        if (mode == BnMode::eval) {
          for (std::int64_t i = 0; i < n; ++i) {
            const T* q = dy + (i * c + ch) * hw;
            T* r = dx + (i * c + ch) * hw;
            for (std::int64_t j = 0; j < hw; ++j) r[j] += static_cast<T>(q[j] * gc * is);
          }
          continue;
        }
        const double dvar = dvar_acc * -0.5 * std::pow(var[ch] + eps, -1.5);
        // dL/dmu = sum dL/dF_hat * (-1/sqrt(var+eps)) + dL/dvar * sum(-2 (x - mu)) / m
        const double dmu = -dxhat_sum * is + dvar * (-2.0 * centered_sum) * inv_m;
        for (std::int64_t i = 0; i < n; ++i) {
          const T* p = x + (i * c + ch) * hw;
          const T* q = dy + (i * c + ch) * hw;
          T* r = dx + (i * c + ch) * hw;
          for (std::int64_t j = 0; j < hw; ++j) {
            const double dxhat = q[j] * gc;
            r[j] += static_cast<T>(dxhat * is + dvar * 2.0 * (p[j] - mu) * inv_m + dmu * inv_m);
          }
        }
      }
    });
  });
  return out;
}

// ---------------------------------------------------------------------------
// elementwise and shape ops

Tensor relu(const Tensor& input, Tape* tape) {
  Tensor out(input.shape(), input.dtype());
  dispatch(input.dtype(), [&]<class T>() {
    auto x = input.data<T>();
    auto y = out.data<T>();
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
  });
  check_finite(out, "relu");
  maybe_record(tape, "relu", {input}, out, [input, out]() mutable {
    dispatch(out.dtype(), [&]<class T>() {
      auto x = input.data<T>();
      auto dy = out.grad<T>();
      auto dx = input.grad<T>();
      for (std::size_t i = 0; i < x.size(); ++i) {
        if (x[i] > T(0)) dx[i] += dy[i];
      }
    });
  });
  return out;
}

Tensor linear(const Tensor& input, Tensor& weight, Tensor& bias, Tape* tape) {
  expect_rank(input, 2, "linear");
  check_same_dtype(input, weight, "linear");
  const auto n = input.dim(0), d = input.dim(1);
  if (weight.ndim() != 2 || weight.dim(0) != d) {
    throw ConfigError("linear: weight " + shape_to_string(weight.shape()) +
                      " incompatible with input " + shape_to_string(input.shape()));
  }
  const auto k = weight.dim(1);
  if (bias.ndim() != 1 || bias.dim(0) != k) throw ConfigError("linear: bias length mismatch");
  Tensor out({n, k}, input.dtype());
  dispatch(input.dtype(), [&]<class T>() {
    ConstMatMap<T> xm(input.data<T>().data(), n, d);
    ConstMatMap<T> wm(weight.data<T>().data(), d, k);
    MatMap<T> ym(out.data<T>().data(), n, k);
    Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> bv(bias.data<T>().data(), k);
    ym.noalias() = xm * wm;
    ym.rowwise() += bv;
  });
  check_finite(out, "linear");
  maybe_record(tape, "linear", {input, weight, bias}, out,
               [input, weight, bias, out, n, d, k]() mutable {
    dispatch(out.dtype(), [&]<class T>() {
      ConstMatMap<T> dym(out.grad<T>().data(), n, k);
      if (weight.requires_grad()) {
        ConstMatMap<T> xm(input.data<T>().data(), n, d);
        MatMap<T> dw(weight.grad<T>().data(), d, k);
        dw.noalias() += xm.transpose() * dym;
      }
      if (bias.requires_grad()) {
        auto db = bias.grad<T>();
        for (std::int64_t j = 0; j < k; ++j) db[j] += dym.col(j).sum();
      }
      if (input.requires_grad()) {
        ConstMatMap<T> wm(weight.data<T>().data(), d, k);
        MatMap<T> dx(input.grad<T>().data(), n, d);
        dx.noalias() += dym * wm.transpose();
      }
    });
  });
  return out;
}

Tensor add(const Tensor& a, const Tensor& b, Tape* tape) {
  check_same_dtype(a, b, "add");
  if (a.shape() != b.shape()) {
    throw ConfigError("add: shape mismatch " + shape_to_string(a.shape()) + " vs " +
                      shape_to_string(b.shape()));
  }
  Tensor out(a.shape(), a.dtype());
  dispatch(a.dtype(), [&]<class T>() {
    auto x = a.data<T>();
    auto y = b.data<T>();
    auto z = out.data<T>();
    for (std::size_t i = 0; i < z.size(); ++i) z[i] = x[i] + y[i];
  });
  check_finite(out, "add");
  maybe_record(tape, "add", {a, b}, out, [a, b, out]() mutable {
    dispatch(out.dtype(), [&]<class T>() {
      auto dz = out.grad<T>();
      for (const Tensor* t : {&a, &b}) {
        if (!t->requires_grad()) continue;
        auto dt = t->grad<T>();
        for (std::size_t i = 0; i < dz.size(); ++i) dt[i] += dz[i];
      }
    });
  });
  return out;
}

Tensor avg_pool2d(const Tensor& input, int kernel, int stride, Tape* tape) {
  expect_rank(input, 4, "avg_pool2d");
  const auto n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  std::int64_t kh = kernel, kw = kernel, s = stride;
  if (kernel == 0) {
    kh = h;
    kw = w;
    s = std::max(h, w);
  }
  if (kh <= 0 || s <= 0 || kh > h || kw > w) throw ConfigError("avg_pool2d: invalid kernel/stride");
  const auto ho = (h - kh) / s + 1, wo = (w - kw) / s + 1;
  Tensor out({n, c, ho, wo}, input.dtype());
  const double inv = 1.0 / static_cast<double>(kh * kw);
  dispatch(input.dtype(), [&]<class T>() {
    const T* x = input.data<T>().data();
    T* y = out.data<T>().data();
    for (std::int64_t p = 0; p < n * c; ++p) {
      for (std::int64_t oy = 0; oy < ho; ++oy) {
        for (std::int64_t ox = 0; ox < wo; ++ox) {
          double acc = 0.0;
          for (std::int64_t i = 0; i < kh; ++i) {
            for (std::int64_t j = 0; j < kw; ++j) acc += x[(p * h + oy * s + i) * w + ox * s + j];
          }
          y[(p * ho + oy) * wo + ox] = static_cast<T>(acc * inv);
        }
      }
    }
  });
  maybe_record(tape, "avg_pool2d", {input}, out, [input, out, n, c, h, w, kh, kw, s, ho, wo, inv]() mutable {
    dispatch(out.dtype(), [&]<class T>() {
      const T* dy = out.grad<T>().data();
      T* dx = input.grad<T>().data();
      for (std::int64_t p = 0; p < n * c; ++p) {
        for (std::int64_t oy = 0; oy < ho; ++oy) {
          for (std::int64_t ox = 0; ox < wo; ++ox) {
            const T g = static_cast<T>(dy[(p * ho + oy) * wo + ox] * inv);
            for (std::int64_t i = 0; i < kh; ++i) {
              for (std::int64_t j = 0; j < kw; ++j) dx[(p * h + oy * s + i) * w + ox * s + j] += g;
            }
          }
        }
      }
    });
  });
  return out;
}

Tensor flatten(const Tensor& input, Tape* tape) {
  const auto n = input.dim(0);
  Tensor out = input.reshaped({n, input.numel() / n});
  maybe_record(tape, "flatten", {input}, out, [input, out]() mutable {
    dispatch(out.dtype(), [&]<class T>() {
      auto dy = out.grad<T>();
      auto dx = input.grad<T>();
      for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i];
    });
  });
  return out;
}

Tensor scale(const Tensor& input, double factor, Tape* tape) {
  Tensor out(input.shape(), input.dtype());
  dispatch(input.dtype(), [&]<class T>() {
    auto x = input.data<T>();
    auto y = out.data<T>();
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = static_cast<T>(x[i] * factor);
  });
  check_finite(out, "scale");
  maybe_record(tape, "scale", {input}, out, [input, out, factor]() mutable {
    dispatch(out.dtype(), [&]<class T>() {
      auto dy = out.grad<T>();
      auto dx = input.grad<T>();
      for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += static_cast<T>(dy[i] * factor);
    });
  });
  return out;
}

Tensor channel_grad_mask(const Tensor& input, std::vector<double> mask, Tape* tape) {
  expect_rank(input, 4, "channel_grad_mask");
  const auto n = input.dim(0), c = input.dim(1), hw = input.dim(2) * input.dim(3);
  if (static_cast<std::int64_t>(mask.size()) != c) throw ConfigError("channel_grad_mask: mask length mismatch");
  Tensor out = input.reshaped(input.shape());
  maybe_record(tape, "channel_grad_mask", {input}, out, [input, out, mask, n, c, hw]() mutable {
    dispatch(out.dtype(), [&]<class T>() {
      auto dy = out.grad<T>();
      auto dx = input.grad<T>();
      for (std::int64_t i = 0; i < n; ++i) {
        for (std::int64_t ch = 0; ch < c; ++ch) {
          const std::int64_t base = (i * c + ch) * hw;
          for (std::int64_t j = 0; j < hw; ++j) dx[base + j] += static_cast<T>(dy[base + j] * mask[ch]);
        }
      }
    });
  });
  return out;
}

Tensor sum(const Tensor& input, Tape* tape) {
  Tensor out({1}, input.dtype());
  dispatch(input.dtype(), [&]<class T>() {
    double acc = 0.0;
    for (auto v : input.data<T>()) acc += v;
    out.data<T>()[0] = static_cast<T>(acc);
  });
  check_finite(out, "sum");
  maybe_record(tape, "sum", {input}, out, [input, out]() mutable {
    dispatch(out.dtype(), [&]<class T>() {
      const T g = out.grad<T>()[0];
      for (auto& v : input.grad<T>()) v += g;
    });
  });
  return out;
}

// ---------------------------------------------------------------------------
// losses

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels, Tape* tape) {
  expect_rank(logits, 2, "cross_entropy");
  const auto n = logits.dim(0), k = logits.dim(1);
  if (static_cast<std::int64_t>(labels.size()) != n) {
    throw ConfigError("cross_entropy: " + std::to_string(labels.size()) + " labels for batch of " +
                      std::to_string(n));
  }
  for (int y : labels) {
    if (y < 0 || y >= k) {
      throw ConfigError("cross_entropy: target class " + std::to_string(y) + " out of range [0," +
                        std::to_string(k) + ")");
    }
  }
  // Softmax probabilities are cached for the backward rule.
  std::vector<double> prob(static_cast<std::size_t>(n * k));
  Tensor out({1}, logits.dtype());
  dispatch(logits.dtype(), [&]<class T>() {
    auto z = logits.data<T>();
    double total = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::int64_t j = 0; j < k; ++j) mx = std::max(mx, static_cast<double>(z[i * k + j]));
      double denom = 0.0;
      for (std::int64_t j = 0; j < k; ++j) {
        prob[i * k + j] = std::exp(z[i * k + j] - mx);
        denom += prob[i * k + j];
      }
      for (std::int64_t j = 0; j < k; ++j) prob[i * k + j] /= denom;
      total += -(z[i * k + labels[i]] - mx - std::log(denom));
    }
    out.data<T>()[0] = static_cast<T>(total / static_cast<double>(n));
  });
  check_finite(out, "cross_entropy");
  std::vector<int> label_copy(labels.begin(), labels.end());
  maybe_record(tape, "cross_entropy", {logits}, out, [logits, out, prob, label_copy, n, k]() mutable {
    dispatch(out.dtype(), [&]<class T>() {
      const double g = out.grad<T>()[0] / static_cast<double>(n);
      auto dz = logits.grad<T>();
      for (std::int64_t i = 0; i < n; ++i) {
        for (std::int64_t j = 0; j < k; ++j) {
          const double onehot = (j == label_copy[i]) ? 1.0 : 0.0;
          dz[i * k + j] += static_cast<T>(g * (prob[i * k + j] - onehot));
        }
      }
    });
  });
  return out;
}

Tensor mse(const Tensor& pred, const Tensor& target, Tape* tape) {
  check_same_dtype(pred, target, "mse");
  if (pred.shape() != target.shape()) {
    throw ConfigError("mse: shape mismatch " + shape_to_string(pred.shape()) + " vs " +
                      shape_to_string(target.shape()));
  }
  Tensor out({1}, pred.dtype());
  const auto count = static_cast<double>(pred.numel());
  dispatch(pred.dtype(), [&]<class T>() {
    auto p = pred.data<T>();
    auto t = target.data<T>();
    double acc = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double d = static_cast<double>(p[i]) - t[i];
      acc += d * d;
    }
    out.data<T>()[0] = static_cast<T>(acc / count);
  });
  check_finite(out, "mse");
  maybe_record(tape, "mse", {pred, target}, out, [pred, target, out, count]() mutable {
    dispatch(out.dtype(), [&]<class T>() {
      const double g = 2.0 * out.grad<T>()[0] / count;
      auto p = pred.data<T>();
      auto t = target.data<T>();
      if (pred.requires_grad()) {
        auto dp = pred.grad<T>();
        for (std::size_t i = 0; i < p.size(); ++i) dp[i] += static_cast<T>(g * (p[i] - t[i]));
      }
      if (target.requires_grad()) {
        auto dt = target.grad<T>();
        for (std::size_t i = 0; i < p.size(); ++i) dt[i] -= static_cast<T>(g * (p[i] - t[i]));
      }
    });
  });
  return out;
}

Tensor loss(const Tensor& pred, std::span<const int> labels, const Tensor& target, LossKind kind,
            Tape* tape) {
  if (kind == LossKind::cross_entropy) return cross_entropy(pred, labels, tape);
  if (!target.defined()) throw ConfigError("mse loss requires a target tensor");
  return mse(pred, target, tape);
}

}  // namespace gfbs
