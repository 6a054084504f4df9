#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "gfbs/tensor.hpp"

namespace gfbs {

// Learnable state of one Conv(-BN) layer. BN members are undefined for
// layers without normalization.
struct ParamSet {
  Tensor weight;  // [C_out, C_in, k, k]
  Tensor bias;    // [C_out]
  Tensor gamma;   // [C_out]
  Tensor beta;    // [C_out]
  Tensor running_mean;
  Tensor running_var;
  double eps = 1e-5;
  double momentum = 0.1;

  bool has_bn() const { return gamma.defined(); }
  std::int64_t out_channels() const { return weight.dim(0); }

  // Allocates zeroed tensors of the right shapes (gamma=1, running_var=1).
  static ParamSet conv(std::int64_t c_out, std::int64_t c_in, std::int64_t kernel, bool with_bn,
                       DType dtype = DType::f32);

  // Throws ConfigError when any invariant is violated.
  void validate() const;
  ParamSet clone() const;
  // Learnable tensors only (running statistics excluded).
  std::vector<Tensor> learnable() const;
};

struct LinearParams {
  Tensor weight;  // [D, K]
  Tensor bias;    // [K]

  LinearParams clone() const { return {weight.clone(), bias.clone()}; }
};

// Reverse-mode tape. Nodes are appended in execution order and replayed in
// exact reverse order by backward().
class Tape {
 public:
  struct Node {
    std::string op;
    std::vector<Tensor> inputs;
    Tensor output;
    std::function<void()> backward;
  };

  void record(std::string op, std::vector<Tensor> inputs, Tensor output,
              std::function<void()> backward);

  // Seeds d(loss)/d(loss) = 1 and runs every node backward. The tape is
  // consumed afterwards; a second call throws.
  void backward(Tensor& loss);

  bool consumed() const { return consumed_; }
  std::size_t size() const { return nodes_.size(); }
  const std::vector<Node>& nodes() const { return nodes_; }

 private:
  std::vector<Node> nodes_;
  bool consumed_ = false;
};

enum class BnMode { train, eval };
enum class LossKind { cross_entropy, mse };

LossKind parse_loss_kind(const std::string& name);
std::string to_string(LossKind kind);

// Cross-correlation with per-channel bias. Uses params.weight / params.bias.
Tensor conv2d(const Tensor& input, ParamSet& params, int stride, int padding, Tape* tape);

// Per-channel batch normalization over (N, H, W). Train mode normalizes with
// batch statistics and updates the running averages in `params`.
Tensor batchnorm(const Tensor& input, ParamSet& params, BnMode mode, Tape* tape);

Tensor relu(const Tensor& input, Tape* tape);

Tensor linear(const Tensor& input, Tensor& weight, Tensor& bias, Tape* tape);

Tensor add(const Tensor& a, const Tensor& b, Tape* tape);

// Average pooling; kernel == 0 pools globally to 1x1.
Tensor avg_pool2d(const Tensor& input, int kernel, int stride, Tape* tape);

Tensor flatten(const Tensor& input, Tape* tape);

Tensor scale(const Tensor& input, double factor, Tape* tape);

// Identity forward; backward multiplies the incoming gradient of channel c
// by mask[c]. Used to cut gradient flow into chosen channels.
Tensor channel_grad_mask(const Tensor& input, std::vector<double> mask, Tape* tape);

Tensor sum(const Tensor& input, Tape* tape);

// Mean-over-batch loss returned as a [1] tensor. For cross entropy `labels`
// holds class indices and `target` is ignored; for mse `target` is used.
Tensor loss(const Tensor& pred, std::span<const int> labels, const Tensor& target,
            LossKind kind, Tape* tape);

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels, Tape* tape);
Tensor mse(const Tensor& pred, const Tensor& target, Tape* tape);

}  // namespace gfbs
