#pragma once

#include <compare>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "gfbs/autograd.hpp"

namespace gfbs {

enum class BlockKind {
  conv_bn_relu,
  conv_bn,  // linear-bottleneck layer: BN without a following ReLU
  conv,
  conv_relu,
  relu,
  residual_begin,
  residual_add,
  pool,
  flatten,
  linear,
};

std::string to_string(BlockKind kind);
BlockKind parse_block_kind(std::string_view name);

// One line of a network description: `kind out_channels kernel stride padding`.
// residual_begin with out_channels > 0 declares a projection shortcut
// (conv kernel/stride + BN); pool with kernel 0 is global average pooling.
struct BlockSpec {
  BlockKind kind = BlockKind::conv_bn_relu;
  int out_channels = 0;
  int kernel = 0;
  int stride = 1;
  int padding = 0;

  bool operator==(const BlockSpec&) const = default;
};

struct NetworkSpec {
  std::string name = "net";
  int in_channels = 1;
  int in_height = 1;
  int in_width = 1;
  std::vector<BlockSpec> blocks;

  static NetworkSpec parse(std::string_view text);
  static NetworkSpec load(const std::filesystem::path& path);
  // Canonical text form; parse(to_text()) == *this.
  std::string to_text() const;

  bool operator==(const NetworkSpec&) const = default;
};

struct BlockShape {
  std::int64_t in_c = 0, in_h = 0, in_w = 0;
  std::int64_t out_c = 0, out_h = 0, out_w = 0;
};

// Shape inference; throws ConfigError for an inconsistent description.
std::vector<BlockShape> infer_shapes(const NetworkSpec& spec);

// A BN-bearing conv layer, i.e. a layer whose channels can be scored and pruned.
struct LayerInfo {
  int block = 0;
  bool projection = false;    // shortcut conv of a residual_begin
  bool relu_follows = false;  // Conv-BN-ReLU layout
  std::int64_t channels = 0;
  std::string name;
};

std::vector<LayerInfo> prunable_layers(const NetworkSpec& spec);

struct ChannelRef {
  int layer = 0;
  int channel = 0;

  auto operator<=>(const ChannelRef&) const = default;
};

struct CouplingGroup {
  int group_id = 0;
  std::vector<ChannelRef> members;  // sorted ascending
  // False when the shared stream also carries channels that cannot be
  // removed (network input, plain conv without BN).
  bool prunable = true;
};

// Channel provenance for every block: which prunable layer (or -1 for a
// fixed stream) defines the channel positions of its input and output.
struct BlockSources {
  int in_source = -1;
  int out_source = -1;
  int projection_layer = -1;  // residual_begin with projection
  int skip_source = -1;       // residual_add: source of the joined skip stream
};

struct SourceMap {
  std::vector<BlockSources> blocks;
  // Layers joined by residual additions share a root and therefore their
  // channel positions.
  std::vector<int> layer_root;
  // True when the layer's stream is also joined with a fixed stream.
  std::vector<bool> layer_pinned;
};

SourceMap trace_sources(const NetworkSpec& spec);

std::vector<CouplingGroup> build_coupling_groups(const NetworkSpec& spec);

struct ForwardTrace {
  // Optional input: per prunable layer, a per-channel multiplier applied to
  // the gradient flowing into the BN output (1 = untouched, 0 = cut).
  std::map<int, std::vector<double>> post_bn_grad_mask;
  // Outputs, indexed by prunable layer: conv output (pre-BN) and BN output.
  std::vector<Tensor> pre_bn;
  std::vector<Tensor> post_bn;
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct BlockParams {
  ParamSet conv;        // conv* blocks
  ParamSet projection;  // residual_begin with projection
  LinearParams linear;  // linear blocks
};

class Network {
 public:
  // Kaiming fan-in normal weights, gamma = 1, beta = bias = 0.
  static Network build(const NetworkSpec& spec, std::uint64_t seed, DType dtype = DType::f32);

  const NetworkSpec& spec() const { return spec_; }
  const std::vector<BlockShape>& shapes() const { return shapes_; }
  const std::vector<LayerInfo>& layers() const { return layers_; }
  DType dtype() const { return dtype_; }

  Shape input_shape(std::int64_t batch) const {
    return {batch, spec_.in_channels, spec_.in_height, spec_.in_width};
  }

  Tensor forward(const Tensor& batch, BnMode mode, Tape* tape = nullptr,
                 ForwardTrace* trace = nullptr);

  BlockParams& block(int index) { return blocks_.at(static_cast<std::size_t>(index)); }
  const BlockParams& block(int index) const { return blocks_.at(static_cast<std::size_t>(index)); }
  // ParamSet holding the BN of prunable layer `layer`.
  ParamSet& layer_params(int layer);
  const ParamSet& layer_params(int layer) const;

  std::vector<Tensor> parameters() const;
  // Every persistent tensor (parameters and running statistics), in
  // checkpoint order.
  std::vector<NamedTensor> named_tensors() const;
  void zero_grad();
  void drop_grads();

  Network clone() const;
  Network to(DType dtype) const;

  // Deep copy of every persistent tensor, for exact rollback.
  std::vector<Tensor> snapshot() const;
  void restore(const std::vector<Tensor>& state);

 private:
  NetworkSpec spec_;
  std::vector<BlockShape> shapes_;
  std::vector<LayerInfo> layers_;
  std::vector<BlockParams> blocks_;
  DType dtype_ = DType::f32;
};

// Eval-mode forward in fixed-size chunks; output identical to one pass.
Tensor predict(Network& net, const Tensor& batch, std::int64_t chunk = 256);

struct FlopsEntry {
  int block = 0;
  std::string name;
  std::int64_t flops = 0;
  std::int64_t params = 0;
};

struct FlopsReport {
  std::vector<FlopsEntry> entries;
  std::int64_t total_flops = 0;
  std::int64_t total_params = 0;

  // total_flops / baseline.total_flops
  double ratio_to(const FlopsReport& baseline) const;
  double reduction_vs(const FlopsReport& baseline) const { return 1.0 - ratio_to(baseline); }
};

// Per-sample FLOPs: multiply-add = 2 FLOPs, biases counted, BN = 2 per
// element, ReLU = 1 per element, pooling = 1 per input element, residual
// add = 1 per element.
FlopsReport count_flops(const NetworkSpec& spec);
inline FlopsReport count_flops(const Network& net) { return count_flops(net.spec()); }

void save_checkpoint(const Network& net, const std::filesystem::path& path);
Network load_checkpoint(const std::filesystem::path& path);

// Byte-level encoding used by save/load_checkpoint.
std::string encode_checkpoint(const Network& net);
Network decode_checkpoint(std::string_view bytes);

}  // namespace gfbs
