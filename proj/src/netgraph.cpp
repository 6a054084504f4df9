#include "gfbs/netgraph.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <optional>
#include <numeric>
#include <random>
#include <sstream>

namespace gfbs {

namespace {

struct KindName {
  BlockKind kind;
  const char* name;
};

constexpr KindName kKindNames[] = {
    {BlockKind::conv_bn_relu, "conv_bn_relu"},
    {BlockKind::conv_bn, "conv_bn"},
    {BlockKind::conv, "conv"},
    {BlockKind::conv_relu, "conv_relu"},
    {BlockKind::relu, "relu"},
    {BlockKind::residual_begin, "residual_begin"},
    {BlockKind::residual_add, "residual_add"},
    {BlockKind::pool, "pool"},
    {BlockKind::flatten, "flatten"},
    {BlockKind::linear, "linear"},
};

bool is_conv(BlockKind k) {
  return k == BlockKind::conv_bn_relu || k == BlockKind::conv_bn || k == BlockKind::conv ||
         k == BlockKind::conv_relu;
}

bool has_bn(BlockKind k) { return k == BlockKind::conv_bn_relu || k == BlockKind::conv_bn; }

bool has_projection(const BlockSpec& b) {
  return b.kind == BlockKind::residual_begin && b.out_channels > 0;
}

int projection_kernel(const BlockSpec& b) { return b.kernel > 0 ? b.kernel : 1; }

std::string block_label(std::size_t i, const BlockSpec& b) {
  return "block " + std::to_string(i) + " (" + to_string(b.kind) + ")";
}

std::int64_t conv_out(std::int64_t in, int kernel, int stride, int pad, const std::string& where) {
  if (stride <= 0) throw ConfigError(where + ": stride must be positive");
  if (pad < 0) throw ConfigError(where + ": padding must be non-negative");
  if (in + 2 * pad < kernel) throw ConfigError(where + ": kernel larger than padded input");
  return (in + 2 * pad - kernel) / stride + 1;
}

}  // namespace

std::string to_string(BlockKind kind) {
  for (const auto& kn : kKindNames) {
    if (kn.kind == kind) return kn.name;
  }
  return "?";
}

BlockKind parse_block_kind(std::string_view name) {
  for (const auto& kn : kKindNames) {
    if (name == kn.name) return kn.kind;
  }
  throw ConfigError("unknown block kind '" + std::string(name) + "'");
}

// ---------------------------------------------------------------------------
// NetworkSpec text form

NetworkSpec NetworkSpec::parse(std::string_view text) {
  NetworkSpec spec;
  bool have_input = false;
  std::istringstream in{std::string(text)};
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    std::istringstream fields(line);
    std::string head;
    if (!(fields >> head)) continue;
    auto where = [&] { return "network spec line " + std::to_string(line_no); };
    if (head == "name") {
      if (!(fields >> spec.name)) throw ConfigError(where() + ": name expects a value");
      continue;
    }
    if (head == "input") {
      if (!(fields >> spec.in_channels >> spec.in_height >> spec.in_width) || spec.in_channels <= 0 ||
          spec.in_height <= 0 || spec.in_width <= 0) {
        throw ConfigError(where() + ": input expects three positive integers C H W");
      }
      have_input = true;
      continue;
    }
    BlockSpec b;
    b.kind = parse_block_kind(head);
    int values[4] = {0, 0, 1, 0};
    int count = 0;
    std::string tok;
    while (fields >> tok) {
      if (count == 4) throw ConfigError(where() + ": too many fields");
      try {
        std::size_t used = 0;
        values[count] = std::stoi(tok, &used);
        if (used != tok.size()) throw std::invalid_argument(tok);
      } catch (const std::exception&) {
        throw ConfigError(where() + ": '" + tok + "' is not an integer");
      }
      ++count;
    }
    b.out_channels = values[0];
    b.kernel = values[1];
    b.stride = values[2];
    b.padding = values[3];
    spec.blocks.push_back(b);
  }
  if (!have_input) throw ConfigError("network spec: missing 'input C H W' line");
  if (spec.blocks.empty()) throw ConfigError("network spec: no blocks");
  infer_shapes(spec);
  return spec;
}

NetworkSpec NetworkSpec::load(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open network spec '" + path.string() + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  return parse(ss.str());
}

std::string NetworkSpec::to_text() const {
  std::ostringstream out;
  out << "name " << name << '\n';
  out << "input " << in_channels << ' ' << in_height << ' ' << in_width << '\n';
  for (const auto& b : blocks) {
    out << to_string(b.kind) << ' ' << b.out_channels << ' ' << b.kernel << ' ' << b.stride << ' '
        << b.padding << '\n';
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// shape inference and provenance

std::vector<BlockShape> infer_shapes(const NetworkSpec& spec) {
  std::vector<BlockShape> shapes;
  std::int64_t c = spec.in_channels, h = spec.in_height, w = spec.in_width;
  bool flat = false;
  struct Pending {
    std::int64_t c, h, w;
    std::size_t block;
  };
  std::vector<Pending> skips;
  for (std::size_t i = 0; i < spec.blocks.size(); ++i) {
    const auto& b = spec.blocks[i];
    const auto where = block_label(i, b);
    BlockShape s{c, h, w, c, h, w};
    if ((b.kind == BlockKind::pool || b.kind == BlockKind::flatten || b.kind == BlockKind::relu ||
         b.kind == BlockKind::residual_add) &&
        b.out_channels != 0) {
      throw ConfigError(where + ": takes no channel count (fields are channels kernel stride padding)");
    }
    if (is_conv(b.kind)) {
      if (flat) throw ConfigError(where + ": convolution after flatten");
      if (b.out_channels <= 0 || b.kernel <= 0) {
        throw ConfigError(where + ": needs positive out_channels and kernel");
      }
      s.out_c = b.out_channels;
      s.out_h = conv_out(h, b.kernel, b.stride, b.padding, where);
      s.out_w = conv_out(w, b.kernel, b.stride, b.padding, where);
    } else if (b.kind == BlockKind::residual_begin) {
      if (flat) throw ConfigError(where + ": residual after flatten");
      if (has_projection(b)) {
        const int k = projection_kernel(b);
        skips.push_back({b.out_channels, conv_out(h, k, b.stride, b.padding, where),
                         conv_out(w, k, b.stride, b.padding, where), i});
      } else {
        skips.push_back({c, h, w, i});
      }
    } else if (b.kind == BlockKind::residual_add) {
      if (skips.empty()) throw ConfigError(where + ": residual_add without residual_begin");
      const auto skip = skips.back();
      skips.pop_back();
      if (skip.c != c || skip.h != h || skip.w != w) {
        throw ConfigError(where + ": joined streams differ (" + std::to_string(c) + "x" +
                          std::to_string(h) + "x" + std::to_string(w) + " vs " +
                          std::to_string(skip.c) + "x" + std::to_string(skip.h) + "x" +
                          std::to_string(skip.w) + " from block " + std::to_string(skip.block) + ")");
      }
    } else if (b.kind == BlockKind::pool) {
      if (flat) throw ConfigError(where + ": pooling after flatten");
      if (b.kernel == 0) {
        s.out_h = s.out_w = 1;
      } else {
        s.out_h = conv_out(h, b.kernel, b.stride, 0, where);
        s.out_w = conv_out(w, b.kernel, b.stride, 0, where);
      }
    } else if (b.kind == BlockKind::flatten) {
      s.out_c = c * h * w;
      s.out_h = s.out_w = 1;
      flat = true;
    } else if (b.kind == BlockKind::linear) {
      if (!flat) throw ConfigError(where + ": linear requires a preceding flatten");
      if (b.out_channels <= 0) throw ConfigError(where + ": needs positive out_channels");
      s.out_c = b.out_channels;
    }
    c = s.out_c;
    h = s.out_h;
    w = s.out_w;
    shapes.push_back(s);
  }
  if (!skips.empty()) {
    throw ConfigError("block " + std::to_string(skips.back().block) +
                      ": residual_begin without matching residual_add");
  }
  return shapes;
}

std::vector<LayerInfo> prunable_layers(const NetworkSpec& spec) {
  std::vector<LayerInfo> layers;
  for (std::size_t i = 0; i < spec.blocks.size(); ++i) {
    const auto& b = spec.blocks[i];
    if (has_bn(b.kind)) {
      layers.push_back({static_cast<int>(i), false, b.kind == BlockKind::conv_bn_relu, b.out_channels,
                        "b" + std::to_string(i)});
    } else if (has_projection(b)) {
      layers.push_back({static_cast<int>(i), true, false, b.out_channels,
                        "b" + std::to_string(i) + ".proj"});
    }
  }
  return layers;
}

SourceMap trace_sources(const NetworkSpec& spec) {
  const auto layers = prunable_layers(spec);
  const int n_layers = static_cast<int>(layers.size());
  std::vector<int> parent(static_cast<std::size_t>(n_layers));
  std::iota(parent.begin(), parent.end(), 0);
  auto find = [&](int x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  };
  std::vector<int> pinned_joins;

  SourceMap map;
  map.blocks.resize(spec.blocks.size());
  int next_layer = 0;
  int current = -1;
  std::vector<int> skips;
  for (std::size_t i = 0; i < spec.blocks.size(); ++i) {
    const auto& b = spec.blocks[i];
    auto& bs = map.blocks[i];
    bs.in_source = current;
    if (has_bn(b.kind)) {
      current = next_layer++;
    } else if (is_conv(b.kind) || b.kind == BlockKind::linear) {
      current = -1;
    } else if (b.kind == BlockKind::residual_begin) {
      if (has_projection(b)) {
        bs.projection_layer = next_layer;
        skips.push_back(next_layer++);
      } else {
        skips.push_back(current);
      }
    } else if (b.kind == BlockKind::residual_add) {
      bs.skip_source = skips.back();
      skips.pop_back();
      if (current >= 0 && bs.skip_source >= 0) {
        const int a = find(current), c = find(bs.skip_source);
        if (a != c) parent[std::max(a, c)] = std::min(a, c);
      } else if (current >= 0) {
        pinned_joins.push_back(current);
      } else if (bs.skip_source >= 0) {
        pinned_joins.push_back(bs.skip_source);
      }
    }
    bs.out_source = current;
  }
  map.layer_root.resize(static_cast<std::size_t>(n_layers));
  map.layer_pinned.assign(static_cast<std::size_t>(n_layers), false);
  for (int l = 0; l < n_layers; ++l) map.layer_root[l] = find(l);
  for (int l : pinned_joins) {
    const int root = find(l);
    for (int m = 0; m < n_layers; ++m) {
      if (map.layer_root[m] == root) map.layer_pinned[m] = true;
    }
  }
  return map;
}

std::vector<CouplingGroup> build_coupling_groups(const NetworkSpec& spec) {
  const auto layers = prunable_layers(spec);
  const auto sources = trace_sources(spec);
  const int n = static_cast<int>(layers.size());
  std::map<int, std::vector<int>> members_by_root;
  for (int l = 0; l < n; ++l) members_by_root[sources.layer_root[l]].push_back(l);

  std::vector<CouplingGroup> groups;
  std::vector<std::vector<int>> assigned(static_cast<std::size_t>(n));
  for (int l = 0; l < n; ++l) assigned[l].assign(static_cast<std::size_t>(layers[l].channels), -1);
  for (int l = 0; l < n; ++l) {
    const auto& cls = members_by_root[sources.layer_root[l]];
    for (int ch = 0; ch < layers[l].channels; ++ch) {
      if (assigned[l][ch] >= 0) continue;
      CouplingGroup g;
      g.group_id = static_cast<int>(groups.size());
      g.prunable = !sources.layer_pinned[l];
      for (int m : cls) {
        g.members.push_back({m, ch});
        assigned[m][ch] = g.group_id;
      }
      groups.push_back(std::move(g));
    }
  }
  return groups;
}

// ---------------------------------------------------------------------------
// Network

Network Network::build(const NetworkSpec& spec, std::uint64_t seed, DType dtype) {
  Network net;
  net.spec_ = spec;
  net.shapes_ = infer_shapes(spec);
  net.layers_ = prunable_layers(spec);
  net.dtype_ = dtype;
  net.blocks_.resize(spec.blocks.size());
  std::mt19937_64 rng(seed);
  auto kaiming = [&](Tensor& t, std::int64_t fan_in) {
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
    dispatch(t.dtype(), [&]<class T>() {
      for (auto& v : t.data<T>()) v = static_cast<T>(dist(rng));
    });
  };
  for (std::size_t i = 0; i < spec.blocks.size(); ++i) {
    const auto& b = spec.blocks[i];
    const auto& s = net.shapes_[i];
    auto& bp = net.blocks_[i];
    if (is_conv(b.kind)) {
      bp.conv = ParamSet::conv(b.out_channels, s.in_c, b.kernel, has_bn(b.kind), dtype);
      kaiming(bp.conv.weight, s.in_c * b.kernel * b.kernel);
    } else if (has_projection(b)) {
      const int k = projection_kernel(b);
      bp.projection = ParamSet::conv(b.out_channels, s.in_c, k, true, dtype);
      kaiming(bp.projection.weight, s.in_c * k * k);
    } else if (b.kind == BlockKind::linear) {
      bp.linear.weight = Tensor({s.in_c, b.out_channels}, dtype).set_requires_grad(true);
      bp.linear.bias = Tensor({b.out_channels}, dtype).set_requires_grad(true);
      kaiming(bp.linear.weight, s.in_c);
    }
  }
  return net;
}

ParamSet& Network::layer_params(int layer) {
  const auto& info = layers_.at(static_cast<std::size_t>(layer));
  auto& bp = blocks_.at(static_cast<std::size_t>(info.block));
  return info.projection ? bp.projection : bp.conv;
}

const ParamSet& Network::layer_params(int layer) const {
  return const_cast<Network*>(this)->layer_params(layer);
}

Tensor Network::forward(const Tensor& batch, BnMode mode, Tape* tape, ForwardTrace* trace) {
  if (batch.ndim() != 4 || batch.dim(1) != spec_.in_channels || batch.dim(2) != spec_.in_height ||
      batch.dim(3) != spec_.in_width) {
    throw ConfigError("network '" + spec_.name + "' expects input [N, " +
                      std::to_string(spec_.in_channels) + ", " + std::to_string(spec_.in_height) +
                      ", " + std::to_string(spec_.in_width) + "], got " +
                      shape_to_string(batch.shape()));
  }
  if (batch.dtype() != dtype_) throw ConfigError("network dtype differs from input dtype");
  if (trace) {
    trace->pre_bn.assign(layers_.size(), Tensor{});
    trace->post_bn.assign(layers_.size(), Tensor{});
  }
  int next_layer = 0;
  auto normalize = [&](const Tensor& x, ParamSet& p) {
    const int l = next_layer++;
    Tensor y = batchnorm(x, p, mode, tape);
    if (trace) {
      if (auto it = trace->post_bn_grad_mask.find(l); it != trace->post_bn_grad_mask.end()) {
        y = channel_grad_mask(y, it->second, tape);
      }
      trace->pre_bn[l] = x;
      trace->post_bn[l] = y;
    }
    return y;
  };

  Tensor x = batch;
  std::vector<Tensor> skips;
  for (std::size_t i = 0; i < spec_.blocks.size(); ++i) {
    const auto& b = spec_.blocks[i];
    auto& bp = blocks_[i];
    switch (b.kind) {
      case BlockKind::conv_bn_relu:
        x = relu(normalize(conv2d(x, bp.conv, b.stride, b.padding, tape), bp.conv), tape);
        break;
      case BlockKind::conv_bn:
        x = normalize(conv2d(x, bp.conv, b.stride, b.padding, tape), bp.conv);
        break;
      case BlockKind::conv:
        x = conv2d(x, bp.conv, b.stride, b.padding, tape);
        break;
      case BlockKind::conv_relu:
        x = relu(conv2d(x, bp.conv, b.stride, b.padding, tape), tape);
        break;
      case BlockKind::relu:
        x = relu(x, tape);
        break;
      case BlockKind::residual_begin:
        if (has_projection(b)) {
          skips.push_back(normalize(conv2d(x, bp.projection, b.stride, b.padding, tape), bp.projection));
        } else {
          skips.push_back(x);
        }
        break;
      case BlockKind::residual_add:
        x = add(x, skips.back(), tape);
        skips.pop_back();
        break;
      case BlockKind::pool:
        x = avg_pool2d(x, b.kernel, b.stride, tape);
        break;
      case BlockKind::flatten:
        x = flatten(x, tape);
        break;
      case BlockKind::linear:
        x = linear(x, bp.linear.weight, bp.linear.bias, tape);
        break;
    }
  }
  return x;
}

std::vector<Tensor> Network::parameters() const {
  std::vector<Tensor> out;
  for (const auto& bp : blocks_) {
    for (const ParamSet* p : {&bp.conv, &bp.projection}) {
      if (!p->weight.defined()) continue;
      for (auto& t : p->learnable()) out.push_back(t);
    }
    if (bp.linear.weight.defined()) {
      out.push_back(bp.linear.weight);
      out.push_back(bp.linear.bias);
    }
  }
  return out;
}

std::vector<NamedTensor> Network::named_tensors() const {
  std::vector<NamedTensor> out;
  auto add_set = [&](const std::string& prefix, const ParamSet& p) {
    out.push_back({prefix + ".weight", p.weight});
    out.push_back({prefix + ".bias", p.bias});
    if (p.has_bn()) {
      out.push_back({prefix + ".gamma", p.gamma});
      out.push_back({prefix + ".beta", p.beta});
      out.push_back({prefix + ".running_mean", p.running_mean});
      out.push_back({prefix + ".running_var", p.running_var});
    }
  };
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    const auto& bp = blocks_[i];
    const std::string prefix = "b" + std::to_string(i);
    if (bp.conv.weight.defined()) add_set(prefix, bp.conv);
    if (bp.projection.weight.defined()) add_set(prefix + ".proj", bp.projection);
    if (bp.linear.weight.defined()) {
      out.push_back({prefix + ".linear.weight", bp.linear.weight});
      out.push_back({prefix + ".linear.bias", bp.linear.bias});
    }
  }
  return out;
}

void Network::zero_grad() {
  for (auto& t : parameters()) t.zero_grad();
}

void Network::drop_grads() {
  for (auto& t : parameters()) t.drop_grad();
}

Network Network::clone() const {
  Network net;
  net.spec_ = spec_;
  net.shapes_ = shapes_;
  net.layers_ = layers_;
  net.dtype_ = dtype_;
  net.blocks_.resize(blocks_.size());
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    const auto& src = blocks_[i];
    auto& dst = net.blocks_[i];
    if (src.conv.weight.defined()) dst.conv = src.conv.clone();
    if (src.projection.weight.defined()) dst.projection = src.projection.clone();
    if (src.linear.weight.defined()) dst.linear = src.linear.clone();
  }
  net.drop_grads();
  return net;
}

Network Network::to(DType dtype) const {
  Network net = Network::build(spec_, 0, dtype);
  auto src = named_tensors();
  auto dst = net.named_tensors();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i].tensor.copy_from(src[i].tensor);
  return net;
}

std::vector<Tensor> Network::snapshot() const {
  std::vector<Tensor> out;
  for (const auto& nt : named_tensors()) out.push_back(nt.tensor.clone());
  return out;
}

void Network::restore(const std::vector<Tensor>& state) {
  auto current = named_tensors();
  if (current.size() != state.size()) throw ConfigError("restore: snapshot does not match network");
  for (std::size_t i = 0; i < state.size(); ++i) current[i].tensor.copy_from(state[i]);
}

Tensor predict(Network& net, const Tensor& batch, std::int64_t chunk) {
  const auto n = batch.dim(0);
  if (n <= chunk) return net.forward(batch, BnMode::eval);
  const auto per = batch.numel() / n;
  Tensor out;
  std::int64_t out_per = 0;
  dispatch(batch.dtype(), [&]<class T>() {
    auto src = batch.data<T>();
    for (std::int64_t start = 0; start < n; start += chunk) {
      const auto len = std::min(chunk, n - start);
      Shape s = batch.shape();
      s[0] = len;
      Tensor part(s, batch.dtype());
      std::copy_n(src.begin() + start * per, len * per, part.data<T>().begin());
      Tensor y = net.forward(part, BnMode::eval);
      if (!out.defined()) {
        Shape os = y.shape();
        os[0] = n;
        out = Tensor(os, batch.dtype());
        out_per = y.numel() / len;
      }
      auto dst = out.data<T>();
      std::copy_n(y.data<T>().begin(), len * out_per, dst.begin() + start * out_per);
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// FLOPs

double FlopsReport::ratio_to(const FlopsReport& baseline) const {
  if (baseline.total_flops == 0) throw ConfigError("baseline FLOPs are zero");
  return static_cast<double>(total_flops) / static_cast<double>(baseline.total_flops);
}

FlopsReport count_flops(const NetworkSpec& spec) {
  const auto shapes = infer_shapes(spec);
  FlopsReport report;
  auto conv_cost = [](std::int64_t c_in, std::int64_t c_out, std::int64_t k, std::int64_t ho,
                      std::int64_t wo) { return 2 * ho * wo * c_out * (k * k * c_in) + ho * wo * c_out; };
  for (std::size_t i = 0; i < spec.blocks.size(); ++i) {
    const auto& b = spec.blocks[i];
    const auto& s = shapes[i];
    const std::int64_t out_elems = s.out_c * s.out_h * s.out_w;
    FlopsEntry e;
    e.block = static_cast<int>(i);
    e.name = "b" + std::to_string(i) + "." + to_string(b.kind);
    if (is_conv(b.kind)) {
      e.flops = conv_cost(s.in_c, s.out_c, b.kernel, s.out_h, s.out_w);
      e.params = s.out_c * s.in_c * b.kernel * b.kernel + s.out_c;
      if (has_bn(b.kind)) {
        e.flops += 2 * out_elems;
        e.params += 2 * s.out_c;
      }
      if (b.kind == BlockKind::conv_bn_relu || b.kind == BlockKind::conv_relu) e.flops += out_elems;
    } else if (has_projection(b)) {
      const int k = projection_kernel(b);
      const auto ho = conv_out(s.in_h, k, b.stride, b.padding, e.name);
      const auto wo = conv_out(s.in_w, k, b.stride, b.padding, e.name);
      e.flops = conv_cost(s.in_c, b.out_channels, k, ho, wo) + 2 * b.out_channels * ho * wo;
      e.params = static_cast<std::int64_t>(b.out_channels) * s.in_c * k * k + 3 * b.out_channels;
    } else if (b.kind == BlockKind::relu || b.kind == BlockKind::residual_add) {
      e.flops = out_elems;
    } else if (b.kind == BlockKind::pool) {
      e.flops = s.in_c * s.in_h * s.in_w;
    } else if (b.kind == BlockKind::linear) {
      e.flops = 2 * s.in_c * s.out_c + s.out_c;
      e.params = s.in_c * s.out_c + s.out_c;
    }
    report.total_flops += e.flops;
    report.total_params += e.params;
    report.entries.push_back(std::move(e));
  }
  return report;
}

// ---------------------------------------------------------------------------
// checkpoints

namespace {

constexpr char kMagic[4] = {'G', 'F', 'B', 'S'};
constexpr std::uint32_t kFormatVersion = 1;

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

template <class T>
void put_le(std::string& out, T value) {
  using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  U bits;
  std::memcpy(&bits, &value, sizeof(T));
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFFu));
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}
  bool done() const { return pos_ == bytes_.size(); }
  std::string_view take(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) throw FormatError(std::string("checkpoint truncated while reading ") + what);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::uint8_t u8(const char* what) { return static_cast<std::uint8_t>(take(1, what)[0]); }
  std::uint32_t u32(const char* what) {
    auto s = take(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(s[i])) << (8 * i);
    return v;
  }
  template <class T>
  T value(const char* what) {
    using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
    auto s = take(sizeof(T), what);
    U bits = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) bits |= static_cast<U>(static_cast<unsigned char>(s[i])) << (8 * i);
    T v;
    std::memcpy(&v, &bits, sizeof(T));
    return v;
  }

 private:
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string encode_checkpoint(const Network& net) {
  std::string out(kMagic, 4);
  put_u32(out, kFormatVersion);
  const std::string spec_text = net.spec().to_text();
  put_u32(out, static_cast<std::uint32_t>(spec_text.size()));
  out += spec_text;
  for (const auto& [name, t] : net.named_tensors()) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    out.push_back(static_cast<char>(t.dtype()));
    out.push_back(static_cast<char>(t.ndim()));
    for (auto d : t.shape()) put_u32(out, static_cast<std::uint32_t>(d));
    dispatch(t.dtype(), [&]<class T>() {
      for (T v : t.data<T>()) put_le(out, v);
    });
  }
  return out;
}

Network decode_checkpoint(std::string_view bytes) {
  Reader r(bytes);
  auto magic = r.take(4, "magic");
  if (std::memcmp(magic.data(), kMagic, 4) != 0) throw FormatError("not a GFBS checkpoint (bad magic)");
  const auto version = r.u32("version");
  if (version != kFormatVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto spec_len = r.u32("spec length");
  NetworkSpec spec;
  try {
    spec = NetworkSpec::parse(r.take(spec_len, "spec text"));
  } catch (const ConfigError& e) {
    throw FormatError(std::string("embedded spec is invalid: ") + e.what());
  }

  std::map<std::string, Tensor> records;
  std::optional<DType> dtype;
  while (!r.done()) {
    const auto name_len = r.u32("tensor name length");
    std::string name(r.take(name_len, "tensor name"));
    const auto tag = r.u8("dtype tag");
    if (tag > 1) throw FormatError("tensor '" + name + "': unknown dtype tag " + std::to_string(tag));
    const auto dt = static_cast<DType>(tag);
    if (dtype && *dtype != dt) throw FormatError("checkpoint mixes dtypes");
    dtype = dt;
    const auto ndim = r.u8("ndim");
    if (ndim == 0) throw FormatError("tensor '" + name + "': zero rank");
    Shape shape;
    for (int i = 0; i < ndim; ++i) {
      const auto d = r.u32("dims");
      if (d == 0) throw FormatError("tensor '" + name + "': zero dimension");
      shape.push_back(d);
    }
    Tensor t(shape, dt);
    dispatch(dt, [&]<class T>() {
      for (auto& v : t.data<T>()) v = r.value<T>("tensor data");
    });
    if (!records.emplace(name, std::move(t)).second) throw FormatError("duplicate tensor '" + name + "'");
  }

  Network net = Network::build(spec, 0, dtype.value_or(DType::f32));
  auto expected = net.named_tensors();
  for (auto& [name, t] : expected) {
    auto it = records.find(name);
    if (it == records.end()) throw FormatError("checkpoint is missing tensor '" + name + "'");
    if (it->second.shape() != t.shape()) {
      throw FormatError("tensor '" + name + "' has shape " + shape_to_string(it->second.shape()) +
                        ", embedded spec requires " + shape_to_string(t.shape()));
    }
    t.copy_from(it->second);
    records.erase(it);
  }
  if (!records.empty()) throw FormatError("checkpoint has unexpected tensor '" + records.begin()->first + "'");
  for (int l = 0; l < static_cast<int>(net.layers().size()); ++l) {
    for (double v : net.layer_params(l).running_var.to_vector()) {
      if (!(v >= 0.0)) throw FormatError("negative running variance in checkpoint");
    }
  }
  return net;
}

void save_checkpoint(const Network& net, const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw ConfigError("cannot write checkpoint '" + path.string() + "'");
  const auto bytes = encode_checkpoint(net);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw ConfigError("failed writing checkpoint '" + path.string() + "'");
}

Network load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot open checkpoint '" + path.string() + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  return decode_checkpoint(ss.str());
}

}  // namespace gfbs
