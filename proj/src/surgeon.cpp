#include "gfbs/surgeon.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <tuple>

#include "gfbs/errors.hpp"
#include "json.hpp"

namespace gfbs {

namespace {

using ordered_json = nlohmann::ordered_json;

std::int64_t total_channels(const Network& net) {
  std::int64_t total = 0;
  for (const auto& l : net.layers()) total += l.channels;
  return total;
}

std::vector<std::vector<double>> score_table(const Network& net,
                                             const std::vector<SaliencyRecord>& records) {
  std::vector<std::vector<double>> table(net.layers().size());
  std::vector<std::vector<bool>> seen(net.layers().size());
  for (std::size_t l = 0; l < net.layers().size(); ++l) {
    table[l].assign(static_cast<std::size_t>(net.layers()[l].channels), 0.0);
    seen[l].assign(table[l].size(), false);
  }
  for (const auto& r : records) {
    const auto l = static_cast<std::size_t>(r.channel.layer);
    if (l >= table.size() || r.channel.channel < 0 ||
        static_cast<std::size_t>(r.channel.channel) >= table[l].size()) {
      throw ConfigError("saliency record for unknown channel (" + std::to_string(r.channel.layer) +
                        ", " + std::to_string(r.channel.channel) + ")");
    }
    table[l][r.channel.channel] = r.score;
    seen[l][r.channel.channel] = true;
  }
  for (std::size_t l = 0; l < seen.size(); ++l) {
    for (std::size_t c = 0; c < seen[l].size(); ++c) {
      if (!seen[l][c]) {
        throw ConfigError("saliency records miss channel (" + std::to_string(l) + ", " +
                          std::to_string(c) + ")");
      }
    }
  }
  return table;
}

std::vector<std::int64_t> all_indices(std::int64_t n) {
  std::vector<std::int64_t> v(static_cast<std::size_t>(n));
  std::iota(v.begin(), v.end(), 0);
  return v;
}

// dst[o, i, rest] = src[out_keep[o], in_keep[i], rest] for a tensor whose
// first two axes are (out, in); 1-D tensors use only out_keep.
void gather_into(Tensor& dst, const Tensor& src, const std::vector<std::int64_t>& out_keep,
                 const std::vector<std::int64_t>& in_keep) {
  const auto values = src.to_vector();
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(dst.numel()));
  if (src.ndim() == 1) {
    for (auto o : out_keep) out.push_back(values[o]);
  } else {
    const auto in_total = src.dim(1);
    const auto rest = src.numel() / (src.dim(0) * in_total);
    for (auto o : out_keep) {
      for (auto i : in_keep) {
        const auto base = (o * in_total + i) * rest;
        for (std::int64_t r = 0; r < rest; ++r) out.push_back(values[base + r]);
      }
    }
  }
  dst.copy_from(Tensor::from_values(dst.shape(), out, DType::f64));
}

void copy_param_set(ParamSet& dst, const ParamSet& src, const std::vector<std::int64_t>& out_keep,
                    const std::vector<std::int64_t>& in_keep) {
  gather_into(dst.weight, src.weight, out_keep, in_keep);
  gather_into(dst.bias, src.bias, out_keep, {});
  if (src.has_bn()) {
    gather_into(dst.gamma, src.gamma, out_keep, {});
    gather_into(dst.beta, src.beta, out_keep, {});
    gather_into(dst.running_mean, src.running_mean, out_keep, {});
    gather_into(dst.running_var, src.running_var, out_keep, {});
    dst.eps = src.eps;
    dst.momentum = src.momentum;
  }
}

}  // namespace

PrunePlan plan_prune(const Network& net, const std::vector<SaliencyRecord>& records,
                     const PruneConfig& cfg) {
  cfg.validate();
  const auto scores = score_table(net, records);
  const auto groups = build_coupling_groups(net.spec());
  const auto total = total_channels(net);
  const auto budget = static_cast<std::int64_t>(std::floor(cfg.tau * static_cast<double>(total) + 1e-9));

  struct Candidate {
    double score;
    int group;
  };
  std::vector<Candidate> order;
  for (const auto& g : groups) {
    if (!g.prunable) continue;
    double sum = 0.0;
    for (const auto& m : g.members) sum += scores[m.layer][m.channel];
    order.push_back({sum / static_cast<double>(g.members.size()), g.group_id});
  }
  std::sort(order.begin(), order.end(), [](const Candidate& a, const Candidate& b) {
    if (a.score != b.score) return a.score < b.score;
    return a.group < b.group;
  });

  PrunePlan plan;
  plan.spec_name = net.spec().name;
  plan.tau = cfg.tau;
  plan.min_keep = cfg.min_keep;
  plan.criterion = cfg.criterion;
  plan.lambda = cfg.lambda;
  std::vector<int> kept;
  for (const auto& l : net.layers()) kept.push_back(static_cast<int>(l.channels));

  std::int64_t removed = 0;
  bool blocked = false;
  for (const auto& cand : order) {
    const auto& g = groups[cand.group];
    const auto size = static_cast<std::int64_t>(g.members.size());
    if (removed + size > budget) continue;
    const bool too_thin = std::any_of(g.members.begin(), g.members.end(), [&](const ChannelRef& m) {
      return kept[m.layer] - 1 < cfg.min_keep;
    });
    if (too_thin) {
      blocked = true;
      continue;
    }
    for (const auto& m : g.members) {
      plan.removed.push_back({m.layer, m.channel, g.group_id});
      --kept[m.layer];
    }
    removed += size;
  }
  std::sort(plan.removed.begin(), plan.removed.end(), [](const RemovedChannel& a, const RemovedChannel& b) {
    return std::tie(a.layer, a.channel) < std::tie(b.layer, b.channel);
  });
  std::vector<std::vector<bool>> gone(net.layers().size());
  for (std::size_t l = 0; l < gone.size(); ++l) {
    gone[l].assign(static_cast<std::size_t>(net.layers()[l].channels), false);
  }
  for (const auto& r : plan.removed) gone[r.layer][r.channel] = true;
  plan.kept_per_layer.resize(gone.size());
  for (std::size_t l = 0; l < gone.size(); ++l) {
    for (std::size_t c = 0; c < gone[l].size(); ++c) {
      if (!gone[l][c]) plan.kept_per_layer[l].push_back(static_cast<int>(c));
    }
  }
  plan.shortfall = blocked && removed < budget;
  plan.achieved_ratio = total > 0 ? static_cast<double>(removed) / static_cast<double>(total) : 0.0;
  const auto base = count_flops(net.spec());
  plan.flops_ratio = count_flops(pruned_spec(net.spec(), kept)).ratio_to(base);
  return plan;
}

PrunePlan plan_for_flops_reduction(const Network& net, const std::vector<SaliencyRecord>& records,
                                   PruneConfig cfg, double target_reduction) {
  if (!(target_reduction > 0.0 && target_reduction < 1.0)) {
    throw ConfigError("FLOPs reduction target must be in (0,1)");
  }
  const auto total = total_channels(net);
  if (total < 2) throw ConfigError("network has no prunable channels");
  auto plan_at = [&](std::int64_t budget) {
    cfg.tau = static_cast<double>(budget) / static_cast<double>(total);
    return plan_prune(net, records, cfg);
  };
  auto reaches = [&](const PrunePlan& p) { return 1.0 - p.flops_ratio >= target_reduction; };

  std::int64_t lo = 1, hi = total - 1;
  PrunePlan best = plan_at(hi);
  if (!reaches(best)) return best;
  while (lo < hi) {
    const auto mid = lo + (hi - lo) / 2;
    auto p = plan_at(mid);
    if (reaches(p)) {
      hi = mid;
      best = std::move(p);
    } else {
      lo = mid + 1;
    }
  }
  return best;
}

std::vector<int> PrunePlan::kept_counts() const {
  std::vector<int> counts;
  for (const auto& k : kept_per_layer) counts.push_back(static_cast<int>(k.size()));
  return counts;
}

NetworkSpec pruned_spec(const NetworkSpec& spec, const std::vector<int>& kept_counts) {
  const auto layers = prunable_layers(spec);
  if (kept_counts.size() != layers.size()) {
    throw ConfigError("kept_per_layer has " + std::to_string(kept_counts.size()) +
                      " entries, network has " + std::to_string(layers.size()) + " prunable layers");
  }
  NetworkSpec out = spec;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    if (kept_counts[l] < 1) throw ConfigError("layer " + layers[l].name + " would lose every channel");
    out.blocks[layers[l].block].out_channels = kept_counts[l];
  }
  return out;
}

ValidationReport validate_plan(const Network& net, const PrunePlan& plan) {
  ValidationReport report;
  auto fail = [&](std::string msg) {
    report.ok = false;
    report.violations.push_back(std::move(msg));
  };
  const auto& layers = net.layers();
  const auto groups = build_coupling_groups(net.spec());
  std::map<ChannelRef, int> group_of;
  for (const auto& g : groups) {
    for (const auto& m : g.members) group_of[m] = g.group_id;
  }

  std::set<ChannelRef> seen;
  std::vector<int> removed_in_layer(layers.size(), 0);
  std::map<int, int> removed_per_group;
  for (const auto& r : plan.removed) {
    const ChannelRef ref{r.layer, r.channel};
    auto it = group_of.find(ref);
    if (it == group_of.end()) {
      fail("unknown channel (" + std::to_string(r.layer) + ", " + std::to_string(r.channel) + ")");
      continue;
    }
    if (!seen.insert(ref).second) {
      fail("channel (" + std::to_string(r.layer) + ", " + std::to_string(r.channel) + ") removed twice");
      continue;
    }
    if (it->second != r.group_id) {
      fail("channel (" + std::to_string(r.layer) + ", " + std::to_string(r.channel) +
           ") belongs to group " + std::to_string(it->second) + ", plan says " +
           std::to_string(r.group_id));
    }
    ++removed_in_layer[r.layer];
    ++removed_per_group[it->second];
  }
  for (const auto& [gid, count] : removed_per_group) {
    const auto& g = groups[gid];
    if (!g.prunable) fail("group " + std::to_string(gid) + " is not prunable");
    if (count != static_cast<int>(g.members.size())) {
      fail("group " + std::to_string(gid) + " only partially removed (" + std::to_string(count) +
           " of " + std::to_string(g.members.size()) + ")");
    }
  }
  if (plan.kept_per_layer.size() != layers.size()) {
    fail("kept_per_layer has " + std::to_string(plan.kept_per_layer.size()) + " entries, expected " +
         std::to_string(layers.size()));
    return report;
  }
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& keep = plan.kept_per_layer[l];
    const auto channels = static_cast<int>(layers[l].channels);
    if (!std::is_sorted(keep.begin(), keep.end()) ||
        std::adjacent_find(keep.begin(), keep.end()) != keep.end()) {
      fail(layers[l].name + ": kept indices are not strictly ascending");
    }
    for (int c : keep) {
      if (c < 0 || c >= channels) {
        fail(layers[l].name + ": kept index " + std::to_string(c) + " out of range");
      } else if (seen.contains({static_cast<int>(l), c})) {
        fail(layers[l].name + ": channel " + std::to_string(c) + " is both kept and removed");
      }
    }
    if (static_cast<int>(keep.size()) + removed_in_layer[l] != channels) {
      fail(layers[l].name + ": kept and removed channels do not cover the layer");
    }
    if (static_cast<int>(keep.size()) < plan.min_keep) {
      fail(layers[l].name + ": keeps " + std::to_string(keep.size()) + " channels, below min_keep " +
           std::to_string(plan.min_keep));
    }
  }
  return report;
}

Network apply_prune(const Network& net, const PrunePlan& plan) {
  const auto report = validate_plan(net, plan);
  if (!report.ok) throw ConfigError("invalid prune plan: " + report.violations.front());

  std::vector<std::vector<std::int64_t>> kept;
  for (const auto& k : plan.kept_per_layer) kept.emplace_back(k.begin(), k.end());
  const auto sources = trace_sources(net.spec());
  const auto& spec = net.spec();
  const auto& shapes = net.shapes();
  Network out = Network::build(pruned_spec(spec, plan), 0, net.dtype());

  auto stream = [&](int source, std::int64_t channels) {
    return source >= 0 ? kept[source] : all_indices(channels);
  };
  for (std::size_t i = 0; i < spec.blocks.size(); ++i) {
    const auto& b = spec.blocks[i];
    const auto& bs = sources.blocks[i];
    const auto& src = net.block(static_cast<int>(i));
    auto& dst = out.block(static_cast<int>(i));
    const auto& s = shapes[i];
    if (src.conv.weight.defined()) {
      const auto out_keep = src.conv.has_bn() ? kept[bs.out_source] : all_indices(s.out_c);
      copy_param_set(dst.conv, src.conv, out_keep, stream(bs.in_source, s.in_c));
    } else if (src.projection.weight.defined()) {
      copy_param_set(dst.projection, src.projection, kept[bs.projection_layer],
                     stream(bs.in_source, s.in_c));
    } else if (b.kind == BlockKind::linear) {
      // Rows of the weight are flattened (channel, h, w) features.
      std::vector<std::int64_t> rows;
      if (bs.in_source >= 0) {
        const auto channels = net.layers()[bs.in_source].channels;
        const auto per_channel = s.in_c / channels;
        for (auto c : kept[bs.in_source]) {
          for (std::int64_t r = 0; r < per_channel; ++r) rows.push_back(c * per_channel + r);
        }
      } else {
        rows = all_indices(s.in_c);
      }
      // weight is [D, K]: gather rows, keep every output column.
      gather_into(dst.linear.weight, src.linear.weight, rows, all_indices(s.out_c));
      gather_into(dst.linear.bias, src.linear.bias, all_indices(s.out_c), {});
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// JSON

std::string plan_to_json(const PrunePlan& plan) {
  ordered_json j;
  j["spec_name"] = plan.spec_name;
  j["tau"] = plan.tau;
  j["min_keep"] = plan.min_keep;
  j["criterion"] = to_string(plan.criterion);
  j["lambda"] = plan.lambda;
  j["removed"] = ordered_json::array();
  for (const auto& r : plan.removed) {
    ordered_json e;
    e["layer"] = r.layer;
    e["channel"] = r.channel;
    e["group"] = r.group_id;
    j["removed"].push_back(e);
  }
  j["kept_per_layer"] = plan.kept_per_layer;
  j["achieved_ratio"] = plan.achieved_ratio;
  j["flops_ratio"] = plan.flops_ratio;
  j["shortfall"] = plan.shortfall;
  return j.dump(2) + "\n";
}

PrunePlan plan_from_json(const std::string& text) {
  PrunePlan plan;
  try {
    const auto j = ordered_json::parse(text);
    plan.spec_name = j.at("spec_name").get<std::string>();
    plan.tau = j.at("tau").get<double>();
    plan.min_keep = j.at("min_keep").get<int>();
    plan.criterion = parse_criterion(j.at("criterion").get<std::string>());
    plan.lambda = j.at("lambda").get<double>();
    for (const auto& e : j.at("removed")) {
      plan.removed.push_back({e.at("layer").get<int>(), e.at("channel").get<int>(), e.at("group").get<int>()});
    }
    plan.kept_per_layer = j.at("kept_per_layer").get<std::vector<std::vector<int>>>();
    plan.achieved_ratio = j.at("achieved_ratio").get<double>();
    plan.flops_ratio = j.at("flops_ratio").get<double>();
    plan.shortfall = j.value("shortfall", false);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("prune plan: ") + e.what());
  }
  return plan;
}

void save_plan(const PrunePlan& plan, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << plan_to_json(plan);
}

PrunePlan load_plan(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return plan_from_json(ss.str());
}

}  // namespace gfbs
