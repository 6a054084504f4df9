#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "gfbs/netgraph.hpp"
#include "gfbs/saliency.hpp"

namespace gfbs {

struct RemovedChannel {
  int layer = 0;
  int channel = 0;
  int group_id = -1;

  bool operator==(const RemovedChannel&) const = default;
};

struct PrunePlan {
  std::string spec_name;
  double tau = 0.0;
  int min_keep = 4;
  Criterion criterion = Criterion::gfbs;
  double lambda = 0.0;
  std::vector<RemovedChannel> removed;  // sorted by (layer, channel)
  // Kept channel indices per prunable layer, ascending.
  std::vector<std::vector<int>> kept_per_layer;
  double achieved_ratio = 0.0;  // removed / total prunable channels
  double flops_ratio = 1.0;     // pruned FLOPs / baseline FLOPs
  // The channel budget could not be met because min_keep blocked a group.
  bool shortfall = false;

  std::vector<int> kept_counts() const;
};

// Greedy selection: coupling groups (score = mean of member scores) are taken
// in ascending order. A group is skipped when it would push the removed
// channel count above tau * total or leave any member layer with fewer than
// min_keep channels. Non-prunable groups are never taken.
PrunePlan plan_prune(const Network& net, const std::vector<SaliencyRecord>& records,
                     const PruneConfig& cfg);

// Bisects tau until the planned network's FLOPs drop by at least
// `target_reduction` (fraction, e.g. 0.5) with the smallest channel budget.
PrunePlan plan_for_flops_reduction(const Network& net, const std::vector<SaliencyRecord>& records,
                                   PruneConfig cfg, double target_reduction);

// Description of the network after removing the planned channels.
NetworkSpec pruned_spec(const NetworkSpec& spec, const std::vector<int>& kept_counts);
inline NetworkSpec pruned_spec(const NetworkSpec& spec, const PrunePlan& plan) {
  return pruned_spec(spec, plan.kept_counts());
}

// Physically removes the planned channels: producing filters, BN entries and
// the matching input slices of every consumer (convs, projections, linear).
Network apply_prune(const Network& net, const PrunePlan& plan);

struct ValidationReport {
  bool ok = true;
  std::vector<std::string> violations;
};

// Checks a plan against a network: known channels, no duplicates, whole
// coupling groups, min_keep, kept lists partitioning each layer with the
// removed channels.
ValidationReport validate_plan(const Network& net, const PrunePlan& plan);

std::string plan_to_json(const PrunePlan& plan);
PrunePlan plan_from_json(const std::string& text);
void save_plan(const PrunePlan& plan, const std::filesystem::path& path);
PrunePlan load_plan(const std::filesystem::path& path);

}  // namespace gfbs
