#pragma once

#include <iosfwd>
#include <span>
#include <vector>

#include "gfbs/data.hpp"
#include "gfbs/netgraph.hpp"

namespace gfbs {

struct OracleRecord {
  ChannelRef channel;  // first member of the group
  int group_id = -1;
  double delta_loss = 0.0;
  int rank = -1;  // ascending by delta_loss, ties by channel
};

// Train-mode loss on `batch` without recording a tape. Running statistics are
// left untouched.
double batch_loss(Network& net, const Batch& batch, LossKind loss_kind);

// For every coupling group: zero gamma of all members, evaluate the
// train-mode loss on `batch`, record |L_masked - L_base|. One record per
// group, in group order. The network is bit-identical afterwards.
std::vector<OracleRecord> oracle_delta_loss(Network& net, const Batch& batch, LossKind loss_kind);

// Same measurement for one group, removing the channel by zeroing the
// producing filters (weight and bias) instead of gamma.
double structural_delta_loss(Network& net, const Batch& batch, LossKind loss_kind,
                             const CouplingGroup& group);
double gamma_delta_loss(Network& net, const Batch& batch, LossKind loss_kind,
                        const CouplingGroup& group);

// First-order feature-map Taylor score |sum_{n,h,w} dL/dF * F| per BN output
// channel, in (layer, channel) order.
std::vector<double> feature_taylor_saliency(Network& net, const Batch& batch, LossKind loss_kind);

// 1-based ranks; tied values share the mean of their positions.
std::vector<double> average_ranks(std::span<const double> values);
// Pearson correlation of average ranks. Throws ConfigError for mismatched
// lengths or fewer than two values.
double spearman(std::span<const double> a, std::span<const double> b);

// CSV: layer,channel,group,delta_loss,rank
void write_oracle_csv(std::ostream& out, const std::vector<OracleRecord>& records);
std::vector<OracleRecord> read_oracle_csv(std::istream& in);

}  // namespace gfbs
