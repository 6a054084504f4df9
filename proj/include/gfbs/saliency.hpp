#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "gfbs/data.hpp"
#include "gfbs/netgraph.hpp"

namespace gfbs {

enum class Criterion { gfbs, gamma_only, beta_only, l1_filter };

std::string to_string(Criterion c);
Criterion parse_criterion(const std::string& name);

struct PruneConfig {
  double lambda = 0.05;
  double tau = 0.5;
  Criterion criterion = Criterion::gfbs;
  int batch_size = 64;
  int min_keep = 4;
  std::uint64_t seed = 0;
  // Records averaged over this many minibatches; one reproduces the
  // single-pass procedure.
  int num_batches = 1;

  void validate() const;
};

struct SaliencyRecord {
  ChannelRef channel;
  double gamma = 0.0;
  double grad_gamma = 0.0;  // dL/dgamma accumulated over the minibatch
  double beta = 0.0;
  double filter_l1 = 0.0;   // sum |W_j|, for the l1 baseline
  double gamma_n = 0.0;
  double grad_gamma_n = 0.0;
  double beta_n = 0.0;
  double filter_l1_n = 0.0;
  double score = 0.0;
  int group_id = -1;
  int rank = -1;
  bool relu_follows = true;
};

// One train-mode forward/backward on `batch`; records gamma, dL/dgamma and
// beta for every BN channel. Parameters and running statistics are restored
// to their pre-call values before returning.
std::vector<SaliencyRecord> capture(Network& net, const Batch& batch, LossKind loss_kind,
                                    const PruneConfig& cfg);

// Same as capture, with raw values averaged over several minibatches.
std::vector<SaliencyRecord> capture_averaged(Network& net, std::span<const Batch> batches,
                                             LossKind loss_kind, const PruneConfig& cfg);

// Divides gamma, grad_gamma, beta (and filter_l1) by their per-layer l2 norm.
// All-zero vectors stay zero.
void normalize_layerwise(std::vector<SaliencyRecord>& records);

// gfbs:       S = |grad_gamma_n * gamma_n| + lambda * beta_n  (beta term only
//             for Conv-BN-ReLU layers)
// gamma_only: S = |grad_gamma_n * gamma_n|
// beta_only:  S = beta_n
// l1_filter:  S = filter_l1_n
// Then assigns a global ascending rank, ties broken by (layer, channel).
void score(std::vector<SaliencyRecord>& records, const PruneConfig& cfg);

// Sample a minibatch (or several), capture, normalize and score.
std::vector<SaliencyRecord> compute_saliency(Network& net, const Split& data, LossKind loss_kind,
                                             const PruneConfig& cfg);

// CSV: layer,channel,gamma,grad_gamma,beta,gamma_n,grad_gamma_n,beta_n,score,group,rank
void write_saliency_csv(std::ostream& out, const std::vector<SaliencyRecord>& records);
std::vector<SaliencyRecord> read_saliency_csv(std::istream& in);

}  // namespace gfbs
