#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "gfbs/data.hpp"
#include "gfbs/netgraph.hpp"

namespace gfbs {

enum class OptimizerKind { sgd, adam };

std::string to_string(OptimizerKind kind);
OptimizerKind parse_optimizer_kind(const std::string& name);

struct TrainConfig {
  int epochs = 60;
  int batch_size = 64;
  double lr = 0.05;
  std::vector<int> lr_milestones{40, 50};  // lr *= lr_decay at the start of each
  double lr_decay = 0.2;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  OptimizerKind optimizer = OptimizerKind::sgd;
  LossKind loss = LossKind::cross_entropy;
  std::uint64_t seed = 0;
  int eval_every = 1;  // epochs between test-split evaluations; 0 disables
  // Written whenever the test metric improves. Empty: no checkpoints.
  std::filesystem::path checkpoint_path;
  bool verbose = false;

  // Throws ConfigError: milestones must be strictly increasing and < epochs.
  void validate() const;
  double lr_at(int epoch) const;

  // Unknown keys are rejected. Missing keys keep their defaults.
  static TrainConfig from_json(const std::string& text);
  static TrainConfig load(const std::filesystem::path& path);

  // Paper-shaped desk-scale defaults.
  static TrainConfig classification_baseline();
  static TrainConfig classification_finetune();
  static TrainConfig denoising_baseline();
  static TrainConfig denoising_finetune();
};

struct EvalResult {
  double loss = 0.0;
  // Top-1 accuracy in [0,1] for classification, mean PSNR (dB) for denoising.
  double metric = 0.0;
};

struct MetricsRow {
  int epoch = 0;
  std::string split;  // "train" or "test"
  double loss = 0.0;
  double metric = 0.0;
  double seconds = 0.0;  // wall clock since the start of training
};

struct History {
  std::vector<MetricsRow> rows;
  int best_epoch = -1;
  double best_metric = 0.0;

  const MetricsRow* last(const std::string& split) const;
};

// 10 * log10(1 / mse) for unit-scale images, capped at 100 dB.
double psnr(double mse);
inline constexpr double kPsnrCap = 100.0;

// Eval-mode metrics over the whole split. Losses are accumulated per sample
// in double, so the result does not depend on `chunk`.
EvalResult evaluate(Network& net, const Split& split, LossKind loss_kind, std::int64_t chunk = 256);

History train(Network& net, const Dataset& data, const TrainConfig& cfg);
// Same loop; kept separate for call sites that start from a pruned net.
History finetune(Network& net, const Dataset& data, const TrainConfig& cfg);

// CSV: epoch,split,loss,metric
void write_metrics_csv(std::ostream& out, const History& history);

}  // namespace gfbs
