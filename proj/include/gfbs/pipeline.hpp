#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "gfbs/data.hpp"
#include "gfbs/netgraph.hpp"
#include "gfbs/saliency.hpp"
#include "gfbs/surgeon.hpp"
#include "gfbs/trainer.hpp"

namespace gfbs {

// Build identifier (git describe) baked in at configure time.
std::string build_id();
// GFBS_THREADS, clamped to >= 1; 1 when unset. The kernels are
// single-threaded, the value is recorded for provenance.
int thread_budget();
std::string utc_timestamp();

LossKind default_loss(const Dataset& data);

struct RunManifest {
  std::string command;
  std::vector<std::string> argv;
  std::map<std::string, std::string> inputs;   // role -> path or descriptor
  std::map<std::string, std::string> outputs;  // role -> file name
  std::map<std::string, std::uint64_t> seeds;
  std::string out_dir;
  std::string started;
  std::string finished;
};

void write_manifest(const RunManifest& manifest, const std::filesystem::path& path);
RunManifest read_manifest(const std::filesystem::path& path);

struct SweepEntry {
  double lambda = 0.0;
  std::vector<SaliencyRecord> records;
  PrunePlan plan;
  EvalResult pruned;     // right after surgery
  EvalResult finetuned;  // after the finetune budget
};

struct SweepResult {
  EvalResult baseline;
  std::vector<SweepEntry> entries;
};

// For each lambda: score, plan at cfg.tau, prune, evaluate, finetune a copy,
// evaluate again. The trained network is not modified.
SweepResult lambda_sweep(const Network& trained, const Dataset& data, const PruneConfig& cfg,
                         const std::vector<double>& lambdas, const TrainConfig& finetune_cfg);

inline const std::vector<double> kDefaultLambdas{0.0, 0.005, 0.05, 0.5};

// Markdown tables.
std::string kept_channel_table(const Network& net, const std::vector<PrunePlan>& plans,
                               const std::vector<std::string>& labels);
std::string sweep_table(const SweepResult& sweep, LossKind loss_kind);

}  // namespace gfbs
