#include "gfbs/pipeline.hpp"

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <sstream>

#include "gfbs/errors.hpp"
#include "json.hpp"

#ifndef GFBS_GIT_DESCRIBE
#define GFBS_GIT_DESCRIBE "unknown"
#endif

namespace gfbs {

std::string build_id() { return GFBS_GIT_DESCRIBE; }

int thread_budget() {
  const char* env = std::getenv("GFBS_THREADS");
  if (env == nullptr || *env == '\0') return 1;
  char* end = nullptr;
  const long v = std::strtol(env, &end, 10);
  if (end == env || *end != '\0') throw ConfigError("GFBS_THREADS must be an integer");
  return v < 1 ? 1 : static_cast<int>(v);
}

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

LossKind default_loss(const Dataset& data) {
  return data.is_denoising() ? LossKind::mse : LossKind::cross_entropy;
}

void write_manifest(const RunManifest& m, const std::filesystem::path& path) {
  nlohmann::ordered_json j;
  j["command"] = m.command;
  j["argv"] = m.argv;
  j["inputs"] = m.inputs;
  j["outputs"] = m.outputs;
  j["seeds"] = m.seeds;
  j["git_describe"] = build_id();
  j["threads"] = thread_budget();
  j["out_dir"] = m.out_dir;
  j["started"] = m.started;
  j["finished"] = m.finished;
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

RunManifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read " + path.string());
  RunManifest m;
  try {
    const auto j = nlohmann::json::parse(in);
    m.command = j.at("command").get<std::string>();
    m.argv = j.at("argv").get<std::vector<std::string>>();
    m.inputs = j.value("inputs", m.inputs);
    m.outputs = j.value("outputs", m.outputs);
    m.seeds = j.value("seeds", m.seeds);
    m.out_dir = j.value("out_dir", "");
    m.started = j.value("started", "");
    m.finished = j.value("finished", "");
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  return m;
}

SweepResult lambda_sweep(const Network& trained, const Dataset& data, const PruneConfig& cfg,
                         const std::vector<double>& lambdas, const TrainConfig& finetune_cfg) {
  const auto loss_kind = default_loss(data);
  SweepResult result;
  Network base = trained.clone();
  result.baseline = evaluate(base, data.test, loss_kind);
  for (double lambda : lambdas) {
    SweepEntry e;
    e.lambda = lambda;
    PruneConfig c = cfg;
    c.lambda = lambda;
    e.records = compute_saliency(base, data.train, loss_kind, c);
    e.plan = plan_prune(base, e.records, c);
    Network pruned = apply_prune(base, e.plan);
    e.pruned = evaluate(pruned, data.test, loss_kind);
    TrainConfig ft = finetune_cfg;
    ft.checkpoint_path.clear();
    finetune(pruned, data, ft);
    e.finetuned = evaluate(pruned, data.test, loss_kind);
    result.entries.push_back(std::move(e));
  }
  return result;
}

namespace {

std::string fmt(const char* pattern, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), pattern, v);
  return buf;
}

}  // namespace

std::string kept_channel_table(const Network& net, const std::vector<PrunePlan>& plans,
                               const std::vector<std::string>& labels) {
  std::ostringstream out;
  out << "| layer | channels |";
  for (const auto& l : labels) out << ' ' << l << " |";
  out << "\n|---|---|";
  for (std::size_t i = 0; i < labels.size(); ++i) out << "---|";
  out << '\n';
  for (std::size_t l = 0; l < net.layers().size(); ++l) {
    const auto& info = net.layers()[l];
    out << "| " << info.name << " | " << info.channels << " |";
    for (const auto& p : plans) {
      const auto kept = l < p.kept_per_layer.size() ? p.kept_per_layer[l].size() : 0;
      out << ' ' << kept << " (" << fmt("%.0f", 100.0 * static_cast<double>(kept) / static_cast<double>(info.channels))
          << "%) |";
    }
    out << '\n';
  }
  return out.str();
}

std::string sweep_table(const SweepResult& sweep, LossKind loss_kind) {
  const bool acc = loss_kind == LossKind::cross_entropy;
  const char* metric = acc ? "%.4f" : "%.3f";
  std::ostringstream out;
  out << "| lambda | removed channels | FLOPs ratio | " << (acc ? "accuracy" : "PSNR (dB)")
      << " pruned | " << (acc ? "accuracy" : "PSNR (dB)") << " finetuned | change vs baseline |\n";
  out << "|---|---|---|---|---|---|\n";
  for (const auto& e : sweep.entries) {
    out << "| " << fmt("%g", e.lambda) << " | " << e.plan.removed.size() << " | "
        << fmt("%.4f", e.plan.flops_ratio) << " | " << fmt(metric, e.pruned.metric) << " | "
        << fmt(metric, e.finetuned.metric) << " | "
        << fmt("%+.4f", e.finetuned.metric - sweep.baseline.metric) << " |\n";
  }
  out << "\nBaseline: " << fmt(metric, sweep.baseline.metric) << '\n';
  return out.str();
}

}  // namespace gfbs
