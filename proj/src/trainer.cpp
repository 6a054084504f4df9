#include "gfbs/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <limits>
#include <memory>
#include <set>
#include <sstream>

#include "gfbs/errors.hpp"
#include "gfbs/optim.hpp"
#include "json.hpp"

namespace gfbs {

std::string to_string(OptimizerKind kind) { return kind == OptimizerKind::adam ? "adam" : "sgd"; }

OptimizerKind parse_optimizer_kind(const std::string& name) {
  if (name == "sgd") return OptimizerKind::sgd;
  if (name == "adam") return OptimizerKind::adam;
  throw ConfigError("unknown optimizer '" + name + "'");
}

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (batch_size < 2) throw ConfigError("batch_size must be >= 2 (batch norm needs a batch)");
  if (!(lr >= 0.0)) throw ConfigError("lr must be >= 0");
  if (!(lr_decay > 0.0)) throw ConfigError("lr_decay must be > 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must be in [0,1)");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
  if (eval_every < 0) throw ConfigError("eval_every must be >= 0");
  for (std::size_t i = 0; i < lr_milestones.size(); ++i) {
    if (lr_milestones[i] < 1 || lr_milestones[i] >= epochs) {
      throw ConfigError("lr milestone " + std::to_string(lr_milestones[i]) + " outside [1, epochs)");
    }
    if (i > 0 && lr_milestones[i] <= lr_milestones[i - 1]) {
      throw ConfigError("lr milestones must be strictly increasing");
    }
  }
}

double TrainConfig::lr_at(int epoch) const {
  double value = lr;
  for (int m : lr_milestones) {
    if (epoch >= m) value *= lr_decay;
  }
  return value;
}

TrainConfig TrainConfig::from_json(const std::string& text) {
  static const std::set<std::string> known = {
      "epochs",    "batch_size", "lr",   "lr_milestones", "lr_decay",   "momentum",
      "weight_decay", "optimizer", "loss", "seed",         "eval_every", "checkpoint"};
  TrainConfig cfg;
  try {
    const auto j = nlohmann::json::parse(text);
    if (!j.is_object()) throw ConfigError("train config must be a JSON object");
    for (const auto& [key, _] : j.items()) {
      if (!known.contains(key)) throw ConfigError("train config: unknown key '" + key + "'");
    }
    cfg.epochs = j.value("epochs", cfg.epochs);
    cfg.batch_size = j.value("batch_size", cfg.batch_size);
    cfg.lr = j.value("lr", cfg.lr);
    cfg.lr_milestones = j.value("lr_milestones", cfg.lr_milestones);
    cfg.lr_decay = j.value("lr_decay", cfg.lr_decay);
    cfg.momentum = j.value("momentum", cfg.momentum);
    cfg.weight_decay = j.value("weight_decay", cfg.weight_decay);
    if (j.contains("optimizer")) cfg.optimizer = parse_optimizer_kind(j.at("optimizer").get<std::string>());
    if (j.contains("loss")) cfg.loss = parse_loss_kind(j.at("loss").get<std::string>());
    cfg.seed = j.value("seed", cfg.seed);
    cfg.eval_every = j.value("eval_every", cfg.eval_every);
    if (j.contains("checkpoint")) cfg.checkpoint_path = j.at("checkpoint").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

TrainConfig TrainConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json(ss.str());
}

TrainConfig TrainConfig::classification_baseline() { return TrainConfig{}; }

TrainConfig TrainConfig::classification_finetune() {
  TrainConfig cfg;
  cfg.epochs = 30;
  cfg.lr = 0.01;
  cfg.lr_milestones = {20, 25};
  return cfg;
}

TrainConfig TrainConfig::denoising_baseline() {
  TrainConfig cfg;
  cfg.epochs = 50;
  cfg.lr = 1e-3;
  cfg.lr_milestones = {40};
  cfg.lr_decay = 0.1;
  cfg.momentum = 0.0;
  cfg.weight_decay = 0.0;
  cfg.optimizer = OptimizerKind::adam;
  cfg.loss = LossKind::mse;
  return cfg;
}

TrainConfig TrainConfig::denoising_finetune() {
  TrainConfig cfg = denoising_baseline();
  cfg.lr = 1e-4;
  return cfg;
}

const MetricsRow* History::last(const std::string& split) const {
  for (auto it = rows.rbegin(); it != rows.rend(); ++it) {
    if (it->split == split) return &*it;
  }
  return nullptr;
}

double psnr(double mse) {
  if (!(mse > 0.0)) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

namespace {

struct Tally {
  double loss_sum = 0.0;
  double metric_sum = 0.0;
  std::int64_t count = 0;

  EvalResult mean() const {
    if (count == 0) return {};
    return {loss_sum / static_cast<double>(count), metric_sum / static_cast<double>(count)};
  }
};

// Per-sample loss and metric contributions of one output batch.
void tally_outputs(const Tensor& out, std::span<const int> labels, const Tensor& targets,
                   std::int64_t offset, LossKind loss_kind, Tally& tally) {
  const auto values = out.to_vector();
  const auto n = out.dim(0);
  const auto per = out.numel() / n;
  if (loss_kind == LossKind::cross_entropy) {
    for (std::int64_t s = 0; s < n; ++s) {
      const double* row = values.data() + s * per;
      const auto best = std::max_element(row, row + per) - row;
      double lse = 0.0;
      for (std::int64_t k = 0; k < per; ++k) lse += std::exp(row[k] - row[best]);
      const int label = labels[offset + s];
      tally.loss_sum += std::log(lse) + row[best] - row[label];
      tally.metric_sum += best == label ? 1.0 : 0.0;
    }
  } else {
    const auto target = targets.to_vector();
    for (std::int64_t s = 0; s < n; ++s) {
      double sq = 0.0;
      for (std::int64_t i = 0; i < per; ++i) {
        const double d = values[s * per + i] - target[(offset + s) * per + i];
        sq += d * d;
      }
      const double mse = sq / static_cast<double>(per);
      tally.loss_sum += mse;
      tally.metric_sum += psnr(mse);
    }
  }
  tally.count += n;
}

class Optimizer {
 public:
  Optimizer(const TrainConfig& cfg, std::vector<Tensor> params) {
    if (cfg.optimizer == OptimizerKind::adam) {
      adam_ = std::make_unique<Adam>(std::move(params), cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay);
    } else {
      sgd_ = std::make_unique<Sgd>(std::move(params), cfg.lr, cfg.momentum, cfg.weight_decay);
    }
  }
  void set_lr(double lr) { adam_ ? adam_->set_lr(lr) : sgd_->set_lr(lr); }
  void step() { adam_ ? adam_->step() : sgd_->step(); }

 private:
  std::unique_ptr<Sgd> sgd_;
  std::unique_ptr<Adam> adam_;
};

std::uint64_t epoch_seed(std::uint64_t seed, int epoch) {
  return seed * 0x9E3779B97F4A7C15ull + static_cast<std::uint64_t>(epoch) + 1;
}

}  // namespace

EvalResult evaluate(Network& net, const Split& split, LossKind loss_kind, std::int64_t chunk) {
  if (split.size() == 0) return {};
  if (chunk < 1) throw ConfigError("evaluation chunk must be >= 1");
  Tally tally;
  std::vector<std::int64_t> idx;
  for (std::int64_t start = 0; start < split.size(); start += chunk) {
    const auto end = std::min(split.size(), start + chunk);
    idx.resize(static_cast<std::size_t>(end - start));
    for (std::int64_t i = start; i < end; ++i) idx[i - start] = i;
    const Batch b = get_batch(split, idx, net.dtype());
    const Tensor out = net.forward(b.inputs, BnMode::eval);
    tally_outputs(out, b.labels, b.targets, 0, loss_kind, tally);
  }
  return tally.mean();
}

History train(Network& net, const Dataset& data, const TrainConfig& cfg) {
  cfg.validate();
  if (data.train.size() < 2) throw ConfigError("training split needs at least two samples");
  if (cfg.loss == LossKind::mse && !data.train.targets.defined()) {
    throw ConfigError("mse loss needs a dataset with targets");
  }
  if (cfg.loss == LossKind::cross_entropy && data.train.labels.empty()) {
    throw ConfigError("cross-entropy loss needs a labelled dataset");
  }
  net.drop_grads();
  Optimizer opt(cfg, net.parameters());
  History history;
  const auto t0 = std::chrono::steady_clock::now();
  auto elapsed = [&] {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  };
  const auto n = data.train.size();
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    opt.set_lr(cfg.lr_at(epoch));
    const auto order = shuffled_indices(n, epoch_seed(cfg.seed, epoch));
    Tally tally;
    for (std::int64_t start = 0; start < n; start += cfg.batch_size) {
      const auto len = std::min<std::int64_t>(cfg.batch_size, n - start);
      if (len < 2) break;  // a single sample has no batch statistics
      const Batch b = get_batch(data.train, std::span(order).subspan(start, len), net.dtype());
      Tape tape;
      Tensor out = net.forward(b.inputs, BnMode::train, &tape);
      Tensor l = loss(out, b.labels, b.targets, cfg.loss, &tape);
      if (!std::isfinite(l.item())) {
        throw NumericError("loss diverged at epoch " + std::to_string(epoch));
      }
      tape.backward(l);
      opt.step();
      tally_outputs(out, b.labels, b.targets, 0, cfg.loss, tally);
    }
    const auto tr = tally.mean();
    history.rows.push_back({epoch, "train", tr.loss, tr.metric, elapsed()});
    if (cfg.verbose) {
      std::fprintf(stderr, "epoch %3d  lr %.3g  train loss %.5f  metric %.4f\n", epoch, cfg.lr_at(epoch),
                   tr.loss, tr.metric);
    }

    const bool last_epoch = epoch + 1 == cfg.epochs;
    const bool due = cfg.eval_every > 0 && ((epoch + 1) % cfg.eval_every == 0 || last_epoch);
    double tracked = tr.metric;
    if (due && data.test.size() > 0) {
      const auto te = evaluate(net, data.test, cfg.loss);
      history.rows.push_back({epoch, "test", te.loss, te.metric, elapsed()});
      if (cfg.verbose) std::fprintf(stderr, "           test loss %.5f  metric %.4f\n", te.loss, te.metric);
      tracked = te.metric;
    } else if (data.test.size() > 0) {
      continue;
    }
    if (history.best_epoch < 0 || tracked > history.best_metric) {
      history.best_epoch = epoch;
      history.best_metric = tracked;
      if (!cfg.checkpoint_path.empty()) save_checkpoint(net, cfg.checkpoint_path);
    }
  }
  return history;
}

History finetune(Network& net, const Dataset& data, const TrainConfig& cfg) { return train(net, data, cfg); }

void write_metrics_csv(std::ostream& out, const History& history) {
  out << "epoch,split,loss,metric\n";
  char buf[128];
  for (const auto& r : history.rows) {
    std::snprintf(buf, sizeof(buf), "%d,%s,%.9g,%.9g\n", r.epoch, r.split.c_str(), r.loss, r.metric);
    out << buf;
  }
}

}  // namespace gfbs
