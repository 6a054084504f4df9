#include "gfbs/saliency.hpp"

#include "gfbs/errors.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <numeric>
#include <sstream>

namespace gfbs {

std::string to_string(Criterion c) {
  switch (c) {
    case Criterion::gfbs:
      return "gfbs";
    case Criterion::gamma_only:
      return "gamma_only";
    case Criterion::beta_only:
      return "beta_only";
    case Criterion::l1_filter:
      return "l1_filter";
  }
  return "?";
}

Criterion parse_criterion(const std::string& name) {
  if (name == "gfbs") return Criterion::gfbs;
  if (name == "gamma_only" || name == "gfbs-gamma") return Criterion::gamma_only;
  if (name == "beta_only" || name == "gfbs-beta") return Criterion::beta_only;
  if (name == "l1_filter" || name == "l1") return Criterion::l1_filter;
  throw ConfigError("unknown criterion '" + name + "'");
}

void PruneConfig::validate() const {
  if (!(lambda >= 0.0)) throw ConfigError("lambda must be >= 0");
  if (!(tau > 0.0 && tau < 1.0)) throw ConfigError("tau must be in (0,1)");
  if (min_keep < 1) throw ConfigError("min_keep must be >= 1");
  if (batch_size < 1) throw ConfigError("batch size must be >= 1");
  if (num_batches < 1) throw ConfigError("num_batches must be >= 1");
}

namespace {

std::vector<SaliencyRecord> empty_records(const Network& net) {
  const auto groups = build_coupling_groups(net.spec());
  std::vector<SaliencyRecord> records;
  std::vector<std::vector<int>> group_of(net.layers().size());
  for (std::size_t l = 0; l < net.layers().size(); ++l) {
    group_of[l].assign(static_cast<std::size_t>(net.layers()[l].channels), -1);
  }
  for (const auto& g : groups) {
    for (const auto& m : g.members) group_of[m.layer][m.channel] = g.group_id;
  }
  for (std::size_t l = 0; l < net.layers().size(); ++l) {
    const auto& info = net.layers()[l];
    for (int ch = 0; ch < info.channels; ++ch) {
      SaliencyRecord r;
      r.channel = {static_cast<int>(l), ch};
      r.group_id = group_of[l][ch];
      r.relu_follows = info.relu_follows;
      records.push_back(r);
    }
  }
  return records;
}

void fill_static_values(const Network& net, std::vector<SaliencyRecord>& records) {
  int cached_layer = -1;
  std::vector<double> w;
  std::int64_t per = 0;
  for (auto& r : records) {
    const auto& p = net.layer_params(r.channel.layer);
    if (r.channel.layer != cached_layer) {
      w = p.weight.to_vector();
      per = p.weight.numel() / p.weight.dim(0);
      cached_layer = r.channel.layer;
    }
    r.gamma = p.gamma.at(r.channel.channel);
    r.beta = p.beta.at(r.channel.channel);
    double l1 = 0.0;
    for (std::int64_t i = 0; i < per; ++i) l1 += std::abs(w[r.channel.channel * per + i]);
    r.filter_l1 = l1;
  }
}

void warn_if_untrained(const std::vector<SaliencyRecord>& records) {
  const bool untouched = std::all_of(records.begin(), records.end(), [](const SaliencyRecord& r) {
    return r.gamma == 1.0 && r.beta == 0.0;
  });
  if (untouched && !records.empty()) {
    std::cerr << "warning: every BN layer still has gamma=1, beta=0; the network looks untrained\n";
  }
}

}  // namespace

std::vector<SaliencyRecord> capture(Network& net, const Batch& batch, LossKind loss_kind,
                                    const PruneConfig& cfg) {
  return capture_averaged(net, std::span<const Batch>(&batch, 1), loss_kind, cfg);
}

std::vector<SaliencyRecord> capture_averaged(Network& net, std::span<const Batch> batches,
                                             LossKind loss_kind, const PruneConfig& cfg) {
  (void)cfg;
  if (batches.empty()) throw ConfigError("capture needs at least one minibatch");
  auto records = empty_records(net);
  fill_static_values(net, records);
  warn_if_untrained(records);

  const auto state = net.snapshot();
  std::vector<double> grad_sum(records.size(), 0.0);
  for (const auto& batch : batches) {
    net.drop_grads();
    Tape tape;
    Tensor inputs = batch.inputs.dtype() == net.dtype() ? batch.inputs : batch.inputs.to(net.dtype());
    Tensor targets;
    if (batch.targets.defined()) {
      targets = batch.targets.dtype() == net.dtype() ? batch.targets : batch.targets.to(net.dtype());
    }
    Tensor out = net.forward(inputs, BnMode::train, &tape);
    Tensor l = loss(out, batch.labels, targets, loss_kind, &tape);
    tape.backward(l);
    for (std::size_t i = 0; i < records.size(); ++i) {
      const auto& p = net.layer_params(records[i].channel.layer);
      grad_sum[i] += p.gamma.grad_at(records[i].channel.channel);
    }
  }
  // The probe pass must leave no trace: restore running statistics.
  net.restore(state);
  net.drop_grads();
  for (std::size_t i = 0; i < records.size(); ++i) {
    records[i].grad_gamma = grad_sum[i] / static_cast<double>(batches.size());
  }
  return records;
}

void normalize_layerwise(std::vector<SaliencyRecord>& records) {
  int max_layer = -1;
  for (const auto& r : records) max_layer = std::max(max_layer, r.channel.layer);
  struct Norms {
    double gamma = 0, grad = 0, beta = 0, l1 = 0;
  };
  std::vector<Norms> norms(static_cast<std::size_t>(max_layer + 1));
  for (const auto& r : records) {
    auto& n = norms[r.channel.layer];
    n.gamma += r.gamma * r.gamma;
    n.grad += r.grad_gamma * r.grad_gamma;
    n.beta += r.beta * r.beta;
    n.l1 += r.filter_l1 * r.filter_l1;
  }
  auto safe_div = [](double v, double sq) { return sq > 0.0 ? v / std::sqrt(sq) : 0.0; };
  for (auto& r : records) {
    const auto& n = norms[r.channel.layer];
    r.gamma_n = safe_div(r.gamma, n.gamma);
    r.grad_gamma_n = safe_div(r.grad_gamma, n.grad);
    r.beta_n = safe_div(r.beta, n.beta);
    r.filter_l1_n = safe_div(r.filter_l1, n.l1);
  }
}

void score(std::vector<SaliencyRecord>& records, const PruneConfig& cfg) {
  for (auto& r : records) {
    const double taylor = std::abs(r.grad_gamma_n * r.gamma_n);
    switch (cfg.criterion) {
      case Criterion::gfbs:
        r.score = taylor + (r.relu_follows ? cfg.lambda * r.beta_n : 0.0);
        break;
      case Criterion::gamma_only:
        r.score = taylor;
        break;
      case Criterion::beta_only:
        r.score = r.beta_n;
        break;
      case Criterion::l1_filter:
        r.score = r.filter_l1_n;
        break;
    }
  }
  std::vector<std::size_t> order(records.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (records[a].score != records[b].score) return records[a].score < records[b].score;
    return records[a].channel < records[b].channel;
  });
  for (std::size_t k = 0; k < order.size(); ++k) records[order[k]].rank = static_cast<int>(k);
}

std::vector<SaliencyRecord> compute_saliency(Network& net, const Split& data, LossKind loss_kind,
                                             const PruneConfig& cfg) {
  cfg.validate();
  std::vector<Batch> batches;
  for (int b = 0; b < cfg.num_batches; ++b) {
    batches.push_back(sample_batch(data, cfg.batch_size, cfg.seed + static_cast<std::uint64_t>(b), net.dtype()));
  }
  auto records = capture_averaged(net, batches, loss_kind, cfg);
  normalize_layerwise(records);
  score(records, cfg);
  return records;
}

// ---------------------------------------------------------------------------
// CSV

namespace {

std::string fmt9(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

}  // namespace

void write_saliency_csv(std::ostream& out, const std::vector<SaliencyRecord>& records) {
  out << "layer,channel,gamma,grad_gamma,beta,gamma_n,grad_gamma_n,beta_n,score,group,rank\n";
  for (const auto& r : records) {
    out << r.channel.layer << ',' << r.channel.channel << ',' << fmt9(r.gamma) << ','
        << fmt9(r.grad_gamma) << ',' << fmt9(r.beta) << ',' << fmt9(r.gamma_n) << ','
        << fmt9(r.grad_gamma_n) << ',' << fmt9(r.beta_n) << ',' << fmt9(r.score) << ','
        << r.group_id << ',' << r.rank << '\n';
  }
}

std::vector<SaliencyRecord> read_saliency_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw FormatError("saliency CSV is empty");
  if (line != "layer,channel,gamma,grad_gamma,beta,gamma_n,grad_gamma_n,beta_n,score,group,rank") {
    throw FormatError("saliency CSV has an unexpected header");
  }
  std::vector<SaliencyRecord> records;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(row, cell, ',')) cells.push_back(cell);
    if (cells.size() != 11) throw FormatError("saliency CSV line " + std::to_string(line_no) + ": expected 11 fields");
    try {
      SaliencyRecord r;
      r.channel = {std::stoi(cells[0]), std::stoi(cells[1])};
      r.gamma = std::stod(cells[2]);
      r.grad_gamma = std::stod(cells[3]);
      r.beta = std::stod(cells[4]);
      r.gamma_n = std::stod(cells[5]);
      r.grad_gamma_n = std::stod(cells[6]);
      r.beta_n = std::stod(cells[7]);
      r.score = std::stod(cells[8]);
      r.group_id = std::stoi(cells[9]);
      r.rank = std::stoi(cells[10]);
      records.push_back(r);
    } catch (const std::exception&) {
      throw FormatError("saliency CSV line " + std::to_string(line_no) + ": malformed number");
    }
  }
  return records;
}

}  // namespace gfbs
