#include "gfbs/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <ostream>
#include <sstream>

#include "gfbs/errors.hpp"

namespace gfbs {

namespace {

Tensor as_net_dtype(const Tensor& t, DType dtype) {
  if (!t.defined() || t.dtype() == dtype) return t;
  return t.to(dtype);
}

// Temporarily overwrites individual tensor elements and puts them back on
// destruction.
class ElementPatch {
 public:
  void set(Tensor t, std::int64_t flat, double value) {
    saved_.push_back({t, flat, t.at(flat)});
    t.set(flat, value);
  }
  ~ElementPatch() {
    for (auto it = saved_.rbegin(); it != saved_.rend(); ++it) it->t.set(it->flat, it->value);
  }

 private:
  struct Saved {
    Tensor t;
    std::int64_t flat;
    double value;
  };
  std::vector<Saved> saved_;
};

std::vector<OracleRecord> ranked(std::vector<OracleRecord> records) {
  std::vector<std::size_t> order(records.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (records[a].delta_loss != records[b].delta_loss) {
      return records[a].delta_loss < records[b].delta_loss;
    }
    return records[a].channel < records[b].channel;
  });
  for (std::size_t k = 0; k < order.size(); ++k) records[order[k]].rank = static_cast<int>(k);
  return records;
}

}  // namespace

double batch_loss(Network& net, const Batch& batch, LossKind loss_kind) {
  const auto state = net.snapshot();
  Tensor out = net.forward(as_net_dtype(batch.inputs, net.dtype()), BnMode::train, nullptr);
  const double value =
      loss(out, batch.labels, as_net_dtype(batch.targets, net.dtype()), loss_kind, nullptr).item();
  net.restore(state);
  return value;
}

double gamma_delta_loss(Network& net, const Batch& batch, LossKind loss_kind,
                        const CouplingGroup& group) {
  const double base = batch_loss(net, batch, loss_kind);
  ElementPatch patch;
  for (const auto& m : group.members) patch.set(net.layer_params(m.layer).gamma, m.channel, 0.0);
  return std::abs(batch_loss(net, batch, loss_kind) - base);
}

double structural_delta_loss(Network& net, const Batch& batch, LossKind loss_kind,
                             const CouplingGroup& group) {
  const double base = batch_loss(net, batch, loss_kind);
  ElementPatch patch;
  for (const auto& m : group.members) {
    auto& p = net.layer_params(m.layer);
    const auto per = p.weight.numel() / p.weight.dim(0);
    for (std::int64_t i = 0; i < per; ++i) patch.set(p.weight, m.channel * per + i, 0.0);
    patch.set(p.bias, m.channel, 0.0);
  }
  return std::abs(batch_loss(net, batch, loss_kind) - base);
}

std::vector<OracleRecord> oracle_delta_loss(Network& net, const Batch& batch, LossKind loss_kind) {
  const auto groups = build_coupling_groups(net.spec());
  const double base = batch_loss(net, batch, loss_kind);
  std::vector<OracleRecord> records;
  records.reserve(groups.size());
  for (const auto& g : groups) {
    double masked = 0.0;
    {
      ElementPatch patch;
      for (const auto& m : g.members) patch.set(net.layer_params(m.layer).gamma, m.channel, 0.0);
      masked = batch_loss(net, batch, loss_kind);
    }
    OracleRecord r;
    r.channel = g.members.front();
    r.group_id = g.group_id;
    r.delta_loss = std::abs(masked - base);
    records.push_back(r);
  }
  return ranked(std::move(records));
}

std::vector<double> feature_taylor_saliency(Network& net, const Batch& batch, LossKind loss_kind) {
  const auto state = net.snapshot();
  net.drop_grads();
  Tape tape;
  ForwardTrace trace;
  Tensor out = net.forward(as_net_dtype(batch.inputs, net.dtype()), BnMode::train, &tape, &trace);
  Tensor l = loss(out, batch.labels, as_net_dtype(batch.targets, net.dtype()), loss_kind, &tape);
  tape.backward(l);

  std::vector<double> scores;
  for (std::size_t layer = 0; layer < net.layers().size(); ++layer) {
    const Tensor& f = trace.post_bn[layer];
    const auto values = f.to_vector();
    const auto grads = f.has_grad() ? f.grad_vector() : std::vector<double>(values.size(), 0.0);
    const auto n = f.dim(0), c = f.dim(1);
    const auto hw = f.numel() / (n * c);
    for (std::int64_t ch = 0; ch < c; ++ch) {
      double acc = 0.0;
      for (std::int64_t s = 0; s < n; ++s) {
        const auto base = (s * c + ch) * hw;
        for (std::int64_t i = 0; i < hw; ++i) acc += grads[base + i] * values[base + i];
      }
      scores.push_back(std::abs(acc));
    }
  }
  net.restore(state);
  net.drop_grads();
  return scores;
}

std::vector<double> average_ranks(std::span<const double> values) {
  const std::size_t n = values.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(n);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && values[order[j + 1]] == values[order[i]]) ++j;
    const double mean_rank = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = mean_rank;
    i = j + 1;
  }
  return ranks;
}

double spearman(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ConfigError("spearman: length mismatch");
  if (a.size() < 2) throw ConfigError("spearman: need at least two values");
  const auto ra = average_ranks(a);
  const auto rb = average_ranks(b);
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

void write_oracle_csv(std::ostream& out, const std::vector<OracleRecord>& records) {
  out << "layer,channel,group,delta_loss,rank\n";
  char buf[64];
  for (const auto& r : records) {
    std::snprintf(buf, sizeof(buf), "%.9g", r.delta_loss);
    out << r.channel.layer << ',' << r.channel.channel << ',' << r.group_id << ',' << buf << ','
        << r.rank << '\n';
  }
}

std::vector<OracleRecord> read_oracle_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != "layer,channel,group,delta_loss,rank") {
    throw FormatError("oracle CSV has an unexpected header");
  }
  std::vector<OracleRecord> records;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(row, cell, ',')) cells.push_back(cell);
    if (cells.size() != 5) throw FormatError("oracle CSV line " + std::to_string(line_no) + ": expected 5 fields");
    try {
      OracleRecord r;
      r.channel = {std::stoi(cells[0]), std::stoi(cells[1])};
      r.group_id = std::stoi(cells[2]);
      r.delta_loss = std::stod(cells[3]);
      r.rank = std::stoi(cells[4]);
      records.push_back(r);
    } catch (const std::exception&) {
      throw FormatError("oracle CSV line " + std::to_string(line_no) + ": malformed number");
    }
  }
  return records;
}

}  // namespace gfbs
