#include "doctest.h"
#include "gfbs/errors.hpp"
#include "gfbs/surgeon.hpp"
#include "support/gradcheck.hpp"
#include "support/masking.hpp"

#include <algorithm>
#include <random>
#include <set>

using namespace gfbs;
using gfbs::testing::masked_copy;
using gfbs::testing::max_abs_diff;

namespace {

const char* kTwoLayer = "input 1 6 6\nconv_bn_relu 8 3 1 1\nconv_bn_relu 8 3 1 1\npool 0\nflatten\nlinear 3\n";
const char* kChain =
    "input 2 8 8\nconv_bn_relu 8 3 1 1\npool 0 2 2\nconv_bn 12 3 1 1\nconv_bn_relu 10 3 2 1\nflatten\nlinear 5\n";
const char* kResidual =
    "input 1 8 8\nconv_bn_relu 6 3 1 1\nresidual_begin\nconv_bn_relu 6 3 1 1\nconv_bn 6 3 1 1\n"
    "residual_add\nrelu\nresidual_begin 8 1 2 0\nconv_bn_relu 8 3 2 1\nconv_bn 8 3 1 1\nresidual_add\nrelu\n"
    "pool 0\nflatten\nlinear 3\n";

std::vector<SaliencyRecord> records_with_scores(const Network& net, const std::vector<double>& scores) {
  std::vector<SaliencyRecord> out;
  std::size_t k = 0;
  for (std::size_t l = 0; l < net.layers().size(); ++l) {
    for (int c = 0; c < net.layers()[l].channels; ++c) {
      SaliencyRecord r;
      r.channel = {static_cast<int>(l), c};
      r.score = scores.at(k++);
      out.push_back(r);
    }
  }
  return out;
}

std::vector<SaliencyRecord> random_records(const Network& net, std::mt19937_64& rng) {
  std::size_t n = 0;
  for (const auto& l : net.layers()) n += static_cast<std::size_t>(l.channels);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> s(n);
  for (auto& x : s) x = u(rng);
  return records_with_scores(net, s);
}

// Non-trivial running statistics and affine parameters.
Network randomized(const char* text, std::uint64_t seed) {
  auto net = Network::build(NetworkSpec::parse(text), seed, DType::f64);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-0.5, 0.5), pos(0.5, 2.0);
  for (std::size_t l = 0; l < net.layers().size(); ++l) {
    auto& p = net.layer_params(static_cast<int>(l));
    for (std::int64_t c = 0; c < p.gamma.numel(); ++c) {
      p.gamma.set(c, pos(rng));
      p.beta.set(c, u(rng));
      p.bias.set(c, u(rng));
      p.running_mean.set(c, u(rng));
      p.running_var.set(c, pos(rng));
    }
  }
  return net;
}

PruneConfig at_tau(double tau, int min_keep = 4) {
  PruneConfig cfg;
  cfg.tau = tau;
  cfg.min_keep = min_keep;
  return cfg;
}

std::set<std::pair<int, int>> removed_set(const PrunePlan& p) {
  std::set<std::pair<int, int>> s;
  for (const auto& r : p.removed) s.insert({r.layer, r.channel});
  return s;
}

}  // namespace

TEST_CASE("plan: tau 0.5 on 8+8 channels removes the eight lowest scores") {
  const auto net = Network::build(NetworkSpec::parse(kTwoLayer), 1, DType::f64);
  // Lowest eight: channels 0-3 of both layers.
  std::vector<double> s{1, 2, 3, 4, 20, 21, 22, 23, 5, 6, 7, 8, 30, 31, 32, 33};
  const auto plan = plan_prune(net, records_with_scores(net, s), at_tau(0.5));
  CHECK(plan.removed.size() == 8);
  CHECK(plan.achieved_ratio == 0.5);
  CHECK_FALSE(plan.shortfall);
  CHECK(plan.kept_per_layer[0] == std::vector<int>{4, 5, 6, 7});
  CHECK(plan.kept_per_layer[1] == std::vector<int>{4, 5, 6, 7});
}

TEST_CASE("plan: min_keep redirects removal to other layers") {
  const auto net = Network::build(NetworkSpec::parse(kTwoLayer), 1, DType::f64);
  // Layer 0 holds the eight lowest scores, but only four can go.
  std::vector<double> s{1, 2, 3, 4, 5, 6, 7, 8, 10, 11, 12, 13, 14, 15, 16, 17};
  const auto plan = plan_prune(net, records_with_scores(net, s), at_tau(0.5));
  CHECK(plan.kept_counts() == std::vector<int>{4, 4});
  CHECK(plan.kept_per_layer[0] == std::vector<int>{4, 5, 6, 7});
  CHECK(plan.kept_per_layer[1] == std::vector<int>{4, 5, 6, 7});
}

TEST_CASE("plan: min_keep equal to the width leaves a layer untouched") {
  const auto net = Network::build(NetworkSpec::parse(kTwoLayer), 1, DType::f64);
  std::mt19937_64 rng(2);
  const auto plan = plan_prune(net, random_records(net, rng), at_tau(0.4, 8));
  CHECK(plan.removed.empty());
  CHECK(plan.shortfall);
}

TEST_CASE("plan: shortfall when min_keep caps the budget") {
  const auto net = Network::build(NetworkSpec::parse(kTwoLayer), 1, DType::f64);
  std::mt19937_64 rng(3);
  const auto plan = plan_prune(net, random_records(net, rng), at_tau(0.9));
  CHECK(plan.removed.size() == 8);
  CHECK(plan.shortfall);
  CHECK(plan.achieved_ratio < 0.9);
}

TEST_CASE("plan: greedy maximality and monotonicity on a chain") {
  const auto net = Network::build(NetworkSpec::parse(kChain), 1, DType::f64);
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 10; ++trial) {
    const auto records = random_records(net, rng);
    std::set<std::pair<int, int>> previous;
    for (double tau : {0.1, 0.2, 0.3, 0.45, 0.6, 0.75}) {
      const auto plan = plan_prune(net, records, at_tau(tau, 2));
      const auto now = removed_set(plan);
      CHECK(plan.achieved_ratio <= tau + 1e-12);
      CHECK(std::includes(now.begin(), now.end(), previous.begin(), previous.end()));
      if (!plan.shortfall) {
        const auto total = 8 + 12 + 10;
        CHECK(static_cast<int>(plan.removed.size()) == static_cast<int>(std::floor(tau * total + 1e-9)));
      }
      CHECK(validate_plan(net, plan).ok);
      previous = now;
    }
  }
}

TEST_CASE("plan: residual groups are removed atomically") {
  const auto net = Network::build(NetworkSpec::parse(kResidual), 1, DType::f64);
  std::mt19937_64 rng(5);
  for (double tau : {0.3, 0.5, 0.8}) {
    const auto plan = plan_prune(net, random_records(net, rng), at_tau(tau, 2));
    CHECK(validate_plan(net, plan).ok);
    // Stem (layer 0) and block output (layer 2) share positions.
    CHECK(plan.kept_per_layer[0] == plan.kept_per_layer[2]);
    CHECK(plan.kept_per_layer[3] == plan.kept_per_layer[5]);
  }
}

TEST_CASE("surgery: an empty plan is the identity") {
  auto net = randomized(kResidual, 6);
  std::mt19937_64 rng(6);
  const auto plan = plan_prune(net, random_records(net, rng), at_tau(0.01));
  REQUIRE(plan.removed.empty());
  auto same = apply_prune(net, plan);
  CHECK(same.spec().to_text() == net.spec().to_text());
  auto x = gfbs::testing::random_tensor(net.input_shape(3), rng);
  CHECK(max_abs_diff(same.forward(x, BnMode::eval), net.forward(x, BnMode::eval)) <= 1e-6);
}

TEST_CASE("surgery: pruned forward equals the fully masked forward") {
  for (const char* text : {kChain, kResidual}) {
    auto net = randomized(text, 7);
    std::mt19937_64 rng(7);
    std::uniform_real_distribution<double> tau(0.05, 0.8);
    for (int trial = 0; trial < 10; ++trial) {
      const auto plan = plan_prune(net, random_records(net, rng), at_tau(tau(rng), 1));
      auto pruned = apply_prune(net, plan);
      auto masked = masked_copy(net, plan);
      auto x = gfbs::testing::random_tensor(net.input_shape(4), rng);
      CHECK(max_abs_diff(pruned.forward(x, BnMode::eval), masked.forward(x, BnMode::eval)) <= 1e-5);
      // The source network is never modified.
      CHECK(net.layers()[0].channels == net.layer_params(0).gamma.numel());
    }
  }
}

TEST_CASE("surgery: parameter count matches the analytic count of the kept shapes") {
  auto net = randomized(kChain, 8);
  std::mt19937_64 rng(8);
  const auto plan = plan_prune(net, random_records(net, rng), at_tau(0.5, 2));
  const auto pruned = apply_prune(net, plan);
  std::int64_t learnable = 0;
  for (const auto& t : pruned.parameters()) learnable += t.numel();
  CHECK(learnable == count_flops(pruned_spec(net.spec(), plan)).total_params);
  CHECK(plan.flops_ratio == count_flops(pruned).ratio_to(count_flops(net)));
}

TEST_CASE("validate: collapse and split groups are reported") {
  const auto net = Network::build(NetworkSpec::parse(kResidual), 1, DType::f64);
  std::mt19937_64 rng(9);
  auto plan = plan_prune(net, random_records(net, rng), at_tau(0.2, 2));
  REQUIRE(validate_plan(net, plan).ok);

  auto collapsed = plan;
  collapsed.removed.clear();
  for (int c = 0; c < 6; ++c) collapsed.removed.push_back({1, c, -1});
  const auto groups = build_coupling_groups(net.spec());
  for (auto& r : collapsed.removed) {
    for (const auto& g : groups) {
      if (std::find(g.members.begin(), g.members.end(), ChannelRef{r.layer, r.channel}) != g.members.end()) {
        r.group_id = g.group_id;
      }
    }
  }
  collapsed.kept_per_layer[1].clear();
  const auto a = validate_plan(net, collapsed);
  CHECK_FALSE(a.ok);
  CHECK(std::any_of(a.violations.begin(), a.violations.end(),
                    [](const std::string& v) { return v.find("min_keep") != std::string::npos; }));

  auto split = plan;
  const auto it = std::find_if(split.removed.begin(), split.removed.end(),
                               [](const RemovedChannel& r) { return r.layer == 0 || r.layer == 2; });
  if (it == split.removed.end()) {
    // Force a half-removed residual group.
    split.removed.push_back({0, 0, groups[0].group_id});
    std::erase(split.kept_per_layer[0], 0);
  } else {
    const auto ch = it->channel;
    split.removed.erase(it);
    split.kept_per_layer[0].push_back(ch);
    std::sort(split.kept_per_layer[0].begin(), split.kept_per_layer[0].end());
  }
  const auto b = validate_plan(net, split);
  CHECK_FALSE(b.ok);
  CHECK(std::any_of(b.violations.begin(), b.violations.end(),
                    [](const std::string& v) { return v.find("partially") != std::string::npos; }));
  CHECK_THROWS_AS(apply_prune(net, split), ConfigError);
}

TEST_CASE("plan: JSON round trip with stable key order") {
  const auto net = Network::build(NetworkSpec::parse(kTwoLayer), 1, DType::f64);
  std::mt19937_64 rng(10);
  const auto plan = plan_prune(net, random_records(net, rng), at_tau(0.25));
  const auto text = plan_to_json(plan);
  CHECK(text.find("\"spec_name\"") < text.find("\"tau\""));
  CHECK(text.find("\"removed\"") < text.find("\"kept_per_layer\""));
  CHECK(text.find("\"kept_per_layer\"") < text.find("\"flops_ratio\""));
  const auto back = plan_from_json(text);
  CHECK(back.removed == plan.removed);
  CHECK(back.kept_per_layer == plan.kept_per_layer);
  CHECK(plan_to_json(back) == text);
  CHECK_THROWS_AS(plan_from_json("{\"tau\": 1}"), FormatError);
}

TEST_CASE("plan: FLOPs target picks the smallest sufficient channel budget") {
  const auto net = Network::build(NetworkSpec::parse(kChain), 1, DType::f64);
  std::mt19937_64 rng(11);
  const auto records = random_records(net, rng);
  PruneConfig cfg = at_tau(0.5, 2);
  const auto plan = plan_for_flops_reduction(net, records, cfg, 0.3);
  CHECK(1.0 - plan.flops_ratio >= 0.3);
  cfg.tau = plan.tau - 1.0 / 30.0;
  if (cfg.tau > 0.0) CHECK(1.0 - plan_prune(net, records, cfg).flops_ratio < 0.3);
}
