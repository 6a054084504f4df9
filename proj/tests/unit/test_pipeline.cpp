#include "doctest.h"
#include "gfbs/errors.hpp"
#include "gfbs/pipeline.hpp"

#include <random>
#include <cstdlib>
#include <filesystem>

using namespace gfbs;

TEST_CASE("pipeline: lambda sweep runs every point and leaves the net alone") {
  const auto data = gen_shapes_dataset(128, 64, 16, 1);
  auto net = Network::build(
      NetworkSpec::parse("input 1 16 16\nconv_bn_relu 8 3 1 1\npool 0 2 2\nconv_bn_relu 8 3 1 1\npool 0\nflatten\nlinear 10\n"), 1);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.lr_milestones.clear();
  train(net, data, cfg);
  const auto before = encode_checkpoint(net);
  PruneConfig prune;
  prune.tau = 0.3;
  TrainConfig ft = cfg;
  ft.epochs = 1;
  const auto sweep = lambda_sweep(net, data, prune, kDefaultLambdas, ft);
  CHECK(encode_checkpoint(net) == before);
  REQUIRE(sweep.entries.size() == 4);
  for (const auto& e : sweep.entries) {
    CHECK(e.plan.removed.size() == 4);
    CHECK(e.plan.lambda == e.lambda);
  }
  const auto table = sweep_table(sweep, LossKind::cross_entropy);
  CHECK(table.find("| 0.005 |") != std::string::npos);
  const auto kept = kept_channel_table(net, {sweep.entries[0].plan}, {"kept"});
  CHECK(kept.find("| b0 | 8 |") != std::string::npos);
}

TEST_CASE("pipeline: manifest round trip") {
  RunManifest m;
  m.command = "train";
  m.argv = {"gfbs", "train", "--seed", "3"};
  m.inputs = {{"data", "shapes"}};
  m.seeds = {{"init", 3}};
  m.started = utc_timestamp();
  const auto path = std::filesystem::temp_directory_path() / "gfbs_manifest_test.json";
  write_manifest(m, path);
  const auto back = read_manifest(path);
  CHECK(back.argv == m.argv);
  CHECK(back.inputs.at("data") == "shapes");
  CHECK(back.seeds.at("init") == 3);
  std::filesystem::remove(path);
}

TEST_CASE("pipeline: thread budget from the environment") {
  setenv("GFBS_THREADS", "3", 1);
  CHECK(thread_budget() == 3);
  setenv("GFBS_THREADS", "0", 1);
  CHECK(thread_budget() == 1);
  setenv("GFBS_THREADS", "many", 1);
  CHECK_THROWS_AS(thread_budget(), ConfigError);
  unsetenv("GFBS_THREADS");
  CHECK(thread_budget() == 1);
}
