#include "doctest.h"
#include "gfbs/errors.hpp"
#include "gfbs/netgraph.hpp"
#include "support/gradcheck.hpp"
#include "support/masking.hpp"

#include <random>

using namespace gfbs;

namespace {

const char* kResnet = R"(
name tiny_resnet
input 1 8 8
conv_bn_relu 4 3 1 1
residual_begin
conv_bn_relu 4 3 1 1
conv_bn 4 3 1 1
residual_add
relu
residual_begin 8 1 2 0
conv_bn_relu 8 3 2 1
conv_bn 8 3 1 1
residual_add
relu
pool 0
flatten
linear 3
)";

const char* kChain = R"(
name chain
input 2 6 6
conv_bn_relu 5 3 1 1
conv_bn 6 3 2 1
pool 0
flatten
linear 4
)";

}  // namespace

TEST_CASE("spec: parse, defaults and canonical text round trip") {
  const auto spec = NetworkSpec::parse("# comment\nname n\ninput 3 8 8\nconv_bn_relu 4 3 # trailing\npool 0\nflatten\nlinear 2\n");
  CHECK(spec.name == "n");
  CHECK(spec.in_channels == 3);
  REQUIRE(spec.blocks.size() == 4);
  CHECK(spec.blocks[0] == BlockSpec{BlockKind::conv_bn_relu, 4, 3, 1, 0});
  CHECK(spec.blocks[1] == BlockSpec{BlockKind::pool, 0, 0, 1, 0});
  CHECK(NetworkSpec::parse(spec.to_text()) == spec);
  const auto resnet = NetworkSpec::parse(kResnet);
  CHECK(NetworkSpec::parse(resnet.to_text()) == resnet);
}

TEST_CASE("spec: malformed descriptions are rejected") {
  CHECK_THROWS_AS(NetworkSpec::parse("input 1 4 4\nwarp 3\n"), ConfigError);
  CHECK_THROWS_AS(NetworkSpec::parse("conv 3 3\n"), ConfigError);
  CHECK_THROWS_AS(NetworkSpec::parse("input 1 4 4\nconv 3 x\n"), ConfigError);
  // A channel count on a pool line is a misplaced kernel size.
  CHECK_THROWS_AS(NetworkSpec::parse("input 1 4 4\npool 2 2\n"), ConfigError);
  CHECK_THROWS_AS(NetworkSpec::parse("input 1 4 4\nconv 3 3 1 1 9\n"), ConfigError);
  CHECK_THROWS_AS(infer_shapes(NetworkSpec::parse("input 1 4 4\nlinear 3\n")), ConfigError);
  CHECK_THROWS_AS(infer_shapes(NetworkSpec::parse("input 1 4 4\nflatten\nconv 2 1\n")), ConfigError);
  CHECK_THROWS_AS(infer_shapes(NetworkSpec::parse("input 1 4 4\nresidual_begin\nconv 2 1\nresidual_add\n")),
                  ConfigError);
  CHECK_THROWS_AS(infer_shapes(NetworkSpec::parse("input 1 4 4\nresidual_begin\nconv 1 1\n")), ConfigError);
  CHECK_THROWS_AS(infer_shapes(NetworkSpec::parse("input 1 4 4\nconv 1 7\n")), ConfigError);
}

TEST_CASE("spec: shape inference") {
  const auto shapes = infer_shapes(NetworkSpec::parse(kResnet));
  CHECK(shapes[0].out_c == 4);
  CHECK(shapes[6].out_h == 8);  // projection stride lives on the skip
  CHECK(shapes[7].out_h == 4);
  CHECK(shapes[9].out_c == 8);
  CHECK(shapes[11].out_c == 8);  // global pool keeps channels
  CHECK(shapes[11].out_h == 1);
  CHECK(shapes[12].out_c == 8);  // flatten
  CHECK(shapes[13].out_c == 3);
}

TEST_CASE("coupling: residual joins share channel positions") {
  const auto spec = NetworkSpec::parse(kResnet);
  const auto layers = prunable_layers(spec);
  REQUIRE(layers.size() == 6);
  CHECK(layers[3].projection);
  CHECK(layers[3].name == "b6.proj");
  CHECK(layers[0].relu_follows);
  CHECK_FALSE(layers[2].relu_follows);
  const auto groups = build_coupling_groups(spec);
  CHECK(groups.size() == 4 + 4 + 8 + 8);
  for (const auto& g : groups) {
    CHECK(g.prunable);
    for (const auto& m : g.members) CHECK(m.channel == g.members.front().channel);
  }
  // The stem (layer 0) and the first block's output (layer 2) move together,
  // as do the projection (layer 3) and the second block's output (layer 5).
  CHECK(groups[0].members == std::vector<ChannelRef>{{0, 0}, {2, 0}});
  const auto& proj_group = *std::find_if(groups.begin(), groups.end(), [](const CouplingGroup& g) {
    return g.members.front() == ChannelRef{3, 0};
  });
  CHECK(proj_group.members == std::vector<ChannelRef>{{3, 0}, {5, 0}});
}

TEST_CASE("coupling: a stream joined with the network input is pinned") {
  const auto spec = NetworkSpec::parse("input 4 4 4\nresidual_begin\nconv_bn 4 3 1 1\nresidual_add\nconv_bn_relu 4 3 1 1\n");
  const auto groups = build_coupling_groups(spec);
  REQUIRE(groups.size() == 8);
  for (const auto& g : groups) CHECK(g.prunable == (g.members.front().layer == 1));
}

TEST_CASE("flops: hand-derived count for a two-layer reference net") {
  // conv 3->4, 3x3, pad 1 on 8x8: 2*64*4*27 + 64*4 = 14080; BN 2*256; ReLU 256.
  // linear 256->10: 2*256*10 + 10 = 5130.
  const auto spec = NetworkSpec::parse("input 3 8 8\nconv_bn_relu 4 3 1 1\nflatten\nlinear 10\n");
  const auto r = count_flops(spec);
  CHECK(r.entries[0].flops == 14080 + 512 + 256);
  CHECK(r.entries[2].flops == 5130);
  CHECK(r.total_flops == 19978);
  CHECK(r.total_params == (4 * 27 + 4) + 8 + (256 * 10 + 10));
}

TEST_CASE("flops: pooling and residual additions") {
  const auto spec = NetworkSpec::parse("input 2 4 4\nresidual_begin\nconv 2 3 1 1\nresidual_add\npool 0 2 2\n");
  const auto r = count_flops(spec);
  CHECK(r.entries[2].flops == 32);  // add: one per element
  CHECK(r.entries[3].flops == 32);  // pool: one per input element
  const auto half = count_flops(NetworkSpec::parse("input 2 4 4\nconv 1 3 1 1\n"));
  const auto full = count_flops(NetworkSpec::parse("input 2 4 4\nconv 2 3 1 1\n"));
  CHECK(half.ratio_to(full) == 0.5);
  CHECK(half.reduction_vs(full) == 0.5);
}

TEST_CASE("network: build is deterministic and forward has the right shape") {
  const auto spec = NetworkSpec::parse(kResnet);
  auto a = Network::build(spec, 7, DType::f64);
  auto b = Network::build(spec, 7, DType::f64);
  auto c = Network::build(spec, 8, DType::f64);
  CHECK(a.layer_params(1).weight.to_vector() == b.layer_params(1).weight.to_vector());
  CHECK(a.layer_params(1).weight.to_vector() != c.layer_params(1).weight.to_vector());
  std::mt19937_64 rng(1);
  auto x = gfbs::testing::random_tensor(a.input_shape(5), rng);
  auto y = a.forward(x, BnMode::eval);
  CHECK(y.shape() == Shape{5, 3});
  CHECK_THROWS_AS(a.forward(gfbs::testing::random_tensor({1, 2, 8, 8}, rng), BnMode::eval), ConfigError);
}

TEST_CASE("network: chunked prediction equals one pass") {
  auto net = Network::build(NetworkSpec::parse(kResnet), 3, DType::f64);
  std::mt19937_64 rng(2);
  auto x = gfbs::testing::random_tensor(net.input_shape(7), rng);
  const auto one = net.forward(x, BnMode::eval);
  CHECK(predict(net, x, 3).to_vector() == one.to_vector());
}

TEST_CASE("network: snapshot and restore undo a training forward") {
  auto net = Network::build(NetworkSpec::parse(kChain), 3, DType::f64);
  std::mt19937_64 rng(2);
  const auto state = net.snapshot();
  const auto before = net.layer_params(0).running_mean.to_vector();
  net.forward(gfbs::testing::random_tensor(net.input_shape(4), rng), BnMode::train);
  CHECK(net.layer_params(0).running_mean.to_vector() != before);
  net.restore(state);
  CHECK(net.layer_params(0).running_mean.to_vector() == before);
}

TEST_CASE("network: clone is independent") {
  auto net = Network::build(NetworkSpec::parse(kChain), 3, DType::f64);
  auto copy = net.clone();
  copy.layer_params(0).gamma.set(0, 5.0);
  CHECK(net.layer_params(0).gamma.at(0) == 1.0);
}

TEST_CASE("checkpoint: byte round trip") {
  auto net = Network::build(NetworkSpec::parse(kResnet), 5, DType::f32);
  net.layer_params(2).running_var.set(1, 0.25);
  const auto bytes = encode_checkpoint(net);
  CHECK(bytes.substr(0, 4) == "GFBS");
  const auto back = decode_checkpoint(bytes);
  CHECK(back.spec() == net.spec());
  CHECK(back.dtype() == DType::f32);
  CHECK(encode_checkpoint(back) == bytes);
}

TEST_CASE("checkpoint: corrupt input raises FormatError") {
  const auto net = Network::build(NetworkSpec::parse(kChain), 5, DType::f64);
  const auto bytes = encode_checkpoint(net);
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  CHECK_THROWS_AS(decode_checkpoint(bad_magic), FormatError);
  auto bad_version = bytes;
  bad_version[4] = 9;
  CHECK_THROWS_AS(decode_checkpoint(bad_version), FormatError);
  CHECK_THROWS_AS(decode_checkpoint(bytes.substr(0, bytes.size() - 3)), FormatError);
  CHECK_THROWS_AS(decode_checkpoint(bytes.substr(0, 2)), FormatError);

  auto negative = net.clone();
  negative.layer_params(0).running_var.set(0, -1.0);
  CHECK_THROWS_AS(decode_checkpoint(encode_checkpoint(negative)), FormatError);
}

TEST_CASE("network: gradients of a whole network match finite differences") {
  auto net = Network::build(NetworkSpec::parse(kResnet), 9, DType::f64);
  std::mt19937_64 rng(4);
  auto x = gfbs::testing::random_tensor(net.input_shape(3), rng);
  auto fwd = [&](Tape* t) { return net.forward(x, BnMode::train, t); };
  auto& p = net.layer_params(3);
  CHECK(gfbs::testing::gradient_error(fwd, {p.gamma, p.beta, net.block(13).linear.bias}, rng) < 1e-5);
}
