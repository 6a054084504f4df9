#include "doctest.h"
#include "gfbs/data.hpp"
#include "gfbs/errors.hpp"
#include "gfbs/trainer.hpp"

#include <random>
#include <cmath>
#include <set>
#include <string>

using namespace gfbs;

namespace {

std::string be32(std::uint32_t v) {
  return {static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8),
          static_cast<char>(v)};
}

std::string idx_images(std::uint32_t n, std::uint32_t rows, std::uint32_t cols) {
  std::string s = be32(0x00000803) + be32(n) + be32(rows) + be32(cols);
  for (std::uint32_t i = 0; i < n * rows * cols; ++i) s.push_back(static_cast<char>(i * 17 % 256));
  return s;
}

std::string idx_labels(std::uint32_t n) {
  std::string s = be32(0x00000801) + be32(n);
  for (std::uint32_t i = 0; i < n; ++i) s.push_back(static_cast<char>(i % 3));
  return s;
}

}  // namespace

TEST_CASE("idx: parses a hand-built file pair") {
  const auto ds = parse_idx(idx_images(4, 2, 3), idx_labels(4), 0.25);
  CHECK(ds.kind == DatasetKind::idx_pair);
  CHECK(ds.num_classes == 3);
  CHECK(ds.train.size() == 3);
  CHECK(ds.test.size() == 1);
  CHECK(ds.train.images.shape() == Shape{3, 1, 2, 3});
  CHECK(ds.train.images.at(1) == doctest::Approx(17.0 / 255.0));
  CHECK(ds.test.labels == std::vector<int>{0});
}

TEST_CASE("idx: malformed files raise FormatError") {
  auto bad_magic = idx_images(2, 2, 2);
  bad_magic[3] = 0x01;
  CHECK_THROWS_AS(parse_idx(bad_magic, idx_labels(2)), FormatError);
  CHECK_THROWS_AS(parse_idx(idx_images(2, 2, 2), idx_labels(3)), FormatError);
  CHECK_THROWS_AS(parse_idx(idx_images(2, 2, 2).substr(0, 18), idx_labels(2)), FormatError);
  CHECK_THROWS_AS(parse_idx("", idx_labels(2)), FormatError);
  CHECK_THROWS_AS(parse_idx(idx_images(0, 2, 2), idx_labels(0)), FormatError);
}

TEST_CASE("shapes: deterministic, balanced and unit-scale") {
  const auto a = gen_shapes_dataset(40, 20, 12, 5);
  const auto b = gen_shapes_dataset(40, 20, 12, 5);
  const auto c = gen_shapes_dataset(40, 20, 12, 6);
  CHECK(a.train.images.to_vector() == b.train.images.to_vector());
  CHECK(a.train.images.to_vector() != c.train.images.to_vector());
  CHECK(a.num_classes == 10);
  std::vector<int> counts(10, 0);
  for (int l : a.train.labels) ++counts[l];
  for (int n : counts) CHECK(n == 4);
  for (double v : a.train.images.to_vector()) CHECK((v >= 0.0 && v <= 1.0));
  // Image i depends only on its index: a larger dataset starts the same way.
  const auto bigger = gen_shapes_dataset(60, 20, 12, 5);
  const auto per = 12 * 12;
  for (int i = 0; i < per * 40; ++i) CHECK(bigger.train.images.at(i) == a.train.images.at(i));
}

TEST_CASE("noise: PSNR of noisy against clean at sigma 50 is about 14.15 dB") {
  const auto clean = gen_shapes_dataset(64, 8, 16, 2);
  const auto noisy = make_noisy_pairs(clean, 50.0, 3);
  CHECK(noisy.is_denoising());
  CHECK(noisy.train.targets.to_vector() == clean.train.images.to_vector());
  const auto x = noisy.train.images.to_vector();
  const auto y = noisy.train.targets.to_vector();
  double sq = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) sq += (x[i] - y[i]) * (x[i] - y[i]);
  const double expected = 20.0 * std::log10(255.0 / 50.0);
  CHECK(psnr(sq / static_cast<double>(x.size())) == doctest::Approx(expected).epsilon(0.01));
  CHECK_THROWS_AS(make_noisy_pairs(clean, -1.0, 3), ConfigError);
}

TEST_CASE("batches: seeded permutation and gather") {
  const auto idx = shuffled_indices(50, 9);
  CHECK(std::set<std::int64_t>(idx.begin(), idx.end()).size() == 50);
  CHECK(idx == shuffled_indices(50, 9));
  CHECK(idx != shuffled_indices(50, 10));

  const auto ds = gen_shapes_dataset(20, 0, 8, 1);
  const std::vector<std::int64_t> pick{3, 7};
  const auto b = get_batch(ds.train, pick, DType::f32);
  CHECK(b.inputs.shape() == Shape{2, 1, 8, 8});
  CHECK(b.labels == std::vector<int>{3, 7});
  CHECK(b.inputs.at(64) == doctest::Approx(ds.train.images.at(7 * 64)));
  CHECK(sample_batch(ds.train, 5, 4).labels == sample_batch(ds.train, 5, 4).labels);
}

TEST_CASE("descriptor: presets and errors") {
  CHECK(load_dataset("shapes-small").train.size() == 400);
  CHECK(load_dataset("denoise-small").is_denoising());
  CHECK_THROWS_AS(load_dataset("/nonexistent/descriptor.json"), ConfigError);
}
