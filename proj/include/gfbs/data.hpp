#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "gfbs/tensor.hpp"

namespace gfbs {

enum class DatasetKind { synthetic_shapes, idx_pair, denoise_patches };

std::string to_string(DatasetKind kind);

struct Split {
  Tensor images;            // [N, C, H, W], unit scale
  std::vector<int> labels;  // classification splits
  Tensor targets;           // denoising splits: clean images

  std::int64_t size() const { return images.defined() ? images.dim(0) : 0; }
};

struct Batch {
  Tensor inputs;
  std::vector<int> labels;
  Tensor targets;

  std::int64_t size() const { return inputs.dim(0); }
};

struct Dataset {
  DatasetKind kind = DatasetKind::synthetic_shapes;
  int num_classes = 0;  // 0 for denoising data
  double sigma = 0.0;   // noise level on the 0-255 scale
  std::uint64_t seed = 0;
  Split train;
  Split test;

  bool is_denoising() const { return kind == DatasetKind::denoise_patches; }
  Shape sample_shape() const;
};

// Ten procedurally rendered classes (disk, square, triangle, ring, three
// stripe orientations, checkerboard, plus, x) with random placement, size,
// contrast and pixel noise. Image i of a split depends only on (seed, split, i).
Dataset gen_shapes_dataset(std::int64_t n_train, std::int64_t n_test, int image_size,
                           std::uint64_t seed, int channels = 1);

// Big-endian IDX files (images magic 0x00000803, labels 0x00000801), pixels
// scaled to [0,1]. The last `test_fraction` of the samples form the test split.
Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
                 double test_fraction = 0.0);
// In-memory variant of the parser used by load_idx.
Dataset parse_idx(std::string_view image_bytes, std::string_view label_bytes, double test_fraction = 0.0);

// Pairs (clean + N(0, sigma/255), clean). Noise is a pure function of
// (seed, split, index). Outputs are not clipped.
Dataset make_noisy_pairs(const Dataset& clean, double sigma, std::uint64_t seed);

Batch get_batch(const Split& split, std::span<const std::int64_t> indices, DType dtype = DType::f32);
std::vector<std::int64_t> shuffled_indices(std::int64_t n, std::uint64_t seed);
// First m samples of the seeded permutation.
Batch sample_batch(const Split& split, std::int64_t m, std::uint64_t seed, DType dtype = DType::f32);

// Dataset descriptor used by the CLI: either a preset name ("shapes",
// "shapes-small", "denoise", "denoise-small") or a JSON file.
Dataset load_dataset(const std::string& descriptor);

}  // namespace gfbs
