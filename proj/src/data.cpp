#include "gfbs/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <nlohmann/json.hpp>
#include <numeric>
#include <random>
#include <sstream>

namespace gfbs {

namespace {

constexpr int kShapeClasses = 10;
constexpr double kPi = 3.14159265358979323846;

std::mt19937_64 sample_rng(std::uint64_t seed, std::uint64_t stream, std::int64_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(index),
                    static_cast<std::uint32_t>(static_cast<std::uint64_t>(index) >> 32)};
  return std::mt19937_64(seq);
}

// Foreground mask value in {0,1} for class `label` at pixel centre (x, y)
// expressed relative to the shape centre, with `r` the shape radius.
bool inside_shape(int label, double x, double y, double r, double period, double phase, double angle) {
  const double ax = std::abs(x), ay = std::abs(y);
  const double d = std::sqrt(x * x + y * y);
  const double arm = std::max(0.9, r * 0.28);
  switch (label) {
    case 0:  // disk
      return d <= r;
    case 1:  // square
      return ax <= r * 0.85 && ay <= r * 0.85;
    case 2:  // upward triangle
      return y <= r * 0.8 && y >= -r && ax <= (y + r) * 0.6;
    case 3:  // ring
      return d <= r && d >= r * 0.55;
    case 4:  // horizontal stripes
      return std::fmod(std::abs(y + phase), period) < period * 0.5;
    case 5:  // vertical stripes
      return std::fmod(std::abs(x + phase), period) < period * 0.5;
    case 6: {  // diagonal stripes
      const double u = (x * std::cos(angle) + y * std::sin(angle));
      return std::fmod(std::abs(u + phase + 100.0 * period), period) < period * 0.5;
    }
    case 7: {  // checkerboard
      const auto cx = static_cast<long>(std::floor((x + phase + 100.0 * period) / period));
      const auto cy = static_cast<long>(std::floor((y + phase + 100.0 * period) / period));
      return ((cx + cy) & 1) == 0;
    }
    case 8:  // plus
      return (ax <= arm && ay <= r) || (ay <= arm && ax <= r);
    case 9: {  // x
      const double u = std::abs(x + y) / std::sqrt(2.0), v = std::abs(x - y) / std::sqrt(2.0);
      return (u <= arm || v <= arm) && ax <= r * 0.8 && ay <= r * 0.8;
    }
    default:
      return false;
  }
}

void render_shape(int label, int size, int channels, std::mt19937_64& rng, double* out) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double half = size / 2.0;
  const double cx = half + (unit(rng) - 0.5) * size * 0.25;
  const double cy = half + (unit(rng) - 0.5) * size * 0.25;
  const double r = size * (0.25 + 0.15 * unit(rng));
  const double period = 3.0 + 2.0 * unit(rng);
  const double phase = unit(rng) * period;
  const double angle = (unit(rng) < 0.5 ? 0.25 : 0.75) * kPi;
  std::vector<double> fg(static_cast<std::size_t>(channels)), bg(static_cast<std::size_t>(channels));
  for (int c = 0; c < channels; ++c) {
    fg[c] = 0.6 + 0.4 * unit(rng);
    bg[c] = 0.3 * unit(rng);
  }
  std::normal_distribution<double> noise(0.0, 0.05);
  for (int py = 0; py < size; ++py) {
    for (int px = 0; px < size; ++px) {
      const bool on = inside_shape(label, px + 0.5 - cx, py + 0.5 - cy, r, period, phase, angle);
      for (int c = 0; c < channels; ++c) {
        out[(c * size + py) * size + px] = std::clamp((on ? fg[c] : bg[c]) + noise(rng), 0.0, 1.0);
      }
    }
  }
}

Split render_split(std::int64_t n, int size, int channels, std::uint64_t seed, std::uint64_t stream) {
  Split split;
  if (n == 0) return split;
  split.images = Tensor({n, channels, size, size}, DType::f64);
  split.labels.resize(static_cast<std::size_t>(n));
  auto data = split.images.data<double>();
  const std::int64_t per = static_cast<std::int64_t>(channels) * size * size;
  for (std::int64_t i = 0; i < n; ++i) {
    const int label = static_cast<int>(i % kShapeClasses);
    auto rng = sample_rng(seed, stream, i);
    render_shape(label, size, channels, rng, data.data() + i * per);
    split.labels[static_cast<std::size_t>(i)] = label;
  }
  return split;
}

std::uint32_t be32(std::string_view bytes, std::size_t offset) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v = (v << 8) | static_cast<unsigned char>(bytes[offset + i]);
  return v;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot open '" + path.string() + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

Split take_rows(const Split& src, std::int64_t begin, std::int64_t end) {
  Split out;
  if (end <= begin) return out;
  std::vector<std::int64_t> idx(static_cast<std::size_t>(end - begin));
  std::iota(idx.begin(), idx.end(), begin);
  Batch b = get_batch(src, idx, src.images.dtype());
  out.images = b.inputs;
  out.labels = b.labels;
  out.targets = b.targets;
  return out;
}

}  // namespace

std::string to_string(DatasetKind kind) {
  switch (kind) {
    case DatasetKind::synthetic_shapes:
      return "synthetic_shapes";
    case DatasetKind::idx_pair:
      return "idx_pair";
    case DatasetKind::denoise_patches:
      return "denoise_patches";
  }
  return "?";
}

Shape Dataset::sample_shape() const {
  const auto& s = train.images.shape();
  return {s[1], s[2], s[3]};
}

Dataset gen_shapes_dataset(std::int64_t n_train, std::int64_t n_test, int image_size,
                           std::uint64_t seed, int channels) {
  if (n_train < 0 || n_test < 0 || n_train + n_test == 0 || image_size < 4) {
    throw ConfigError("shapes dataset needs non-negative split sizes, at least one sample, and image_size >= 4");
  }
  if (channels != 1 && channels != 3) throw ConfigError("shapes dataset supports 1 or 3 channels");
  Dataset ds;
  ds.kind = DatasetKind::synthetic_shapes;
  ds.num_classes = kShapeClasses;
  ds.seed = seed;
  ds.train = render_split(n_train, image_size, channels, seed, 0);
  ds.test = render_split(n_test, image_size, channels, seed, 1);
  return ds;
}

Dataset parse_idx(std::string_view image_bytes, std::string_view label_bytes, double test_fraction) {
  if (image_bytes.size() < 16) throw FormatError("IDX image file too short for its header");
  if (label_bytes.size() < 8) throw FormatError("IDX label file too short for its header");
  if (be32(image_bytes, 0) != 0x00000803u) throw FormatError("IDX image file has bad magic");
  if (be32(label_bytes, 0) != 0x00000801u) throw FormatError("IDX label file has bad magic");
  const std::int64_t n = be32(image_bytes, 4);
  const std::int64_t rows = be32(image_bytes, 8);
  const std::int64_t cols = be32(image_bytes, 12);
  const std::int64_t n_labels = be32(label_bytes, 4);
  if (n != n_labels) {
    throw FormatError("IDX count mismatch: " + std::to_string(n) + " images vs " +
                      std::to_string(n_labels) + " labels");
  }
  if (n == 0 || rows == 0 || cols == 0) throw FormatError("IDX file holds no samples");
  if (static_cast<std::int64_t>(image_bytes.size()) != 16 + n * rows * cols) {
    throw FormatError("IDX image payload length does not match header");
  }
  if (static_cast<std::int64_t>(label_bytes.size()) != 8 + n) {
    throw FormatError("IDX label payload length does not match header");
  }
  if (!(test_fraction >= 0.0 && test_fraction < 1.0)) throw ConfigError("test_fraction must be in [0,1)");

  Split all;
  all.images = Tensor({n, 1, rows, cols}, DType::f64);
  auto px = all.images.data<double>();
  for (std::int64_t i = 0; i < n * rows * cols; ++i) {
    px[i] = static_cast<unsigned char>(image_bytes[16 + i]) / 255.0;
  }
  int max_label = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    const int label = static_cast<unsigned char>(label_bytes[8 + i]);
    all.labels.push_back(label);
    max_label = std::max(max_label, label);
  }
  Dataset ds;
  ds.kind = DatasetKind::idx_pair;
  ds.num_classes = max_label + 1;
  const auto n_test = static_cast<std::int64_t>(std::floor(test_fraction * static_cast<double>(n)));
  if (n_test == 0) {
    ds.train = all;
  } else {
    ds.train = take_rows(all, 0, n - n_test);
    ds.test = take_rows(all, n - n_test, n);
  }
  return ds;
}

Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
                 double test_fraction) {
  return parse_idx(read_file(images_path), read_file(labels_path), test_fraction);
}

Dataset make_noisy_pairs(const Dataset& clean, double sigma, std::uint64_t seed) {
  if (sigma < 0.0) throw ConfigError("noise level must be non-negative");
  Dataset ds;
  ds.kind = DatasetKind::denoise_patches;
  ds.sigma = sigma;
  ds.seed = seed;
  const double std_unit = sigma / 255.0;
  auto noisy = [&](const Split& src, std::uint64_t stream) {
    Split out;
    if (!src.images.defined()) return out;
    out.targets = src.images.to(DType::f64);
    out.images = out.targets.clone();
    auto px = out.images.data<double>();
    const auto per = src.images.numel() / src.images.dim(0);
    for (std::int64_t i = 0; i < src.images.dim(0); ++i) {
      auto rng = sample_rng(seed, 100 + stream, i);
      std::normal_distribution<double> dist(0.0, 1.0);
      for (std::int64_t j = 0; j < per; ++j) px[i * per + j] += std_unit * dist(rng);
    }
    return out;
  };
  ds.train = noisy(clean.train, 0);
  ds.test = noisy(clean.test, 1);
  return ds;
}

Batch get_batch(const Split& split, std::span<const std::int64_t> indices, DType dtype) {
  const auto& shape = split.images.shape();
  const std::int64_t per = split.images.numel() / shape[0];
  Shape bs = shape;
  bs[0] = static_cast<std::int64_t>(indices.size());
  Batch b;
  b.inputs = Tensor(bs, dtype);
  if (split.targets.defined()) b.targets = Tensor(bs, dtype);
  auto gather = [&](const Tensor& src, Tensor& dst) {
    dispatch(src.dtype(), [&]<class S>() {
      auto from = src.data<S>();
      dispatch(dtype, [&]<class T>() {
        auto to = dst.data<T>();
        for (std::size_t k = 0; k < indices.size(); ++k) {
          const auto i = indices[k];
          if (i < 0 || i >= shape[0]) throw ConfigError("batch index out of range");
          for (std::int64_t j = 0; j < per; ++j) to[k * per + j] = static_cast<T>(from[i * per + j]);
        }
      });
    });
  };
  gather(split.images, b.inputs);
  if (split.targets.defined()) gather(split.targets, b.targets);
  if (!split.labels.empty()) {
    for (auto i : indices) b.labels.push_back(split.labels[static_cast<std::size_t>(i)]);
  }
  return b;
}

std::vector<std::int64_t> shuffled_indices(std::int64_t n, std::uint64_t seed) {
  std::vector<std::int64_t> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(seed);
  // Fisher-Yates with an explicit draw so the order does not depend on the
  // standard library's shuffle implementation.
  for (std::int64_t i = n - 1; i > 0; --i) {
    const auto j = static_cast<std::int64_t>(rng() % static_cast<std::uint64_t>(i + 1));
    std::swap(idx[i], idx[j]);
  }
  return idx;
}

Batch sample_batch(const Split& split, std::int64_t m, std::uint64_t seed, DType dtype) {
  if (m <= 0) throw ConfigError("batch size must be positive");
  auto idx = shuffled_indices(split.size(), seed);
  idx.resize(static_cast<std::size_t>(std::min<std::int64_t>(m, split.size())));
  return get_batch(split, idx, dtype);
}

Dataset load_dataset(const std::string& descriptor) {
  if (descriptor == "shapes") return gen_shapes_dataset(2000, 500, 16, 1);
  if (descriptor == "shapes-small") return gen_shapes_dataset(400, 200, 16, 1);
  if (descriptor == "denoise") return make_noisy_pairs(gen_shapes_dataset(1024, 128, 16, 2), 50.0, 3);
  if (descriptor == "denoise-small") return make_noisy_pairs(gen_shapes_dataset(64, 16, 16, 2), 50.0, 3);

  const std::filesystem::path path(descriptor);
  std::ifstream f(path);
  if (!f) throw ConfigError("unknown dataset preset or unreadable file '" + descriptor + "'");
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("dataset descriptor '" + descriptor + "': " + e.what());
  }
  const auto base = path.parent_path();
  std::function<Dataset(const nlohmann::json&)> build = [&](const nlohmann::json& d) -> Dataset {
    try {
      const auto kind = d.at("kind").get<std::string>();
      if (kind == "shapes") {
        return gen_shapes_dataset(d.value("n_train", 2000), d.value("n_test", 500), d.value("image_size", 16),
                                  d.value("seed", std::uint64_t{1}), d.value("channels", 1));
      }
      if (kind == "idx") {
        auto resolve = [&](const std::string& p) {
          std::filesystem::path fp(p);
          return fp.is_absolute() ? fp : base / fp;
        };
        return load_idx(resolve(d.at("images").get<std::string>()), resolve(d.at("labels").get<std::string>()),
                        d.value("test_fraction", 0.2));
      }
      if (kind == "denoise") {
        Dataset clean = d.contains("source") ? build(d.at("source")) : gen_shapes_dataset(256, 64, 16, 2);
        return make_noisy_pairs(clean, d.value("sigma", 50.0), d.value("seed", std::uint64_t{3}));
      }
      throw ConfigError("dataset descriptor: unknown kind '" + kind + "'");
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("dataset descriptor '" + descriptor + "': " + e.what());
    }
  };
  return build(j);
}

}  // namespace gfbs
