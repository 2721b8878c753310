#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "vibtk/errors.hpp"
#include "vibtk/rng.hpp"
#include "vibtk/tensor.hpp"

namespace vibtk::data {

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

struct Dataset {
  Tensor images;  // [n x 784], values in [0,1]
  std::vector<int> labels;
  std::string split;  // "train" | "test"
  std::string provenance;

  std::size_t size() const { return labels.size(); }
};

namespace detail {

inline std::uint32_t read_be32(std::istream& in, const std::string& path) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4))
    throw io_error("truncated IDX file: " + path);
  return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) | (std::uint32_t(b[2]) << 8) |
         std::uint32_t(b[3]);
}

inline void write_be32(std::ostream& out, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                              static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

}  // namespace detail

/// Parses the big-endian IDX pair used by MNIST and divides pixels by 255.
inline Dataset load_mnist_idx(const std::string& image_path, const std::string& label_path,
                              const std::string& split = "train") {
  std::ifstream img(image_path, std::ios::binary);
  if (!img) throw io_error("cannot open " + image_path);
  std::ifstream lab(label_path, std::ios::binary);
  if (!lab) throw io_error("cannot open " + label_path);

  char magic_buf[9];
  const std::uint32_t img_magic = detail::read_be32(img, image_path);
  if (img_magic != kIdxImageMagic) {
    std::snprintf(magic_buf, sizeof magic_buf, "%08x", img_magic);
    throw format_error("bad image magic 0x" + std::string(magic_buf) + " in " + image_path);
  }
  const std::uint32_t n = detail::read_be32(img, image_path);
  const std::uint32_t rows = detail::read_be32(img, image_path);
  const std::uint32_t cols = detail::read_be32(img, image_path);
  if (rows != 28 || cols != 28)
    throw format_error("expected 28x28 images, got " + std::to_string(rows) + "x" + std::to_string(cols));

  const std::uint32_t lab_magic = detail::read_be32(lab, label_path);
  if (lab_magic != kIdxLabelMagic) {
    std::snprintf(magic_buf, sizeof magic_buf, "%08x", lab_magic);
    throw format_error("bad label magic 0x" + std::string(magic_buf) + " in " + label_path);
  }
  const std::uint32_t n_lab = detail::read_be32(lab, label_path);
  if (n != n_lab)
    throw consistency_error("image count " + std::to_string(n) + " != label count " +
                            std::to_string(n_lab));

  Dataset ds;
  ds.split = split;
  ds.provenance = image_path;
  ds.images = Tensor::zeros({n, 784});
  ds.labels.resize(n);

  std::vector<unsigned char> raw(static_cast<std::size_t>(n) * 784);
  if (!img.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size())))
    throw io_error("truncated IDX file: " + image_path);
  for (std::size_t i = 0; i < raw.size(); ++i) ds.images.data[i] = raw[i] / 255.0f;

  std::vector<unsigned char> lab_raw(n);
  if (!lab.read(reinterpret_cast<char*>(lab_raw.data()), n))
    throw io_error("truncated IDX file: " + label_path);
  for (std::uint32_t i = 0; i < n; ++i) {
    if (lab_raw[i] > 9) throw format_error("label byte " + std::to_string(lab_raw[i]) + " out of [0,10)");
    ds.labels[i] = lab_raw[i];
  }
  return ds;
}

/// Inverse of load_mnist_idx; pixel = round(value*255).
inline void write_mnist_idx(const Dataset& ds, const std::string& image_path,
                            const std::string& label_path) {
  std::ofstream img(image_path, std::ios::binary);
  if (!img) throw io_error("cannot write " + image_path);
  std::ofstream lab(label_path, std::ios::binary);
  if (!lab) throw io_error("cannot write " + label_path);
  const auto n = static_cast<std::uint32_t>(ds.size());
  detail::write_be32(img, kIdxImageMagic);
  detail::write_be32(img, n);
  detail::write_be32(img, 28);
  detail::write_be32(img, 28);
  std::vector<unsigned char> raw(ds.images.size());
  for (std::size_t i = 0; i < raw.size(); ++i)
    raw[i] = static_cast<unsigned char>(std::lround(std::clamp(ds.images.data[i], 0.0f, 1.0f) * 255.0f));
  img.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  detail::write_be32(lab, kIdxLabelMagic);
  detail::write_be32(lab, n);
  for (int y : ds.labels) lab.put(static_cast<char>(y));
}

inline Dataset take_first(const Dataset& ds, std::size_t n) {
  if (n > ds.size()) throw config_error("subset of " + std::to_string(n) + " from " +
                                        std::to_string(ds.size()) + " rows");
  Dataset out;
  out.split = ds.split;
  out.provenance = ds.provenance + " (first " + std::to_string(n) + ")";
  out.labels.assign(ds.labels.begin(), ds.labels.begin() + static_cast<std::ptrdiff_t>(n));
  out.images = Tensor::zeros({n, 784});
  std::copy(ds.images.data.begin(), ds.images.data.begin() + static_cast<std::ptrdiff_t>(n * 784),
            out.images.data.begin());
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic handwritten-style digits. Each class is a fixed set of strokes
// (polylines sampled from segments and elliptical arcs on the 28x28 grid);
// samples vary by rotation, scale, translation, stroke thickness, ink level,
// and pixel noise. Written to disk in IDX form so the real parser is the only
// ingestion path.

namespace digits {

struct Pt {
  float x, y;
};
using Stroke = std::vector<Pt>;

inline Stroke segment(Pt a, Pt b) { return {a, b}; }

inline Stroke arc(Pt c, float rx, float ry, float deg0, float deg1, int samples = 24) {
  Stroke s;
  s.reserve(static_cast<std::size_t>(samples) + 1);
  for (int i = 0; i <= samples; ++i) {
    const float t = deg0 + (deg1 - deg0) * static_cast<float>(i) / static_cast<float>(samples);
    const float rad = t * 3.14159265f / 180.0f;
    s.push_back({c.x + rx * std::cos(rad), c.y + ry * std::sin(rad)});  // y grows downward
  }
  return s;
}

/// Stroke stencils per class, in 28x28 pixel coordinates.
inline const std::vector<Stroke>& stencil(int digit) {
  static const std::array<std::vector<Stroke>, 10> all = [] {
    std::array<std::vector<Stroke>, 10> d;
    d[0] = {arc({14, 14}, 5.5f, 8.0f, 0, 360, 48)};
    d[1] = {segment({14, 6}, {14, 22}), segment({14, 6}, {10.5f, 9.5f})};
    d[2] = {arc({14, 10.5f}, 5.0f, 4.5f, 180, 395, 32), segment({17.5f, 13.8f}, {9, 21}),
            segment({9, 21}, {19, 21})};
    d[3] = {arc({13.5f, 9.7f}, 4.5f, 4.3f, 200, 450, 32), arc({13.5f, 18.3f}, 4.8f, 4.5f, 270, 520, 32)};
    d[4] = {segment({15, 5}, {8, 16}), segment({8, 16}, {20, 16}), segment({16, 9}, {16, 23})};
    d[5] = {segment({18, 6}, {10.5f, 6}), segment({10.5f, 6}, {10, 13}), segment({10, 13}, {13.5f, 12}),
            arc({13.5f, 17}, 5.0f, 5.0f, 270, 520, 32)};
    d[6] = {Stroke{{17, 5}, {13.5f, 9.5f}, {11, 15}}, arc({13.5f, 17.5f}, 4.7f, 4.7f, 0, 360, 40)};
    d[7] = {segment({9, 6}, {19, 6}), segment({19, 6}, {12, 23})};
    d[8] = {arc({14, 10}, 4.0f, 4.0f, 0, 360, 36), arc({14, 18.5f}, 4.6f, 4.6f, 0, 360, 40)};
    d[9] = {arc({14.5f, 10.5f}, 4.5f, 4.5f, 0, 360, 36), Stroke{{19, 10.5f}, {18, 16}, {15, 22}}};
    return d;
  }();
  if (digit < 0 || digit > 9) throw contract_error("digit class out of [0,10)");
  return all[static_cast<std::size_t>(digit)];
}

inline float dist_to_segment(Pt p, Pt a, Pt b) {
  const float dx = b.x - a.x, dy = b.y - a.y;
  const float len2 = dx * dx + dy * dy;
  float t = len2 > 0 ? ((p.x - a.x) * dx + (p.y - a.y) * dy) / len2 : 0.0f;
  t = std::clamp(t, 0.0f, 1.0f);
  const float ex = p.x - (a.x + t * dx), ey = p.y - (a.y + t * dy);
  return std::sqrt(ex * ex + ey * ey);
}

struct SampleParams {
  float rot, scale, tx, ty, thickness, ink;
};

inline void render(const std::vector<Stroke>& strokes, const SampleParams& sp, float* out784) {
  const float cr = std::cos(sp.rot), sr = std::sin(sp.rot);
  std::vector<Stroke> placed;
  placed.reserve(strokes.size());
  for (const auto& s : strokes) {
    Stroke t;
    t.reserve(s.size());
    for (auto p : s) {
      const float x = (p.x - 14.0f) * sp.scale, y = (p.y - 14.0f) * sp.scale;
      t.push_back({14.0f + cr * x - sr * y + sp.tx, 14.0f + sr * x + cr * y + sp.ty});
    }
    placed.push_back(std::move(t));
  }
  const float half = sp.thickness * 0.5f, soft = 0.7f;
  for (int py = 0; py < 28; ++py)
    for (int px = 0; px < 28; ++px) {
      const Pt p{static_cast<float>(px), static_cast<float>(py)};
      float d = 1e9f;
      for (const auto& s : placed)
        for (std::size_t i = 0; i + 1 < s.size(); ++i) d = std::min(d, dist_to_segment(p, s[i], s[i + 1]));
      out784[py * 28 + px] = sp.ink * std::clamp(1.0f - (d - half) / soft, 0.0f, 1.0f);
    }
}

}  // namespace digits

/// Deterministic synthetic digit dataset with per-sample geometric and
/// photometric variation plus pixel noise.
inline Dataset synthetic_digits(std::size_t n, std::uint64_t seed, const std::string& split) {
  Dataset ds;
  ds.split = split;
  ds.provenance = "synthetic-digits(seed=" + std::to_string(seed) + ")";
  ds.images = Tensor::zeros({n, 784});
  ds.labels.resize(n);
  Rng rng(seed);
  for (std::size_t i = 0; i < n; ++i) {
    const int digit = static_cast<int>(i % 10);
    ds.labels[i] = digit;
    digits::SampleParams sp;
    sp.rot = rng.uniform(-0.21f, 0.21f);  // about +-12 degrees
    sp.scale = rng.uniform(0.85f, 1.15f);
    sp.tx = rng.uniform(-2.5f, 2.5f);
    sp.ty = rng.uniform(-2.5f, 2.5f);
    sp.thickness = rng.uniform(1.6f, 2.6f);
    sp.ink = rng.uniform(0.75f, 1.0f);
    float* row = ds.images.data.data() + i * 784;
    digits::render(digits::stencil(digit), sp, row);
    for (int j = 0; j < 784; ++j)
      row[j] = std::clamp(row[j] + rng.normal(0.0f, 0.06f), 0.0f, 1.0f);
  }
  return ds;
}

/// Generates train/test IDX files under dir if they are not already present.
inline void ensure_synthetic_idx(const std::string& dir, std::size_t n_train, std::size_t n_test,
                                 std::uint64_t seed) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  const std::string ti = dir + "/train-images-idx3-ubyte", tl = dir + "/train-labels-idx1-ubyte";
  const std::string si = dir + "/t10k-images-idx3-ubyte", sl = dir + "/t10k-labels-idx1-ubyte";
  if (!fs::exists(ti) || !fs::exists(tl))
    write_mnist_idx(synthetic_digits(n_train, seed, "train"), ti, tl);
  if (!fs::exists(si) || !fs::exists(sl))
    write_mnist_idx(synthetic_digits(n_test, seed + 1, "test"), si, sl);
}

/// Loads the IDX pair under root (MNIST naming); root defaults to the
/// VIBTK_DATA_DIR environment variable.
inline Dataset load_split(const std::string& root, const std::string& split) {
  const bool train = split == "train";
  if (!train && split != "test") throw config_error("split must be train or test");
  const std::string prefix = root + (train ? "/train" : "/t10k");
  return load_mnist_idx(prefix + "-images-idx3-ubyte", prefix + "-labels-idx1-ubyte", split);
}

// ---------------------------------------------------------------------------

struct GaussianPair {
  float x, z;
};

/// Correlated standard-normal pairs: z = rho*x + sqrt(1-rho^2)*w. The analytic
/// mutual information is -0.5*ln(1-rho^2).
inline std::vector<GaussianPair> synthetic_gaussian_pairs(float rho, std::size_t n, std::uint64_t seed) {
  if (!(std::abs(rho) < 1.0f)) throw config_error("correlation must satisfy |rho| < 1");
  if (n < 2) throw config_error("need at least 2 pairs");
  std::vector<GaussianPair> out(n);
  Rng rng(seed);
  const float c = std::sqrt(1.0f - rho * rho);
  for (auto& p : out) {
    p.x = rng.normal();
    p.z = rho * p.x + c * rng.normal();
  }
  return out;
}

inline float analytic_gaussian_mi(float rho) { return -0.5f * std::log(1.0f - rho * rho); }

// ---------------------------------------------------------------------------

struct Batch {
  Tensor inputs;  // [b x d]
  std::vector<int> labels;
  std::vector<std::size_t> ids;           // source sample indices (soft-label keys)
  std::vector<std::uint8_t> adversarial;  // per-sample flag, filled by the trainer
};

/// Deterministic epoch shuffle; the final partial batch is dropped.
inline std::vector<Batch> make_batches(const Dataset& ds, std::size_t m, std::uint64_t seed) {
  const std::size_t n = ds.size();
  if (m == 0 || m > n)
    throw config_error("batch size " + std::to_string(m) + " out of range for " + std::to_string(n) +
                       " samples");
  Rng rng(seed);
  const auto perm = rng.permutation(n);
  const std::size_t d = ds.images.cols();
  std::vector<Batch> batches(n / m);
  for (std::size_t b = 0; b < batches.size(); ++b) {
    auto& batch = batches[b];
    batch.inputs = Tensor::zeros({m, d});
    batch.labels.resize(m);
    batch.ids.resize(m);
    batch.adversarial.assign(m, 0);
    for (std::size_t i = 0; i < m; ++i) {
      const std::size_t src = perm[b * m + i];
      batch.ids[i] = src;
      batch.labels[i] = ds.labels[src];
      std::copy_n(ds.images.data.begin() + static_cast<std::ptrdiff_t>(src * d), d,
                  batch.inputs.data.begin() + static_cast<std::ptrdiff_t>(i * d));
    }
  }
  return batches;
}

}  // namespace vibtk::data
