#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "idm/binary_io.hpp"
#include "idm/errors.hpp"
#include "idm/rng.hpp"
#include "idm/tensor.hpp"
#include "json.hpp"

namespace idm {

/// Per-channel affine normalization: stored = (raw - mean) / std.
struct NormStats {
  std::vector<double> mean;
  std::vector<double> std;

  static NormStats identity(std::size_t channels) {
    return {std::vector<double>(channels, 0.0), std::vector<double>(channels, 1.0)};
  }
  std::size_t channels() const { return mean.size(); }

  friend bool operator==(const NormStats&, const NormStats&) = default;
};

inline void to_json(nlohmann::json& j, const NormStats& n) {
  j = nlohmann::json{{"mean", n.mean}, {"std", n.std}};
}
inline void from_json(const nlohmann::json& j, NormStats& n) {
  j.at("mean").get_to(n.mean);
  j.at("std").get_to(n.std);
}

template <typename T>
struct LabeledDataset {
  Tensor<T> images;  // [N, C, H, W]
  std::vector<int> labels;
  std::size_t class_count = 0;
  std::string split = "train";
  NormStats norm;  // the normalization already applied to `images`

  std::size_t size() const { return labels.size(); }
  std::size_t channels() const { return images.dim(1); }
  std::size_t height() const { return images.dim(2); }
  std::size_t width() const { return images.dim(3); }

  void validate() const {
    if (images.rank() != 4) throw DimensionError("dataset images must be (N,C,H,W)");
    if (images.dim(0) != labels.size()) {
      throw FormatError("dataset has " + std::to_string(images.dim(0)) + " images but " +
                        std::to_string(labels.size()) + " labels");
    }
    if (labels.empty()) throw FormatError("dataset is empty");
    for (int y : labels) {
      if (y < 0 || static_cast<std::size_t>(y) >= class_count) {
        throw FormatError("label " + std::to_string(y) + " outside [0," +
                          std::to_string(class_count) + ")");
      }
    }
    if (norm.channels() != channels()) throw FormatError("normalization stats channel mismatch");
    for (std::size_t c = 0; c < norm.channels(); ++c) {
      if (!std::isfinite(norm.mean[c]) || !std::isfinite(norm.std[c]) || norm.std[c] <= 0) {
        throw FormatError("normalization stats must be finite with positive std");
      }
    }
  }

  std::vector<std::vector<std::size_t>> indices_by_class() const {
    std::vector<std::vector<std::size_t>> out(class_count);
    for (std::size_t i = 0; i < labels.size(); ++i) out[labels[i]].push_back(i);
    return out;
  }

  LabeledDataset subset(std::span<const std::size_t> idx) const {
    LabeledDataset out{images.gather0(idx), {}, class_count, split, norm};
    out.labels.reserve(idx.size());
    for (std::size_t i : idx) out.labels.push_back(labels[i]);
    return out;
  }

  /// Samples whose label is in `classes`, original order kept.
  LabeledDataset filter_classes(std::span<const int> classes) const {
    std::vector<char> keep(class_count, 0);
    for (int c : classes) keep.at(static_cast<std::size_t>(c)) = 1;
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (keep[labels[i]]) idx.push_back(i);
    }
    return subset(idx);
  }

  template <typename U>
  LabeledDataset<U> cast() const {
    return {images.template cast<U>(), labels, class_count, split, norm};
  }
};

/// Mean/std per channel of raw-valued images.
template <typename T>
NormStats compute_norm_stats(const LabeledDataset<T>& ds) {
  const std::size_t N = ds.size(), C = ds.channels(), hw = ds.height() * ds.width();
  NormStats s{std::vector<double>(C, 0.0), std::vector<double>(C, 0.0)};
  for (std::size_t c = 0; c < C; ++c) {
    double sum = 0, sq = 0;
    for (std::size_t n = 0; n < N; ++n) {
      const T* p = ds.images.data() + (n * C + c) * hw;
      for (std::size_t i = 0; i < hw; ++i) {
        sum += p[i];
        sq += static_cast<double>(p[i]) * p[i];
      }
    }
    const double cnt = static_cast<double>(N * hw);
    s.mean[c] = sum / cnt;
    s.std[c] = std::sqrt(std::max(sq / cnt - s.mean[c] * s.mean[c], 1e-12));
  }
  return s;
}

template <typename T>
void apply_affine(Tensor<T>& images, std::span<const double> scale, std::span<const double> shift) {
  const std::size_t N = images.dim(0), C = images.dim(1), hw = images.dim(2) * images.dim(3);
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t c = 0; c < C; ++c) {
      T* p = images.data() + (n * C + c) * hw;
      for (std::size_t i = 0; i < hw; ++i) p[i] = static_cast<T>(p[i] * scale[c] + shift[c]);
    }
  }
}

/// Re-expresses a raw dataset (identity stats) under `stats`.
template <typename T>
LabeledDataset<T> normalized(LabeledDataset<T> ds, const NormStats& stats) {
  if (ds.norm != NormStats::identity(ds.channels())) {
    throw StateError("dataset is already normalized");
  }
  std::vector<double> scale(stats.channels()), shift(stats.channels());
  for (std::size_t c = 0; c < stats.channels(); ++c) {
    scale[c] = 1.0 / stats.std[c];
    shift[c] = -stats.mean[c] / stats.std[c];
  }
  apply_affine(ds.images, scale, shift);
  ds.norm = stats;
  return ds;
}

/// Maps normalized images back to raw [0,1]-scale values.
template <typename T>
Tensor<T> denormalized(Tensor<T> images, const NormStats& stats) {
  apply_affine(images, std::span<const double>(stats.std), std::span<const double>(stats.mean));
  return images;
}

/// Raw pixel range [0,1] expressed in normalized units, per channel.
inline std::pair<std::vector<double>, std::vector<double>> normalized_range(const NormStats& s) {
  std::vector<double> lo(s.channels()), hi(s.channels());
  for (std::size_t c = 0; c < s.channels(); ++c) {
    lo[c] = (0.0 - s.mean[c]) / s.std[c];
    hi[c] = (1.0 - s.mean[c]) / s.std[c];
  }
  return {lo, hi};
}

/// Per-class split: `fraction` of each class (at least one sample when the
/// class has two or more) goes to the second part.
template <typename T>
std::pair<LabeledDataset<T>, LabeledDataset<T>> stratified_split(const LabeledDataset<T>& ds,
                                                                  double fraction,
                                                                  std::uint64_t seed) {
  Rng rng = make_rng(derive_seed(seed, 0x73706c));
  std::vector<std::size_t> keep, held;
  for (auto& idx : ds.indices_by_class()) {
    if (idx.empty()) continue;
    shuffle(idx.begin(), idx.end(), rng);
    std::size_t n_held = static_cast<std::size_t>(std::round(fraction * static_cast<double>(idx.size())));
    if (fraction > 0 && n_held == 0 && idx.size() >= 2) n_held = 1;
    n_held = std::min(n_held, idx.size() - 1);
    held.insert(held.end(), idx.begin(), idx.begin() + static_cast<long>(n_held));
    keep.insert(keep.end(), idx.begin() + static_cast<long>(n_held), idx.end());
  }
  std::sort(keep.begin(), keep.end());
  std::sort(held.begin(), held.end());
  auto a = ds.subset(keep);
  auto b = ds.subset(held);
  b.split = "val";
  return {std::move(a), std::move(b)};
}

// ---------------------------------------------------------------------------
// IDX (MNIST-style) files

namespace detail {

inline std::vector<std::uint32_t> parse_idx_header(const std::vector<unsigned char>& b,
                                                   std::uint32_t magic, const std::string& what) {
  if (b.size() < 4) throw FormatError(what + ": file too short for IDX magic");
  const std::uint32_t m = io::load_u32_be(b.data());
  if (m != magic) {
    throw FormatError(what + ": bad IDX magic 0x" + io::hex64(m).substr(8) + ", expected 0x" +
                      io::hex64(magic).substr(8));
  }
  const std::size_t ndim = magic & 0xff;
  if (b.size() < 4 + 4 * ndim) throw FormatError(what + ": truncated IDX header");
  std::vector<std::uint32_t> dims(ndim);
  for (std::size_t i = 0; i < ndim; ++i) dims[i] = io::load_u32_be(b.data() + 4 + 4 * i);
  return dims;
}

}  // namespace detail

/// Parses big-endian IDX image (0x00000803) and label (0x00000801) files;
/// pixels scaled to [0,1].
template <typename T = float>
LabeledDataset<T> load_idx(const std::filesystem::path& image_path,
                           const std::filesystem::path& label_path) {
  const auto ib = io::read_bytes(image_path);
  const auto lb = io::read_bytes(label_path);
  const auto idims = detail::parse_idx_header(ib, 0x00000803, image_path.string());
  const auto ldims = detail::parse_idx_header(lb, 0x00000801, label_path.string());
  const std::size_t n = idims[0], rows = idims[1], cols = idims[2];
  if (ldims[0] != n) {
    throw FormatError("count mismatch: " + std::to_string(n) + " images vs " +
                      std::to_string(ldims[0]) + " labels");
  }
  const std::size_t ioff = 16, loff = 8;
  if (ib.size() != ioff + n * rows * cols) throw FormatError("IDX image payload truncated or oversized");
  if (lb.size() != loff + n) throw FormatError("IDX label payload truncated or oversized");
  LabeledDataset<T> ds;
  ds.images = Tensor<T>({n, 1, rows, cols});
  for (std::size_t i = 0; i < n * rows * cols; ++i) {
    ds.images[i] = static_cast<T>(ib[ioff + i]) / T(255);
  }
  ds.labels.resize(n);
  int mx = 0;
  for (std::size_t i = 0; i < n; ++i) {
    ds.labels[i] = lb[loff + i];
    mx = std::max(mx, ds.labels[i]);
  }
  ds.class_count = static_cast<std::size_t>(mx) + 1;
  ds.norm = NormStats::identity(1);
  ds.validate();
  return ds;
}

/// CIFAR binary batches: 3073-byte records (label byte, then R, G, B planes
/// of 32x32), pixels scaled to [0,1].
template <typename T = float>
LabeledDataset<T> load_cifar_binary(std::span<const std::filesystem::path> paths) {
  constexpr std::size_t kRecord = 3073, kPixels = 3072;
  std::vector<unsigned char> all;
  for (const auto& p : paths) {
    auto b = io::read_bytes(p);
    if (b.empty() || b.size() % kRecord != 0) {
      throw FormatError(p.string() + ": length " + std::to_string(b.size()) +
                        " is not a positive multiple of 3073");
    }
    all.insert(all.end(), b.begin(), b.end());
  }
  if (all.empty()) throw FormatError("no CIFAR records");
  const std::size_t n = all.size() / kRecord;
  LabeledDataset<T> ds;
  ds.images = Tensor<T>({n, 3, 32, 32});
  ds.labels.resize(n);
  int mx = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const unsigned char* rec = all.data() + i * kRecord;
    ds.labels[i] = rec[0];
    mx = std::max(mx, ds.labels[i]);
    T* dst = ds.images.data() + i * kPixels;
    for (std::size_t k = 0; k < kPixels; ++k) dst[k] = static_cast<T>(rec[1 + k]) / T(255);
  }
  ds.class_count = static_cast<std::size_t>(mx) + 1;
  ds.norm = NormStats::identity(3);
  ds.validate();
  return ds;
}

// ---------------------------------------------------------------------------
// Deterministic toy generators

struct ToySpec {
  std::size_t classes = 10;
  std::size_t per_class = 500;
  std::size_t hw = 16;
  std::string kind = "blobs";  // "blobs" | "digits16"
  std::uint64_t seed = 0;
};

namespace detail {

inline std::array<double, 3> hue_to_rgb(double h) {
  const double r = std::clamp(std::abs(h * 6.0 - 3.0) - 1.0, 0.0, 1.0);
  const double g = std::clamp(2.0 - std::abs(h * 6.0 - 2.0), 0.0, 1.0);
  const double b = std::clamp(2.0 - std::abs(h * 6.0 - 4.0), 0.0, 1.0);
  return {r, g, b};
}

// Class-colored Gaussian blob at a class-specific location over a cluttered,
// noisy background.
template <typename T>
void render_blob(T* img, std::size_t hw, std::size_t cls, std::size_t classes, Rng& rng) {
  const double n = static_cast<double>(hw);
  const double ring = static_cast<double>(cls) / static_cast<double>(classes);
  const double ang = 6.283185307179586 * ring;
  // class anchor: evenly spaced on a ring around the center
  const double cy = n * (0.5 + 0.3 * std::sin(ang)) + normal(rng) * 0.035 * n;
  const double cx = n * (0.5 + 0.3 * std::cos(ang)) + normal(rng) * 0.035 * n;
  const double sigma = n * uniform(rng, 0.08, 0.15);
  auto col = hue_to_rgb(std::fmod(ring + normal(rng) * 0.02 + 1.0, 1.0));
  const double amp = uniform(rng, 0.6, 0.95);

  std::array<double, 3> bg{};
  const double base = uniform(rng, 0.15, 0.55);
  for (auto& v : bg) v = std::clamp(base + normal(rng) * 0.08, 0.0, 1.0);

  // two distractor blobs of random color and place
  struct Blob { double y, x, s, a; std::array<double, 3> c; };
  std::array<Blob, 2> distract{};
  for (auto& d : distract) {
    d = {uniform(rng, 0, n), uniform(rng, 0, n), n * uniform(rng, 0.06, 0.14),
         uniform(rng, 0.1, 0.3), hue_to_rgb(uniform01(rng))};
  }

  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t y = 0; y < hw; ++y) {
      for (std::size_t x = 0; x < hw; ++x) {
        const double py = static_cast<double>(y) + 0.5, px = static_cast<double>(x) + 0.5;
        double v = bg[c];
        const double d2 = (py - cy) * (py - cy) + (px - cx) * (px - cx);
        const double w = amp * std::exp(-d2 / (2 * sigma * sigma));
        v = v * (1 - w) + col[c] * w;
        for (const auto& d : distract) {
          const double e2 = (py - d.y) * (py - d.y) + (px - d.x) * (px - d.x);
          const double u = d.a * std::exp(-e2 / (2 * d.s * d.s));
          v = v * (1 - u) + d.c[c] * u;
        }
        v += normal(rng) * 0.3;
        img[(c * hw + y) * hw + x] = static_cast<T>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
}

// 5x7 bitmap digits, row-major, '#' = ink.
inline const std::array<std::array<const char*, 7>, 10>& digit_font() {
  static const std::array<std::array<const char*, 7>, 10> font{{
      {".###.", "#...#", "#..##", "#.#.#", "##..#", "#...#", ".###."},
      {"..#..", ".##..", "..#..", "..#..", "..#..", "..#..", ".###."},
      {".###.", "#...#", "....#", "...#.", "..#..", ".#...", "#####"},
      {"#####", "...#.", "..#..", "...#.", "....#", "#...#", ".###."},
      {"...#.", "..##.", ".#.#.", "#..#.", "#####", "...#.", "...#."},
      {"#####", "#....", "####.", "....#", "....#", "#...#", ".###."},
      {"..##.", ".#...", "#....", "####.", "#...#", "#...#", ".###."},
      {"#####", "....#", "...#.", "..#..", ".#...", ".#...", ".#..."},
      {".###.", "#...#", "#...#", ".###.", "#...#", "#...#", ".###."},
      {".###.", "#...#", "#...#", ".####", "....#", "...#.", ".##.."},
  }};
  return font;
}

// Glyph rendered under a random affine map at 4x resolution, box-downsampled,
// then blurred by noise.
template <typename T>
void render_digit(T* img, std::size_t hw, std::size_t digit, Rng& rng) {
  const auto& glyph = digit_font()[digit];
  const std::size_t up = 4, big = hw * up;
  const double n = static_cast<double>(big);
  const double scale = uniform(rng, 0.55, 0.8) * n / 7.0;  // pixels per font cell
  const double rot = normal(rng) * 0.2;
  const double shear = normal(rng) * 0.15;
  const double cy = n * 0.5 + normal(rng) * 0.06 * n;
  const double cx = n * 0.5 + normal(rng) * 0.06 * n;
  const double thick = uniform(rng, 0.35, 0.6);  // half stroke width in font cells
  const double cr = std::cos(rot), sr = std::sin(rot);
  std::vector<double> hi(big * big, 0.0);
  for (std::size_t y = 0; y < big; ++y) {
    for (std::size_t x = 0; x < big; ++x) {
      const double dy = (static_cast<double>(y) + 0.5 - cy) / scale;
      const double dx = (static_cast<double>(x) + 0.5 - cx) / scale;
      // inverse rotate + shear into font coordinates (cells), origin at glyph center
      const double fx = cr * dx + sr * dy - shear * dy + 2.5;
      const double fy = -sr * dx + cr * dy + 3.5;
      double ink = 0;
      const long gx = static_cast<long>(std::floor(fx)), gy = static_cast<long>(std::floor(fy));
      for (long yy = gy - 1; yy <= gy + 1 && ink < 1; ++yy) {
        for (long xx = gx - 1; xx <= gx + 1; ++xx) {
          if (yy < 0 || yy >= 7 || xx < 0 || xx >= 5 || glyph[yy][xx] != '#') continue;
          const double ddx = std::max({0.0, std::abs(fx - (xx + 0.5)) - 0.5 + thick});
          const double ddy = std::max({0.0, std::abs(fy - (yy + 0.5)) - 0.5 + thick});
          if (ddx * ddx + ddy * ddy <= thick * thick) {
            ink = 1;
            break;
          }
        }
      }
      hi[y * big + x] = ink;
    }
  }
  const double fg = uniform(rng, 0.7, 1.0), bgv = uniform(rng, 0.0, 0.3);
  for (std::size_t y = 0; y < hw; ++y) {
    for (std::size_t x = 0; x < hw; ++x) {
      double s = 0;
      for (std::size_t a = 0; a < up; ++a) {
        for (std::size_t b = 0; b < up; ++b) s += hi[(y * up + a) * big + x * up + b];
      }
      s /= static_cast<double>(up * up);
      const double v = bgv + (fg - bgv) * s + normal(rng) * 0.15;
      img[y * hw + x] = static_cast<T>(std::clamp(v, 0.0, 1.0));
    }
  }
}

}  // namespace detail

/// Deterministic synthetic dataset, class-major order, raw [0,1] pixels.
template <typename T = float>
LabeledDataset<T> make_toy(const ToySpec& spec) {
  if (spec.classes == 0 || spec.per_class == 0 || spec.hw == 0) {
    throw ConfigError("toy spec needs positive classes, per_class and hw");
  }
  std::size_t channels;
  if (spec.kind == "blobs") {
    channels = 3;
  } else if (spec.kind == "digits16") {
    channels = 1;
    if (spec.classes > 10) throw ConfigError("digits16 supports at most 10 classes");
  } else {
    throw ConfigError("unknown toy kind '" + spec.kind + "' (blobs | digits16)");
  }
  const std::size_t n = spec.classes * spec.per_class;
  const std::size_t plane = channels * spec.hw * spec.hw;
  LabeledDataset<T> ds;
  ds.images = Tensor<T>({n, channels, spec.hw, spec.hw});
  ds.labels.resize(n);
  ds.class_count = spec.classes;
  ds.norm = NormStats::identity(channels);
  for (std::size_t c = 0; c < spec.classes; ++c) {
    for (std::size_t k = 0; k < spec.per_class; ++k) {
      const std::size_t i = c * spec.per_class + k;
      Rng rng = make_rng(derive_seed(spec.seed, c, k));
      ds.labels[i] = static_cast<int>(c);
      T* img = ds.images.data() + i * plane;
      if (channels == 3) {
        detail::render_blob(img, spec.hw, c, spec.classes, rng);
      } else {
        detail::render_digit(img, spec.hw, c, rng);
      }
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// PPM grids

struct PpmImage {
  std::size_t width = 0, height = 0;
  std::vector<unsigned char> rgb;  // row-major, 3 bytes per pixel
};

inline unsigned char to_byte(double v) {
  return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

/// Binary PPM (P6): `rows` rows of images (one per class, class-major input),
/// denormalized to 8 bit. Single-channel images are replicated to gray.
template <typename T>
PpmImage render_grid(const Tensor<T>& images, std::size_t rows, const NormStats& stats) {
  if (images.rank() != 4 || images.dim(0) == 0) throw DimensionError("grid needs (N,C,H,W), N>0");
  const std::size_t N = images.dim(0), C = images.dim(1), H = images.dim(2), W = images.dim(3);
  if (rows == 0 || N % rows) throw DimensionError("image count not divisible by grid rows");
  if (C != 1 && C != 3) throw DimensionError("grid supports 1 or 3 channels");
  const std::size_t cols = N / rows;
  const Tensor<T> raw = denormalized(images, stats);
  PpmImage img{cols * W, rows * H, {}};
  img.rgb.assign(img.width * img.height * 3, 0);
  for (std::size_t n = 0; n < N; ++n) {
    const std::size_t gy = n / cols, gx = n % cols;
    for (std::size_t y = 0; y < H; ++y) {
      for (std::size_t x = 0; x < W; ++x) {
        const std::size_t o = ((gy * H + y) * img.width + gx * W + x) * 3;
        for (std::size_t k = 0; k < 3; ++k) {
          const std::size_t c = C == 1 ? 0 : k;
          img.rgb[o + k] = to_byte(raw[((n * C + c) * H + y) * W + x]);
        }
      }
    }
  }
  return img;
}

inline std::vector<unsigned char> encode_ppm(const PpmImage& img) {
  const std::string header =
      "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  std::vector<unsigned char> out(header.begin(), header.end());
  out.insert(out.end(), img.rgb.begin(), img.rgb.end());
  return out;
}

inline PpmImage decode_ppm(std::span<const unsigned char> b) {
  std::size_t pos = 0;
  auto token = [&]() {
    while (pos < b.size() && std::isspace(b[pos])) ++pos;
    std::string t;
    while (pos < b.size() && !std::isspace(b[pos])) t.push_back(static_cast<char>(b[pos++]));
    return t;
  };
  if (token() != "P6") throw FormatError("not a binary PPM");
  PpmImage img;
  try {
    img.width = std::stoul(token());
    img.height = std::stoul(token());
    if (std::stoul(token()) != 255) throw FormatError("PPM maxval must be 255");
  } catch (const std::logic_error&) {
    throw FormatError("malformed PPM header");
  }
  ++pos;  // single whitespace after maxval
  const std::size_t need = img.width * img.height * 3;
  if (b.size() - std::min(pos, b.size()) != need) throw FormatError("PPM payload size mismatch");
  img.rgb.assign(b.begin() + static_cast<long>(pos), b.end());
  return img;
}

template <typename T>
void export_image_grid(const Tensor<T>& images, std::size_t rows, const NormStats& stats,
                       const std::filesystem::path& path) {
  io::write_bytes(path, encode_ppm(render_grid(images, rows, stats)));
}

inline PpmImage read_ppm(const std::filesystem::path& path) {
  const auto b = io::read_bytes(path);
  return decode_ppm(b);
}

}  // namespace idm
