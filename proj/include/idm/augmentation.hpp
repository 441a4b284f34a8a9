#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "idm/autodiff.hpp"
#include "idm/errors.hpp"
#include "idm/ops.hpp"
#include "idm/rng.hpp"

namespace idm {

struct PartitionSpec {
  std::size_t l = 1;
};

/// Splits each image into l x l equal tiles (row-major) and resizes every tile
/// back to the full extent. Output is image-major: [B * l^2, C, H, W] with
/// row b*l^2 + t holding tile t of image b.
template <typename T>
Var<T> partition_expand(const Var<T>& batch, PartitionSpec spec) {
  const Shape& s = batch.shape();
  if (s.size() != 4) throw DimensionError("partition_expand expects (B,C,H,W), got " + to_string(s));
  if (spec.l == 0) throw DimensionError("partition factor must be >= 1");
  if (spec.l == 1) return batch;
  const std::size_t B = s[0], H = s[2], W = s[3], l = spec.l;
  if (H % l || W % l) {
    throw DimensionError("image extent " + std::to_string(H) + "x" + std::to_string(W) +
                         " is not divisible by partition factor " + std::to_string(l));
  }
  const std::size_t th = H / l, tw = W / l;
  std::vector<Var<T>> tiles;
  tiles.reserve(l * l);
  for (std::size_t r = 0; r < l; ++r) {
    for (std::size_t c = 0; c < l; ++c) {
      Var<T> tile = window(batch, static_cast<long>(r * th), static_cast<long>(c * tw), th, tw);
      tiles.push_back(bilinear_resize(tile, H, W));
    }
  }
  // concat gives tile-major order; reorder to image-major.
  Var<T> stacked = concat_batch<T>(tiles);
  const std::size_t n_tiles = l * l;
  std::vector<std::size_t> order(B * n_tiles);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t t = 0; t < n_tiles; ++t) order[b * n_tiles + t] = t * B + b;
  }
  return gather_batch(stacked, std::move(order));
}

enum class AugmentKind { none, flip, scale, shift };

inline const char* to_string(AugmentKind k) {
  switch (k) {
    case AugmentKind::none: return "none";
    case AugmentKind::flip: return "flip";
    case AugmentKind::scale: return "scale";
    case AugmentKind::shift: return "shift";
  }
  return "?";
}

/// One concrete transform. Drawn once and applied identically to every batch
/// that should share it.
struct AugmentParams {
  AugmentKind kind = AugmentKind::none;
  double scale = 1.0;  // in [0.8, 1.2]
  long shift_y = 0;    // pixels, |shift| <= 12.5% of the extent
  long shift_x = 0;

  friend bool operator==(const AugmentParams&, const AugmentParams&) = default;
};

/// Which transform families a draw may pick from.
struct AugmentSet {
  bool flip = true;
  bool scale = true;
  bool shift = true;

  /// Comma-separated subset of "flip,scale,shift"; "none" disables all.
  static AugmentSet parse(const std::string& text) {
    AugmentSet out{false, false, false};
    if (text == "none") return out;
    std::size_t pos = 0;
    while (pos <= text.size()) {
      const std::size_t end = std::min(text.find(',', pos), text.size());
      const std::string item = text.substr(pos, end - pos);
      if (item == "flip") {
        out.flip = true;
      } else if (item == "scale") {
        out.scale = true;
      } else if (item == "shift") {
        out.shift = true;
      } else {
        throw ConfigError("unknown augmentation '" + item + "' (flip, scale, shift or none)");
      }
      pos = end + 1;
    }
    return out;
  }

  std::string str() const {
    std::string out;
    for (auto [on, name] : {std::pair{flip, "flip"}, {scale, "scale"}, {shift, "shift"}}) {
      if (!on) continue;
      if (!out.empty()) out += ',';
      out += name;
    }
    return out.empty() ? "none" : out;
  }

  friend bool operator==(const AugmentSet&, const AugmentSet&) = default;
};

inline AugmentParams sample_augment(std::uint64_t seed, std::size_t height, std::size_t width,
                                    AugmentSet kinds = {}) {
  Rng rng = make_rng(derive_seed(seed, 0x617567));
  AugmentParams p;
  std::vector<int> allowed;
  if (kinds.flip) allowed.push_back(0);
  if (kinds.scale) allowed.push_back(1);
  if (kinds.shift) allowed.push_back(2);
  if (allowed.empty()) return p;
  switch (allowed[uniform_index(rng, allowed.size())]) {
    case 0:
      p.kind = AugmentKind::flip;
      break;
    case 1:
      p.kind = AugmentKind::scale;
      p.scale = uniform(rng, 0.8, 1.2);
      break;
    default: {
      p.kind = AugmentKind::shift;
      const long my = static_cast<long>(std::floor(0.125 * static_cast<double>(height)));
      const long mx = static_cast<long>(std::floor(0.125 * static_cast<double>(width)));
      p.shift_y = static_cast<long>(uniform_index(rng, static_cast<std::size_t>(2 * my + 1))) - my;
      p.shift_x = static_cast<long>(uniform_index(rng, static_cast<std::size_t>(2 * mx + 1))) - mx;
      break;
    }
  }
  return p;
}

template <typename T>
Var<T> apply_augment(const Var<T>& batch, const AugmentParams& p) {
  const Shape& s = batch.shape();
  if (s.size() != 4) throw DimensionError("augment expects (B,C,H,W), got " + to_string(s));
  const std::size_t H = s[2], W = s[3];
  switch (p.kind) {
    case AugmentKind::none:
      return batch;
    case AugmentKind::flip:
      return flip_horizontal(batch);
    case AugmentKind::scale: {
      const auto sh = static_cast<std::size_t>(std::max(1.0, std::round(p.scale * H)));
      const auto sw = static_cast<std::size_t>(std::max(1.0, std::round(p.scale * W)));
      Var<T> resized = (sh == H && sw == W) ? batch : bilinear_resize(batch, sh, sw);
      // center crop (enlarged) or zero pad (shrunk) back to H x W
      const long top = (static_cast<long>(sh) - static_cast<long>(H)) / 2;
      const long left = (static_cast<long>(sw) - static_cast<long>(W)) / 2;
      if (top == 0 && left == 0 && sh == H && sw == W) return resized;
      return window(resized, top, left, H, W);
    }
    case AugmentKind::shift:
      if (p.shift_y == 0 && p.shift_x == 0) return batch;
      // output(y, x) = input(y - dy, x - dx)
      return window(batch, -p.shift_y, -p.shift_x, H, W);
  }
  return batch;
}

/// Siamese augmentation: one transform drawn from the seed, applied with
/// identical parameters to both batches.
template <typename T>
std::pair<Var<T>, Var<T>> dsa_augment(const Var<T>& real_batch, const Var<T>& syn_batch,
                                      std::uint64_t seed, AugmentSet kinds = {}) {
  const Shape& r = real_batch.shape();
  const Shape& s = syn_batch.shape();
  if (r.size() != 4 || s.size() != 4 || r[1] != s[1] || r[2] != s[2] || r[3] != s[3]) {
    throw DimensionError("dsa_augment needs matching channel/spatial extents: " + to_string(r) +
                         " vs " + to_string(s));
  }
  const AugmentParams p = sample_augment(seed, s[2], s[3], kinds);
  return {apply_augment(real_batch, p), apply_augment(syn_batch, p)};
}

}  // namespace idm
