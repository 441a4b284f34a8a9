#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "idm/autodiff.hpp"
#include "idm/errors.hpp"
#include "idm/tensor.hpp"

namespace idm {

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;
template <typename T>
using MapVec = Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>;
template <typename T>
using CMapVec = Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>;

inline void require_rank(const Shape& s, std::size_t rank, const char* op) {
  if (s.size() != rank) {
    throw DimensionError(std::string(op) + " expects rank " + std::to_string(rank) +
                         ", got " + to_string(s));
  }
}

inline void require_same(const Shape& a, const Shape& b, const char* op) {
  if (a != b) {
    throw DimensionError(std::string(op) + " shape mismatch " + to_string(a) + " vs " +
                         to_string(b));
  }
}

template <typename T>
MapVec<T> as_array(Tensor<T>& t) {
  return MapVec<T>(t.data(), static_cast<Eigen::Index>(t.size()));
}

template <typename T>
CMapVec<T> as_array(const Tensor<T>& t) {
  return CMapVec<T>(t.data(), static_cast<Eigen::Index>(t.size()));
}

template <typename T>
void add_into(Tensor<T>& dst, const Tensor<T>& src) {
  as_array(dst) += as_array(src);
}

// cols[(c*9 + ky*3 + kx), b*H*W + y*W + x] = in[b, c, y+ky-1, x+kx-1], zero padded.
template <typename T>
void im2col3x3(const T* in, std::size_t B, std::size_t C, std::size_t H, std::size_t W,
               T* cols) {
  const std::size_t hw = H * W;
  const std::size_t ncols = B * hw;
  for (std::size_t c = 0; c < C; ++c) {
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        T* row = cols + (c * 9 + ky * 3 + kx) * ncols;
        // valid destination columns: x in [x0, x1)
        const std::size_t x0 = kx == 0 ? 1 : 0;
        const std::size_t x1 = kx == 2 ? W - 1 : W;
        for (std::size_t b = 0; b < B; ++b) {
          const T* plane = in + (b * C + c) * hw;
          T* dst = row + b * hw;
          for (std::size_t y = 0; y < H; ++y) {
            const long sy = static_cast<long>(y) + ky - 1;
            T* d = dst + y * W;
            if (sy < 0 || sy >= static_cast<long>(H)) {
              std::fill(d, d + W, T(0));
              continue;
            }
            const T* s = plane + sy * W + (kx - 1);
            if (x0) d[0] = T(0);
            std::copy(s + x0, s + x1, d + x0);
            if (x1 < W) d[W - 1] = T(0);
          }
        }
      }
    }
  }
}

// Adjoint of im2col3x3: scatters column gradients back into the image gradient.
template <typename T>
void col2im3x3_add(const T* cols, std::size_t B, std::size_t C, std::size_t H,
                   std::size_t W, T* out) {
  const std::size_t hw = H * W;
  const std::size_t ncols = B * hw;
  for (std::size_t c = 0; c < C; ++c) {
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        const T* row = cols + (c * 9 + ky * 3 + kx) * ncols;
        const std::size_t x0 = kx == 0 ? 1 : 0;
        const std::size_t x1 = kx == 2 ? W - 1 : W;
        for (std::size_t b = 0; b < B; ++b) {
          T* plane = out + (b * C + c) * hw;
          const T* src = row + b * hw;
          for (std::size_t y = 0; y < H; ++y) {
            const long sy = static_cast<long>(y) + ky - 1;
            if (sy < 0 || sy >= static_cast<long>(H)) continue;
            T* d = plane + sy * W + (kx - 1);
            const T* s = src + y * W;
            for (std::size_t x = x0; x < x1; ++x) d[x] += s[x];
          }
        }
      }
    }
  }
}

struct Interp {
  std::vector<std::size_t> lo, hi;
  std::vector<double> w_hi;  // weight of hi; lo gets 1 - w_hi
};

// Half-pixel (align_corners = false) source coordinates, clamped at the border.
inline Interp interp_axis(std::size_t in, std::size_t out) {
  Interp r;
  r.lo.resize(out);
  r.hi.resize(out);
  r.w_hi.resize(out);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t i = 0; i < out; ++i) {
    double src = (static_cast<double>(i) + 0.5) * scale - 0.5;
    if (src < 0) src = 0;
    std::size_t lo = static_cast<std::size_t>(src);
    if (lo > in - 1) lo = in - 1;
    const std::size_t hi = std::min(lo + 1, in - 1);
    r.lo[i] = lo;
    r.hi[i] = hi;
    r.w_hi[i] = src - static_cast<double>(lo);
  }
  return r;
}

}  // namespace detail

/// 3x3 cross-correlation, stride 1, zero padding 1.
/// input [B,C,H,W], kernels [K,C,3,3], bias [K] -> [B,K,H,W].
template <typename T>
Var<T> conv2d(const Var<T>& input, const Var<T>& kernels, const Var<T>& bias) {
  using namespace detail;
  const Shape& xs = input.shape();
  const Shape& ks = kernels.shape();
  require_rank(xs, 4, "conv2d input");
  require_rank(ks, 4, "conv2d kernels");
  if (ks[2] != 3 || ks[3] != 3) throw DimensionError("conv2d supports 3x3 kernels only");
  if (ks[1] != xs[1]) {
    throw DimensionError("conv2d channel mismatch: input " + to_string(xs) + ", kernels " +
                         to_string(ks));
  }
  if (bias.shape() != Shape{ks[0]}) {
    throw DimensionError("conv2d bias must be (" + std::to_string(ks[0]) + ")");
  }
  const std::size_t B = xs[0], C = xs[1], H = xs[2], W = xs[3], K = ks[0];
  const std::size_t hw = H * W, ncols = B * hw, kdim = C * 9;

  auto cols = std::make_shared<std::vector<T>>(kdim * ncols);
  im2col3x3(input.value().data(), B, C, H, W, cols->data());
  RowMat<T> prod(K, ncols);
  prod.noalias() = CMapMat<T>(kernels.value().data(), K, kdim) *
                   CMapMat<T>(cols->data(), kdim, ncols);
  // the weight gradient reuses the columns; drop them when nobody needs it
  if (!kernels.requires_grad()) cols.reset();

  Tensor<T> out({B, K, H, W});
  const T* bv = bias.value().data();
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t k = 0; k < K; ++k) {
      const T* src = prod.data() + k * ncols + b * hw;
      T* dst = out.data() + (b * K + k) * hw;
      for (std::size_t i = 0; i < hw; ++i) dst[i] = src[i] + bv[k];
    }
  }

  return input.tape().record(
      std::move(out), {input, kernels, bias},
      [input, kernels, bias, B, C, H, W, K, cols](Tape<T>& tape, const Tensor<T>& g) {
        const std::size_t hw = H * W, ncols = B * hw, kdim = C * 9;
        RowMat<T> gmat(K, ncols);
        for (std::size_t b = 0; b < B; ++b) {
          for (std::size_t k = 0; k < K; ++k) {
            const T* src = g.data() + (b * K + k) * hw;
            std::copy(src, src + hw, gmat.data() + k * ncols + b * hw);
          }
        }
        if (Tensor<T>* gb = tape.grad_sink(bias)) {
          for (std::size_t k = 0; k < K; ++k) (*gb)[k] += gmat.row(k).sum();
        }
        if (Tensor<T>* gk = tape.grad_sink(kernels)) {
          MapMat<T>(gk->data(), K, kdim).noalias() +=
              gmat * CMapMat<T>(cols->data(), kdim, ncols).transpose();
        }
        if (Tensor<T>* gx = tape.grad_sink(input)) {
          RowMat<T> gcols(kdim, ncols);
          gcols.noalias() = CMapMat<T>(kernels.value().data(), K, kdim).transpose() * gmat;
          col2im3x3_add(gcols.data(), B, C, H, W, gx->data());
        }
      });
}

/// Per-(sample, channel) normalization over the spatial extent followed by a
/// per-channel affine map.
template <typename T>
Var<T> instance_norm2d(const Var<T>& input, const Var<T>& gamma, const Var<T>& beta,
                       T eps = T(1e-5)) {
  using namespace detail;
  const Shape& xs = input.shape();
  require_rank(xs, 4, "instance_norm2d");
  const std::size_t B = xs[0], C = xs[1], hw = xs[2] * xs[3];
  if (hw == 0) throw DimensionError("instance_norm2d needs H*W >= 1");
  if (gamma.shape() != Shape{C} || beta.shape() != Shape{C}) {
    throw DimensionError("instance_norm2d affine parameters must be (" + std::to_string(C) +
                         ")");
  }
  if (!(eps > T(0))) throw DimensionError("instance_norm2d eps must be positive");

  auto inv_std = std::make_shared<std::vector<T>>(B * C);
  auto xhat = std::make_shared<std::vector<T>>(input.value().size());
  Tensor<T> out(xs);
  const T* x = input.value().data();
  const T* gm = gamma.value().data();
  const T* bt = beta.value().data();
  const auto n = static_cast<Eigen::Index>(hw);
  for (std::size_t bc = 0; bc < B * C; ++bc) {
    CMapVec<T> p(x + bc * hw, n);
    const T mean = p.mean();
    const T var = (p - mean).square().mean();
    const T is = T(1) / std::sqrt(var + eps);
    (*inv_std)[bc] = is;
    const std::size_t c = bc % C;
    MapVec<T> xh(xhat->data() + bc * hw, n);
    xh = (p - mean) * is;
    MapVec<T>(out.data() + bc * hw, n) = gm[c] * xh + bt[c];
  }

  return input.tape().record(
      std::move(out), {input, gamma, beta},
      [input, gamma, beta, B, C, hw, inv_std, xhat](Tape<T>& tape, const Tensor<T>& g) {
        Tensor<T>* gx = tape.grad_sink(input);
        Tensor<T>* gg = tape.grad_sink(gamma);
        Tensor<T>* gb = tape.grad_sink(beta);
        const T* gm = gamma.value().data();
        const T n = static_cast<T>(hw);
        const auto len = static_cast<Eigen::Index>(hw);
        for (std::size_t bc = 0; bc < B * C; ++bc) {
          const std::size_t c = bc % C;
          CMapVec<T> go(g.data() + bc * hw, len);
          CMapVec<T> xh(xhat->data() + bc * hw, len);
          const T sum_g = go.sum();
          const T sum_gx = (go * xh).sum();
          if (gg) (*gg)[c] += sum_gx;
          if (gb) (*gb)[c] += sum_g;
          if (gx) {
            // dx = gamma * inv_std / n * (n*g - sum(g) - xhat*sum(g*xhat))
            const T k = gm[c] * (*inv_std)[bc] / n;
            MapVec<T>(gx->data() + bc * hw, len) += k * (n * go - sum_g - xh * sum_gx);
          }
        }
      });
}

/// max(0, x); the subgradient at exactly 0 is 0.
template <typename T>
Var<T> relu(const Var<T>& input) {
  using detail::as_array;
  Tensor<T> out(input.shape());
  as_array(out) = as_array(input.value()).max(T(0));
  return input.tape().record(std::move(out), {input},
                             [input](Tape<T>& tape, const Tensor<T>& g) {
                               Tensor<T>* gx = tape.grad_sink(input);
                               as_array(*gx) += (as_array(input.value()) > T(0))
                                                    .select(as_array(g), T(0));
                             });
}

/// Non-overlapping 2x2 mean pooling; H and W must be even.
template <typename T>
Var<T> avg_pool2d(const Var<T>& input) {
  const Shape& xs = input.shape();
  detail::require_rank(xs, 4, "avg_pool2d");
  const std::size_t B = xs[0], C = xs[1], H = xs[2], W = xs[3];
  if (H % 2 || W % 2) {
    throw DimensionError("avg_pool2d needs even spatial extents, got " + to_string(xs));
  }
  const std::size_t oh = H / 2, ow = W / 2;
  Tensor<T> out({B, C, oh, ow});
  const T* x = input.value().data();
  for (std::size_t p = 0; p < B * C; ++p) {
    const T* src = x + p * H * W;
    T* dst = out.data() + p * oh * ow;
    for (std::size_t y = 0; y < oh; ++y) {
      const T* r0 = src + 2 * y * W;
      const T* r1 = r0 + W;
      for (std::size_t i = 0; i < ow; ++i) {
        dst[y * ow + i] = T(0.25) * (r0[2 * i] + r0[2 * i + 1] + r1[2 * i] + r1[2 * i + 1]);
      }
    }
  }
  return input.tape().record(
      std::move(out), {input}, [input, B, C, H, W](Tape<T>& tape, const Tensor<T>& g) {
        Tensor<T>* gx = tape.grad_sink(input);
        const std::size_t oh = H / 2, ow = W / 2;
        for (std::size_t p = 0; p < B * C; ++p) {
          const T* go = g.data() + p * oh * ow;
          T* d = gx->data() + p * H * W;
          for (std::size_t y = 0; y < oh; ++y) {
            for (std::size_t i = 0; i < ow; ++i) {
              const T v = T(0.25) * go[y * ow + i];
              d[2 * y * W + 2 * i] += v;
              d[2 * y * W + 2 * i + 1] += v;
              d[(2 * y + 1) * W + 2 * i] += v;
              d[(2 * y + 1) * W + 2 * i + 1] += v;
            }
          }
        }
      });
}

/// input [B,F] x weight [F,O] + bias [O].
template <typename T>
Var<T> linear(const Var<T>& input, const Var<T>& weight, const Var<T>& bias) {
  using namespace detail;
  const Shape& xs = input.shape();
  const Shape& ws = weight.shape();
  require_rank(xs, 2, "linear input");
  require_rank(ws, 2, "linear weight");
  if (xs[1] != ws[0] || bias.shape() != Shape{ws[1]}) {
    throw DimensionError("linear shape mismatch: input " + to_string(xs) + ", weight " +
                         to_string(ws) + ", bias " + to_string(bias.shape()));
  }
  const std::size_t B = xs[0], F = xs[1], O = ws[1];
  Tensor<T> out({B, O});
  MapMat<T> om(out.data(), B, O);
  om.noalias() = CMapMat<T>(input.value().data(), B, F) * CMapMat<T>(weight.value().data(), F, O);
  const T* bv = bias.value().data();
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t o = 0; o < O; ++o) om(b, o) += bv[o];
  }
  return input.tape().record(
      std::move(out), {input, weight, bias},
      [input, weight, bias, B, F, O](Tape<T>& tape, const Tensor<T>& g) {
        CMapMat<T> gm(g.data(), B, O);
        if (Tensor<T>* gx = tape.grad_sink(input)) {
          MapMat<T>(gx->data(), B, F).noalias() +=
              gm * CMapMat<T>(weight.value().data(), F, O).transpose();
        }
        if (Tensor<T>* gw = tape.grad_sink(weight)) {
          MapMat<T>(gw->data(), F, O).noalias() +=
              CMapMat<T>(input.value().data(), B, F).transpose() * gm;
        }
        if (Tensor<T>* gb = tape.grad_sink(bias)) {
          for (std::size_t o = 0; o < O; ++o) (*gb)[o] += gm.col(o).sum();
        }
      });
}

/// Mean over the batch of -log softmax(logits)[label], max-shifted.
template <typename T>
Var<T> softmax_cross_entropy(const Var<T>& logits, std::span<const int> labels) {
  const Shape& ls = logits.shape();
  detail::require_rank(ls, 2, "softmax_cross_entropy");
  const std::size_t B = ls[0], C = ls[1];
  if (labels.size() != B) {
    throw DimensionError("softmax_cross_entropy: " + std::to_string(labels.size()) +
                         " labels for batch of " + std::to_string(B));
  }
  if (B == 0) throw DimensionError("softmax_cross_entropy on an empty batch");
  auto probs = std::make_shared<std::vector<T>>(B * C);
  auto lab = std::make_shared<std::vector<int>>(labels.begin(), labels.end());
  const T* z = logits.value().data();
  T loss = 0;
  for (std::size_t b = 0; b < B; ++b) {
    const int y = labels[b];
    if (y < 0 || static_cast<std::size_t>(y) >= C) {
      throw IndexError("label " + std::to_string(y) + " outside [0," + std::to_string(C) + ")");
    }
    const T* row = z + b * C;
    const T mx = *std::max_element(row, row + C);
    T sum = 0;
    for (std::size_t c = 0; c < C; ++c) sum += std::exp(row[c] - mx);
    const T lse = std::log(sum);
    for (std::size_t c = 0; c < C; ++c) (*probs)[b * C + c] = std::exp(row[c] - mx - lse);
    loss += lse - (row[y] - mx);
  }
  loss /= static_cast<T>(B);
  return logits.tape().record(Tensor<T>::scalar(loss), {logits},
                              [logits, probs, lab, B, C](Tape<T>& tape, const Tensor<T>& g) {
                                Tensor<T>* gz = tape.grad_sink(logits);
                                const T s = g[0] / static_cast<T>(B);
                                for (std::size_t b = 0; b < B; ++b) {
                                  for (std::size_t c = 0; c < C; ++c) {
                                    T p = (*probs)[b * C + c];
                                    if (static_cast<int>(c) == (*lab)[b]) p -= T(1);
                                    (*gz)[b * C + c] += s * p;
                                  }
                                }
                              });
}

/// Bilinear resampling with half-pixel centers (align_corners = false).
template <typename T>
Var<T> bilinear_resize(const Var<T>& input, std::size_t out_h, std::size_t out_w) {
  const Shape& xs = input.shape();
  detail::require_rank(xs, 4, "bilinear_resize");
  if (out_h == 0 || out_w == 0) throw DimensionError("bilinear_resize to a zero extent");
  const std::size_t B = xs[0], C = xs[1], H = xs[2], W = xs[3];
  if (H == 0 || W == 0) throw DimensionError("bilinear_resize of an empty image");
  auto ay = std::make_shared<detail::Interp>(detail::interp_axis(H, out_h));
  auto ax = std::make_shared<detail::Interp>(detail::interp_axis(W, out_w));
  Tensor<T> out({B, C, out_h, out_w});
  const T* x = input.value().data();
  for (std::size_t p = 0; p < B * C; ++p) {
    const T* src = x + p * H * W;
    T* dst = out.data() + p * out_h * out_w;
    for (std::size_t i = 0; i < out_h; ++i) {
      const T wy = static_cast<T>(ay->w_hi[i]);
      const T* r0 = src + ay->lo[i] * W;
      const T* r1 = src + ay->hi[i] * W;
      for (std::size_t j = 0; j < out_w; ++j) {
        const T wx = static_cast<T>(ax->w_hi[j]);
        const std::size_t l = ax->lo[j], h = ax->hi[j];
        const T top = r0[l] + wx * (r0[h] - r0[l]);
        const T bot = r1[l] + wx * (r1[h] - r1[l]);
        dst[i * out_w + j] = top + wy * (bot - top);
      }
    }
  }
  return input.tape().record(
      std::move(out), {input},
      [input, ay, ax, B, C, H, W, out_h, out_w](Tape<T>& tape, const Tensor<T>& g) {
        Tensor<T>* gx = tape.grad_sink(input);
        for (std::size_t p = 0; p < B * C; ++p) {
          const T* go = g.data() + p * out_h * out_w;
          T* d = gx->data() + p * H * W;
          for (std::size_t i = 0; i < out_h; ++i) {
            const T wy = static_cast<T>(ay->w_hi[i]);
            T* r0 = d + ay->lo[i] * W;
            T* r1 = d + ay->hi[i] * W;
            for (std::size_t j = 0; j < out_w; ++j) {
              const T wx = static_cast<T>(ax->w_hi[j]);
              const std::size_t l = ax->lo[j], h = ax->hi[j];
              const T v = go[i * out_w + j];
              r0[l] += (1 - wy) * (1 - wx) * v;
              r0[h] += (1 - wy) * wx * v;
              r1[l] += wy * (1 - wx) * v;
              r1[h] += wy * wx * v;
            }
          }
        }
      });
}

/// Spatial window [top, top+out_h) x [left, left+out_w); positions outside the
/// source read as zero. Covers cropping, padding and translation.
template <typename T>
Var<T> window(const Var<T>& input, long top, long left, std::size_t out_h, std::size_t out_w) {
  const Shape& xs = input.shape();
  detail::require_rank(xs, 4, "window");
  const std::size_t B = xs[0], C = xs[1], H = xs[2], W = xs[3];
  Tensor<T> out({B, C, out_h, out_w});
  const T* x = input.value().data();
  for (std::size_t p = 0; p < B * C; ++p) {
    const T* src = x + p * H * W;
    T* dst = out.data() + p * out_h * out_w;
    for (std::size_t i = 0; i < out_h; ++i) {
      const long sy = top + static_cast<long>(i);
      if (sy < 0 || sy >= static_cast<long>(H)) continue;
      for (std::size_t j = 0; j < out_w; ++j) {
        const long sx = left + static_cast<long>(j);
        if (sx >= 0 && sx < static_cast<long>(W)) dst[i * out_w + j] = src[sy * W + sx];
      }
    }
  }
  return input.tape().record(
      std::move(out), {input},
      [input, top, left, B, C, H, W, out_h, out_w](Tape<T>& tape, const Tensor<T>& g) {
        Tensor<T>* gx = tape.grad_sink(input);
        for (std::size_t p = 0; p < B * C; ++p) {
          const T* go = g.data() + p * out_h * out_w;
          T* d = gx->data() + p * H * W;
          for (std::size_t i = 0; i < out_h; ++i) {
            const long sy = top + static_cast<long>(i);
            if (sy < 0 || sy >= static_cast<long>(H)) continue;
            for (std::size_t j = 0; j < out_w; ++j) {
              const long sx = left + static_cast<long>(j);
              if (sx >= 0 && sx < static_cast<long>(W)) d[sy * W + sx] += go[i * out_w + j];
            }
          }
        }
      });
}

template <typename T>
Var<T> flip_horizontal(const Var<T>& input) {
  const Shape& xs = input.shape();
  detail::require_rank(xs, 4, "flip_horizontal");
  const std::size_t rows = xs[0] * xs[1] * xs[2], W = xs[3];
  Tensor<T> out(xs);
  const T* x = input.value().data();
  for (std::size_t r = 0; r < rows; ++r) {
    std::reverse_copy(x + r * W, x + (r + 1) * W, out.data() + r * W);
  }
  return input.tape().record(std::move(out), {input},
                             [input, rows, W](Tape<T>& tape, const Tensor<T>& g) {
                               Tensor<T>* gx = tape.grad_sink(input);
                               for (std::size_t r = 0; r < rows; ++r) {
                                 for (std::size_t j = 0; j < W; ++j) {
                                   (*gx)[r * W + j] += g[r * W + (W - 1 - j)];
                                 }
                               }
                             });
}

template <typename T>
Var<T> reshape(const Var<T>& input, Shape shape) {
  Tensor<T> out = input.value().reshaped(std::move(shape));
  return input.tape().record(std::move(out), {input},
                             [input](Tape<T>& tape, const Tensor<T>& g) {
                               detail::add_into(*tape.grad_sink(input), g);
                             });
}

/// [B, ...] -> [B, prod(...)]
template <typename T>
Var<T> flatten(const Var<T>& input) {
  const Shape& s = input.shape();
  if (s.empty()) throw DimensionError("flatten of a scalar");
  return reshape(input, Shape{s[0], s[0] ? input.value().size() / s[0] : 0});
}

template <typename T>
Var<T> concat_batch(std::span<const Var<T>> parts) {
  if (parts.empty()) throw DimensionError("concat_batch of nothing");
  std::vector<Tensor<T>> vals;
  vals.reserve(parts.size());
  for (const auto& p : parts) vals.push_back(p.value());
  Tensor<T> out = concat0<T>(vals);
  std::vector<Var<T>> ins(parts.begin(), parts.end());
  return parts.front().tape().record(
      std::move(out), parts, [ins](Tape<T>& tape, const Tensor<T>& g) {
        std::size_t offset = 0;
        for (const auto& p : ins) {
          const std::size_t n = p.value().size();
          if (Tensor<T>* gp = tape.grad_sink(p)) {
            for (std::size_t i = 0; i < n; ++i) (*gp)[i] += g[offset + i];
          }
          offset += n;
        }
      });
}

/// Rows of axis 0 in the given order (repeats allowed; gradients accumulate).
template <typename T>
Var<T> gather_batch(const Var<T>& input, std::vector<std::size_t> rows) {
  Tensor<T> out = input.value().gather0(rows);
  const std::size_t stride =
      input.shape().at(0) ? input.value().size() / input.shape()[0] : 0;
  return input.tape().record(std::move(out), {input},
                             [input, rows = std::move(rows), stride](Tape<T>& tape,
                                                                     const Tensor<T>& g) {
                               Tensor<T>* gx = tape.grad_sink(input);
                               for (std::size_t i = 0; i < rows.size(); ++i) {
                                 T* d = gx->data() + rows[i] * stride;
                                 const T* s = g.data() + i * stride;
                                 for (std::size_t k = 0; k < stride; ++k) d[k] += s[k];
                               }
                             });
}

/// Mean over axis 0: [B, F] -> [F].
template <typename T>
Var<T> mean_rows(const Var<T>& input) {
  const Shape& s = input.shape();
  detail::require_rank(s, 2, "mean_rows");
  const std::size_t B = s[0], F = s[1];
  if (B == 0) throw DimensionError("mean_rows of an empty batch");
  Tensor<T> out({F});
  const T* x = input.value().data();
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t f = 0; f < F; ++f) out[f] += x[b * F + f];
  }
  for (auto& v : out.values()) v /= static_cast<T>(B);
  return input.tape().record(std::move(out), {input},
                             [input, B, F](Tape<T>& tape, const Tensor<T>& g) {
                               Tensor<T>* gx = tape.grad_sink(input);
                               const T inv = T(1) / static_cast<T>(B);
                               for (std::size_t b = 0; b < B; ++b) {
                                 for (std::size_t f = 0; f < F; ++f) {
                                   (*gx)[b * F + f] += g[f] * inv;
                                 }
                               }
                             });
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::require_same(a.shape(), b.shape(), "add");
  Tensor<T> out = a.value();
  detail::add_into(out, b.value());
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape<T>& tape, const Tensor<T>& g) {
    if (Tensor<T>* ga = tape.grad_sink(a)) detail::add_into(*ga, g);
    if (Tensor<T>* gb = tape.grad_sink(b)) detail::add_into(*gb, g);
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  detail::require_same(a.shape(), b.shape(), "sub");
  Tensor<T> out = a.value();
  detail::as_array(out) -= detail::as_array(b.value());
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape<T>& tape, const Tensor<T>& g) {
    if (Tensor<T>* ga = tape.grad_sink(a)) detail::add_into(*ga, g);
    if (Tensor<T>* gb = tape.grad_sink(b)) detail::as_array(*gb) -= detail::as_array(g);
  });
}

template <typename T>
Var<T> scale(const Var<T>& input, T factor) {
  Tensor<T> out = input.value();
  detail::as_array(out) *= factor;
  return input.tape().record(std::move(out), {input},
                             [input, factor](Tape<T>& tape, const Tensor<T>& g) {
                               detail::as_array(*tape.grad_sink(input)) += factor * detail::as_array(g);
                             });
}

/// Sum of squared entries -> scalar.
template <typename T>
Var<T> sum_squares(const Var<T>& input) {
  const T s = detail::as_array(input.value()).square().sum();
  return input.tape().record(Tensor<T>::scalar(s), {input},
                             [input](Tape<T>& tape, const Tensor<T>& g) {
                               detail::as_array(*tape.grad_sink(input)) +=
                                   T(2) * g[0] * detail::as_array(input.value());
                             });
}

/// sum_i weights[i] * input[i] -> scalar. Weights are a constant.
template <typename T>
Var<T> weighted_sum(const Var<T>& input, Tensor<T> weights) {
  detail::require_same(input.shape(), weights.shape(), "weighted_sum");
  const T s = (detail::as_array(weights) * detail::as_array(input.value())).sum();
  return input.tape().record(Tensor<T>::scalar(s), {input},
                             [input, w = std::move(weights)](Tape<T>& tape, const Tensor<T>& g) {
                               detail::as_array(*tape.grad_sink(input)) += g[0] * detail::as_array(w);
                             });
}

template <typename T>
Var<T> sum(const Var<T>& input) {
  return weighted_sum(input, Tensor<T>(input.shape(), T(1)));
}

/// Sums scalars in the given order.
template <typename T>
Var<T> add_all(std::span<const Var<T>> terms) {
  if (terms.empty()) throw DimensionError("add_all of nothing");
  Var<T> acc = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) acc = add(acc, terms[i]);
  return acc;
}

}  // namespace idm
