#include <gtest/gtest.h>

#include <cmath>
#include <set>
#include <vector>

#include "idm/augmentation.hpp"
#include "support/gradcheck.hpp"

using namespace idm;
using idm::testing::check_gradients;
using idm::testing::random_tensor;

namespace {

Tensor<double> expand(const Tensor<double>& x, std::size_t l) {
  Tape<double> tape;
  return partition_expand(tape.constant(x), PartitionSpec{l}).value();
}

std::uint64_t seed_for(AugmentKind kind, std::size_t hw) {
  for (std::uint64_t s = 0;; ++s) {
    if (sample_augment(s, hw, hw).kind == kind) return s;
  }
}

}  // namespace

TEST(PartitionExpand, IdentityAtL1) {
  auto x = random_tensor({3, 2, 8, 8}, 1);
  EXPECT_EQ(expand(x, 1), x);
}

TEST(PartitionExpand, OutputCount) {
  for (std::size_t B : {1, 3}) {
    for (std::size_t l : {1, 2, 4}) {
      auto y = expand(random_tensor({B, 3, 16, 16}, 2), l);
      EXPECT_EQ(y.shape(), (Shape{B * l * l, 3, 16, 16}));
    }
  }
  auto y = expand(random_tensor({5, 3, 32, 32}, 3), 2);
  EXPECT_EQ(y.shape(), (Shape{20, 3, 32, 32}));
}

TEST(PartitionExpand, ConstantImageStaysConstant) {
  auto y = expand(Tensor<double>({2, 3, 8, 8}, 0.3), 2);
  for (double v : y.values()) EXPECT_NEAR(v, 0.3, 1e-15);
}

TEST(PartitionExpand, RejectsIndivisibleExtent) {
  EXPECT_THROW(expand(Tensor<double>({1, 1, 6, 6}), 4), DimensionError);
  EXPECT_THROW(expand(Tensor<double>({1, 1, 6, 8}), 4), DimensionError);
  EXPECT_THROW(expand(Tensor<double>({1, 1, 6, 6}), 0), DimensionError);
}

TEST(PartitionExpand, PreservesPerTileMean) {
  for (std::size_t l : {2, 4}) {
    auto x = random_tensor({2, 3, 16, 16}, 4 + l, 0, 1);
    auto y = expand(x, l);
    const std::size_t H = 16, t = H / l, C = 3;
    for (std::size_t b = 0; b < 2; ++b) {
      for (std::size_t tr = 0; tr < l; ++tr) {
        for (std::size_t tc = 0; tc < l; ++tc) {
          const std::size_t row = b * l * l + tr * l + tc;
          for (std::size_t c = 0; c < C; ++c) {
            double src = 0, out = 0;
            for (std::size_t yy = 0; yy < t; ++yy) {
              for (std::size_t xx = 0; xx < t; ++xx) {
                src += x[((b * C + c) * H + tr * t + yy) * H + tc * t + xx];
              }
            }
            for (std::size_t i = 0; i < H * H; ++i) out += y[(row * C + c) * H * H + i];
            EXPECT_NEAR(out / (H * H), src / (t * t), 1e-5);
          }
        }
      }
    }
  }
}

TEST(PartitionExpand, TilesCoverSourceInRowMajorOrder) {
  // piecewise-constant integer pattern: each output must equal its tile value
  const std::size_t H = 8, l = 2, t = H / l;
  Tensor<double> x({1, 1, H, H});
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t xx = 0; xx < H; ++xx) x[y * H + xx] = static_cast<double>((y / t) * l + xx / t + 1);
  }
  auto out = expand(x, l);
  for (std::size_t tile = 0; tile < l * l; ++tile) {
    for (std::size_t i = 0; i < H * H; ++i) EXPECT_EQ(out[tile * H * H + i], tile + 1.0);
  }
  // an odd factor puts output centres exactly on source centres, so every
  // source pixel is recovered by subsampling
  const std::size_t H3 = 9, l3 = 3, t3 = 3;
  Tensor<double> z({1, 1, H3, H3});
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = static_cast<double>(i % 7);
  auto o3 = expand(z, l3);
  for (std::size_t tr = 0; tr < l3; ++tr) {
    for (std::size_t tc = 0; tc < l3; ++tc) {
      const double* img = o3.data() + (tr * l3 + tc) * H3 * H3;
      for (std::size_t y = 0; y < t3; ++y) {
        for (std::size_t xx = 0; xx < t3; ++xx) {
          EXPECT_NEAR(img[(3 * y + 1) * H3 + 3 * xx + 1], z[(tr * t3 + y) * H3 + tc * t3 + xx], 1e-12);
        }
      }
    }
  }
}

TEST(PartitionExpand, GradientStaysInsideItsTile) {
  const std::size_t H = 8, l = 2, t = 4;
  for (std::size_t tile = 0; tile < 4; ++tile) {
    Tape<double> tape;
    auto x = tape.leaf(random_tensor({1, 1, H, H}, 20), true);
    auto y = partition_expand(x, PartitionSpec{l});
    Tensor<double> w({4, 1, H, H});
    for (std::size_t i = 0; i < H * H; ++i) w[tile * H * H + i] = 1.0 + 0.01 * static_cast<double>(i);
    tape.backward(weighted_sum(y, w));
    const auto& g = tape.grad(x);
    const std::size_t tr = tile / l, tc = tile % l;
    for (std::size_t r = 0; r < H; ++r) {
      for (std::size_t c = 0; c < H; ++c) {
        const bool inside = r / t == tr && c / t == tc;
        if (inside) {
          EXPECT_GT(g[r * H + c], 0.0);
        } else {
          EXPECT_EQ(g[r * H + c], 0.0);
        }
      }
    }
  }
}

TEST(PartitionExpand, GradientsMatchFiniteDifferences) {
  auto r = check_gradients(
      [](Tape<double>&, std::vector<Var<double>>& v) {
        auto y = partition_expand(v[0], PartitionSpec{2});
        return weighted_sum(y, random_tensor(y.shape(), 21));
      },
      {random_tensor({2, 2, 4, 4}, 22)});
  EXPECT_LT(r.max_rel_error, 1e-4);
}

TEST(Augment, SampledParametersStayInRange) {
  std::set<AugmentKind> kinds;
  for (std::uint64_t s = 0; s < 2000; ++s) {
    const auto p = sample_augment(s, 16, 16);
    kinds.insert(p.kind);
    EXPECT_GE(p.scale, 0.8);
    EXPECT_LE(p.scale, 1.2);
    EXPECT_LE(std::abs(p.shift_y), 2);
    EXPECT_LE(std::abs(p.shift_x), 2);
    EXPECT_EQ(p, sample_augment(s, 16, 16));
  }
  EXPECT_EQ(kinds.size(), 3u);
}

TEST(Augment, SharedTransformOnBothBatches) {
  auto x = random_tensor({3, 3, 16, 16}, 23);
  for (AugmentKind k : {AugmentKind::flip, AugmentKind::scale, AugmentKind::shift}) {
    Tape<double> tape;
    auto a = tape.constant(x);
    auto [ra, sa] = dsa_augment(a, a, seed_for(k, 16));
    EXPECT_EQ(ra.value(), sa.value());
    EXPECT_NE(ra.value(), x);
  }
}

TEST(Augment, DoubleFlipRestores) {
  auto x = random_tensor({2, 3, 5, 6}, 24);
  Tape<double> tape;
  EXPECT_EQ(flip_horizontal(flip_horizontal(tape.constant(x))).value(), x);
}

TEST(Augment, ShiftMovesContentWithZeroFill) {
  Tensor<double> x({1, 1, 4, 4});
  for (std::size_t i = 0; i < 16; ++i) x[i] = static_cast<double>(i + 1);
  AugmentParams p{AugmentKind::shift, 1.0, 1, -1};
  Tape<double> tape;
  auto y = apply_augment(tape.constant(x), p).value();
  // out(y, x) = in(y - 1, x + 1)
  EXPECT_EQ(y[0], 0.0);
  EXPECT_EQ(y[1 * 4 + 0], x[0 * 4 + 1]);
  EXPECT_EQ(y[3 * 4 + 2], x[2 * 4 + 3]);
  EXPECT_EQ(y[2 * 4 + 3], 0.0);
}

TEST(Augment, RejectsMismatchedBatches) {
  Tape<double> tape;
  auto a = tape.constant(Tensor<double>({1, 3, 8, 8}));
  auto b = tape.constant(Tensor<double>({1, 1, 8, 8}));
  EXPECT_THROW(dsa_augment(a, b, 0), DimensionError);
}

TEST(Augment, GradientsMatchFiniteDifferencesForEveryKind) {
  const auto real = random_tensor({2, 2, 8, 8}, 25);
  for (AugmentKind k : {AugmentKind::flip, AugmentKind::scale, AugmentKind::shift}) {
    const std::uint64_t seed = seed_for(k, 8);
    auto r = check_gradients(
        [&](Tape<double>& tape, std::vector<Var<double>>& v) {
          auto out = dsa_augment(tape.constant(real), v[0], seed).second;
          return weighted_sum(out, random_tensor(out.shape(), 26));
        },
        {random_tensor({2, 2, 8, 8}, 27)});
    EXPECT_LT(r.max_rel_error, 1e-4) << to_string(k);
  }
  // plain sum of augmented pixels
  auto r = check_gradients(
      [&](Tape<double>& tape, std::vector<Var<double>>& v) {
        return sum(dsa_augment(tape.constant(real), v[0], seed_for(AugmentKind::scale, 8)).second);
      },
      {random_tensor({2, 2, 8, 8}, 28)});
  EXPECT_LT(r.max_rel_error, 1e-4);
}
