#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <set>
#include <vector>

#include "idm/binary_io.hpp"
#include "idm/data_io.hpp"
#include "idm/evaluation.hpp"

using namespace idm;

namespace {

std::filesystem::path scratch(const char* name) {
  auto dir = std::filesystem::temp_directory_path() / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

void put_u32_be(std::vector<unsigned char>& b, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) b.push_back(static_cast<unsigned char>(v >> s));
}

// Two 2x3 images with pixels 0..11 scaled by 20, labels {3, 1}.
struct IdxFixture {
  std::vector<unsigned char> images, labels;
  IdxFixture() {
    put_u32_be(images, 0x803);
    put_u32_be(images, 2);
    put_u32_be(images, 2);
    put_u32_be(images, 3);
    for (int i = 0; i < 12; ++i) images.push_back(static_cast<unsigned char>(20 * i));
    put_u32_be(labels, 0x801);
    put_u32_be(labels, 2);
    labels.push_back(3);
    labels.push_back(1);
  }
};

std::vector<unsigned char> cifar_record(unsigned char label, unsigned char base) {
  std::vector<unsigned char> r{label};
  for (int i = 0; i < 3072; ++i) r.push_back(static_cast<unsigned char>(base + i / 1024));
  return r;
}

}  // namespace

TEST(Idx, LoadsFixtureExactly) {
  const auto dir = scratch("idm_test_idx");
  IdxFixture f;
  io::write_bytes(dir / "img", f.images);
  io::write_bytes(dir / "lbl", f.labels);
  const auto ds = load_idx<double>(dir / "img", dir / "lbl");
  EXPECT_EQ(ds.images.shape(), (Shape{2, 1, 2, 3}));
  EXPECT_EQ(ds.labels, (std::vector<int>{3, 1}));
  EXPECT_EQ(ds.class_count, 4u);
  for (std::size_t i = 0; i < 12; ++i) EXPECT_EQ(ds.images[i], 20.0 * i / 255.0);
  std::filesystem::remove_all(dir);
}

TEST(Idx, RejectsMalformedFiles) {
  const auto dir = scratch("idm_test_idx_bad");
  IdxFixture f;
  io::write_bytes(dir / "lbl", f.labels);

  auto bad_magic = f.images;
  bad_magic[3] = 0x02;
  io::write_bytes(dir / "img", bad_magic);
  EXPECT_THROW(load_idx(dir / "img", dir / "lbl"), FormatError);

  auto truncated = f.images;
  truncated.pop_back();
  io::write_bytes(dir / "img", truncated);
  EXPECT_THROW(load_idx(dir / "img", dir / "lbl"), FormatError);

  auto header_only = std::vector<unsigned char>(f.images.begin(), f.images.begin() + 6);
  io::write_bytes(dir / "img", header_only);
  EXPECT_THROW(load_idx(dir / "img", dir / "lbl"), FormatError);

  io::write_bytes(dir / "img", f.images);
  auto fewer = f.labels;
  fewer[7] = 1;
  fewer.pop_back();
  io::write_bytes(dir / "lbl", fewer);
  EXPECT_THROW(load_idx(dir / "img", dir / "lbl"), FormatError);

  EXPECT_THROW(load_idx(dir / "img", dir / "missing"), IoError);
  std::filesystem::remove_all(dir);
}

TEST(Cifar, LoadsRecordsAcrossFiles) {
  const auto dir = scratch("idm_test_cifar");
  auto a = cifar_record(7, 10);
  const auto b = cifar_record(2, 100);
  const auto c = cifar_record(0, 200);
  a.insert(a.end(), b.begin(), b.end());
  io::write_bytes(dir / "a.bin", a);
  io::write_bytes(dir / "b.bin", c);
  const std::vector<std::filesystem::path> paths{dir / "a.bin", dir / "b.bin"};
  const auto ds = load_cifar_binary<double>(paths);
  EXPECT_EQ(ds.images.shape(), (Shape{3, 3, 32, 32}));
  EXPECT_EQ(ds.labels, (std::vector<int>{7, 2, 0}));
  EXPECT_EQ(ds.class_count, 8u);
  // plane k of record r holds base_r + k
  const unsigned char bases[] = {10, 100, 200};
  for (std::size_t r = 0; r < 3; ++r) {
    for (std::size_t k = 0; k < 3; ++k) {
      EXPECT_EQ(ds.images[(r * 3 + k) * 1024], (bases[r] + k) / 255.0);
      EXPECT_EQ(ds.images[(r * 3 + k) * 1024 + 1023], (bases[r] + k) / 255.0);
    }
  }
  auto broken = c;
  broken.pop_back();
  io::write_bytes(dir / "b.bin", broken);
  EXPECT_THROW(load_cifar_binary(paths), FormatError);
  std::filesystem::remove_all(dir);
}

TEST(Toy, DeterministicCountsAndRange) {
  for (const char* kind : {"blobs", "digits16"}) {
    ToySpec s;
    s.kind = kind;
    s.per_class = 7;
    s.seed = 3;
    const auto a = make_toy<float>(s);
    EXPECT_EQ(a.size(), 70u);
    EXPECT_EQ(a.images.dim(2), 16u);
    EXPECT_EQ(a.images.dim(1), std::string(kind) == "blobs" ? 3u : 1u);
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a.labels[i], static_cast<int>(i / 7));
    for (float v : a.images.values()) {
      EXPECT_GE(v, 0.0f);
      EXPECT_LE(v, 1.0f);
    }
    EXPECT_EQ(make_toy<float>(s).images, a.images);
    s.seed = 4;
    EXPECT_NE(make_toy<float>(s).images, a.images);
  }
  ToySpec bad;
  bad.kind = "stripes";
  EXPECT_THROW(make_toy<float>(bad), ConfigError);
  bad.kind = "digits16";
  bad.classes = 11;
  EXPECT_THROW(make_toy<float>(bad), ConfigError);
}

TEST(Toy, BlobsAreLearnableFromTheFullSet) {
  ToySpec s;
  s.seed = 1;
  const auto raw = make_toy<float>(s);
  ToySpec t = s;
  t.seed = 2;
  t.per_class = 100;
  const auto stats = compute_norm_stats(raw);
  const auto train = normalized(raw, stats);
  const auto test = normalized(make_toy<float>(t), stats);
  ConvNetConfig net;
  net.depth = 2;
  EvalConfig cfg;
  cfg.runs = 1;
  cfg.epochs = 20;
  cfg.batch = 64;
  cfg.augment = false;
  EXPECT_GE(evaluate(train, test, net, cfg).mean, 0.95);
}

TEST(Normalization, RoundTripAndStatistics) {
  ToySpec s;
  s.per_class = 5;
  const auto raw = make_toy<double>(s);
  const auto stats = compute_norm_stats(raw);
  const auto norm = normalized(raw, stats);
  const auto again = compute_norm_stats(norm);
  for (std::size_t c = 0; c < 3; ++c) {
    EXPECT_NEAR(again.mean[c], 0.0, 1e-9);
    EXPECT_NEAR(again.std[c], 1.0, 1e-9);
  }
  const auto back = denormalized(norm.images, stats);
  for (std::size_t i = 0; i < back.size(); ++i) EXPECT_NEAR(back[i], raw.images[i], 1e-12);
  EXPECT_THROW(normalized(norm, stats), StateError);

  const auto [lo, hi] = normalized_range(stats);
  for (std::size_t c = 0; c < 3; ++c) {
    EXPECT_NEAR(lo[c] * stats.std[c] + stats.mean[c], 0.0, 1e-12);
    EXPECT_NEAR(hi[c] * stats.std[c] + stats.mean[c], 1.0, 1e-12);
  }
}

TEST(StratifiedSplit, KeepsClassProportions) {
  ToySpec s;
  s.per_class = 20;
  const auto ds = make_toy<float>(s);
  const auto [a, b] = stratified_split(ds, 0.1, 5);
  EXPECT_EQ(a.size(), 180u);
  EXPECT_EQ(b.size(), 20u);
  for (const auto& idx : b.indices_by_class()) EXPECT_EQ(idx.size(), 2u);
  EXPECT_EQ(b.split, "val");
  const auto again = stratified_split(ds, 0.1, 5);
  EXPECT_EQ(again.second.images, b.images);
}

TEST(Ppm, RoundTripAndGray) {
  Tensor<float> gray({2, 1, 2, 2}, 128.0f / 255.0f);
  const auto img = render_grid(gray, 1, NormStats::identity(1));
  EXPECT_EQ(img.width, 4u);
  EXPECT_EQ(img.height, 2u);
  for (unsigned char v : img.rgb) EXPECT_EQ(v, 128);

  ToySpec s;
  s.per_class = 2;
  const auto toy = make_toy<float>(s);
  const auto grid = render_grid(toy.images, 10, toy.norm);
  const auto decoded = decode_ppm(encode_ppm(grid));
  EXPECT_EQ(decoded.width, grid.width);
  EXPECT_EQ(decoded.height, grid.height);
  EXPECT_EQ(decoded.rgb, grid.rgb);
  // image n=3 sits at grid row 1, column 1
  EXPECT_EQ(grid.rgb[((16 + 0) * grid.width + 16) * 3 + 1], to_byte(toy.images[(3 * 3 + 1) * 256]));

  const auto dir = scratch("idm_test_ppm");
  export_image_grid(toy.images, 10, toy.norm, dir / "g.ppm");
  EXPECT_EQ(read_ppm(dir / "g.ppm").rgb, grid.rgb);
  std::filesystem::remove_all(dir);

  auto bytes = encode_ppm(grid);
  bytes.pop_back();
  EXPECT_THROW(decode_ppm(bytes), FormatError);
  const std::string p3 = "P3\n1 1\n255\n0 0 0";
  EXPECT_THROW(decode_ppm(std::vector<unsigned char>(p3.begin(), p3.end())), FormatError);
  EXPECT_THROW(render_grid(toy.images, 3, toy.norm), DimensionError);
}
