#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <vector>

#include "idm/condenser.hpp"
#include "idm/runtime.hpp"
#include "support/gradcheck.hpp"
#include "support/oracles.hpp"
#include "support/toy_fixtures.hpp"

using namespace idm;
using idm::testing::check_gradients;
using idm::testing::dm_oracle;
using idm::testing::random_tensor;
using idm::testing::separable_set;
using idm::testing::tiny_net;

namespace {

ConvNetConfig small_net(std::size_t depth) {
  ConvNetConfig c;
  c.depth = depth;
  c.width = 4;
  c.in_channels = 2;
  c.input_hw = 8;
  c.num_classes = 3;
  return c;
}

Tensor<double> one_image(const Tensor<double>& batch, std::size_t i) {
  std::vector<std::size_t> row{i};
  return batch.gather0(row);
}

double dm_value(const ConvNetParams<double>& p, const Tensor<double>& real, const Tensor<double>& syn,
                std::size_t l, std::optional<std::uint64_t> aug, bool partition_real = false) {
  Tape<double> tape;
  return dm_loss(p, real, tape.constant(syn), PartitionSpec{l}, aug, partition_real).value().item();
}

CondenseConfig tiny_condense() {
  CondenseConfig c;
  c.ipc = 2;
  c.iterations = 20;
  c.k_steps = 2;
  c.initial_models = 2;
  c.n_max = 4;
  c.interval = 5;
  c.partition = 2;
  c.real_batch_per_class = 8;
  c.queue_batch = 8;
  c.holdout_fraction = 0.2;
  return c;
}

std::filesystem::path scratch(const char* name) {
  auto dir = std::filesystem::temp_directory_path() / name;
  std::filesystem::remove_all(dir);
  return dir;
}

}  // namespace

TEST(InitSynthetic, CopiesDistinctRealImagesOfEachClass) {
  const auto real = separable_set(6, 1);
  const auto s = init_synthetic_from_real(real, 3, 7);
  ASSERT_EQ(s.size(), 12u);
  EXPECT_EQ(s.classes, (std::vector<int>{0, 1, 2, 3}));
  const std::size_t plane = 16;
  for (std::size_t i = 0; i < s.size(); ++i) {
    std::set<std::size_t> matches;
    for (std::size_t j = 0; j < real.size(); ++j) {
      if (std::equal(s.images.data() + i * plane, s.images.data() + (i + 1) * plane,
                     real.images.data() + j * plane)) {
        EXPECT_EQ(real.labels[j], s.labels()[i]);
        matches.insert(j);
      }
    }
    EXPECT_EQ(matches.size(), 1u);
  }
  std::set<std::vector<float>> distinct;
  for (std::size_t i = 0; i < s.size(); ++i) {
    distinct.emplace(s.images.data() + i * plane, s.images.data() + (i + 1) * plane);
  }
  EXPECT_EQ(distinct.size(), s.size());
  EXPECT_THROW(init_synthetic_from_real(real, 7, 0), DimensionError);
}

TEST(DmLoss, MatchesBruteForceOracle) {
  Rng rng = make_rng(99);
  for (int trial = 0; trial < 20; ++trial) {
    const auto net = small_net(1 + trial % 2);
    const auto p = init_convnet<double>(net, 100 + trial);
    const std::size_t l = 1 + uniform_index(rng, 2) * (trial % 3 == 0 ? 3 : 1);  // 1, 2 or 4
    const auto real = random_tensor({1 + uniform_index(rng, 5), 2, 8, 8}, 200 + trial);
    const auto syn = random_tensor({1 + uniform_index(rng, 3), 2, 8, 8}, 300 + trial);
    std::optional<std::uint64_t> aug;
    if (trial % 2) aug = rng();
    const bool pr = trial % 5 == 4;
    const double got = dm_value(p, real, syn, l, aug, pr);
    const double want = dm_oracle(p, real, syn, l, aug, pr);
    EXPECT_NEAR(got, want, 1e-10) << "trial " << trial;
  }
}

TEST(DmLoss, ZeroWhenBatchesCoincideAndInvariantToDuplication) {
  const auto p = init_convnet<double>(small_net(2), 1);
  const auto x = random_tensor({3, 2, 8, 8}, 2);
  EXPECT_NEAR(dm_value(p, x, x, 1, std::nullopt), 0.0, 1e-20);
  EXPECT_NEAR(dm_value(p, x, x, 1, 5u), 0.0, 1e-20);

  const auto real = random_tensor({4, 2, 8, 8}, 3);
  const auto syn = random_tensor({2, 2, 8, 8}, 4);
  std::vector<Tensor<double>> twice{syn, syn};
  std::vector<Tensor<double>> real_twice{real, real};
  const double base = dm_value(p, real, syn, 2, std::nullopt);
  EXPECT_NEAR(dm_value(p, real, concat0<double>(twice), 2, std::nullopt), base, 1e-12);
  EXPECT_NEAR(dm_value(p, concat0<double>(real_twice), syn, 2, std::nullopt), base, 1e-12);
  EXPECT_GT(base, 0.0);
}

TEST(DmLoss, RejectsEmptyBatches) {
  const auto p = init_convnet<double>(small_net(1), 1);
  Tape<double> tape;
  auto syn = tape.leaf(random_tensor({1, 2, 8, 8}, 1), true);
  EXPECT_THROW(dm_loss(p, Tensor<double>({0, 2, 8, 8}), syn, PartitionSpec{1}, std::nullopt),
               DimensionError);
}

TEST(DmLoss, GradientsMatchFiniteDifferences) {
  const auto p = init_convnet<double>(small_net(1), 5);
  const auto real = random_tensor({3, 2, 8, 8}, 6);
  for (std::size_t l : {1, 2}) {
    for (std::optional<std::uint64_t> aug : {std::optional<std::uint64_t>{}, std::optional<std::uint64_t>{9}}) {
      auto r = check_gradients(
          [&](Tape<double>&, std::vector<Var<double>>& v) {
            return dm_loss(p, real, v[0], PartitionSpec{l}, aug);
          },
          {random_tensor({2, 2, 8, 8}, 7)});
      EXPECT_LT(r.max_rel_error, 1e-4) << "l=" << l;
    }
  }
}

TEST(CeRegLoss, ScalesCrossEntropyByAccuracy) {
  const auto p = init_convnet<double>(small_net(1), 8);
  const auto x = random_tensor({4, 2, 8, 8}, 9);
  std::vector<int> labels{0, 1, 2, 1};
  auto value = [&](std::optional<double> acc) {
    Tape<double> tape;
    return ce_reg_loss(p, acc, tape.constant(x), labels).value().item();
  };
  Tape<double> tape;
  BoundNet<double> net(tape, p, false);
  const double ce = softmax_cross_entropy(net.logits(tape.constant(x)), labels).value().item();
  EXPECT_NEAR(value(1.0), ce, 1e-14);
  EXPECT_NEAR(value(0.0), 0.0, 1e-300);
  EXPECT_NEAR(value(0.25) * 4, value(1.0), 1e-12);
  EXPECT_NEAR(value(0.3) + value(0.5), value(0.8), 1e-12);
  EXPECT_THROW(value(std::nullopt), StateError);

  // zero-weight classifier: uniform logits give ln C exactly
  auto flat = p;
  flat.tensors[flat.tensors.size() - 2].fill(0.0);
  flat.tensors.back().fill(0.0);
  Tape<double> t2;
  EXPECT_NEAR(ce_reg_loss(flat, 0.5, t2.constant(x), labels).value().item(), 0.5 * std::log(3.0),
              1e-14);
}

TEST(CeRegLoss, GradientsMatchFiniteDifferences) {
  const auto p = init_convnet<double>(small_net(1), 10);
  std::vector<int> labels{2, 0};
  auto r = check_gradients(
      [&](Tape<double>&, std::vector<Var<double>>& v) { return ce_reg_loss(p, 0.7, v[0], labels); },
      {random_tensor({2, 2, 8, 8}, 11)});
  EXPECT_LT(r.max_rel_error, 1e-4);
}

TEST(Condenser, ZeroLambdaIsPureDistributionMatching) {
  auto cfg = tiny_condense();
  cfg.lambda_reg = 0;
  Condenser<float> c(separable_set(10, 2), tiny_net(), cfg);
  for (int i = 0; i < 5; ++i) {
    const auto m = c.step();
    EXPECT_EQ(m.ce, 0.0);
    EXPECT_DOUBLE_EQ(m.total, m.dm);
  }
}

TEST(Condenser, LossCombinesMatchingAndWeightedRegularizer) {
  auto cfg = tiny_condense();
  cfg.lambda_reg = 0.5;
  Condenser<float> c(separable_set(10, 3), tiny_net(), cfg);
  for (int i = 0; i < 5; ++i) {
    const auto m = c.step();
    EXPECT_GT(m.ce, 0.0);
    EXPECT_NEAR(m.total, m.dm + 0.5 * m.acc * m.ce, 1e-4 * (1 + m.total));
  }
}

TEST(Condenser, QueueGrowsOnScheduleAndIsCapped) {
  auto cfg = tiny_condense();
  cfg.initial_models = 10;
  cfg.n_max = 13;
  cfg.interval = 30;
  cfg.k_steps = 1;
  cfg.lambda_reg = 0;
  Condenser<float> c(separable_set(10, 4), tiny_net(), cfg);
  EXPECT_EQ(c.queue().size(), 10u);
  for (std::size_t it = 1; it <= 150; ++it) {
    const auto m = c.step();
    EXPECT_EQ(m.pushed, it % 30 == 0);
    EXPECT_EQ(m.queue_size, std::min<std::size_t>(10 + it / 30, 13)) << "iteration " << it;
    EXPECT_EQ(m.popped, it / 30 > 3 && it % 30 == 0);
  }
}

TEST(Condenser, EntryLifetimeIsBounded) {
  auto cfg = tiny_condense();
  cfg.n_max = 3;
  cfg.interval = 4;
  cfg.initial_models = 3;
  cfg.lambda_reg = 0;
  Condenser<float> c(separable_set(10, 5), tiny_net(), cfg);
  for (int i = 0; i < 200; ++i) {
    const auto m = c.step();
    EXPECT_LE(m.entry_train_iters + cfg.k_steps, cfg.k_steps * cfg.n_max * cfg.interval);
  }
}

TEST(Condenser, FrozenQueueNeverTrains) {
  auto cfg = tiny_condense();
  cfg.freeze_queue = true;
  cfg.lambda_reg = 0;
  Condenser<float> c(separable_set(10, 6), tiny_net(), cfg);
  for (int i = 0; i < 12; ++i) EXPECT_EQ(c.step().entry_train_iters, 0u);
  for (const auto& e : c.queue().entries()) EXPECT_EQ(e.train_iters, 0u);
}

TEST(Condenser, ZeroIterationsReturnsInitialization) {
  const auto real = separable_set(10, 7);
  auto cfg = tiny_condense();
  cfg.iterations = 0;
  const auto s = condense(real, tiny_net(), cfg);
  const auto init = init_synthetic_from_real(real, cfg.ipc, cfg.seed);
  EXPECT_EQ(s.images, init.images);
  EXPECT_EQ(s.partition, cfg.partition);
}

TEST(Condenser, PixelsStayInsideNormalizedRange) {
  auto raw = separable_set(10, 8);
  for (auto& v : raw.images.values()) v = std::clamp(v, 0.0f, 1.0f);
  const auto stats = compute_norm_stats(raw);
  const auto real = normalized(raw, stats);
  auto cfg = tiny_condense();
  cfg.lr_syn = 50;
  const auto s = condense(real, tiny_net(), cfg);
  const auto [lo, hi] = normalized_range(stats);
  for (float v : s.images.values()) {
    EXPECT_GE(v, static_cast<float>(lo[0]) - 1e-6f);
    EXPECT_LE(v, static_cast<float>(hi[0]) + 1e-6f);
  }
}

TEST(Condenser, DeterministicUnderSeed) {
  set_threads(1);
  const auto real = separable_set(10, 9);
  auto cfg = tiny_condense();
  const auto a = condense(real, tiny_net(), cfg);
  const auto b = condense(real, tiny_net(), cfg);
  EXPECT_EQ(a.images, b.images);
  cfg.seed = 1;
  EXPECT_NE(condense(real, tiny_net(), cfg).images, a.images);
}

TEST(Condenser, RejectsMismatchedNetwork) {
  auto net = tiny_net();
  net.num_classes = 5;
  EXPECT_THROW(Condenser<float>(separable_set(10, 1), net, tiny_condense()), ConfigError);
  auto cfg = tiny_condense();
  cfg.interval = 0;
  EXPECT_THROW(Condenser<float>(separable_set(10, 1), tiny_net(), cfg), ConfigError);
}

TEST(SyntheticSet, TrainingViewDecodesEveryImage) {
  auto s = init_synthetic_from_real(separable_set(4, 10), 2, 0);
  s.partition = 2;
  const auto view = s.training_view();
  EXPECT_EQ(view.size(), 4 * s.size());
  for (std::size_t i = 0; i < view.size(); ++i) EXPECT_EQ(view.labels[i], s.labels()[i / 4]);
}

TEST(SyntheticSet, SaveLoadRoundTripAndCorruption) {
  auto s = init_synthetic_from_real(separable_set(4, 11), 2, 0);
  s.partition = 2;
  const auto dir = scratch("idm_test_syn");
  save_synthetic(dir, s, {{"note", 1}});
  nlohmann::json m;
  const auto r = load_synthetic<float>(dir, &m);
  EXPECT_EQ(r.images, s.images);
  EXPECT_EQ(r.classes, s.classes);
  EXPECT_EQ(r.partition, 2u);
  EXPECT_EQ(m["note"], 1);

  {
    std::ofstream f(dir / "pixels.f32", std::ios::binary | std::ios::app);
    f.put(0);
  }
  EXPECT_THROW(load_synthetic<float>(dir), FormatError);
  save_synthetic(dir, s);
  {
    std::ofstream f(dir / "manifest.json");
    f << "{\"format\": \"idm-condensed-1\", \"classes\": [0]";
  }
  EXPECT_THROW(load_synthetic<float>(dir), FormatError);
  {
    std::ofstream f(dir / "manifest.json");
    f << "{\"format\": \"other\"}";
  }
  EXPECT_THROW(load_synthetic<float>(dir), FormatError);
  std::filesystem::remove_all(dir);
  EXPECT_THROW(load_synthetic<float>(dir), IoError);
}
