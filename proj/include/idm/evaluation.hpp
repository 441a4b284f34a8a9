#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "idm/augmentation.hpp"
#include "idm/condenser.hpp"
#include "idm/convnet.hpp"
#include "idm/data_io.hpp"
#include "idm/errors.hpp"
#include "idm/model_queue.hpp"
#include "idm/rng.hpp"
#include "idm/sgd.hpp"
#include "json.hpp"

namespace idm {

struct EvalConfig {
  std::size_t runs = 5;
  std::size_t epochs = 300;
  std::size_t batch = 256;
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 0.0005;
  bool augment = true;
  AugmentSet augment_kinds;
  std::uint64_t seed = 0;

  void validate() const {
    if (runs == 0) throw ConfigError("eval.runs must be positive");
    if (epochs == 0) throw ConfigError("eval.epochs must be positive");
    if (batch == 0) throw ConfigError("eval.batch must be positive");
    if (!(lr >= 0)) throw ConfigError("eval.lr must be nonnegative");
    if (!(momentum >= 0 && momentum < 1)) throw ConfigError("eval.momentum must be in [0,1)");
    if (!(weight_decay >= 0)) throw ConfigError("eval.weight_decay must be nonnegative");
  }
};

inline void to_json(nlohmann::json& j, const EvalConfig& c) {
  j = nlohmann::json{{"runs", c.runs},     {"epochs", c.epochs},
                     {"batch", c.batch},   {"lr", c.lr},
                     {"momentum", c.momentum}, {"weight_decay", c.weight_decay},
                     {"augment", c.augment}, {"augment_kinds", c.augment_kinds.str()},
                     {"seed", c.seed}};
}

struct EvalReport {
  std::vector<double> accuracies;
  double mean = 0;
  double std = 0;  // population
  nlohmann::json config;
};

inline void to_json(nlohmann::json& j, const EvalReport& r) {
  j = nlohmann::json{{"accuracies", r.accuracies}, {"mean", r.mean}, {"std", r.std},
                     {"config", r.config}};
}

inline EvalReport summarize(std::vector<double> accs, nlohmann::json config = {}) {
  EvalReport r;
  r.accuracies = std::move(accs);
  r.config = std::move(config);
  if (r.accuracies.empty()) return r;
  const double n = static_cast<double>(r.accuracies.size());
  r.mean = std::accumulate(r.accuracies.begin(), r.accuracies.end(), 0.0) / n;
  double ss = 0;
  for (double a : r.accuracies) ss += (a - r.mean) * (a - r.mean);
  r.std = std::sqrt(ss / n);
  return r;
}

/// Trains a fresh network on `train`: shuffled minibatches, one augmentation
/// draw per batch, learning rate divided by 10 at the halfway epoch.
template <typename T>
ConvNetParams<T> train_model(const LabeledDataset<T>& train, const ConvNetConfig& net,
                             const EvalConfig& cfg, std::uint64_t seed,
                             const std::function<void(std::size_t epoch, std::span<const std::size_t> rows,
                                                      const Tensor<T>& logits)>& on_batch = {}) {
  if (train.size() == 0) throw DimensionError("cannot train on an empty set");
  ConvNetParams<T> params = init_convnet<T>(net, derive_seed(seed, 0x6e6574));
  SgdState<T> opt(static_cast<T>(cfg.lr), static_cast<T>(cfg.momentum),
                  static_cast<T>(cfg.weight_decay));
  Rng rng = make_rng(derive_seed(seed, 0x6f7264));
  const std::size_t n = train.size();
  std::vector<int> labels;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    if (epoch == cfg.epochs / 2 && epoch > 0) opt.lr = static_cast<T>(cfg.lr * 0.1);
    const auto order = permutation(n, rng);
    for (std::size_t b = 0; b < n; b += cfg.batch) {
      std::span<const std::size_t> rows(order.data() + b, std::min(cfg.batch, n - b));
      labels.assign(rows.size(), 0);
      for (std::size_t i = 0; i < rows.size(); ++i) labels[i] = train.labels[rows[i]];
      Tape<T> tape;
      BoundNet<T> model(tape, params, true);
      Var<T> x = tape.constant(train.images.gather0(rows));
      if (cfg.augment) {
        x = apply_augment(x, sample_augment(rng(), net.input_hw, net.input_hw, cfg.augment_kinds));
      }
      Var<T> logits = model.logits(x);
      if (on_batch) on_batch(epoch, rows, logits.value());
      tape.backward(softmax_cross_entropy(logits, labels));
      sgd_update(params.tensors, model.grads(), opt);
    }
  }
  return params;
}

template <typename T>
double accuracy(const ConvNetParams<T>& params, const LabeledDataset<T>& test) {
  return acc_estimate(params, test);
}

/// R fresh networks trained on `train`, each scored on `test`.
template <typename T>
EvalReport evaluate(const LabeledDataset<T>& train, const LabeledDataset<T>& test,
                    const ConvNetConfig& net, const EvalConfig& cfg) {
  cfg.validate();
  if (test.size() == 0) throw DimensionError("evaluation needs a nonempty test set");
  std::vector<double> accs;
  for (std::size_t r = 0; r < cfg.runs; ++r) {
    const auto params = train_model(train, net, cfg, derive_seed(cfg.seed, 0x72756e, r));
    accs.push_back(accuracy(params, test));
  }
  return summarize(std::move(accs), cfg);
}

template <typename T>
EvalReport evaluate(const SyntheticSet<T>& condensed, const LabeledDataset<T>& test,
                    const ConvNetConfig& net, const EvalConfig& cfg) {
  if (condensed.size() == 0) throw DimensionError("condensed set is empty");
  return evaluate(condensed.training_view(), test, net, cfg);
}

/// Mean over synthetic rows of the fraction of its k nearest real rows
/// (squared L2, ties to the lower real index) that share its label.
template <typename T>
double consistency_ratio(const Tensor<T>& syn_features, std::span<const int> syn_labels,
                         const Tensor<T>& real_features, std::span<const int> real_labels,
                         std::size_t k) {
  const std::size_t S = syn_features.dim(0), R = real_features.dim(0), F = real_features.dim(1);
  if (k == 0 || k > R) {
    throw IndexError("k = " + std::to_string(k) + " outside [1, " + std::to_string(R) + "]");
  }
  if (S == 0) throw DimensionError("consistency ratio needs synthetic samples");
  if (syn_features.dim(1) != F) throw DimensionError("feature widths differ");
  std::vector<std::pair<double, std::size_t>> d(R);
  double total = 0;
  for (std::size_t s = 0; s < S; ++s) {
    const T* a = syn_features.data() + s * F;
    for (std::size_t r = 0; r < R; ++r) {
      const T* b = real_features.data() + r * F;
      double acc = 0;
      for (std::size_t f = 0; f < F; ++f) {
        const double diff = static_cast<double>(a[f]) - static_cast<double>(b[f]);
        acc += diff * diff;
      }
      d[r] = {acc, r};
    }
    std::partial_sort(d.begin(), d.begin() + static_cast<long>(k), d.end());
    std::size_t same = 0;
    for (std::size_t i = 0; i < k; ++i) same += real_labels[d[i].second] == syn_labels[s];
    total += static_cast<double>(same) / static_cast<double>(k);
  }
  return total / static_cast<double>(S);
}

template <typename T>
double consistency_ratio(const LabeledDataset<T>& condensed, const LabeledDataset<T>& real,
                         const ConvNetParams<T>& params, std::size_t k) {
  return consistency_ratio(embed_features(params, condensed.images), condensed.labels,
                           embed_features(params, real.images), real.labels, k);
}

// ---------------------------------------------------------------------------
// Coreset baselines. Each returns dataset row indices, class-major.

template <typename T>
std::vector<std::size_t> select_random(const LabeledDataset<T>& real, std::size_t ipc,
                                       std::uint64_t seed) {
  Rng rng = make_rng(derive_seed(seed, 0x726e64));
  std::vector<std::size_t> out;
  for (const auto& idx : real.indices_by_class()) {
    if (idx.empty()) continue;
    if (idx.size() < ipc) throw DimensionError("class has fewer samples than ipc");
    auto pick = sample_without_replacement(idx, ipc, rng);
    out.insert(out.end(), pick.begin(), pick.end());
  }
  return out;
}

/// Greedy herding over feature rows: each pick brings the running mean of the
/// picked rows closest to the mean of all rows. Returns row positions.
template <typename T>
std::vector<std::size_t> herding_order(const Tensor<T>& features, std::size_t count) {
  const std::size_t n = features.dim(0), F = features.dim(1);
  if (count > n) throw DimensionError("herding asked for more rows than available");
  std::vector<double> mu(F, 0.0), running(F, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t f = 0; f < F; ++f) mu[f] += features[i * F + f];
  }
  for (auto& v : mu) v /= static_cast<double>(n);
  std::vector<char> used(n, 0);
  std::vector<std::size_t> out;
  for (std::size_t k = 1; k <= count; ++k) {
    double best = std::numeric_limits<double>::infinity();
    std::size_t arg = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (used[i]) continue;
      double dist = 0;
      for (std::size_t f = 0; f < F; ++f) {
        const double m = (running[f] + features[i * F + f]) / static_cast<double>(k);
        dist += (mu[f] - m) * (mu[f] - m);
      }
      if (dist < best) {
        best = dist;
        arg = i;
      }
    }
    used[arg] = 1;
    out.push_back(arg);
    for (std::size_t f = 0; f < F; ++f) running[f] += features[arg * F + f];
  }
  return out;
}

template <typename T>
std::vector<std::size_t> select_herding(const LabeledDataset<T>& real, std::size_t ipc,
                                        const ConvNetParams<T>& extractor) {
  const Tensor<T> feats = embed_features(extractor, real.images);
  std::vector<std::size_t> out;
  for (const auto& idx : real.indices_by_class()) {
    if (idx.empty()) continue;
    if (idx.size() < ipc) throw DimensionError("class has fewer samples than ipc");
    for (std::size_t p : herding_order(feats.gather0(idx), ipc)) out.push_back(idx[p]);
  }
  return out;
}

/// Counts, per sample, the epochs in which its minibatch prediction was wrong.
template <typename T>
std::vector<std::size_t> forgetting_counts(const LabeledDataset<T>& real, const ConvNetConfig& net,
                                           const EvalConfig& cfg, std::uint64_t seed) {
  std::vector<std::size_t> wrong(real.size(), 0);
  train_model<T>(real, net, cfg, seed,
              [&](std::size_t, std::span<const std::size_t> rows, const Tensor<T>& logits) {
                const auto pred = argmax_rows(logits);
                for (std::size_t i = 0; i < rows.size(); ++i) {
                  wrong[rows[i]] += pred[i] != real.labels[rows[i]];
                }
              });
  return wrong;
}

/// The ipc most-forgotten samples per class, ties broken at random.
template <typename T>
std::vector<std::size_t> select_forgetting(const LabeledDataset<T>& real, std::size_t ipc,
                                           const ConvNetConfig& net, const EvalConfig& cfg,
                                           std::uint64_t seed) {
  const auto wrong = forgetting_counts(real, net, cfg, seed);
  Rng rng = make_rng(derive_seed(seed, 0x746965));
  std::vector<std::size_t> out;
  for (auto idx : real.indices_by_class()) {
    if (idx.empty()) continue;
    if (idx.size() < ipc) throw DimensionError("class has fewer samples than ipc");
    shuffle(idx.begin(), idx.end(), rng);
    std::stable_sort(idx.begin(), idx.end(),
                     [&](std::size_t a, std::size_t b) { return wrong[a] > wrong[b]; });
    out.insert(out.end(), idx.begin(), idx.begin() + static_cast<long>(ipc));
  }
  return out;
}

/// Wraps selected real rows as a condensed set so every method shares one
/// evaluation and persistence path. Rows must be class-major, ipc per class.
template <typename T>
SyntheticSet<T> coreset_as_synthetic(const LabeledDataset<T>& real,
                                     std::span<const std::size_t> rows, std::size_t ipc) {
  SyntheticSet<T> s;
  s.images = real.images.gather0(rows);
  s.ipc = ipc;
  s.num_classes = real.class_count;
  s.norm = real.norm;
  for (std::size_t i = 0; i < rows.size(); i += ipc) s.classes.push_back(real.labels[rows[i]]);
  s.validate();
  return s;
}

/// Concatenates condensed sets that share geometry and partition factor.
template <typename T>
SyntheticSet<T> merge_synthetic(const SyntheticSet<T>& a, const SyntheticSet<T>& b) {
  if (a.size() == 0) return b;
  if (a.ipc != b.ipc || a.partition != b.partition || a.num_classes != b.num_classes) {
    throw DimensionError("cannot merge condensed sets with different ipc/partition/classes");
  }
  SyntheticSet<T> out = a;
  const std::vector<Tensor<T>> parts{a.images, b.images};
  out.images = concat0<T>(parts);
  out.classes.insert(out.classes.end(), b.classes.begin(), b.classes.end());
  return out;
}

// ---------------------------------------------------------------------------
// Class-incremental harness with a greedy, class-balanced memory.

template <typename T>
using MemoryStrategy =
    std::function<SyntheticSet<T>(const LabeledDataset<T>& stage_data, std::uint64_t seed)>;

struct ContinualResult {
  std::vector<std::vector<double>> curves;  // [seed][stage]
  std::vector<double> mean;
  std::vector<double> std;
  std::vector<std::vector<int>> class_orders;
};

inline void to_json(nlohmann::json& j, const ContinualResult& r) {
  j = nlohmann::json{{"curves", r.curves}, {"mean", r.mean}, {"std", r.std},
                     {"class_orders", r.class_orders}};
}

inline std::vector<std::vector<int>> stage_classes(std::size_t class_count, std::size_t steps,
                                            std::uint64_t seed) {
  if (steps == 0 || class_count % steps != 0) {
    throw ConfigError("continual steps (" + std::to_string(steps) + ") must divide class count " +
                      std::to_string(class_count));
  }
  Rng rng = make_rng(derive_seed(seed, 0x636f72));
  const auto order = permutation(class_count, rng);
  const std::size_t per = class_count / steps;
  std::vector<std::vector<int>> stages(steps);
  for (std::size_t s = 0; s < steps; ++s) {
    for (std::size_t i = 0; i < per; ++i) stages[s].push_back(static_cast<int>(order[s * per + i]));
  }
  return stages;
}

/// For each seed: classes arrive in `steps` stages; the strategy turns each
/// stage's data into memory, and a fresh model trained on the memory alone is
/// scored on every class seen so far.
template <typename T>
ContinualResult continual_harness(const MemoryStrategy<T>& strategy, const LabeledDataset<T>& train,
                                  const LabeledDataset<T>& test, const ConvNetConfig& net,
                                  std::size_t steps, std::span<const std::uint64_t> seeds,
                                  EvalConfig eval) {
  ContinualResult res;
  eval.runs = 1;
  for (std::uint64_t seed : seeds) {
    const auto stages = stage_classes(train.class_count, steps, seed);
    res.class_orders.emplace_back();
    SyntheticSet<T> memory;
    std::vector<int> seen;
    std::vector<double> curve;
    for (std::size_t s = 0; s < steps; ++s) {
      const auto& cls = stages[s];
      res.class_orders.back().insert(res.class_orders.back().end(), cls.begin(), cls.end());
      seen.insert(seen.end(), cls.begin(), cls.end());
      const auto part = strategy(train.filter_classes(cls), derive_seed(seed, 0x737467, s));
      memory = merge_synthetic(memory, part);
      eval.seed = derive_seed(seed, 0x65766c, s);
      curve.push_back(evaluate(memory, test.filter_classes(seen), net, eval).mean);
    }
    res.curves.push_back(std::move(curve));
  }
  for (std::size_t s = 0; s < steps; ++s) {
    std::vector<double> col;
    for (const auto& c : res.curves) col.push_back(c[s]);
    const auto r = summarize(col);
    res.mean.push_back(r.mean);
    res.std.push_back(r.std);
  }
  return res;
}

}  // namespace idm
