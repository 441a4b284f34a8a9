#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "idm/binary_io.hpp"
#include "idm/convnet.hpp"
#include "idm/data_io.hpp"
#include "idm/errors.hpp"
#include "idm/rng.hpp"
#include "idm/sgd.hpp"
#include "json.hpp"

namespace idm {

template <typename T>
struct QueueEntry {
  std::uint64_t entry_id = 0;
  ConvNetParams<T> params;
  SgdState<T> opt;
  std::size_t train_iters = 0;
  std::optional<double> acc;
  std::optional<std::vector<int>> class_subset;
};

struct QueueConfig {
  std::size_t n_max = 100;
  std::size_t k_steps = 10;
  std::size_t batch = 64;  // real images per queue training step
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 0.0005;

  void validate() const {
    if (n_max == 0) throw ConfigError("queue.n_max must be positive");
    if (k_steps == 0) throw ConfigError("queue.k_steps must be positive");
    if (batch == 0) throw ConfigError("queue.batch must be positive");
    if (!(lr >= 0)) throw ConfigError("queue.lr must be nonnegative");
    if (!(momentum >= 0 && momentum < 1)) throw ConfigError("queue.momentum must be in [0,1)");
    if (!(weight_decay >= 0)) throw ConfigError("queue.weight_decay must be nonnegative");
  }
};

/// Fraction of argmax predictions matching the labels.
template <typename T>
double acc_estimate(const ConvNetParams<T>& params, const LabeledDataset<T>& heldout) {
  if (heldout.size() == 0) throw DimensionError("accuracy estimate needs a nonempty split");
  const auto pred = predict(params, heldout.images);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == heldout.labels[i];
  return static_cast<double>(hit) / static_cast<double>(pred.size());
}

/// FIFO queue of embedders at mixed training progress.
template <typename T>
class ModelQueue {
 public:
  ModelQueue(ConvNetConfig net, QueueConfig cfg) : net_(net), cfg_(cfg) {
    net_.validate();
    cfg_.validate();
  }

  const ConvNetConfig& net_config() const { return net_; }
  const QueueConfig& config() const { return cfg_; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  const std::deque<QueueEntry<T>>& entries() const { return entries_; }
  std::uint64_t next_id() const { return next_id_; }

  const QueueEntry<T>& entry(std::uint64_t id) const { return *locate(id); }
  QueueEntry<T>& entry(std::uint64_t id) { return *locate(id); }

  std::uint64_t push_new(std::uint64_t seed) {
    QueueEntry<T> e;
    e.params = init_convnet<T>(net_, seed);
    e.opt = SgdState<T>(static_cast<T>(cfg_.lr), static_cast<T>(cfg_.momentum),
                        static_cast<T>(cfg_.weight_decay));
    return append(std::move(e));
  }

  /// Copies a random member of `pool` with lr = base_lr * U[0.9, 1.1] and a
  /// random class subset covering `subset_fraction` of the classes.
  std::uint64_t push_pretrained(std::span<const QueueEntry<T>> pool, double base_lr,
                                std::uint64_t seed, double subset_fraction = 1.0) {
    if (pool.empty()) throw StateError("pretrained pool is empty");
    if (!(subset_fraction > 0 && subset_fraction <= 1)) {
      throw ConfigError("class subset fraction must be in (0,1]");
    }
    Rng rng = make_rng(derive_seed(seed, 0x707265));
    const QueueEntry<T>& src = pool[uniform_index(rng, pool.size())];
    if (src.params.config != net_) throw ConfigError("pretrained model has a different config");
    QueueEntry<T> e;
    e.params = src.params;
    e.train_iters = src.train_iters;
    e.acc = src.acc;
    e.opt = SgdState<T>(static_cast<T>(base_lr * uniform(rng, 0.9, 1.1)),
                        static_cast<T>(cfg_.momentum), static_cast<T>(cfg_.weight_decay));
    const std::size_t C = net_.num_classes;
    const auto keep = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::round(subset_fraction * static_cast<double>(C))));
    std::vector<std::size_t> all(C);
    for (std::size_t c = 0; c < C; ++c) all[c] = c;
    auto chosen = sample_without_replacement(std::move(all), keep, rng);
    std::vector<int> subset(chosen.begin(), chosen.end());
    std::sort(subset.begin(), subset.end());
    e.class_subset = std::move(subset);
    return append(std::move(e));
  }

  /// Drops the oldest entry when the queue holds more than n_max.
  bool pop_if_full() {
    if (entries_.size() <= cfg_.n_max) return false;
    entries_.pop_front();
    return true;
  }

  std::uint64_t sample(std::uint64_t seed) const {
    if (entries_.empty()) throw StateError("cannot sample from an empty model queue");
    Rng rng = make_rng(derive_seed(seed, 0x736d70));
    return entries_[uniform_index(rng, entries_.size())].entry_id;
  }

  /// K SGD steps on uniform batches of `train` (restricted to the entry's
  /// class subset), then refreshes the accuracy on `heldout` when given.
  void train_fetched(std::uint64_t id, const LabeledDataset<T>& train,
                     const LabeledDataset<T>* heldout, std::uint64_t seed) {
    QueueEntry<T>& e = *locate(id);
    std::vector<std::size_t> pool;
    if (e.class_subset) {
      std::vector<char> keep(train.class_count, 0);
      for (int c : *e.class_subset) keep.at(static_cast<std::size_t>(c)) = 1;
      for (std::size_t i = 0; i < train.size(); ++i) {
        if (keep[train.labels[i]]) pool.push_back(i);
      }
    } else {
      pool.resize(train.size());
      for (std::size_t i = 0; i < pool.size(); ++i) pool[i] = i;
    }
    if (pool.empty()) throw DimensionError("no training samples for the entry's class subset");
    Rng rng = make_rng(derive_seed(seed, 0x74726e, id));
    const std::size_t b = std::min(cfg_.batch, pool.size());
    std::vector<int> labels(b);
    for (std::size_t step = 0; step < cfg_.k_steps; ++step) {
      auto rows = sample_without_replacement(pool, b, rng);
      for (std::size_t i = 0; i < b; ++i) labels[i] = train.labels[rows[i]];
      train_step(e.params, e.opt, train.images.gather0(rows), labels);
    }
    e.train_iters += cfg_.k_steps;
    if (heldout) e.acc = acc_estimate(e.params, *heldout);
  }

  // Snapshot: one checkpoint per entry plus manifest.json with queue order.
  void save_snapshot(const std::filesystem::path& dir) const {
    nlohmann::json m;
    m["net"] = net_;
    m["n_max"] = cfg_.n_max;
    m["k_steps"] = cfg_.k_steps;
    m["next_id"] = next_id_;
    m["entries"] = nlohmann::json::array();
    for (const auto& e : entries_) {
      const std::string file = "entry_" + std::to_string(e.entry_id) + ".ckpt";
      nlohmann::json j{{"id", e.entry_id},
                       {"file", file},
                       {"train_iters", e.train_iters},
                       {"lr", static_cast<double>(e.opt.lr)},
                       {"momentum", static_cast<double>(e.opt.momentum)},
                       {"weight_decay", static_cast<double>(e.opt.weight_decay)}};
      j["acc"] = e.acc ? nlohmann::json(*e.acc) : nlohmann::json(nullptr);
      j["class_subset"] = e.class_subset ? nlohmann::json(*e.class_subset) : nlohmann::json(nullptr);
      m["entries"].push_back(j);
      // momentum buffers travel with the weights so a resumed run continues exactly
      ConvNetParams<T> buffers{net_, e.opt.buffers};
      save_checkpoint(dir / file, e.params);
      if (!e.opt.buffers.empty()) save_checkpoint(dir / (file + ".opt"), buffers);
    }
    io::write_text(dir / "manifest.json", m.dump(2));
  }

  static ModelQueue load_snapshot(const std::filesystem::path& dir, QueueConfig cfg) {
    nlohmann::json m;
    try {
      m = nlohmann::json::parse(io::read_text(dir / "manifest.json"));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("queue manifest: ") + e.what());
    }
    cfg.n_max = m.at("n_max").get<std::size_t>();
    cfg.k_steps = m.at("k_steps").get<std::size_t>();
    ModelQueue q(m.at("net").get<ConvNetConfig>(), cfg);
    for (const auto& j : m.at("entries")) {
      QueueEntry<T> e;
      e.entry_id = j.at("id").get<std::uint64_t>();
      const std::string file = j.at("file").get<std::string>();
      e.params = load_checkpoint<T>(dir / file);
      e.train_iters = j.at("train_iters").get<std::size_t>();
      e.opt = SgdState<T>(j.at("lr").get<T>(), j.at("momentum").get<T>(),
                          j.at("weight_decay").get<T>());
      if (std::filesystem::exists(dir / (file + ".opt"))) {
        e.opt.buffers = load_checkpoint<T>(dir / (file + ".opt")).tensors;
      }
      if (!j.at("acc").is_null()) e.acc = j["acc"].get<double>();
      if (!j.at("class_subset").is_null()) e.class_subset = j["class_subset"].get<std::vector<int>>();
      q.entries_.push_back(std::move(e));
    }
    q.next_id_ = m.at("next_id").get<std::uint64_t>();
    return q;
  }

 private:
  std::uint64_t append(QueueEntry<T> e) {
    e.entry_id = next_id_++;
    entries_.push_back(std::move(e));
    return entries_.back().entry_id;
  }

  typename std::deque<QueueEntry<T>>::iterator locate(std::uint64_t id) {
    auto it = std::find_if(entries_.begin(), entries_.end(),
                           [&](const QueueEntry<T>& e) { return e.entry_id == id; });
    if (it == entries_.end()) throw IndexError("no queue entry with id " + std::to_string(id));
    return it;
  }
  typename std::deque<QueueEntry<T>>::const_iterator locate(std::uint64_t id) const {
    return const_cast<ModelQueue*>(this)->locate(id);
  }

  ConvNetConfig net_;
  QueueConfig cfg_;
  std::deque<QueueEntry<T>> entries_;
  std::uint64_t next_id_ = 0;
};

}  // namespace idm
