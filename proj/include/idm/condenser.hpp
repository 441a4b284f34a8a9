#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "idm/augmentation.hpp"
#include "idm/autodiff.hpp"
#include "idm/binary_io.hpp"
#include "idm/convnet.hpp"
#include "idm/data_io.hpp"
#include "idm/errors.hpp"
#include "idm/model_queue.hpp"
#include "idm/ops.hpp"
#include "idm/rng.hpp"
#include "idm/sgd.hpp"
#include "json.hpp"

namespace idm {

/// Condensed set: `ipc` learnable images for each class in `classes`, stored
/// class-major. Group g holds label classes[g].
template <typename T>
struct SyntheticSet {
  Tensor<T> images;  // [classes.size() * ipc, C, H, W]
  std::vector<int> classes;
  std::size_t ipc = 0;
  std::size_t num_classes = 0;  // width of the label space
  std::size_t partition = 1;    // l used during condensation; training view decodes l^2 tiles
  NormStats norm;

  std::size_t size() const { return images.empty() ? 0 : images.dim(0); }

  std::vector<int> labels() const {
    std::vector<int> out;
    out.reserve(classes.size() * ipc);
    for (int c : classes) out.insert(out.end(), ipc, c);
    return out;
  }

  Tensor<T> group(std::size_t g) const { return images.slice0(g * ipc, (g + 1) * ipc); }

  void validate() const {
    if (ipc == 0 || classes.empty()) throw FormatError("synthetic set is empty");
    if (images.rank() != 4 || images.dim(0) != classes.size() * ipc) {
      throw FormatError("synthetic images " + to_string(images.shape()) + " do not hold " +
                        std::to_string(classes.size()) + " x " + std::to_string(ipc) + " images");
    }
    for (int c : classes) {
      if (c < 0 || static_cast<std::size_t>(c) >= num_classes) {
        throw FormatError("synthetic class " + std::to_string(c) + " outside label space");
      }
    }
    if (partition == 0) throw FormatError("synthetic partition factor must be >= 1");
    if (!images.all_finite()) throw NumericError("synthetic pixels are not finite");
  }

  /// The set a model is trained on: every image expanded into its l^2 tiles,
  /// labels repeated.
  LabeledDataset<T> training_view() const {
    LabeledDataset<T> ds;
    Tape<T> tape;
    ds.images = partition_expand(tape.constant(images), PartitionSpec{partition}).value();
    const std::size_t rep = partition * partition;
    for (int y : labels()) ds.labels.insert(ds.labels.end(), rep, y);
    ds.class_count = num_classes;
    ds.split = "synthetic";
    ds.norm = norm;
    return ds;
  }

  /// Plain images without tile decoding.
  LabeledDataset<T> as_dataset() const {
    return {images, labels(), num_classes, "synthetic", norm};
  }
};

struct CondenseConfig {
  std::size_t ipc = 10;
  std::size_t iterations = 2000;  // M
  std::size_t k_steps = 10;       // K
  std::size_t initial_models = 10;  // N
  std::size_t n_max = 100;
  std::size_t interval = 30;
  double lambda_reg = 0.5;
  std::size_t partition = 2;  // l
  double lr_syn = 0.2;
  double momentum_syn = 0.5;
  double lr_model = 0.01;
  double momentum_model = 0.9;
  double wd_model = 0.0005;
  std::size_t real_batch_per_class = 64;
  std::size_t queue_batch = 64;
  double holdout_fraction = 0.1;
  std::size_t heldout_max = 200;  // 0 keeps the whole held-out split
  bool partition_real = false;
  bool ce_on_partitioned = true;
  bool augment = true;
  AugmentSet augment_kinds;
  bool clamp = true;
  bool freeze_queue = false;
  std::uint64_t seed = 0;

  void validate() const {
    auto positive = [](std::size_t v, const char* name) {
      if (v == 0) throw ConfigError(std::string(name) + " must be positive");
    };
    positive(ipc, "condense.ipc");
    positive(k_steps, "condense.k_steps");
    positive(initial_models, "condense.initial_models");
    positive(n_max, "condense.n_max");
    positive(interval, "condense.interval");
    positive(partition, "condense.partition");
    positive(real_batch_per_class, "condense.real_batch_per_class");
    positive(queue_batch, "condense.queue_batch");
    if (initial_models > n_max) throw ConfigError("condense.initial_models exceeds condense.n_max");
    if (!(lambda_reg >= 0)) throw ConfigError("condense.lambda_reg must be nonnegative");
    if (!(lr_syn > 0)) throw ConfigError("condense.lr_syn must be positive");
    if (!(momentum_syn >= 0 && momentum_syn < 1)) {
      throw ConfigError("condense.momentum_syn must be in [0,1)");
    }
    if (!(lr_model >= 0)) throw ConfigError("condense.lr_model must be nonnegative");
    if (!(momentum_model >= 0 && momentum_model < 1)) {
      throw ConfigError("condense.momentum_model must be in [0,1)");
    }
    if (!(wd_model >= 0)) throw ConfigError("condense.wd_model must be nonnegative");
    if (!(holdout_fraction > 0 && holdout_fraction < 1)) {
      throw ConfigError("condense.holdout_fraction must be in (0,1)");
    }
  }

  QueueConfig queue_config() const {
    return {n_max, k_steps, queue_batch, lr_model, momentum_model, wd_model};
  }

  /// 0.5 for ipc <= 10, 0.1 above.
  static double default_lambda(std::size_t ipc) { return ipc <= 10 ? 0.5 : 0.1; }
};

inline void to_json(nlohmann::json& j, const CondenseConfig& c) {
  j = nlohmann::json{{"ipc", c.ipc},
                     {"iterations", c.iterations},
                     {"k_steps", c.k_steps},
                     {"initial_models", c.initial_models},
                     {"n_max", c.n_max},
                     {"interval", c.interval},
                     {"lambda_reg", c.lambda_reg},
                     {"partition", c.partition},
                     {"lr_syn", c.lr_syn},
                     {"momentum_syn", c.momentum_syn},
                     {"lr_model", c.lr_model},
                     {"momentum_model", c.momentum_model},
                     {"wd_model", c.wd_model},
                     {"real_batch_per_class", c.real_batch_per_class},
                     {"queue_batch", c.queue_batch},
                     {"holdout_fraction", c.holdout_fraction},
                     {"heldout_max", c.heldout_max},
                     {"partition_real", c.partition_real},
                     {"ce_on_partitioned", c.ce_on_partitioned},
                     {"augment", c.augment},
                     {"augment_kinds", c.augment_kinds.str()},
                     {"clamp", c.clamp},
                     {"freeze_queue", c.freeze_queue},
                     {"seed", c.seed}};
}

/// Per class, `ipc` distinct real images copied verbatim.
template <typename T>
SyntheticSet<T> init_synthetic_from_real(const LabeledDataset<T>& real, std::size_t ipc,
                                         std::uint64_t seed) {
  if (ipc == 0) throw ConfigError("ipc must be positive");
  SyntheticSet<T> s;
  s.ipc = ipc;
  s.num_classes = real.class_count;
  s.norm = real.norm;
  Rng rng = make_rng(derive_seed(seed, 0x696e6974));
  std::vector<std::size_t> rows;
  const auto by_class = real.indices_by_class();
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    if (by_class[c].empty()) continue;
    if (by_class[c].size() < ipc) {
      throw DimensionError("class " + std::to_string(c) + " has " +
                           std::to_string(by_class[c].size()) + " images, fewer than ipc " +
                           std::to_string(ipc));
    }
    auto pick = sample_without_replacement(by_class[c], ipc, rng);
    rows.insert(rows.end(), pick.begin(), pick.end());
    s.classes.push_back(static_cast<int>(c));
  }
  if (s.classes.empty()) throw DimensionError("no real images to initialize from");
  s.images = real.images.gather0(rows);
  return s;
}

/// Synthetic-side forward pass for one class: the matching loss and the
/// logits of the images the regularizer sees.
template <typename T>
struct ClassMatch {
  Var<T> dm;
  Var<T> logits;
};

template <typename T>
Tensor<T> column_mean(const Tensor<T>& features) {
  const std::size_t B = features.dim(0), F = features.dim(1);
  Tensor<T> out({F});
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t f = 0; f < F; ++f) out[f] += features[b * F + f];
  }
  for (auto& v : out.values()) v /= static_cast<T>(B);
  return out;
}

/// Frozen `params` bound on the tape of `syn_c`; only pixels get gradients.
template <typename T>
ClassMatch<T> match_class(const ConvNetParams<T>& params, const Tensor<T>& real_c,
                          const Var<T>& syn_c, PartitionSpec spec,
                          std::optional<std::uint64_t> aug_seed, bool partition_real = false,
                          bool ce_on_partitioned = true, AugmentSet kinds = {}) {
  if (real_c.rank() != 4 || real_c.dim(0) == 0 || syn_c.shape().size() != 4 ||
      syn_c.shape()[0] == 0) {
    throw DimensionError("dm_loss needs nonempty real and synthetic batches");
  }
  Tape<T>& tape = syn_c.tape();
  BoundNet<T> net(tape, params, false);
  Var<T> syn = partition_expand(syn_c, spec);
  Var<T> real = tape.constant(real_c);
  if (partition_real) real = partition_expand(real, spec);
  if (aug_seed) std::tie(real, syn) = dsa_augment(real, syn, *aug_seed, kinds);
  // the real side needs no gradient, so it is embedded off-tape
  Var<T> real_mean = tape.constant(column_mean(embed_features(params, real.value())));
  Var<T> syn_feat = net.embed(syn);
  ClassMatch<T> out;
  out.dm = sum_squares(sub(real_mean, mean_rows(syn_feat)));
  out.logits = ce_on_partitioned ? net.classify(syn_feat) : net.logits(syn_c);
  return out;
}

/// Squared L2 distance between mean real and mean synthetic embeddings of one
/// class. Synthetic images are partition-expanded, then both sides share one
/// augmentation draw (none when aug_seed is empty).
template <typename T>
Var<T> dm_loss(const ConvNetParams<T>& params, const Tensor<T>& real_c, const Var<T>& syn_c,
               PartitionSpec spec, std::optional<std::uint64_t> aug_seed,
               bool partition_real = false, AugmentSet kinds = {}) {
  return match_class(params, real_c, syn_c, spec, aug_seed, partition_real, true, kinds).dm;
}

/// acc * CE(logits(syn_batch), labels) over the full label space.
template <typename T>
Var<T> ce_reg_loss(const ConvNetParams<T>& params, std::optional<double> acc,
                   const Var<T>& syn_batch, std::span<const int> labels) {
  if (!acc) throw StateError("class regularizer needs the model's accuracy estimate");
  BoundNet<T> net(syn_batch.tape(), params, false);
  return scale(softmax_cross_entropy(net.logits(syn_batch), labels), static_cast<T>(*acc));
}

struct StepMetrics {
  std::size_t iteration = 0;
  std::uint64_t entry_id = 0;
  std::size_t entry_train_iters = 0;  // before this step's training
  double acc = 0;
  double dm = 0;
  double ce = 0;  // unweighted, summed over classes
  double total = 0;
  std::size_t queue_size = 0;
  bool pushed = false;
  bool popped = false;
};

inline void to_json(nlohmann::json& j, const StepMetrics& m) {
  j = nlohmann::json{{"iteration", m.iteration}, {"entry_id", m.entry_id},
                     {"entry_train_iters", m.entry_train_iters}, {"acc", m.acc},
                     {"dm", m.dm}, {"ce", m.ce}, {"total", m.total},
                     {"queue_size", m.queue_size}, {"pushed", m.pushed}, {"popped", m.popped}};
}

/// Condensation state: queue, synthetic pixels and their optimizer.
template <typename T>
class Condenser {
 public:
  Condenser(const LabeledDataset<T>& real, ConvNetConfig net, CondenseConfig cfg)
      : cfg_(cfg), real_(real), queue_(net, cfg.queue_config()) {
    cfg_.validate();
    real_.validate();
    if (net.in_channels != real.channels() || net.input_hw != real.height() ||
        real.height() != real.width() || net.num_classes != real.class_count) {
      throw ConfigError("network config does not fit the dataset (" + to_string(real.images.shape()) +
                        ", " + std::to_string(real.class_count) + " classes)");
    }
    std::tie(train_, heldout_) = stratified_split(real_, cfg_.holdout_fraction, cfg_.seed);
    if (cfg_.heldout_max > 0 && heldout_.size() > cfg_.heldout_max) {
      // round-robin over classes keeps the capped split balanced
      const auto by_class = heldout_.indices_by_class();
      std::vector<std::size_t> keep;
      for (std::size_t k = 0; keep.size() < cfg_.heldout_max; ++k) {
        for (const auto& rows : by_class) {
          if (k < rows.size() && keep.size() < cfg_.heldout_max) keep.push_back(rows[k]);
        }
      }
      std::sort(keep.begin(), keep.end());
      heldout_ = heldout_.subset(keep);
    }
    syn_ = init_synthetic_from_real(real_, cfg_.ipc, cfg_.seed);
    syn_.partition = cfg_.partition;
    by_class_ = real_.indices_by_class();
    opt_ = SgdState<T>(static_cast<T>(cfg_.lr_syn), static_cast<T>(cfg_.momentum_syn), T(0));
    std::tie(lo_, hi_) = normalized_range(real_.norm);
    for (std::size_t i = 0; i < cfg_.initial_models; ++i) {
      queue_.push_new(derive_seed(cfg_.seed, 0x70757368, i));
    }
  }

  const SyntheticSet<T>& synthetic() const { return syn_; }
  const ModelQueue<T>& queue() const { return queue_; }
  const CondenseConfig& config() const { return cfg_; }
  std::size_t iteration() const { return iter_; }
  const LabeledDataset<T>& heldout() const { return heldout_; }

  /// Pixel gradient of the overall loss for the current iteration with the
  /// given entry; does not touch any state.
  Tensor<T> pixel_gradient(std::uint64_t entry_id, StepMetrics* metrics = nullptr) const {
    const QueueEntry<T>& e = queue_.entry(entry_id);
    const bool use_ce = cfg_.lambda_reg > 0;
    Tensor<T> grad = Tensor<T>::zeros(syn_.images.shape());
    const std::size_t per_image = syn_.images.size() / syn_.size();
    double dm_total = 0, ce_total = 0, total = 0;
    for (std::size_t g = 0; g < syn_.classes.size(); ++g) {
      const int c = syn_.classes[g];
      Rng rng = make_rng(derive_seed(cfg_.seed, 0x7265616c, iter_, c));
      const auto& pool = by_class_[c];
      auto rows = sample_without_replacement(pool, std::min(cfg_.real_batch_per_class, pool.size()), rng);
      const Tensor<T> real_c = real_.images.gather0(rows);

      Tape<T> tape;
      Var<T> syn_c = tape.leaf(syn_.group(g), true);
      std::optional<std::uint64_t> aug;
      if (cfg_.augment) aug = derive_seed(cfg_.seed, 0x617567, iter_, c);
      ClassMatch<T> m = match_class(e.params, real_c, syn_c, PartitionSpec{cfg_.partition}, aug,
                                    cfg_.partition_real, cfg_.ce_on_partitioned, cfg_.augment_kinds);
      Var<T> loss = m.dm;
      dm_total += m.dm.value().item();
      if (use_ce) {
        std::vector<int> labels(m.logits.shape()[0], c);
        Var<T> ce = softmax_cross_entropy(m.logits, labels);
        ce_total += ce.value().item();
        loss = add(loss, scale(ce, static_cast<T>(cfg_.lambda_reg * e.acc.value_or(0.0))));
      }
      total += loss.value().item();
      tape.backward(loss);
      const Tensor<T>& gc = tape.grad(syn_c);
      std::copy(gc.data(), gc.data() + gc.size(), grad.data() + g * cfg_.ipc * per_image);
    }
    if (metrics) {
      metrics->dm = dm_total;
      metrics->ce = ce_total;
      metrics->total = total;
    }
    return grad;
  }

  /// One iteration: sample, match, update S, train the entry, push/pop.
  StepMetrics step() {
    StepMetrics m;
    m.iteration = iter_;
    const std::uint64_t id = queue_.sample(derive_seed(cfg_.seed, 0x736d70, iter_));
    QueueEntry<T>& e = queue_.entry(id);
    if (cfg_.lambda_reg > 0 && !e.acc) e.acc = acc_estimate(e.params, heldout_);
    m.entry_id = id;
    m.entry_train_iters = e.train_iters;
    m.acc = e.acc.value_or(0.0);

    Tensor<T> grad = pixel_gradient(id, &m);
    std::vector<Tensor<T>> params{std::move(syn_.images)};
    sgd_update(params, {grad}, opt_);
    syn_.images = std::move(params[0]);
    if (cfg_.clamp) clamp_pixels();
    if (!syn_.images.all_finite()) {
      throw NumericError("synthetic pixels diverged at iteration " + std::to_string(iter_));
    }

    if (!cfg_.freeze_queue) {
      queue_.train_fetched(id, train_, &heldout_, derive_seed(cfg_.seed, 0x74726e, iter_));
    }
    if ((iter_ + 1) % cfg_.interval == 0) {
      queue_.push_new(derive_seed(cfg_.seed, 0x70757368, cfg_.initial_models + iter_));
      m.pushed = true;
      m.popped = queue_.pop_if_full();
    }
    m.queue_size = queue_.size();
    ++iter_;
    return m;
  }

 private:
  void clamp_pixels() {
    const std::size_t C = syn_.images.dim(1);
    const std::size_t plane = syn_.images.dim(2) * syn_.images.dim(3);
    T* px = syn_.images.data();
    for (std::size_t n = 0; n < syn_.size(); ++n) {
      for (std::size_t c = 0; c < C; ++c) {
        const T lo = static_cast<T>(lo_[c]), hi = static_cast<T>(hi_[c]);
        T* p = px + (n * C + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) p[i] = std::clamp(p[i], lo, hi);
      }
    }
  }

  CondenseConfig cfg_;
  LabeledDataset<T> real_, train_, heldout_;
  std::vector<std::vector<std::size_t>> by_class_;
  SyntheticSet<T> syn_;
  SgdState<T> opt_;
  ModelQueue<T> queue_;
  std::vector<double> lo_, hi_;
  std::size_t iter_ = 0;
};

using StepCallback = std::function<void(std::size_t iteration, const StepMetrics&)>;

/// Runs cfg.iterations steps and returns the condensed set.
template <typename T>
SyntheticSet<T> condense(const LabeledDataset<T>& real, const ConvNetConfig& net,
                         const CondenseConfig& cfg, const StepCallback& on_step = {},
                         const std::function<void(const Condenser<T>&)>& on_checkpoint = {},
                         std::size_t checkpoint_every = 0) {
  Condenser<T> c(real, net, cfg);
  for (std::size_t m = 0; m < cfg.iterations; ++m) {
    const StepMetrics metrics = c.step();
    if (on_step) on_step(m, metrics);
    if (on_checkpoint && checkpoint_every && (m + 1) % checkpoint_every == 0) on_checkpoint(c);
  }
  return c.synthetic();
}

// Condensed-set directory: manifest.json plus pixels.f32 (little-endian
// float32, class-major).
template <typename T>
void save_synthetic(const std::filesystem::path& dir, const SyntheticSet<T>& s,
                    const nlohmann::json& extra = {}) {
  s.validate();
  nlohmann::json m = extra.is_object() ? extra : nlohmann::json::object();
  m["format"] = "idm-condensed-1";
  m["classes"] = s.classes;
  m["ipc"] = s.ipc;
  m["num_classes"] = s.num_classes;
  m["partition"] = s.partition;
  m["shape"] = s.images.shape();
  m["norm"] = s.norm;
  std::vector<unsigned char> payload;
  payload.reserve(4 * s.images.size());
  io::append_f32_le<T>(payload, s.images.values());
  io::write_bytes(dir / "pixels.f32", payload);
  io::write_text(dir / "manifest.json", m.dump(2));
}

template <typename T>
SyntheticSet<T> load_synthetic(const std::filesystem::path& dir, nlohmann::json* manifest = nullptr) {
  nlohmann::json m;
  SyntheticSet<T> s;
  Shape shape;
  try {
    m = nlohmann::json::parse(io::read_text(dir / "manifest.json"));
    if (m.value("format", "") != "idm-condensed-1") throw FormatError("unknown condensed-set format");
    m.at("classes").get_to(s.classes);
    m.at("ipc").get_to(s.ipc);
    m.at("num_classes").get_to(s.num_classes);
    m.at("partition").get_to(s.partition);
    m.at("shape").get_to(shape);
    s.norm = m.at("norm").get<NormStats>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("condensed manifest: ") + e.what());
  }
  const auto bytes = io::read_bytes(dir / "pixels.f32");
  if (shape.size() != 4 || bytes.size() != 4 * numel(shape)) {
    throw FormatError("pixels.f32 holds " + std::to_string(bytes.size()) + " bytes, manifest shape " +
                      to_string(shape) + " needs " + std::to_string(4 * numel(shape)));
  }
  s.images = Tensor<T>(shape);
  io::load_f32_le(bytes.data(), s.images.size(), s.images.data());
  s.validate();
  if (manifest) *manifest = std::move(m);
  return s;
}

}  // namespace idm
