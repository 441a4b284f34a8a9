#pragma once

// Flat TOML-style run configuration: `key = value` lines under optional
// `[section]` headers, every key addressable as `section.key`.

#include <charconv>
#include <cstdint>
#include <cstdlib>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "idm/augmentation.hpp"
#include "idm/binary_io.hpp"
#include "idm/condenser.hpp"
#include "idm/convnet.hpp"
#include "idm/errors.hpp"
#include "idm/evaluation.hpp"
#include "json.hpp"

namespace idm {

enum class ValueKind { uint, real, boolean, text };

struct KeySpec {
  std::string name;
  ValueKind kind;
  std::optional<std::string> fallback;  // empty: required when a command asks for it
  std::string help;
};

/// Every recognized key with its default.
inline const std::vector<KeySpec>& config_schema() {
  static const std::vector<KeySpec> schema = [] {
    const CondenseConfig c;
    const EvalConfig e;
    const ConvNetConfig n;
    auto u = [](std::size_t v) { return std::to_string(v); };
    auto r = [](double v) {
      std::ostringstream o;
      o.precision(17);
      o << v;
      return o.str();
    };
    auto b = [](bool v) { return std::string(v ? "true" : "false"); };
    using K = ValueKind;
    return std::vector<KeySpec>{
        {"seed", K::uint, "0", "master seed"},
        {"threads", K::uint, "1", "worker threads for linear algebra"},
        {"precision", K::text, "float", "float | double"},
        {"output.root", K::text, "", "output root; empty uses $IDM_OUTPUT_ROOT, then ./runs"},
        {"output.name", K::text, "", "run directory name; empty derives one from the config hash"},

        {"dataset.source", K::text, std::nullopt, "toy | idx | cifar"},
        {"dataset.kind", K::text, "blobs", "toy kind: blobs | digits16"},
        {"dataset.classes", K::uint, "10", "toy class count"},
        {"dataset.per_class", K::uint, "500", "toy training images per class"},
        {"dataset.test_per_class", K::uint, "100", "toy test images per class"},
        {"dataset.hw", K::uint, "16", "toy image extent"},
        {"dataset.seed", K::uint, "1", "toy generator seed"},
        {"dataset.train_images", K::text, "", "IDX training images"},
        {"dataset.train_labels", K::text, "", "IDX training labels"},
        {"dataset.test_images", K::text, "", "IDX test images"},
        {"dataset.test_labels", K::text, "", "IDX test labels"},
        {"dataset.train_files", K::text, "", "CIFAR training batches, comma separated"},
        {"dataset.test_files", K::text, "", "CIFAR test batches, comma separated"},

        {"net.depth", K::uint, u(n.depth), "conv blocks"},
        {"net.width", K::uint, u(n.width), "channels per block"},

        {"augment.kinds", K::text, AugmentSet{}.str(), "transform families: flip,scale,shift | none"},

        {"condense.method", K::text, "idm", "idm | dm (frozen random queue, no partition or regularizer)"},
        {"condense.ipc", K::uint, std::nullopt, "images per class"},
        {"condense.iterations", K::uint, u(c.iterations), "outer iterations"},
        {"condense.k_steps", K::uint, u(c.k_steps), "SGD steps per fetched model"},
        {"condense.initial_models", K::uint, u(c.initial_models), "models in the initial queue"},
        {"condense.n_max", K::uint, u(c.n_max), "queue capacity"},
        {"condense.interval", K::uint, u(c.interval), "iterations between pushes"},
        {"condense.lambda_reg", K::real, "", "class-regularizer weight; empty picks by ipc"},
        {"condense.partition", K::uint, u(c.partition), "partition factor l"},
        {"condense.lr_syn", K::real, r(c.lr_syn), "pixel learning rate"},
        {"condense.momentum_syn", K::real, r(c.momentum_syn), "pixel momentum"},
        {"condense.lr_model", K::real, r(c.lr_model), "queue model learning rate"},
        {"condense.momentum_model", K::real, r(c.momentum_model), "queue model momentum"},
        {"condense.wd_model", K::real, r(c.wd_model), "queue model weight decay"},
        {"condense.real_batch_per_class", K::uint, u(c.real_batch_per_class), "real images per class per step"},
        {"condense.queue_batch", K::uint, u(c.queue_batch), "batch for queue training"},
        {"condense.holdout_fraction", K::real, r(c.holdout_fraction), "real data held out for accuracy"},
        {"condense.heldout_max", K::uint, u(c.heldout_max), "cap on held-out images; 0 keeps all"},
        {"condense.partition_real", K::boolean, b(c.partition_real), "partition real batches too"},
        {"condense.ce_on_partitioned", K::boolean, b(c.ce_on_partitioned), "regularize decoded images"},
        {"condense.augment", K::boolean, b(c.augment), "siamese augmentation while matching"},
        {"condense.clamp", K::boolean, b(c.clamp), "clamp pixels to the data range"},
        {"condense.freeze_queue", K::boolean, b(c.freeze_queue), "never train queue models"},
        {"condense.checkpoint_every", K::uint, "0", "iterations between checkpoints; 0 disables"},
        {"condense.log_every", K::uint, "100", "iterations between progress log lines"},

        {"eval.runs", K::uint, u(e.runs), "independent training runs"},
        {"eval.epochs", K::uint, u(e.epochs), "epochs per run"},
        {"eval.batch", K::uint, u(e.batch), "minibatch size"},
        {"eval.lr", K::real, r(e.lr), "learning rate"},
        {"eval.momentum", K::real, r(e.momentum), "momentum"},
        {"eval.weight_decay", K::real, r(e.weight_decay), "weight decay"},
        {"eval.augment", K::boolean, b(e.augment), "augment training batches"},

        {"baseline.method", K::text, "random", "random | herding | forgetting"},
        {"baseline.pretrain_epochs", K::uint, "20", "epochs for the herding feature extractor"},
        {"baseline.forgetting_epochs", K::uint, "10", "epochs of forgetting statistics"},

        {"diagnose.k", K::text, "5,10,20,50", "neighbour counts, comma separated"},
        {"diagnose.extractor_epochs", K::uint, "20", "epochs for the embedding network"},
        {"diagnose.real_max", K::uint, "2000", "real images compared against; 0 uses all"},

        {"continual.strategy", K::text, "idm", "idm | dm | random | herding"},
        {"continual.steps", K::uint, "5", "class-incremental stages"},
        {"continual.mem_ipc", K::uint, "4", "memory images per class"},
        {"continual.iterations", K::uint, "200", "condensing iterations per stage"},
        {"continual.seeds", K::text, "0,1,2,3,4", "class-order seeds, comma separated"},
    };
  }();
  return schema;
}

/// Distribution matching as a special case: fresh random networks only, no
/// partition, no regularizer.
inline void apply_dm_preset(CondenseConfig& c) {
  c.freeze_queue = true;
  c.interval = 1;
  c.initial_models = c.n_max;
  c.partition = 1;
  c.lambda_reg = 0;
}

inline const KeySpec* find_key(const std::string& name) {
  for (const auto& k : config_schema()) {
    if (k.name == name) return &k;
  }
  return nullptr;
}

inline std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(text);
  while (std::getline(in, item, ',')) {
    const auto a = item.find_first_not_of(" \t");
    const auto z = item.find_last_not_of(" \t");
    if (a != std::string::npos) out.push_back(item.substr(a, z - a + 1));
  }
  return out;
}

/// Resolved key/value configuration.
class RunConfig {
 public:
  RunConfig() {
    for (const auto& k : config_schema()) {
      if (k.fallback) values_[k.name] = *k.fallback;
    }
  }

  static RunConfig from_text(const std::string& text, const std::string& origin = "config") {
    RunConfig cfg;
    cfg.merge_text(text, origin);
    return cfg;
  }

  static RunConfig from_file(const std::filesystem::path& path) {
    return from_text(io::read_text(path), path.string());
  }

  static RunConfig from_json(const nlohmann::json& j) {
    RunConfig cfg;
    for (const auto& [k, v] : j.items()) cfg.set(k, v.is_string() ? v.get<std::string>() : v.dump());
    return cfg;
  }

  void merge_text(const std::string& text, const std::string& origin) {
    std::istringstream in(text);
    std::string line, section;
    for (std::size_t no = 1; std::getline(in, line); ++no) {
      const std::string where = origin + ":" + std::to_string(no);
      line = strip_comment(line);
      if (line.empty()) continue;
      if (line.front() == '[') {
        if (line.back() != ']') throw ConfigError(where + ": unterminated section header");
        section = trim(line.substr(1, line.size() - 2));
        continue;
      }
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw ConfigError(where + ": expected 'key = value'");
      const std::string key = trim(line.substr(0, eq));
      if (key.empty()) throw ConfigError(where + ": empty key");
      const std::string full = section.empty() ? key : section + "." + key;
      try {
        set(full, unquote(trim(line.substr(eq + 1))));
      } catch (const ConfigError& e) {
        throw ConfigError(where + ": " + e.what());
      }
    }
  }

  void set(const std::string& key, const std::string& value) {
    const KeySpec* spec = find_key(key);
    if (!spec) throw ConfigError("unknown config key '" + key + "'");
    check_value(*spec, value);
    values_[key] = value;
  }

  bool has(const std::string& key) const {
    auto it = values_.find(key);
    return it != values_.end() && !it->second.empty();
  }

  void require(const std::vector<std::string>& keys) const {
    for (const auto& k : keys) {
      if (!has(k)) throw ConfigError("missing required config key '" + k + "'");
    }
  }

  const std::string& text(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("missing required config key '" + key + "'");
    return it->second;
  }
  std::size_t uint(const std::string& key) const { return parse_uint(key, text(key)); }
  double real(const std::string& key) const { return parse_real(key, text(key)); }
  bool boolean(const std::string& key) const { return parse_bool(key, text(key)); }

  /// Canonical `key = value` listing, sorted by key.
  std::string dump() const {
    std::string out;
    for (const auto& [k, v] : values_) out += k + " = " + quote_if_needed(v) + "\n";
    return out;
  }

  nlohmann::json to_json() const {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [k, v] : values_) j[k] = v;
    return j;
  }

  /// FNV-1a 64 of the canonical dump, as 16 hex digits.
  std::string hash() const {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char ch : dump()) {
      h ^= ch;
      h *= 0x100000001b3ull;
    }
    return io::hex64(h);
  }

  ConvNetConfig net_config(std::size_t in_channels, std::size_t hw, std::size_t classes) const {
    ConvNetConfig n;
    n.depth = uint("net.depth");
    n.width = uint("net.width");
    n.in_channels = in_channels;
    n.input_hw = hw;
    n.num_classes = classes;
    n.validate();
    return n;
  }

  CondenseConfig condense_config() const {
    CondenseConfig c;
    c.ipc = uint("condense.ipc");
    c.iterations = uint("condense.iterations");
    c.k_steps = uint("condense.k_steps");
    c.initial_models = uint("condense.initial_models");
    c.n_max = uint("condense.n_max");
    c.interval = uint("condense.interval");
    c.lambda_reg = has("condense.lambda_reg") ? real("condense.lambda_reg")
                                              : CondenseConfig::default_lambda(c.ipc);
    c.partition = uint("condense.partition");
    c.lr_syn = real("condense.lr_syn");
    c.momentum_syn = real("condense.momentum_syn");
    c.lr_model = real("condense.lr_model");
    c.momentum_model = real("condense.momentum_model");
    c.wd_model = real("condense.wd_model");
    c.real_batch_per_class = uint("condense.real_batch_per_class");
    c.queue_batch = uint("condense.queue_batch");
    c.holdout_fraction = real("condense.holdout_fraction");
    c.heldout_max = uint("condense.heldout_max");
    c.partition_real = boolean("condense.partition_real");
    c.ce_on_partitioned = boolean("condense.ce_on_partitioned");
    c.augment = boolean("condense.augment");
    c.augment_kinds = AugmentSet::parse(text("augment.kinds"));
    c.clamp = boolean("condense.clamp");
    c.freeze_queue = boolean("condense.freeze_queue");
    c.seed = uint("seed");
    const std::string& method = text("condense.method");
    if (method == "dm") {
      apply_dm_preset(c);
    } else if (method != "idm") {
      throw ConfigError("condense.method: expected idm or dm, got '" + method + "'");
    }
    c.validate();
    return c;
  }

  EvalConfig eval_config() const {
    EvalConfig e;
    e.runs = uint("eval.runs");
    e.epochs = uint("eval.epochs");
    e.batch = uint("eval.batch");
    e.lr = real("eval.lr");
    e.momentum = real("eval.momentum");
    e.weight_decay = real("eval.weight_decay");
    e.augment = boolean("eval.augment");
    e.augment_kinds = AugmentSet::parse(text("augment.kinds"));
    e.seed = derive_seed(uint("seed"), 0x6576616c);
    e.validate();
    return e;
  }

  std::vector<std::size_t> uint_list(const std::string& key) const {
    std::vector<std::size_t> out;
    for (const auto& item : split_list(text(key))) out.push_back(parse_uint(key, item));
    if (out.empty()) throw ConfigError(key + ": expected a nonempty comma-separated list");
    return out;
  }

 private:
  static std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    const auto z = s.find_last_not_of(" \t\r");
    return s.substr(a, z - a + 1);
  }

  static std::string strip_comment(const std::string& line) {
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
      if (line[i] == '"') quoted = !quoted;
      if (line[i] == '#' && !quoted) return trim(line.substr(0, i));
    }
    return trim(line);
  }

  // "text" -> text; [a, b] -> a,b
  static std::string unquote(const std::string& v) {
    if (v.size() >= 2 && v.front() == '"' && v.back() == '"') return v.substr(1, v.size() - 2);
    if (v.size() >= 2 && v.front() == '[' && v.back() == ']') {
      std::string out;
      for (auto item : split_list(v.substr(1, v.size() - 2))) {
        if (item.size() >= 2 && item.front() == '"' && item.back() == '"') {
          item = item.substr(1, item.size() - 2);
        }
        if (!out.empty()) out += ',';
        out += item;
      }
      return out;
    }
    return v;
  }

  static std::string quote_if_needed(const std::string& v) {
    if (v.empty()) return "\"\"";
    for (char ch : v) {
      if (!std::isalnum(static_cast<unsigned char>(ch)) && ch != '.' && ch != '-' && ch != '_') {
        return "\"" + v + "\"";
      }
    }
    return v;
  }

  static std::size_t parse_uint(const std::string& key, const std::string& v) {
    std::size_t out = 0;
    const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size()) {
      throw ConfigError(key + ": expected a nonnegative integer, got '" + v + "'");
    }
    return out;
  }

  static double parse_real(const std::string& key, const std::string& v) {
    char* end = nullptr;
    const double out = std::strtod(v.c_str(), &end);
    if (v.empty() || end != v.c_str() + v.size() || !std::isfinite(out)) {
      throw ConfigError(key + ": expected a finite number, got '" + v + "'");
    }
    return out;
  }

  static bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true") return true;
    if (v == "false") return false;
    throw ConfigError(key + ": expected true or false, got '" + v + "'");
  }

  static void check_value(const KeySpec& spec, const std::string& v) {
    if (v.empty()) return;  // unset
    switch (spec.kind) {
      case ValueKind::uint: parse_uint(spec.name, v); break;
      case ValueKind::real: parse_real(spec.name, v); break;
      case ValueKind::boolean: parse_bool(spec.name, v); break;
      case ValueKind::text: break;
    }
  }

  std::map<std::string, std::string> values_;
};

}  // namespace idm
