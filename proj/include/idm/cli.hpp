#pragma once

// Subcommands behind the `idm` tool. Each command reads a resolved RunConfig,
// writes its artifacts under one run directory and logs single-line JSON.

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "idm/condenser.hpp"
#include "idm/config.hpp"
#include "idm/data_io.hpp"
#include "idm/evaluation.hpp"
#include "idm/runtime.hpp"
#include "json.hpp"

namespace idm::cli {

class Logger {
 public:
  explicit Logger(std::ostream& out) : out_(&out) {}

  void log(const std::string& event, nlohmann::json fields = nlohmann::json::object()) {
    fields["event"] = event;
    fields["ts"] = timestamp();
    *out_ << fields.dump() << '\n' << std::flush;
  }

 private:
  static std::string timestamp() {
    const auto now = std::chrono::system_clock::now();
    const std::time_t t = std::chrono::system_clock::to_time_t(now);
    std::tm tm{};
    gmtime_r(&t, &tm);
    std::ostringstream o;
    o << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
    return o.str();
  }

  std::ostream* out_;
};

/// Process exit status per error category.
inline int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::config: return 2;
    case ErrorKind::format: return 3;
    case ErrorKind::io: return 4;
    case ErrorKind::dimension:
    case ErrorKind::index: return 5;
    case ErrorKind::state: return 6;
    case ErrorKind::numeric: return 7;
  }
  return 1;
}

inline std::filesystem::path output_root(const RunConfig& cfg) {
  if (cfg.has("output.root")) return cfg.text("output.root");
  if (const char* env = std::getenv("IDM_OUTPUT_ROOT"); env && *env) return env;
  return "runs";
}

inline std::filesystem::path run_dir(const RunConfig& cfg, const std::string& command) {
  const std::string name =
      cfg.has("output.name") ? cfg.text("output.name") : command + "-" + cfg.hash().substr(0, 8);
  auto dir = output_root(cfg) / name;
  std::filesystem::create_directories(dir);
  return dir;
}

/// Provenance block embedded in every artifact.
inline nlohmann::json provenance(const RunConfig& cfg, const std::string& command) {
  return {{"command", command},
          {"config", cfg.to_json()},
          {"config_hash", cfg.hash()},
          {"seed", cfg.uint("seed")}};
}

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  io::write_text(path, j.dump(2) + "\n");
}

template <typename T>
struct Data {
  LabeledDataset<T> train, test;
  NormStats stats;
};

/// Training and test splits, both normalized with training statistics.
template <typename T>
Data<T> load_data(const RunConfig& cfg) {
  cfg.require({"dataset.source"});
  const std::string& source = cfg.text("dataset.source");
  LabeledDataset<T> train, test;
  if (source == "toy") {
    ToySpec spec;
    spec.kind = cfg.text("dataset.kind");
    spec.classes = cfg.uint("dataset.classes");
    spec.per_class = cfg.uint("dataset.per_class");
    spec.hw = cfg.uint("dataset.hw");
    spec.seed = cfg.uint("dataset.seed");
    train = make_toy<T>(spec);
    spec.per_class = cfg.uint("dataset.test_per_class");
    spec.seed = derive_seed(spec.seed, 0x74657374);
    test = make_toy<T>(spec);
  } else if (source == "idx") {
    cfg.require({"dataset.train_images", "dataset.train_labels", "dataset.test_images",
                 "dataset.test_labels"});
    train = load_idx<T>(cfg.text("dataset.train_images"), cfg.text("dataset.train_labels"));
    test = load_idx<T>(cfg.text("dataset.test_images"), cfg.text("dataset.test_labels"));
  } else if (source == "cifar") {
    cfg.require({"dataset.train_files", "dataset.test_files"});
    auto paths = [](const std::string& list) {
      std::vector<std::filesystem::path> out;
      for (const auto& p : split_list(list)) out.emplace_back(p);
      return out;
    };
    train = load_cifar_binary<T>(paths(cfg.text("dataset.train_files")));
    test = load_cifar_binary<T>(paths(cfg.text("dataset.test_files")));
  } else {
    throw ConfigError("dataset.source: expected toy, idx or cifar, got '" + source + "'");
  }
  test.split = "test";
  const std::size_t classes = std::max(train.class_count, test.class_count);
  train.class_count = test.class_count = classes;
  if (train.images.dim(1) != test.images.dim(1) || train.images.dim(2) != test.images.dim(2) ||
      train.images.dim(3) != test.images.dim(3)) {
    throw DimensionError("training and test images differ in shape");
  }
  Data<T> d;
  d.stats = compute_norm_stats(train);
  d.train = normalized(std::move(train), d.stats);
  d.test = normalized(std::move(test), d.stats);
  return d;
}

template <typename T>
ConvNetConfig net_for(const RunConfig& cfg, const LabeledDataset<T>& ds) {
  if (ds.height() != ds.width()) throw DimensionError("square images required");
  return cfg.net_config(ds.channels(), ds.height(), ds.class_count);
}

inline void save_grid(const std::filesystem::path& path, const Tensor<float>& images, std::size_t rows,
                      const NormStats& stats) {
  export_image_grid(images, rows, stats, path);
}
inline void save_grid(const std::filesystem::path& path, const Tensor<double>& images,
                      std::size_t rows, const NormStats& stats) {
  export_image_grid(images, rows, stats, path);
}

/// Runs condensation; returns the run directory holding manifest.json,
/// pixels.f32, metrics.jsonl, grid.ppm and config.toml.
template <typename T>
std::filesystem::path cmd_condense(const RunConfig& cfg, Logger& log) {
  cfg.require({"dataset.source", "condense.ipc"});
  const CondenseConfig cc = cfg.condense_config();
  const Data<T> data = load_data<T>(cfg);
  const ConvNetConfig net = net_for(cfg, data.train);
  const auto dir = run_dir(cfg, "condense");
  io::write_text(dir / "config.toml", cfg.dump());
  log.log("condense_start", {{"dir", dir.string()},
                             {"config_hash", cfg.hash()},
                             {"train", data.train.size()},
                             {"condense", cc}});

  std::ofstream metrics(dir / "metrics.jsonl");
  if (!metrics) throw IoError("cannot write " + (dir / "metrics.jsonl").string());
  const std::size_t log_every = cfg.uint("condense.log_every");
  const std::size_t ckpt_every = cfg.uint("condense.checkpoint_every");
  const auto started = std::chrono::steady_clock::now();
  auto on_step = [&](std::size_t m, const StepMetrics& s) {
    metrics << nlohmann::json(s).dump() << '\n';
    if (log_every && ((m + 1) % log_every == 0 || m + 1 == cc.iterations)) {
      const double secs =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
      log.log("condense_progress", {{"iteration", m + 1}, {"dm", s.dm}, {"ce", s.ce},
                                    {"acc", s.acc}, {"queue_size", s.queue_size},
                                    {"seconds", secs}});
    }
  };
  auto on_checkpoint = [&](const Condenser<T>& c) {
    const auto ck = dir / "checkpoint";
    auto extra = provenance(cfg, "condense");
    extra["iteration"] = c.iteration();
    save_synthetic(ck / "synthetic", c.synthetic(), extra);
    c.queue().save_snapshot(ck / "queue");
    log.log("checkpoint", {{"iteration", c.iteration()}, {"dir", ck.string()}});
  };
  const SyntheticSet<T> s = condense<T>(data.train, net, cc, on_step, on_checkpoint, ckpt_every);
  metrics.close();

  auto extra = provenance(cfg, "condense");
  extra["method"] = cfg.text("condense.method");
  save_synthetic(dir, s, extra);
  save_grid(dir / "grid.ppm", s.images, s.classes.size(), s.norm);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  log.log("condense_done", {{"dir", dir.string()}, {"seconds", secs}});
  return dir;
}

/// Config recorded in a condensed-set manifest.
inline RunConfig manifest_config(const nlohmann::json& manifest) {
  if (!manifest.contains("config")) throw FormatError("condensed manifest carries no config");
  return RunConfig::from_json(manifest.at("config"));
}

/// Trains `eval.runs` fresh networks on the decoded condensed set and scores
/// them on the test split.
template <typename T>
nlohmann::json cmd_eval(const RunConfig& cfg, const std::filesystem::path& condensed, Logger& log) {
  nlohmann::json manifest;
  const SyntheticSet<T> s = load_synthetic<T>(condensed, &manifest);
  const Data<T> data = load_data<T>(cfg);
  if (s.norm != data.stats) {
    log.log("warning", {{"message", "condensed set was normalized with different statistics"}});
  }
  const auto report = evaluate(s, data.test, net_for(cfg, data.train), cfg.eval_config());
  nlohmann::json out = report;
  out["condensed"] = condensed.string();
  out["condensed_config_hash"] = manifest.value("config_hash", "");
  out["provenance"] = provenance(cfg, "eval");
  const auto dir = run_dir(cfg, "eval");
  write_json(dir / "report.json", out);
  log.log("eval_done", {{"mean", report.mean}, {"std", report.std}, {"dir", dir.string()}});
  return out;
}

/// Trains a network on the full real training split, for herding and the
/// consistency diagnostic.
template <typename T>
ConvNetParams<T> real_extractor(const RunConfig& cfg, const Data<T>& data, std::size_t epochs,
                                std::uint64_t tag) {
  EvalConfig e = cfg.eval_config();
  e.epochs = epochs;
  return train_model(data.train, net_for(cfg, data.train), e, derive_seed(cfg.uint("seed"), tag));
}

template <typename T>
std::vector<std::size_t> select_coreset(const RunConfig& cfg, const Data<T>& data,
                                        const LabeledDataset<T>& pool, const std::string& method,
                                        std::size_t ipc, std::uint64_t seed) {
  if (method == "random") return select_random(pool, ipc, seed);
  if (method == "herding") {
    return select_herding(pool, ipc,
                          real_extractor(cfg, data, cfg.uint("baseline.pretrain_epochs"), 0x68657264));
  }
  if (method == "forgetting") {
    EvalConfig e = cfg.eval_config();
    e.epochs = cfg.uint("baseline.forgetting_epochs");
    return select_forgetting(pool, ipc, net_for(cfg, data.train), e, seed);
  }
  throw ConfigError("baseline.method: expected random, herding or forgetting, got '" + method + "'");
}

/// Coreset selection plus the same evaluation as condensed sets.
template <typename T>
std::filesystem::path cmd_baseline(const RunConfig& cfg, Logger& log) {
  cfg.require({"dataset.source", "condense.ipc"});
  const std::string method = cfg.text("baseline.method");
  if (method != "random" && method != "herding" && method != "forgetting") {
    throw ConfigError("baseline.method: expected random, herding or forgetting, got '" + method + "'");
  }
  const Data<T> data = load_data<T>(cfg);
  const std::size_t ipc = cfg.uint("condense.ipc");
  const auto rows =
      select_coreset(cfg, data, data.train, method, ipc, derive_seed(cfg.uint("seed"), 0x73656c));
  const SyntheticSet<T> s = coreset_as_synthetic(data.train, rows, ipc);
  const auto dir = run_dir(cfg, "baseline-" + method);
  auto extra = provenance(cfg, "baseline");
  extra["method"] = method;
  extra["rows"] = rows;
  save_synthetic(dir, s, extra);
  save_grid(dir / "grid.ppm", s.images, s.classes.size(), s.norm);
  const auto report = evaluate(s, data.test, net_for(cfg, data.train), cfg.eval_config());
  nlohmann::json out = report;
  out["method"] = method;
  out["provenance"] = provenance(cfg, "baseline");
  write_json(dir / "report.json", out);
  log.log("baseline_done", {{"method", method}, {"mean", report.mean}, {"std", report.std},
                            {"dir", dir.string()}});
  return dir;
}

/// Balanced subset of at most `cap` rows (all rows when cap is 0).
template <typename T>
LabeledDataset<T> balanced_cap(const LabeledDataset<T>& ds, std::size_t cap, std::uint64_t seed) {
  if (cap == 0 || cap >= ds.size()) return ds;
  const std::size_t per = std::max<std::size_t>(1, cap / ds.class_count);
  std::size_t smallest = ds.size();
  for (const auto& idx : ds.indices_by_class()) {
    if (!idx.empty()) smallest = std::min(smallest, idx.size());
  }
  return ds.subset(select_random(ds, std::min(per, smallest), seed));
}

/// Consistency ratio of the decoded condensed set against real images in the
/// feature space of a network trained on real data.
template <typename T>
nlohmann::json cmd_diagnose(const RunConfig& cfg, const std::filesystem::path& condensed, Logger& log) {
  nlohmann::json manifest;
  const SyntheticSet<T> s = load_synthetic<T>(condensed, &manifest);
  const Data<T> data = load_data<T>(cfg);
  const auto ks = cfg.uint_list("diagnose.k");
  const auto extractor = real_extractor(cfg, data, cfg.uint("diagnose.extractor_epochs"), 0x6469616e);
  const auto real = balanced_cap(data.train, cfg.uint("diagnose.real_max"),
                                 derive_seed(cfg.uint("seed"), 0x7265616c));
  const auto view = s.training_view();
  const Tensor<T> syn_feat = embed_features(extractor, view.images);
  const Tensor<T> real_feat = embed_features(extractor, real.images);
  nlohmann::json ratios = nlohmann::json::object();
  for (std::size_t k : ks) {
    ratios[std::to_string(k)] = consistency_ratio(syn_feat, view.labels, real_feat, real.labels, k);
  }
  nlohmann::json out{{"consistency_ratio", ratios},
                     {"real_images", real.size()},
                     {"synthetic_images", view.size()},
                     {"condensed", condensed.string()},
                     {"condensed_config_hash", manifest.value("config_hash", "")},
                     {"provenance", provenance(cfg, "diagnose")}};
  const auto dir = run_dir(cfg, "diagnose");
  write_json(dir / "consistency.json", out);
  log.log("diagnose_done", {{"consistency_ratio", ratios}, {"dir", dir.string()}});
  return out;
}

/// Memory strategy named by continual.strategy.
template <typename T>
MemoryStrategy<T> memory_strategy(const RunConfig& cfg, const Data<T>& data) {
  const std::string name = cfg.text("continual.strategy");
  const std::size_t mem_ipc = cfg.uint("continual.mem_ipc");
  if (name == "random" || name == "herding") {
    return [&cfg, &data, name, mem_ipc](const LabeledDataset<T>& stage, std::uint64_t seed) {
      const auto rows = select_coreset(cfg, data, stage, name, mem_ipc, seed);
      return coreset_as_synthetic(stage, rows, mem_ipc);
    };
  }
  if (name == "idm" || name == "dm") {
    RunConfig stage_cfg = cfg;
    stage_cfg.set("condense.method", name);
    stage_cfg.set("condense.ipc", std::to_string(mem_ipc));
    stage_cfg.set("condense.iterations", cfg.text("continual.iterations"));
    CondenseConfig cc = stage_cfg.condense_config();
    const ConvNetConfig net = net_for(cfg, data.train);
    return [cc, net](const LabeledDataset<T>& stage, std::uint64_t seed) {
      CondenseConfig c = cc;
      c.seed = seed;
      return condense<T>(stage, net, c);
    };
  }
  throw ConfigError("continual.strategy: expected idm, dm, random or herding, got '" + name + "'");
}

/// Class-incremental run; writes curves.csv and continual.json.
template <typename T>
nlohmann::json cmd_continual(const RunConfig& cfg, Logger& log) {
  const Data<T> data = load_data<T>(cfg);
  const auto strategy = memory_strategy(cfg, data);
  std::vector<std::uint64_t> seeds;
  for (auto s : cfg.uint_list("continual.seeds")) seeds.push_back(s);
  const std::size_t steps = cfg.uint("continual.steps");
  log.log("continual_start", {{"strategy", cfg.text("continual.strategy")}, {"steps", steps},
                              {"seeds", seeds}});
  const auto res = continual_harness(strategy, data.train, data.test, net_for(cfg, data.train),
                                     steps, seeds, cfg.eval_config());
  const auto dir = run_dir(cfg, "continual-" + cfg.text("continual.strategy"));
  std::ostringstream csv;
  csv << "stage,classes_seen,mean,std";
  for (auto s : seeds) csv << ",seed_" << s;
  csv << '\n';
  const std::size_t per = data.train.class_count / steps;
  for (std::size_t st = 0; st < steps; ++st) {
    csv << st + 1 << ',' << per * (st + 1) << ',' << res.mean[st] << ',' << res.std[st];
    for (const auto& c : res.curves) csv << ',' << c[st];
    csv << '\n';
  }
  io::write_text(dir / "curves.csv", csv.str());
  nlohmann::json out = res;
  out["strategy"] = cfg.text("continual.strategy");
  out["provenance"] = provenance(cfg, "continual");
  write_json(dir / "continual.json", out);
  log.log("continual_done", {{"final_mean", res.mean.back()}, {"final_std", res.std.back()},
                             {"dir", dir.string()}});
  return out;
}

// ---------------------------------------------------------------------------
// Argument handling

/// Short flags accepted besides the dotted keys.
inline std::string expand_alias(const std::string& key) {
  static const std::map<std::string, std::string> aliases{
      {"ipc", "condense.ipc"},         {"iterations", "condense.iterations"},
      {"method", "baseline.method"},   {"k", "diagnose.k"},
      {"strategy", "continual.strategy"}, {"steps", "continual.steps"},
      {"mem_ipc", "continual.mem_ipc"}, {"runs", "eval.runs"},
      {"epochs", "eval.epochs"},       {"source", "dataset.source"},
      {"out", "output.root"},          {"name", "output.name"}};
  auto it = aliases.find(key);
  return it == aliases.end() ? key : it->second;
}

/// Applies `--key value` / `--key=value` pairs in order.
inline void apply_overrides(RunConfig& cfg, const std::vector<std::string>& args) {
  for (std::size_t i = 0; i < args.size(); ++i) {
    const std::string& a = args[i];
    if (a.rfind("--", 0) != 0 || a.size() == 2) {
      throw ConfigError("unexpected argument '" + a + "'; overrides look like --section.key value");
    }
    std::string key = a.substr(2), value;
    if (const auto eq = key.find('='); eq != std::string::npos) {
      value = key.substr(eq + 1);
      key = key.substr(0, eq);
    } else {
      if (i + 1 >= args.size()) throw ConfigError("override --" + key + " is missing its value");
      value = args[++i];
    }
    cfg.set(expand_alias(key), value);
  }
}

template <typename T>
int dispatch(const std::string& command, const RunConfig& cfg, const std::filesystem::path& condensed,
             Logger& log) {
  if (command == "condense") {
    cmd_condense<T>(cfg, log);
  } else if (command == "eval") {
    cmd_eval<T>(cfg, condensed, log);
  } else if (command == "baseline") {
    cmd_baseline<T>(cfg, log);
  } else if (command == "diagnose") {
    cmd_diagnose<T>(cfg, condensed, log);
  } else {
    cmd_continual<T>(cfg, log);
  }
  return 0;
}

/// Entry point of the tool; returns the process exit status.
inline int run(int argc, const char* const* argv, std::ostream& log_stream = std::cerr) {
  Logger log(log_stream);
  CLI::App app{"Condensed-set synthesis, baselines and diagnostics"};
  app.require_subcommand(1);
  std::string config_path;
  std::filesystem::path condensed;
  struct Sub {
    const char* name;
    const char* help;
    bool needs_condensed;
  };
  const Sub subs[] = {
      {"condense", "synthesize a condensed set", false},
      {"eval", "train fresh networks on a condensed set and report test accuracy", true},
      {"baseline", "select and evaluate a random, herding or forgetting coreset", false},
      {"diagnose", "consistency ratio of a condensed set against real data", true},
      {"continual", "class-incremental learning with a condensed or selected memory", false},
  };
  for (const auto& s : subs) {
    auto* sc = app.add_subcommand(s.name, s.help);
    sc->allow_extras();
    sc->add_option("-c,--config", config_path, "config file (flat TOML)");
    if (s.needs_condensed) {
      sc->add_option("condensed", condensed, "condensed-set directory")->required();
    }
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }
  const std::string command = app.get_subcommands().front()->get_name();
  try {
    RunConfig cfg;
    if (!config_path.empty()) {
      cfg = RunConfig::from_file(config_path);
    } else if (!condensed.empty()) {
      nlohmann::json manifest;
      try {
        manifest = nlohmann::json::parse(io::read_text(condensed / "manifest.json"));
      } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("condensed manifest: ") + e.what());
      }
      cfg = manifest_config(manifest);
      cfg.set("output.name", "");
    }
    apply_overrides(cfg, app.get_subcommands().front()->remaining());
    set_threads(cfg.uint("threads"));
    log.log("start", {{"command", command}, {"config_hash", cfg.hash()}});
    const std::string& precision = cfg.text("precision");
    if (precision == "float") return dispatch<float>(command, cfg, condensed, log);
    if (precision == "double") return dispatch<double>(command, cfg, condensed, log);
    throw ConfigError("precision: expected float or double, got '" + precision + "'");
  } catch (const Error& e) {
    log.log("error", {{"category", to_string(e.kind())}, {"message", e.what()}});
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    log.log("error", {{"category", "internal"}, {"message", e.what()}});
    return 1;
  }
}

}  // namespace idm::cli
