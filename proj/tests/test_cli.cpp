#include <gtest/gtest.h>

#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include "idm/cli.hpp"

using namespace idm;
namespace fs = std::filesystem;

namespace {

const char* kTinyConfig = R"(seed = 3
[dataset]
source = "toy"
per_class = 12
test_per_class = 4
[net]
depth = 1
width = 4
[condense]
ipc = 2
iterations = 4
n_max = 3
initial_models = 2
interval = 2
k_steps = 1
real_batch_per_class = 6
queue_batch = 16
log_every = 2
[eval]
runs = 2
epochs = 2
batch = 32
[diagnose]
extractor_epochs = 1
real_max = 100
)";

struct Scratch {
  fs::path dir;
  explicit Scratch(const char* name) : dir(fs::temp_directory_path() / name) {
    fs::remove_all(dir);
    fs::create_directories(dir);
    io::write_text(dir / "tiny.toml", kTinyConfig);
  }
  ~Scratch() { fs::remove_all(dir); }
  std::string config() const { return (dir / "tiny.toml").string(); }
  std::string root() const { return (dir / "runs").string(); }
};

struct Outcome {
  int code;
  std::string log;
};

Outcome run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "idm");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream log;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), log);
  return {code, log.str()};
}

nlohmann::json read_json(const fs::path& p) { return nlohmann::json::parse(io::read_text(p)); }

}  // namespace

TEST(Config, ParsesSectionsCommentsAndLists) {
  const auto c = RunConfig::from_text(
      "seed = 9  # trailing\n[condense]\nipc = 3\n[diagnose]\nk = [5, 10]\n[output]\nname = \"a b\"\n");
  EXPECT_EQ(c.uint("seed"), 9u);
  EXPECT_EQ(c.uint("condense.ipc"), 3u);
  EXPECT_EQ(c.uint_list("diagnose.k"), (std::vector<std::size_t>{5, 10}));
  EXPECT_EQ(c.text("output.name"), "a b");
  EXPECT_EQ(RunConfig::from_text(c.dump()).dump(), c.dump());
  EXPECT_EQ(RunConfig::from_json(c.to_json()).hash(), c.hash());
}

TEST(Config, RejectsUnknownKeysAndBadValues) {
  EXPECT_THROW(RunConfig::from_text("[condense]\nipcs = 3\n"), ConfigError);
  EXPECT_THROW(RunConfig::from_text("seed = -1\n"), ConfigError);
  EXPECT_THROW(RunConfig::from_text("[eval]\naugment = maybe\n"), ConfigError);
  EXPECT_THROW(RunConfig::from_text("[eval\n"), ConfigError);
  try {
    RunConfig::from_text("seed = 1\nbogus\n", "x.toml");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("x.toml:2"), std::string::npos);
  }
}

TEST(Config, DmPresetAndLambdaDefault) {
  auto c = RunConfig::from_text("[condense]\nipc = 10\nmethod = dm\n");
  const auto dm = c.condense_config();
  EXPECT_TRUE(dm.freeze_queue);
  EXPECT_EQ(dm.partition, 1u);
  EXPECT_EQ(dm.lambda_reg, 0.0);
  EXPECT_EQ(dm.initial_models, dm.n_max);
  c.set("condense.method", "idm");
  EXPECT_EQ(c.condense_config().lambda_reg, CondenseConfig::default_lambda(10));
  c.set("condense.method", "mtt");
  EXPECT_THROW(c.condense_config(), ConfigError);
}

TEST(Cli, MissingRequiredKeyIsNamed) {
  Scratch s("idm_cli_missing");
  const auto r = run_cli({"condense", "--dataset.source", "toy", "--output.root", s.root()});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.log.find("condense.ipc"), std::string::npos);
}

TEST(Cli, CondenseWritesAllArtifactsAndEvalTracesProvenance) {
  Scratch s("idm_cli_condense");
  auto r = run_cli({"condense", "-c", s.config(), "--output.root", s.root(), "--name", "c1"});
  ASSERT_EQ(r.code, 0) << r.log;
  const fs::path run = fs::path(s.root()) / "c1";
  for (const char* f : {"manifest.json", "pixels.f32", "metrics.jsonl", "grid.ppm", "config.toml"}) {
    EXPECT_TRUE(fs::exists(run / f)) << f;
  }
  const auto manifest = read_json(run / "manifest.json");
  EXPECT_EQ(manifest.at("seed"), 3);
  EXPECT_EQ(manifest.at("config").at("condense.ipc"), "2");
  std::istringstream metrics(io::read_text(run / "metrics.jsonl"));
  std::size_t lines = 0;
  for (std::string line; std::getline(metrics, line);) {
    EXPECT_TRUE(nlohmann::json::parse(line).contains("dm"));
    ++lines;
  }
  EXPECT_EQ(lines, 4u);
  // every log line is one JSON object
  std::istringstream log(r.log);
  for (std::string line; std::getline(log, line);) EXPECT_TRUE(nlohmann::json::parse(line).is_object());

  // rerunning from the recorded config reproduces the pixels bitwise
  io::write_text(s.dir / "again.toml", io::read_text(run / "config.toml"));
  r = run_cli({"condense", "-c", (s.dir / "again.toml").string(), "--name", "c2"});
  ASSERT_EQ(r.code, 0) << r.log;
  EXPECT_EQ(io::read_bytes(run / "pixels.f32"), io::read_bytes(fs::path(s.root()) / "c2" / "pixels.f32"));

  r = run_cli({"eval", run.string(), "--runs", "1", "--name", "e1"});
  ASSERT_EQ(r.code, 0) << r.log;
  const auto report = read_json(fs::path(s.root()) / "e1" / "report.json");
  EXPECT_EQ(report.at("std"), 0.0);
  EXPECT_EQ(report.at("accuracies").size(), 1u);
  EXPECT_EQ(report.at("condensed_config_hash"), manifest.at("config_hash"));
}

TEST(Cli, SeedOverrideChangesRecordedHash) {
  Scratch s("idm_cli_seed");
  ASSERT_EQ(run_cli({"condense", "-c", s.config(), "--output.root", s.root(), "--name", "a"}).code, 0);
  ASSERT_EQ(
      run_cli({"condense", "-c", s.config(), "--output.root", s.root(), "--name", "b", "--seed", "4"}).code,
      0);
  const auto a = read_json(fs::path(s.root()) / "a" / "manifest.json");
  const auto b = read_json(fs::path(s.root()) / "b" / "manifest.json");
  EXPECT_NE(a.at("config_hash"), b.at("config_hash"));
  EXPECT_EQ(b.at("seed"), 4);
}

TEST(Cli, CorruptCondensedSetIsFormatError) {
  Scratch s("idm_cli_corrupt");
  ASSERT_EQ(run_cli({"condense", "-c", s.config(), "--output.root", s.root(), "--name", "c"}).code, 0);
  const fs::path run = fs::path(s.root()) / "c";
  auto bytes = io::read_bytes(run / "pixels.f32");
  bytes.resize(bytes.size() - 3);
  io::write_bytes(run / "pixels.f32", bytes);
  const auto r = run_cli({"eval", run.string(), "--name", "e"});
  EXPECT_EQ(r.code, cli::exit_code(ErrorKind::format));
  EXPECT_NE(r.log.find("\"category\":\"format\""), std::string::npos);

  io::write_text(run / "manifest.json", "{not json");
  EXPECT_EQ(run_cli({"eval", run.string(), "-c", s.config()}).code, cli::exit_code(ErrorKind::format));
}

TEST(Cli, DiagnoseEmitsOneRatioPerK) {
  Scratch s("idm_cli_diag");
  ASSERT_EQ(run_cli({"condense", "-c", s.config(), "--output.root", s.root(), "--name", "c"}).code, 0);
  const auto r = run_cli({"diagnose", (fs::path(s.root()) / "c").string(), "--k", "5,10,20,50",
                          "--name", "d"});
  ASSERT_EQ(r.code, 0) << r.log;
  const auto out = read_json(fs::path(s.root()) / "d" / "consistency.json");
  const auto& ratios = out.at("consistency_ratio");
  ASSERT_EQ(ratios.size(), 4u);
  for (const char* k : {"5", "10", "20", "50"}) {
    const double v = ratios.at(k);
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(Cli, ContinualFiveStepsGivesFivePoints) {
  Scratch s("idm_cli_continual");
  const auto r = run_cli({"continual", "-c", s.config(), "--output.root", s.root(), "--name", "k",
                          "--strategy", "random", "--steps", "5", "--mem_ipc", "2",
                          "--continual.seeds", "0,1"});
  ASSERT_EQ(r.code, 0) << r.log;
  const auto out = read_json(fs::path(s.root()) / "k" / "continual.json");
  EXPECT_EQ(out.at("mean").size(), 5u);
  std::istringstream csv(io::read_text(fs::path(s.root()) / "k" / "curves.csv"));
  std::vector<std::string> rows;
  for (std::string line; std::getline(csv, line);) rows.push_back(line);
  ASSERT_EQ(rows.size(), 6u);
  EXPECT_EQ(rows[0], "stage,classes_seen,mean,std,seed_0,seed_1");
  EXPECT_EQ(rows[5].substr(0, 5), "5,10,");
}

TEST(Cli, UnknownMethodIsUsageError) {
  Scratch s("idm_cli_method");
  EXPECT_EQ(run_cli({"baseline", "-c", s.config(), "--output.root", s.root(), "--method", "kmeans"}).code, 2);
  EXPECT_EQ(run_cli({"condense", "-c", s.config(), "--output.root", s.root(), "--condense.method", "mtt"})
                .code,
            2);
  EXPECT_EQ(run_cli({"continual", "-c", s.config(), "--output.root", s.root(), "--strategy", "gem"}).code,
            2);
  EXPECT_EQ(run_cli({"shrink"}).code, 2);
  EXPECT_EQ(run_cli({"condense", "-c", s.config(), "--no.such", "1"}).code, 2);
}
