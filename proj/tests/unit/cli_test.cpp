#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <set>

#include <json.hpp>

#include "blspkd/cli/commands.hpp"
#include "blspkd/numerics/checkpoint.hpp"

using namespace blspkd;
namespace fs = std::filesystem;

namespace {

// Fresh run root per test; BLSPKD_RUN_ROOT points at it.
class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    root_ = fs::temp_directory_path() / (std::string("blspkd_cli_") + info->name() + "_" + std::to_string(::getpid()));
    fs::remove_all(root_);
    fs::create_directories(root_);
    ::setenv(cli::kRunRootEnv, root_.c_str(), 1);
  }
  void TearDown() override {
    ::unsetenv(cli::kRunRootEnv);
    fs::remove_all(root_);
  }

  int run(std::vector<std::string> args) {
    args.insert(args.begin(), "blspkd");
    std::vector<char*> argv;
    for (auto& a : args) argv.push_back(a.data());
    return cli::main_entry(static_cast<int>(argv.size()), argv.data());
  }
  std::string p(const std::string& rel) const { return (root_ / rel).string(); }

  fs::path root_;
};

// Tiny budgets so the whole pipeline runs in seconds.
const std::vector<std::string> kTiny = {
    "--set", "data.asr_count=40", "--set", "data.corpus_count=200", "--set", "pretrain.steps=10",
    "--set", "encoder_pretrain.steps=5", "--set", "steps=3", "--set", "batch=4", "--set", "eval.examples=4",
    "--set", "eval.probe_train=8", "--set", "probe.steps=3", "--set", "log_every=1"};

std::vector<std::string> with_tiny(std::vector<std::string> args) {
  std::vector<std::string> out = kTiny;
  out.insert(out.end(), args.begin(), args.end());
  return out;
}

// Non-volatile artifacts listed in a run's manifest, path → bytes.
std::map<std::string, std::string> stable_artifacts(const fs::path& dir) {
  const auto m = nlohmann::json::parse(num::read_file(dir / "manifest.json"));
  std::map<std::string, std::string> out;
  for (const auto& a : m.at("artifacts")) {
    if (a.contains("volatile")) continue;
    out[a.at("path")] = num::read_file(dir / a.at("path").get<std::string>());
  }
  out["manifest.json"] = num::read_file(dir / "manifest.json");
  return out;
}

}  // namespace

TEST(ExperimentConfig, TextRoundTrip) {
  auto c = cli::make_experiment({{"preset", "kd3"}, {"lr", "0.002"}, {"data.asr_count", "77"},
                                 {"reproduce.seeds", "1,2"}, {"eval.probe_layers", "0,2"}});
  const auto back = cli::parse_experiment(cli::to_text(c));
  EXPECT_EQ(cli::to_text(back), cli::to_text(c));
  EXPECT_EQ(back.asr_count, 77u);
  EXPECT_EQ(back.seeds, (std::vector<std::uint64_t>{1, 2}));
  EXPECT_DOUBLE_EQ(back.train.lr, 0.002);
}

TEST(ExperimentConfig, OverridesFollowEveryPreset) {
  const auto c = cli::make_experiment({{"preset", "kd4"}, {"lr", "0.01"}, {"steps", "7"}});
  const auto t = cli::train_config_for(c, "kd3", 9);
  EXPECT_EQ(t.preset, "kd3");
  EXPECT_DOUBLE_EQ(t.lr, 0.01);
  EXPECT_EQ(t.steps, 7u);
  EXPECT_EQ(t.seed, 9u);
  EXPECT_TRUE(t.has(loss::Term::resp_kl));
}

TEST(ExperimentConfig, Errors) {
  EXPECT_THROW(cli::make_experiment({{"nonsense", "1"}}), train::ConfigError);
  EXPECT_THROW(cli::make_experiment({{"data.asr_count", "many"}}), train::ConfigError);
  EXPECT_THROW(cli::make_experiment({{"reproduce.presets", "kd1,kd99"}}), train::UnknownPresetError);
  EXPECT_THROW(cli::make_experiment({{"preset", "kd1"}, {"losses", "input_kl"}}), train::ConfigError);
}

TEST_F(CliTest, RunDirRejectsEscapingPaths) {
  cli::RunDir d(root_ / "r");
  EXPECT_THROW(d.file("../x"), std::invalid_argument);
  EXPECT_THROW(d.file("a/../../x"), std::invalid_argument);
  EXPECT_THROW(d.file("/etc/passwd"), std::invalid_argument);
  EXPECT_THROW(d.file(""), std::invalid_argument);
  EXPECT_NO_THROW(d.file("sub/ok.txt"));
  EXPECT_THROW(cli::run_path("../elsewhere"), std::invalid_argument);
  EXPECT_THROW(cli::run_path("/abs"), std::invalid_argument);
  EXPECT_EQ(cli::run_path("x"), root_ / "x");
}

TEST_F(CliTest, ManifestListsEveryArtifact) {
  cli::RunDir d(root_ / "m");
  d.write("a.json", "{}\n", "report");
  d.write("log.jsonl", "t\n", "log", true);
  d.write("data/x.txt", "x", "dataset");
  d.write_manifest("test", "k = v\n", 4);
  const auto m = nlohmann::json::parse(num::read_file(root_ / "m" / "manifest.json"));
  EXPECT_EQ(m.at("tool_version"), cli::kToolVersion);
  EXPECT_EQ(m.at("seed"), 4);
  EXPECT_EQ(m.at("artifacts").size(), 3u);
  EXPECT_EQ(m.at("reports"), nlohmann::json::array({"a.json"}));
  EXPECT_EQ(m.at("datasets").size(), 1u);
  EXPECT_TRUE(m.at("artifacts")[1].at("fnv1a").is_null());
  EXPECT_EQ(m.at("artifacts")[0].at("fnv1a"), num::hash_hex(num::fnv1a("{}\n")));
}

TEST_F(CliTest, ExitCodesAreDistinct) {
  EXPECT_EQ(run({}), cli::kUsage);
  EXPECT_EQ(run({"frobnicate"}), cli::kUsage);
  EXPECT_EQ(run({"train", "--teacher", p("none.ckpt"), "--data", p("none.jsonl")}), cli::kMissingFile);
  EXPECT_EQ(run({"train", "--preset", "kd42", "--teacher", p("t"), "--data", p("d")}), cli::kUnknownPreset);
  EXPECT_EQ(run({"--set", "bogus=1", "datagen"}), cli::kInvalidConfig);
  EXPECT_EQ(run({"--set", "steps", "datagen"}), cli::kInvalidConfig);
  EXPECT_EQ(run({"--config", p("missing.cfg"), "datagen"}), cli::kMissingFile);
  EXPECT_EQ(run({"--version"}), cli::kOk);
}

TEST_F(CliTest, PipelineIsIdempotentAndStaysInRunDirs) {
  ASSERT_EQ(run(with_tiny({"--run", "d", "datagen"})), 0);
  ASSERT_EQ(run(with_tiny({"--run", "t", "pretrain", "--corpus", p("d/data/corpus.txt"), "--data",
                           p("d/data/asr.jsonl")})),
            0);
  const std::vector<std::string> sys = {"--preset", "kd5", "--teacher", p("t/teacher.ckpt"), "--data",
                                        p("d/data/asr.jsonl")};
  auto cmd = [&](const std::string& name, const std::string& sub, std::vector<std::string> extra) {
    std::vector<std::string> a = {"--run", name, sub};
    a.insert(a.end(), sys.begin(), sys.end());
    a.insert(a.end(), extra.begin(), extra.end());
    return run(with_tiny(a));
  };
  for (const char* r : {"s1", "s2"}) ASSERT_EQ(cmd(r, "train", {}), 0);
  const std::string student = p("s1/student.ckpt");
  for (const char* r : {"e1", "e2"}) ASSERT_EQ(cmd(r, "eval", {"--student", student}), 0);
  for (const char* r : {"p1", "p2"}) ASSERT_EQ(cmd(r, "probe", {"--student", student, "--layer", "2"}), 0);
  for (const char* r : {"x1", "x2"}) ASSERT_EQ(cmd(r, "decode", {"--student", student, "--example", "0", "--dump-alignment"}), 0);
  ASSERT_EQ(run(with_tiny({"--run", "t2", "pretrain", "--corpus", p("d/data/corpus.txt"), "--data",
                           p("d/data/asr.jsonl")})),
            0);

  for (auto [a, b] : std::vector<std::pair<const char*, const char*>>{
           {"t", "t2"}, {"s1", "s2"}, {"e1", "e2"}, {"p1", "p2"}, {"x1", "x2"}}) {
    const auto fa = stable_artifacts(root_ / a), fb = stable_artifacts(root_ / b);
    EXPECT_EQ(fa, fb) << a << " vs " << b;
  }
  const auto s = stable_artifacts(root_ / "s1");
  for (const char* f : {"student.ckpt", "train_report.json", "train_config.txt", "data/cw.jsonl"})
    EXPECT_EQ(s.count(f), 1u) << f;
  EXPECT_TRUE(fs::exists(root_ / "s1" / "train_log.jsonl"));
  EXPECT_TRUE(fs::exists(root_ / "x1" / "alignment.csv"));
  const auto ev = nlohmann::json::parse(num::read_file(root_ / "e1" / "eval_report.json"));
  EXPECT_EQ(ev.at("preset"), "kd5");

  // Everything written lives under a run directory, and each is listed.
  const std::set<std::string> runs = {"d", "t", "t2", "s1", "s2", "e1", "e2", "p1", "p2", "x1", "x2"};
  for (const auto& e : fs::directory_iterator(root_)) EXPECT_EQ(runs.count(e.path().filename().string()), 1u) << e.path();
  for (const auto& r : runs) {
    const auto m = nlohmann::json::parse(num::read_file(root_ / r / "manifest.json"));
    std::set<std::string> listed{"manifest.json"};
    for (const auto& a : m.at("artifacts")) listed.insert(a.at("path").get<std::string>());
    for (const auto& e : fs::recursive_directory_iterator(root_ / r)) {
      if (!e.is_regular_file()) continue;
      EXPECT_EQ(listed.count(fs::relative(e.path(), root_ / r).string()), 1u) << e.path();
    }
  }
}

TEST_F(CliTest, DecodeRejectsBadExampleAndNonCformerAlignment) {
  ASSERT_EQ(run(with_tiny({"--run", "d", "datagen"})), 0);
  ASSERT_EQ(run(with_tiny({"--run", "t", "pretrain", "--data", p("d/data/asr.jsonl")})), 0);
  ASSERT_EQ(run(with_tiny({"--run", "s", "train", "--preset", "kd1", "--teacher", p("t/teacher.ckpt"), "--data",
                           p("d/data/asr.jsonl")})),
            0);
  const std::vector<std::string> base = {"decode", "--preset", "kd1", "--teacher", p("t/teacher.ckpt"),
                                         "--data", p("d/data/asr.jsonl"), "--student", p("s/student.ckpt")};
  auto with = [&](std::vector<std::string> extra) {
    std::vector<std::string> a = base;
    a.insert(a.end(), extra.begin(), extra.end());
    return run(with_tiny(a));
  };
  EXPECT_EQ(with({"--example", "9999"}), cli::kInvalidConfig);
  EXPECT_EQ(with({"--example", "0"}), 0);
  EXPECT_NE(with({"--example", "0", "--dump-alignment"}), 0);
  // student checkpoint of another preset
  EXPECT_NE(run(with_tiny({"eval", "--preset", "kd4", "--teacher", p("t/teacher.ckpt"), "--data",
                           p("d/data/asr.jsonl"), "--student", p("s/student.ckpt")})),
            0);
}

TEST_F(CliTest, ReproduceEmitsNineRowsDeterministically) {
  auto args = with_tiny({"--set", "steps=1", "--set", "eval.examples=2", "reproduce", "--seeds", "1"});
  std::vector<std::string> a1 = {"--run", "r1"}, a2 = {"--run", "r2"};
  a1.insert(a1.end(), args.begin(), args.end());
  a2.insert(a2.end(), args.begin(), args.end());
  ASSERT_EQ(run(a1), 0);
  ASSERT_EQ(run(a2), 0);
  for (const char* f : {"reproduce_report.md", "reproduce_report.csv", "reproduce_report.json"})
    EXPECT_EQ(num::read_file(root_ / "r1" / f), num::read_file(root_ / "r2" / f)) << f;
  const auto j = nlohmann::json::parse(num::read_file(root_ / "r1" / "reproduce_report.json"));
  ASSERT_EQ(j.at("rows").size(), 9u);
  for (std::size_t i = 0; i < 9; ++i) EXPECT_EQ(j.at("rows")[i].at("system"), train::preset_names()[i]);
}
