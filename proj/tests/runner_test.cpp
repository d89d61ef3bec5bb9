#include "dexlab/runner.hpp"

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "doctest.h"

#include "dexlab/errors.hpp"

using namespace dexlab;
using namespace dexlab::runner;

namespace {

std::string Slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / ("dexlab_runner_" + name)) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

// Tiny but complete training runs.
const KeyValues kTiny = {{"hidden", "8"},         {"batch_size", "16"}, {"updates_per_episode", "2"},
                         {"eval_episodes", "3"},  {"total_steps", "300"}, {"eval_every", "100"},
                         {"bc_epochs", "3"}};

RunConfig TinyConfig(const fs::path& demo_file, const std::string& variant = "dex") {
  KeyValues cli = kTiny;
  cli.push_back({"variant", variant});
  cli.push_back({"demo_file", demo_file.string()});
  cli.push_back({"seed", "3"});
  return ResolveConfig({}, {}, cli);
}

fs::path WriteReachDemos(const fs::path& dir, int episodes = 5) {
  const fs::path p = dir / "reach.jsonl";
  envs::WriteDemoFile(p, envs::GenerateDemonstrations(envs::EnvName::kPointReach, episodes, 1));
  return p;
}

}  // namespace

TEST_CASE("configuration layers apply in order") {
  const KeyValues file = {{"alpha", "1"}, {"k_neighbors", "3"}, {"batch_size", "32"}};
  const KeyValues suite = {{"alpha", "2"}, {"k_neighbors", "7"}};
  const KeyValues cli = {{"alpha", "3"}};
  const RunConfig c = ResolveConfig(file, suite, cli);
  CHECK(c.agent.alpha == 3.0);
  CHECK(c.agent.k_neighbors == 7);
  CHECK(c.agent.batch_size == 32);
  CHECK(c.agent.noise_scale == 0.1);
}

TEST_CASE("the snapshot records every setting and reloads exactly") {
  RunConfig c;
  c.agent.hidden = {64, 32};
  c.agent.gamma = 0.1 + 0.2;  // not exactly representable in short decimal
  c.agent.candidate_pool = 500;
  c.label = "alpha=5";
  const std::string text = c.Serialize();
  CHECK(text.find("alpha = 5\n") != std::string::npos);
  CHECK(text.find("k_neighbors = 5\n") != std::string::npos);
  CHECK(text.find("noise_scale = 0.1\n") != std::string::npos);
  CHECK(text.find("relabel_prob = 0.8\n") != std::string::npos);
  CHECK(text.find("hidden = 64,32\n") != std::string::npos);
  for (const auto& key : ConfigKeys()) CHECK(text.find(key + " = ") != std::string::npos);
  const RunConfig back = ResolveConfig(ParseConfigText(text), {}, {});
  CHECK(back.Serialize() == text);
  CHECK(back.agent.gamma == c.agent.gamma);
  CHECK(back.agent.candidate_pool == 500);
}

TEST_CASE("config text errors carry line numbers") {
  CHECK(ParseConfigText("# comment\n\nalpha = 2  # trailing\n") == KeyValues{{"alpha", "2"}});
  try {
    ParseConfigText("alpha = 1\nlearning_rate = 3\n");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("line 2") != std::string::npos);
  }
  CHECK_THROWS_AS(ParseConfigText("alpha 1\n"), ConfigError);
  CHECK_THROWS_AS(ResolveConfig({{"alpha", "five"}}, {}, {}), ConfigError);
  CHECK_THROWS_AS(ResolveConfig({{"variant", "sac"}}, {}, {}), ConfigError);
  CHECK_THROWS_AS(ResolveConfig({{"clip_targets", "yes"}}, {}, {}), ConfigError);
}

TEST_CASE("a run directory reproduces from its snapshot") {
  TempDir tmp("repro");
  const fs::path demos = WriteReachDemos(tmp.path);
  const RunConfig c = TinyConfig(demos);
  const FinalRecord first = ExecuteRun(c, tmp.path / "a");
  for (const char* f : {"config.txt", "seeds.json", "metrics.csv", "timing.csv", "final.json"})
    CHECK(fs::exists(tmp.path / "a" / f));
  CHECK(fs::exists(tmp.path / "a" / "checkpoints" / "actor_100.ckpt"));
  CHECK(fs::exists(tmp.path / "a" / "checkpoints" / "critic_final.ckpt"));

  const RunConfig again = ResolveConfig(ReadConfigFile(tmp.path / "a" / "config.txt"), {}, {});
  const FinalRecord second = ExecuteRun(again, tmp.path / "b");
  CHECK(Slurp(tmp.path / "a" / "metrics.csv") == Slurp(tmp.path / "b" / "metrics.csv"));
  CHECK(Slurp(tmp.path / "a" / "config.txt") == Slurp(tmp.path / "b" / "config.txt"));
  CHECK(Slurp(tmp.path / "a" / "final.json") == Slurp(tmp.path / "b" / "final.json"));
  CHECK(Slurp(tmp.path / "a" / "checkpoints" / "actor_final.ckpt") ==
        Slurp(tmp.path / "b" / "checkpoints" / "actor_final.ckpt"));
  CHECK(first.success_rate == second.success_rate);
  CHECK(stats::ReadMetricsCsv(tmp.path / "a" / "metrics.csv").size() == 3);
  CHECK(ReadFinalRecord(tmp.path / "a" / "final.json").outcomes == first.outcomes);
}

TEST_CASE("zero steps write an empty log and the initial networks") {
  TempDir tmp("zero");
  const fs::path demos = WriteReachDemos(tmp.path);
  RunConfig c = TinyConfig(demos);
  c.total_steps = 0;
  ExecuteRun(c, tmp.path / "run");
  CHECK(Slurp(tmp.path / "run" / "metrics.csv") == std::string(stats::kMetricsHeader) + "\n");
  CHECK(fs::exists(tmp.path / "run" / "checkpoints" / "actor_final.ckpt"));
}

TEST_CASE("completed runs are never overwritten") {
  TempDir tmp("resume");
  const fs::path demos = WriteReachDemos(tmp.path);
  const RunConfig c = TinyConfig(demos);
  ExecuteRun(c, tmp.path / "run");
  RunOptions resume;
  resume.resume = true;
  CHECK_THROWS_AS(ExecuteRun(c, tmp.path / "run", resume), UsageError);
  CHECK_THROWS_AS(ExecuteRun(c, tmp.path / "run"), UsageError);

  // An interrupted run (no final.json) restarts and ends where a clean run would.
  fs::remove(tmp.path / "run" / "final.json");
  const std::string metrics = Slurp(tmp.path / "run" / "metrics.csv");
  CHECK_THROWS_AS(ExecuteRun(c, tmp.path / "run"), UsageError);
  ExecuteRun(c, tmp.path / "run", resume);
  CHECK(Slurp(tmp.path / "run" / "metrics.csv") == metrics);
}

TEST_CASE("missing demonstrations are diagnosed before training") {
  TempDir tmp("nodemo");
  RunConfig c = TinyConfig("");
  try {
    ExecuteRun(c, tmp.path / "run");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("dex") != std::string::npos);
  }
  c.demo_file = (tmp.path / "absent.jsonl").string();
  CHECK_THROWS_AS(ExecuteRun(c, tmp.path / "run2"), ConfigError);
  const fs::path demos = WriteReachDemos(tmp.path);
  c = TinyConfig(demos);
  c.env = "point_pickplace";
  CHECK_THROWS_AS(ExecuteRun(c, tmp.path / "run3"), ConfigError);
  c = TinyConfig(demos);
  c.demo_episodes = 9;
  CHECK_THROWS_AS(ExecuteRun(c, tmp.path / "run4"), ConfigError);
  c.demo_episodes = 2;
  CHECK(LoadDemosFor(c)->episodes.size() == 2);
  c = TinyConfig("", "ddpg");
  CHECK_FALSE(LoadDemosFor(c).has_value());
}

TEST_CASE("aggregating an empty tree is a usage error") {
  TempDir tmp("empty");
  CHECK_THROWS_AS(AggregateTree(tmp.path, tmp.path / "out", stats::Grouping::kPerDomain, 0), UsageError);
  CHECK_THROWS_AS(PlotTree(tmp.path, tmp.path / "out", 0), UsageError);
}

TEST_CASE("suites plan seeds and directories deterministically") {
  Suite s = BuiltinSuite("ablation-alpha");
  s.seed_base = 100;
  s.seeds = 2;
  const auto plan = PlanSuite(s, "out");
  CHECK(plan.size() == 20);
  CHECK(plan[0].seed == 100);
  CHECK(plan[19].seed == 119);
  CHECK(plan[0].dir == fs::path("out/runs/0000_point_pickplace_dex_alpha_0"));
  CHECK(plan[0].entry.overrides == KeyValues{{"alpha", "0"}});
  CHECK(BuiltinSuite("table1-mini").entries.size() == 20);
  CHECK(BuiltinSuite("ablation-variant").entries.size() == 8);
  CHECK_THROWS_AS(BuiltinSuite("table2"), ConfigError);
}

TEST_CASE("suite files parse") {
  TempDir tmp("suitefile");
  {
    std::ofstream out(tmp.path / "s.json");
    out << R"({"name": "mine", "seed_base": 7, "seeds": 2, "demo_episodes": 5,
               "base": {"hidden": [8], "total_steps": 200},
               "runs": [{"env": "point_reach", "variant": "dex", "label": "k=3", "overrides": {"k_neighbors": 3}}]})";
  }
  const Suite s = ReadSuiteFile(tmp.path / "s.json");
  CHECK(s.name == "mine");
  CHECK(s.seed_base == 7);
  CHECK(s.base == KeyValues{{"hidden", "8"}, {"total_steps", "200"}});
  REQUIRE(s.entries.size() == 1);
  CHECK(s.entries[0].overrides == KeyValues{{"k_neighbors", "3"}});
  {
    std::ofstream out(tmp.path / "bad.json");
    out << R"({"name": "x", "runs": []})";
  }
  CHECK_THROWS_AS(ReadSuiteFile(tmp.path / "bad.json"), ConfigError);
}

TEST_CASE("a small suite is deterministic, aggregates per domain and plots its curves") {
  TempDir tmp("suite");
  Suite s;
  s.name = "mini";
  s.seed_base = 40;
  s.seeds = 3;
  s.demo_episodes = 5;
  s.base = kTiny;
  s.entries = {{"point_reach", "dex", "", {}}, {"point_reach", "ddpg", "", {}}, {"point_reach", "vinn", "", {}}};
  const BenchResult a = RunSuite(s, tmp.path / "a", {}, {}, stats::Grouping::kPerDomain);
  const BenchResult b = RunSuite(s, tmp.path / "b", {}, {}, stats::Grouping::kPerDomain);
  CHECK(a.failures.empty());
  CHECK(a.records.size() == 9);
  CHECK(Slurp(tmp.path / "a" / "report.csv") == Slurp(tmp.path / "b" / "report.csv"));
  CHECK(Slurp(tmp.path / "a" / "report.txt") == Slurp(tmp.path / "b" / "report.txt"));
  CHECK(Slurp(tmp.path / "a" / "report.txt").find("reach IQM") != std::string::npos);
  // ddpg never receives the suite demonstrations.
  CHECK(Slurp(tmp.path / "a" / "runs" / "0003_point_reach_ddpg" / "config.txt").find("demo_file = \n") !=
        std::string::npos);

  // Rerunning reuses completed runs.
  const auto before = fs::last_write_time(tmp.path / "a" / "runs" / "0000_point_reach_dex" / "final.json");
  RunSuite(s, tmp.path / "a", {}, {}, stats::Grouping::kPerDomain);
  CHECK(fs::last_write_time(tmp.path / "a" / "runs" / "0000_point_reach_dex" / "final.json") == before);

  const auto report = AggregateTree(tmp.path / "a", tmp.path / "agg", stats::Grouping::kPerDomain, 40);
  CHECK(report.group_rows.size() == 3);
  CHECK(report.group_rows[0].group == "reach");
  CHECK(Slurp(tmp.path / "agg" / "report.csv") == Slurp(tmp.path / "a" / "report.csv"));

  PlotTree(tmp.path / "a", tmp.path / "plot", 40);
  CHECK(fs::exists(tmp.path / "plot" / "plots" / "point_reach.svg"));
  const std::string curve = Slurp(tmp.path / "plot" / "curves" / "point_reach__dex.csv");
  CHECK(curve.rfind("step,runs,mean,iqm,ci_lower,ci_upper\n100,3,", 0) == 0);

  // The plotted band is the bootstrap interval of the per-step scores.
  std::vector<std::vector<stats::MetricsRow>> series;
  for (const char* d : {"0000_point_reach_dex", "0001_point_reach_dex", "0002_point_reach_dex"})
    series.push_back(stats::ReadMetricsCsv(tmp.path / "a" / "runs" / d / "metrics.csv"));
  const auto points = LearningCurve(series, 40);
  REQUIRE(points.size() == 3);
  std::mt19937_64 rng(40);
  for (const auto& p : points) {
    std::vector<double> v;
    for (const auto& s : series)
      for (const auto& r : s)
        if (r.step == p.step) v.push_back(r.eval_success);
    const stats::Interval ci = stats::StratifiedBootstrapCi({v}, 2000, 0.95, rng);
    CHECK(p.ci_lower == ci.lower);
    CHECK(p.ci_upper == ci.upper);
    CHECK(p.iqm == stats::Iqm(v));
  }
}

TEST_CASE("a single run plots its own metrics") {
  TempDir tmp("single");
  const fs::path demos = WriteReachDemos(tmp.path);
  ExecuteRun(TinyConfig(demos), tmp.path / "runs" / "one");
  PlotTree(tmp.path / "runs", tmp.path / "plot", 0);
  const auto metrics = stats::ReadMetricsCsv(tmp.path / "runs" / "one" / "metrics.csv");
  std::ostringstream expected;
  expected << "step,runs,mean,iqm,ci_lower,ci_upper\n";
  for (const auto& r : metrics) {
    const std::string v = stats::FormatDouble(r.eval_success);
    expected << r.step << ",1," << v << ',' << v << ',' << v << ',' << v << '\n';
  }
  CHECK(Slurp(tmp.path / "plot" / "curves" / "point_reach__dex.csv") == expected.str());
}

TEST_CASE("worker count honours DEXLAB_THREADS") {
  ::setenv("DEXLAB_THREADS", "1", 1);
  CHECK(WorkerCount(10) == 1);
  ::setenv("DEXLAB_THREADS", "zero", 1);
  CHECK_THROWS_AS(WorkerCount(10), ConfigError);
  ::unsetenv("DEXLAB_THREADS");
  CHECK(WorkerCount(1) == 1);
  CHECK(WorkerCount(1000) >= 1);
}
