#pragma once

// Run configuration, reproducible run directories, benchmark suites and the
// aggregate / plot passes behind the dexlab command line.
//
// A run directory holds
//   config.txt           resolved configuration (re-executable with --config)
//   seeds.json           run, evaluation and demonstration seeds
//   metrics.csv          step,critic_loss,actor_objective,eval_success
//   timing.csv           step,seconds (wall clock, kept apart so metrics are reproducible)
//   checkpoints/         actor_<step>.ckpt, critic_<step>.ckpt, actor_final.ckpt, ...
//   final.json           final evaluation record; its presence marks the run complete

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "dexlab/agents.hpp"
#include "dexlab/eval_stats.hpp"

namespace dexlab::runner {

namespace fs = std::filesystem;

// Flat key/value layer, in insertion order.
using KeyValues = std::vector<std::pair<std::string, std::string>>;

struct RunConfig {
  std::string env = "point_reach";
  agents::AgentConfig agent;
  std::int64_t total_steps = 100'000;
  std::int64_t eval_every = 5'000;
  std::uint64_t seed = 0;
  std::string demo_file;  // required by demonstration-driven variants
  int demo_episodes = 0;  // 0 keeps every episode in the file
  std::string label;      // free-form tag carried into reports, e.g. "alpha=5"

  // Throws ConfigError on unknown keys or unparsable values.
  void Set(const std::string& key, const std::string& value);
  void Apply(const KeyValues& layer);
  // Every key, one `key = value` line each, doubles in round-trip form.
  std::string Serialize() const;
  void Validate() const;
};

const std::vector<std::string>& ConfigKeys();

// `key = value` lines; '#' starts a comment. Throws ConfigError with the line number.
KeyValues ParseConfigText(const std::string& text);
KeyValues ReadConfigFile(const fs::path& path);

// Built-in defaults, then the config file, then suite overrides, then flags.
RunConfig ResolveConfig(const KeyValues& config_file, const KeyValues& suite_override, const KeyValues& cli);

struct FinalRecord {
  std::string env;
  std::string variant;
  std::string label;
  std::uint64_t seed = 0;
  std::int64_t step_budget = 0;
  int episodes = 0;
  double success_rate = 0.0;
  std::vector<bool> outcomes;
};

FinalRecord ReadFinalRecord(const fs::path& path);

struct RunOptions {
  bool resume = false;  // allowed only while final.json is absent
  bool quiet = true;
};

// Trains into `dir` and returns the final record. Throws UsageError when the
// directory already holds a run (or a completed run under --resume).
FinalRecord ExecuteRun(const RunConfig& config, const fs::path& dir, const RunOptions& options = {});

// Loads the demonstrations a config refers to, or returns nullopt for a
// variant that runs without them.
std::optional<envs::DemoSet> LoadDemosFor(const RunConfig& config);

// ---------------------------------------------------------------------------
// Benchmark suites

struct SuiteEntry {
  std::string env;
  std::string variant;
  std::string label;
  KeyValues overrides;
};

struct Suite {
  std::string name;
  std::uint64_t seed_base = 0;
  int seeds = 5;
  int demo_episodes = 100;  // demonstrations generated per environment
  KeyValues base;           // applied to every entry before its own overrides
  std::vector<SuiteEntry> entries;
};

const std::vector<std::string>& BuiltinSuiteNames();
// Throws ConfigError for unknown names.
Suite BuiltinSuite(const std::string& name);
// JSON suite file; see README for the schema.
Suite ReadSuiteFile(const fs::path& path);

struct PlannedRun {
  int index = 0;
  std::uint64_t seed = 0;  // seed_base + index
  SuiteEntry entry;
  fs::path dir;
};

std::vector<PlannedRun> PlanSuite(const Suite& suite, const fs::path& out);

struct BenchResult {
  std::vector<stats::RunRecord> records;
  std::vector<std::string> failures;  // one line per failed run
  stats::AggregateReport report;
  bool has_report = false;
};

// DEXLAB_THREADS caps the worker count; default is the logical core count.
int WorkerCount(std::size_t runs);

// Runs every planned entry (completed runs are reused), then aggregates.
// `config_file` and `cli` are the outer precedence layers around each
// entry's overrides.
BenchResult RunSuite(const Suite& suite, const fs::path& out, const KeyValues& config_file, const KeyValues& cli,
                     stats::Grouping grouping, const std::function<void(const std::string&)>& log = {});

// ---------------------------------------------------------------------------
// Results trees

// Every completed run (final.json) below `root`, sorted by path.
std::vector<fs::path> FindRunDirs(const fs::path& root);
std::vector<stats::RunRecord> CollectRecords(const fs::path& root);

// Writes report.csv and report.txt into `out`. Throws UsageError on an empty tree.
stats::AggregateReport AggregateTree(const fs::path& root, const fs::path& out, stats::Grouping grouping,
                                     std::uint64_t seed);

struct CurvePoint {
  std::int64_t step = 0;
  int runs = 0;
  double mean = 0.0;
  double iqm = 0.0;
  double ci_lower = 0.0;
  double ci_upper = 0.0;
};

// Per eval step across `series` (one metrics column per run). Steps missing
// from some run are skipped.
std::vector<CurvePoint> LearningCurve(const std::vector<std::vector<stats::MetricsRow>>& series,
                                      std::uint64_t seed, int n_resamples = 2000);

// Writes curves/<env>__<agent>.csv and plots/<env>.svg; returns the files written.
std::vector<fs::path> PlotTree(const fs::path& root, const fs::path& out, std::uint64_t seed);

}  // namespace dexlab::runner
