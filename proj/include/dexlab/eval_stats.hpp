#pragma once

// Success rates, interquartile means and stratified bootstrap confidence
// intervals over (run x task) score tables, plus report rendering.

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace dexlab::stats {

// Throws UsageError on an empty list.
double SuccessRate(const std::vector<bool>& outcomes);

// Mean of the middle half of the sorted scores. Each sorted score covers a
// unit of rank mass; mass below n/4 or above 3n/4 is trimmed, so a score
// straddling a cut contributes in proportion to its retained mass.
double Iqm(std::span<const double> scores);

struct Interval {
  double lower = 0.0;
  double upper = 0.0;
  bool degenerate = false;  // fewer than two runs in some task
};

// `tasks[j]` holds the run scores of task j. Each resample draws runs with
// replacement within every task, pools the draws and takes their IQM; the
// interval is the ((1-level)/2, (1+level)/2) percentile pair over resamples
// (linear interpolation between order statistics).
Interval StratifiedBootstrapCi(const std::vector<std::vector<double>>& tasks, int n_resamples, double level,
                               std::mt19937_64& rng);

// Linear-interpolation percentile, q in [0,1], of an unsorted sample.
double Percentile(std::vector<double> values, double q);

struct RunRecord {
  std::string task;
  std::uint64_t seed = 0;
  std::string agent;
  double score = 0.0;
  std::int64_t step_budget = 0;
  std::string label;  // optional suffix distinguishing sweep levels, e.g. "alpha=5"
};

enum class Grouping { kPerTask, kPerDomain, kOverall };
Grouping ParseGrouping(const std::string& name);
std::string ToString(Grouping g);

// Fixed toy-task domain registry; unknown tasks form their own domain.
std::string DomainOf(const std::string& task);
const std::vector<std::string>& DomainRegistry();

struct TaskSummary {
  std::string task;
  std::string agent;
  int runs = 0;
  double mean = 0.0;
  double std = 0.0;  // population (denominator n)
};

struct GroupSummary {
  std::string group;
  std::string agent;
  int runs = 0;
  double iqm = 0.0;
  Interval ci;
};

struct AggregateReport {
  Grouping grouping = Grouping::kPerDomain;
  int n_resamples = 2000;
  double level = 0.95;
  std::vector<std::string> agents;  // column order
  std::vector<std::string> tasks;   // registry order
  std::vector<TaskSummary> task_rows;
  std::vector<GroupSummary> group_rows;
  std::vector<std::string> warnings;

  std::string ToCsv() const;
  // Fixed-width table: tasks and aggregate rows down, agents across.
  std::string ToText() const;
};

struct AggregateOptions {
  Grouping grouping = Grouping::kPerDomain;
  int n_resamples = 2000;
  double level = 0.95;
  std::uint64_t seed = 0;
};

// Throws ConfigError when records mix step budgets, UsageError when empty.
AggregateReport Aggregate(const std::vector<RunRecord>& records, const AggregateOptions& options);

// The metrics file written by training runs.
struct MetricsRow {
  std::int64_t step = 0;
  double critic_loss = 0.0;
  double actor_objective = 0.0;
  double eval_success = 0.0;
};
inline constexpr const char* kMetricsHeader = "step,critic_loss,actor_objective,eval_success";
std::vector<MetricsRow> ReadMetricsCsv(const std::filesystem::path& path);

// Shortest decimal text that parses back to the same double.
std::string FormatDouble(double v);

}  // namespace dexlab::stats
