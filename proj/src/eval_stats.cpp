#include "dexlab/eval_stats.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "dexlab/agents.hpp"
#include "dexlab/envs.hpp"
#include "dexlab/errors.hpp"

namespace dexlab::stats {
namespace {

struct Moments {
  double mean = 0.0;
  double std = 0.0;
};

Moments PopulationMoments(const std::vector<double>& v) {
  Moments m;
  m.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - m.mean) * (x - m.mean);
  m.std = std::sqrt(ss / static_cast<double>(v.size()));
  return m;
}

std::vector<double> Pool(const std::vector<std::vector<double>>& tasks) {
  std::vector<double> pooled;
  for (const auto& t : tasks) pooled.insert(pooled.end(), t.begin(), t.end());
  return pooled;
}

std::string Fixed(double v, int digits) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

std::string PadRight(const std::string& s, std::size_t width) {
  return s.size() >= width ? s : s + std::string(width - s.size(), ' ');
}

// Order of first appearance in `preferred`, then the rest sorted.
std::vector<std::string> Ordered(const std::set<std::string>& present, const std::vector<std::string>& preferred) {
  std::vector<std::string> out;
  for (const auto& p : preferred) {
    if (present.count(p)) out.push_back(p);
  }
  for (const auto& p : present) {
    if (std::find(out.begin(), out.end(), p) == out.end()) out.push_back(p);
  }
  return out;
}

std::vector<std::string> TaskRegistryNames() {
  std::vector<std::string> out;
  for (auto e : envs::EnvRegistry()) out.emplace_back(envs::ToString(e));
  return out;
}

std::vector<std::string> AgentRegistryNames() {
  std::vector<std::string> out;
  for (auto v : agents::VariantRegistry()) out.emplace_back(agents::ToString(v));
  return out;
}

std::string ColumnName(const RunRecord& r) { return r.label.empty() ? r.agent : r.agent + "[" + r.label + "]"; }

}  // namespace

double SuccessRate(const std::vector<bool>& outcomes) {
  if (outcomes.empty()) throw UsageError("success rate of an empty outcome list");
  const auto hits = std::count(outcomes.begin(), outcomes.end(), true);
  return static_cast<double>(hits) / static_cast<double>(outcomes.size());
}

double Iqm(std::span<const double> scores) {
  if (scores.empty()) throw UsageError("IQM of an empty score list");
  std::vector<double> s(scores.begin(), scores.end());
  std::sort(s.begin(), s.end());
  const double n = static_cast<double>(s.size());
  const double lo = 0.25 * n;
  const double hi = 0.75 * n;
  double sum = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    const double a = static_cast<double>(i);
    const double w = std::min(a + 1.0, hi) - std::max(a, lo);
    if (w > 0.0) sum += w * s[i];
  }
  return sum / (hi - lo);
}

double Percentile(std::vector<double> values, double q) {
  if (values.empty()) throw UsageError("percentile of an empty sample");
  std::sort(values.begin(), values.end());
  const double pos = std::clamp(q, 0.0, 1.0) * static_cast<double>(values.size() - 1);
  const auto i = static_cast<std::size_t>(std::floor(pos));
  if (i + 1 >= values.size()) return values.back();
  const double frac = pos - static_cast<double>(i);
  return values[i] + frac * (values[i + 1] - values[i]);
}

Interval StratifiedBootstrapCi(const std::vector<std::vector<double>>& tasks, int n_resamples, double level,
                               std::mt19937_64& rng) {
  if (tasks.empty()) throw UsageError("bootstrap over an empty score matrix");
  if (!(level > 0.0 && level < 1.0)) throw UsageError("confidence level must lie in (0,1)");
  if (n_resamples < 1) throw UsageError("n_resamples must be >= 1");
  for (const auto& t : tasks) {
    if (t.empty()) throw UsageError("bootstrap task column has no runs");
  }
  const std::vector<double> pooled = Pool(tasks);
  const bool degenerate =
      std::any_of(tasks.begin(), tasks.end(), [](const std::vector<double>& t) { return t.size() < 2; });
  if (degenerate) {
    const double point = Iqm(pooled);
    return {point, point, true};
  }
  std::vector<double> stats(static_cast<std::size_t>(n_resamples));
  std::vector<double> draw(pooled.size());
  for (int r = 0; r < n_resamples; ++r) {
    std::size_t pos = 0;
    for (const auto& column : tasks) {
      std::uniform_int_distribution<std::size_t> pick(0, column.size() - 1);
      for (std::size_t i = 0; i < column.size(); ++i) draw[pos++] = column[pick(rng)];
    }
    stats[static_cast<std::size_t>(r)] = Iqm(draw);
  }
  std::sort(stats.begin(), stats.end());
  return {Percentile(stats, (1.0 - level) / 2.0), Percentile(stats, (1.0 + level) / 2.0), false};
}

Grouping ParseGrouping(const std::string& name) {
  if (name == "per-task") return Grouping::kPerTask;
  if (name == "per-domain") return Grouping::kPerDomain;
  if (name == "overall") return Grouping::kOverall;
  throw ConfigError("unknown grouping '" + name + "' (per-task, per-domain, overall)");
}

std::string ToString(Grouping g) {
  switch (g) {
    case Grouping::kPerTask: return "per-task";
    case Grouping::kPerDomain: return "per-domain";
    case Grouping::kOverall: return "overall";
  }
  return "?";
}

std::string DomainOf(const std::string& task) {
  if (task == "point_reach") return "reach";
  if (task == "point_pickplace") return "single-arm";
  if (task == "bipoint_transfer") return "bimanual";
  if (task == "point_track") return "tracking";
  return task;
}

const std::vector<std::string>& DomainRegistry() {
  static const std::vector<std::string> kDomains = {"reach", "single-arm", "bimanual", "tracking"};
  return kDomains;
}

AggregateReport Aggregate(const std::vector<RunRecord>& records, const AggregateOptions& options) {
  if (records.empty()) throw UsageError("no run records to aggregate");
  std::set<std::int64_t> budgets;
  for (const auto& r : records) {
    budgets.insert(r.step_budget);
    if (!(r.score >= 0.0 && r.score <= 1.0)) {
      throw ConfigError("run score outside [0,1] for " + r.task + " seed " + std::to_string(r.seed));
    }
  }
  if (budgets.size() > 1) {
    std::string list;
    for (auto b : budgets) list += (list.empty() ? "" : ", ") + std::to_string(b);
    throw ConfigError("records mix step budgets {" + list + "}; compare runs at one budget");
  }

  AggregateReport report;
  report.grouping = options.grouping;
  report.n_resamples = options.n_resamples;
  report.level = options.level;

  std::set<std::string> task_set, agent_set;
  for (const auto& r : records) {
    task_set.insert(r.task);
    agent_set.insert(ColumnName(r));
  }
  report.tasks = Ordered(task_set, TaskRegistryNames());
  {
    // Variants in registry order; sweep levels keep their numeric order.
    std::vector<std::string> agents(agent_set.begin(), agent_set.end());
    const auto registry = AgentRegistryNames();
    auto rank = [&](const std::string& col) {
      const std::string base = col.substr(0, col.find('['));
      const auto it = std::find(registry.begin(), registry.end(), base);
      return static_cast<std::size_t>(it - registry.begin());
    };
    auto level_value = [](const std::string& col) {
      const auto eq = col.find('=');
      if (eq == std::string::npos) return 0.0;
      double v = 0.0;
      const char* first = col.data() + eq + 1;
      const char* last = col.data() + col.size() - 1;
      std::from_chars(first, last, v);
      return v;
    };
    std::stable_sort(agents.begin(), agents.end(), [&](const std::string& a, const std::string& b) {
      if (rank(a) != rank(b)) return rank(a) < rank(b);
      if (level_value(a) != level_value(b)) return level_value(a) < level_value(b);
      return a < b;
    });
    report.agents = agents;
  }

  // scores[agent][task] in record order.
  std::map<std::string, std::map<std::string, std::vector<double>>> scores;
  for (const auto& r : records) scores[ColumnName(r)][r.task].push_back(r.score);

  for (const auto& task : report.tasks) {
    for (const auto& agent : report.agents) {
      auto it = scores[agent].find(task);
      if (it == scores[agent].end()) continue;
      const Moments m = PopulationMoments(it->second);
      report.task_rows.push_back({task, agent, static_cast<int>(it->second.size()), m.mean, m.std});
    }
  }

  std::vector<std::pair<std::string, std::vector<std::string>>> groups;
  switch (options.grouping) {
    case Grouping::kPerTask:
      for (const auto& t : report.tasks) groups.push_back({t, {t}});
      break;
    case Grouping::kPerDomain: {
      std::set<std::string> domain_set;
      for (const auto& t : report.tasks) domain_set.insert(DomainOf(t));
      for (const auto& d : Ordered(domain_set, DomainRegistry())) {
        std::vector<std::string> members;
        for (const auto& t : report.tasks) {
          if (DomainOf(t) == d) members.push_back(t);
        }
        groups.push_back({d, members});
      }
      break;
    }
    case Grouping::kOverall:
      groups.push_back({"overall", report.tasks});
      break;
  }

  std::mt19937_64 rng(options.seed);
  for (const auto& [name, members] : groups) {
    for (const auto& agent : report.agents) {
      std::vector<std::vector<double>> columns;
      for (const auto& t : members) {
        auto it = scores[agent].find(t);
        if (it != scores[agent].end()) columns.push_back(it->second);
      }
      if (columns.empty()) continue;
      GroupSummary g;
      g.group = name;
      g.agent = agent;
      const std::vector<double> pooled = Pool(columns);
      g.runs = static_cast<int>(pooled.size());
      g.iqm = Iqm(pooled);
      g.ci = StratifiedBootstrapCi(columns, options.n_resamples, options.level, rng);
      if (g.ci.degenerate) {
        report.warnings.push_back("degenerate CI for " + agent + " on " + name +
                                  ": a task has fewer than 2 runs; reporting the point estimate");
      }
      report.group_rows.push_back(g);
    }
  }
  return report;
}

std::string AggregateReport::ToCsv() const {
  std::ostringstream os;
  os << "kind,name,agent,runs,mean,std,iqm,ci_lower,ci_upper\n";
  for (const auto& r : task_rows) {
    os << "task," << r.task << ',' << r.agent << ',' << r.runs << ',' << FormatDouble(r.mean) << ','
       << FormatDouble(r.std) << ",,,\n";
  }
  for (const auto& g : group_rows) {
    os << ToString(grouping) << ',' << g.group << ',' << g.agent << ',' << g.runs << ",,," << FormatDouble(g.iqm)
       << ',' << FormatDouble(g.ci.lower) << ',' << FormatDouble(g.ci.upper) << '\n';
  }
  return os.str();
}

std::string AggregateReport::ToText() const {
  std::map<std::pair<std::string, std::string>, std::string> cells;
  for (const auto& r : task_rows) cells[{r.task, r.agent}] = Fixed(r.mean, 2) + "±" + Fixed(r.std, 2);
  for (const auto& g : group_rows) {
    cells[{"#" + g.group, g.agent}] =
        Fixed(g.iqm, 2) + " [" + Fixed(g.ci.lower, 2) + "," + Fixed(g.ci.upper, 2) + "]";
  }

  // Row order: each domain's tasks followed by its aggregate row.
  std::vector<std::pair<std::string, std::string>> rows;  // (key, label)
  std::set<std::string> emitted_groups;
  auto group_of = [&](const std::string& task) {
    switch (grouping) {
      case Grouping::kPerTask: return task;
      case Grouping::kPerDomain: return DomainOf(task);
      case Grouping::kOverall: return std::string("overall");
    }
    return task;
  };
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    rows.push_back({tasks[i], tasks[i]});
    const std::string g = group_of(tasks[i]);
    const bool last_of_group = i + 1 == tasks.size() || group_of(tasks[i + 1]) != g;
    if (last_of_group && grouping != Grouping::kOverall && !emitted_groups.count(g)) {
      rows.push_back({"#" + g, g + " IQM"});
      emitted_groups.insert(g);
    }
  }
  if (grouping == Grouping::kOverall) rows.push_back({"#overall", "overall IQM"});

  const std::size_t width_label = [&] {
    std::size_t w = 4;
    for (const auto& r : rows) w = std::max(w, r.second.size());
    return w + 2;
  }();
  constexpr std::size_t kCell = 20;
  std::ostringstream os;
  os << PadRight("task", width_label);
  for (const auto& a : agents) os << PadRight(a, std::max(kCell, a.size() + 2));
  os << '\n';
  for (const auto& [key, label] : rows) {
    os << PadRight(label, width_label);
    for (const auto& a : agents) {
      auto it = cells.find({key, a});
      const std::string cell = it == cells.end() ? "-" : it->second;
      // "±" is two bytes but one column.
      const std::size_t extra = cell.find("±") != std::string::npos ? 1 : 0;
      os << PadRight(cell, std::max(kCell, a.size() + 2) + extra);
    }
    os << '\n';
  }
  os << "mean±std over runs (population std); IQM with " << Fixed(level * 100.0, 0) << "% stratified bootstrap CI, "
     << n_resamples << " resamples\n";
  for (const auto& w : warnings) os << "warning: " << w << '\n';
  return os.str();
}

std::vector<MetricsRow> ReadMetricsCsv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open metrics file " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != kMetricsHeader) {
    throw ConfigError(path.string() + ": expected header '" + kMetricsHeader + "'");
  }
  std::vector<MetricsRow> rows;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, ',')) fields.push_back(f);
    if (fields.size() != 4) {
      throw ConfigError(path.string() + ":" + std::to_string(line_no) + ": expected 4 fields");
    }
    try {
      MetricsRow r;
      r.step = std::stoll(fields[0]);
      r.critic_loss = std::stod(fields[1]);
      r.actor_objective = std::stod(fields[2]);
      r.eval_success = std::stod(fields[3]);
      rows.push_back(r);
    } catch (const std::exception&) {
      throw ConfigError(path.string() + ":" + std::to_string(line_no) + ": malformed number");
    }
  }
  return rows;
}

std::string FormatDouble(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

}  // namespace dexlab::stats
