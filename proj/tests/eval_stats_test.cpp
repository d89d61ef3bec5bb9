#include "dexlab/eval_stats.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "doctest.h"

#include "dexlab/errors.hpp"

using namespace dexlab;
using namespace dexlab::stats;

namespace {

std::vector<std::vector<double>> RandomMatrix(int tasks, int runs, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<std::vector<double>> m(tasks, std::vector<double>(runs));
  for (auto& col : m)
    for (double& x : col) x = u(rng);
  return m;
}

std::vector<double> Flatten(const std::vector<std::vector<double>>& m) {
  std::vector<double> out;
  for (const auto& c : m) out.insert(out.end(), c.begin(), c.end());
  return out;
}

RunRecord Rec(std::string task, std::uint64_t seed, std::string agent, double score, std::string label = "") {
  return {std::move(task), seed, std::move(agent), score, 100000, std::move(label)};
}

}  // namespace

TEST_CASE("success rate counts successes over episodes") {
  CHECK(SuccessRate({true, true, false, true}) == 0.75);
  CHECK(SuccessRate({false}) == 0.0);
  CHECK(SuccessRate(std::vector<bool>(20, true)) == 1.0);
  CHECK_THROWS_AS(SuccessRate({}), UsageError);
}

TEST_CASE("IQM reference values") {
  const std::vector<double> four = {1, 2, 3, 4};
  CHECK(Iqm(four) == 2.5);
  const std::vector<double> eight = {1, 2, 3, 4, 5, 6, 7, 8};
  CHECK(Iqm(eight) == 4.5);
  const std::vector<double> constant(7, 0.3);
  CHECK(Iqm(constant) == doctest::Approx(0.3).epsilon(1e-15));
  const std::vector<double> one = {0.7};
  CHECK(Iqm(one) == 0.7);
  const std::vector<double> two = {0.2, 0.6};
  CHECK(Iqm(two) == doctest::Approx(0.4).epsilon(1e-15));
  // n = 5: ranks [1.25, 3.75] keep 0.75 of the 2nd, all of the 3rd, 0.75 of the 4th.
  const std::vector<double> five = {0, 1, 2, 3, 100};
  CHECK(Iqm(five) == doctest::Approx((0.75 * 1 + 2 + 0.75 * 3) / 2.5).epsilon(1e-15));
  CHECK_THROWS_AS(Iqm(std::vector<double>{}), UsageError);
}

TEST_CASE("IQM is bounded, permutation invariant and monotone") {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int t = 0; t < 200; ++t) {
    std::vector<double> x(1 + t % 17);
    for (double& v : x) v = u(rng);
    const double q = Iqm(x);
    CHECK(q >= *std::min_element(x.begin(), x.end()) - 1e-15);
    CHECK(q <= *std::max_element(x.begin(), x.end()) + 1e-15);
    std::vector<double> y = x;
    std::shuffle(y.begin(), y.end(), rng);
    CHECK(Iqm(y) == doctest::Approx(q).epsilon(1e-14));
    for (double& v : y) v += u(rng) * 0.1;
    CHECK(Iqm(y) >= Iqm(x) - 1e-15);
  }
}

TEST_CASE("percentile interpolates between order statistics") {
  CHECK(Percentile({3, 1, 2}, 0.5) == 2.0);
  CHECK(Percentile({1, 2, 3, 4}, 0.5) == 2.5);
  CHECK(Percentile({1, 2, 3, 4}, 0.0) == 1.0);
  CHECK(Percentile({1, 2, 3, 4}, 1.0) == 4.0);
  CHECK(Percentile({0, 10}, 0.25) == 2.5);
}

TEST_CASE("a constant score matrix has a zero-width interval") {
  std::mt19937_64 rng(2);
  const std::vector<std::vector<double>> m(3, std::vector<double>(5, 0.4));
  const Interval ci = StratifiedBootstrapCi(m, 500, 0.95, rng);
  CHECK(ci.lower == doctest::Approx(0.4).epsilon(1e-14));
  CHECK(ci.upper == doctest::Approx(0.4).epsilon(1e-14));
  CHECK(ci.upper - ci.lower < 1e-14);
  CHECK_FALSE(ci.degenerate);
}

TEST_CASE("the interval brackets the point estimate") {
  std::mt19937_64 rng(3);
  for (int t = 0; t < 100; ++t) {
    const auto m = RandomMatrix(1 + t % 4, 5 + t % 6, rng);
    const double point = Iqm(Flatten(m));
    const Interval ci = StratifiedBootstrapCi(m, 2000, 0.95, rng);
    CHECK(ci.lower <= point);
    CHECK(point <= ci.upper);
  }
}

TEST_CASE("the interval is reproducible from the seed") {
  std::mt19937_64 gen(4);
  const auto m = RandomMatrix(2, 10, gen);
  std::mt19937_64 a(99), b(99), c(100);
  const Interval x = StratifiedBootstrapCi(m, 2000, 0.95, a);
  const Interval y = StratifiedBootstrapCi(m, 2000, 0.95, b);
  const Interval z = StratifiedBootstrapCi(m, 2000, 0.95, c);
  CHECK(x.lower == y.lower);
  CHECK(x.upper == y.upper);
  CHECK((x.lower != z.lower || x.upper != z.upper));
}

TEST_CASE("resampling stays within each task") {
  // Task 0 is all zeros and task 1 all ones: every stratified resample holds
  // exactly five of each, so the pooled IQM never moves.
  std::mt19937_64 rng(5);
  const std::vector<std::vector<double>> m = {std::vector<double>(5, 0.0), std::vector<double>(5, 1.0)};
  const Interval ci = StratifiedBootstrapCi(m, 1000, 0.95, rng);
  CHECK(ci.lower == 0.5);
  CHECK(ci.upper == 0.5);
}

TEST_CASE("a wider level widens the interval toward the resample extremes") {
  std::mt19937_64 gen(6);
  const auto m = RandomMatrix(2, 8, gen);
  std::mt19937_64 a(7), b(7), c(7);
  const Interval i50 = StratifiedBootstrapCi(m, 2000, 0.5, a);
  const Interval i95 = StratifiedBootstrapCi(m, 2000, 0.95, b);
  const Interval i999 = StratifiedBootstrapCi(m, 2000, 0.999999, c);
  CHECK(i95.lower <= i50.lower);
  CHECK(i95.upper >= i50.upper);
  CHECK(i999.lower <= i95.lower);
  CHECK(i999.upper >= i95.upper);
  // The extremes of any resample lie inside the data range.
  const auto flat = Flatten(m);
  CHECK(i999.lower >= *std::min_element(flat.begin(), flat.end()));
  CHECK(i999.upper <= *std::max_element(flat.begin(), flat.end()));
}

TEST_CASE("a task with a single run gives a degenerate interval") {
  std::mt19937_64 rng(8);
  const std::vector<std::vector<double>> m = {{0.2, 0.4, 0.9}, {0.5}};
  const Interval ci = StratifiedBootstrapCi(m, 100, 0.95, rng);
  CHECK(ci.degenerate);
  CHECK(ci.lower == ci.upper);
  CHECK(ci.lower == Iqm(std::vector<double>{0.2, 0.4, 0.9, 0.5}));
}

TEST_CASE("bootstrap rejects malformed input") {
  std::mt19937_64 rng(9);
  CHECK_THROWS_AS(StratifiedBootstrapCi({}, 10, 0.95, rng), UsageError);
  CHECK_THROWS_AS(StratifiedBootstrapCi({{}}, 10, 0.95, rng), UsageError);
  CHECK_THROWS_AS(StratifiedBootstrapCi({{0.1, 0.2}}, 10, 1.0, rng), UsageError);
  CHECK_THROWS_AS(StratifiedBootstrapCi({{0.1, 0.2}}, 0, 0.95, rng), UsageError);
}

TEST_CASE("per-task mean uses the population deviation") {
  std::vector<RunRecord> recs;
  const std::vector<double> scores = {1.0, 1.0, 0.95, 0.9, 0.95};
  for (std::size_t i = 0; i < scores.size(); ++i) recs.push_back(Rec("point_reach", i, "dex", scores[i]));
  const AggregateReport r = Aggregate(recs, {});
  REQUIRE(r.task_rows.size() == 1);
  CHECK(r.task_rows[0].mean == doctest::Approx(0.96).epsilon(1e-14));
  CHECK(r.task_rows[0].std == doctest::Approx(std::sqrt(0.007 / 5)).epsilon(1e-12));
  CHECK(r.task_rows[0].runs == 5);
}

TEST_CASE("mixed step budgets are refused with the budgets listed") {
  std::vector<RunRecord> recs = {Rec("point_reach", 0, "dex", 0.5), Rec("point_reach", 1, "dex", 0.7)};
  recs[1].step_budget = 50000;
  try {
    Aggregate(recs, {});
    FAIL("expected a ConfigError");
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("50000") != std::string::npos);
    CHECK(msg.find("100000") != std::string::npos);
  }
  CHECK_THROWS_AS(Aggregate({}, {}), UsageError);
  CHECK_THROWS_AS(Aggregate({Rec("point_reach", 0, "dex", 1.5)}, {}), ConfigError);
}

TEST_CASE("grouping selects the aggregate rows") {
  std::vector<RunRecord> recs;
  std::mt19937_64 rng(10);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (const char* task : {"point_track", "point_reach", "point_pickplace", "bipoint_transfer"})
    for (const char* agent : {"vinn", "ddpg", "dex"})
      for (int s = 0; s < 5; ++s) recs.push_back(Rec(task, s, agent, u(rng)));

  AggregateOptions o;
  const AggregateReport domain = Aggregate(recs, o);
  CHECK(domain.tasks == std::vector<std::string>{"point_reach", "point_pickplace", "bipoint_transfer", "point_track"});
  CHECK(domain.agents == std::vector<std::string>{"dex", "ddpg", "vinn"});
  CHECK(domain.group_rows.size() == 12);
  CHECK(domain.group_rows[0].group == "reach");
  CHECK(domain.group_rows[3].group == "single-arm");

  o.grouping = Grouping::kOverall;
  const AggregateReport overall = Aggregate(recs, o);
  REQUIRE(overall.group_rows.size() == 3);
  CHECK(overall.group_rows[0].group == "overall");
  CHECK(overall.group_rows[0].runs == 20);
  std::vector<double> dex;
  for (const auto& r : recs)
    if (r.agent == "dex") dex.push_back(r.score);
  CHECK(overall.group_rows[0].iqm == doctest::Approx(Iqm(dex)).epsilon(1e-14));
  CHECK(overall.group_rows[0].ci.lower <= overall.group_rows[0].iqm);
  CHECK(overall.group_rows[0].ci.upper >= overall.group_rows[0].iqm);
}

TEST_CASE("sweep levels are ordered numerically") {
  std::vector<RunRecord> recs;
  for (const char* level : {"alpha=20", "alpha=5", "alpha=0", "alpha=10"})
    for (int s = 0; s < 2; ++s) recs.push_back(Rec("point_pickplace", s, "dex", 0.5, level));
  const AggregateReport r = Aggregate(recs, {});
  CHECK(r.agents ==
        std::vector<std::string>{"dex[alpha=0]", "dex[alpha=5]", "dex[alpha=10]", "dex[alpha=20]"});
}

TEST_CASE("reports are stable text") {
  std::vector<RunRecord> recs = {Rec("point_reach", 0, "dex", 1.0), Rec("point_reach", 1, "dex", 0.9),
                                 Rec("point_reach", 0, "bc", 0.5), Rec("point_reach", 1, "bc", 0.5)};
  AggregateOptions o;
  o.n_resamples = 200;
  const AggregateReport a = Aggregate(recs, o);
  const AggregateReport b = Aggregate(recs, o);
  CHECK(a.ToCsv() == b.ToCsv());
  CHECK(a.ToText() == b.ToText());
  const std::string csv = a.ToCsv();
  CHECK(csv.rfind("kind,name,agent,runs,mean,std,iqm,ci_lower,ci_upper\n", 0) == 0);
  CHECK(csv.find("task,point_reach,dex,2,0.95,0.04999999999999999,,,\n") != std::string::npos);
  CHECK(csv.find("per-domain,reach,bc,2,,,0.5,0.5,0.5\n") != std::string::npos);
  const std::string text = a.ToText();
  CHECK(text.find("reach IQM") != std::string::npos);
  CHECK(text.find("0.95±0.05") != std::string::npos);
  CHECK(text.find("200 resamples") != std::string::npos);
}

TEST_CASE("single-run tasks produce a warning") {
  const AggregateReport r = Aggregate({Rec("point_reach", 0, "dex", 1.0)}, {});
  REQUIRE(r.warnings.size() == 1);
  CHECK(r.group_rows[0].ci.degenerate);
  CHECK(r.ToText().find("warning: degenerate CI") != std::string::npos);
}

TEST_CASE("grouping names parse") {
  for (auto g : {Grouping::kPerTask, Grouping::kPerDomain, Grouping::kOverall}) CHECK(ParseGrouping(ToString(g)) == g);
  CHECK_THROWS_AS(ParseGrouping("per-suite"), ConfigError);
  CHECK(DomainOf("point_pickplace") == "single-arm");
  CHECK(DomainOf("custom_task") == "custom_task");
}

TEST_CASE("metrics files round-trip") {
  const auto dir = std::filesystem::temp_directory_path() / "dexlab_metrics_test";
  std::filesystem::create_directories(dir);
  const auto path = dir / "metrics.csv";
  {
    std::ofstream out(path);
    out << kMetricsHeader << "\n5000," << FormatDouble(0.1) << ",-3.25,0.45\n10000,0.05,-2,1\n";
  }
  const auto rows = ReadMetricsCsv(path);
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].step == 5000);
  CHECK(rows[0].critic_loss == 0.1);
  CHECK(rows[1].eval_success == 1.0);
  {
    std::ofstream out(path);
    out << "step,loss\n";
  }
  CHECK_THROWS_AS(ReadMetricsCsv(path), ConfigError);
  {
    std::ofstream out(path);
    out << kMetricsHeader << "\n5000,0.1,x,0.4\n";
  }
  CHECK_THROWS_AS(ReadMetricsCsv(path), ConfigError);
  CHECK_THROWS_AS(ReadMetricsCsv(dir / "absent.csv"), ConfigError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("formatted doubles parse back exactly") {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(-1e3, 1e3);
  for (int i = 0; i < 1000; ++i) {
    const double v = u(rng);
    CHECK(std::stod(FormatDouble(v)) == v);
  }
  CHECK(FormatDouble(0.5) == "0.5");
  CHECK(FormatDouble(1e-3) == "0.001");
}
