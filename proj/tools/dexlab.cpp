// dexlab: demonstrations, training, evaluation, benchmark suites, reports and plots.
//
// Exit codes: 0 success, 1 usage or configuration error, 2 numeric failure,
// 3 benchmark suite with failed runs.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "dexlab/agents.hpp"
#include "dexlab/envs.hpp"
#include "dexlab/errors.hpp"
#include "dexlab/eval_stats.hpp"
#include "dexlab/nn.hpp"
#include "dexlab/runner.hpp"

namespace fs = std::filesystem;
using namespace dexlab;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitNumeric = 2;
constexpr int kExitPartial = 3;

struct Globals {
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string config;
};

// Per-field flags shared by train and bench; each becomes one CLI-layer key.
struct FieldFlags {
  std::string env, variant, demos, hidden, label;
  std::optional<double> alpha;
  std::optional<int> k, demo_episodes, batch_size, updates_per_episode, eval_episodes;
  std::optional<std::int64_t> total_steps, eval_every;
  std::vector<std::string> sets;

  void Register(CLI::App* cmd, bool identity) {
    if (identity) {
      cmd->add_option("--env", env, "environment name");
      cmd->add_option("--variant", variant, "agent variant");
      cmd->add_option("--demos", demos, "demonstration file");
      cmd->add_option("--label", label, "tag carried into reports");
    }
    cmd->add_option("--alpha", alpha, "exploration coefficient");
    cmd->add_option("--k", k, "nearest neighbors for guidance");
    cmd->add_option("--demo-episodes", demo_episodes, "use the first N demonstration episodes");
    cmd->add_option("--total-steps", total_steps, "environment step budget");
    cmd->add_option("--eval-every", eval_every, "evaluation interval in environment steps");
    cmd->add_option("--batch-size", batch_size, "minibatch size");
    cmd->add_option("--updates-per-episode", updates_per_episode, "gradient updates after each episode");
    cmd->add_option("--eval-episodes", eval_episodes, "episodes per evaluation");
    cmd->add_option("--hidden", hidden, "hidden widths, e.g. 256,256,256");
    cmd->add_option("--set", sets, "any config key, as key=value (repeatable)");
  }

  runner::KeyValues Layer() const {
    runner::KeyValues kv;
    auto put = [&](const char* key, const std::string& v) {
      if (!v.empty()) kv.emplace_back(key, v);
    };
    put("env", env);
    put("variant", variant);
    put("demo_file", demos);
    put("hidden", hidden);
    put("label", label);
    if (alpha) kv.emplace_back("alpha", stats::FormatDouble(*alpha));
    if (k) kv.emplace_back("k_neighbors", std::to_string(*k));
    if (demo_episodes) kv.emplace_back("demo_episodes", std::to_string(*demo_episodes));
    if (total_steps) kv.emplace_back("total_steps", std::to_string(*total_steps));
    if (eval_every) kv.emplace_back("eval_every", std::to_string(*eval_every));
    if (batch_size) kv.emplace_back("batch_size", std::to_string(*batch_size));
    if (updates_per_episode) kv.emplace_back("updates_per_episode", std::to_string(*updates_per_episode));
    if (eval_episodes) kv.emplace_back("eval_episodes", std::to_string(*eval_episodes));
    for (const auto& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + s + "'");
      kv.emplace_back(s.substr(0, eq), s.substr(eq + 1));
    }
    return kv;
  }
};

runner::KeyValues ConfigLayer(const Globals& g) {
  return g.config.empty() ? runner::KeyValues{} : runner::ReadConfigFile(g.config);
}

int GenDemos(const Globals& g, const std::string& env_name, int episodes) {
  if (episodes < 1) throw UsageError("--episodes must be >= 1");
  const envs::EnvName env = envs::ParseEnvName(env_name);
  const std::uint64_t seed = g.seed.value_or(0);
  const fs::path out = g.out.empty() ? fs::path("demos_" + env_name + ".jsonl") : fs::path(g.out);
  const envs::DemoSet demos = envs::GenerateDemonstrations(env, episodes, seed);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  envs::WriteDemoFile(out, demos);
  std::cout << "wrote " << demos.episodes.size() << " episodes (" << demos.num_transitions() << " transitions) to "
            << out.string() << "\n"
            << "expert success " << demos.episodes.size() << "/" << demos.attempts << " = "
            << static_cast<double>(demos.episodes.size()) / demos.attempts << "\n";
  return 0;
}

int Train(const Globals& g, const FieldFlags& flags, bool resume) {
  runner::KeyValues cli = flags.Layer();
  if (g.seed) cli.emplace_back("seed", std::to_string(*g.seed));
  const runner::RunConfig config = runner::ResolveConfig(ConfigLayer(g), {}, cli);
  const fs::path dir = g.out.empty() ? fs::path("runs") / (config.env + "_" +
                                                           std::string(agents::ToString(config.agent.variant)) +
                                                           "_s" + std::to_string(config.seed))
                                     : fs::path(g.out);
  runner::RunOptions options;
  options.resume = resume;
  const runner::FinalRecord r = runner::ExecuteRun(config, dir, options);
  std::cout << "run " << dir.string() << ": " << r.variant << " on " << r.env << ", seed " << r.seed << ", "
            << r.step_budget << " steps, success " << r.success_rate << " over " << r.episodes << " episodes\n";
  return 0;
}

int Eval(const Globals& g, const std::string& checkpoint, const std::string& env_name, int episodes) {
  if (episodes < 1) throw UsageError("--episodes must be >= 1");
  const envs::EnvName env = envs::ParseEnvName(env_name);
  const envs::EnvSpec spec = envs::EnvSpec::For(env);
  nn::MlpSpec net;
  nn::ParameterVector params;
  nn::LoadCheckpoint(checkpoint, net, params);
  const int want_in = spec.obs_dim + spec.goal_dim;
  const int want_out = spec.action_dim;
  if (net.layer_sizes.front() != want_in || net.layer_sizes.back() != want_out) {
    throw ConfigError("checkpoint maps " + std::to_string(net.layer_sizes.front()) + " inputs to " +
                      std::to_string(net.layer_sizes.back()) + " outputs; " + env_name + " needs " +
                      std::to_string(want_in) + " inputs (observation + goal) and " + std::to_string(want_out) +
                      " action outputs");
  }
  const std::uint64_t seed = g.seed.value_or(0);
  const agents::EvalResult r =
      agents::Evaluate(env, agents::Policy::Network(std::move(net), std::move(params)), episodes, seed);
  std::cout << "success " << r.success_rate << " over " << episodes << " episodes\n";
  if (!g.out.empty()) {
    nlohmann::ordered_json j;
    j["checkpoint"] = checkpoint;
    j["env"] = env_name;
    j["seed"] = seed;
    j["episodes"] = episodes;
    j["success_rate"] = r.success_rate;
    j["outcomes"] = r.outcomes;
    std::ofstream(g.out) << j.dump(2) << '\n';
  }
  return 0;
}

int Bench(const Globals& g, const FieldFlags& flags, const std::string& suite_name, std::optional<int> seeds,
          const std::string& grouping) {
  runner::Suite suite = fs::exists(suite_name) ? runner::ReadSuiteFile(suite_name) : runner::BuiltinSuite(suite_name);
  if (g.seed) suite.seed_base = *g.seed;
  if (seeds) {
    if (*seeds < 1) throw UsageError("--seeds must be >= 1");
    suite.seeds = *seeds;
  }
  const fs::path out = g.out.empty() ? fs::path("bench") / suite.name : fs::path(g.out);
  const runner::BenchResult r =
      runner::RunSuite(suite, out, ConfigLayer(g), flags.Layer(), stats::ParseGrouping(grouping),
                       [](const std::string& line) { std::cout << line << std::endl; });
  if (r.has_report) std::cout << r.report.ToText();
  for (const auto& f : r.failures) std::cerr << "failed: " << f << "\n";
  if (!r.failures.empty()) {
    std::cerr << r.failures.size() << " of " << r.failures.size() + r.records.size() << " runs failed\n";
    return kExitPartial;
  }
  return 0;
}

int Aggregate(const Globals& g, const std::string& results, const std::string& grouping) {
  const fs::path out = g.out.empty() ? fs::path(results) : fs::path(g.out);
  const stats::AggregateReport report =
      runner::AggregateTree(results, out, stats::ParseGrouping(grouping), g.seed.value_or(0));
  std::cout << report.ToText();
  std::cout << "wrote " << (out / "report.csv").string() << " and " << (out / "report.txt").string() << "\n";
  return 0;
}

int Plot(const Globals& g, const std::string& results) {
  const fs::path out = g.out.empty() ? fs::path(results) : fs::path(g.out);
  for (const auto& p : runner::PlotTree(results, out, g.seed.value_or(0))) std::cout << p.string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dexlab: demonstration-guided actor-critic experiments on toy goal-conditioned tasks"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  std::uint64_t seed_value = 0;
  auto* seed_opt = app.add_option("--seed", seed_value, "random seed (suite seed base for bench)");
  app.add_option("--out", g.out, "output path");
  app.add_option("--config", g.config, "key = value config file");

  std::string env_name;
  int episodes = 100;
  auto* gen = app.add_subcommand("gen-demos", "roll out the scripted expert and write a demonstration file");
  gen->add_option("--env", env_name, "environment name")->required();
  gen->add_option("--episodes", episodes, "successful episodes to keep");

  FieldFlags train_flags;
  bool resume = false;
  auto* train = app.add_subcommand("train", "train one agent into a run directory");
  train_flags.Register(train, true);
  train->add_flag("--resume", resume, "restart an interrupted run in place");

  std::string checkpoint;
  std::string eval_env;
  int eval_episodes = 20;
  auto* eval = app.add_subcommand("eval", "evaluate an actor checkpoint");
  eval->add_option("--checkpoint", checkpoint, "actor checkpoint file")->required();
  eval->add_option("--env", eval_env, "environment name")->required();
  eval->add_option("--episodes", eval_episodes, "evaluation episodes");

  FieldFlags bench_flags;
  std::string suite;
  std::optional<int> seeds;
  std::string grouping = "per-domain";
  auto* bench = app.add_subcommand("bench", "run a benchmark suite and aggregate it");
  bench->add_option("--suite", suite, "built-in suite name or JSON suite file")->required();
  bench->add_option("--seeds", seeds, "seeds per suite entry");
  bench->add_option("--grouping", grouping, "per-task, per-domain or overall");
  bench_flags.Register(bench, false);

  std::string results;
  std::string agg_grouping = "per-domain";
  auto* aggregate = app.add_subcommand("aggregate", "IQM and bootstrap CI report over a results tree");
  aggregate->add_option("results", results, "results directory")->required();
  aggregate->add_option("--grouping", agg_grouping, "per-task, per-domain or overall");

  std::string plot_results;
  auto* plot = app.add_subcommand("plot", "learning-curve CSV and SVG files for a results tree");
  plot->add_option("results", plot_results, "results directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }
  if (seed_opt->count() > 0) g.seed = seed_value;

  try {
    if (*gen) return GenDemos(g, env_name, episodes);
    if (*train) return Train(g, train_flags, resume);
    if (*eval) return Eval(g, checkpoint, eval_env, eval_episodes);
    if (*bench) return Bench(g, bench_flags, suite, seeds, grouping);
    if (*aggregate) return Aggregate(g, results, agg_grouping);
    if (*plot) return Plot(g, plot_results);
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  return kExitUsage;
}
