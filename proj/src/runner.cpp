#include "dexlab/runner.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <charconv>
#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "json.hpp"

#include "dexlab/errors.hpp"

namespace dexlab::runner {
namespace {

using json = nlohmann::ordered_json;
using stats::FormatDouble;

std::string Trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T ParseNumber(const std::string& key, const std::string& value) {
  T out{};
  const char* first = value.data();
  const char* last = value.data() + value.size();
  auto [ptr, ec] = std::from_chars(first, last, out);
  if (ec != std::errc() || ptr != last) {
    throw ConfigError("config key '" + key + "': cannot parse '" + value + "'");
  }
  return out;
}

bool ParseBool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw ConfigError("config key '" + key + "': expected true or false, got '" + value + "'");
}

std::vector<int> ParseIntList(const std::string& key, const std::string& value) {
  std::vector<int> out;
  std::stringstream ss(value);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(ParseNumber<int>(key, Trim(item)));
  if (out.empty()) throw ConfigError("config key '" + key + "': empty list");
  return out;
}

std::string JoinInts(const std::vector<int>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

std::string ReadText(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void WriteText(const fs::path& path, const std::string& text) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ConfigError("cannot write " + path.string());
    out << text;
    if (!out) throw ConfigError("write failed for " + path.string());
  }
  fs::rename(tmp, path);
}

std::string JsonScalarText(const json& v) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
  if (v.is_number_integer()) return v.dump();
  if (v.is_number_float()) return FormatDouble(v.get<double>());
  if (v.is_array()) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + JsonScalarText(v[i]);
    return out;
  }
  throw ConfigError("suite override values must be scalars or lists");
}

KeyValues JsonToKeyValues(const json& obj) {
  KeyValues out;
  if (obj.is_null()) return out;
  if (!obj.is_object()) throw ConfigError("suite overrides must be an object");
  for (auto it = obj.begin(); it != obj.end(); ++it) out.emplace_back(it.key(), JsonScalarText(it.value()));
  return out;
}

std::string SafeName(const std::string& s) {
  std::string out;
  for (char c : s) out += (std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '.') ? c : '_';
  return out;
}

std::string Fixed(double v, int digits) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

void SaveNetworks(const fs::path& dir, const std::string& tag, const agents::Agent* agent,
                  const agents::Policy& policy) {
  if (agent != nullptr) {
    const agents::ActorCritic& n = agent->nets();
    nn::SaveCheckpoint(dir / ("actor_" + tag + ".ckpt"), n.actor_spec, n.actor);
    nn::SaveCheckpoint(dir / ("critic_" + tag + ".ckpt"), n.critic_spec, n.critic);
    nn::SaveCheckpoint(dir / ("target_actor_" + tag + ".ckpt"), n.actor_spec, n.target_actor);
    nn::SaveCheckpoint(dir / ("target_critic_" + tag + ".ckpt"), n.critic_spec, n.target_critic);
  } else if (policy.is_network()) {
    nn::SaveCheckpoint(dir / ("actor_" + tag + ".ckpt"), policy.spec(), policy.params());
  }
}

json FinalToJson(const FinalRecord& r) {
  json j;
  j["env"] = r.env;
  j["variant"] = r.variant;
  j["label"] = r.label;
  j["seed"] = r.seed;
  j["step_budget"] = r.step_budget;
  j["episodes"] = r.episodes;
  j["success_rate"] = r.success_rate;
  j["outcomes"] = r.outcomes;
  return j;
}

// Suite-layer keys set by the harness rather than by overrides.
void PinIdentity(RunConfig& c, const PlannedRun& run, const std::string& demo_file) {
  c.env = run.entry.env;
  c.agent.variant = agents::ParseVariant(run.entry.variant);
  c.label = run.entry.label;
  c.seed = run.seed;
  c.demo_file = agents::RequiresDemos(c.agent.variant) ? demo_file : "";
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration

const std::vector<std::string>& ConfigKeys() {
  static const std::vector<std::string> kKeys = {
      "env",          "variant",     "gamma",         "alpha",        "k_neighbors",
      "noise_scale",  "random_action_prob",           "batch_size",   "demo_fraction",
      "polyak",       "actor_lr",    "critic_lr",     "relabel_prob", "hidden",
      "updates_per_episode",         "eval_episodes", "bc_epochs",    "candidate_pool",
      "clip_targets", "total_steps", "eval_every",    "seed",         "demo_file",
      "demo_episodes", "label"};
  return kKeys;
}

void RunConfig::Set(const std::string& key, const std::string& raw) {
  const std::string value = Trim(raw);
  agents::AgentConfig& a = agent;
  if (key == "env") {
    envs::ParseEnvName(value);
    env = value;
  } else if (key == "variant") {
    a.variant = agents::ParseVariant(value);
  } else if (key == "gamma") {
    a.gamma = ParseNumber<double>(key, value);
  } else if (key == "alpha") {
    a.alpha = ParseNumber<double>(key, value);
  } else if (key == "k_neighbors") {
    a.k_neighbors = ParseNumber<int>(key, value);
  } else if (key == "noise_scale") {
    a.noise_scale = ParseNumber<double>(key, value);
  } else if (key == "random_action_prob") {
    a.random_action_prob = ParseNumber<double>(key, value);
  } else if (key == "batch_size") {
    a.batch_size = ParseNumber<int>(key, value);
  } else if (key == "demo_fraction") {
    a.demo_fraction = ParseNumber<double>(key, value);
  } else if (key == "polyak") {
    a.polyak = ParseNumber<double>(key, value);
  } else if (key == "actor_lr") {
    a.actor_lr = ParseNumber<double>(key, value);
  } else if (key == "critic_lr") {
    a.critic_lr = ParseNumber<double>(key, value);
  } else if (key == "relabel_prob") {
    a.relabel_prob = ParseNumber<double>(key, value);
  } else if (key == "hidden") {
    a.hidden = ParseIntList(key, value);
  } else if (key == "updates_per_episode") {
    a.updates_per_episode = ParseNumber<int>(key, value);
  } else if (key == "eval_episodes") {
    a.eval_episodes = ParseNumber<int>(key, value);
  } else if (key == "bc_epochs") {
    a.bc_epochs = ParseNumber<int>(key, value);
  } else if (key == "candidate_pool") {
    if (value == "none" || value.empty()) {
      a.candidate_pool.reset();
    } else {
      a.candidate_pool = ParseNumber<int>(key, value);
    }
  } else if (key == "clip_targets") {
    a.clip_targets = ParseBool(key, value);
  } else if (key == "total_steps") {
    total_steps = ParseNumber<std::int64_t>(key, value);
  } else if (key == "eval_every") {
    eval_every = ParseNumber<std::int64_t>(key, value);
  } else if (key == "seed") {
    seed = ParseNumber<std::uint64_t>(key, value);
  } else if (key == "demo_file") {
    demo_file = value;
  } else if (key == "demo_episodes") {
    demo_episodes = ParseNumber<int>(key, value);
  } else if (key == "label") {
    label = value;
  } else {
    throw ConfigError("unknown config key '" + key + "'");
  }
}

void RunConfig::Apply(const KeyValues& layer) {
  for (const auto& [k, v] : layer) Set(k, v);
}

std::string RunConfig::Serialize() const {
  const agents::AgentConfig& a = agent;
  std::ostringstream os;
  auto line = [&](const std::string& k, const std::string& v) { os << k << " = " << v << '\n'; };
  line("env", env);
  line("variant", std::string(agents::ToString(a.variant)));
  line("gamma", FormatDouble(a.gamma));
  line("alpha", FormatDouble(a.alpha));
  line("k_neighbors", std::to_string(a.k_neighbors));
  line("noise_scale", FormatDouble(a.noise_scale));
  line("random_action_prob", FormatDouble(a.random_action_prob));
  line("batch_size", std::to_string(a.batch_size));
  line("demo_fraction", FormatDouble(a.demo_fraction));
  line("polyak", FormatDouble(a.polyak));
  line("actor_lr", FormatDouble(a.actor_lr));
  line("critic_lr", FormatDouble(a.critic_lr));
  line("relabel_prob", FormatDouble(a.relabel_prob));
  line("hidden", JoinInts(a.hidden));
  line("updates_per_episode", std::to_string(a.updates_per_episode));
  line("eval_episodes", std::to_string(a.eval_episodes));
  line("bc_epochs", std::to_string(a.bc_epochs));
  line("candidate_pool", a.candidate_pool ? std::to_string(*a.candidate_pool) : "none");
  line("clip_targets", a.clip_targets ? "true" : "false");
  line("total_steps", std::to_string(total_steps));
  line("eval_every", std::to_string(eval_every));
  line("seed", std::to_string(seed));
  line("demo_file", demo_file);
  line("demo_episodes", std::to_string(demo_episodes));
  line("label", label);
  return os.str();
}

void RunConfig::Validate() const {
  envs::ParseEnvName(env);
  agent.Validate();
  if (total_steps < 0) throw ConfigError("total_steps must be non-negative");
  if (eval_every < 1) throw ConfigError("eval_every must be >= 1");
  if (demo_episodes < 0) throw ConfigError("demo_episodes must be non-negative");
}

KeyValues ParseConfigText(const std::string& text) {
  KeyValues out;
  std::stringstream ss(text);
  std::string line;
  int line_no = 0;
  while (std::getline(ss, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = Trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(line_no) + ": expected 'key = value'");
    }
    const std::string key = Trim(line.substr(0, eq));
    if (std::find(ConfigKeys().begin(), ConfigKeys().end(), key) == ConfigKeys().end()) {
      throw ConfigError("config line " + std::to_string(line_no) + ": unknown key '" + key + "'");
    }
    out.emplace_back(key, Trim(line.substr(eq + 1)));
  }
  return out;
}

KeyValues ReadConfigFile(const fs::path& path) { return ParseConfigText(ReadText(path)); }

RunConfig ResolveConfig(const KeyValues& config_file, const KeyValues& suite_override, const KeyValues& cli) {
  RunConfig c;
  c.Apply(config_file);
  c.Apply(suite_override);
  c.Apply(cli);
  return c;
}

// ---------------------------------------------------------------------------
// Single runs

std::optional<envs::DemoSet> LoadDemosFor(const RunConfig& config) {
  const agents::Variant v = config.agent.variant;
  if (config.demo_file.empty()) {
    if (agents::RequiresDemos(v)) {
      throw ConfigError("variant " + std::string(agents::ToString(v)) +
                        " learns from demonstrations; pass a demo file (gen-demos writes one)");
    }
    return std::nullopt;
  }
  if (!fs::exists(config.demo_file)) {
    throw ConfigError("demo file " + config.demo_file + " does not exist (variant " +
                      std::string(agents::ToString(v)) + ")");
  }
  envs::DemoSet demos = envs::ReadDemoFile(config.demo_file);
  if (std::string(envs::ToString(demos.env)) != config.env) {
    throw ConfigError("demo file " + config.demo_file + " holds " + std::string(envs::ToString(demos.env)) +
                      " episodes, the run is on " + config.env);
  }
  if (config.demo_episodes > 0) {
    if (config.demo_episodes > static_cast<int>(demos.episodes.size())) {
      throw ConfigError("demo_episodes = " + std::to_string(config.demo_episodes) + " but " + config.demo_file +
                        " holds " + std::to_string(demos.episodes.size()));
    }
    demos = envs::TruncateDemos(demos, config.demo_episodes);
  }
  return demos;
}

FinalRecord ExecuteRun(const RunConfig& config, const fs::path& dir, const RunOptions& options) {
  config.Validate();
  if (fs::exists(dir / "final.json")) {
    throw UsageError(dir.string() + " holds a completed run" +
                     (options.resume ? "; resuming a completed run is not allowed" : ""));
  }
  if (fs::exists(dir) && !fs::is_empty(dir) && !options.resume) {
    throw UsageError(dir.string() + " is not empty; pass --resume to restart an interrupted run");
  }
  const std::optional<envs::DemoSet> demos = LoadDemosFor(config);
  // An interrupted run restarts from its snapshot; training is deterministic,
  // so the result matches an uninterrupted run.
  fs::remove_all(dir / "checkpoints");
  fs::create_directories(dir / "checkpoints");
  WriteText(dir / "config.txt", config.Serialize());
  {
    json seeds;
    seeds["run_seed"] = config.seed;
    seeds["eval_seed"] = agents::EvalSeedFor(config.seed);
    if (demos) {
      seeds["demo_seed"] = demos->seed;
      seeds["demo_file"] = config.demo_file;
    }
    WriteText(dir / "seeds.json", seeds.dump(2) + "\n");
  }

  std::ofstream metrics(dir / "metrics.csv", std::ios::binary | std::ios::trunc);
  std::ofstream timing(dir / "timing.csv", std::ios::binary | std::ios::trunc);
  if (!metrics || !timing) throw ConfigError("cannot write metrics into " + dir.string());
  metrics << stats::kMetricsHeader << '\n';
  timing << "step,seconds\n";
  metrics.flush();

  const envs::EnvName env = envs::ParseEnvName(config.env);
  const fs::path ckpt_dir = dir / "checkpoints";
  agents::TrainOptions train;
  train.total_steps = config.total_steps;
  train.eval_every = config.eval_every;
  train.seed = config.seed;
  train.on_eval = [&](const agents::TrainRecord& row, const agents::Agent* agent, const agents::Policy& policy) {
    metrics << row.step << ',' << FormatDouble(row.critic_loss) << ',' << FormatDouble(row.actor_objective) << ','
            << FormatDouble(row.eval_success) << '\n';
    metrics.flush();
    timing << row.step << ',' << Fixed(row.seconds, 3) << '\n';
    timing.flush();
    SaveNetworks(ckpt_dir, std::to_string(row.step), agent, policy);
  };
  agents::TrainResult result = agents::Train(config.agent, env, demos ? &*demos : nullptr, train);
  SaveNetworks(ckpt_dir, "final", result.agent.get(), result.policy);

  const agents::EvalResult eval =
      agents::Evaluate(env, result.policy, config.agent.eval_episodes, agents::EvalSeedFor(config.seed));
  FinalRecord record;
  record.env = config.env;
  record.variant = std::string(agents::ToString(config.agent.variant));
  record.label = config.label;
  record.seed = config.seed;
  record.step_budget = config.total_steps;
  record.episodes = config.agent.eval_episodes;
  record.success_rate = eval.success_rate;
  record.outcomes = eval.outcomes;
  WriteText(dir / "final.json", FinalToJson(record).dump(2) + "\n");
  return record;
}

FinalRecord ReadFinalRecord(const fs::path& path) {
  try {
    const json j = json::parse(ReadText(path));
    FinalRecord r;
    r.env = j.at("env").get<std::string>();
    r.variant = j.at("variant").get<std::string>();
    r.label = j.value("label", std::string());
    r.seed = j.at("seed").get<std::uint64_t>();
    r.step_budget = j.at("step_budget").get<std::int64_t>();
    r.episodes = j.at("episodes").get<int>();
    r.success_rate = j.at("success_rate").get<double>();
    r.outcomes = j.at("outcomes").get<std::vector<bool>>();
    return r;
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Suites

const std::vector<std::string>& BuiltinSuiteNames() {
  static const std::vector<std::string> kNames = {"table1-mini", "ablation-alpha", "ablation-k", "ablation-demo",
                                                  "ablation-variant"};
  return kNames;
}

Suite BuiltinSuite(const std::string& name) {
  Suite s;
  s.name = name;
  // Ablations run on the single-arm and bimanual tasks.
  const std::vector<std::string> ablation_envs = {"point_pickplace", "bipoint_transfer"};
  auto sweep = [&](const std::string& key, const std::vector<std::string>& levels) {
    for (const auto& env : ablation_envs) {
      for (const auto& level : levels) s.entries.push_back({env, "dex", key + "=" + level, {{key, level}}});
    }
  };
  if (name == "table1-mini") {
    for (auto env : envs::EnvRegistry()) {
      for (const char* v : {"dex", "ddpg", "bc", "ddpgbc", "vinn"}) {
        s.entries.push_back({std::string(envs::ToString(env)), v, "", {}});
      }
    }
  } else if (name == "ablation-alpha") {
    sweep("alpha", {"0", "1", "5", "10", "20"});
  } else if (name == "ablation-k") {
    sweep("k_neighbors", {"1", "3", "5", "7", "9"});
  } else if (name == "ablation-demo") {
    sweep("demo_episodes", {"10", "25", "50", "75", "100"});
  } else if (name == "ablation-variant") {
    for (const auto& env : ablation_envs) {
      for (const char* v : {"dex", "dex_ra", "dex_ac", "dex_bc"}) s.entries.push_back({env, v, "", {}});
    }
  } else {
    std::string known;
    for (const auto& n : BuiltinSuiteNames()) known += (known.empty() ? "" : ", ") + n;
    throw ConfigError("unknown suite '" + name + "' (built-in: " + known + ")");
  }
  return s;
}

Suite ReadSuiteFile(const fs::path& path) {
  try {
    const json j = json::parse(ReadText(path));
    Suite s;
    s.name = j.value("name", path.stem().string());
    s.seed_base = j.value("seed_base", std::uint64_t{0});
    s.seeds = j.value("seeds", 5);
    s.demo_episodes = j.value("demo_episodes", 100);
    if (j.contains("base")) s.base = JsonToKeyValues(j.at("base"));
    for (const auto& e : j.at("runs")) {
      SuiteEntry entry;
      entry.env = e.at("env").get<std::string>();
      entry.variant = e.at("variant").get<std::string>();
      entry.label = e.value("label", std::string());
      if (e.contains("overrides")) entry.overrides = JsonToKeyValues(e.at("overrides"));
      envs::ParseEnvName(entry.env);
      agents::ParseVariant(entry.variant);
      s.entries.push_back(std::move(entry));
    }
    if (s.seeds < 1) throw ConfigError("suite seeds must be >= 1");
    if (s.entries.empty()) throw ConfigError("suite lists no runs");
    return s;
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

std::vector<PlannedRun> PlanSuite(const Suite& suite, const fs::path& out) {
  std::vector<PlannedRun> runs;
  int index = 0;
  for (const auto& entry : suite.entries) {
    for (int s = 0; s < suite.seeds; ++s) {
      PlannedRun r;
      r.index = index;
      r.seed = suite.seed_base + static_cast<std::uint64_t>(index);
      r.entry = entry;
      std::ostringstream name;
      name << std::setw(4) << std::setfill('0') << index << '_' << entry.env << '_' << entry.variant;
      if (!entry.label.empty()) name << '_' << SafeName(entry.label);
      r.dir = out / "runs" / name.str();
      runs.push_back(std::move(r));
      ++index;
    }
  }
  return runs;
}

int WorkerCount(std::size_t runs) {
  int n = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  if (const char* cap = std::getenv("DEXLAB_THREADS")) {
    int c = 0;
    const std::string text(cap);
    auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), c);
    if (ec != std::errc() || ptr != text.data() + text.size() || c < 1) {
      throw ConfigError("DEXLAB_THREADS must be a positive integer, got '" + text + "'");
    }
    n = std::min(n, c);
  }
  return std::max(1, std::min<int>(n, static_cast<int>(std::max<std::size_t>(runs, 1))));
}

BenchResult RunSuite(const Suite& suite, const fs::path& out, const KeyValues& config_file, const KeyValues& cli,
                     stats::Grouping grouping, const std::function<void(const std::string&)>& log) {
  std::mutex log_mutex;
  auto say = [&](const std::string& line) {
    if (!log) return;
    std::lock_guard<std::mutex> lock(log_mutex);
    log(line);
  };
  const std::vector<PlannedRun> runs = PlanSuite(suite, out);
  fs::create_directories(out / "demos");

  // One demonstration file per environment, shared read-only by its runs.
  std::map<std::string, std::string> demo_files;
  for (const auto& r : runs) {
    if (!agents::RequiresDemos(agents::ParseVariant(r.entry.variant)) || demo_files.count(r.entry.env)) continue;
    const fs::path path = out / "demos" / (r.entry.env + ".jsonl");
    if (!fs::exists(path)) {
      envs::WriteDemoFile(path, envs::GenerateDemonstrations(envs::ParseEnvName(r.entry.env), suite.demo_episodes,
                                                             suite.seed_base));
    }
    demo_files[r.entry.env] = path.string();
  }

  // Resolve every config before starting so bad overrides fail fast.
  std::vector<RunConfig> configs;
  for (const auto& r : runs) {
    KeyValues layer = suite.base;
    layer.insert(layer.end(), r.entry.overrides.begin(), r.entry.overrides.end());
    RunConfig c = ResolveConfig(config_file, layer, cli);
    PinIdentity(c, r, demo_files.count(r.entry.env) ? demo_files[r.entry.env] : "");
    c.Validate();
    configs.push_back(std::move(c));
  }

  {
    json manifest;
    manifest["suite"] = suite.name;
    manifest["seed_base"] = suite.seed_base;
    manifest["seeds_per_entry"] = suite.seeds;
    manifest["demo_episodes"] = suite.demo_episodes;
    manifest["demo_seed"] = suite.seed_base;
    json list = json::array();
    for (const auto& r : runs) {
      list.push_back({{"index", r.index},
                      {"seed", r.seed},
                      {"env", r.entry.env},
                      {"variant", r.entry.variant},
                      {"label", r.entry.label},
                      {"dir", fs::relative(r.dir, out).string()}});
    }
    manifest["runs"] = list;
    WriteText(out / "manifest.json", manifest.dump(2) + "\n");
  }

  std::vector<std::optional<FinalRecord>> finals(runs.size());
  std::vector<std::string> errors(runs.size());
  std::atomic<std::size_t> next{0};
  std::atomic<int> done{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < runs.size(); i = next++) {
      const PlannedRun& r = runs[i];
      const auto start = std::chrono::steady_clock::now();
      try {
        if (fs::exists(r.dir / "final.json")) {
          finals[i] = ReadFinalRecord(r.dir / "final.json");
        } else {
          RunOptions opts;
          opts.resume = true;
          finals[i] = ExecuteRun(configs[i], r.dir, opts);
        }
        fs::remove(r.dir / "error.txt");
      } catch (const std::exception& e) {
        errors[i] = e.what();
        fs::create_directories(r.dir);
        std::ofstream(r.dir / "error.txt") << e.what() << '\n';
      }
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      const int n = ++done;
      std::ostringstream line;
      line << '[' << n << '/' << runs.size() << "] " << r.dir.filename().string() << " seed " << r.seed << ": ";
      if (finals[i]) {
        line << "success " << Fixed(finals[i]->success_rate, 2);
      } else {
        line << "FAILED (" << errors[i] << ')';
      }
      line << " in " << Fixed(secs, 1) << " s";
      say(line.str());
    }
  };
  const int n_workers = WorkerCount(runs.size());
  std::vector<std::thread> pool;
  for (int w = 1; w < n_workers; ++w) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();

  BenchResult result;
  for (std::size_t i = 0; i < runs.size(); ++i) {
    if (finals[i]) {
      const FinalRecord& f = *finals[i];
      result.records.push_back({f.env, f.seed, f.variant, f.success_rate, f.step_budget, f.label});
    } else {
      result.failures.push_back(runs[i].dir.filename().string() + ": " + errors[i]);
    }
  }
  if (!result.records.empty()) {
    stats::AggregateOptions agg;
    agg.grouping = grouping;
    agg.seed = suite.seed_base;
    result.report = stats::Aggregate(result.records, agg);
    if (!result.failures.empty()) {
      result.report.warnings.push_back(std::to_string(result.failures.size()) +
                                       " run(s) failed; aggregated over completed runs only");
    }
    result.has_report = true;
    WriteText(out / "report.csv", result.report.ToCsv());
    WriteText(out / "report.txt", result.report.ToText());
  }
  return result;
}

// ---------------------------------------------------------------------------
// Results trees

std::vector<fs::path> FindRunDirs(const fs::path& root) {
  std::vector<fs::path> dirs;
  if (!fs::exists(root)) return dirs;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file() && e.path().filename() == "final.json") dirs.push_back(e.path().parent_path());
  }
  std::sort(dirs.begin(), dirs.end());
  return dirs;
}

std::vector<stats::RunRecord> CollectRecords(const fs::path& root) {
  std::vector<stats::RunRecord> records;
  for (const auto& dir : FindRunDirs(root)) {
    const FinalRecord f = ReadFinalRecord(dir / "final.json");
    records.push_back({f.env, f.seed, f.variant, f.success_rate, f.step_budget, f.label});
  }
  return records;
}

stats::AggregateReport AggregateTree(const fs::path& root, const fs::path& out, stats::Grouping grouping,
                                     std::uint64_t seed) {
  const std::vector<stats::RunRecord> records = CollectRecords(root);
  if (records.empty()) throw UsageError("no completed runs (final.json) under " + root.string());
  stats::AggregateOptions options;
  options.grouping = grouping;
  options.seed = seed;
  stats::AggregateReport report = stats::Aggregate(records, options);
  fs::create_directories(out);
  WriteText(out / "report.csv", report.ToCsv());
  WriteText(out / "report.txt", report.ToText());
  return report;
}

std::vector<CurvePoint> LearningCurve(const std::vector<std::vector<stats::MetricsRow>>& series, std::uint64_t seed,
                                      int n_resamples) {
  std::vector<CurvePoint> curve;
  if (series.empty()) return curve;
  std::set<std::int64_t> steps;
  for (const auto& row : series.front()) steps.insert(row.step);
  std::mt19937_64 rng(seed);
  for (std::int64_t step : steps) {
    std::vector<double> values;
    for (const auto& s : series) {
      auto it = std::find_if(s.begin(), s.end(), [&](const stats::MetricsRow& r) { return r.step == step; });
      if (it == s.end()) break;
      values.push_back(it->eval_success);
    }
    if (values.size() != series.size()) continue;
    CurvePoint p;
    p.step = step;
    p.runs = static_cast<int>(values.size());
    double sum = 0.0;
    for (double v : values) sum += v;
    p.mean = sum / static_cast<double>(values.size());
    p.iqm = stats::Iqm(values);
    const stats::Interval ci = stats::StratifiedBootstrapCi({values}, n_resamples, 0.95, rng);
    p.ci_lower = ci.lower;
    p.ci_upper = ci.upper;
    curve.push_back(p);
  }
  return curve;
}

namespace {

struct Series {
  std::string name;
  std::vector<CurvePoint> curve;
};

std::string Svg(const std::string& env, const std::vector<Series>& all) {
  static const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
                                  "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};
  constexpr double kW = 640, kH = 400, kLeft = 60, kRight = 170, kTop = 30, kBottom = 50;
  std::int64_t max_step = 1;
  for (const auto& s : all) {
    for (const auto& p : s.curve) max_step = std::max(max_step, p.step);
  }
  const double pw = kW - kLeft - kRight, ph = kH - kTop - kBottom;
  auto x = [&](std::int64_t step) { return Fixed(kLeft + pw * static_cast<double>(step) / max_step, 1); };
  auto y = [&](double v) { return Fixed(kTop + ph * (1.0 - v), 1); };
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << kLeft << "\" y=\"20\" font-family=\"sans-serif\" font-size=\"14\">" << env << "</text>\n";
  os << "<rect x=\"" << kLeft << "\" y=\"" << kTop << "\" width=\"" << pw << "\" height=\"" << ph
     << "\" fill=\"none\" stroke=\"black\"/>\n";
  for (double v : {0.0, 0.25, 0.5, 0.75, 1.0}) {
    os << "<text x=\"" << kLeft - 8 << "\" y=\"" << y(v) << "\" font-family=\"sans-serif\" font-size=\"10\" "
       << "text-anchor=\"end\">" << Fixed(v, 2) << "</text>\n";
  }
  os << "<text x=\"" << kLeft + pw / 2 << "\" y=\"" << kH - 12 << "\" font-family=\"sans-serif\" font-size=\"11\" "
     << "text-anchor=\"middle\">environment steps (max " << max_step << ")</text>\n";
  for (std::size_t i = 0; i < all.size(); ++i) {
    const char* color = kColors[i % 10];
    const auto& c = all[i].curve;
    if (c.empty()) continue;
    os << "<polygon fill=\"" << color << "\" fill-opacity=\"0.2\" stroke=\"none\" points=\"";
    for (const auto& p : c) os << x(p.step) << ',' << y(p.ci_upper) << ' ';
    for (auto it = c.rbegin(); it != c.rend(); ++it) os << x(it->step) << ',' << y(it->ci_lower) << ' ';
    os << "\"/>\n<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
    for (const auto& p : c) os << x(p.step) << ',' << y(p.iqm) << ' ';
    os << "\"/>\n";
    os << "<text x=\"" << kLeft + pw + 10 << "\" y=\"" << kTop + 14 * (i + 1) << "\" font-family=\"sans-serif\" "
       << "font-size=\"11\" fill=\"" << color << "\">" << all[i].name << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

}  // namespace

std::vector<fs::path> PlotTree(const fs::path& root, const fs::path& out, std::uint64_t seed) {
  // env -> agent column -> metrics series
  std::map<std::string, std::map<std::string, std::vector<std::vector<stats::MetricsRow>>>> groups;
  for (const auto& dir : FindRunDirs(root)) {
    const FinalRecord f = ReadFinalRecord(dir / "final.json");
    const std::string agent = f.label.empty() ? f.variant : f.variant + "_" + f.label;
    groups[f.env][agent].push_back(stats::ReadMetricsCsv(dir / "metrics.csv"));
  }
  if (groups.empty()) throw UsageError("no completed runs (final.json) under " + root.string());
  std::vector<fs::path> written;
  fs::create_directories(out / "curves");
  fs::create_directories(out / "plots");
  for (const auto& [env, agents_map] : groups) {
    std::vector<Series> all;
    for (const auto& [agent, series] : agents_map) {
      Series s{agent, LearningCurve(series, seed)};
      std::ostringstream csv;
      csv << "step,runs,mean,iqm,ci_lower,ci_upper\n";
      for (const auto& p : s.curve) {
        csv << p.step << ',' << p.runs << ',' << FormatDouble(p.mean) << ',' << FormatDouble(p.iqm) << ','
            << FormatDouble(p.ci_lower) << ',' << FormatDouble(p.ci_upper) << '\n';
      }
      const fs::path path = out / "curves" / (SafeName(env) + "__" + SafeName(agent) + ".csv");
      WriteText(path, csv.str());
      written.push_back(path);
      all.push_back(std::move(s));
    }
    const fs::path svg = out / "plots" / (SafeName(env) + ".svg");
    WriteText(svg, Svg(env, all));
    written.push_back(svg);
  }
  return written;
}

}  // namespace dexlab::runner
