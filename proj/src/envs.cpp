#include "dexlab/envs.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "json.hpp"

#include "dexlab/errors.hpp"

namespace dexlab::envs {
namespace {

using ordered_json = nlohmann::ordered_json;

constexpr double kHandoverX = 0.0;
// Agent A may not pass x > kBimanualReach, agent B may not pass x < -kBimanualReach.
constexpr double kBimanualReach = 0.1;
constexpr double kTrackMaxSpeed = 0.03;
constexpr int kExpertWindow = 20;

double Dist(Vec2 a, Vec2 b) { return std::hypot(a[0] - b[0], a[1] - b[1]); }

Vec2 At(const std::vector<double>& v, std::size_t i) { return {v[i], v[i + 1]}; }

double Clip1(double x) { return std::clamp(x, -1.0, 1.0); }

// Proportional step toward `target`, saturating per component.
void MoveToward(std::vector<double>& action, std::size_t offset, Vec2 from, Vec2 target,
                double step_scale) {
  action[offset] = Clip1((target[0] - from[0]) / step_scale);
  action[offset + 1] = Clip1((target[1] - from[1]) / step_scale);
}

std::vector<double> ExpertPickPlace(const EnvSpec& spec, const GoalObservation& o) {
  const Vec2 agent = At(o.observation, 0);
  const Vec2 object = At(o.observation, 2);
  const bool held = o.observation[4] > 0.5;
  const Vec2 goal = At(o.desired_goal, 0);
  const double thr = spec.success_threshold;
  std::vector<double> a(3, 0.0);
  if (held) {
    if (Dist(object, goal) < 0.5 * thr) {
      a[2] = 1.0;  // release
    } else {
      MoveToward(a, 0, agent, goal, spec.step_scale);
      a[2] = -1.0;
    }
  } else if (Dist(object, goal) < thr) {
    a[2] = 1.0;  // delivered
  } else if (Dist(agent, object) < thr) {
    MoveToward(a, 0, agent, goal, spec.step_scale);  // grasp and carry
    a[2] = -1.0;
  } else {
    MoveToward(a, 0, agent, object, spec.step_scale);
    a[2] = 1.0;
  }
  return a;
}

std::vector<double> ExpertBimanual(const EnvSpec& spec, const GoalObservation& o) {
  const Vec2 a_pos = At(o.observation, 0);
  const Vec2 b_pos = At(o.observation, 2);
  const Vec2 object = At(o.observation, 4);
  const bool held_a = o.observation[6] > 0.5;
  const bool held_b = o.observation[7] > 0.5;
  const Vec2 goal = At(o.desired_goal, 0);
  const Vec2 handover{kHandoverX, goal[1]};
  const double thr = spec.success_threshold;
  const double s = spec.step_scale;
  std::vector<double> a(6, 0.0);
  a[2] = 1.0;
  a[5] = 1.0;
  if (held_b) {
    if (Dist(object, goal) >= 0.5 * thr) {
      MoveToward(a, 3, b_pos, goal, s);
      a[5] = -1.0;
    }
  } else if (held_a) {
    MoveToward(a, 3, b_pos, handover, s);
    if (Dist(object, handover) < 0.5 * thr && Dist(b_pos, object) < thr) {
      a[0] = a[1] = 0.0;  // A lets go while B closes and starts carrying
      MoveToward(a, 3, b_pos, goal, s);
      a[5] = -1.0;
    } else {
      MoveToward(a, 0, a_pos, handover, s);
      a[2] = -1.0;
    }
  } else if (Dist(object, goal) < thr) {
    // delivered
  } else if (Dist(b_pos, object) < thr) {
    MoveToward(a, 3, b_pos, goal, s);
    a[5] = -1.0;
  } else if (object[0] <= kBimanualReach) {
    MoveToward(a, 3, b_pos, handover, s);
    if (Dist(a_pos, object) < thr) {
      MoveToward(a, 0, a_pos, handover, s);
      a[2] = -1.0;
    } else {
      MoveToward(a, 0, a_pos, object, s);
    }
  } else {
    MoveToward(a, 3, b_pos, object, s);
  }
  return a;
}

}  // namespace

std::string_view ToString(EnvName name) {
  switch (name) {
    case EnvName::kPointReach: return "point_reach";
    case EnvName::kPointPickPlace: return "point_pickplace";
    case EnvName::kBipointTransfer: return "bipoint_transfer";
    case EnvName::kPointTrack: return "point_track";
  }
  return "unknown";
}

EnvName ParseEnvName(std::string_view name) {
  for (EnvName e : EnvRegistry()) {
    if (ToString(e) == name) return e;
  }
  throw ConfigError("unknown environment '" + std::string(name) +
                    "' (expected point_reach, point_pickplace, bipoint_transfer or point_track)");
}

const std::vector<EnvName>& EnvRegistry() {
  static const std::vector<EnvName> kAll = {EnvName::kPointReach, EnvName::kPointPickPlace,
                                            EnvName::kBipointTransfer, EnvName::kPointTrack};
  return kAll;
}

EnvSpec EnvSpec::For(EnvName name) {
  EnvSpec s;
  s.name = name;
  switch (name) {
    case EnvName::kPointReach:
      s.obs_dim = 2;
      s.action_dim = 2;
      break;
    case EnvName::kPointPickPlace:
      s.obs_dim = 5;
      s.action_dim = 3;
      break;
    case EnvName::kBipointTransfer:
      s.obs_dim = 8;
      s.action_dim = 6;
      break;
    case EnvName::kPointTrack:
      s.obs_dim = 4;
      s.action_dim = 2;
      s.sparse = false;
      break;
  }
  return s;
}

Env::Env(EnvSpec spec) : spec_(spec) {
  const int n_agents = spec_.name == EnvName::kBipointTransfer ? 2 : 1;
  agents_.assign(n_agents, Vec2{0.0, 0.0});
}

GoalObservation Env::Reset(std::uint64_t seed) {
  rng_.seed(seed);
  const double lo = spec_.workspace_low;
  const double hi = spec_.workspace_high;
  auto uni = [this](double a, double b) { return std::uniform_real_distribution<double>(a, b)(rng_); };
  auto point = [&](double x0, double x1, double y0, double y1) { return Vec2{uni(x0, x1), uni(y0, y1)}; };
  const double min_sep = 2.0 * spec_.success_threshold;

  holder_ = -1;
  target_velocity_ = {0.0, 0.0};
  t_ = 0;
  switch (spec_.name) {
    case EnvName::kPointReach:
      agents_[0] = point(lo, hi, lo, hi);
      do {
        goal_ = point(lo, hi, lo, hi);
      } while (Dist(goal_, agents_[0]) < min_sep);
      break;
    case EnvName::kPointPickPlace:
      // Small start regions, as on a surgical tray: the start, object and
      // goal each vary within a patch rather than across the workspace.
      agents_[0] = point(-0.9, -0.6, -0.3, 0.3);
      object_ = point(-0.3, 0.0, -0.3, 0.3);
      do {
        goal_ = point(0.3, 0.6, -0.3, 0.3);
      } while (Dist(goal_, object_) < min_sep);
      break;
    case EnvName::kBipointTransfer:
      agents_[0] = point(lo, -0.2, -0.6, 0.6);
      agents_[1] = point(0.2, hi, -0.6, 0.6);
      object_ = point(-0.9, -0.2, -0.6, 0.6);
      goal_ = point(0.2, 0.9, -0.6, 0.6);
      break;
    case EnvName::kPointTrack:
      agents_[0] = point(lo, hi, lo, hi);
      do {
        goal_ = point(lo, hi, lo, hi);
      } while (Dist(goal_, agents_[0]) < min_sep);
      target_velocity_ = {uni(-kTrackMaxSpeed, kTrackMaxSpeed), uni(-kTrackMaxSpeed, kTrackMaxSpeed)};
      break;
  }
  return Observe();
}

void Env::ClampAgent(int i) {
  double x_lo = spec_.workspace_low;
  double x_hi = spec_.workspace_high;
  if (spec_.name == EnvName::kBipointTransfer) {
    if (i == 0) x_hi = kBimanualReach;
    else x_lo = -kBimanualReach;
  }
  agents_[i][0] = std::clamp(agents_[i][0], x_lo, x_hi);
  agents_[i][1] = std::clamp(agents_[i][1], spec_.workspace_low, spec_.workspace_high);
}

StepResult Env::Step(std::span<const double> action) {
  if (static_cast<int>(action.size()) != spec_.action_dim) {
    throw UsageError("action has " + std::to_string(action.size()) + " components, " +
                     std::string(ToString(spec_.name)) + " expects " + std::to_string(spec_.action_dim));
  }
  std::vector<double> a(action.begin(), action.end());
  for (double& x : a) {
    if (std::isnan(x)) throw NumericError("NaN action component");
    x = Clip1(x);
  }

  const bool grasping = spec_.name == EnvName::kPointPickPlace || spec_.name == EnvName::kBipointTransfer;
  const int per_agent = grasping ? 3 : 2;
  const int n_agents = static_cast<int>(agents_.size());
  if (grasping) {
    for (int i = 0; i < n_agents; ++i) {
      if (holder_ == i && a[i * per_agent + 2] >= 0.0) holder_ = -1;
    }
    for (int i = 0; i < n_agents; ++i) {
      if (holder_ == -1 && a[i * per_agent + 2] < 0.0 &&
          Dist(agents_[i], object_) < spec_.success_threshold) {
        holder_ = i;
      }
    }
  }
  for (int i = 0; i < n_agents; ++i) {
    agents_[i][0] += spec_.step_scale * a[i * per_agent];
    agents_[i][1] += spec_.step_scale * a[i * per_agent + 1];
    ClampAgent(i);
  }
  if (holder_ >= 0) object_ = agents_[holder_];

  if (spec_.name == EnvName::kPointTrack) {
    for (int d = 0; d < 2; ++d) {
      goal_[d] += target_velocity_[d];
      if (goal_[d] > spec_.workspace_high) {
        goal_[d] = 2.0 * spec_.workspace_high - goal_[d];
        target_velocity_[d] = -target_velocity_[d];
      } else if (goal_[d] < spec_.workspace_low) {
        goal_[d] = 2.0 * spec_.workspace_low - goal_[d];
        target_velocity_[d] = -target_velocity_[d];
      }
    }
  }

  t_ += 1;
  StepResult r;
  r.next_observation = Observe();
  r.reward = ComputeReward(r.next_observation.achieved_goal, r.next_observation.desired_goal);
  r.success = IsSuccess(r.next_observation.achieved_goal, r.next_observation.desired_goal);
  r.done = t_ >= spec_.horizon;
  return r;
}

GoalObservation Env::Observe() const {
  GoalObservation o;
  switch (spec_.name) {
    case EnvName::kPointReach:
      o.observation = {agents_[0][0], agents_[0][1]};
      o.achieved_goal = {agents_[0][0], agents_[0][1]};
      break;
    case EnvName::kPointPickPlace:
      o.observation = {agents_[0][0], agents_[0][1], object_[0], object_[1], holder_ == 0 ? 1.0 : 0.0};
      o.achieved_goal = {object_[0], object_[1]};
      break;
    case EnvName::kBipointTransfer:
      o.observation = {agents_[0][0], agents_[0][1], agents_[1][0], agents_[1][1], object_[0], object_[1],
                       holder_ == 0 ? 1.0 : 0.0, holder_ == 1 ? 1.0 : 0.0};
      o.achieved_goal = {object_[0], object_[1]};
      break;
    case EnvName::kPointTrack:
      o.observation = {agents_[0][0], agents_[0][1], target_velocity_[0] / spec_.step_scale,
                       target_velocity_[1] / spec_.step_scale};
      o.achieved_goal = {agents_[0][0], agents_[0][1]};
      break;
  }
  o.desired_goal = {goal_[0], goal_[1]};
  return o;
}

namespace {

double GoalDistance(std::span<const double> achieved, std::span<const double> desired) {
  if (achieved.size() != desired.size()) throw UsageError("goal dimensions differ");
  double sq = 0.0;
  for (std::size_t i = 0; i < achieved.size(); ++i) sq += (achieved[i] - desired[i]) * (achieved[i] - desired[i]);
  return std::sqrt(sq);
}

}  // namespace

bool IsSuccess(const EnvSpec& spec, std::span<const double> achieved, std::span<const double> desired) {
  return GoalDistance(achieved, desired) < spec.success_threshold;
}

double ComputeReward(const EnvSpec& spec, std::span<const double> achieved, std::span<const double> desired) {
  const double d = GoalDistance(achieved, desired);
  if (spec.sparse) return d < spec.success_threshold ? 0.0 : -1.0;
  return -d;
}

void Env::PlaceForTest(std::vector<Vec2> agents, Vec2 object, int holder, Vec2 goal, Vec2 target_velocity) {
  if (agents.size() != agents_.size()) throw UsageError("wrong number of agents");
  agents_ = std::move(agents);
  for (int i = 0; i < static_cast<int>(agents_.size()); ++i) ClampAgent(i);
  object_ = object;
  holder_ = holder;
  if (holder_ >= 0) object_ = agents_[holder_];
  goal_ = goal;
  target_velocity_ = target_velocity;
  t_ = 0;
}

std::vector<double> Env::ExpertActionFor(const EnvSpec& spec, const GoalObservation& o) {
  switch (spec.name) {
    case EnvName::kPointReach: {
      std::vector<double> a(2);
      MoveToward(a, 0, At(o.observation, 0), At(o.desired_goal, 0), spec.step_scale);
      return a;
    }
    case EnvName::kPointPickPlace:
      return ExpertPickPlace(spec, o);
    case EnvName::kBipointTransfer:
      return ExpertBimanual(spec, o);
    case EnvName::kPointTrack: {
      // Lead the target by one step of its own motion.
      const Vec2 agent = At(o.observation, 0);
      const Vec2 next{o.desired_goal[0] + o.observation[2] * spec.step_scale,
                      o.desired_goal[1] + o.observation[3] * spec.step_scale};
      std::vector<double> a(2);
      MoveToward(a, 0, agent, next, spec.step_scale);
      return a;
    }
  }
  return {};
}

std::size_t DemoSet::num_transitions() const {
  std::size_t n = 0;
  for (const auto& e : episodes) n += e.size();
  return n;
}

DemoSet GenerateDemonstrations(EnvName name, int episodes, std::uint64_t seed) {
  if (episodes < 1) throw UsageError("demonstration episode count must be >= 1");
  Env env(name);
  std::mt19937_64 seeder(seed);
  DemoSet out;
  out.env = name;
  out.seed = seed;
  std::vector<bool> window;
  while (static_cast<int>(out.episodes.size()) < episodes) {
    GoalObservation obs = env.Reset(seeder());
    Episode ep;
    ep.reserve(env.spec().horizon);
    bool success = false;
    for (int t = 0; t < env.spec().horizon; ++t) {
      Transition tr;
      tr.state = obs;
      tr.action = env.ExpertAction();
      StepResult r = env.Step(tr.action);
      tr.reward = r.reward;
      tr.next_state = r.next_observation;
      tr.episode_id = static_cast<int>(out.episodes.size());
      tr.step_index = t;
      ep.push_back(std::move(tr));
      obs = r.next_observation;
      success = r.success;
    }
    out.attempts += 1;
    window.push_back(success);
    if (static_cast<int>(window.size()) > kExpertWindow) window.erase(window.begin());
    if (static_cast<int>(window.size()) == kExpertWindow &&
        std::count(window.begin(), window.end(), false) > kExpertWindow / 2) {
      throw ConfigError("scripted expert for " + std::string(ToString(name)) + " failed " +
                        std::to_string(std::count(window.begin(), window.end(), false)) + " of the last " +
                        std::to_string(kExpertWindow) + " episodes; the expert is broken");
    }
    if (success) out.episodes.push_back(std::move(ep));
  }
  return out;
}

DemoSet TruncateDemos(const DemoSet& demos, int episodes) {
  if (episodes < 1 || episodes > static_cast<int>(demos.episodes.size())) {
    throw UsageError("cannot keep " + std::to_string(episodes) + " of " +
                     std::to_string(demos.episodes.size()) + " demonstration episodes");
  }
  DemoSet out = demos;
  out.episodes.resize(episodes);
  return out;
}

void WriteDemoFile(const std::filesystem::path& path, const DemoSet& demos) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw ConfigError("cannot write demonstration file " + path.string());
  const EnvSpec spec = EnvSpec::For(demos.env);
  ordered_json header;
  header["format"] = "dexlab-demos";
  header["version"] = kDemoFormatVersion;
  header["env"] = std::string(ToString(demos.env));
  header["obs_dim"] = spec.obs_dim;
  header["goal_dim"] = spec.goal_dim;
  header["action_dim"] = spec.action_dim;
  header["horizon"] = spec.horizon;
  header["episodes"] = demos.episodes.size();
  header["seed"] = demos.seed;
  header["attempts"] = demos.attempts;
  os << header.dump() << '\n';
  for (const auto& ep : demos.episodes) {
    for (const auto& tr : ep) {
      ordered_json rec;
      rec["episode"] = tr.episode_id;
      rec["step"] = tr.step_index;
      rec["obs"] = tr.state.observation;
      rec["achieved_goal"] = tr.state.achieved_goal;
      rec["desired_goal"] = tr.state.desired_goal;
      rec["action"] = tr.action;
      rec["reward"] = tr.reward;
      rec["next_obs"] = tr.next_state.observation;
      rec["next_achieved_goal"] = tr.next_state.achieved_goal;
      rec["next_desired_goal"] = tr.next_state.desired_goal;
      os << rec.dump() << '\n';
    }
  }
  if (!os) throw ConfigError("failed writing demonstration file " + path.string());
}

DemoSet ReadDemoFile(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open demonstration file " + path.string());
  std::string line;
  if (!std::getline(is, line)) throw ConfigError("empty demonstration file " + path.string());
  DemoSet out;
  int expected = 0;
  int horizon = 0;
  try {
    const auto header = nlohmann::json::parse(line);
    if (header.at("format") != "dexlab-demos") throw ConfigError("not a dexlab demonstration file");
    if (header.at("version").get<int>() != kDemoFormatVersion) {
      throw ConfigError("unsupported demonstration file version");
    }
    out.env = ParseEnvName(header.at("env").get<std::string>());
    out.seed = header.at("seed").get<std::uint64_t>();
    out.attempts = header.at("attempts").get<int>();
    expected = header.at("episodes").get<int>();
    horizon = header.at("horizon").get<int>();
    const EnvSpec spec = EnvSpec::For(out.env);
    if (header.at("obs_dim").get<int>() != spec.obs_dim || header.at("action_dim").get<int>() != spec.action_dim ||
        header.at("goal_dim").get<int>() != spec.goal_dim || horizon != spec.horizon) {
      throw ConfigError("demonstration file dimensions do not match environment " +
                        std::string(ToString(out.env)));
    }
    std::size_t line_no = 1;
    while (std::getline(is, line)) {
      ++line_no;
      if (line.empty()) continue;
      const auto rec = nlohmann::json::parse(line);
      Transition tr;
      tr.episode_id = rec.at("episode").get<int>();
      tr.step_index = rec.at("step").get<int>();
      tr.state.observation = rec.at("obs").get<std::vector<double>>();
      tr.state.achieved_goal = rec.at("achieved_goal").get<std::vector<double>>();
      tr.state.desired_goal = rec.at("desired_goal").get<std::vector<double>>();
      tr.action = rec.at("action").get<std::vector<double>>();
      tr.reward = rec.at("reward").get<double>();
      tr.next_state.observation = rec.at("next_obs").get<std::vector<double>>();
      tr.next_state.achieved_goal = rec.at("next_achieved_goal").get<std::vector<double>>();
      tr.next_state.desired_goal = rec.at("next_desired_goal").get<std::vector<double>>();
      if (static_cast<int>(tr.state.observation.size()) != spec.obs_dim ||
          static_cast<int>(tr.action.size()) != spec.action_dim) {
        throw ConfigError("record on line " + std::to_string(line_no) + " has wrong dimensions");
      }
      if (tr.step_index == 0) {
        if (tr.episode_id != static_cast<int>(out.episodes.size())) {
          throw ConfigError("episode ids are not contiguous at line " + std::to_string(line_no));
        }
        out.episodes.emplace_back();
      } else if (out.episodes.empty() || out.episodes.back().back().step_index + 1 != tr.step_index ||
                 out.episodes.back().back().episode_id != tr.episode_id) {
        throw ConfigError("step indices are not contiguous at line " + std::to_string(line_no));
      }
      out.episodes.back().push_back(std::move(tr));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("malformed demonstration file " + path.string() + ": " + e.what());
  }
  if (static_cast<int>(out.episodes.size()) != expected) {
    throw ConfigError("demonstration file header promises " + std::to_string(expected) + " episodes, found " +
                      std::to_string(out.episodes.size()));
  }
  for (const auto& ep : out.episodes) {
    if (static_cast<int>(ep.size()) != horizon) throw ConfigError("demonstration episode shorter than horizon");
  }
  return out;
}

}  // namespace dexlab::envs
