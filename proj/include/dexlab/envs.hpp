#pragma once

// Goal-conditioned 2-D toy manipulation tasks with scripted experts.
//
//   point_reach       move a point agent onto a goal (sparse)
//   point_pickplace   grasp an object and carry it to a goal (sparse)
//   bipoint_transfer  agent A hands the object to agent B across the midline (sparse)
//   point_track       follow a moving target (dense)
//
// Sparse reward is 0 on success and -1 otherwise; success is the strict
// inequality ||achieved - desired|| < success_threshold.

#include <array>
#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace dexlab::envs {

enum class EnvName { kPointReach, kPointPickPlace, kBipointTransfer, kPointTrack };

std::string_view ToString(EnvName name);
// Throws ConfigError for unknown names.
EnvName ParseEnvName(std::string_view name);
// Declared registry order; reports list tasks in this order.
const std::vector<EnvName>& EnvRegistry();

struct EnvSpec {
  EnvName name = EnvName::kPointReach;
  int obs_dim = 0;
  int goal_dim = 2;
  int action_dim = 2;
  int horizon = 50;
  double success_threshold = 0.05;
  double workspace_low = -1.0;
  double workspace_high = 1.0;
  double step_scale = 0.08;
  bool sparse = true;

  static EnvSpec For(EnvName name);
};

struct GoalObservation {
  std::vector<double> observation;
  std::vector<double> achieved_goal;
  std::vector<double> desired_goal;

  bool operator==(const GoalObservation&) const = default;
};

struct StepResult {
  GoalObservation next_observation;
  double reward = 0.0;
  bool done = false;
  bool success = false;
};

// One environment step, as stored in both replay buffers and demo files.
struct Transition {
  GoalObservation state;
  std::vector<double> action;
  double reward = 0.0;
  GoalObservation next_state;
  int episode_id = 0;
  int step_index = 0;

  bool operator==(const Transition&) const = default;
};

using Episode = std::vector<Transition>;

using Vec2 = std::array<double, 2>;

// Pure reward and success functions shared by Env::Step and hindsight relabeling.
bool IsSuccess(const EnvSpec& spec, std::span<const double> achieved, std::span<const double> desired);
double ComputeReward(const EnvSpec& spec, std::span<const double> achieved, std::span<const double> desired);

class Env {
 public:
  explicit Env(EnvSpec spec);
  explicit Env(EnvName name) : Env(EnvSpec::For(name)) {}

  const EnvSpec& spec() const { return spec_; }
  int step_index() const { return t_; }

  GoalObservation Reset(std::uint64_t seed);
  // Throws UsageError on wrong action length.
  StepResult Step(std::span<const double> action);
  GoalObservation Observe() const;

  double ComputeReward(std::span<const double> achieved, std::span<const double> desired) const {
    return envs::ComputeReward(spec_, achieved, desired);
  }
  bool IsSuccess(std::span<const double> achieved, std::span<const double> desired) const {
    return envs::IsSuccess(spec_, achieved, desired);
  }

  // Scripted controller evaluated on the current state.
  std::vector<double> ExpertAction() const { return ExpertActionFor(spec_, Observe()); }

  // Direct state placement for tests and audits. Positions are clamped to the
  // workspace; `holder` is -1 (free) or the index of the holding agent.
  void PlaceForTest(std::vector<Vec2> agents, Vec2 object, int holder, Vec2 goal,
                    Vec2 target_velocity = {0.0, 0.0});

  // The expert is a pure function of the observation.
  static std::vector<double> ExpertActionFor(const EnvSpec& spec, const GoalObservation& obs);

 private:
  void ClampAgent(int i);

  EnvSpec spec_;
  std::mt19937_64 rng_;
  std::vector<Vec2> agents_;
  Vec2 object_{0.0, 0.0};
  int holder_ = -1;
  Vec2 goal_{0.0, 0.0};
  Vec2 target_velocity_{0.0, 0.0};
  int t_ = 0;
};

struct DemoSet {
  EnvName env = EnvName::kPointReach;
  std::uint64_t seed = 0;
  int attempts = 0;
  std::vector<Episode> episodes;

  std::size_t num_transitions() const;
  bool operator==(const DemoSet&) const = default;
};

// Rolls out the expert from fresh seeds, keeping only episodes that succeed at
// the final step until `episodes` are collected. Throws UsageError if
// episodes < 1, and ConfigError when the expert fails more than half of a
// sliding 20-attempt window.
DemoSet GenerateDemonstrations(EnvName env, int episodes, std::uint64_t seed);

// Line-delimited JSON: one header object, then one object per transition.
inline constexpr int kDemoFormatVersion = 1;
void WriteDemoFile(const std::filesystem::path& path, const DemoSet& demos);
DemoSet ReadDemoFile(const std::filesystem::path& path);
// Keeps the first `episodes` episodes.
DemoSet TruncateDemos(const DemoSet& demos, int episodes);

}  // namespace dexlab::envs
