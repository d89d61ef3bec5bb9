#pragma once

// Expert-guided actor-critic (DEX) with its ablations and baselines.
//
//   variant   critic target                 actor objective
//   dex       r + g(Q'(s',a') - alpha d')   Q(s,pi) - alpha d(pi, a_e)
//   dex_bc    as dex, guidance from a pretrained BC network
//   dex_ra    r + g Q'(s',a')               Q(s,pi) - alpha d(pi, a_e)
//   dex_ac    r + g Q'(s',a')               Q(s,pi)             (demos in replay only)
//   ddpg      r + g Q'(s',a')               Q(s,pi)             (demos optional)
//   ddpgbc    r + g Q'(s',a')               Q(s,pi) - alpha |pi - a_e|^2 on demo rows
//                                           where Q(s,a_e) > Q(s,pi)
//   bc        supervised fit to demo actions, no environment interaction
//   vinn      nearest-neighbor regression used directly as the policy
//
// a' comes from the target actor, a_e' from guidance propagation at s', and
// a_e is the stored demo action on demo rows and propagated elsewhere.

#include <chrono>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dexlab/envs.hpp"
#include "dexlab/guidance.hpp"
#include "dexlab/nn.hpp"
#include "dexlab/replay.hpp"

namespace dexlab::agents {

using nn::RowMatrix;

enum class Variant { kDex, kDexRa, kDexAc, kDexBc, kDdpg, kDdpgBc, kBc, kVinn };

std::string_view ToString(Variant v);
Variant ParseVariant(std::string_view name);  // ConfigError on unknown names
const std::vector<Variant>& VariantRegistry();

bool RequiresDemos(Variant v);
bool RegularizesCritic(Variant v);
bool RegularizesActor(Variant v);
bool NeedsPropagator(Variant v);
bool IsActorCritic(Variant v);

struct AgentConfig {
  double gamma = 0.98;
  double alpha = 5.0;
  int k_neighbors = 5;
  double noise_scale = 0.1;
  double random_action_prob = 0.2;
  int batch_size = 256;
  double demo_fraction = 0.25;
  double polyak = 0.95;
  double actor_lr = 1e-3;
  double critic_lr = 1e-3;
  double relabel_prob = 0.8;
  Variant variant = Variant::kDex;

  std::vector<int> hidden = {256, 256, 256};
  int updates_per_episode = 40;
  int eval_episodes = 20;
  int bc_epochs = 200;
  std::optional<int> candidate_pool;
  bool clip_targets = true;

  // Throws ConfigError on out-of-range fields.
  void Validate() const;
};

// d(a, b) = ||a - b||_2
double Distance(std::span<const double> a, std::span<const double> b);

struct ActorCritic {
  nn::MlpSpec actor_spec;
  nn::MlpSpec critic_spec;
  nn::ParameterVector actor;
  nn::ParameterVector critic;
  nn::ParameterVector target_actor;
  nn::ParameterVector target_critic;
  nn::AdamState actor_adam;
  nn::AdamState critic_adam;

  // Actor input is (obs ++ goal) with a tanh head; critic input is
  // (obs ++ goal ++ action) with an identity head. Targets start as copies.
  static ActorCritic Create(const envs::EnvSpec& env, const AgentConfig& config, std::mt19937_64& rng);

  bool operator==(const ActorCritic& o) const {
    return actor == o.actor && critic == o.critic && target_actor == o.target_actor &&
           target_critic == o.target_critic;
  }
};

struct LossAndGrad {
  double value = 0.0;
  nn::Gradients grad;
};

// Rows of (obs ++ goal) and (next_obs ++ next_goal).
RowMatrix StateInputs(const replay::SampledBatch& batch);
RowMatrix NextStateInputs(const replay::SampledBatch& batch);

class Agent {
 public:
  Agent(envs::EnvSpec env, AgentConfig config, std::mt19937_64& init_rng);

  const AgentConfig& config() const { return config_; }
  const envs::EnvSpec& env_spec() const { return env_; }
  ActorCritic& nets() { return nets_; }
  const ActorCritic& nets() const { return nets_; }

  std::vector<double> SelectAction(std::span<const double> observation, std::span<const double> goal, bool explore,
                                   std::mt19937_64& rng) const;

  // Bellman targets, computed without any gradient path back into the networks.
  std::vector<double> CriticTarget(const replay::SampledBatch& batch, const guidance::Propagator* propagator,
                                   std::mt19937_64& rng) const;
  // Bounds applied to targets on sparse tasks: [-1/(1-gamma) - gamma alpha d_max, 0].
  std::pair<double, double> TargetBounds() const;

  // Mean (y - Q(s,a))^2 and its gradient with respect to the critic parameters.
  LossAndGrad CriticLoss(const replay::SampledBatch& batch, std::span<const double> targets) const;
  // Negated actor objective and its gradient with respect to the actor
  // parameters. `expert_actions` may be empty when the variant ignores it.
  LossAndGrad ActorLoss(const replay::SampledBatch& batch, const RowMatrix& expert_actions) const;
  // Stored actions on demo rows, propagated guidance on agent rows. Empty when
  // the variant does not regularize its actor.
  RowMatrix ActorExpertActions(const replay::SampledBatch& batch, const guidance::Propagator* propagator,
                               std::mt19937_64& rng) const;

  // One Adam step each; return the pre-step loss / objective. Throw
  // NumericError with the update count and batch composition on non-finite values.
  double CriticUpdate(const replay::SampledBatch& batch, const guidance::Propagator* propagator,
                      std::mt19937_64& rng);
  double ActorUpdate(const replay::SampledBatch& batch, const guidance::Propagator* propagator,
                     std::mt19937_64& rng);
  void UpdateTargets();

  std::int64_t num_updates() const { return num_updates_; }

 private:
  void CheckPropagator(const guidance::Propagator* propagator) const;

  envs::EnvSpec env_;
  AgentConfig config_;
  ActorCritic nets_;
  std::int64_t num_updates_ = 0;
};

// A deterministic evaluation policy.
class Policy {
 public:
  static Policy Network(nn::MlpSpec spec, nn::ParameterVector params);
  static Policy Nonparametric(guidance::Propagator propagator, std::uint64_t seed = 0);

  std::vector<double> Act(const envs::GoalObservation& obs) const;
  bool is_network() const { return !propagator_; }
  const nn::MlpSpec& spec() const { return spec_; }
  const nn::ParameterVector& params() const { return params_; }

 private:
  nn::MlpSpec spec_;
  nn::ParameterVector params_;
  std::shared_ptr<const guidance::Propagator> propagator_;
  std::shared_ptr<std::mt19937_64> rng_;
};

// Seed of the evaluation episodes used throughout a run with `run_seed`.
std::uint64_t EvalSeedFor(std::uint64_t run_seed);

struct EvalResult {
  std::vector<bool> outcomes;
  double success_rate = 0.0;
};

// Runs `episodes` noiseless episodes from reset seeds derived from `seed`;
// success is success at the final step.
EvalResult Evaluate(envs::EnvName env, const Policy& policy, int episodes, std::uint64_t seed);

struct TrainRecord {
  std::int64_t step = 0;
  double critic_loss = 0.0;
  double actor_objective = 0.0;
  double eval_success = 0.0;
  double seconds = 0.0;  // wall clock, excluded from equality

  bool SameResult(const TrainRecord& o) const {
    return step == o.step && critic_loss == o.critic_loss && actor_objective == o.actor_objective &&
           eval_success == o.eval_success;
  }
};

struct TrainLog {
  std::vector<TrainRecord> rows;

  bool SameResults(const TrainLog& o) const;
};

struct TrainOptions {
  std::int64_t total_steps = 100'000;
  std::int64_t eval_every = 5'000;
  std::uint64_t seed = 0;
  // Called after each evaluation; the agent is null for bc and vinn.
  std::function<void(const TrainRecord&, const Agent*, const Policy&)> on_eval;
};

struct TrainResult {
  std::unique_ptr<Agent> agent;  // null for bc and vinn
  Policy policy;                 // final evaluation policy
  TrainLog log;
  std::int64_t env_steps = 0;
};

// Throws ConfigError when a demo-driven variant gets no demos or demos of a
// different environment.
TrainResult Train(const AgentConfig& config, envs::EnvName env, const envs::DemoSet* demos,
                  const TrainOptions& options);

// Baseline behavior cloning: a tanh network fitted to the demo actions.
Policy BcFit(const envs::DemoSet& demos, int epochs, std::mt19937_64& rng, const std::vector<int>& hidden);
// Nearest-neighbor regression over the demos used directly as the policy.
Policy VinnPolicy(const envs::DemoSet& demos, int k);

}  // namespace dexlab::agents
