#include "dexlab/agents.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "dexlab/errors.hpp"

namespace dexlab::agents {
namespace {

RowMatrix HConcat(const RowMatrix& a, const RowMatrix& b) {
  RowMatrix out(a.rows(), a.cols() + b.cols());
  out << a, b;
  return out;
}

std::string BatchComposition(const replay::SampledBatch& batch) {
  const auto demo = std::count(batch.source.begin(), batch.source.end(), replay::Source::kDemo);
  return std::to_string(batch.size() - static_cast<std::size_t>(demo)) + " agent / " + std::to_string(demo) +
         " demo items";
}

}  // namespace

std::uint64_t EvalSeedFor(std::uint64_t run_seed) {
  std::mt19937_64 g(run_seed ^ 0x5DEECE66DULL);
  return g();
}

std::string_view ToString(Variant v) {
  switch (v) {
    case Variant::kDex: return "dex";
    case Variant::kDexRa: return "dex_ra";
    case Variant::kDexAc: return "dex_ac";
    case Variant::kDexBc: return "dex_bc";
    case Variant::kDdpg: return "ddpg";
    case Variant::kDdpgBc: return "ddpgbc";
    case Variant::kBc: return "bc";
    case Variant::kVinn: return "vinn";
  }
  return "unknown";
}

const std::vector<Variant>& VariantRegistry() {
  static const std::vector<Variant> kAll = {Variant::kDex,  Variant::kDexRa,  Variant::kDexAc, Variant::kDexBc,
                                            Variant::kDdpg, Variant::kDdpgBc, Variant::kBc,    Variant::kVinn};
  return kAll;
}

Variant ParseVariant(std::string_view name) {
  for (Variant v : VariantRegistry()) {
    if (ToString(v) == name) return v;
  }
  throw ConfigError("unknown agent variant '" + std::string(name) + "'");
}

bool RequiresDemos(Variant v) { return v != Variant::kDdpg; }
bool RegularizesCritic(Variant v) { return v == Variant::kDex || v == Variant::kDexBc; }
bool RegularizesActor(Variant v) { return v == Variant::kDex || v == Variant::kDexBc || v == Variant::kDexRa; }
bool NeedsPropagator(Variant v) { return RegularizesActor(v) || v == Variant::kVinn; }
bool IsActorCritic(Variant v) { return v != Variant::kBc && v != Variant::kVinn; }

void AgentConfig::Validate() const {
  auto fail = [](const std::string& what) { throw ConfigError("invalid agent config: " + what); };
  if (!(gamma > 0.0 && gamma <= 1.0)) fail("gamma must lie in (0,1]");
  if (!(alpha >= 0.0) || !std::isfinite(alpha)) fail("alpha must be non-negative");
  if (k_neighbors < 1) fail("k_neighbors must be >= 1");
  if (!(noise_scale >= 0.0)) fail("noise_scale must be non-negative");
  if (!(random_action_prob >= 0.0 && random_action_prob <= 1.0)) fail("random_action_prob must lie in [0,1]");
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (!(demo_fraction >= 0.0 && demo_fraction <= 1.0)) fail("demo_fraction must lie in [0,1]");
  if (!(polyak >= 0.0 && polyak <= 1.0)) fail("polyak must lie in [0,1]");
  if (!(actor_lr > 0.0) || !(critic_lr > 0.0)) fail("learning rates must be positive");
  if (!(relabel_prob >= 0.0 && relabel_prob <= 1.0)) fail("relabel_prob must lie in [0,1]");
  if (hidden.empty()) fail("hidden must list at least one layer width");
  for (int h : hidden) {
    if (h < 1) fail("hidden widths must be >= 1");
  }
  if (updates_per_episode < 0) fail("updates_per_episode must be non-negative");
  if (eval_episodes < 1) fail("eval_episodes must be >= 1");
  if (bc_epochs < 0) fail("bc_epochs must be non-negative");
  if (candidate_pool && *candidate_pool < k_neighbors) fail("candidate_pool must be >= k_neighbors");
}

double Distance(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw UsageError("action dimensions differ");
  double sq = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) sq += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(sq);
}

ActorCritic ActorCritic::Create(const envs::EnvSpec& env, const AgentConfig& config, std::mt19937_64& rng) {
  ActorCritic ac;
  const int state_dim = env.obs_dim + env.goal_dim;
  ac.actor_spec = nn::MlpSpec::WithHidden(state_dim, config.hidden, env.action_dim, nn::OutputActivation::kTanh);
  ac.critic_spec =
      nn::MlpSpec::WithHidden(state_dim + env.action_dim, config.hidden, 1, nn::OutputActivation::kIdentity);
  ac.actor = nn::InitParameters(ac.actor_spec, rng);
  ac.critic = nn::InitParameters(ac.critic_spec, rng);
  ac.target_actor = ac.actor;
  ac.target_critic = ac.critic;
  ac.actor_adam = nn::AdamState::ForParameters(ac.actor.size(), config.actor_lr);
  ac.critic_adam = nn::AdamState::ForParameters(ac.critic.size(), config.critic_lr);
  return ac;
}

RowMatrix StateInputs(const replay::SampledBatch& batch) { return HConcat(batch.obs, batch.goals); }
RowMatrix NextStateInputs(const replay::SampledBatch& batch) { return HConcat(batch.next_obs, batch.next_goals); }

// ---------------------------------------------------------------------------
// Agent

Agent::Agent(envs::EnvSpec env, AgentConfig config, std::mt19937_64& init_rng)
    : env_(env), config_(std::move(config)) {
  config_.Validate();
  if (!IsActorCritic(config_.variant)) {
    throw ConfigError(std::string(ToString(config_.variant)) + " is not an actor-critic variant");
  }
  nets_ = ActorCritic::Create(env_, config_, init_rng);
}

std::vector<double> Agent::SelectAction(std::span<const double> observation, std::span<const double> goal,
                                        bool explore, std::mt19937_64& rng) const {
  const std::vector<double> key = guidance::QueryKey(observation, goal);
  std::vector<double> a = nn::Forward(nets_.actor_spec, nets_.actor, key);
  if (explore) {
    std::normal_distribution<double> noise(0.0, 1.0);
    for (double& x : a) x = std::clamp(x + config_.noise_scale * noise(rng), -1.0, 1.0);
    std::uniform_real_distribution<double> coin(0.0, 1.0);
    if (coin(rng) < config_.random_action_prob) {
      std::uniform_real_distribution<double> uni(-1.0, 1.0);
      for (double& x : a) x = uni(rng);
    }
  }
  for (double& x : a) x = std::clamp(x, -1.0, 1.0);
  return a;
}

void Agent::CheckPropagator(const guidance::Propagator* propagator) const {
  if (propagator == nullptr) {
    throw ConfigError("variant " + std::string(ToString(config_.variant)) + " needs a guidance propagator");
  }
  if (propagator->action_dim() != env_.action_dim || propagator->state_dim() != env_.obs_dim + env_.goal_dim) {
    throw ConfigError("guidance propagator dimensions do not match environment " +
                      std::string(envs::ToString(env_.name)));
  }
}

std::pair<double, double> Agent::TargetBounds() const {
  const double alpha = RegularizesCritic(config_.variant) ? config_.alpha : 0.0;
  const double d_max = 2.0 * std::sqrt(static_cast<double>(env_.action_dim));
  if (config_.gamma >= 1.0) return {-std::numeric_limits<double>::infinity(), 0.0};
  return {-1.0 / (1.0 - config_.gamma) - config_.gamma * alpha * d_max, 0.0};
}

std::vector<double> Agent::CriticTarget(const replay::SampledBatch& batch, const guidance::Propagator* propagator,
                                        std::mt19937_64& rng) const {
  if (batch.size() == 0) throw UsageError("critic target on an empty batch");
  const RowMatrix next_in = NextStateInputs(batch);
  const RowMatrix next_action = nn::Predict(nets_.actor_spec, nets_.target_actor, next_in);
  const RowMatrix next_q = nn::Predict(nets_.critic_spec, nets_.target_critic, HConcat(next_in, next_action));

  std::vector<double> y(batch.size());
  const bool regularize = RegularizesCritic(config_.variant) && config_.alpha != 0.0;
  RowMatrix expert;
  if (regularize) {
    CheckPropagator(propagator);
    expert = propagator->Propagate(next_in, rng);
  }
  const auto [lo, hi] = TargetBounds();
  const bool clip = config_.clip_targets && env_.sparse;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto row = static_cast<Eigen::Index>(i);
    double value = next_q(row, 0);
    if (regularize) {
      const double d = (next_action.row(row) - expert.row(row)).norm();
      value -= config_.alpha * d;
    }
    y[i] = batch.rewards[i] + config_.gamma * value;
    if (clip) y[i] = std::clamp(y[i], lo, hi);
  }
  return y;
}

LossAndGrad Agent::CriticLoss(const replay::SampledBatch& batch, std::span<const double> targets) const {
  if (targets.size() != batch.size()) throw UsageError("target count differs from batch size");
  const RowMatrix input = HConcat(StateInputs(batch), batch.actions);
  const nn::ForwardCache cache = nn::ForwardBatch(nets_.critic_spec, nets_.critic, input);
  const double n = static_cast<double>(batch.size());
  RowMatrix upstream(cache.batch(), 1);
  double loss = 0.0;
  for (Eigen::Index i = 0; i < cache.batch(); ++i) {
    const double diff = cache.output(i, 0) - targets[static_cast<std::size_t>(i)];
    loss += diff * diff;
    upstream(i, 0) = 2.0 * diff / n;
  }
  LossAndGrad out;
  out.value = loss / n;
  out.grad = nn::BackwardBatch(nets_.critic_spec, nets_.critic, cache, upstream).param_grads;
  return out;
}

RowMatrix Agent::ActorExpertActions(const replay::SampledBatch& batch, const guidance::Propagator* propagator,
                                    std::mt19937_64& rng) const {
  if (config_.variant == Variant::kDdpgBc) return batch.actions;
  if (!RegularizesActor(config_.variant) || config_.alpha == 0.0) return {};
  RowMatrix expert = batch.actions;
  std::vector<Eigen::Index> agent_rows;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    if (batch.source[i] == replay::Source::kAgent) agent_rows.push_back(static_cast<Eigen::Index>(i));
  }
  if (!agent_rows.empty()) {
    CheckPropagator(propagator);
    const RowMatrix states = StateInputs(batch);
    RowMatrix queries(static_cast<Eigen::Index>(agent_rows.size()), states.cols());
    for (std::size_t j = 0; j < agent_rows.size(); ++j) queries.row(static_cast<Eigen::Index>(j)) = states.row(agent_rows[j]);
    const RowMatrix guided = propagator->Propagate(queries, rng);
    for (std::size_t j = 0; j < agent_rows.size(); ++j) expert.row(agent_rows[j]) = guided.row(static_cast<Eigen::Index>(j));
  }
  return expert;
}

LossAndGrad Agent::ActorLoss(const replay::SampledBatch& batch, const RowMatrix& expert_actions) const {
  const RowMatrix states = StateInputs(batch);
  const nn::ForwardCache actor_cache = nn::ForwardBatch(nets_.actor_spec, nets_.actor, states);
  const RowMatrix& actions = actor_cache.output;
  const nn::ForwardCache critic_cache = nn::ForwardBatch(nets_.critic_spec, nets_.critic, HConcat(states, actions));

  const Eigen::Index n = actions.rows();
  const Eigen::Index adim = actions.cols();
  const double inv_n = 1.0 / static_cast<double>(n);

  // L = -mean(Q) + penalty; dL/dQ = -1/n per row.
  RowMatrix dq = RowMatrix::Constant(n, 1, -inv_n);
  const nn::BackwardResult critic_back =
      nn::BackwardBatch(nets_.critic_spec, nets_.critic, critic_cache, dq, /*want_param_grads=*/false);
  RowMatrix grad_action = critic_back.input_grads.rightCols(adim);
  double objective = critic_cache.output.mean();

  const double alpha = config_.alpha;
  if (RegularizesActor(config_.variant) && alpha != 0.0) {
    if (expert_actions.rows() != n || expert_actions.cols() != adim) {
      throw UsageError("expert actions missing for a regularized actor update");
    }
    for (Eigen::Index i = 0; i < n; ++i) {
      const Eigen::RowVectorXd diff = actions.row(i) - expert_actions.row(i);
      const double d = diff.norm();
      objective -= alpha * d * inv_n;
      // Subgradient 0 at d = 0.
      if (d > 0.0) grad_action.row(i) += (alpha * inv_n / d) * diff;
    }
  } else if (config_.variant == Variant::kDdpgBc && alpha != 0.0) {
    if (expert_actions.rows() != n || expert_actions.cols() != adim) {
      throw UsageError("demo actions missing for the ddpgbc actor update");
    }
    const RowMatrix expert_q =
        nn::Predict(nets_.critic_spec, nets_.critic, HConcat(states, expert_actions));
    for (Eigen::Index i = 0; i < n; ++i) {
      if (batch.source[static_cast<std::size_t>(i)] != replay::Source::kDemo) continue;
      if (!(expert_q(i, 0) > critic_cache.output(i, 0))) continue;
      const Eigen::RowVectorXd diff = actions.row(i) - expert_actions.row(i);
      objective -= alpha * diff.squaredNorm() * inv_n;
      grad_action.row(i) += (2.0 * alpha * inv_n) * diff;
    }
  }

  LossAndGrad out;
  out.value = -objective;
  out.grad = nn::BackwardBatch(nets_.actor_spec, nets_.actor, actor_cache, grad_action).param_grads;
  return out;
}

double Agent::CriticUpdate(const replay::SampledBatch& batch, const guidance::Propagator* propagator,
                           std::mt19937_64& rng) {
  const std::vector<double> y = CriticTarget(batch, propagator, rng);
  LossAndGrad lg = CriticLoss(batch, y);
  if (!std::isfinite(lg.value)) {
    throw NumericError("non-finite critic loss at update " + std::to_string(num_updates_) + " (" +
                       BatchComposition(batch) + ")");
  }
  try {
    nn::AdamStep(nets_.critic, lg.grad, nets_.critic_adam);
  } catch (const NumericError& e) {
    throw NumericError(std::string(e.what()) + " in critic update " + std::to_string(num_updates_) + " (" +
                       BatchComposition(batch) + ")");
  }
  return lg.value;
}

double Agent::ActorUpdate(const replay::SampledBatch& batch, const guidance::Propagator* propagator,
                          std::mt19937_64& rng) {
  const RowMatrix expert = ActorExpertActions(batch, propagator, rng);
  LossAndGrad lg = ActorLoss(batch, expert);
  if (!std::isfinite(lg.value)) {
    throw NumericError("non-finite actor objective at update " + std::to_string(num_updates_) + " (" +
                       BatchComposition(batch) + ")");
  }
  try {
    nn::AdamStep(nets_.actor, lg.grad, nets_.actor_adam);
  } catch (const NumericError& e) {
    throw NumericError(std::string(e.what()) + " in actor update " + std::to_string(num_updates_) + " (" +
                       BatchComposition(batch) + ")");
  }
  return -lg.value;
}

void Agent::UpdateTargets() {
  nn::PolyakUpdate(nets_.target_critic, nets_.critic, config_.polyak);
  nn::PolyakUpdate(nets_.target_actor, nets_.actor, config_.polyak);
  ++num_updates_;
}

// ---------------------------------------------------------------------------
// Policies and evaluation

Policy Policy::Network(nn::MlpSpec spec, nn::ParameterVector params) {
  Policy p;
  p.spec_ = std::move(spec);
  p.params_ = std::move(params);
  return p;
}

Policy Policy::Nonparametric(guidance::Propagator propagator, std::uint64_t seed) {
  Policy p;
  p.propagator_ = std::make_shared<const guidance::Propagator>(std::move(propagator));
  p.rng_ = std::make_shared<std::mt19937_64>(seed);
  return p;
}

std::vector<double> Policy::Act(const envs::GoalObservation& obs) const {
  const std::vector<double> key = guidance::QueryKey(obs.observation, obs.desired_goal);
  if (propagator_) {
    RowMatrix q(1, static_cast<Eigen::Index>(key.size()));
    std::copy(key.begin(), key.end(), q.data());
    const RowMatrix a = propagator_->Propagate(q, *rng_);
    return std::vector<double>(a.data(), a.data() + a.size());
  }
  std::vector<double> a = nn::Forward(spec_, params_, key);
  for (double& x : a) x = std::clamp(x, -1.0, 1.0);
  return a;
}

EvalResult Evaluate(envs::EnvName name, const Policy& policy, int episodes, std::uint64_t seed) {
  if (episodes < 1) throw UsageError("evaluation needs at least one episode");
  envs::Env env(name);
  std::mt19937_64 seeder(seed);
  EvalResult r;
  for (int e = 0; e < episodes; ++e) {
    envs::GoalObservation obs = env.Reset(seeder());
    bool success = false;
    for (int t = 0; t < env.spec().horizon; ++t) {
      const envs::StepResult s = env.Step(policy.Act(obs));
      obs = s.next_observation;
      success = s.success;
    }
    r.outcomes.push_back(success);
  }
  r.success_rate = static_cast<double>(std::count(r.outcomes.begin(), r.outcomes.end(), true)) / episodes;
  return r;
}

Policy BcFit(const envs::DemoSet& demos, int epochs, std::mt19937_64& rng, const std::vector<int>& hidden) {
  const guidance::DemoDataset data = guidance::DemoDataset::FromDemoSet(demos);
  guidance::BcOptions options;
  options.hidden = hidden;
  guidance::BcFit fit = guidance::FitBc(data, epochs, rng, options);
  return Policy::Network(std::move(fit.spec), std::move(fit.params));
}

Policy VinnPolicy(const envs::DemoSet& demos, int k) {
  auto data = std::make_shared<const guidance::DemoDataset>(guidance::DemoDataset::FromDemoSet(demos));
  return Policy::Nonparametric(guidance::Propagator::Lwr(std::move(data), k));
}

// ---------------------------------------------------------------------------
// Training

bool TrainLog::SameResults(const TrainLog& o) const {
  if (rows.size() != o.rows.size()) return false;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (!rows[i].SameResult(o.rows[i])) return false;
  }
  return true;
}

TrainResult Train(const AgentConfig& config, envs::EnvName env_name, const envs::DemoSet* demos,
                  const TrainOptions& options) {
  config.Validate();
  if (options.total_steps < 0) throw UsageError("total_steps must be non-negative");
  if (options.eval_every < 1) throw UsageError("eval_every must be >= 1");
  const Variant variant = config.variant;
  const bool have_demos = demos != nullptr && !demos->episodes.empty();
  if (RequiresDemos(variant) && !have_demos) {
    throw ConfigError("variant " + std::string(ToString(variant)) + " requires demonstration episodes");
  }
  if (have_demos && demos->env != env_name) {
    throw ConfigError("demonstrations were recorded on " + std::string(envs::ToString(demos->env)) +
                      ", training on " + std::string(envs::ToString(env_name)));
  }

  const auto start = std::chrono::steady_clock::now();
  auto elapsed = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count(); };
  const envs::EnvSpec spec = envs::EnvSpec::For(env_name);
  const std::uint64_t eval_seed = EvalSeedFor(options.seed);
  std::mt19937_64 rng(options.seed);
  TrainResult result;

  if (!IsActorCritic(variant)) {
    result.policy = variant == Variant::kBc ? BcFit(*demos, config.bc_epochs, rng, config.hidden)
                                            : VinnPolicy(*demos, config.k_neighbors);
    if (options.total_steps >= options.eval_every) {
      // No environment interaction: one evaluation stands for every grid point.
      const double success = Evaluate(env_name, result.policy, config.eval_episodes, eval_seed).success_rate;
      for (std::int64_t step = options.eval_every; step <= options.total_steps; step += options.eval_every) {
        result.log.rows.push_back({step, 0.0, 0.0, success, elapsed()});
        if (options.on_eval) options.on_eval(result.log.rows.back(), nullptr, result.policy);
      }
    }
    return result;
  }

  result.agent = std::make_unique<Agent>(spec, config, rng);
  Agent& agent = *result.agent;
  replay::EpisodeBuffer agent_buffer(spec, replay::BufferRole::kAgent);
  std::optional<replay::EpisodeBuffer> demo_buffer;
  std::optional<guidance::Propagator> propagator;
  if (have_demos) {
    demo_buffer.emplace(replay::EpisodeBuffer::FromDemos(*demos));
    if (NeedsPropagator(variant)) {
      auto data = std::make_shared<const guidance::DemoDataset>(guidance::DemoDataset::FromDemoSet(*demos));
      if (variant == Variant::kDexBc) {
        guidance::BcOptions bc;
        bc.hidden = config.hidden;
        propagator.emplace(guidance::FitBcPropagator(*data, config.bc_epochs, rng, bc));
      } else {
        propagator.emplace(guidance::Propagator::Lwr(data, config.k_neighbors, config.candidate_pool));
      }
    }
  }
  const guidance::Propagator* prop = propagator ? &*propagator : nullptr;
  const replay::EpisodeBuffer* demo_ptr = demo_buffer ? &*demo_buffer : nullptr;

  envs::Env env(spec);
  std::int64_t steps = 0;
  std::int64_t next_eval = options.eval_every;
  int episode_id = 0;
  double critic_sum = 0.0;
  double actor_sum = 0.0;
  std::int64_t update_count = 0;
  result.policy = Policy::Network(agent.nets().actor_spec, agent.nets().actor);

  while (steps < options.total_steps) {
    envs::Episode episode;
    episode.reserve(static_cast<std::size_t>(spec.horizon));
    envs::GoalObservation obs = env.Reset(rng());
    for (int t = 0; t < spec.horizon; ++t) {
      envs::Transition tr;
      tr.state = obs;
      tr.action = agent.SelectAction(obs.observation, obs.desired_goal, /*explore=*/true, rng);
      envs::StepResult s = env.Step(tr.action);
      tr.reward = s.reward;
      tr.next_state = s.next_observation;
      tr.episode_id = episode_id;
      tr.step_index = t;
      obs = s.next_observation;
      episode.push_back(std::move(tr));
    }
    ++episode_id;
    agent_buffer.StoreEpisode(std::move(episode));
    steps += spec.horizon;

    for (int u = 0; u < config.updates_per_episode; ++u) {
      const replay::SampledBatch batch = replay::SampleMixed(agent_buffer, demo_ptr, config.batch_size,
                                                             config.demo_fraction, config.relabel_prob, rng);
      try {
        critic_sum += agent.CriticUpdate(batch, prop, rng);
        actor_sum += agent.ActorUpdate(batch, prop, rng);
      } catch (const NumericError& e) {
        throw NumericError(std::string(e.what()) + " after " + std::to_string(steps) + " environment steps");
      }
      agent.UpdateTargets();
      ++update_count;
    }

    if (steps >= next_eval) {
      result.policy = Policy::Network(agent.nets().actor_spec, agent.nets().actor);
      const double success = Evaluate(env_name, result.policy, config.eval_episodes, eval_seed).success_rate;
      TrainRecord row;
      row.step = steps;
      row.critic_loss = update_count ? critic_sum / static_cast<double>(update_count) : 0.0;
      row.actor_objective = update_count ? actor_sum / static_cast<double>(update_count) : 0.0;
      row.eval_success = success;
      row.seconds = elapsed();
      result.log.rows.push_back(row);
      critic_sum = actor_sum = 0.0;
      update_count = 0;
      if (options.on_eval) options.on_eval(row, &agent, result.policy);
      while (next_eval <= steps) next_eval += options.eval_every;
    }
  }
  result.policy = Policy::Network(agent.nets().actor_spec, agent.nets().actor);
  result.env_steps = steps;
  return result;
}

}  // namespace dexlab::agents
