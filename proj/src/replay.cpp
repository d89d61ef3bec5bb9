#include "dexlab/replay.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "dexlab/errors.hpp"

namespace dexlab::replay {
namespace {

void CopyRow(RowMatrix& m, Eigen::Index row, const std::vector<double>& v) {
  for (std::size_t j = 0; j < v.size(); ++j) m(row, static_cast<Eigen::Index>(j)) = v[j];
}

SampledBatch AllocateBatch(const envs::EnvSpec& spec, int n) {
  SampledBatch b;
  b.obs.resize(n, spec.obs_dim);
  b.goals.resize(n, spec.goal_dim);
  b.actions.resize(n, spec.action_dim);
  b.rewards.resize(n);
  b.next_obs.resize(n, spec.obs_dim);
  b.next_goals.resize(n, spec.goal_dim);
  b.next_achieved.resize(n, spec.goal_dim);
  b.source.resize(n);
  b.relabeled.resize(n);
  b.episode_ids.resize(n);
  b.step_indices.resize(n);
  return b;
}

// Fills rows [offset, offset + count) of `out`.
void FillFrom(const EpisodeBuffer& buffer, int offset, int count, double relabel_prob,
              Source source, std::mt19937_64& rng, SampledBatch& out) {
  if (count == 0) return;
  if (buffer.empty()) throw UsageError("cannot sample from an empty replay buffer");
  const int horizon = buffer.spec().horizon;
  std::uniform_int_distribution<std::size_t> pick(0, buffer.size() - 1);
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  for (int i = 0; i < count; ++i) {
    const std::size_t flat = pick(rng);
    const std::size_t ep_index = flat / static_cast<std::size_t>(horizon);
    const int t = static_cast<int>(flat % static_cast<std::size_t>(horizon));
    const Episode& ep = buffer.episode(ep_index);
    const Transition& tr = ep[t];
    const Eigen::Index row = offset + i;

    CopyRow(out.obs, row, tr.state.observation);
    CopyRow(out.actions, row, tr.action);
    CopyRow(out.next_obs, row, tr.next_state.observation);
    CopyRow(out.next_achieved, row, tr.next_state.achieved_goal);
    out.source[row] = source;
    out.episode_ids[row] = tr.episode_id;
    out.step_indices[row] = tr.step_index;

    const bool relabel = coin(rng) < relabel_prob;
    if (relabel) {
      // Achieved goal at a state index in {t+1, ..., horizon}.
      std::uniform_int_distribution<int> future(t, horizon - 1);
      const std::vector<double>& goal = ep[future(rng)].next_state.achieved_goal;
      CopyRow(out.goals, row, goal);
      CopyRow(out.next_goals, row, goal);
      out.rewards[row] = envs::ComputeReward(buffer.spec(), tr.next_state.achieved_goal, goal);
      out.relabeled[row] = 1;
    } else {
      CopyRow(out.goals, row, tr.state.desired_goal);
      CopyRow(out.next_goals, row, tr.next_state.desired_goal);
      out.rewards[row] = tr.reward;
      out.relabeled[row] = 0;
    }
  }
}

void CheckProbability(double p, const char* what) {
  if (!(p >= 0.0 && p <= 1.0)) throw UsageError(std::string(what) + " must lie in [0,1]");
}

}  // namespace

EpisodeBuffer::EpisodeBuffer(envs::EnvSpec spec, BufferRole role, std::size_t capacity)
    : spec_(spec), role_(role), capacity_(capacity) {
  if (capacity_ < static_cast<std::size_t>(spec_.horizon)) {
    throw ConfigError("replay capacity is smaller than one episode");
  }
}

void EpisodeBuffer::StoreEpisode(Episode episode) {
  if (frozen_) throw UsageError("the demonstration buffer is immutable once loaded");
  if (static_cast<int>(episode.size()) != spec_.horizon) {
    throw UsageError("episode has " + std::to_string(episode.size()) + " steps, horizon is " +
                     std::to_string(spec_.horizon));
  }
  for (int t = 0; t < spec_.horizon; ++t) {
    const Transition& tr = episode[t];
    if (tr.step_index != t || tr.episode_id != episode.front().episode_id) {
      throw UsageError("episode step indices are not contiguous");
    }
    if (static_cast<int>(tr.next_state.achieved_goal.size()) != spec_.goal_dim ||
        static_cast<int>(tr.action.size()) != spec_.action_dim) {
      throw UsageError("transition dimensions do not match the environment");
    }
  }
  num_transitions_ += episode.size();
  episodes_.push_back(std::move(episode));
  if (role_ == BufferRole::kAgent) {
    while (num_transitions_ > capacity_) {
      num_transitions_ -= episodes_.front().size();
      episodes_.pop_front();
    }
  } else if (num_transitions_ > capacity_) {
    throw UsageError("demonstration buffer capacity exceeded");
  }
}

EpisodeBuffer EpisodeBuffer::FromDemos(const envs::DemoSet& demos) {
  const envs::EnvSpec spec = envs::EnvSpec::For(demos.env);
  EpisodeBuffer buf(spec, BufferRole::kDemo,
                    std::max<std::size_t>(demos.num_transitions(), static_cast<std::size_t>(spec.horizon)));
  for (const auto& ep : demos.episodes) buf.StoreEpisode(ep);
  buf.Freeze();
  return buf;
}

SampledBatch SampleWithHer(const EpisodeBuffer& buffer, int batch_size, double relabel_prob,
                           std::mt19937_64& rng) {
  if (batch_size < 1) throw UsageError("batch size must be >= 1");
  CheckProbability(relabel_prob, "relabel probability");
  if (buffer.empty()) throw UsageError("cannot sample from an empty replay buffer");
  SampledBatch out = AllocateBatch(buffer.spec(), batch_size);
  const Source src = buffer.role() == BufferRole::kDemo ? Source::kDemo : Source::kAgent;
  FillFrom(buffer, 0, batch_size, relabel_prob, src, rng, out);
  return out;
}

SampledBatch SampleMixed(const EpisodeBuffer& agent, const EpisodeBuffer* demo, int batch_size,
                         double demo_fraction, double relabel_prob, std::mt19937_64& rng) {
  if (batch_size < 1) throw UsageError("batch size must be >= 1");
  CheckProbability(demo_fraction, "demo fraction");
  CheckProbability(relabel_prob, "relabel probability");
  const bool have_demo = demo != nullptr && !demo->empty();
  if (agent.empty() && !have_demo) throw UsageError("both replay buffers are empty");
  int n_demo = have_demo ? static_cast<int>(std::lround(demo_fraction * batch_size)) : 0;
  if (agent.empty()) n_demo = batch_size;
  const int n_agent = batch_size - n_demo;
  SampledBatch out = AllocateBatch(agent.spec(), batch_size);
  FillFrom(agent, 0, n_agent, relabel_prob, Source::kAgent, rng, out);
  if (n_demo > 0) FillFrom(*demo, n_agent, n_demo, relabel_prob, Source::kDemo, rng, out);
  return out;
}

}  // namespace dexlab::replay
