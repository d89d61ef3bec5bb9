#pragma once

// Episode-structured replay for the agent buffer and the demonstration buffer,
// with hindsight relabeling ("future" strategy) applied at sampling time.

#include <cstdint>
#include <deque>
#include <random>
#include <vector>

#include "dexlab/envs.hpp"
#include "dexlab/nn.hpp"

namespace dexlab::replay {

using nn::RowMatrix;
using envs::Episode;
using envs::Transition;

enum class BufferRole { kAgent, kDemo };
enum class Source : std::uint8_t { kAgent, kDemo };

inline constexpr double kDefaultRelabelProb = 0.8;
inline constexpr std::size_t kDefaultAgentCapacity = 1'000'000;

class EpisodeBuffer {
 public:
  EpisodeBuffer(envs::EnvSpec spec, BufferRole role, std::size_t capacity = kDefaultAgentCapacity);

  // Episodes must span exactly one horizon with contiguous step indices.
  // Agent buffers evict oldest episodes past capacity; frozen demo buffers
  // reject writes with UsageError.
  void StoreEpisode(Episode episode);
  void Freeze() { frozen_ = true; }
  bool frozen() const { return frozen_; }

  // Loads every episode of `demos` and freezes the buffer.
  static EpisodeBuffer FromDemos(const envs::DemoSet& demos);

  BufferRole role() const { return role_; }
  const envs::EnvSpec& spec() const { return spec_; }
  std::size_t size() const { return num_transitions_; }
  std::size_t num_episodes() const { return episodes_.size(); }
  std::size_t capacity() const { return capacity_; }
  bool empty() const { return num_transitions_ == 0; }
  const Episode& episode(std::size_t i) const { return episodes_.at(i); }

 private:
  envs::EnvSpec spec_;
  BufferRole role_;
  std::size_t capacity_;
  bool frozen_ = false;
  std::size_t num_transitions_ = 0;
  std::deque<Episode> episodes_;
};

// Aligned rows; goals pair with obs, next_goals with next_obs. Relabeled items
// carry the substituted goal in both and a recomputed reward.
struct SampledBatch {
  RowMatrix obs;
  RowMatrix goals;
  RowMatrix actions;
  std::vector<double> rewards;
  RowMatrix next_obs;
  RowMatrix next_goals;
  RowMatrix next_achieved;
  std::vector<Source> source;
  std::vector<std::uint8_t> relabeled;
  std::vector<int> episode_ids;
  std::vector<int> step_indices;

  std::size_t size() const { return rewards.size(); }
};

// Uniform over stored transitions; each item relabeled with probability
// `relabel_prob` using the achieved goal of a uniformly drawn strictly-later
// state of the same episode. Throws UsageError on an empty buffer.
SampledBatch SampleWithHer(const EpisodeBuffer& buffer, int batch_size, double relabel_prob,
                           std::mt19937_64& rng);

// round(demo_fraction * batch_size) items from `demo`, the rest from `agent`.
// An empty side hands its share to the other; both empty is a UsageError.
// Agent items come first in the batch.
SampledBatch SampleMixed(const EpisodeBuffer& agent, const EpisodeBuffer* demo, int batch_size,
                         double demo_fraction, double relabel_prob, std::mt19937_64& rng);

}  // namespace dexlab::replay
