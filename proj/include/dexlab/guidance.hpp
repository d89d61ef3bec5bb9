#pragma once

// Expert-action estimates at arbitrary states: k-nearest-neighbor search over
// demonstration states plus an exponential-kernel locally weighted average of
// the neighbors' actions, or a pretrained behavior-cloning network.

#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "dexlab/envs.hpp"
#include "dexlab/nn.hpp"

namespace dexlab::guidance {

using nn::RowMatrix;

// Rows are (observation ++ desired goal) keys paired with expert actions.
struct DemoDataset {
  RowMatrix states;
  RowMatrix actions;
  std::string env_name;

  static DemoDataset FromDemoSet(const envs::DemoSet& demos);

  Eigen::Index size() const { return states.rows(); }
  int state_dim() const { return static_cast<int>(states.cols()); }
  int action_dim() const { return static_cast<int>(actions.cols()); }
};

std::vector<double> QueryKey(std::span<const double> observation, std::span<const double> goal);

struct Neighbor {
  Eigen::Index row = 0;
  double distance = 0.0;

  bool operator==(const Neighbor&) const = default;
};

// Exact k-d tree. Results are ordered by (distance, row) so equidistant rows
// resolve to the lower index, matching an exhaustive scan.
class KdIndex {
 public:
  explicit KdIndex(RowMatrix points, int leaf_size = 8);

  // Throws UsageError unless 1 <= k <= size() and the query has dim() entries.
  std::vector<Neighbor> Knn(std::span<const double> query, int k) const;

  Eigen::Index size() const { return points_.rows(); }
  int dim() const { return static_cast<int>(points_.cols()); }
  const RowMatrix& points() const { return points_; }

 private:
  struct Node {
    int split_dim = -1;  // -1 marks a leaf
    double split_value = 0.0;
    int left = -1;
    int right = -1;
    int begin = 0;
    int end = 0;
  };

  int Build(int begin, int end);
  void Search(int node, std::span<const double> query, int k, std::vector<std::pair<double, Eigen::Index>>& heap) const;
  double SquaredDistance(Eigen::Index row, std::span<const double> query) const;

  RowMatrix points_;
  int leaf_size_;
  std::vector<Eigen::Index> order_;
  std::vector<Node> nodes_;
  int root_ = -1;
};

struct WeightedNeighbor {
  std::span<const double> action;
  double distance = 0.0;
};

// sum_i exp(-d_i) a_i / sum_i exp(-d_i). Needs at least one neighbor.
std::vector<double> LwrEstimate(std::span<const WeightedNeighbor> neighbors);
// The normalized kernel weights used by LwrEstimate, in input order.
std::vector<double> LwrWeights(std::span<const double> distances);

enum class PropagatorKind { kNonparametricLwr, kParametricBc };

struct BcOptions {
  std::vector<int> hidden = {256, 256, 256};
  int batch_size = 256;
  double learning_rate = 1e-3;
};

class Propagator {
 public:
  // Requires k <= dataset size and, when set, k <= pool.
  static Propagator Lwr(std::shared_ptr<const DemoDataset> dataset, int k,
                        std::optional<int> candidate_pool = std::nullopt);
  static Propagator Bc(nn::MlpSpec spec, nn::ParameterVector params);
  // A BC propagator whose network has not been fitted; Propagate throws.
  static Propagator UnfittedBc(nn::MlpSpec spec);

  PropagatorKind kind() const { return kind_; }
  int k() const { return k_; }
  std::optional<int> candidate_pool() const { return pool_; }
  const nn::MlpSpec& bc_spec() const { return bc_spec_; }
  const nn::ParameterVector& bc_params() const { return bc_params_; }
  int state_dim() const;
  int action_dim() const;

  // One estimated expert action per query row, clipped to [-1,1]. The pool
  // variant draws its candidate rows from `rng` once per call.
  RowMatrix Propagate(const RowMatrix& queries, std::mt19937_64& rng) const;

 private:
  PropagatorKind kind_ = PropagatorKind::kNonparametricLwr;
  std::shared_ptr<const DemoDataset> dataset_;
  std::shared_ptr<const KdIndex> index_;
  int k_ = 0;
  std::optional<int> pool_;
  nn::MlpSpec bc_spec_;
  nn::ParameterVector bc_params_;
};

struct BcFit {
  nn::MlpSpec spec;
  nn::ParameterVector params;
  std::vector<double> epoch_losses;  // mean minibatch loss per epoch
};

// Mean squared error over rows and action components.
double BcLoss(const DemoDataset& data, const nn::MlpSpec& spec, const nn::ParameterVector& params);

// Adam on the mean squared error between tanh network outputs and demo
// actions. Zero epochs returns the initialization.
BcFit FitBc(const DemoDataset& data, int epochs, std::mt19937_64& rng, const BcOptions& options = {});
Propagator FitBcPropagator(const DemoDataset& data, int epochs, std::mt19937_64& rng,
                           const BcOptions& options = {});

}  // namespace dexlab::guidance
