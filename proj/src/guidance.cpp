#include "dexlab/guidance.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <queue>

#include "dexlab/errors.hpp"

namespace dexlab::guidance {
namespace {

using HeapItem = std::pair<double, Eigen::Index>;  // (squared distance, row)

std::vector<Neighbor> Finish(std::vector<HeapItem> items) {
  std::sort(items.begin(), items.end());
  std::vector<Neighbor> out;
  out.reserve(items.size());
  for (const auto& [sq, row] : items) out.push_back({row, std::sqrt(sq)});
  return out;
}

}  // namespace

DemoDataset DemoDataset::FromDemoSet(const envs::DemoSet& demos) {
  if (demos.episodes.empty()) throw UsageError("demonstration set is empty");
  const envs::EnvSpec spec = envs::EnvSpec::For(demos.env);
  const auto n = static_cast<Eigen::Index>(demos.num_transitions());
  DemoDataset d;
  d.env_name = std::string(envs::ToString(demos.env));
  d.states.resize(n, spec.obs_dim + spec.goal_dim);
  d.actions.resize(n, spec.action_dim);
  Eigen::Index row = 0;
  for (const auto& ep : demos.episodes) {
    for (const auto& tr : ep) {
      const auto key = QueryKey(tr.state.observation, tr.state.desired_goal);
      for (std::size_t j = 0; j < key.size(); ++j) d.states(row, static_cast<Eigen::Index>(j)) = key[j];
      for (std::size_t j = 0; j < tr.action.size(); ++j) {
        d.actions(row, static_cast<Eigen::Index>(j)) = std::clamp(tr.action[j], -1.0, 1.0);
      }
      ++row;
    }
  }
  return d;
}

std::vector<double> QueryKey(std::span<const double> observation, std::span<const double> goal) {
  std::vector<double> key(observation.begin(), observation.end());
  key.insert(key.end(), goal.begin(), goal.end());
  return key;
}

// ---------------------------------------------------------------------------
// KdIndex

KdIndex::KdIndex(RowMatrix points, int leaf_size) : points_(std::move(points)), leaf_size_(std::max(1, leaf_size)) {
  if (points_.rows() == 0) throw UsageError("cannot index an empty point set");
  order_.resize(static_cast<std::size_t>(points_.rows()));
  std::iota(order_.begin(), order_.end(), Eigen::Index{0});
  nodes_.reserve(2 * order_.size() / static_cast<std::size_t>(leaf_size_) + 1);
  root_ = Build(0, static_cast<int>(order_.size()));
}

int KdIndex::Build(int begin, int end) {
  Node node;
  node.begin = begin;
  node.end = end;
  if (end - begin > leaf_size_) {
    // Split on the dimension of largest spread at the median.
    int best_dim = 0;
    double best_spread = -1.0;
    for (int d = 0; d < dim(); ++d) {
      double lo = points_(order_[begin], d);
      double hi = lo;
      for (int i = begin + 1; i < end; ++i) {
        lo = std::min(lo, points_(order_[i], d));
        hi = std::max(hi, points_(order_[i], d));
      }
      if (hi - lo > best_spread) {
        best_spread = hi - lo;
        best_dim = d;
      }
    }
    if (best_spread > 0.0) {
      const int mid = begin + (end - begin) / 2;
      std::nth_element(order_.begin() + begin, order_.begin() + mid, order_.begin() + end,
                       [&](Eigen::Index a, Eigen::Index b) { return points_(a, best_dim) < points_(b, best_dim); });
      node.split_dim = best_dim;
      node.split_value = points_(order_[mid], best_dim);
      const int self = static_cast<int>(nodes_.size());
      nodes_.push_back(node);
      const int left = Build(begin, mid);
      const int right = Build(mid, end);
      nodes_[self].left = left;
      nodes_[self].right = right;
      return self;
    }
  }
  nodes_.push_back(node);
  return static_cast<int>(nodes_.size()) - 1;
}

double KdIndex::SquaredDistance(Eigen::Index row, std::span<const double> query) const {
  double sq = 0.0;
  for (int d = 0; d < dim(); ++d) {
    const double diff = points_(row, d) - query[d];
    sq += diff * diff;
  }
  return sq;
}

void KdIndex::Search(int node_id, std::span<const double> query, int k, std::vector<HeapItem>& heap) const {
  const Node& node = nodes_[node_id];
  if (node.split_dim < 0) {
    for (int i = node.begin; i < node.end; ++i) {
      const Eigen::Index row = order_[i];
      const HeapItem item{SquaredDistance(row, query), row};
      if (static_cast<int>(heap.size()) < k) {
        heap.push_back(item);
        std::push_heap(heap.begin(), heap.end());
      } else if (item < heap.front()) {
        std::pop_heap(heap.begin(), heap.end());
        heap.back() = item;
        std::push_heap(heap.begin(), heap.end());
      }
    }
    return;
  }
  const double diff = query[node.split_dim] - node.split_value;
  const int near = diff < 0.0 ? node.left : node.right;
  const int far = diff < 0.0 ? node.right : node.left;
  Search(near, query, k, heap);
  // Visit on equality too: a tied row with a lower index may live there.
  if (static_cast<int>(heap.size()) < k || diff * diff <= heap.front().first) {
    Search(far, query, k, heap);
  }
}

std::vector<Neighbor> KdIndex::Knn(std::span<const double> query, int k) const {
  if (static_cast<int>(query.size()) != dim()) {
    throw UsageError("query has " + std::to_string(query.size()) + " components, index has " +
                     std::to_string(dim()));
  }
  if (k < 1 || k > size()) {
    throw UsageError("k = " + std::to_string(k) + " outside [1, " + std::to_string(size()) + "]");
  }
  std::vector<HeapItem> heap;
  heap.reserve(static_cast<std::size_t>(k));
  Search(root_, query, k, heap);
  return Finish(std::move(heap));
}

// ---------------------------------------------------------------------------
// Locally weighted regression

std::vector<double> LwrWeights(std::span<const double> distances) {
  if (distances.empty()) throw UsageError("locally weighted regression needs at least one neighbor");
  // Shifting by the minimum distance leaves the normalized weights unchanged
  // and keeps the largest weight at exactly 1.
  const double d_min = *std::min_element(distances.begin(), distances.end());
  std::vector<double> w(distances.size());
  double total = 0.0;
  for (std::size_t i = 0; i < distances.size(); ++i) {
    w[i] = std::exp(-(distances[i] - d_min));
    total += w[i];
  }
  for (double& x : w) x /= total;
  return w;
}

std::vector<double> LwrEstimate(std::span<const WeightedNeighbor> neighbors) {
  if (neighbors.empty()) throw UsageError("locally weighted regression needs at least one neighbor");
  const std::size_t dim = neighbors.front().action.size();
  // Canonical order makes the floating-point sum independent of input order.
  std::vector<const WeightedNeighbor*> sorted;
  sorted.reserve(neighbors.size());
  for (const auto& n : neighbors) {
    if (n.action.size() != dim) throw UsageError("neighbor actions have different dimensions");
    sorted.push_back(&n);
  }
  std::sort(sorted.begin(), sorted.end(), [](const WeightedNeighbor* a, const WeightedNeighbor* b) {
    if (a->distance != b->distance) return a->distance < b->distance;
    return std::lexicographical_compare(a->action.begin(), a->action.end(), b->action.begin(), b->action.end());
  });
  std::vector<double> distances;
  distances.reserve(sorted.size());
  for (const auto* n : sorted) distances.push_back(n->distance);
  const std::vector<double> w = LwrWeights(distances);
  // a_0 + sum_i w_i (a_i - a_0) equals sum_i w_i a_i since the weights sum to
  // one, and returns equal actions exactly.
  const std::span<const double> base = sorted.front()->action;
  std::vector<double> out(base.begin(), base.end());
  for (std::size_t i = 1; i < sorted.size(); ++i) {
    for (std::size_t j = 0; j < dim; ++j) out[j] += w[i] * (sorted[i]->action[j] - base[j]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Propagator

Propagator Propagator::Lwr(std::shared_ptr<const DemoDataset> dataset, int k, std::optional<int> candidate_pool) {
  if (!dataset || dataset->size() == 0) throw ConfigError("LWR propagation needs a non-empty demo dataset");
  if (k < 1 || k > dataset->size()) {
    throw ConfigError("k = " + std::to_string(k) + " must lie in [1, " + std::to_string(dataset->size()) + "]");
  }
  if (candidate_pool && *candidate_pool < k) throw ConfigError("candidate pool smaller than k");
  Propagator p;
  p.kind_ = PropagatorKind::kNonparametricLwr;
  p.k_ = k;
  p.pool_ = candidate_pool;
  p.index_ = std::make_shared<const KdIndex>(dataset->states);
  p.dataset_ = std::move(dataset);
  return p;
}

Propagator Propagator::Bc(nn::MlpSpec spec, nn::ParameterVector params) {
  spec.validate();
  if (params.size() != spec.num_parameters()) throw ConfigError("BC parameters do not match the network spec");
  Propagator p;
  p.kind_ = PropagatorKind::kParametricBc;
  p.bc_spec_ = std::move(spec);
  p.bc_params_ = std::move(params);
  return p;
}

Propagator Propagator::UnfittedBc(nn::MlpSpec spec) {
  Propagator p;
  p.kind_ = PropagatorKind::kParametricBc;
  p.bc_spec_ = std::move(spec);
  return p;
}

int Propagator::state_dim() const {
  return kind_ == PropagatorKind::kNonparametricLwr ? dataset_->state_dim() : bc_spec_.input_dim();
}

int Propagator::action_dim() const {
  return kind_ == PropagatorKind::kNonparametricLwr ? dataset_->action_dim() : bc_spec_.output_dim();
}

RowMatrix Propagator::Propagate(const RowMatrix& queries, std::mt19937_64& rng) const {
  if (kind_ == PropagatorKind::kParametricBc) {
    if (bc_params_.size() == 0) throw UsageError("BC propagator used before fitting");
    RowMatrix out = nn::Predict(bc_spec_, bc_params_, queries);
    return out.cwiseMax(-1.0).cwiseMin(1.0);
  }
  if (queries.cols() != dataset_->state_dim()) {
    throw ConfigError("propagation query has " + std::to_string(queries.cols()) + " columns, demo states have " +
                      std::to_string(dataset_->state_dim()));
  }
  const DemoDataset& data = *dataset_;
  RowMatrix out(queries.rows(), data.action_dim());

  std::vector<Eigen::Index> pool;
  if (pool_) {
    // Partial Fisher-Yates: a uniform subset of min(pool, N) rows.
    const auto n = data.size();
    std::vector<Eigen::Index> all(static_cast<std::size_t>(n));
    std::iota(all.begin(), all.end(), Eigen::Index{0});
    const auto m = std::min<Eigen::Index>(*pool_, n);
    for (Eigen::Index i = 0; i < m; ++i) {
      std::uniform_int_distribution<Eigen::Index> pick(i, n - 1);
      std::swap(all[static_cast<std::size_t>(i)], all[static_cast<std::size_t>(pick(rng))]);
    }
    pool.assign(all.begin(), all.begin() + m);
  }

  std::vector<WeightedNeighbor> neighbors(static_cast<std::size_t>(k_));
  for (Eigen::Index q = 0; q < queries.rows(); ++q) {
    std::span<const double> query(queries.row(q).data(), static_cast<std::size_t>(queries.cols()));
    std::vector<Neighbor> nn_rows;
    if (pool_) {
      std::vector<HeapItem> items;
      items.reserve(pool.size());
      for (Eigen::Index row : pool) {
        double sq = 0.0;
        for (int d = 0; d < data.state_dim(); ++d) {
          const double diff = data.states(row, d) - query[d];
          sq += diff * diff;
        }
        items.emplace_back(sq, row);
      }
      std::partial_sort(items.begin(), items.begin() + k_, items.end());
      items.resize(static_cast<std::size_t>(k_));
      nn_rows = Finish(std::move(items));
    } else {
      nn_rows = index_->Knn(query, k_);
    }
    for (int i = 0; i < k_; ++i) {
      neighbors[i].action = std::span<const double>(data.actions.row(nn_rows[i].row).data(),
                                                    static_cast<std::size_t>(data.action_dim()));
      neighbors[i].distance = nn_rows[i].distance;
    }
    const std::vector<double> a = LwrEstimate(neighbors);
    for (int j = 0; j < data.action_dim(); ++j) out(q, j) = std::clamp(a[j], -1.0, 1.0);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Behavior cloning

double BcLoss(const DemoDataset& data, const nn::MlpSpec& spec, const nn::ParameterVector& params) {
  const RowMatrix pred = nn::Predict(spec, params, data.states);
  return (pred - data.actions).array().square().mean();
}

BcFit FitBc(const DemoDataset& data, int epochs, std::mt19937_64& rng, const BcOptions& options) {
  if (data.size() == 0) throw UsageError("cannot fit behavior cloning on an empty dataset");
  if (epochs < 0) throw UsageError("epoch count must be non-negative");
  BcFit fit;
  fit.spec = nn::MlpSpec::WithHidden(data.state_dim(), options.hidden, data.action_dim(), nn::OutputActivation::kTanh);
  fit.params = nn::InitParameters(fit.spec, rng);
  nn::AdamState adam = nn::AdamState::ForParameters(fit.params.size(), options.learning_rate);

  const auto n = data.size();
  const Eigen::Index batch = std::min<Eigen::Index>(options.batch_size, n);
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  for (int epoch = 0; epoch < epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    int batches = 0;
    for (Eigen::Index start = 0; start < n; start += batch) {
      const Eigen::Index m = std::min(batch, n - start);
      RowMatrix x(m, data.state_dim());
      RowMatrix y(m, data.action_dim());
      for (Eigen::Index i = 0; i < m; ++i) {
        x.row(i) = data.states.row(order[static_cast<std::size_t>(start + i)]);
        y.row(i) = data.actions.row(order[static_cast<std::size_t>(start + i)]);
      }
      const nn::ForwardCache cache = nn::ForwardBatch(fit.spec, fit.params, x);
      const RowMatrix err = cache.output - y;
      const double scale = 1.0 / static_cast<double>(m * data.action_dim());
      loss_sum += err.array().square().sum() * scale;
      ++batches;
      const RowMatrix upstream = (2.0 * scale) * err;
      nn::BackwardResult g = nn::BackwardBatch(fit.spec, fit.params, cache, upstream);
      nn::AdamStep(fit.params, g.param_grads, adam);
    }
    fit.epoch_losses.push_back(loss_sum / batches);
  }
  return fit;
}

Propagator FitBcPropagator(const DemoDataset& data, int epochs, std::mt19937_64& rng, const BcOptions& options) {
  BcFit fit = FitBc(data, epochs, rng, options);
  return Propagator::Bc(std::move(fit.spec), std::move(fit.params));
}

}  // namespace dexlab::guidance
