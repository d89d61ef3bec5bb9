#pragma once

// Feed-forward networks with hand-written backpropagation, Adam and Polyak
// averaging. All arithmetic is double precision.
//
// Parameter layout, per layer l (in = sizes[l], out = sizes[l+1]):
//   weight matrix, out x in, row-major   (y = W x + b)
//   bias vector, out
// Layers are stored back to back in order.

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace dexlab::nn {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

enum class HiddenActivation { kRelu };
enum class OutputActivation { kIdentity, kTanh };

struct MlpSpec {
  std::vector<int> layer_sizes;
  HiddenActivation hidden_activation = HiddenActivation::kRelu;
  OutputActivation output_activation = OutputActivation::kIdentity;

  int input_dim() const { return layer_sizes.front(); }
  int output_dim() const { return layer_sizes.back(); }
  int num_layers() const { return static_cast<int>(layer_sizes.size()) - 1; }
  std::size_t num_parameters() const;

  // Throws ConfigError if fewer than two sizes or any size < 1.
  void validate() const;

  // Four fully-connected layers: input -> hidden x3 -> output.
  static MlpSpec Default(int input_dim, int output_dim, OutputActivation out,
                         int hidden = 256);
  static MlpSpec WithHidden(int input_dim, const std::vector<int>& hidden,
                            int output_dim, OutputActivation out);

  bool operator==(const MlpSpec&) const = default;
};

struct ParameterVector {
  std::vector<double> values;

  std::size_t size() const { return values.size(); }
  bool operator==(const ParameterVector&) const = default;
};

struct Gradients {
  std::vector<double> values;
};

struct AdamState {
  std::vector<double> first_moment;
  std::vector<double> second_moment;
  std::int64_t step_count = 0;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  static AdamState ForParameters(std::size_t n, double learning_rate = 1e-3);
};

// Per-layer activations saved by a forward pass. inputs[l] is the input to
// layer l (inputs[0] is the network input); pre[l] is W_l x + b_l.
struct ForwardCache {
  std::vector<int> layer_sizes;
  std::size_t num_parameters = 0;
  std::vector<RowMatrix> inputs;
  std::vector<RowMatrix> pre;
  RowMatrix output;

  Eigen::Index batch() const { return output.rows(); }
};

// Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)] for weights and biases.
ParameterVector InitParameters(const MlpSpec& spec, std::mt19937_64& rng);

// Batched forward; rows of `input` are samples. Throws ConfigError on
// dimension mismatch, NumericError on non-finite input.
ForwardCache ForwardBatch(const MlpSpec& spec, const ParameterVector& params,
                          const RowMatrix& input);

// Output only, no cache kept.
RowMatrix Predict(const MlpSpec& spec, const ParameterVector& params,
                  const RowMatrix& input);

struct BackwardResult {
  Gradients param_grads;  // empty unless requested
  RowMatrix input_grads;
};

// Gradients of sum_rows(upstream . output) with respect to the parameters and
// the input. Throws UsageError if the cache does not belong to `spec`/`params`.
BackwardResult BackwardBatch(const MlpSpec& spec, const ParameterVector& params,
                             const ForwardCache& cache, const RowMatrix& upstream,
                             bool want_param_grads = true);

// Single-sample convenience wrappers.
std::vector<double> Forward(const MlpSpec& spec, const ParameterVector& params,
                            std::span<const double> input, ForwardCache* cache = nullptr);
struct SampleGradients {
  Gradients param_grads;
  std::vector<double> input_grads;
};
SampleGradients Backward(const MlpSpec& spec, const ParameterVector& params,
                         const ForwardCache& cache, std::span<const double> upstream);

// In-place Adam step with bias correction. Throws NumericError naming the first
// non-finite gradient index; parameters are untouched in that case.
void AdamStep(ParameterVector& params, const Gradients& grads, AdamState& state);

// target <- rate * target + (1 - rate) * online.
void PolyakUpdate(ParameterVector& target, const ParameterVector& online, double rate);

// Checkpoint format:
//   "DEXCKPT" (7 bytes), u32 format version, u8 output activation,
//   u32 layer count, u32 x count layer sizes, then f64 parameters.
// All integers and floats little-endian.
inline constexpr std::uint32_t kCheckpointVersion = 1;

std::vector<std::uint8_t> EncodeCheckpoint(const MlpSpec& spec, const ParameterVector& params);
void DecodeCheckpoint(std::span<const std::uint8_t> bytes, MlpSpec& spec, ParameterVector& params);
void SaveCheckpoint(const std::filesystem::path& path, const MlpSpec& spec,
                    const ParameterVector& params);
void LoadCheckpoint(const std::filesystem::path& path, MlpSpec& spec, ParameterVector& params);

}  // namespace dexlab::nn
