#include "dexlab/nn.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

#include "dexlab/errors.hpp"

namespace dexlab::nn {
namespace {

using ConstMatMap = Eigen::Map<const RowMatrix>;
using ConstVecMap = Eigen::Map<const Eigen::RowVectorXd>;

std::string ShapeString(const std::vector<int>& sizes) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < sizes.size(); ++i) os << (i ? "," : "") << sizes[i];
  os << "]";
  return os.str();
}

void CheckParams(const MlpSpec& spec, const ParameterVector& params) {
  spec.validate();
  if (params.size() != spec.num_parameters()) {
    throw ConfigError("parameter vector has " + std::to_string(params.size()) +
                      " values, spec " + ShapeString(spec.layer_sizes) + " needs " +
                      std::to_string(spec.num_parameters()));
  }
}

template <typename T>
void PutLE(std::vector<std::uint8_t>& out, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  std::array<std::uint8_t, sizeof(T)> raw = std::bit_cast<std::array<std::uint8_t, sizeof(T)>>(value);
  if constexpr (std::endian::native == std::endian::big) std::reverse(raw.begin(), raw.end());
  out.insert(out.end(), raw.begin(), raw.end());
}

template <typename T>
T GetLE(std::span<const std::uint8_t> bytes, std::size_t& pos) {
  if (pos + sizeof(T) > bytes.size()) throw ConfigError("checkpoint truncated");
  std::array<std::uint8_t, sizeof(T)> raw;
  std::copy_n(bytes.begin() + static_cast<std::ptrdiff_t>(pos), sizeof(T), raw.begin());
  if constexpr (std::endian::native == std::endian::big) std::reverse(raw.begin(), raw.end());
  pos += sizeof(T);
  return std::bit_cast<T>(raw);
}

constexpr char kMagic[] = "DEXCKPT";
constexpr std::size_t kMagicLen = 7;

}  // namespace

std::size_t MlpSpec::num_parameters() const {
  std::size_t n = 0;
  for (std::size_t i = 0; i + 1 < layer_sizes.size(); ++i) {
    n += static_cast<std::size_t>(layer_sizes[i]) * layer_sizes[i + 1] + layer_sizes[i + 1];
  }
  return n;
}

void MlpSpec::validate() const {
  if (layer_sizes.size() < 2) throw ConfigError("MlpSpec needs at least 2 layer sizes");
  for (int s : layer_sizes) {
    if (s < 1) throw ConfigError("MlpSpec layer sizes must be >= 1, got " + ShapeString(layer_sizes));
  }
}

MlpSpec MlpSpec::Default(int input_dim, int output_dim, OutputActivation out, int hidden) {
  return WithHidden(input_dim, {hidden, hidden, hidden}, output_dim, out);
}

MlpSpec MlpSpec::WithHidden(int input_dim, const std::vector<int>& hidden, int output_dim,
                            OutputActivation out) {
  MlpSpec spec;
  spec.layer_sizes.push_back(input_dim);
  spec.layer_sizes.insert(spec.layer_sizes.end(), hidden.begin(), hidden.end());
  spec.layer_sizes.push_back(output_dim);
  spec.output_activation = out;
  spec.validate();
  return spec;
}

AdamState AdamState::ForParameters(std::size_t n, double learning_rate) {
  AdamState s;
  s.first_moment.assign(n, 0.0);
  s.second_moment.assign(n, 0.0);
  s.learning_rate = learning_rate;
  return s;
}

ParameterVector InitParameters(const MlpSpec& spec, std::mt19937_64& rng) {
  spec.validate();
  ParameterVector p;
  p.values.reserve(spec.num_parameters());
  for (int l = 0; l < spec.num_layers(); ++l) {
    const int in = spec.layer_sizes[l];
    const int out = spec.layer_sizes[l + 1];
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (int i = 0; i < out * in + out; ++i) p.values.push_back(dist(rng));
  }
  return p;
}

ForwardCache ForwardBatch(const MlpSpec& spec, const ParameterVector& params,
                          const RowMatrix& input) {
  CheckParams(spec, params);
  if (input.cols() != spec.input_dim()) {
    throw ConfigError("network input has " + std::to_string(input.cols()) +
                      " columns, spec " + ShapeString(spec.layer_sizes) + " expects " +
                      std::to_string(spec.input_dim()));
  }
  if (!input.allFinite()) throw NumericError("non-finite network input");

  ForwardCache cache;
  cache.layer_sizes = spec.layer_sizes;
  cache.num_parameters = params.size();
  cache.inputs.reserve(spec.num_layers());
  cache.pre.reserve(spec.num_layers());

  const double* p = params.values.data();
  RowMatrix x = input;
  for (int l = 0; l < spec.num_layers(); ++l) {
    const int in = spec.layer_sizes[l];
    const int out = spec.layer_sizes[l + 1];
    // Aligned copies: vectorized reductions over unaligned maps split at an
    // address-dependent point, which would make results depend on the heap.
    const RowMatrix w = ConstMatMap(p, out, in);
    const Eigen::RowVectorXd b = ConstVecMap(p + static_cast<std::ptrdiff_t>(out) * in, out);
    p += static_cast<std::ptrdiff_t>(out) * in + out;

    RowMatrix z = x * w.transpose();
    z.rowwise() += b;
    cache.inputs.push_back(std::move(x));
    const bool last = (l + 1 == spec.num_layers());
    if (!last) {
      x = z.cwiseMax(0.0);
    } else if (spec.output_activation == OutputActivation::kTanh) {
      x = z.array().tanh().matrix();
    } else {
      x = z;
    }
    cache.pre.push_back(std::move(z));
  }
  cache.output = std::move(x);
  return cache;
}

RowMatrix Predict(const MlpSpec& spec, const ParameterVector& params, const RowMatrix& input) {
  return ForwardBatch(spec, params, input).output;
}

BackwardResult BackwardBatch(const MlpSpec& spec, const ParameterVector& params,
                             const ForwardCache& cache, const RowMatrix& upstream,
                             bool want_param_grads) {
  CheckParams(spec, params);
  if (cache.layer_sizes != spec.layer_sizes || cache.num_parameters != params.size() ||
      static_cast<int>(cache.inputs.size()) != spec.num_layers()) {
    throw UsageError("forward cache does not match network " + ShapeString(spec.layer_sizes));
  }
  if (upstream.rows() != cache.batch() || upstream.cols() != spec.output_dim()) {
    throw UsageError("upstream gradient shape does not match the cached forward pass");
  }

  BackwardResult result;
  if (want_param_grads) result.param_grads.values.assign(params.size(), 0.0);

  // Offsets of each layer's block in the flat vector.
  std::vector<std::size_t> offsets(spec.num_layers() + 1, 0);
  for (int l = 0; l < spec.num_layers(); ++l) {
    offsets[l + 1] = offsets[l] + static_cast<std::size_t>(spec.layer_sizes[l]) * spec.layer_sizes[l + 1] +
                     spec.layer_sizes[l + 1];
  }

  RowMatrix delta;
  if (spec.output_activation == OutputActivation::kTanh) {
    delta = upstream.array() * (1.0 - cache.output.array().square());
  } else {
    delta = upstream;
  }

  for (int l = spec.num_layers() - 1; l >= 0; --l) {
    const int in = spec.layer_sizes[l];
    const int out = spec.layer_sizes[l + 1];
    const double* wp = params.values.data() + offsets[l];
    const RowMatrix w = ConstMatMap(wp, out, in);
    if (want_param_grads) {
      double* gp = result.param_grads.values.data() + offsets[l];
      const RowMatrix gw = delta.transpose() * cache.inputs[l];
      const Eigen::RowVectorXd gb = delta.colwise().sum();
      std::copy(gw.data(), gw.data() + gw.size(), gp);
      std::copy(gb.data(), gb.data() + gb.size(), gp + static_cast<std::ptrdiff_t>(out) * in);
    }
    RowMatrix dx = delta * w;
    if (l > 0) {
      delta = (cache.pre[l - 1].array() > 0.0).select(dx, 0.0);
    } else {
      result.input_grads = std::move(dx);
    }
  }
  return result;
}

std::vector<double> Forward(const MlpSpec& spec, const ParameterVector& params,
                            std::span<const double> input, ForwardCache* cache) {
  RowMatrix x(1, static_cast<Eigen::Index>(input.size()));
  std::copy(input.begin(), input.end(), x.data());
  ForwardCache c = ForwardBatch(spec, params, x);
  std::vector<double> out(c.output.data(), c.output.data() + c.output.size());
  if (cache) *cache = std::move(c);
  return out;
}

SampleGradients Backward(const MlpSpec& spec, const ParameterVector& params,
                         const ForwardCache& cache, std::span<const double> upstream) {
  if (cache.batch() != 1) throw UsageError("single-sample backward on a batched cache");
  RowMatrix u(1, static_cast<Eigen::Index>(upstream.size()));
  std::copy(upstream.begin(), upstream.end(), u.data());
  BackwardResult r = BackwardBatch(spec, params, cache, u, true);
  SampleGradients g;
  g.param_grads = std::move(r.param_grads);
  g.input_grads.assign(r.input_grads.data(), r.input_grads.data() + r.input_grads.size());
  return g;
}

void AdamStep(ParameterVector& params, const Gradients& grads, AdamState& state) {
  const std::size_t n = params.size();
  if (grads.values.size() != n || state.first_moment.size() != n || state.second_moment.size() != n) {
    throw UsageError("Adam: parameter, gradient and moment lengths differ");
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (!std::isfinite(grads.values[i])) {
      throw NumericError("Adam: non-finite gradient at index " + std::to_string(i));
    }
  }
  state.step_count += 1;
  const double t = static_cast<double>(state.step_count);
  const double bc1 = 1.0 - std::pow(state.beta1, t);
  const double bc2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < n; ++i) {
    const double g = grads.values[i];
    double& m = state.first_moment[i];
    double& v = state.second_moment[i];
    m = state.beta1 * m + (1.0 - state.beta1) * g;
    v = state.beta2 * v + (1.0 - state.beta2) * g * g;
    const double m_hat = m / bc1;
    const double v_hat = v / bc2;
    params.values[i] -= state.learning_rate * m_hat / (std::sqrt(v_hat) + state.epsilon);
  }
}

void PolyakUpdate(ParameterVector& target, const ParameterVector& online, double rate) {
  if (target.size() != online.size()) throw UsageError("Polyak update: length mismatch");
  if (!(rate >= 0.0 && rate <= 1.0)) throw UsageError("Polyak rate must lie in [0,1]");
  if (rate == 1.0) return;
  const double keep = 1.0 - rate;
  for (std::size_t i = 0; i < target.size(); ++i) {
    target.values[i] = rate * target.values[i] + keep * online.values[i];
  }
}

std::vector<std::uint8_t> EncodeCheckpoint(const MlpSpec& spec, const ParameterVector& params) {
  CheckParams(spec, params);
  std::vector<std::uint8_t> out(kMagic, kMagic + kMagicLen);
  PutLE<std::uint32_t>(out, kCheckpointVersion);
  PutLE<std::uint8_t>(out, spec.output_activation == OutputActivation::kTanh ? 1 : 0);
  PutLE<std::uint32_t>(out, static_cast<std::uint32_t>(spec.layer_sizes.size()));
  for (int s : spec.layer_sizes) PutLE<std::uint32_t>(out, static_cast<std::uint32_t>(s));
  for (double v : params.values) PutLE<double>(out, v);
  return out;
}

void DecodeCheckpoint(std::span<const std::uint8_t> bytes, MlpSpec& spec, ParameterVector& params) {
  if (bytes.size() < kMagicLen || std::memcmp(bytes.data(), kMagic, kMagicLen) != 0) {
    throw ConfigError("not a DEXCKPT checkpoint");
  }
  std::size_t pos = kMagicLen;
  const auto version = GetLE<std::uint32_t>(bytes, pos);
  if (version != kCheckpointVersion) {
    throw ConfigError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto act = GetLE<std::uint8_t>(bytes, pos);
  const auto count = GetLE<std::uint32_t>(bytes, pos);
  if (count > 1024) throw ConfigError("checkpoint layer count implausible");
  MlpSpec s;
  s.output_activation = act ? OutputActivation::kTanh : OutputActivation::kIdentity;
  for (std::uint32_t i = 0; i < count; ++i) {
    s.layer_sizes.push_back(static_cast<int>(GetLE<std::uint32_t>(bytes, pos)));
  }
  s.validate();
  ParameterVector p;
  p.values.resize(s.num_parameters());
  for (double& v : p.values) {
    v = GetLE<double>(bytes, pos);
    if (!std::isfinite(v)) throw NumericError("checkpoint contains a non-finite parameter");
  }
  if (pos != bytes.size()) throw ConfigError("checkpoint has trailing bytes");
  spec = std::move(s);
  params = std::move(p);
}

void SaveCheckpoint(const std::filesystem::path& path, const MlpSpec& spec,
                    const ParameterVector& params) {
  const auto bytes = EncodeCheckpoint(spec, params);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw ConfigError("cannot write checkpoint " + path.string());
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw ConfigError("failed writing checkpoint " + path.string());
}

void LoadCheckpoint(const std::filesystem::path& path, MlpSpec& spec, ParameterVector& params) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  DecodeCheckpoint(bytes, spec, params);
}

}  // namespace dexlab::nn
