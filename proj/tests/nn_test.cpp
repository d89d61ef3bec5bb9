#include "dexlab/nn.hpp"

#include <cmath>
#include <cstring>
#include <filesystem>
#include <limits>
#include <random>

#include "doctest.h"

#include "dexlab/errors.hpp"

using namespace dexlab;
using namespace dexlab::nn;

namespace {

RowMatrix RandomMatrix(int rows, int cols, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  RowMatrix m(rows, cols);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) m(i, j) = n(rng);
  return m;
}

// sum(upstream .* output)
double Objective(const MlpSpec& spec, const ParameterVector& p, const RowMatrix& x, const RowMatrix& up) {
  return (Predict(spec, p, x).array() * up.array()).sum();
}

double RelErr(double a, double b) { return std::abs(a - b) / std::max({1e-6, std::abs(a), std::abs(b)}); }

}  // namespace

TEST_CASE("parameter count of a small network") {
  MlpSpec spec{{3, 5, 2}};
  CHECK(spec.num_parameters() == 3 * 5 + 5 + 5 * 2 + 2);
  const MlpSpec d = MlpSpec::Default(10, 4, OutputActivation::kTanh);
  CHECK(d.layer_sizes == std::vector<int>{10, 256, 256, 256, 4});
  CHECK(d.num_layers() == 4);
}

TEST_CASE("invalid specs are rejected") {
  CHECK_THROWS_AS(MlpSpec{{3}}.validate(), ConfigError);
  CHECK_THROWS_AS(MlpSpec({{3, 0, 2}}).validate(), ConfigError);
}

TEST_CASE("initialization stays within the fan-in bound") {
  std::mt19937_64 rng(1);
  MlpSpec spec{{4, 8, 3}};
  ParameterVector p = InitParameters(spec, rng);
  REQUIRE(p.size() == spec.num_parameters());
  for (std::size_t i = 0; i < 4 * 8 + 8; ++i) CHECK(std::abs(p.values[i]) <= 0.5);
  for (std::size_t i = 40; i < p.size(); ++i) CHECK(std::abs(p.values[i]) <= 1.0 / std::sqrt(8.0));
}

TEST_CASE("forward pass matches a hand computation") {
  // 2 -> 2 (relu) -> 1
  MlpSpec spec{{2, 2, 1}};
  ParameterVector p{{1.0, -1.0, 0.5, 0.5,  // W0
                     0.0, -2.0,            // b0
                     2.0, 3.0,             // W1
                     0.25}};               // b1
  // h = relu([1-(-1), 0.5+(-0.5)-2]) = relu([2, -2]) = [2, 0]; y = 4 + 0.25
  const std::vector<double> y = Forward(spec, p, std::vector<double>{1.0, -1.0});
  CHECK(y[0] == doctest::Approx(4.25));

  spec.output_activation = OutputActivation::kTanh;
  CHECK(Forward(spec, p, std::vector<double>{1.0, -1.0})[0] == doctest::Approx(std::tanh(4.25)));
}

TEST_CASE("forward rejects bad inputs") {
  std::mt19937_64 rng(2);
  MlpSpec spec{{3, 4, 2}};
  ParameterVector p = InitParameters(spec, rng);
  CHECK_THROWS_AS(Predict(spec, p, RowMatrix::Zero(2, 4)), ConfigError);
  RowMatrix x = RowMatrix::Zero(1, 3);
  x(0, 1) = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(Predict(spec, p, x), NumericError);
  ParameterVector short_p{{1.0, 2.0}};
  CHECK_THROWS_AS(Predict(spec, short_p, RowMatrix::Zero(1, 3)), ConfigError);
}

TEST_CASE("backward matches central differences") {
  std::mt19937_64 rng(3);
  const double h = 1e-6;
  for (int trial = 0; trial < 20; ++trial) {
    const int in = 1 + trial % 4, out = 1 + trial % 3, batch = 1 + trial % 5;
    MlpSpec spec{{in, 6, 5, out}};
    spec.output_activation = trial % 2 ? OutputActivation::kTanh : OutputActivation::kIdentity;
    ParameterVector p = InitParameters(spec, rng);
    const RowMatrix x = RandomMatrix(batch, in, rng);
    const RowMatrix up = RandomMatrix(batch, out, rng);
    const ForwardCache cache = ForwardBatch(spec, p, x);
    const BackwardResult g = BackwardBatch(spec, p, cache, up);

    for (std::size_t i = 0; i < p.size(); ++i) {
      ParameterVector plus = p, minus = p;
      plus.values[i] += h;
      minus.values[i] -= h;
      const double fd = (Objective(spec, plus, x, up) - Objective(spec, minus, x, up)) / (2 * h);
      // ReLU kinks make a handful of coordinates non-differentiable; skip only
      // when both estimates are tiny.
      if (std::abs(fd) < 1e-7 && std::abs(g.param_grads.values[i]) < 1e-7) continue;
      CHECK(RelErr(fd, g.param_grads.values[i]) < 1e-4);
    }
    for (int r = 0; r < batch; ++r) {
      for (int c = 0; c < in; ++c) {
        RowMatrix xp = x, xm = x;
        xp(r, c) += h;
        xm(r, c) -= h;
        const double fd = (Objective(spec, p, xp, up) - Objective(spec, p, xm, up)) / (2 * h);
        CHECK(RelErr(fd, g.input_grads(r, c)) < 1e-4);
      }
    }
  }
}

TEST_CASE("single-sample backward agrees with the batched path") {
  std::mt19937_64 rng(4);
  MlpSpec spec{{3, 7, 2}};
  ParameterVector p = InitParameters(spec, rng);
  const std::vector<double> x = {0.3, -0.2, 0.9};
  ForwardCache cache;
  Forward(spec, p, x, &cache);
  const SampleGradients s = Backward(spec, p, cache, std::vector<double>{1.0, -0.5});
  RowMatrix xb(1, 3);
  xb << 0.3, -0.2, 0.9;
  RowMatrix up(1, 2);
  up << 1.0, -0.5;
  const BackwardResult b = BackwardBatch(spec, p, ForwardBatch(spec, p, xb), up);
  CHECK(s.param_grads.values == b.param_grads.values);
  for (int c = 0; c < 3; ++c) CHECK(s.input_grads[c] == b.input_grads(0, c));
}

TEST_CASE("backward rejects a cache from another network") {
  std::mt19937_64 rng(5);
  MlpSpec a{{3, 4, 2}}, b{{3, 5, 2}};
  ParameterVector pa = InitParameters(a, rng), pb = InitParameters(b, rng);
  const ForwardCache cache = ForwardBatch(a, pa, RowMatrix::Zero(2, 3));
  CHECK_THROWS_AS(BackwardBatch(b, pb, cache, RowMatrix::Zero(2, 2)), UsageError);
  CHECK_THROWS_AS(BackwardBatch(a, pa, cache, RowMatrix::Zero(3, 2)), UsageError);
}

TEST_CASE("Adam follows the bias-corrected recursion") {
  ParameterVector p{{1.0, -2.0}};
  AdamState s = AdamState::ForParameters(2, 0.01);
  const std::vector<std::vector<double>> grads = {{0.5, -1.0}, {0.1, 2.0}, {-0.3, 0.0}};
  double m[2] = {0, 0}, v[2] = {0, 0}, ref[2] = {1.0, -2.0};
  for (std::size_t t = 1; t <= grads.size(); ++t) {
    AdamStep(p, Gradients{grads[t - 1]}, s);
    for (int i = 0; i < 2; ++i) {
      const double g = grads[t - 1][i];
      m[i] = 0.9 * m[i] + 0.1 * g;
      v[i] = 0.999 * v[i] + 0.001 * g * g;
      const double mh = m[i] / (1 - std::pow(0.9, t));
      const double vh = v[i] / (1 - std::pow(0.999, t));
      ref[i] -= 0.01 * mh / (std::sqrt(vh) + 1e-8);
      CHECK(p.values[i] == doctest::Approx(ref[i]).epsilon(1e-12));
    }
  }
  CHECK(s.step_count == 3);
}

TEST_CASE("first Adam step moves each parameter by about the learning rate") {
  ParameterVector p{{0.0, 0.0}};
  AdamState s = AdamState::ForParameters(2, 1e-3);
  AdamStep(p, Gradients{{3.0, -0.01}}, s);
  CHECK(p.values[0] == doctest::Approx(-1e-3).epsilon(1e-6));
  CHECK(p.values[1] == doctest::Approx(1e-3).epsilon(1e-4));
}

TEST_CASE("Adam refuses non-finite gradients and leaves parameters alone") {
  ParameterVector p{{1.0, 2.0, 3.0}};
  AdamState s = AdamState::ForParameters(3);
  const ParameterVector before = p;
  try {
    AdamStep(p, Gradients{{0.1, std::numeric_limits<double>::infinity(), 0.0}}, s);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("index 1") != std::string::npos);
  }
  CHECK(p == before);
  CHECK(s.step_count == 0);
}

TEST_CASE("Polyak averaging") {
  ParameterVector target{{1.0, 0.0}};
  const ParameterVector online{{0.0, 2.0}};
  PolyakUpdate(target, online, 0.95);
  CHECK(target.values[0] == doctest::Approx(0.95));
  CHECK(target.values[1] == doctest::Approx(0.1));
  ParameterVector t1{{1.0, 0.0}};
  PolyakUpdate(t1, online, 1.0);
  CHECK(t1.values == std::vector<double>{1.0, 0.0});
  PolyakUpdate(t1, online, 0.0);
  CHECK(t1 == online);
  CHECK_THROWS_AS(PolyakUpdate(t1, online, 1.5), UsageError);
}

TEST_CASE("checkpoints round-trip bitwise") {
  std::mt19937_64 rng(6);
  MlpSpec spec{{5, 9, 3}};
  spec.output_activation = OutputActivation::kTanh;
  ParameterVector p = InitParameters(spec, rng);
  p.values[0] = -0.0;
  p.values[1] = std::numeric_limits<double>::denorm_min();
  const auto bytes = EncodeCheckpoint(spec, p);
  CHECK(bytes.size() == 7 + 4 + 1 + 4 + 3 * 4 + p.size() * 8);
  MlpSpec s2;
  ParameterVector p2;
  DecodeCheckpoint(bytes, s2, p2);
  CHECK(s2 == spec);
  REQUIRE(p2.size() == p.size());
  CHECK(std::memcmp(p2.values.data(), p.values.data(), p.size() * sizeof(double)) == 0);

  const auto path = std::filesystem::temp_directory_path() / "dexlab_nn_test.ckpt";
  SaveCheckpoint(path, spec, p);
  MlpSpec s3;
  ParameterVector p3;
  LoadCheckpoint(path, s3, p3);
  CHECK(s3 == spec);
  CHECK(p3 == p2);
  std::filesystem::remove(path);
}

TEST_CASE("corrupt checkpoints are rejected") {
  std::mt19937_64 rng(7);
  MlpSpec spec{{2, 3, 1}};
  ParameterVector p = InitParameters(spec, rng);
  const auto good = EncodeCheckpoint(spec, p);
  MlpSpec s;
  ParameterVector q;

  auto trailing = good;
  trailing.push_back(0);
  CHECK_THROWS_AS(DecodeCheckpoint(trailing, s, q), ConfigError);

  auto truncated = good;
  truncated.pop_back();
  CHECK_THROWS_AS(DecodeCheckpoint(truncated, s, q), ConfigError);

  auto magic = good;
  magic[0] = 'X';
  CHECK_THROWS_AS(DecodeCheckpoint(magic, s, q), ConfigError);

  auto version = good;
  version[7] = 9;
  CHECK_THROWS_AS(DecodeCheckpoint(version, s, q), ConfigError);

  ParameterVector bad = p;
  bad.values.back() = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(DecodeCheckpoint(EncodeCheckpoint(spec, bad), s, q), NumericError);
}
