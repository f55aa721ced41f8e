// Copyright 2026 The distilprune Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "distilprune/gradcheck.hpp"
#include "distilprune/hard_concrete.hpp"

namespace dp = distilprune;

namespace {

dp::HardConcreteGateSet<double> gates_at(std::vector<double> log_alpha) {
  dp::HardConcreteGateSet<double> g("g", log_alpha.size());
  g.log_alpha.value.data = std::move(log_alpha);
  return g;
}

// Independent sampler: P(z > 0) estimated straight from the stretch-and-clamp
// definition, without the library's sampling path.
double empirical_nonzero(double log_alpha, std::size_t n, std::uint64_t seed) {
  const dp::HardConcreteParams hp;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unif(1e-6, 1.0 - 1e-6);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double u = unif(rng);
    const double v = 1.0 / (1.0 + std::exp(-(std::log(u / (1.0 - u)) + log_alpha) / hp.beta));
    const double z = std::clamp((hp.stretch_hi - hp.stretch_lo) * v + hp.stretch_lo, 0.0, 1.0);
    hits += z > 0.0 ? 1 : 0;
  }
  return static_cast<double>(hits) / static_cast<double>(n);
}

}  // namespace

TEST(SampleMask, MidpointNoiseAtZeroLogAlpha) {
  auto g = gates_at({0.0});
  dp::Tape<double> tape;
  auto s = dp::sample_mask_with_noise(tape, g, {0.5});
  EXPECT_NEAR(s.v.value()[0], 0.5, 1e-12);
  EXPECT_NEAR(s.v_bar.value()[0], 0.5, 1e-12);
  EXPECT_NEAR(s.z.value()[0], 0.5, 1e-12);
}

TEST(SampleMask, SaturatedLimits) {
  auto g = gates_at({-20.0, -20.0, 20.0, 20.0});
  dp::Tape<double> tape;
  auto s = dp::sample_mask_with_noise(tape, g, {0.5, 0.99, 0.01, 0.5});
  EXPECT_EQ(s.z.value().data, (std::vector<double>{0.0, 0.0, 1.0, 1.0}));
}

TEST(SampleMask, StaysInUnitIntervalAndMatchesFormula) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> la(-6, 6);
  std::vector<double> alphas(200);
  for (double& a : alphas) a = la(rng);
  auto g = gates_at(alphas);
  dp::Tape<double> tape;
  auto s = dp::sample_mask(tape, g, rng);
  const dp::HardConcreteParams hp;
  for (std::size_t j = 0; j < alphas.size(); ++j) {
    const double u = s.u[j];
    EXPECT_GE(u, dp::kUniformClamp);
    EXPECT_LE(u, 1.0 - dp::kUniformClamp);
    const double v = 1.0 / (1.0 + std::exp(-(std::log(u / (1 - u)) + alphas[j]) / hp.beta));
    const double z = std::min(1.0, std::max(0.0, 1.2 * v - 0.1));
    EXPECT_NEAR(s.z.value()[j], z, 1e-12);
    EXPECT_GE(s.z.value()[j], 0.0);
    EXPECT_LE(s.z.value()[j], 1.0);
  }
}

TEST(SampleMask, ReproducibleUnderSeed) {
  auto g = gates_at(std::vector<double>(16, 0.3));
  std::mt19937_64 a(5), b(5);
  dp::Tape<double> ta, tb;
  EXPECT_EQ(dp::sample_mask(ta, g, a).z.value(), dp::sample_mask(tb, g, b).z.value());
}

TEST(SampleMask, GradientMatchesFiniteDifferencesInsideInterval) {
  const std::vector<double> u = {0.3, 0.55, 0.7};
  const dp::HardConcreteParams hp;
  const auto r = dp::check_gradients(
      [&](dp::Tape<double>& tape, dp::Var<double> la) {
        auto logit = tape.constant(dp::Tensor<double>(dp::Shape{3}, [&] {
          std::vector<double> l;
          for (double x : u) l.push_back(std::log(x / (1 - x)));
          return l;
        }()));
        auto v = dp::sigmoid((logit + la) * (1.0 / hp.beta));
        auto z = dp::clamp(v * 1.2 - 0.1, 0.0, 1.0);
        return dp::sum(z * z);
      },
      dp::Tensor<double>(dp::Shape{3}, {0.1, -0.4, 0.2}));
  EXPECT_LT(r.max_rel_error, 1e-6);

  // Same gradient through the library path.
  auto g = gates_at({0.1, -0.4, 0.2});
  dp::Tape<double> tape;
  auto s = dp::sample_mask_with_noise(tape, g, u);
  tape.backward(dp::sum(s.z * s.z));
  for (std::size_t j = 0; j < 3; ++j) {
    EXPECT_NEAR(g.log_alpha.grad[j], r.analytic[j], 1e-12);
  }
}

TEST(ProbNonzero, ClosedFormAtZero) {
  EXPECT_NEAR(dp::prob_nonzero(0.0, {}), 0.8318, 1e-4);
  EXPECT_NEAR(empirical_nonzero(0.0, 1000000, 1), 0.8318, 1e-3);
}

TEST(ProbNonzero, Limits) {
  EXPECT_LT(dp::prob_nonzero(-40.0, {}), 1e-15);
  EXPECT_NEAR(dp::prob_nonzero(40.0, {}), 1.0, 1e-15);
}

TEST(ProbNonzero, MatchesMonteCarloWithinThreeStandardErrors) {
  std::mt19937_64 rng(21);
  std::uniform_real_distribution<double> la(-5, 5);
  for (int i = 0; i < 10; ++i) {
    const double a = la(rng);
    const double p = dp::prob_nonzero(a, {});
    const std::size_t n = 100000;
    const double se = std::sqrt(p * (1 - p) / n);
    EXPECT_NEAR(empirical_nonzero(a, n, 100 + i), p, 3 * se + 1e-12) << "log alpha " << a;
  }
}

TEST(ProbNonzero, TapeAndScalarAgree) {
  auto g = gates_at({-2.0, 0.0, 1.5});
  dp::Tape<double> tape;
  auto p = dp::prob_nonzero(tape, g);
  const auto values = dp::prob_nonzero_values(g);
  for (std::size_t j = 0; j < 3; ++j) EXPECT_DOUBLE_EQ(p.value()[j], values[j]);
}

TEST(ExpectedL0, TwelveGatesAtZero) {
  auto g = gates_at(std::vector<double>(12, 0.0));
  dp::Tape<double> tape;
  EXPECT_NEAR(dp::expected_l0(tape, g).item(), 9.98, 0.01);
}

TEST(ExpectedL0, EmptyAndSaturated) {
  dp::HardConcreteGateSet<double> empty("e", 0);
  dp::Tape<double> tape;
  EXPECT_EQ(dp::expected_l0(tape, empty).item(), 0.0);
  auto one = gates_at({20.0});
  EXPECT_NEAR(dp::expected_l0(tape, one).item(), 1.0, 1e-7);
}

TEST(ExpectedL0, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> la(-4, 4);
  dp::Tensor<double> x(dp::Shape{8});
  for (double& a : x.data) a = la(rng);
  const dp::HardConcreteParams hp;
  const double shift = hp.beta * std::log(-hp.stretch_lo / hp.stretch_hi);
  const auto r = dp::check_gradients(
      [&](dp::Tape<double>&, dp::Var<double> v) { return dp::sum(dp::sigmoid(v - shift)); }, x);
  EXPECT_LT(r.max_rel_error, 1e-6);
  auto g = gates_at(x.data);
  dp::Tape<double> tape;
  tape.backward(dp::expected_l0(tape, g));
  for (std::size_t j = 0; j < 8; ++j) EXPECT_NEAR(g.log_alpha.grad[j], r.analytic[j], 1e-12);
}

TEST(DeterministicMask, Examples) {
  EXPECT_EQ(dp::deterministic_mask(4.0, {}), 1.0);
  EXPECT_NEAR(dp::deterministic_mask(0.0, {}), 0.5, 1e-12);
  // sigmoid(log alpha) <= 1/12 exactly when log alpha <= -log 11.
  EXPECT_EQ(dp::deterministic_mask(-std::log(11.0) - 1e-9, {}), 0.0);
  EXPECT_GT(dp::deterministic_mask(-std::log(11.0) + 1e-6, {}), 0.0);
}

TEST(DeterministicMask, InitialGatesAreFullyOpen) {
  dp::HardConcreteGateSet<double> g("g", 5);
  for (double z : dp::deterministic_mask(g)) EXPECT_EQ(z, 1.0);
}

TEST(Monotonicity, ProbAndMaskNondecreasing) {
  double prev_p = -1.0, prev_z = -1.0;
  for (double a = -10.0; a <= 10.0; a += 0.01) {
    const double p = dp::prob_nonzero(a, {});
    const double z = dp::deterministic_mask(a, {});
    EXPECT_GE(p, prev_p);
    EXPECT_GE(z, prev_z);
    EXPECT_GE(z, 0.0);
    EXPECT_LE(z, 1.0);
    prev_p = p;
    prev_z = z;
  }
}

TEST(Params, RejectsInvalidStretch) {
  dp::HardConcreteParams hp;
  hp.stretch_lo = 0.1;
  EXPECT_THROW(hp.validate(), dp::ConfigError);
  hp = {};
  hp.beta = 0.0;
  EXPECT_THROW(hp.validate(), dp::ConfigError);
}
