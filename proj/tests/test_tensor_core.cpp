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
#include <functional>
#include <random>

#include "distilprune/autograd.hpp"
#include "distilprune/gradcheck.hpp"

namespace dp = distilprune;
using dp::Shape;
using dp::Tape;
using dp::Tensor;
using dp::Var;

namespace {

Tensor<double> random_tensor(std::mt19937_64& rng, Shape shape, double lo = -1.0,
                             double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor<double> t(std::move(shape));
  for (double& x : t.data) x = u(rng);
  return t;
}

// Random weights so that every output element affects the loss differently.
Var<double> weighted_sum(Var<double> y, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return dp::sum(y * y.tape().constant(random_tensor(rng, y.shape())));
}

void expect_gradients_match(const dp::GraphBuilder& f, const Tensor<double>& x,
                            double tol = 1e-4) {
  const auto r = dp::check_gradients(f, x);
  EXPECT_FALSE(r.non_finite);
  EXPECT_LT(r.max_rel_error, tol) << "max abs error " << r.max_abs_error;
}

}  // namespace

TEST(Tensor, ElementCountIsProductOfExtents) {
  Tensor<float> t(Shape{2, 3, 4});
  EXPECT_EQ(t.size(), 24u);
  EXPECT_EQ(dp::numel({}), 1u);
  EXPECT_EQ(Tensor<float>().size(), 1u);
  EXPECT_THROW(Tensor<float>(Shape{2, 2}, std::vector<float>{1, 2, 3}), dp::ShapeError);
}

TEST(Primitives, MatmulByIdentity) {
  Tape<double> tape;
  auto eye = tape.constant(Tensor<double>(Shape{2, 2}, {1, 0, 0, 1}));
  auto a = tape.constant(Tensor<double>(Shape{2, 2}, {3, -1, 2.5, 7}));
  EXPECT_EQ(dp::matmul(eye, a).value(), a.value());
}

TEST(Primitives, SigmoidAndClampFixedPoints) {
  Tape<double> tape;
  EXPECT_DOUBLE_EQ(dp::sigmoid(tape.scalar(0.0)).item(), 0.5);
  EXPECT_DOUBLE_EQ(dp::clamp(tape.scalar(1.3), 0.0, 1.0).item(), 1.0);
}

TEST(Primitives, Conv1dRampWithOnesKernel) {
  Tape<double> tape;
  Tensor<double> x(Shape{1, 8});
  for (int i = 0; i < 8; ++i) x[i] = i;
  auto y = dp::conv1d(tape.constant(x), tape.constant(Tensor<double>(Shape{1, 1, 3}, 1.0)), 2);
  EXPECT_EQ(y.shape(), (Shape{1, 3}));
  EXPECT_EQ(y.value().data, (std::vector<double>{3, 9, 15}));
}

TEST(Primitives, ShapeMismatchThrows) {
  Tape<double> tape;
  auto a = tape.constant(Tensor<double>(Shape{2, 3}));
  auto b = tape.constant(Tensor<double>(Shape{2, 2}));
  EXPECT_THROW(dp::matmul(a, b), dp::ShapeError);
  EXPECT_THROW(a + b, dp::ShapeError);
}

TEST(Primitives, BroadcastTrailingDimensions) {
  Tape<double> tape;
  auto a = tape.constant(Tensor<double>(Shape{2, 3}, {1, 2, 3, 4, 5, 6}));
  auto b = tape.constant(Tensor<double>(Shape{3}, {10, 20, 30}));
  EXPECT_EQ((a + b).value().data, (std::vector<double>{11, 22, 33, 14, 25, 36}));
}

TEST(Primitives, SoftmaxIsADistribution) {
  std::mt19937_64 rng(1);
  Tape<double> tape;
  auto y = dp::softmax(tape.constant(random_tensor(rng, {4, 7}, -5, 5)), -1);
  for (std::size_t r = 0; r < 4; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < 7; ++c) {
      EXPECT_GE(y.value()[r * 7 + c], 0.0);
      s += y.value()[r * 7 + c];
    }
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(Primitives, LayerNormStandardizes) {
  std::mt19937_64 rng(2);
  Tape<double> tape;
  auto y = dp::layer_norm(tape.constant(random_tensor(rng, {5, 16}, -3, 8)), -1);
  for (std::size_t r = 0; r < 5; ++r) {
    double mu = 0.0, var = 0.0;
    for (std::size_t c = 0; c < 16; ++c) mu += y.value()[r * 16 + c];
    mu /= 16;
    for (std::size_t c = 0; c < 16; ++c) var += std::pow(y.value()[r * 16 + c] - mu, 2);
    var /= 16;
    EXPECT_LT(std::abs(mu), 1e-5);
    EXPECT_NEAR(var, 1.0, 1e-3);
  }
}

TEST(Backward, SumGivesOnes) {
  Tape<double> tape;
  auto x = tape.leaf(Tensor<double>(Shape{2, 3}, 0.7), true);
  tape.backward(dp::sum(x));
  EXPECT_EQ(tape.grad(x).data, std::vector<double>(6, 1.0));
}

TEST(Backward, SumOfSquares) {
  Tape<double> tape;
  auto x = tape.leaf(Tensor<double>(Shape{3}, {1, -2, 3}), true);
  tape.backward(dp::sum(x * x));
  EXPECT_EQ(tape.grad(x).data, (std::vector<double>{2, -4, 6}));
}

TEST(Backward, RejectsNonScalarLossAndSecondPass) {
  Tape<double> tape;
  auto x = tape.leaf(Tensor<double>(Shape{3}, 1.0), true);
  EXPECT_THROW(tape.backward(x * x), dp::TapeError);
  auto loss = dp::sum(x);
  tape.backward(loss);
  EXPECT_THROW(tape.backward(loss), dp::TapeError);
}

TEST(Backward, ParameterGradientsAccumulateIntoParameter) {
  dp::Parameter<double> p{"w", Tensor<double>(Shape{2}, {1.5, -0.5})};
  Tape<double> tape;
  auto w = tape.param(p);
  tape.backward(dp::sum(w * w));
  EXPECT_EQ(p.grad.data, (std::vector<double>{3.0, -1.0}));
}

TEST(Backward, ReplayIsBitIdentical) {
  std::mt19937_64 rng(3);
  const auto x0 = random_tensor(rng, {3, 4});
  const auto w0 = random_tensor(rng, {4, 2});
  auto run = [&] {
    Tape<double> tape;
    auto x = tape.leaf(x0, true);
    auto w = tape.leaf(w0, true);
    auto loss = dp::sum(dp::gelu(dp::matmul(x, w)));
    tape.backward(loss);
    return std::make_pair(loss.item(), tape.grad(x).data);
  };
  EXPECT_EQ(run(), run());
}

TEST(GradCheck, SigmoidOfSum) {
  std::mt19937_64 rng(4);
  const auto r = dp::check_gradients(
      [](Tape<double>&, Var<double> x) { return dp::sigmoid(dp::sum(x)); },
      random_tensor(rng, {4}));
  EXPECT_LT(r.max_rel_error, 1e-6);
}

TEST(GradCheck, ClampInteriorAndBeyond) {
  auto f = [](Tape<double>&, Var<double> x) { return dp::sum(dp::clamp(x, 0.0, 1.0)); };
  auto inside = dp::check_gradients(f, Tensor<double>(Shape{1}, {0.4}));
  EXPECT_DOUBLE_EQ(inside.analytic[0], 1.0);
  EXPECT_NEAR(inside.numeric[0], 1.0, 1e-9);
  auto beyond = dp::check_gradients(f, Tensor<double>(Shape{1}, {1.7}));
  EXPECT_DOUBLE_EQ(beyond.analytic[0], 0.0);
  EXPECT_DOUBLE_EQ(beyond.numeric[0], 0.0);
}

TEST(GradCheck, ClampBoundarySubgradientIsZero) {
  Tape<double> tape;
  auto x = tape.leaf(Tensor<double>(Shape{2}, {0.0, 1.0}), true);
  tape.backward(dp::sum(dp::clamp(x, 0.0, 1.0)));
  EXPECT_EQ(tape.grad(x).data, (std::vector<double>{0.0, 0.0}));
}

// Every primitive at 100 random points away from kinks.
class PrimitiveGradients : public ::testing::TestWithParam<int> {};

TEST_P(PrimitiveGradients, MatchFiniteDifferences) {
  const int point = GetParam();
  std::mt19937_64 rng(1000 + point);
  const std::uint64_t ws = 77 + point;
  auto unary = [&](std::function<Var<double>(Var<double>)> op, Tensor<double> x) {
    expect_gradients_match([&](Tape<double>&, Var<double> v) { return weighted_sum(op(v), ws); }, x);
  };
  // Keep |x| away from 0 for abs and from the clamp bounds.
  auto away = [&](Shape s, double lo, double hi) {
    auto t = random_tensor(rng, std::move(s), lo, hi);
    for (double& v : t.data) {
      if (std::abs(v) < 0.05) v += 0.1;
    }
    return t;
  };
  unary([](Var<double> v) { return dp::sigmoid(v); }, random_tensor(rng, {3, 2}, -4, 4));
  unary([](Var<double> v) { return dp::gelu(v); }, random_tensor(rng, {5}, -3, 3));
  unary([](Var<double> v) { return dp::exp(v); }, random_tensor(rng, {4}, -2, 2));
  unary([](Var<double> v) { return dp::log(v); }, random_tensor(rng, {4}, 0.2, 3));
  unary([](Var<double> v) { return dp::sqrt(v); }, random_tensor(rng, {4}, 0.2, 3));
  unary([](Var<double> v) { return dp::abs(v); }, away({6}, -2, 2));
  unary([](Var<double> v) { return -v; }, random_tensor(rng, {3}));
  unary([](Var<double> v) { return dp::clamp(v, -0.5, 0.5); },
        [&] {
          auto t = random_tensor(rng, {6}, -1, 1);
          for (double& v : t.data) {
            if (std::abs(std::abs(v) - 0.5) < 0.02) v *= 0.8;
          }
          return t;
        }());
  unary([](Var<double> v) { return dp::softmax(v, -1); }, random_tensor(rng, {2, 5}, -2, 2));
  unary([](Var<double> v) { return dp::softmax(v, 0); }, random_tensor(rng, {3, 2}, -2, 2));
  unary([](Var<double> v) { return dp::layer_norm(v, -1); }, random_tensor(rng, {3, 6}, -2, 2));
  unary([](Var<double> v) { return dp::layer_norm(v, 0); }, random_tensor(rng, {5, 2}, -2, 2));
  unary([](Var<double> v) { return dp::sum(v, 1); }, random_tensor(rng, {2, 3, 2}));
  unary([](Var<double> v) { return dp::mean(v, -1); }, random_tensor(rng, {2, 4}));
  unary([](Var<double> v) { return dp::mean(v); }, random_tensor(rng, {2, 4}));
  unary([](Var<double> v) { return dp::transpose(v, 0, 2); }, random_tensor(rng, {2, 3, 2}));
  unary([](Var<double> v) { return dp::reshape(v, {3, 2}); }, random_tensor(rng, {6}));
  unary([](Var<double> v) { return dp::slice(v, 1, 1, 3); }, random_tensor(rng, {2, 4}));
  unary([](Var<double> v) { return dp::broadcast(v, {3, 2, 4}); }, random_tensor(rng, {2, 1}));

  const auto other = random_tensor(rng, {3, 4}, 0.5, 2.0);
  auto binary = [&](std::function<Var<double>(Var<double>, Var<double>)> op,
                    Tensor<double> x, Tensor<double> y) {
    expect_gradients_match(
        [&](Tape<double>& t, Var<double> v) { return weighted_sum(op(v, t.constant(y)), ws); }, x);
    expect_gradients_match(
        [&](Tape<double>& t, Var<double> v) { return weighted_sum(op(t.constant(x), v), ws); }, y);
  };
  binary([](auto a, auto b) { return a + b; }, random_tensor(rng, {3, 4}), random_tensor(rng, {4}));
  binary([](auto a, auto b) { return a - b; }, random_tensor(rng, {3, 4}), random_tensor(rng, {3, 1}));
  binary([](auto a, auto b) { return a * b; }, random_tensor(rng, {3, 4}), other);
  binary([](auto a, auto b) { return a / b; }, random_tensor(rng, {3, 4}), other);
  binary([](auto a, auto b) { return dp::matmul(a, b); }, random_tensor(rng, {2, 3, 4}),
         random_tensor(rng, {4, 2}));
  binary([](auto a, auto b) { return dp::matmul(a, b); }, random_tensor(rng, {2, 3, 4}),
         random_tensor(rng, {2, 4, 5}));
  binary([](auto a, auto b) { return dp::conv1d(a, b, 2, 1); }, random_tensor(rng, {2, 9}),
         random_tensor(rng, {3, 2, 3}));
  binary([](auto a, auto b) { return dp::conv1d(a, b, 1); }, random_tensor(rng, {2, 2, 7}),
         random_tensor(rng, {2, 2, 2}));
  binary([](auto a, auto b) { return dp::concat<double>({a, b}, 1); }, random_tensor(rng, {2, 3}),
         random_tensor(rng, {2, 2}));
}

INSTANTIATE_TEST_SUITE_P(HundredPoints, PrimitiveGradients, ::testing::Range(0, 100));
