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

// Hard Concrete gates: a stretched and clamped binary-concrete relaxation
// whose mask z lies in [0, 1] with point masses at both ends.
//
//   u ~ U(0, 1)
//   v = sigmoid((log(u / (1 - u)) + log_alpha) / beta)
//   z = min(1, max(0, (hi - lo) * v + lo))
//
// P(z > 0) = sigmoid(log_alpha - beta * log(-lo / hi)) in closed form.

#pragma once

#include <algorithm>
#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "distilprune/autograd.hpp"
#include "distilprune/errors.hpp"

namespace distilprune {

struct HardConcreteParams {
  double beta = 2.0 / 3.0;
  double stretch_lo = -0.1;
  double stretch_hi = 1.1;
  double init_log_alpha = 4.0;

  void validate() const {
    if (!(beta > 0.0)) throw ConfigError("hard concrete: beta must be > 0");
    if (!(stretch_lo < 0.0)) {
      throw ConfigError("hard concrete: stretch_lo must be < 0");
    }
    if (!(stretch_hi > 1.0)) {
      throw ConfigError("hard concrete: stretch_hi must be > 1");
    }
  }
};

inline constexpr double kUniformClamp = 1e-6;

/// One gate per prunable group, parameterized by log alpha.
template <typename T>
struct HardConcreteGateSet {
  Parameter<T> log_alpha;
  HardConcreteParams params;

  HardConcreteGateSet() = default;
  HardConcreteGateSet(std::string name, std::size_t groups,
                      HardConcreteParams p = {})
      : log_alpha(std::move(name),
                  Tensor<T>(Shape{groups}, static_cast<T>(p.init_log_alpha))),
        params(p) {
    params.validate();
  }

  std::size_t group_count() const { return log_alpha.value.size(); }
};

template <typename T>
struct MaskSample {
  std::vector<T> u;
  Var<T> v;
  Var<T> v_bar;
  Var<T> z;
};

/// Draws `n` uniforms clamped to [1e-6, 1 - 1e-6].
template <typename Rng>
std::vector<double> draw_uniform(Rng& rng, std::size_t n) {
  std::uniform_real_distribution<double> dist(0.0, 1.0);
  std::vector<double> u(n);
  for (double& x : u) {
    x = std::clamp(dist(rng), kUniformClamp, 1.0 - kUniformClamp);
  }
  return u;
}

/// Records z for given (frozen) uniforms; differentiable in log alpha.
template <typename T>
MaskSample<T> sample_mask_with_noise(Tape<T>& tape,
                                     HardConcreteGateSet<T>& gates,
                                     const std::vector<double>& uniforms,
                                     bool requires_grad = true) {
  const std::size_t n = gates.group_count();
  if (uniforms.size() != n) {
    throw ShapeError("sample_mask: " + std::to_string(uniforms.size()) +
                     " uniforms for " + std::to_string(n) + " groups");
  }
  const auto& hp = gates.params;
  MaskSample<T> s;
  Tensor<T> logit_u(Shape{n});
  s.u.resize(n);
  for (std::size_t j = 0; j < n; ++j) {
    const double u = std::clamp(uniforms[j], kUniformClamp, 1.0 - kUniformClamp);
    s.u[j] = static_cast<T>(u);
    logit_u[j] = static_cast<T>(std::log(u) - std::log1p(-u));
  }
  Var<T> la = tape.param(gates.log_alpha, requires_grad);
  s.v = sigmoid((tape.constant(std::move(logit_u)) + la) *
                static_cast<T>(1.0 / hp.beta));
  s.v_bar = s.v * static_cast<T>(hp.stretch_hi - hp.stretch_lo) +
            static_cast<T>(hp.stretch_lo);
  s.z = clamp(s.v_bar, T{0}, T{1});
  return s;
}

template <typename T, typename Rng>
MaskSample<T> sample_mask(Tape<T>& tape, HardConcreteGateSet<T>& gates,
                          Rng& rng, bool requires_grad = true) {
  return sample_mask_with_noise(tape, gates,
                                draw_uniform(rng, gates.group_count()),
                                requires_grad);
}

/// sigmoid(log_alpha - beta * log(-lo / hi)) per group, on the tape.
template <typename T>
Var<T> prob_nonzero(Tape<T>& tape, HardConcreteGateSet<T>& gates,
                    bool requires_grad = true) {
  const auto& hp = gates.params;
  const T shift = static_cast<T>(hp.beta *
                                 std::log(-hp.stretch_lo / hp.stretch_hi));
  return sigmoid(tape.param(gates.log_alpha, requires_grad) - shift);
}

inline double prob_nonzero(double log_alpha, const HardConcreteParams& hp) {
  const double x =
      log_alpha - hp.beta * std::log(-hp.stretch_lo / hp.stretch_hi);
  return 1.0 / (1.0 + std::exp(-x));
}

template <typename T>
std::vector<double> prob_nonzero_values(const HardConcreteGateSet<T>& gates) {
  std::vector<double> p;
  p.reserve(gates.group_count());
  for (T la : gates.log_alpha.value.data) {
    p.push_back(prob_nonzero(static_cast<double>(la), gates.params));
  }
  return p;
}

/// Expected number of nonzero gates. Unweighted; parameter-weighted counts
/// live in sparsity.hpp.
template <typename T>
Var<T> expected_l0(Tape<T>& tape, HardConcreteGateSet<T>& gates) {
  if (gates.group_count() == 0) return tape.scalar(T{0});
  return sum(prob_nonzero(tape, gates));
}

/// Inference-time gate: the noise-free stretch-and-clamp of sigmoid(log
/// alpha). A group counts as pruned iff this is exactly zero.
inline double deterministic_mask(double log_alpha,
                                 const HardConcreteParams& hp) {
  const double s = 1.0 / (1.0 + std::exp(-log_alpha));
  const double v = (hp.stretch_hi - hp.stretch_lo) * s + hp.stretch_lo;
  return std::min(1.0, std::max(0.0, v));
}

template <typename T>
std::vector<double> deterministic_mask(const HardConcreteGateSet<T>& gates) {
  std::vector<double> z;
  z.reserve(gates.group_count());
  for (T la : gates.log_alpha.value.data) {
    z.push_back(deterministic_mask(static_cast<double>(la), gates.params));
  }
  return z;
}

}  // namespace distilprune
