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

#pragma once

#include <cmath>
#include <vector>

#include "distilprune/autograd.hpp"

namespace distilprune {

enum class OptimizerKind { kAdam, kSgd };

enum class Direction { kDescend, kAscend };

/// Adam (or plain SGD) over a fixed list of parameters. Ascend flips the
/// gradient sign, which is how the Lagrange multipliers are maximized.
template <typename T>
class Optimizer {
 public:
  struct Settings {
    OptimizerKind kind = OptimizerKind::kAdam;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
  };

  Optimizer() = default;
  Optimizer(std::vector<Parameter<T>*> params, Settings s)
      : params_(std::move(params)), settings_(s) {
    for (auto* p : params_) {
      first_.emplace_back(p->value.size(), 0.0);
      second_.emplace_back(p->value.size(), 0.0);
    }
  }
  explicit Optimizer(std::vector<Parameter<T>*> params)
      : Optimizer(std::move(params), Settings{}) {}

  void zero_grad() {
    for (auto* p : params_) p->zero_grad();
  }

  void step(double lr, Direction dir = Direction::kDescend) {
    ++steps_;
    const double sign = dir == Direction::kAscend ? -1.0 : 1.0;
    const double c1 = 1.0 - std::pow(settings_.beta1, static_cast<double>(steps_));
    const double c2 = 1.0 - std::pow(settings_.beta2, static_cast<double>(steps_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      Parameter<T>& p = *params_[k];
      if (p.grad.size() != p.value.size()) p.zero_grad();
      auto& m = first_[k];
      auto& v = second_[k];
      for (std::size_t i = 0; i < p.value.size(); ++i) {
        const double g = sign * static_cast<double>(p.grad[i]);
        double update = g;
        if (settings_.kind == OptimizerKind::kAdam) {
          m[i] = settings_.beta1 * m[i] + (1.0 - settings_.beta1) * g;
          v[i] = settings_.beta2 * v[i] + (1.0 - settings_.beta2) * g * g;
          update = (m[i] / c1) / (std::sqrt(v[i] / c2) + settings_.eps);
        }
        p.value[i] = static_cast<T>(static_cast<double>(p.value[i]) -
                                    lr * update);
      }
    }
  }

  std::size_t steps() const { return steps_; }
  const std::vector<Parameter<T>*>& params() const { return params_; }

 private:
  std::vector<Parameter<T>*> params_;
  Settings settings_;
  std::vector<std::vector<double>> first_;
  std::vector<std::vector<double>> second_;
  std::size_t steps_ = 0;
};

}  // namespace distilprune
