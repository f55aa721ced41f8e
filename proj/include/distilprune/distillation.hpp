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

#include <algorithm>
#include <string>
#include <vector>

#include "distilprune/autograd.hpp"
#include "distilprune/errors.hpp"

namespace distilprune {

enum class DistillMode { kLayerToLayer, kPredictionLayer };

inline const char* to_string(DistillMode m) {
  return m == DistillMode::kLayerToLayer ? "layer_to_layer"
                                         : "prediction_layer";
}

inline DistillMode parse_distill_mode(const std::string& s) {
  if (s == "layer_to_layer") return DistillMode::kLayerToLayer;
  if (s == "prediction_layer") return DistillMode::kPredictionLayer;
  throw ConfigError("unknown distill mode '" + s + "'");
}

/// Matched layers and their student-to-teacher projections.
template <typename T>
struct DistillSpec {
  std::vector<std::size_t> layers;
  std::vector<Parameter<T>> projections;  // one [d_stu, d_tea] per layer
  double l1_weight = 1.0;
  double cos_weight = 1.0;

  /// Identity projections, so a copied student starts at zero loss.
  static DistillSpec identity(std::vector<std::size_t> layers,
                              std::size_t d_student, std::size_t d_teacher,
                              std::size_t num_layers) {
    DistillSpec s;
    s.layers = std::move(layers);
    validate_layers(s.layers, num_layers);
    for (std::size_t i : s.layers) {
      Tensor<T> w(Shape{d_student, d_teacher});
      for (std::size_t r = 0; r < std::min(d_student, d_teacher); ++r) {
        w[r * d_teacher + r] = T{1};
      }
      s.projections.emplace_back("distill.proj." + std::to_string(i),
                                 std::move(w));
    }
    return s;
  }

  static void validate_layers(const std::vector<std::size_t>& layers,
                              std::size_t num_layers) {
    for (std::size_t k = 0; k < layers.size(); ++k) {
      if (layers[k] > num_layers) {
        throw ConfigError("distill: layer index " + std::to_string(layers[k]) +
                          " outside [0, " + std::to_string(num_layers) + "]");
      }
      if (k > 0 && layers[k] <= layers[k - 1]) {
        throw ConfigError("distill: layer set must be strictly ascending");
      }
    }
  }

  /// Every matched index except the conv output (0).
  std::vector<std::size_t> prediction_targets() const {
    std::vector<std::size_t> out;
    for (std::size_t i : layers) {
      if (i != 0) out.push_back(i);
    }
    return out;
  }
};

/// Mean over frames of  l1_weight * mean_d |a - b|
///                    + cos_weight * (1 - cos(a, b)).
/// The last axis is the feature axis; every other axis indexes frames.
template <typename T>
Var<T> feature_distance(Var<T> a, Var<T> b, double l1_weight,
                        double cos_weight) {
  if (a.shape() != b.shape() || a.shape().empty()) {
    throw ShapeError("feature_distance: incompatible shapes " +
                     to_string(a.shape()) + " and " + to_string(b.shape()));
  }
  Tape<T>& tape = a.tape();
  Var<T> per_frame = tape.scalar(T{0});
  if (l1_weight != 0.0) {
    per_frame = mean(abs(a - b), -1) * static_cast<T>(l1_weight);
  }
  if (cos_weight != 0.0) {
    Var<T> dot = sum(a * b, -1);
    Var<T> na = sqrt(sum(a * a, -1));
    Var<T> nb = sqrt(sum(b * b, -1));
    Var<T> cosine = dot / (na * nb + static_cast<T>(1e-8));
    per_frame = per_frame + (T{1} - cosine) * static_cast<T>(cos_weight);
  }
  return mean(per_frame);
}

namespace detail {
template <typename T>
void require_states(const std::vector<Var<T>>& states, std::size_t index,
                    const char* who) {
  if (index >= states.size()) {
    throw std::out_of_range(std::string(who) + ": no hidden state for layer " +
                            std::to_string(index));
  }
}
}  // namespace detail

/// Sum over matched layers i of distance(X_i^tea, X_i^stu W_i).
template <typename T>
Var<T> layer_to_layer_loss(const std::vector<Var<T>>& teacher,
                           const std::vector<Var<T>>& student,
                           DistillSpec<T>& spec, bool requires_grad = true) {
  Tape<T>& tape = student.front().tape();
  Var<T> total = tape.scalar(T{0});
  for (std::size_t k = 0; k < spec.layers.size(); ++k) {
    const std::size_t i = spec.layers[k];
    detail::require_states(teacher, i, "layer_to_layer_loss");
    detail::require_states(student, i, "layer_to_layer_loss");
    Var<T> projected =
        matmul(student[i], tape.param(spec.projections[k], requires_grad));
    total = total + feature_distance(teacher[i], projected, spec.l1_weight,
                                     spec.cos_weight);
  }
  return total;
}

/// Every matched teacher layer other than 0 is predicted from the final
/// student layer through its own projection.
template <typename T>
Var<T> prediction_layer_loss(const std::vector<Var<T>>& teacher,
                             const std::vector<Var<T>>& student,
                             DistillSpec<T>& spec, bool requires_grad = true) {
  Tape<T>& tape = student.front().tape();
  Var<T> last = student.back();
  Var<T> total = tape.scalar(T{0});
  for (std::size_t k = 0; k < spec.layers.size(); ++k) {
    const std::size_t i = spec.layers[k];
    if (i == 0) continue;
    detail::require_states(teacher, i, "prediction_layer_loss");
    Var<T> projected =
        matmul(last, tape.param(spec.projections[k], requires_grad));
    total = total + feature_distance(teacher[i], projected, spec.l1_weight,
                                     spec.cos_weight);
  }
  return total;
}

template <typename T>
Var<T> distill_loss(DistillMode mode, const std::vector<Var<T>>& teacher,
                    const std::vector<Var<T>>& student, DistillSpec<T>& spec,
                    bool requires_grad = true) {
  return mode == DistillMode::kLayerToLayer
             ? layer_to_layer_loss(teacher, student, spec, requires_grad)
             : prediction_layer_loss(teacher, student, spec, requires_grad);
}

}  // namespace distilprune
