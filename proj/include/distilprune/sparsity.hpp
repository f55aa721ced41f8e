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

// Parameter-weighted size accounting for gated groups, the sparsity
// constraint penalty and the target-sparsity ramp.
//
// Conv layer k holds kernel * in_k * out_k weights plus out_k biases, where
// in_k is the number of live channels of layer k-1 (fixed for the first
// layer). Gates are independent, so E[in_k * out_k] = E[in_k] * E[out_k]
// and the expected count stays exact.

#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "distilprune/autograd.hpp"
#include "distilprune/errors.hpp"

namespace distilprune {

struct ConvGroupLayout {
  std::size_t kernel = 1;
  std::size_t channels = 0;
  bool bias = true;
};

struct TransformerGroupLayout {
  std::size_t heads = 0;
  std::size_t head_size = 0;  // gated parameters per attention head
  std::size_t units = 0;
  std::size_t unit_size = 0;  // gated parameters per FFN intermediate unit
};

/// Which parameters each gate group controls.
struct ParamGroupLayout {
  std::size_t input_channels = 1;  // channels feeding conv[0], never gated
  std::vector<ConvGroupLayout> conv;
  std::size_t conv_output_size = 0;  // weights per live last-conv channel
  std::vector<TransformerGroupLayout> layers;

  std::size_t group_count() const {
    std::size_t n = 0;
    for (const auto& c : conv) n += c.channels;
    for (const auto& l : layers) n += l.heads + l.units;
    return n;
  }

  std::uint64_t total_prunable() const;
};

/// Per-gate-set values (masks or probabilities), one entry per conv layer and
/// per Transformer layer.
template <typename V>
struct GroupValues {
  std::vector<V> conv;
  std::vector<V> heads;
  std::vector<V> ffn;
};

using GroupMasks = GroupValues<std::vector<double>>;

namespace detail {

inline void check_layout(const GroupMasks& m, const ParamGroupLayout& layout,
                         const char* op) {
  auto fail = [&](const std::string& what) {
    throw ShapeError(std::string(op) + ": gate/layout mismatch in " + what);
  };
  if (m.conv.size() != layout.conv.size()) fail("conv layer count");
  if (m.heads.size() != layout.layers.size() ||
      m.ffn.size() != layout.layers.size()) {
    fail("transformer layer count");
  }
  for (std::size_t k = 0; k < layout.conv.size(); ++k) {
    if (m.conv[k].size() != layout.conv[k].channels) {
      fail("conv layer " + std::to_string(k));
    }
  }
  for (std::size_t i = 0; i < layout.layers.size(); ++i) {
    if (m.heads[i].size() != layout.layers[i].heads) {
      fail("heads of layer " + std::to_string(i));
    }
    if (m.ffn[i].size() != layout.layers[i].units) {
      fail("ffn units of layer " + std::to_string(i));
    }
  }
}

template <typename T>
void check_layout(const GroupValues<Var<T>>& m, const ParamGroupLayout& layout,
                  const char* op) {
  GroupMasks sizes;
  for (const auto& v : m.conv) sizes.conv.emplace_back(v.size());
  for (const auto& v : m.heads) sizes.heads.emplace_back(v.size());
  for (const auto& v : m.ffn) sizes.ffn.emplace_back(v.size());
  check_layout(sizes, layout, op);
}

inline double total(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s;
}

}  // namespace detail

inline std::uint64_t ParamGroupLayout::total_prunable() const {
  std::uint64_t n = 0;
  std::uint64_t in = input_channels;
  for (const auto& c : conv) {
    n += c.kernel * in * c.channels + (c.bias ? c.channels : 0);
    in = c.channels;
  }
  if (!conv.empty()) n += conv_output_size * conv.back().channels;
  for (const auto& l : layers) n += l.head_size * l.heads + l.unit_size * l.units;
  return n;
}

/// Expected surviving parameter count given per-group keep probabilities.
inline double expected_remaining_params(const GroupMasks& probs,
                                        const ParamGroupLayout& layout) {
  detail::check_layout(probs, layout, "expected_remaining_params");
  double n = 0.0;
  double in = static_cast<double>(layout.input_channels);
  for (std::size_t k = 0; k < layout.conv.size(); ++k) {
    const auto& c = layout.conv[k];
    const double out = detail::total(probs.conv[k]);
    n += static_cast<double>(c.kernel) * in * out + (c.bias ? out : 0.0);
    in = out;
  }
  if (!layout.conv.empty()) {
    n += static_cast<double>(layout.conv_output_size) * in;
  }
  for (std::size_t i = 0; i < layout.layers.size(); ++i) {
    const auto& l = layout.layers[i];
    n += static_cast<double>(l.head_size) * detail::total(probs.heads[i]) +
         static_cast<double>(l.unit_size) * detail::total(probs.ffn[i]);
  }
  return n;
}

/// Differentiable version over probability vectors recorded on a tape.
template <typename T>
Var<T> expected_remaining_params(const GroupValues<Var<T>>& probs,
                                 const ParamGroupLayout& layout,
                                 Tape<T>& tape) {
  detail::check_layout(probs, layout, "expected_remaining_params");
  std::vector<Var<T>> terms;
  Var<T> in = tape.scalar(static_cast<T>(layout.input_channels));
  for (std::size_t k = 0; k < layout.conv.size(); ++k) {
    const auto& c = layout.conv[k];
    Var<T> out = sum(probs.conv[k]);
    terms.push_back(in * out * static_cast<T>(c.kernel));
    if (c.bias) terms.push_back(out);
    in = out;
  }
  if (!layout.conv.empty() && layout.conv_output_size > 0) {
    terms.push_back(in * static_cast<T>(layout.conv_output_size));
  }
  for (std::size_t i = 0; i < layout.layers.size(); ++i) {
    const auto& l = layout.layers[i];
    if (l.heads > 0) {
      terms.push_back(sum(probs.heads[i]) * static_cast<T>(l.head_size));
    }
    if (l.units > 0) {
      terms.push_back(sum(probs.ffn[i]) * static_cast<T>(l.unit_size));
    }
  }
  Var<T> acc = tape.scalar(T{0});
  for (const auto& t : terms) acc = acc + t;
  return acc;
}

/// Fraction of gated parameters pruned in expectation.
inline double current_sparsity(const GroupMasks& probs,
                               const ParamGroupLayout& layout) {
  const double total = static_cast<double>(layout.total_prunable());
  if (total == 0.0) return 0.0;
  const double s = 1.0 - expected_remaining_params(probs, layout) / total;
  return std::clamp(s, 0.0, 1.0);
}

template <typename T>
Var<T> current_sparsity(const GroupValues<Var<T>>& probs,
                        const ParamGroupLayout& layout, Tape<T>& tape) {
  const T total = static_cast<T>(layout.total_prunable());
  Var<T> remaining = expected_remaining_params(probs, layout, tape);
  if (total == T{0}) return tape.scalar(T{0});
  return T{1} - remaining * (T{1} / total);
}

/// lambda1 * (s - t) + lambda2 * (s - t)^2.
template <typename T>
Var<T> lagrangian_penalty(Var<T> sparsity, T target, Var<T> lambda1,
                          Var<T> lambda2) {
  Var<T> gap = sparsity - target;
  return lambda1 * gap + lambda2 * (gap * gap);
}

inline double lagrangian_penalty(double s, double t, double lambda1,
                                 double lambda2) {
  const double gap = s - t;
  return lambda1 * gap + lambda2 * gap * gap;
}

/// Linear ramp from 0 to `t_final` over `ramp_steps`, then constant.
inline double target_at(std::size_t step, std::size_t ramp_steps,
                        double t_final) {
  if (ramp_steps == 0) return t_final;
  const double frac = std::min(1.0, static_cast<double>(step) /
                                        static_cast<double>(ramp_steps));
  return frac * t_final;
}

/// Exact surviving-parameter count for binary masks.
inline std::uint64_t discrete_param_count(const GroupMasks& masks,
                                          const ParamGroupLayout& layout) {
  detail::check_layout(masks, layout, "discrete_param_count");
  auto alive = [](const std::vector<double>& m, const char* what) {
    std::uint64_t n = 0;
    for (double x : m) {
      if (x != 0.0 && x != 1.0) {
        throw std::invalid_argument(std::string("discrete_param_count: ") +
                                    what + " mask is not binary");
      }
      n += x == 1.0 ? 1 : 0;
    }
    return n;
  };
  std::uint64_t n = 0;
  std::uint64_t in = layout.input_channels;
  for (std::size_t k = 0; k < layout.conv.size(); ++k) {
    const auto& c = layout.conv[k];
    const std::uint64_t out = alive(masks.conv[k], "conv");
    n += c.kernel * in * out + (c.bias ? out : 0);
    in = out;
  }
  if (!layout.conv.empty()) n += layout.conv_output_size * in;
  for (std::size_t i = 0; i < layout.layers.size(); ++i) {
    const auto& l = layout.layers[i];
    n += l.head_size * alive(masks.heads[i], "head") +
         l.unit_size * alive(masks.ffn[i], "ffn");
  }
  return n;
}

/// Maps any mask to {0, 1}: a group survives iff its mask is nonzero.
inline GroupMasks binarize(const GroupMasks& masks) {
  auto bin = [](std::vector<std::vector<double>> sets) {
    for (auto& s : sets) {
      for (double& x : s) x = x != 0.0 ? 1.0 : 0.0;
    }
    return sets;
  };
  return {bin(masks.conv), bin(masks.heads), bin(masks.ffn)};
}

/// Lagrange multipliers and target schedule for the sparsity constraint.
template <typename T>
struct SparsityController {
  Parameter<T> lambda1{"lambda1", Tensor<T>::scalar(T{0})};
  Parameter<T> lambda2{"lambda2", Tensor<T>::scalar(T{0})};
  double t_final = 0.0;
  std::size_t ramp_steps = 0;
  ParamGroupLayout layout;

  double target(std::size_t step) const {
    return target_at(step, ramp_steps, t_final);
  }
};

}  // namespace distilprune
