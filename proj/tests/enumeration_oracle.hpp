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

// Layouts with at most twelve gate groups and a brute-force expectation of the
// discrete parameter count over every mask pattern.

#pragma once

#include <cstdint>
#include <vector>

#include "distilprune/sparsity.hpp"

namespace distilprune::oracle {

// Flattened view of a GroupMasks so that patterns can be enumerated as bits.
inline std::vector<double*> slots(GroupMasks& m) {
  std::vector<double*> out;
  for (auto* set : {&m.conv, &m.heads, &m.ffn}) {
    for (auto& v : *set) {
      for (double& x : v) out.push_back(&x);
    }
  }
  return out;
}

inline GroupMasks shaped_like(const ParamGroupLayout& layout, double fill) {
  GroupMasks m;
  for (const auto& c : layout.conv) m.conv.emplace_back(c.channels, fill);
  for (const auto& l : layout.layers) {
    m.heads.emplace_back(l.heads, fill);
    m.ffn.emplace_back(l.units, fill);
  }
  return m;
}

// Exact E[discrete count] under independent Bernoulli masks, by brute force.
inline double enumerate_expectation(const GroupMasks& probs, const ParamGroupLayout& layout) {
  GroupMasks p = probs;
  GroupMasks pattern = shaped_like(layout, 0.0);
  const auto ps = slots(p);
  const auto bits = slots(pattern);
  const std::size_t n = ps.size();
  double acc = 0.0;
  for (std::uint64_t code = 0; code < (std::uint64_t{1} << n); ++code) {
    double weight = 1.0;
    for (std::size_t j = 0; j < n; ++j) {
      const bool on = (code >> j) & 1;
      *bits[j] = on ? 1.0 : 0.0;
      weight *= on ? *ps[j] : 1.0 - *ps[j];
    }
    if (weight == 0.0) continue;
    acc += weight * static_cast<double>(discrete_param_count(pattern, layout));
  }
  return acc;
}

inline ParamGroupLayout ffn_only(std::size_t units, std::size_t unit_size) {
  ParamGroupLayout l;
  l.layers.push_back({0, 0, units, unit_size});
  return l;
}

inline std::vector<ParamGroupLayout> small_layouts() {
  std::vector<ParamGroupLayout> out;
  out.push_back(ffn_only(3, 10));
  {
    ParamGroupLayout l;  // two convs feeding a projection
    l.conv = {{3, 3, true}, {2, 4, true}};
    l.conv_output_size = 5;
    out.push_back(l);
  }
  {
    ParamGroupLayout l;  // conv without bias, then one Transformer layer
    l.input_channels = 2;
    l.conv = {{2, 3, false}};
    l.conv_output_size = 4;
    l.layers = {{2, 7, 3, 5}};
    out.push_back(l);
  }
  {
    ParamGroupLayout l;  // three Transformer layers, twelve groups
    l.layers = {{2, 11, 2, 3}, {1, 11, 2, 3}, {2, 11, 3, 3}};
    out.push_back(l);
  }
  {
    ParamGroupLayout l;  // three conv layers, twelve groups
    l.conv = {{3, 4, true}, {2, 4, true}, {1, 4, true}};
    l.conv_output_size = 6;
    out.push_back(l);
  }
  return out;
}

}  // namespace distilprune::oracle
