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

#include <cstdint>
#include <random>

#include "distilprune/tensor.hpp"

namespace distilprune {

/// Generator keyed on (seed, stream, index) so that every consumer gets an
/// independent, reproducible sequence.
inline std::mt19937_64 keyed_rng(std::uint64_t seed, std::uint64_t stream,
                                 std::uint64_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed),
                    static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream),
                    static_cast<std::uint32_t>(index),
                    static_cast<std::uint32_t>(index >> 32)};
  return std::mt19937_64(seq);
}

inline constexpr std::uint64_t kDataStream = 1;
inline constexpr std::uint64_t kGateStream = 2;
inline constexpr std::uint64_t kEvalStream = 3;

/// [batch, seq_len] unit-normal sequences; a pure function of (seed, step).
template <typename T = float>
Tensor<T> synth_batch(std::uint64_t seed, std::uint64_t step,
                      std::size_t batch_size, std::size_t seq_len,
                      std::uint64_t stream = kDataStream) {
  auto rng = keyed_rng(seed, stream, step);
  std::normal_distribution<double> normal(0.0, 1.0);
  Tensor<T> out(Shape{batch_size, seq_len});
  for (T& x : out.data) x = static_cast<T>(normal(rng));
  return out;
}

}  // namespace distilprune
