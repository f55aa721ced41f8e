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

// Turns a gated encoder into a dense, physically smaller one.
//
// Groups whose mask is exactly zero are sliced away. A surviving group with a
// fractional mask m has m multiplied into the weights that consume it:
//   conv channel c of layer k  - input slice c of conv k+1, or row c of proj
//   attention head             - its rows of the O-projection
//   FFN unit                   - its row of fc2
// A conv channel's own kernel cannot absorb m because the per-channel
// normalization that follows it is scale invariant.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "distilprune/data.hpp"
#include "distilprune/encoder.hpp"
#include "distilprune/errors.hpp"
#include "distilprune/sparsity.hpp"

namespace distilprune {

/// Surviving sizes next to the original ones.
struct PrunedArchitecture {
  std::vector<std::size_t> conv_channels;
  std::vector<std::size_t> conv_original;
  std::vector<std::size_t> heads;
  std::vector<std::size_t> heads_original;
  std::vector<std::size_t> ffn;
  std::vector<std::size_t> ffn_original;
  std::uint64_t params_gated = 0;
  std::uint64_t params_gated_original = 0;
  std::uint64_t params_total = 0;
  std::uint64_t params_total_original = 0;

  bool operator==(const PrunedArchitecture&) const = default;
};

template <typename T>
PrunedArchitecture describe(const Encoder<T>& pruned,
                            const Encoder<T>& original) {
  PrunedArchitecture a;
  for (const auto& c : pruned.arch().conv) a.conv_channels.push_back(c.out_channels);
  for (const auto& c : original.arch().conv) a.conv_original.push_back(c.out_channels);
  for (const auto& l : pruned.arch().layers) {
    a.heads.push_back(l.heads);
    a.ffn.push_back(l.ffn);
  }
  for (const auto& l : original.arch().layers) {
    a.heads_original.push_back(l.heads);
    a.ffn_original.push_back(l.ffn);
  }
  a.params_gated = pruned.gated_param_count();
  a.params_gated_original = original.gated_param_count();
  a.params_total = pruned.total_param_count();
  a.params_total_original = original.total_param_count();
  return a;
}

struct ExtractOptions {
  // Off only to demonstrate that the equivalence check catches a missing fold.
  bool fold = true;
};

template <typename T>
struct Extraction {
  Encoder<T> model;
  PrunedArchitecture arch;
};

namespace detail {

inline std::vector<std::size_t> survivors(const std::vector<double>& mask) {
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask[i] != 0.0) keep.push_back(i);
  }
  return keep;
}

// dst[r', :] = src[rows[r'], :] * scale[rows[r']]
template <typename T>
void gather_rows(const Tensor<T>& src, Tensor<T>& dst,
                 const std::vector<std::size_t>& rows, std::size_t block,
                 const std::vector<double>* scale) {
  const std::size_t inner = src.size() / src.shape[0];
  for (std::size_t g = 0; g < rows.size(); ++g) {
    const double s = scale ? (*scale)[rows[g]] : 1.0;
    for (std::size_t i = 0; i < block * inner; ++i) {
      const T v = src[rows[g] * block * inner + i];
      dst[g * block * inner + i] = scale ? static_cast<T>(v * s) : v;
    }
  }
}

// dst[:, c'] = src[:, cols[c']] for [rows, groups * block] matrices.
template <typename T>
void gather_cols(const Tensor<T>& src, Tensor<T>& dst,
                 const std::vector<std::size_t>& cols, std::size_t block) {
  const std::size_t rows = src.shape[0];
  const std::size_t sw = src.shape[1];
  const std::size_t dw = dst.shape[1];
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t g = 0; g < cols.size(); ++g) {
      for (std::size_t b = 0; b < block; ++b) {
        dst[r * dw + g * block + b] = src[r * sw + cols[g] * block + b];
      }
    }
  }
}

}  // namespace detail

/// Builds the dense model whose forward equals `model` under `masks`.
template <typename T>
Extraction<T> extract(const Encoder<T>& model, const GroupMasks& masks,
                      const ExtractOptions& options = {}) {
  const EncoderArch& src = model.arch();
  detail::check_layout(masks, src.layout(), "extract");
  const std::size_t dh = src.head_dim;

  EncoderArch arch = src;
  std::vector<std::vector<std::size_t>> conv_keep;
  for (std::size_t k = 0; k < src.conv.size(); ++k) {
    conv_keep.push_back(detail::survivors(masks.conv[k]));
    if (conv_keep.back().empty()) {
      throw ExtractionError("extract: conv layer " + std::to_string(k) +
                            " has no surviving channels");
    }
    arch.conv[k].out_channels = conv_keep.back().size();
  }
  std::vector<std::vector<std::size_t>> head_keep, ffn_keep;
  for (std::size_t i = 0; i < src.layers.size(); ++i) {
    head_keep.push_back(detail::survivors(masks.heads[i]));
    ffn_keep.push_back(detail::survivors(masks.ffn[i]));
    arch.layers[i] = {head_keep.back().size(), ffn_keep.back().size()};
  }

  Encoder<T> out(arch);
  auto& s = const_cast<Encoder<T>&>(model);
  const auto* no_scale = static_cast<const std::vector<double>*>(nullptr);
  auto fold_of = [&](const std::vector<double>& m) {
    return options.fold ? &m : no_scale;
  };

  for (std::size_t k = 0; k < src.conv.size(); ++k) {
    const auto& from = s.conv()[k];
    auto& to = out.conv()[k];
    const auto& keep = conv_keep[k];
    const std::size_t kw = src.conv[k].kernel;
    const std::size_t cin_src = from.weight.value.shape[1];
    const std::size_t cin = to.weight.value.shape[1];
    const std::vector<std::size_t>* in_keep = k > 0 ? &conv_keep[k - 1] : nullptr;
    const std::vector<double>* in_scale = k > 0 ? fold_of(masks.conv[k - 1]) : nullptr;
    for (std::size_t o = 0; o < keep.size(); ++o) {
      for (std::size_t c = 0; c < cin; ++c) {
        const std::size_t sc = in_keep ? (*in_keep)[c] : c;
        const double scale = in_scale ? (*in_scale)[sc] : 1.0;
        for (std::size_t j = 0; j < kw; ++j) {
          const T v = from.weight.value[(keep[o] * cin_src + sc) * kw + j];
          to.weight.value[(o * cin + c) * kw + j] =
              in_scale ? static_cast<T>(v * scale) : v;
        }
      }
    }
    detail::gather_rows(from.bias.value, to.bias.value, keep, 1, no_scale);
    detail::gather_rows(from.norm_weight.value, to.norm_weight.value, keep, 1, no_scale);
    detail::gather_rows(from.norm_bias.value, to.norm_bias.value, keep, 1, no_scale);
  }
  detail::gather_rows(s.proj_weight().value, out.proj_weight().value,
                      conv_keep.back(), 1, fold_of(masks.conv.back()));
  out.proj_bias().value = s.proj_bias().value;

  for (std::size_t i = 0; i < src.layers.size(); ++i) {
    auto& from = s.layers()[i];
    auto& to = out.layers()[i];
    if (to.attn) {
      auto& a = *from.attn;
      auto& b = *to.attn;
      const auto& keep = head_keep[i];
      b.norm_weight.value = a.norm_weight.value;
      b.norm_bias.value = a.norm_bias.value;
      detail::gather_cols(a.q_weight.value, b.q_weight.value, keep, dh);
      detail::gather_cols(a.k_weight.value, b.k_weight.value, keep, dh);
      detail::gather_cols(a.v_weight.value, b.v_weight.value, keep, dh);
      detail::gather_rows(a.q_bias.value, b.q_bias.value, keep, dh, no_scale);
      detail::gather_rows(a.k_bias.value, b.k_bias.value, keep, dh, no_scale);
      detail::gather_rows(a.v_bias.value, b.v_bias.value, keep, dh, no_scale);
      detail::gather_rows(a.o_weight.value, b.o_weight.value, keep, dh,
                          fold_of(masks.heads[i]));
    }
    if (to.ffn) {
      auto& a = *from.ffn;
      auto& b = *to.ffn;
      const auto& keep = ffn_keep[i];
      b.norm_weight.value = a.norm_weight.value;
      b.norm_bias.value = a.norm_bias.value;
      detail::gather_cols(a.fc1_weight.value, b.fc1_weight.value, keep, 1);
      detail::gather_rows(a.fc1_bias.value, b.fc1_bias.value, keep, 1, no_scale);
      detail::gather_rows(a.fc2_weight.value, b.fc2_weight.value, keep, 1,
                          fold_of(masks.ffn[i]));
    }
  }
  PrunedArchitecture pa = describe(out, model);
  return {std::move(out), std::move(pa)};
}

struct EquivalenceReport {
  double max_abs = 0.0;
  double max_rel = 0.0;
  std::size_t inputs = 0;
  double tol = 0.0;
  bool passed = false;
};

/// Compares final hidden states of `masked` (run under `masks`) and `pruned`
/// on `num_inputs` seeded unit-normal sequences. Never throws on mismatch.
template <typename T>
EquivalenceReport verify_equivalence(const Encoder<T>& masked,
                                     const GroupMasks& masks,
                                     const Encoder<T>& pruned,
                                     std::size_t num_inputs, double tol,
                                     std::uint64_t seed = 0,
                                     std::size_t seq_len = 64) {
  EquivalenceReport r;
  r.inputs = num_inputs;
  r.tol = tol;
  auto& a = const_cast<Encoder<T>&>(masked);
  auto& b = const_cast<Encoder<T>&>(pruned);
  for (std::size_t n = 0; n < num_inputs; ++n) {
    const Tensor<T> x = synth_batch<T>(seed, n, 1, seq_len, kEvalStream);
    Tape<T> tape(false);
    auto m = constant_masks(tape, masks);
    const auto& ya = a.forward(tape, x, &m, false).back().value();
    const auto& yb = b.forward(tape, x, nullptr, false).back().value();
    if (ya.shape != yb.shape) {
      r.max_abs = r.max_rel = std::numeric_limits<double>::infinity();
      continue;
    }
    for (std::size_t i = 0; i < ya.size(); ++i) {
      const double diff = std::abs(static_cast<double>(ya[i]) - yb[i]);
      const double scale = std::max(std::abs(static_cast<double>(ya[i])), 1e-6);
      if (!(diff <= r.max_abs)) r.max_abs = diff;
      r.max_rel = std::max(r.max_rel, diff / scale);
    }
  }
  r.passed = r.max_abs < tol;
  return r;
}

enum class ReportFormat { kText, kCsv };

inline constexpr const char* kArchitectureHeader = "kind,index,surviving,original";

/// Aligned table or one CSV row per group kind and layer, followed by the
/// parameter totals as rows of kind params_gated and params_total.
inline std::string report_architecture(const PrunedArchitecture& a,
                                       ReportFormat format) {
  std::ostringstream os;
  if (format == ReportFormat::kCsv) {
    os << kArchitectureHeader << "\n";
    auto rows = [&](const char* kind, const std::vector<std::size_t>& s,
                    const std::vector<std::size_t>& o) {
      for (std::size_t i = 0; i < s.size(); ++i) {
        os << kind << "," << i << "," << s[i] << "," << o[i] << "\n";
      }
    };
    rows("conv", a.conv_channels, a.conv_original);
    rows("heads", a.heads, a.heads_original);
    rows("ffn", a.ffn, a.ffn_original);
    os << "params_gated,0," << a.params_gated << "," << a.params_gated_original << "\n";
    os << "params_total,0," << a.params_total << "," << a.params_total_original << "\n";
    return os.str();
  }
  auto frac = [](std::size_t s, std::size_t o) {
    std::ostringstream f;
    f << s << "/" << o;
    return f.str();
  };
  os << std::left << std::setw(8) << "conv" << "channels\n";
  for (std::size_t k = 0; k < a.conv_channels.size(); ++k) {
    os << std::setw(8) << k << frac(a.conv_channels[k], a.conv_original[k]) << "\n";
  }
  os << std::setw(8) << "layer" << std::setw(10) << "heads" << "ffn\n";
  for (std::size_t i = 0; i < a.heads.size(); ++i) {
    os << std::setw(8) << i << std::setw(10) << frac(a.heads[i], a.heads_original[i])
       << frac(a.ffn[i], a.ffn_original[i]) << "\n";
  }
  os << "gated params " << a.params_gated << " of " << a.params_gated_original
     << ", total params " << a.params_total << " of " << a.params_total_original
     << "\n";
  return os.str();
}

/// Inverse of the CSV form of report_architecture.
inline PrunedArchitecture parse_architecture_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != kArchitectureHeader) {
    throw IoError("architecture csv: missing header");
  }
  PrunedArchitecture a;
  auto put = [](std::vector<std::size_t>& v, std::size_t i, std::size_t x) {
    if (i != v.size()) throw IoError("architecture csv: rows out of order");
    v.push_back(x);
  };
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string kind, f1, f2, f3, extra;
    if (!std::getline(row, kind, ',') || !std::getline(row, f1, ',') ||
        !std::getline(row, f2, ',') || !std::getline(row, f3, ',') ||
        std::getline(row, extra)) {
      throw IoError("architecture csv: malformed line " + std::to_string(lineno));
    }
    std::uint64_t index = 0, surv = 0, orig = 0;
    try {
      std::size_t used = 0;
      index = std::stoull(f1, &used);
      if (used != f1.size()) throw std::invalid_argument(f1);
      surv = std::stoull(f2, &used);
      if (used != f2.size()) throw std::invalid_argument(f2);
      orig = std::stoull(f3, &used);
      if (used != f3.size()) throw std::invalid_argument(f3);
    } catch (const std::exception&) {
      throw IoError("architecture csv: bad number on line " + std::to_string(lineno));
    }
    if (kind == "conv") {
      put(a.conv_channels, index, surv);
      a.conv_original.push_back(orig);
    } else if (kind == "heads") {
      put(a.heads, index, surv);
      a.heads_original.push_back(orig);
    } else if (kind == "ffn") {
      put(a.ffn, index, surv);
      a.ffn_original.push_back(orig);
    } else if (kind == "params_gated") {
      a.params_gated = surv;
      a.params_gated_original = orig;
    } else if (kind == "params_total") {
      a.params_total = surv;
      a.params_total_original = orig;
    } else {
      throw IoError("architecture csv: unknown kind '" + kind + "'");
    }
  }
  return a;
}

}  // namespace distilprune
