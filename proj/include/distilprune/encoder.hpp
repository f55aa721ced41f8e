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

// Miniature speech-style encoder: a stack of strided 1-D convolutions
// (each followed by per-channel normalization over time and GELU), a linear
// projection to the hidden size plus a fixed sinusoidal position table, then
// pre-norm Transformer layers.
//
// Prunable groups and where their gates act:
//   conv output channel  - after the activation of that channel
//   attention head       - on the head's context vectors, before O-projection
//   FFN intermediate unit - after the FFN nonlinearity
//
// The attention O-projection and the FFN output layer carry no bias, so a
// sublayer whose gates are all zero contributes exactly nothing and the
// layer reduces to its residual path.

#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "distilprune/autograd.hpp"
#include "distilprune/errors.hpp"
#include "distilprune/hard_concrete.hpp"
#include "distilprune/sparsity.hpp"

namespace distilprune {

struct ConvLayerSpec {
  std::size_t out_channels = 16;
  std::size_t kernel = 3;
  std::size_t stride = 2;

  bool operator==(const ConvLayerSpec&) const = default;
};

struct EncoderConfig {
  std::vector<ConvLayerSpec> conv_layers{{16, 5, 2}, {16, 3, 2}, {16, 3, 2}};
  std::size_t hidden_size = 32;
  std::size_t num_layers = 6;
  std::size_t num_heads = 4;
  std::size_t ffn_size = 64;

  std::size_t head_dim() const { return hidden_size / num_heads; }

  void validate() const {
    if (conv_layers.empty()) throw ConfigError("encoder: no conv layers");
    for (std::size_t k = 0; k < conv_layers.size(); ++k) {
      const auto& c = conv_layers[k];
      if (c.out_channels == 0 || c.kernel == 0 || c.stride == 0) {
        throw ConfigError("encoder: conv layer " + std::to_string(k) +
                          " has a zero extent");
      }
    }
    if (hidden_size == 0 || num_heads == 0 || ffn_size == 0) {
      throw ConfigError("encoder: hidden_size, num_heads, ffn_size must be > 0");
    }
    if (hidden_size % num_heads != 0) {
      throw ConfigError("encoder: hidden_size " + std::to_string(hidden_size) +
                        " not divisible by num_heads " +
                        std::to_string(num_heads));
    }
  }

  bool operator==(const EncoderConfig&) const = default;

  /// 3 x 16-channel convs, d = 32, N = 6, H = 4, F = 64.
  static EncoderConfig toy() { return {}; }

  /// One conv layer, two Transformer layers, d = 8, H = 2, F = 8; an input of
  /// 8 samples yields 4 frames.
  static EncoderConfig micro() {
    EncoderConfig c;
    c.conv_layers = {{4, 3, 2}};
    c.hidden_size = 8;
    c.num_layers = 2;
    c.num_heads = 2;
    c.ffn_size = 8;
    return c;
  }
};

struct LayerShape {
  std::size_t heads = 0;
  std::size_t ffn = 0;

  bool operator==(const LayerShape&) const = default;
};

/// Concrete sizes of a (possibly pruned) encoder.
struct EncoderArch {
  std::vector<ConvLayerSpec> conv;
  std::size_t hidden_size = 0;
  std::size_t head_dim = 0;
  std::vector<LayerShape> layers;

  static EncoderArch from_config(const EncoderConfig& c) {
    c.validate();
    EncoderArch a;
    a.conv = c.conv_layers;
    a.hidden_size = c.hidden_size;
    a.head_dim = c.head_dim();
    a.layers.assign(c.num_layers, LayerShape{c.num_heads, c.ffn_size});
    return a;
  }

  std::size_t frames(std::size_t samples) const {
    std::size_t len = samples;
    for (const auto& c : conv) {
      const std::size_t pad = c.kernel / 2;
      if (len + 2 * pad < c.kernel) return 0;
      len = (len + 2 * pad - c.kernel) / c.stride + 1;
    }
    return len;
  }

  /// Gated parameters controlled by each group, at this architecture's sizes.
  ParamGroupLayout layout() const {
    ParamGroupLayout l;
    l.input_channels = 1;
    for (const auto& c : conv) l.conv.push_back({c.kernel, c.out_channels, true});
    l.conv_output_size = hidden_size;
    for (const auto& s : layers) {
      l.layers.push_back({s.heads, 4 * hidden_size * head_dim + 3 * head_dim,
                          s.ffn, 2 * hidden_size + 1});
    }
    return l;
  }

  bool operator==(const EncoderArch&) const = default;
};

template <typename T>
struct ConvBlock {
  Parameter<T> weight;  // [C_out, C_in, K]
  Parameter<T> bias;    // [C_out]
  Parameter<T> norm_weight;
  Parameter<T> norm_bias;
};

template <typename T>
struct AttentionBlock {
  Parameter<T> norm_weight, norm_bias;  // [d]
  Parameter<T> q_weight, k_weight, v_weight;  // [d, h * dh]
  Parameter<T> q_bias, k_bias, v_bias;        // [h * dh]
  Parameter<T> o_weight;                      // [h * dh, d]
};

template <typename T>
struct FfnBlock {
  Parameter<T> norm_weight, norm_bias;  // [d]
  Parameter<T> fc1_weight;              // [d, F]
  Parameter<T> fc1_bias;                // [F]
  Parameter<T> fc2_weight;              // [F, d]
};

template <typename T>
struct TransformerBlock {
  std::optional<AttentionBlock<T>> attn;  // absent when no head survives
  std::optional<FfnBlock<T>> ffn;         // absent when no unit survives
};

namespace detail {
inline Tensor<double> sinusoid_table(std::size_t frames, std::size_t dim) {
  Tensor<double> table(Shape{frames, dim});
  for (std::size_t t = 0; t < frames; ++t) {
    for (std::size_t i = 0; i < dim; ++i) {
      const double expo = static_cast<double>(2 * (i / 2)) / dim;
      const double angle = static_cast<double>(t) / std::pow(10000.0, expo);
      table[t * dim + i] = (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  }
  return table;
}
}  // namespace detail

/// Teacher, student and extracted models all share this type; only the
/// architecture sizes and the presence of masks differ.
template <typename T>
class Encoder {
 public:
  Encoder() = default;

  /// Zero-initialized parameters with the shapes `arch` implies.
  explicit Encoder(EncoderArch arch) : arch_(std::move(arch)) {
    const std::size_t d = arch_.hidden_size;
    const std::size_t dh = arch_.head_dim;
    std::size_t in = 1;
    for (std::size_t k = 0; k < arch_.conv.size(); ++k) {
      const auto& c = arch_.conv[k];
      const std::string p = "conv." + std::to_string(k) + ".";
      ConvBlock<T> b;
      b.weight = {p + "weight", Tensor<T>(Shape{c.out_channels, in, c.kernel})};
      b.bias = {p + "bias", Tensor<T>(Shape{c.out_channels})};
      b.norm_weight = {p + "norm.weight", Tensor<T>(Shape{c.out_channels}, T{1})};
      b.norm_bias = {p + "norm.bias", Tensor<T>(Shape{c.out_channels})};
      conv_.push_back(std::move(b));
      in = c.out_channels;
    }
    proj_weight_ = {"proj.weight", Tensor<T>(Shape{in, d})};
    proj_bias_ = {"proj.bias", Tensor<T>(Shape{d})};
    for (std::size_t i = 0; i < arch_.layers.size(); ++i) {
      const auto& s = arch_.layers[i];
      const std::string p = "layer." + std::to_string(i) + ".";
      TransformerBlock<T> blk;
      if (s.heads > 0) {
        const std::size_t w = s.heads * dh;
        AttentionBlock<T> a;
        a.norm_weight = {p + "attn.norm.weight", Tensor<T>(Shape{d}, T{1})};
        a.norm_bias = {p + "attn.norm.bias", Tensor<T>(Shape{d})};
        a.q_weight = {p + "attn.q.weight", Tensor<T>(Shape{d, w})};
        a.q_bias = {p + "attn.q.bias", Tensor<T>(Shape{w})};
        a.k_weight = {p + "attn.k.weight", Tensor<T>(Shape{d, w})};
        a.k_bias = {p + "attn.k.bias", Tensor<T>(Shape{w})};
        a.v_weight = {p + "attn.v.weight", Tensor<T>(Shape{d, w})};
        a.v_bias = {p + "attn.v.bias", Tensor<T>(Shape{w})};
        a.o_weight = {p + "attn.o.weight", Tensor<T>(Shape{w, d})};
        blk.attn = std::move(a);
      }
      if (s.ffn > 0) {
        FfnBlock<T> f;
        f.norm_weight = {p + "ffn.norm.weight", Tensor<T>(Shape{d}, T{1})};
        f.norm_bias = {p + "ffn.norm.bias", Tensor<T>(Shape{d})};
        f.fc1_weight = {p + "ffn.fc1.weight", Tensor<T>(Shape{d, s.ffn})};
        f.fc1_bias = {p + "ffn.fc1.bias", Tensor<T>(Shape{s.ffn})};
        f.fc2_weight = {p + "ffn.fc2.weight", Tensor<T>(Shape{s.ffn, d})};
        blk.ffn = std::move(f);
      }
      layers_.push_back(std::move(blk));
    }
  }

  /// Seeded random initialization, used for synthetic teachers.
  static Encoder random(const EncoderConfig& config, std::uint64_t seed) {
    Encoder e(EncoderArch::from_config(config));
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    e.visit([&](Parameter<T>& p) {
      const auto& n = p.name;
      const auto ends_with = [&](const std::string& s) {
        return n.size() >= s.size() &&
               n.compare(n.size() - s.size(), s.size(), s) == 0;
      };
      double scale = 0.0;
      double center = 0.0;
      if (ends_with("norm.weight")) {
        center = 1.0;
        scale = 0.1;
      } else if (ends_with("bias")) {
        scale = 0.1;
      } else {
        // fan-in scaled weights
        const auto& s = p.value.shape;
        const std::size_t fan_in =
            s.size() == 3 ? s[1] * s[2] : s.front();
        scale = 1.0 / std::sqrt(static_cast<double>(fan_in));
      }
      for (T& x : p.value.data) {
        x = static_cast<T>(center + scale * normal(rng));
      }
    });
    return e;
  }

  const EncoderArch& arch() const { return arch_; }
  std::vector<ConvBlock<T>>& conv() { return conv_; }
  const std::vector<ConvBlock<T>>& conv() const { return conv_; }
  Parameter<T>& proj_weight() { return proj_weight_; }
  Parameter<T>& proj_bias() { return proj_bias_; }
  std::vector<TransformerBlock<T>>& layers() { return layers_; }
  const std::vector<TransformerBlock<T>>& layers() const { return layers_; }

  /// Visits every parameter in canonical (checkpoint) order.
  template <typename F>
  void visit(F&& f) {
    for (auto& b : conv_) {
      f(b.weight);
      f(b.bias);
      f(b.norm_weight);
      f(b.norm_bias);
    }
    f(proj_weight_);
    f(proj_bias_);
    for (auto& l : layers_) {
      if (l.attn) {
        auto& a = *l.attn;
        for (Parameter<T>* p : {&a.norm_weight, &a.norm_bias, &a.q_weight,
                                &a.q_bias, &a.k_weight, &a.k_bias, &a.v_weight,
                                &a.v_bias, &a.o_weight}) {
          f(*p);
        }
      }
      if (l.ffn) {
        auto& m = *l.ffn;
        for (Parameter<T>* p : {&m.norm_weight, &m.norm_bias, &m.fc1_weight,
                                &m.fc1_bias, &m.fc2_weight}) {
          f(*p);
        }
      }
    }
  }

  template <typename F>
  void visit(F&& f) const {
    const_cast<Encoder*>(this)->visit(
        [&](Parameter<T>& p) { f(static_cast<const Parameter<T>&>(p)); });
  }

  /// Parameters governed by gates (everything except norms and proj.bias).
  std::uint64_t gated_param_count() const {
    std::uint64_t n = 0;
    visit([&](const Parameter<T>& p) {
      if (is_gated(p.name)) n += p.value.size();
    });
    return n;
  }

  std::uint64_t total_param_count() const {
    std::uint64_t n = 0;
    visit([&](const Parameter<T>& p) { n += p.value.size(); });
    return n;
  }

  static bool is_gated(const std::string& name) {
    return name.find("norm.") == std::string::npos && name != "proj.bias";
  }

  /// Runs the encoder on `x` ([L] or [B, L]) and returns [X_0, ..., X_N],
  /// each [T, d] (or [B, T, d]). X_0 is the projected conv output plus the
  /// position table. `masks`, when given, must match this architecture.
  std::vector<Var<T>> forward(Tape<T>& tape, const Tensor<T>& x,
                              const GroupValues<Var<T>>* masks = nullptr,
                              bool requires_grad = true) {
    if (x.rank() != 1 && x.rank() != 2) {
      throw ShapeError("forward: input must be [L] or [B, L], got " +
                       to_string(x.shape));
    }
    if (masks) check_masks(*masks);
    const bool single = x.rank() == 1;
    const std::size_t batch = single ? 1 : x.shape[0];
    const std::size_t len = x.shape.back();
    const std::size_t d = arch_.hidden_size;
    const std::size_t dh = arch_.head_dim;
    auto P = [&](Parameter<T>& p) { return tape.param(p, requires_grad); };

    Var<T> h = tape.constant(Tensor<T>(Shape{batch, 1, len}, x.data));
    for (std::size_t k = 0; k < conv_.size(); ++k) {
      auto& b = conv_[k];
      const auto& spec = arch_.conv[k];
      const std::size_t c = spec.out_channels;
      h = conv1d(h, P(b.weight), spec.stride, spec.kernel / 2);
      h = h + reshape(P(b.bias), {c, 1});
      h = layer_norm(h, -1);
      h = h * reshape(P(b.norm_weight), {c, 1}) +
          reshape(P(b.norm_bias), {c, 1});
      h = gelu(h);
      if (masks) h = h * reshape(masks->conv[k], {c, 1});
    }
    const std::size_t frames = h.shape().back();
    h = transpose(h, 1, 2);  // [B, T, C]
    h = matmul(h, P(proj_weight_)) + P(proj_bias_);
    h = h + tape.constant(detail::sinusoid_table(frames, d).cast<T>());

    std::vector<Var<T>> states{h};
    const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      auto& blk = layers_[i];
      if (blk.attn) {
        auto& a = *blk.attn;
        const std::size_t nh = arch_.layers[i].heads;
        Var<T> n = layer_norm(h, -1) * P(a.norm_weight) + P(a.norm_bias);
        auto heads = [&](Parameter<T>& w, Parameter<T>& bias) {
          Var<T> p = matmul(n, P(w)) + P(bias);
          return transpose(reshape(p, {batch, frames, nh, dh}), 1, 2);
        };
        Var<T> q = heads(a.q_weight, a.q_bias);
        Var<T> kk = heads(a.k_weight, a.k_bias);
        Var<T> v = heads(a.v_weight, a.v_bias);
        Var<T> att = softmax(matmul(q, transpose(kk, 2, 3)) * scale, -1);
        Var<T> ctx = matmul(att, v);  // [B, h, T, dh]
        if (masks) ctx = ctx * reshape(masks->heads[i], {nh, 1, 1});
        ctx = reshape(transpose(ctx, 1, 2), {batch, frames, nh * dh});
        h = h + matmul(ctx, P(a.o_weight));
      }
      if (blk.ffn) {
        auto& f = *blk.ffn;
        Var<T> n = layer_norm(h, -1) * P(f.norm_weight) + P(f.norm_bias);
        Var<T> u = gelu(matmul(n, P(f.fc1_weight)) + P(f.fc1_bias));
        if (masks) u = u * masks->ffn[i];
        h = h + matmul(u, P(f.fc2_weight));
      }
      states.push_back(h);
    }
    if (single) {
      for (auto& s : states) s = reshape(s, {frames, d});
    }
    return states;
  }

  /// Gate group sizes, in GroupMasks order.
  GroupMasks unit_masks() const {
    GroupMasks m;
    for (const auto& c : arch_.conv) m.conv.emplace_back(c.out_channels, 1.0);
    for (const auto& s : arch_.layers) {
      m.heads.emplace_back(s.heads, 1.0);
      m.ffn.emplace_back(s.ffn, 1.0);
    }
    return m;
  }

 private:
  void check_masks(const GroupValues<Var<T>>& m) const {
    try {
      detail::check_layout(m, arch_.layout(), "forward");
    } catch (const ShapeError& e) {
      throw ShapeError(std::string("forward: mask/group count mismatch (") +
                       e.what() + ")");
    }
  }

  EncoderArch arch_;
  std::vector<ConvBlock<T>> conv_;
  Parameter<T> proj_weight_;
  Parameter<T> proj_bias_;
  std::vector<TransformerBlock<T>> layers_;
};

/// Records constant masks on the tape.
template <typename T>
GroupValues<Var<T>> constant_masks(Tape<T>& tape, const GroupMasks& masks) {
  GroupValues<Var<T>> out;
  auto put = [&](const std::vector<std::vector<double>>& sets,
                 std::vector<Var<T>>& dst) {
    for (const auto& s : sets) {
      dst.push_back(tape.constant(
          Tensor<T>(Shape{s.size()}, std::vector<T>(s.begin(), s.end()))));
    }
  };
  put(masks.conv, out.conv);
  put(masks.heads, out.heads);
  put(masks.ffn, out.ffn);
  return out;
}

/// The prunable copy of the encoder: parameters plus one gate set per conv
/// layer, per attention block and per FFN block.
template <typename T>
struct GatedStudent {
  Encoder<T> model;
  std::vector<HardConcreteGateSet<T>> conv_gates;
  std::vector<HardConcreteGateSet<T>> head_gates;
  std::vector<HardConcreteGateSet<T>> ffn_gates;

  std::size_t group_count() const {
    std::size_t n = 0;
    for (const auto* sets : {&conv_gates, &head_gates, &ffn_gates}) {
      for (const auto& g : *sets) n += g.group_count();
    }
    return n;
  }

  template <typename F>
  void visit_gates(F&& f) {
    for (auto* sets : {&conv_gates, &head_gates, &ffn_gates}) {
      for (auto& g : *sets) f(g);
    }
  }

  /// Inference-time masks from the current log alphas.
  GroupMasks deterministic_masks() const {
    GroupMasks m;
    for (const auto& g : conv_gates) m.conv.push_back(deterministic_mask(g));
    for (const auto& g : head_gates) m.heads.push_back(deterministic_mask(g));
    for (const auto& g : ffn_gates) m.ffn.push_back(deterministic_mask(g));
    return m;
  }

  GroupMasks keep_probabilities() const {
    GroupMasks m;
    for (const auto& g : conv_gates) m.conv.push_back(prob_nonzero_values(g));
    for (const auto& g : head_gates) m.heads.push_back(prob_nonzero_values(g));
    for (const auto& g : ffn_gates) m.ffn.push_back(prob_nonzero_values(g));
    return m;
  }
};

/// Copies the teacher and opens every gate (log alpha = init_log_alpha).
template <typename T>
GatedStudent<T> init_student_from_teacher(const Encoder<T>& teacher,
                                          const HardConcreteParams& hp = {}) {
  GatedStudent<T> s{teacher, {}, {}, {}};
  const auto& arch = teacher.arch();
  for (std::size_t k = 0; k < arch.conv.size(); ++k) {
    s.conv_gates.emplace_back("gate.conv." + std::to_string(k) + ".log_alpha",
                              arch.conv[k].out_channels, hp);
  }
  for (std::size_t i = 0; i < arch.layers.size(); ++i) {
    s.head_gates.emplace_back("gate.heads." + std::to_string(i) + ".log_alpha",
                              arch.layers[i].heads, hp);
    s.ffn_gates.emplace_back("gate.ffn." + std::to_string(i) + ".log_alpha",
                             arch.layers[i].ffn, hp);
  }
  return s;
}

/// Order-sensitive FNV-1a digest of all parameter bits.
template <typename T>
std::uint64_t parameter_checksum(const Encoder<T>& model) {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&](const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= p[i];
      h *= 1099511628211ULL;
    }
  };
  model.visit([&](const Parameter<T>& p) {
    mix(p.name.data(), p.name.size());
    mix(p.value.data.data(), p.value.size() * sizeof(T));
  });
  return h;
}

/// Converts every parameter to another element type.
template <typename U, typename T>
Encoder<U> cast_encoder(const Encoder<T>& src) {
  Encoder<U> dst(src.arch());
  std::vector<const Parameter<T>*> from;
  src.visit([&](const Parameter<T>& p) { from.push_back(&p); });
  std::size_t i = 0;
  dst.visit([&](Parameter<U>& p) {
    p.value = from[i++]->value.template cast<U>();
    p.zero_grad();
  });
  return dst;
}

}  // namespace distilprune
