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

// Run configuration as strict JSON. Every key is optional and falls back to
// the toy defaults; unknown keys and wrongly typed values are rejected.
//
// {
//   "schema": "distilprune.config.v1",
//   "encoder":    { "conv_layers": [{"channels": 16, "kernel": 5, "stride": 2}, ...],
//                   "hidden_size": 32, "num_layers": 6, "num_heads": 4, "ffn_size": 64 },
//   "recipe":     { "step1": {"total_steps", "warmup_steps", "main_lr", "aux_lr"},
//                   "step2": {"total_steps", "warmup_steps", "main_lr"},
//                   "batch_size", "seq_len", "prune_conv" },
//   "distill":    { "mode": "layer_to_layer", "layers": [0, 2, 4, 6],
//                   "l1_weight": 1.0, "cos_weight": 1.0 },
//   "controller": { "beta", "stretch_lo", "stretch_hi", "init_log_alpha",
//                   "t_final", "ramp_steps" },
//   "io":         { "seed": 0, "teacher": "", "out_dir": "" }
// }

#pragma once

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "distilprune/distillation.hpp"
#include "distilprune/encoder.hpp"
#include "distilprune/errors.hpp"
#include "distilprune/hard_concrete.hpp"
#include "distilprune/trainer.hpp"

namespace distilprune {

inline constexpr const char* kConfigSchema = "distilprune.config.v1";

struct IoSettings {
  std::uint64_t seed = 0;
  std::string teacher;
  std::string out_dir;
};

struct RunConfig {
  EncoderConfig encoder;
  TrainRecipe recipe;
  std::vector<std::size_t> distill_layers{0, 2, 4, 6};
  double l1_weight = 1.0;
  double cos_weight = 1.0;
  HardConcreteParams gates;
  IoSettings io;

  /// Checks every cross-block invariant; throws ConfigError.
  void validate() const {
    encoder.validate();
    recipe.validate();
    gates.validate();
    DistillSpec<float>::validate_layers(distill_layers, encoder.num_layers);
    if (distill_layers.empty()) throw ConfigError("distill: layer set is empty");
    if (recipe.distill_mode == DistillMode::kPredictionLayer &&
        distill_layers.size() == 1 && distill_layers[0] == 0) {
      throw ConfigError("distill: prediction_layer needs a layer other than 0");
    }
    if (!(l1_weight >= 0.0) || !(cos_weight >= 0.0) ||
        l1_weight + cos_weight == 0.0) {
      throw ConfigError("distill: weights must be >= 0 and not both zero");
    }
    if (recipe.seq_len < encoder_min_samples()) {
      throw ConfigError("recipe: seq_len " + std::to_string(recipe.seq_len) +
                        " yields no frames");
    }
  }

  std::size_t encoder_min_samples() const {
    const EncoderArch a = EncoderArch::from_config(encoder);
    std::size_t n = 1;
    while (a.frames(n) == 0) ++n;
    return n;
  }
};

namespace detail {

using nlohmann::json;

class JsonReader {
 public:
  JsonReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) fail(path_, "expected an object");
  }

  ~JsonReader() noexcept(false) {
    if (std::uncaught_exceptions() > 0) return;
    for (const auto& [k, v] : j_.items()) {
      if (!seen_.count(k)) fail(path_ + "." + k, "unknown key");
    }
  }

  bool has(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key);
  }

  const json& at(const std::string& key) { return j_.at(key); }
  std::string where(const std::string& key) const { return path_ + "." + key; }

  void size(const std::string& key, std::size_t& out) {
    if (!has(key)) return;
    const json& v = j_.at(key);
    if (!v.is_number_integer() || v.get<std::int64_t>() < 0) {
      fail(where(key), "expected a non-negative integer");
    }
    out = v.get<std::size_t>();
  }

  void u64(const std::string& key, std::uint64_t& out) {
    if (!has(key)) return;
    const json& v = j_.at(key);
    if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<std::int64_t>() >= 0)) {
      fail(where(key), "expected a non-negative integer");
    }
    out = v.get<std::uint64_t>();
  }

  void real(const std::string& key, double& out) {
    if (!has(key)) return;
    const json& v = j_.at(key);
    if (!v.is_number()) fail(where(key), "expected a number");
    out = v.get<double>();
  }

  void boolean(const std::string& key, bool& out) {
    if (!has(key)) return;
    const json& v = j_.at(key);
    if (!v.is_boolean()) fail(where(key), "expected true or false");
    out = v.get<bool>();
  }

  void text(const std::string& key, std::string& out) {
    if (!has(key)) return;
    const json& v = j_.at(key);
    if (!v.is_string()) fail(where(key), "expected a string");
    out = v.get<std::string>();
  }

  [[noreturn]] static void fail(const std::string& where, const std::string& what) {
    throw ConfigError("config " + where + ": " + what);
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

}  // namespace detail

inline RunConfig config_from_json(const nlohmann::json& j) {
  using detail::JsonReader;
  RunConfig c;
  {
    JsonReader root(j, "$");
    std::string schema = kConfigSchema;
    root.text("schema", schema);
    if (schema != kConfigSchema) {
      JsonReader::fail("$.schema", "unsupported schema '" + schema + "'");
    }
    if (root.has("encoder")) {
      JsonReader e(root.at("encoder"), "$.encoder");
      if (e.has("conv_layers")) {
        const auto& arr = e.at("conv_layers");
        if (!arr.is_array()) JsonReader::fail("$.encoder.conv_layers", "expected an array");
        c.encoder.conv_layers.clear();
        for (std::size_t k = 0; k < arr.size(); ++k) {
          JsonReader l(arr[k], "$.encoder.conv_layers[" + std::to_string(k) + "]");
          ConvLayerSpec spec;
          l.size("channels", spec.out_channels);
          l.size("kernel", spec.kernel);
          l.size("stride", spec.stride);
          c.encoder.conv_layers.push_back(spec);
        }
      }
      e.size("hidden_size", c.encoder.hidden_size);
      e.size("num_layers", c.encoder.num_layers);
      e.size("num_heads", c.encoder.num_heads);
      e.size("ffn_size", c.encoder.ffn_size);
    }
    if (root.has("recipe")) {
      JsonReader r(root.at("recipe"), "$.recipe");
      if (r.has("step1")) {
        JsonReader s(r.at("step1"), "$.recipe.step1");
        s.size("total_steps", c.recipe.step1.total_steps);
        s.size("warmup_steps", c.recipe.step1.warmup_steps);
        s.real("main_lr", c.recipe.step1.main_lr);
        s.real("aux_lr", c.recipe.step1.aux_lr);
      }
      if (r.has("step2")) {
        JsonReader s(r.at("step2"), "$.recipe.step2");
        s.size("total_steps", c.recipe.step2.total_steps);
        s.size("warmup_steps", c.recipe.step2.warmup_steps);
        s.real("main_lr", c.recipe.step2.main_lr);
      }
      r.size("batch_size", c.recipe.batch_size);
      r.size("seq_len", c.recipe.seq_len);
      r.boolean("prune_conv", c.recipe.prune_conv);
    }
    if (root.has("distill")) {
      JsonReader d(root.at("distill"), "$.distill");
      std::string mode = to_string(c.recipe.distill_mode);
      d.text("mode", mode);
      c.recipe.distill_mode = parse_distill_mode(mode);
      if (d.has("layers")) {
        const auto& arr = d.at("layers");
        if (!arr.is_array()) JsonReader::fail("$.distill.layers", "expected an array");
        c.distill_layers.clear();
        for (const auto& v : arr) {
          if (!v.is_number_integer() || v.get<std::int64_t>() < 0) {
            JsonReader::fail("$.distill.layers", "expected non-negative integers");
          }
          c.distill_layers.push_back(v.get<std::size_t>());
        }
      }
      d.real("l1_weight", c.l1_weight);
      d.real("cos_weight", c.cos_weight);
    }
    if (root.has("controller")) {
      JsonReader g(root.at("controller"), "$.controller");
      g.real("beta", c.gates.beta);
      g.real("stretch_lo", c.gates.stretch_lo);
      g.real("stretch_hi", c.gates.stretch_hi);
      g.real("init_log_alpha", c.gates.init_log_alpha);
      g.real("t_final", c.recipe.step1.t_final);
      g.size("ramp_steps", c.recipe.step1.ramp_steps);
    }
    if (root.has("io")) {
      JsonReader io(root.at("io"), "$.io");
      io.u64("seed", c.io.seed);
      io.text("teacher", c.io.teacher);
      io.text("out_dir", c.io.out_dir);
    }
  }
  c.recipe.seed = c.io.seed;
  c.validate();
  return c;
}

inline RunConfig parse_config(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("config: invalid JSON: ") + e.what());
  }
  return config_from_json(j);
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config '" + path + "'");
  return parse_config(std::string((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>()));
}

inline nlohmann::json encoder_to_json(const EncoderConfig& e) {
  nlohmann::json conv = nlohmann::json::array();
  for (const auto& l : e.conv_layers) {
    conv.push_back({{"channels", l.out_channels},
                    {"kernel", l.kernel},
                    {"stride", l.stride}});
  }
  return {{"conv_layers", conv},
          {"hidden_size", e.hidden_size},
          {"num_layers", e.num_layers},
          {"num_heads", e.num_heads},
          {"ffn_size", e.ffn_size}};
}

inline nlohmann::json config_to_json(const RunConfig& c) {
  const auto& r = c.recipe;
  return {
      {"schema", kConfigSchema},
      {"encoder", encoder_to_json(c.encoder)},
      {"recipe",
       {{"step1",
         {{"total_steps", r.step1.total_steps},
          {"warmup_steps", r.step1.warmup_steps},
          {"main_lr", r.step1.main_lr},
          {"aux_lr", r.step1.aux_lr}}},
        {"step2",
         {{"total_steps", r.step2.total_steps},
          {"warmup_steps", r.step2.warmup_steps},
          {"main_lr", r.step2.main_lr}}},
        {"batch_size", r.batch_size},
        {"seq_len", r.seq_len},
        {"prune_conv", r.prune_conv}}},
      {"distill",
       {{"mode", to_string(r.distill_mode)},
        {"layers", c.distill_layers},
        {"l1_weight", c.l1_weight},
        {"cos_weight", c.cos_weight}}},
      {"controller",
       {{"beta", c.gates.beta},
        {"stretch_lo", c.gates.stretch_lo},
        {"stretch_hi", c.gates.stretch_hi},
        {"init_log_alpha", c.gates.init_log_alpha},
        {"t_final", r.step1.t_final},
        {"ramp_steps", r.step1.ramp_steps}}},
      {"io", {{"seed", c.io.seed}, {"teacher", c.io.teacher}, {"out_dir", c.io.out_dir}}}};
}

/// 16 hex digits of FNV-1a over the canonical encoder block. Only the
/// architecture matters for whether a checkpoint fits a config.
inline std::string config_hash(const EncoderConfig& e) {
  const std::string s = encoder_to_json(e).dump();
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline nlohmann::json arch_to_json(const EncoderArch& a) {
  nlohmann::json conv = nlohmann::json::array();
  for (const auto& l : a.conv) conv.push_back({l.out_channels, l.kernel, l.stride});
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : a.layers) layers.push_back({l.heads, l.ffn});
  return {{"conv", conv},
          {"hidden_size", a.hidden_size},
          {"head_dim", a.head_dim},
          {"layers", layers}};
}

inline EncoderArch arch_from_json(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    EncoderArch a;
    for (const auto& l : j.at("conv")) {
      a.conv.push_back({l.at(0).get<std::size_t>(), l.at(1).get<std::size_t>(),
                        l.at(2).get<std::size_t>()});
    }
    a.hidden_size = j.at("hidden_size").get<std::size_t>();
    a.head_dim = j.at("head_dim").get<std::size_t>();
    for (const auto& l : j.at("layers")) {
      a.layers.push_back({l.at(0).get<std::size_t>(), l.at(1).get<std::size_t>()});
    }
    return a;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("checkpoint: bad architecture metadata: ") + e.what());
  }
}

}  // namespace distilprune
