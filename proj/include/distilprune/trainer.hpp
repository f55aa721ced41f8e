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

// Two-step compression.
//
// Step 1 solves   max_{l1, l2} min_{theta, alpha, W}
//                   L_distill + l1 (s - t) + l2 (s - t)^2
// with stochastic Hard Concrete masks (one draw per batch), descending on the
// model, gates and projections and ascending on the multipliers. The target
// t ramps linearly to t_final.
//
// Step 2 freezes the masks at their deterministic values and minimizes the
// distillation loss alone.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "distilprune/autograd.hpp"
#include "distilprune/data.hpp"
#include "distilprune/distillation.hpp"
#include "distilprune/encoder.hpp"
#include "distilprune/errors.hpp"
#include "distilprune/hard_concrete.hpp"
#include "distilprune/optim.hpp"
#include "distilprune/sparsity.hpp"

namespace distilprune {

struct Step1Recipe {
  std::size_t total_steps = 3000;
  std::size_t warmup_steps = 900;
  double main_lr = 2e-4;
  double aux_lr = 1e-1;
  std::size_t ramp_steps = 300;
  double t_final = 0.5;
};

struct Step2Recipe {
  std::size_t total_steps = 1500;
  std::size_t warmup_steps = 300;
  double main_lr = 1e-4;
};

struct TrainRecipe {
  Step1Recipe step1;
  Step2Recipe step2;
  std::size_t batch_size = 8;
  std::size_t seq_len = 64;
  std::uint64_t seed = 0;
  DistillMode distill_mode = DistillMode::kLayerToLayer;
  bool prune_conv = true;
  // Plain SGD here turns the multiplier update into bare gradient ascent.
  OptimizerKind aux_optimizer = OptimizerKind::kAdam;

  void validate() const {
    if (step1.warmup_steps > step1.total_steps) {
      throw ConfigError("recipe: step1 warmup_steps exceeds total_steps");
    }
    if (step2.warmup_steps > step2.total_steps) {
      throw ConfigError("recipe: step2 warmup_steps exceeds total_steps");
    }
    if (!(step1.main_lr > 0.0) || !(step1.aux_lr > 0.0) ||
        !(step2.main_lr > 0.0)) {
      throw ConfigError("recipe: learning rates must be > 0");
    }
    if (!(step1.t_final >= 0.0 && step1.t_final < 1.0)) {
      throw ConfigError("recipe: t_final must lie in [0, 1)");
    }
    if (batch_size == 0 || seq_len == 0) {
      throw ConfigError("recipe: batch_size and seq_len must be > 0");
    }
  }
};

/// Linear warmup 0 -> peak over [0, warmup], then linear decay to 0 at total.
inline double lr_at(std::size_t step, std::size_t warmup, std::size_t total,
                    double peak) {
  if (step >= total) return 0.0;
  if (step < warmup) {
    return peak * static_cast<double>(step) / static_cast<double>(warmup);
  }
  if (total == warmup) return peak;
  return peak * static_cast<double>(total - step) /
         static_cast<double>(total - warmup);
}

struct MetricsRow {
  std::size_t step = 0;
  std::string phase;
  double distill_loss = 0.0;
  double sparsity = 0.0;
  double target = 0.0;
  double lambda1 = 0.0;
  double lambda2 = 0.0;
  double lr_main = 0.0;
  double lr_aux = 0.0;
  double total_loss = 0.0;  // not part of the CSV log
};

inline constexpr const char* kMetricsHeader =
    "step,phase,distill_loss,sparsity,target,lambda1,lambda2,lr_main,lr_aux";

inline std::string format_metrics_row(const MetricsRow& r) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%zu,%s,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g",
                r.step, r.phase.c_str(), r.distill_loss, r.sparsity, r.target,
                r.lambda1, r.lambda2, r.lr_main, r.lr_aux);
  return buf;
}

inline std::string format_metrics_csv(const std::vector<MetricsRow>& rows) {
  std::string out = std::string(kMetricsHeader) + "\n";
  for (const auto& r : rows) out += format_metrics_row(r) + "\n";
  return out;
}

/// Mean of `distill_loss` over the last `fraction` of the rows of `phase`.
inline double tail_mean_loss(const std::vector<MetricsRow>& log,
                             const std::string& phase, double fraction = 0.1) {
  std::vector<double> v;
  for (const auto& r : log) {
    if (r.phase == phase) v.push_back(r.distill_loss);
  }
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  const auto n = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::ceil(fraction * v.size())));
  double s = 0.0;
  for (std::size_t i = v.size() - n; i < v.size(); ++i) s += v[i];
  return s / static_cast<double>(n);
}

/// Per-group uniforms, laid out like the gate sets.
using GateNoise = GroupMasks;

/// Everything Step 1 and Step 2 mutate. Holds raw pointers into itself (the
/// optimizers), so it is neither copyable nor movable.
template <typename T>
class Trainer {
 public:
  struct Objective {
    Var<T> total;
    Var<T> distill;
    Var<T> sparsity;
  };

  Trainer(TrainRecipe recipe, Encoder<T> teacher, const HardConcreteParams& hp,
          std::vector<std::size_t> distill_layers, double l1_weight = 1.0,
          double cos_weight = 1.0)
      : recipe_(recipe),
        teacher_(std::move(teacher)),
        student_(init_student_from_teacher(teacher_, hp)),
        gate_rng_(keyed_rng(recipe.seed, kGateStream, 0)) {
    recipe_.validate();
    const auto& arch = teacher_.arch();
    spec_ = DistillSpec<T>::identity(std::move(distill_layers),
                                     arch.hidden_size, arch.hidden_size,
                                     arch.layers.size());
    spec_.l1_weight = l1_weight;
    spec_.cos_weight = cos_weight;
    controller_.t_final = recipe_.step1.t_final;
    controller_.ramp_steps = recipe_.step1.ramp_steps;
    controller_.layout = arch.layout();

    std::vector<Parameter<T>*> main;
    student_.model.visit([&](Parameter<T>& p) { main.push_back(&p); });
    for (auto& w : spec_.projections) main.push_back(&w);
    main_opt_ = Optimizer<T>(std::move(main));

    std::vector<Parameter<T>*> gates;
    if (recipe_.prune_conv) {
      for (auto& g : student_.conv_gates) gates.push_back(&g.log_alpha);
    }
    for (auto& g : student_.head_gates) gates.push_back(&g.log_alpha);
    for (auto& g : student_.ffn_gates) gates.push_back(&g.log_alpha);
    typename Optimizer<T>::Settings aux;
    aux.kind = recipe_.aux_optimizer;
    gate_opt_ = Optimizer<T>(std::move(gates), aux);
    lambda_opt_ = Optimizer<T>({&controller_.lambda1, &controller_.lambda2}, aux);
  }

  Trainer(const Trainer&) = delete;
  Trainer& operator=(const Trainer&) = delete;

  const TrainRecipe& recipe() const { return recipe_; }
  const Encoder<T>& teacher() const { return teacher_; }
  GatedStudent<T>& student() { return student_; }
  const GatedStudent<T>& student() const { return student_; }
  DistillSpec<T>& spec() { return spec_; }
  SparsityController<T>& controller() { return controller_; }
  const SparsityController<T>& controller() const { return controller_; }
  const std::vector<MetricsRow>& log() const { return log_; }
  bool masks_frozen() const { return frozen_.has_value(); }

  /// Draws one uniform per gate group for the next batch.
  GateNoise draw_noise() {
    GateNoise n;
    for (const auto& g : student_.conv_gates) {
      n.conv.push_back(draw_uniform(gate_rng_, g.group_count()));
    }
    for (const auto& g : student_.head_gates) {
      n.heads.push_back(draw_uniform(gate_rng_, g.group_count()));
    }
    for (const auto& g : student_.ffn_gates) {
      n.ffn.push_back(draw_uniform(gate_rng_, g.group_count()));
    }
    return n;
  }

  /// Records the Step-1 objective for `batch` with the given gate noise.
  Objective build_step1_objective(Tape<T>& tape, const Tensor<T>& batch,
                                  double target, const GateNoise& noise) {
    GroupValues<Var<T>> masks;
    GroupValues<Var<T>> probs;
    for (std::size_t k = 0; k < student_.conv_gates.size(); ++k) {
      auto& g = student_.conv_gates[k];
      if (recipe_.prune_conv) {
        masks.conv.push_back(
            sample_mask_with_noise(tape, g, noise.conv[k]).z);
        probs.conv.push_back(prob_nonzero(tape, g));
      } else {
        Var<T> ones = tape.constant(Tensor<T>(Shape{g.group_count()}, T{1}));
        masks.conv.push_back(ones);
        probs.conv.push_back(ones);
      }
    }
    for (std::size_t i = 0; i < student_.head_gates.size(); ++i) {
      auto& hg = student_.head_gates[i];
      auto& fg = student_.ffn_gates[i];
      masks.heads.push_back(sample_mask_with_noise(tape, hg, noise.heads[i]).z);
      masks.ffn.push_back(sample_mask_with_noise(tape, fg, noise.ffn[i]).z);
      probs.heads.push_back(prob_nonzero(tape, hg));
      probs.ffn.push_back(prob_nonzero(tape, fg));
    }
    auto teacher_states = teacher_.forward(tape, batch, nullptr, false);
    auto student_states = student_.model.forward(tape, batch, &masks);
    Objective obj;
    obj.distill =
        distill_loss(recipe_.distill_mode, teacher_states, student_states, spec_);
    obj.sparsity = current_sparsity(probs, controller_.layout, tape);
    Var<T> penalty = lagrangian_penalty(obj.sparsity, static_cast<T>(target),
                                        tape.param(controller_.lambda1),
                                        tape.param(controller_.lambda2));
    obj.total = obj.distill + penalty;
    return obj;
  }

  /// One minimax update. `step` indexes the Step-1 schedule.
  MetricsRow train_step1(const Tensor<T>& batch, std::size_t step) {
    if (frozen_) throw std::logic_error("train_step1: masks already frozen");
    const auto& r = recipe_.step1;
    MetricsRow row;
    row.step = step;
    row.phase = "step1";
    row.target = controller_.target(step);
    row.lambda1 = controller_.lambda1.value[0];
    row.lambda2 = controller_.lambda2.value[0];
    row.lr_main = lr_at(step, r.warmup_steps, r.total_steps, r.main_lr);
    row.lr_aux = lr_at(step, r.warmup_steps, r.total_steps, r.aux_lr);

    const GateNoise noise = draw_noise();
    Tape<T> tape(false);
    Objective obj = build_step1_objective(tape, batch, row.target, noise);
    row.distill_loss = obj.distill.item();
    row.sparsity = obj.sparsity.item();
    row.total_loss = obj.total.item();
    if (!std::isfinite(row.total_loss)) {
      throw NumericError("step1 at step " + std::to_string(step) +
                         ": non-finite loss; " + gate_statistics());
    }
    main_opt_.zero_grad();
    gate_opt_.zero_grad();
    lambda_opt_.zero_grad();
    tape.backward(obj.total);
    main_opt_.step(row.lr_main);
    gate_opt_.step(row.lr_aux);
    lambda_opt_.step(row.lr_aux, Direction::kAscend);
    log_.push_back(row);
    return row;
  }

  /// Fixes the masks at their deterministic values for Step 2.
  void freeze_masks() {
    GroupMasks m = student_.deterministic_masks();
    if (!recipe_.prune_conv) {
      for (auto& c : m.conv) std::fill(c.begin(), c.end(), 1.0);
    }
    frozen_ = std::move(m);
  }

  /// Masks in effect for inference: frozen ones after Step 1, otherwise the
  /// current deterministic masks.
  GroupMasks inference_masks() const {
    if (frozen_) return *frozen_;
    GroupMasks m = student_.deterministic_masks();
    if (!recipe_.prune_conv) {
      for (auto& c : m.conv) std::fill(c.begin(), c.end(), 1.0);
    }
    return m;
  }

  /// Fraction of gated parameters whose groups have a zero inference mask.
  double deterministic_sparsity() const {
    const auto& layout = controller_.layout;
    const double total = static_cast<double>(layout.total_prunable());
    const auto kept = discrete_param_count(binarize(inference_masks()), layout);
    return 1.0 - static_cast<double>(kept) / total;
  }

  /// Distillation loss of the frozen-mask student on `batch`.
  Objective build_step2_objective(Tape<T>& tape, const Tensor<T>& batch) {
    if (!frozen_) throw std::logic_error("step2: masks are not frozen");
    auto masks = constant_masks(tape, *frozen_);
    // Gates enter as constants; touch them so their gradient is defined (0).
    student_.visit_gates([&](HardConcreteGateSet<T>& g) { g.log_alpha.zero_grad(); });
    auto teacher_states = teacher_.forward(tape, batch, nullptr, false);
    auto student_states = student_.model.forward(tape, batch, &masks);
    Objective obj;
    obj.distill =
        distill_loss(recipe_.distill_mode, teacher_states, student_states, spec_);
    obj.total = obj.distill;
    obj.sparsity = tape.scalar(static_cast<T>(deterministic_sparsity()));
    return obj;
  }

  MetricsRow train_step2(const Tensor<T>& batch, std::size_t step) {
    const auto& r = recipe_.step2;
    MetricsRow row;
    row.step = step;
    row.phase = "step2";
    row.target = controller_.t_final;
    row.lambda1 = controller_.lambda1.value[0];
    row.lambda2 = controller_.lambda2.value[0];
    row.lr_main = lr_at(step, r.warmup_steps, r.total_steps, r.main_lr);
    row.lr_aux = 0.0;
    Tape<T> tape(false);
    Objective obj = build_step2_objective(tape, batch);
    row.distill_loss = obj.distill.item();
    row.total_loss = row.distill_loss;
    row.sparsity = obj.sparsity.item();
    if (!std::isfinite(row.total_loss)) {
      throw NumericError("step2 at step " + std::to_string(step) +
                         ": non-finite loss; " + gate_statistics());
    }
    main_opt_.zero_grad();
    tape.backward(obj.total);
    main_opt_.step(row.lr_main);
    log_.push_back(row);
    return row;
  }

  /// Data index for Step-2 batches continues after Step 1.
  Tensor<T> batch_for(const std::string& phase, std::size_t step) const {
    const std::uint64_t index =
        phase == "step1" ? step : recipe_.step1.total_steps + step;
    return synth_batch<T>(recipe_.seed, index, recipe_.batch_size,
                          recipe_.seq_len);
  }

  void run_step1() {
    for (std::size_t s = 0; s < recipe_.step1.total_steps; ++s) {
      train_step1(batch_for("step1", s), s);
    }
  }

  void run_step2() {
    if (!frozen_) freeze_masks();
    for (std::size_t s = 0; s < recipe_.step2.total_steps; ++s) {
      train_step2(batch_for("step2", s), s);
    }
  }

  /// Step 1, freeze, Step 2.
  void run() {
    run_step1();
    freeze_masks();
    run_step2();
  }

  std::string gate_statistics() const {
    std::ostringstream os;
    auto dump = [&](const char* kind,
                    const std::vector<HardConcreteGateSet<T>>& sets) {
      for (std::size_t i = 0; i < sets.size(); ++i) {
        const auto& v = sets[i].log_alpha.value.data;
        if (v.empty()) continue;
        double lo = v[0], hi = v[0], mean = 0.0;
        for (T x : v) {
          lo = std::min<double>(lo, x);
          hi = std::max<double>(hi, x);
          mean += x;
        }
        mean /= static_cast<double>(v.size());
        os << kind << "[" << i << "] log_alpha min " << lo << " max " << hi
           << " mean " << mean << "; ";
      }
    };
    dump("conv", student_.conv_gates);
    dump("heads", student_.head_gates);
    dump("ffn", student_.ffn_gates);
    os << "lambda1 " << controller_.lambda1.value[0] << " lambda2 "
       << controller_.lambda2.value[0];
    return os.str();
  }

 private:
  TrainRecipe recipe_;
  Encoder<T> teacher_;
  GatedStudent<T> student_;
  DistillSpec<T> spec_;
  SparsityController<T> controller_;
  Optimizer<T> main_opt_;
  Optimizer<T> gate_opt_;
  Optimizer<T> lambda_opt_;
  std::mt19937_64 gate_rng_;
  std::optional<GroupMasks> frozen_;
  std::vector<MetricsRow> log_;
};

/// Builds a trainer for `teacher` and runs both steps.
template <typename T>
std::unique_ptr<Trainer<T>> run_two_step(
    const TrainRecipe& recipe, const Encoder<T>& teacher,
    const HardConcreteParams& hp, const std::vector<std::size_t>& layers,
    double l1_weight = 1.0, double cos_weight = 1.0) {
  auto trainer = std::make_unique<Trainer<T>>(recipe, teacher, hp, layers,
                                              l1_weight, cos_weight);
  trainer->run();
  return trainer;
}

/// Default matched layers: the conv output plus every N/3-th layer.
inline std::vector<std::size_t> default_distill_layers(std::size_t num_layers) {
  std::vector<std::size_t> s{0};
  const std::size_t stride = std::max<std::size_t>(1, num_layers / 3);
  for (std::size_t i = stride; i <= num_layers; i += stride) s.push_back(i);
  if (s.back() != num_layers) s.push_back(num_layers);
  return s;
}

}  // namespace distilprune
