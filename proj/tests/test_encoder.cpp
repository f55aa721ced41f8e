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

#include <gtest/gtest.h>

#include <random>

#include "distilprune/data.hpp"
#include "distilprune/encoder.hpp"

namespace dp = distilprune;
using Model = dp::Encoder<double>;

namespace {

std::vector<dp::Tensor<double>> run(Model& m, const dp::Tensor<double>& x,
                                    const dp::GroupMasks* masks = nullptr) {
  dp::Tape<double> tape(false);
  std::vector<dp::Var<double>> states;
  if (masks) {
    auto mv = dp::constant_masks(tape, *masks);
    states = m.forward(tape, x, &mv, false);
  } else {
    states = m.forward(tape, x, nullptr, false);
  }
  std::vector<dp::Tensor<double>> out;
  for (auto& s : states) out.push_back(s.value());
  return out;
}

double max_diff(const std::vector<dp::Tensor<double>>& a,
                const std::vector<dp::Tensor<double>>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (std::size_t j = 0; j < a[i].size(); ++j) m = std::max(m, std::abs(a[i][j] - b[i][j]));
  }
  return m;
}

dp::Tensor<double> signal(std::uint64_t seed, std::size_t len = 64) {
  return dp::synth_batch<double>(seed, 0, 2, len);
}

void scale_rows(dp::Parameter<double>& p, std::size_t row0, std::size_t rows, double z) {
  const std::size_t cols = p.value.size() / p.value.shape[0];
  for (std::size_t r = row0; r < row0 + rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) p.value[r * cols + c] *= z;
  }
}

void scale_cols(dp::Parameter<double>& p, std::size_t col0, std::size_t cols, double z) {
  const std::size_t width = p.value.shape.back();
  for (std::size_t r = 0; r < p.value.size() / width; ++r) {
    for (std::size_t c = col0; c < col0 + cols; ++c) p.value[r * width + c] *= z;
  }
}

// Scales the input slice of a conv kernel [C_out, C_in, K].
void scale_conv_input(dp::Parameter<double>& w, std::size_t channel, double z) {
  const auto& s = w.value.shape;
  for (std::size_t o = 0; o < s[0]; ++o) {
    for (std::size_t k = 0; k < s[2]; ++k) w.value[(o * s[1] + channel) * s[2] + k] *= z;
  }
}

}  // namespace

TEST(Config, ToyGroupCountAndFrames) {
  const auto arch = dp::EncoderArch::from_config(dp::EncoderConfig::toy());
  EXPECT_EQ(arch.layout().group_count(), 456u);
  EXPECT_EQ(arch.frames(64), 8u);
  EXPECT_EQ(dp::EncoderArch::from_config(dp::EncoderConfig::micro()).frames(8), 4u);
}

TEST(Config, RejectsIndivisibleHeads) {
  auto c = dp::EncoderConfig::toy();
  c.num_heads = 5;
  EXPECT_THROW(c.validate(), dp::ConfigError);
  c = dp::EncoderConfig::toy();
  c.conv_layers.clear();
  EXPECT_THROW(c.validate(), dp::ConfigError);
}

TEST(Config, GatedCountMatchesLayout) {
  auto m = Model::random(dp::EncoderConfig::toy(), 1);
  EXPECT_EQ(m.gated_param_count(), m.arch().layout().total_prunable());
  EXPECT_EQ(m.gated_param_count(), 52288u);
  EXPECT_GT(m.total_param_count(), m.gated_param_count());
}

TEST(Forward, ShapesOnToyConfig) {
  auto m = Model::random(dp::EncoderConfig::toy(), 2);
  dp::Tape<double> tape;
  const auto x = signal(1);
  auto states = m.forward(tape, x, nullptr, false);
  ASSERT_EQ(states.size(), 7u);
  for (auto& s : states) EXPECT_EQ(s.shape(), (dp::Shape{2, 8, 32}));
  dp::Tensor<double> one(dp::Shape{64}, std::vector<double>(x.data.begin(), x.data.begin() + 64));
  auto single = m.forward(tape, one, nullptr, false);
  EXPECT_EQ(single.back().shape(), (dp::Shape{8, 32}));
}

TEST(Forward, RejectsMaskMismatch) {
  auto m = Model::random(dp::EncoderConfig::micro(), 2);
  auto masks = m.unit_masks();
  masks.ffn[1].pop_back();
  dp::Tape<double> tape;
  auto mv = dp::constant_masks(tape, masks);
  EXPECT_THROW(m.forward(tape, signal(2, 8), &mv), dp::ShapeError);
}

TEST(Forward, UnitMasksChangeNothing) {
  auto m = Model::random(dp::EncoderConfig::toy(), 3);
  const auto x = signal(3);
  const auto masks = m.unit_masks();
  EXPECT_EQ(max_diff(run(m, x), run(m, x, &masks)), 0.0);
}

TEST(Forward, ZeroHeadsLeaveResidualPlusFfn) {
  auto m = Model::random(dp::EncoderConfig::toy(), 4);
  const auto x = signal(4);
  auto masks = m.unit_masks();
  std::fill(masks.heads[2].begin(), masks.heads[2].end(), 0.0);
  const auto masked = run(m, x, &masks);
  Model ref = m;
  ref.layers()[2].attn.reset();
  EXPECT_EQ(max_diff(masked, run(ref, x)), 0.0);
}

TEST(Forward, MaskingIsLinearInGroupParameters) {
  const auto x = signal(5);
  const double z = 0.37;
  auto base = Model::random(dp::EncoderConfig::toy(), 5);
  const std::size_t dh = base.arch().head_dim;
  {
    auto masks = base.unit_masks();
    masks.ffn[1][9] = z;
    Model surgery = base;
    scale_rows(surgery.layers()[1].ffn->fc2_weight, 9, 1, z);
    EXPECT_LT(max_diff(run(base, x, &masks), run(surgery, x)), 1e-12);
  }
  {
    auto masks = base.unit_masks();
    masks.heads[3][2] = z;
    Model surgery = base;
    scale_rows(surgery.layers()[3].attn->o_weight, 2 * dh, dh, z);
    EXPECT_LT(max_diff(run(base, x, &masks), run(surgery, x)), 1e-12);
  }
  {
    auto masks = base.unit_masks();
    masks.conv[0][4] = z;
    Model surgery = base;
    scale_conv_input(surgery.conv()[1].weight, 4, z);
    EXPECT_LT(max_diff(run(base, x, &masks), run(surgery, x)), 1e-12);
  }
  {
    auto masks = base.unit_masks();
    masks.conv[2][11] = z;
    Model surgery = base;
    scale_rows(surgery.proj_weight(), 11, 1, z);
    EXPECT_LT(max_diff(run(base, x, &masks), run(surgery, x)), 1e-12);
  }
}

TEST(Forward, ZeroMaskEqualsZeroedParameters) {
  const auto x = signal(6);
  auto base = Model::random(dp::EncoderConfig::toy(), 6);
  const std::size_t dh = base.arch().head_dim;
  auto masks = base.unit_masks();
  masks.ffn[0][3] = 0.0;
  masks.heads[4][1] = 0.0;
  Model surgery = base;
  auto& f = *surgery.layers()[0].ffn;
  scale_cols(f.fc1_weight, 3, 1, 0.0);
  f.fc1_bias.value[3] = 0.0;
  scale_rows(f.fc2_weight, 3, 1, 0.0);
  auto& a = *surgery.layers()[4].attn;
  for (auto* p : {&a.q_weight, &a.k_weight, &a.v_weight}) scale_cols(*p, dh, dh, 0.0);
  for (auto* p : {&a.q_bias, &a.k_bias, &a.v_bias}) scale_cols(*p, dh, dh, 0.0);
  scale_rows(a.o_weight, dh, dh, 0.0);
  EXPECT_EQ(max_diff(run(base, x, &masks), run(surgery, x)), 0.0);
}

TEST(Student, StartsIdenticalToTeacher) {
  const auto teacher = Model::random(dp::EncoderConfig::toy(), 7);
  auto student = dp::init_student_from_teacher(teacher);
  EXPECT_EQ(student.group_count(), 456u);
  EXPECT_EQ(student.head_gates.size(), 6u);
  EXPECT_EQ(student.ffn_gates.size(), 6u);
  for (const auto& g : student.head_gates) EXPECT_EQ(g.group_count(), 4u);
  for (const auto& g : student.ffn_gates) EXPECT_EQ(g.group_count(), 64u);
  const auto det = student.deterministic_masks();
  Model t = teacher;
  EXPECT_EQ(max_diff(run(t, signal(7)), run(student.model, signal(7), &det)), 0.0);
  EXPECT_EQ(dp::parameter_checksum(student.model), dp::parameter_checksum(teacher));
}

TEST(Student, EveryGateReceivesGradient) {
  auto student = dp::init_student_from_teacher(Model::random(dp::EncoderConfig::toy(), 8));
  student.visit_gates([](dp::HardConcreteGateSet<double>& g) {
    std::fill(g.log_alpha.value.data.begin(), g.log_alpha.value.data.end(), 0.0);
  });
  dp::Tape<double> tape;
  dp::GroupValues<dp::Var<double>> masks;
  // u = 0.5 keeps every z at 0.5, strictly inside the clamp.
  auto noise = [](auto& g) { return std::vector<double>(g.group_count(), 0.5); };
  for (auto& g : student.conv_gates) masks.conv.push_back(dp::sample_mask_with_noise(tape, g, noise(g)).z);
  for (auto& g : student.head_gates) masks.heads.push_back(dp::sample_mask_with_noise(tape, g, noise(g)).z);
  for (auto& g : student.ffn_gates) masks.ffn.push_back(dp::sample_mask_with_noise(tape, g, noise(g)).z);
  auto states = student.model.forward(tape, signal(8), &masks);
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n(0, 1);
  dp::Tensor<double> w(states.back().shape());
  for (double& v : w.data) v = n(rng);
  tape.backward(dp::sum(states.back() * tape.constant(w)));
  std::size_t zero = 0;
  student.visit_gates([&](dp::HardConcreteGateSet<double>& g) {
    for (double v : g.log_alpha.grad.data) zero += v == 0.0 ? 1 : 0;
  });
  EXPECT_EQ(zero, 0u);
}

TEST(Checksum, SensitiveToEveryParameterTensor) {
  auto m = Model::random(dp::EncoderConfig::micro(), 9);
  const auto before = dp::parameter_checksum(m);
  std::size_t changed = 0, total = 0;
  m.visit([&](dp::Parameter<double>& p) {
    ++total;
    const double keep = p.value[0];
    p.value[0] += 1e-9;
    changed += dp::parameter_checksum(m) != before ? 1 : 0;
    p.value[0] = keep;
  });
  EXPECT_EQ(changed, total);
  EXPECT_EQ(dp::parameter_checksum(m), before);
}

TEST(Cast, FloatRoundTripPreservesShapes) {
  const auto m = Model::random(dp::EncoderConfig::micro(), 10);
  const auto f = dp::cast_encoder<float>(m);
  EXPECT_EQ(f.arch(), m.arch());
  EXPECT_EQ(f.total_param_count(), m.total_param_count());
}
