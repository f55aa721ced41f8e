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

#include "distilprune/extractor.hpp"

namespace dp = distilprune;

namespace {

// About a third of groups dead, a third fractional, the rest fully open.
// Conv layers always keep at least one channel.
dp::GroupMasks mixed_masks(const dp::GroupMasks& shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  dp::GroupMasks m = shape;
  auto fill = [&](std::vector<double>& v) {
    for (double& x : v) {
      const double r = u(rng);
      x = r < 0.33 ? 0.0 : r < 0.66 ? 0.05 + 0.9 * u(rng) : 1.0;
    }
  };
  for (auto& v : m.conv) {
    fill(v);
    v[0] = 1.0;
  }
  for (auto& v : m.heads) fill(v);
  for (auto& v : m.ffn) fill(v);
  return m;
}

std::vector<std::pair<std::string, dp::Tensor<double>>> params_of(const dp::Encoder<double>& m) {
  std::vector<std::pair<std::string, dp::Tensor<double>>> out;
  m.visit([&](const dp::Parameter<double>& p) { out.emplace_back(p.name, p.value); });
  return out;
}

}  // namespace

TEST(Extract, UnitMasksKeepEveryParameter) {
  const auto m = dp::Encoder<double>::random(dp::EncoderConfig::toy(), 1);
  const auto ex = dp::extract(m, m.unit_masks());
  EXPECT_EQ(ex.model.arch(), m.arch());
  EXPECT_EQ(params_of(ex.model), params_of(m));
  EXPECT_EQ(ex.arch.params_gated, ex.arch.params_gated_original);
}

TEST(Extract, EquivalentToMaskedForwardInDoublePrecision) {
  const auto m = dp::Encoder<double>::random(dp::EncoderConfig::toy(), 2);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto masks = mixed_masks(m.unit_masks(), seed);
    const auto ex = dp::extract(m, masks);
    const auto r = dp::verify_equivalence(m, masks, ex.model, 20, 1e-10, seed);
    EXPECT_TRUE(r.passed) << "max abs " << r.max_abs;
  }
}

TEST(Extract, EquivalentToMaskedForwardInSinglePrecision) {
  const auto m = dp::cast_encoder<float>(dp::Encoder<double>::random(dp::EncoderConfig::toy(), 3));
  const auto masks = mixed_masks(m.unit_masks(), 9);
  const auto ex = dp::extract(m, masks);
  const auto r = dp::verify_equivalence(m, masks, ex.model, 100, 1e-5);
  EXPECT_TRUE(r.passed) << "max abs " << r.max_abs;
  EXPECT_EQ(r.inputs, 100u);
}

TEST(Extract, ParameterCountMatchesDiscreteCount) {
  const auto m = dp::Encoder<double>::random(dp::EncoderConfig::toy(), 4);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto masks = mixed_masks(m.unit_masks(), seed);
    const auto ex = dp::extract(m, masks);
    EXPECT_EQ(ex.model.gated_param_count(),
              dp::discrete_param_count(dp::binarize(masks), m.arch().layout()));
    EXPECT_EQ(ex.arch.params_gated, ex.model.gated_param_count());
    EXPECT_EQ(ex.model.gated_param_count(), ex.model.arch().layout().total_prunable());
    for (std::size_t k = 0; k < masks.conv.size(); ++k) {
      EXPECT_LE(ex.arch.conv_channels[k], ex.arch.conv_original[k]);
    }
  }
}

TEST(Extract, DeadHeadsRemoveAttentionBlock) {
  const auto m = dp::Encoder<double>::random(dp::EncoderConfig::toy(), 5);
  auto masks = m.unit_masks();
  std::fill(masks.heads[5].begin(), masks.heads[5].end(), 0.0);
  std::fill(masks.ffn[4].begin(), masks.ffn[4].end(), 0.0);
  const auto ex = dp::extract(m, masks);
  EXPECT_FALSE(ex.model.layers()[5].attn.has_value());
  EXPECT_TRUE(ex.model.layers()[5].ffn.has_value());
  EXPECT_FALSE(ex.model.layers()[4].ffn.has_value());
  EXPECT_EQ(ex.arch.heads[5], 0u);
  EXPECT_EQ(ex.arch.ffn[5], 64u);
  const auto text = dp::report_architecture(ex.arch, dp::ReportFormat::kText);
  EXPECT_NE(text.find("0/4"), std::string::npos);
  EXPECT_TRUE(dp::verify_equivalence(m, masks, ex.model, 5, 1e-10).passed);
}

TEST(Extract, DeadConvLayerIsAnError) {
  const auto m = dp::Encoder<double>::random(dp::EncoderConfig::toy(), 6);
  auto masks = m.unit_masks();
  std::fill(masks.conv[1].begin(), masks.conv[1].end(), 0.0);
  try {
    dp::extract(m, masks);
    FAIL() << "expected ExtractionError";
  } catch (const dp::ExtractionError& e) {
    EXPECT_NE(std::string(e.what()).find("conv layer 1"), std::string::npos) << e.what();
  }
}

TEST(Extract, Idempotent) {
  const auto m = dp::Encoder<double>::random(dp::EncoderConfig::toy(), 7);
  const auto once = dp::extract(m, mixed_masks(m.unit_masks(), 3));
  const auto twice = dp::extract(once.model, once.model.unit_masks());
  EXPECT_EQ(twice.model.arch(), once.model.arch());
  EXPECT_EQ(params_of(twice.model), params_of(once.model));
}

TEST(Verify, DetectsSkippedFold) {
  const auto m = dp::Encoder<double>::random(dp::EncoderConfig::toy(), 8);
  auto masks = m.unit_masks();
  masks.ffn[2][7] = 0.4;
  const auto folded = dp::extract(m, masks);
  EXPECT_TRUE(dp::verify_equivalence(m, masks, folded.model, 10, 1e-5).passed);
  const auto unfolded = dp::extract(m, masks, {.fold = false});
  const auto r = dp::verify_equivalence(m, masks, unfolded.model, 10, 1e-5);
  EXPECT_FALSE(r.passed);
  EXPECT_GT(r.max_abs, 1e-5);
}

TEST(Verify, ModelAgainstItself) {
  const auto m = dp::Encoder<double>::random(dp::EncoderConfig::micro(), 9);
  const auto r = dp::verify_equivalence(m, m.unit_masks(), m, 10, 1e-12, 0, 8);
  EXPECT_EQ(r.max_abs, 0.0);
  EXPECT_TRUE(r.passed);
}

TEST(Report, UnprunedToyShowsFullCounts) {
  const auto m = dp::Encoder<double>::random(dp::EncoderConfig::toy(), 10);
  const auto a = dp::describe(m, m);
  const auto csv = dp::report_architecture(a, dp::ReportFormat::kCsv);
  EXPECT_NE(csv.find("conv,2,16,16\n"), std::string::npos);
  EXPECT_NE(csv.find("heads,5,4,4\n"), std::string::npos);
  EXPECT_NE(csv.find("ffn,0,64,64\n"), std::string::npos);
  const auto text = dp::report_architecture(a, dp::ReportFormat::kText);
  EXPECT_NE(text.find("16/16"), std::string::npos);
  EXPECT_NE(text.find("64/64"), std::string::npos);
}

TEST(Report, CsvRoundTrip) {
  const auto m = dp::Encoder<double>::random(dp::EncoderConfig::toy(), 11);
  const auto ex = dp::extract(m, mixed_masks(m.unit_masks(), 11));
  const auto csv = dp::report_architecture(ex.arch, dp::ReportFormat::kCsv);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), dp::kArchitectureHeader);
  EXPECT_EQ(dp::parse_architecture_csv(csv), ex.arch);
}

TEST(Report, ParseRejectsMalformedInput) {
  EXPECT_THROW(dp::parse_architecture_csv("nope\n"), dp::IoError);
  const std::string h = std::string(dp::kArchitectureHeader) + "\n";
  EXPECT_THROW(dp::parse_architecture_csv(h + "conv,0,3\n"), dp::IoError);
  EXPECT_THROW(dp::parse_architecture_csv(h + "conv,1,3,4\n"), dp::IoError);
  EXPECT_THROW(dp::parse_architecture_csv(h + "conv,0,x,4\n"), dp::IoError);
}
