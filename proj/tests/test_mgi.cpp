// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "mgilab/error.hpp"
#include "mgilab/mgi.hpp"
#include "mgilab/model.hpp"
#include "mgilab/rng.hpp"
#include "mgilab/synthetic.hpp"
#include "oracles.hpp"

using namespace mgilab;

namespace {

const std::vector<OutlierSample>& pool() {
  static const auto p = [] {
    PoolConfig c;
    c.count = 300;
    c.seed = 8;
    return generate_pool(c);
  }();
  return p;
}

struct Fixture {
  Episode episode;
  TokenizedEpisode tokens;
};

Fixture make(int shots, std::size_t query, Modality m = Modality::multimodal) {
  Fixture f;
  f.episode = assemble_episode(pool(), shots, query, m, 0);
  f.tokens = tokenize_episode(f.episode);
  return f;
}

Vector random_distribution(Rng& rng, int n) {
  Vector v(n);
  double total = 0;
  for (float& x : v) {
    x = static_cast<float>(rng.uniform01() + 1e-3);
    total += x;
  }
  for (float& x : v) x = static_cast<float>(x / total);
  return v;
}

double max_abs_diff(std::span<const float> a, std::span<const float> b) {
  double d = 0;
  for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, std::abs(double(a[i]) - b[i]));
  return d;
}

}  // namespace

// ---------------------------------------------------------------- attention set

TEST(AttentionSet, OneShotOneHeadShape) {
  const auto f = make(1, 0);
  const auto trace = synthetic::random_trace(2, 1, f.tokens.spans, 1);
  const auto set = collect_attention_set(trace, f.tokens.spans, 1);
  ASSERT_EQ(set.rows.size(), 1u);
  EXPECT_EQ(set.rows[0].size(), 16u);
}

TEST(AttentionSet, RowsEqualDirectIndexing) {
  Rng rng(4);
  for (int trial = 0; trial < 100; ++trial) {
    const auto f = make(1 + static_cast<int>(rng.below(4)), rng.below(pool().size()));
    const auto trace = synthetic::random_trace(3, 2, f.tokens.spans, trial);
    const int layer = static_cast<int>(rng.below(3));
    const auto set = collect_attention_set(trace, f.tokens.spans, layer);
    for (std::size_t i = 0; i < f.tokens.spans.demos.size(); ++i) {
      for (int h = 0; h < 2; ++h) {
        const auto expected = oracle::label_row(trace, f.tokens.spans, layer, h, i);
        const auto got = set.row(static_cast<int>(i), h);
        for (std::size_t j = 0; j < expected.size(); ++j) ASSERT_EQ(got[j], expected[j]);
      }
    }
  }
}

TEST(AttentionSet, ZeroImageAttentionGivesZeroRows) {
  const auto f = make(2, 1);
  auto trace = synthetic::uniform_trace(2, 2, f.tokens.spans);
  for (const auto& d : f.tokens.spans.demos) {
    const std::pair<int, float> peak[] = {{0, 1.0f}};
    for (int h = 0; h < 2; ++h) synthetic::plant_row(trace, 0, h, d.label.begin, peak);
  }
  const auto set = collect_attention_set(trace, f.tokens.spans, 0);
  for (const auto& row : set.rows) {
    for (float x : row) EXPECT_EQ(x, 0.0f);
  }
  // All-zero rows count as maximum entropy.
  const auto e = grounding_entropy_by_layer(trace, f.tokens.spans);
  EXPECT_NEAR(e[0], 2 * 2 * std::log(16.0), 1e-9);
}

TEST(AttentionSet, TextOnlyRejected) {
  const auto f = make(2, 1, Modality::text);
  const auto trace = synthetic::uniform_trace(2, 2, f.tokens.spans);
  try {
    collect_attention_set(trace, f.tokens.spans, 0);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_STREQ(e.what(), "no image spans");
  }
}

// ---------------------------------------------------------------- peak layer

TEST(PeakLayer, PlantedOneHotAtLayerThree) {
  const auto f = make(4, 2);
  auto trace = synthetic::uniform_trace(8, 4, f.tokens.spans);
  synthetic::plant_label_grounding(trace, f.episode, 3, 1.0f);
  EXPECT_EQ(peak_grounding_layer(trace, f.tokens.spans), 3);
}

TEST(PeakLayer, TiesGoToLayerZero) {
  const auto f = make(4, 2);
  EXPECT_EQ(peak_grounding_layer(synthetic::uniform_trace(8, 4, f.tokens.spans), f.tokens.spans), 0);
}

TEST(PeakLayer, MatchesBruteForceOnRandomTraces) {
  Rng rng(77);
  for (int trial = 0; trial < 100; ++trial) {
    const auto f = make(4, rng.below(pool().size()));
    const auto trace = synthetic::random_trace(8, 4, f.tokens.spans, 500 + trial, 1.5);
    ASSERT_EQ(peak_grounding_layer(trace, f.tokens.spans), oracle::peak_layer(trace, f.tokens.spans));
  }
}

TEST(PeakLayer, InvariantToRowRescalingAndLogBase) {
  const auto f = make(3, 5);
  auto trace = synthetic::random_trace(8, 2, f.tokens.spans, 9, 2.0);
  const int peak = peak_grounding_layer(trace, f.tokens.spans);
  AttentionTrace scaled = trace;
  for (float& x : scaled.data()) x *= 0.37f;
  EXPECT_EQ(peak_grounding_layer(scaled, f.tokens.spans), peak);
  auto e = oracle::layer_entropies(trace, f.tokens.spans);
  for (double& v : e) v /= std::log(2.0);
  EXPECT_EQ(static_cast<int>(std::min_element(e.begin(), e.end()) - e.begin()), peak);
}

TEST(TaskMapping, EqualsPlantedLayerRows) {
  const auto f = make(4, 3);
  auto trace = synthetic::random_trace(8, 4, f.tokens.spans, 2);
  synthetic::plant_label_grounding(trace, f.episode, 3, 1.0f);
  const auto m = estimate_task_mapping(trace, f.tokens.spans);
  EXPECT_EQ(m.peak_layer, 3);
  EXPECT_EQ(m.rows.rows.size(), 16u);
  const auto direct = collect_attention_set(trace, f.tokens.spans, 3);
  EXPECT_EQ(m.rows.rows, direct.rows);
  const auto composed = collect_attention_set(trace, f.tokens.spans,
                                              peak_grounding_layer(trace, f.tokens.spans));
  EXPECT_EQ(m.rows.rows, composed.rows);
}

// ---------------------------------------------------------------- salient set

TEST(Salient, WorkedExample) {
  const Vector row{0.05f, 0.05f, 0.45f, 0.45f};
  EXPECT_EQ(salient_indices(row, 1.5).indices, (std::vector<int>{2, 3}));
}

TEST(Salient, UniformRowIsEmpty) {
  const Vector row(16, 1.0f / 16);
  EXPECT_TRUE(salient_indices(row, 1.0).indices.empty());
  EXPECT_TRUE(salient_indices(row, 2.5).indices.empty());
}

TEST(Salient, TinyKSelectsEverything) {
  const Vector row{0.1f, 0.2f, 0.3f, 0.4f};
  EXPECT_EQ(salient_indices(row, 1e-9).indices.size(), 4u);
}

// ---------------------------------------------------------------- selective scaling

TEST(SelectiveScale, WorkedExample) {
  const Vector row{0.1f, 0.1f, 0.4f, 0.4f};
  const auto out = apply_selective_scale(row, {0, 4}, SalientIndexSet{{2, 3}}, 2.0);
  EXPECT_NEAR(out[0], 0.1 / 1.8, 1e-7);
  EXPECT_NEAR(out[1], 0.1 / 1.8, 1e-7);
  EXPECT_NEAR(out[2], 0.8 / 1.8, 1e-7);
  EXPECT_NEAR(out[3], 0.8 / 1.8, 1e-7);
  EXPECT_NEAR(out[0], 0.0556, 1e-4);
  EXPECT_NEAR(out[2], 0.4444, 1e-4);
}

TEST(SelectiveScale, EmptySetIsExactNoOp) {
  const Vector row{0.1f, 0.2f, 0.3f, 0.4f};
  EXPECT_EQ(apply_selective_scale(row, {1, 4}, SalientIndexSet{}, 3.0), row);
}

TEST(SelectiveScale, LambdaOneRejectedAndContinuousAbove) {
  const Vector row{0.1f, 0.2f, 0.3f, 0.4f};
  EXPECT_THROW(apply_selective_scale(row, {0, 4}, SalientIndexSet{{3}}, 1.0), ConfigError);
  const auto near_one = apply_selective_scale(row, {0, 4}, SalientIndexSet{{3}}, 1.0 + 1e-6);
  EXPECT_LT(max_abs_diff(near_one, row), 1e-5);
}

TEST(SelectiveScale, MatchesBruteForceAndKeepsOrder) {
  Rng rng(101);
  double worst = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const Vector row = random_distribution(rng, 24);
    const Span span{4, 20};
    const Vector mapping = random_distribution(rng, 16);
    const auto s = oracle::salient(mapping, 1.5);
    const double lambda = 1.0 + 4.0 * rng.uniform01() + 1e-3;
    const auto got = apply_selective_scale(row, span, SalientIndexSet{s}, lambda);
    const auto expected = oracle::selective_scale(row, span, s, lambda);
    worst = std::max(worst, max_abs_diff(got, expected));
    ASSERT_TRUE(is_distribution(got));
    for (std::size_t a = 0; a < row.size(); ++a) {
      for (std::size_t b = 0; b < row.size(); ++b) {
        const auto in_s = [&](std::size_t i) {
          return span.contains(static_cast<int>(i)) &&
                 std::find(s.begin(), s.end(), static_cast<int>(i) - span.begin) != s.end();
        };
        if (in_s(a) == in_s(b) && row[a] < row[b]) {
          ASSERT_LE(got[a], got[b]);
        }
      }
    }
  }
  EXPECT_LT(worst, 1e-6);
}

TEST(SelectiveScale, SpanRenormalizationKeepsSpanMass) {
  const Vector row{0.2f, 0.1f, 0.3f, 0.4f};
  const auto out = apply_selective_scale(row, {1, 4}, SalientIndexSet{{2}}, 2.0, Renormalization::span);
  EXPECT_EQ(out[0], row[0]);
  EXPECT_NEAR(out[1] + out[2] + out[3], 0.8, 1e-7);
  EXPECT_NEAR(out[3] / out[1], 8.0, 1e-5);
}

// ---------------------------------------------------------------- additive

TEST(Additive, WorkedExample) {
  const Vector row{0.2f, 0.2f, 0.6f};
  const auto out = apply_additive(row, {0, 3}, Vector{0, 0, 1}, 1.0);
  EXPECT_NEAR(out[0], 0.1, 1e-7);
  EXPECT_NEAR(out[1], 0.1, 1e-7);
  EXPECT_NEAR(out[2], 0.8, 1e-7);
}

TEST(Additive, ZeroMappingLeavesRow) {
  const Vector row{0.2f, 0.3f, 0.5f};
  EXPECT_LT(max_abs_diff(apply_additive(row, {0, 3}, Vector{0, 0, 0}, 5.0), row), 1e-7);
}

TEST(Additive, LargeLambdaConvergesToMapping) {
  Rng rng(3);
  const Vector row = random_distribution(rng, 16);
  const Vector mapping = random_distribution(rng, 16);
  const auto out = apply_additive(row, {0, 16}, mapping, 1e6);
  EXPECT_LT(max_abs_diff(out, mapping), 1e-4);
}

TEST(Additive, MatchesBruteForce) {
  Rng rng(202);
  double worst = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const Vector row = random_distribution(rng, 24);
    const Vector mapping = random_distribution(rng, 16);
    const double lambda = 5.0 * rng.uniform01() + 1e-3;
    const auto got = apply_additive(row, {8, 24}, mapping, lambda);
    worst = std::max(worst, max_abs_diff(got, oracle::additive(row, {8, 24}, mapping, lambda)));
    ASSERT_TRUE(is_distribution(got));
  }
  EXPECT_LT(worst, 1e-6);
}

TEST(Additive, RejectsBadArguments) {
  const Vector row{0.5f, 0.5f};
  EXPECT_THROW(apply_additive(row, {0, 2}, Vector{1}, 1.0), Error);
  EXPECT_THROW(apply_additive(row, {0, 2}, Vector{1, 0}, 0.0), ConfigError);
}

TEST(MappingFixedPoint, ArgmaxPreserved) {
  Rng rng(12);
  for (int trial = 0; trial < 200; ++trial) {
    const Vector mapping = random_distribution(rng, 16);
    Vector row(20, 0.0f);
    for (int j = 0; j < 16; ++j) row[4 + j] = mapping[j] * 0.8f;
    for (int j = 0; j < 4; ++j) row[j] = 0.05f;
    const int before = argmax(std::span<const float>(row).subspan(4, 16));
    const auto sel = apply_selective_scale(row, {4, 20}, salient_indices(mapping, 1.0), 2.0);
    const auto add = apply_additive(row, {4, 20}, mapping, 1.0);
    EXPECT_EQ(argmax(std::span<const float>(sel).subspan(4, 16)), before);
    EXPECT_EQ(argmax(std::span<const float>(add).subspan(4, 16)), before);
  }
}

// ---------------------------------------------------------------- uas

TEST(Uas, WorkedExample) {
  const Vector row{0.1f, 0.2f, 0.6f, 0.1f};
  const Span spans[] = {{1, 4}};
  const auto out = apply_uas(row, spans);
  EXPECT_EQ(out[0], 0.1f);
  for (int j = 1; j < 4; ++j) EXPECT_NEAR(out[j], 0.3, 1e-7);
}

TEST(Uas, UniformSpanUnchangedAndIdempotent) {
  const Vector row{0.4f, 0.2f, 0.2f, 0.2f};
  const Span spans[] = {{1, 4}};
  EXPECT_EQ(apply_uas(row, spans), row);
  Rng rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    const Vector r = random_distribution(rng, 40);
    const Span two[] = {{2, 18}, {20, 36}};
    const auto once = apply_uas(r, two);
    EXPECT_EQ(apply_uas(once, two), once);
    EXPECT_NEAR(sum(once), 1.0, 1e-6);
  }
}

// ---------------------------------------------------------------- hooks

TEST(Hook, NoneIsIdentity) {
  const auto f = make(2, 0);
  InterventionSpec spec;
  spec.mode = InterventionMode::none;
  const auto hook = build_intervention_hook(spec, nullptr, f.tokens.spans, 8);
  Vector row{0.25f, 0.25f, 0.5f};
  const Vector copy = row;
  hook->apply({5, 0, 2, f.tokens.spans}, row);
  EXPECT_EQ(row, copy);
}

TEST(Hook, SelectiveMatchesStandaloneOp) {
  const auto f = make(1, 4);
  auto trace = synthetic::random_trace(8, 4, f.tokens.spans, 31, 2.0);
  synthetic::plant_label_grounding(trace, f.episode, 2, 0.7f);
  const auto mapping = estimate_task_mapping(trace, f.tokens.spans);
  InterventionSpec spec;
  spec.l_start = 4;
  spec.query_image = false;
  const auto hook = build_intervention_hook(spec, &mapping, f.tokens.spans, 8);
  const int q = f.tokens.spans.query_last;
  EXPECT_FALSE(hook->applies(4, q));
  EXPECT_TRUE(hook->applies(5, q));
  EXPECT_FALSE(hook->applies(5, q - 1));
  for (int h = 0; h < 4; ++h) {
    const auto original = trace.row(5, h, q);
    Vector row(original.begin(), original.end());
    hook->apply({5, h, q, f.tokens.spans}, row);
    const auto expected = apply_selective_scale(original, f.tokens.spans.demos[0].image,
                                                salient_indices(mapping.rows.row(0, h), 1.5), 2.0);
    EXPECT_LT(max_abs_diff(row, expected), 1e-7);
  }
}

TEST(Hook, DecodeStepsFlag) {
  const auto f = make(2, 4);
  auto trace = synthetic::uniform_trace(8, 2, f.tokens.spans);
  synthetic::plant_label_grounding(trace, f.episode, 2, 0.9f);
  const auto mapping = estimate_task_mapping(trace, f.tokens.spans);
  InterventionSpec spec;
  const int q = f.tokens.spans.query_last;
  EXPECT_TRUE(build_intervention_hook(spec, &mapping, f.tokens.spans, 8)->applies(6, q + 2));
  spec.steps = DecodeSteps::first;
  EXPECT_FALSE(build_intervention_hook(spec, &mapping, f.tokens.spans, 8)->applies(6, q + 2));
}

TEST(Hook, MissingMappingIsConfigError) {
  const auto f = make(2, 4);
  EXPECT_THROW(build_intervention_hook(InterventionSpec{}, nullptr, f.tokens.spans, 8), ConfigError);
}

TEST(Hook, UasMakesImageSubRowsUniform) {
  const auto f = make(3, 6);
  auto trace = synthetic::random_trace(8, 2, f.tokens.spans, 44, 2.0);
  const AttentionTrace before = trace;
  InterventionSpec spec;
  spec.mode = InterventionMode::uas;
  spec.apply_layers = LayerRange{2, 5};
  apply_hook_to_trace(trace, *build_intervention_hook(spec, nullptr, f.tokens.spans, 8));
  const auto spans = f.tokens.spans.image_spans();
  for (int l = 0; l < 8; ++l) {
    for (int h = 0; h < 2; ++h) {
      for (int p = 0; p < trace.seq_len(); ++p) {
        const auto row = trace.row(l, h, p);
        if (l < 2 || l >= 5) {
          ASSERT_TRUE(std::equal(row.begin(), row.end(), before.row(l, h, p).begin()));
          continue;
        }
        for (const Span& s : spans) {
          const int end = std::min(s.end, p + 1);
          for (int j = s.begin + 1; j < end; ++j) ASSERT_NEAR(row[j], row[s.begin], 1e-7);
        }
      }
    }
  }
  EXPECT_LT(trace.max_row_sum_error(), 1e-6);
  EXPECT_TRUE(trace.is_causal());
}

TEST(Hook, UasOnTextOnlyRejected) {
  const auto f = make(2, 4, Modality::text);
  InterventionSpec spec;
  spec.mode = InterventionMode::uas;
  EXPECT_THROW(build_intervention_hook(spec, nullptr, f.tokens.spans, 8), ConfigError);
}

TEST(Hook, LocalityOnToyModel) {
  const ToyMllm model(ModelConfig{});
  const auto f = make(2, 9);
  const auto vanilla = model.forward_with_trace(f.tokens.tokens, f.tokens.spans);
  const auto mapping = estimate_task_mapping(vanilla.trace, f.tokens.spans);
  InterventionSpec spec;
  spec.l_start = 4;
  const auto hook = build_intervention_hook(spec, &mapping, f.tokens.spans, 8);
  const auto steered = model.forward_with_trace(f.tokens.tokens, f.tokens.spans, hook.get());
  const std::size_t per_layer = static_cast<std::size_t>(4) * f.tokens.spans.seq_len * f.tokens.spans.seq_len;
  const auto a = vanilla.trace.data();
  const auto b = steered.trace.data();
  EXPECT_TRUE(std::equal(a.begin(), a.begin() + 5 * per_layer, b.begin()));
  EXPECT_FALSE(std::equal(a.begin(), a.end(), b.begin()));
  EXPECT_LT(steered.trace.max_row_sum_error(), 1e-5);
}

// ---------------------------------------------------------------- spec

TEST(Spec, JsonRoundTrip) {
  InterventionSpec s;
  s.mode = InterventionMode::additive;
  s.lambda = 0.5;
  s.k = 2.0;
  s.l_start = 3;
  s.renorm = Renormalization::span;
  s.steps = DecodeSteps::first;
  s.query_image = false;
  const auto back = intervention_from_json(to_json(s));
  EXPECT_EQ(back.mode, s.mode);
  EXPECT_EQ(back.lambda, s.lambda);
  EXPECT_EQ(back.k, s.k);
  EXPECT_EQ(back.l_start, s.l_start);
  EXPECT_EQ(back.renorm, s.renorm);
  EXPECT_EQ(back.steps, s.steps);
  EXPECT_EQ(back.query_image, s.query_image);
  InterventionSpec u;
  u.mode = InterventionMode::uas;
  u.apply_layers = LayerRange{1, 6};
  const auto ub = intervention_from_json(to_json(u));
  ASSERT_TRUE(ub.apply_layers);
  EXPECT_EQ(ub.apply_layers->begin, 1);
  EXPECT_EQ(ub.apply_layers->end, 6);
}

TEST(Spec, UnknownKeyAndInvalidValuesRejected) {
  EXPECT_THROW(intervention_from_json({{"mode", "uas"}, {"lamda", 2}}), ConfigError);
  EXPECT_THROW(intervention_from_json({{"mode", "magic"}}), ConfigError);
  InterventionSpec s;
  EXPECT_EQ(s.resolved_l_start(8), 4);
  s.l_start = 8;
  EXPECT_THROW(s.validate(8), ConfigError);
  s.l_start = 2;
  s.lambda = 1.0;
  EXPECT_THROW(s.validate(8), ConfigError);
}

TEST(Spec, DefaultsMatchRecommendedSetting) {
  const InterventionSpec s;
  EXPECT_EQ(s.mode, InterventionMode::selective_scale);
  EXPECT_EQ(s.lambda, 2.0);
  EXPECT_EQ(s.k, 1.5);
  EXPECT_EQ(s.renorm, Renormalization::full_row);
  EXPECT_EQ(s.steps, DecodeSteps::every);
}
