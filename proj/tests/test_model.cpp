// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <numeric>

#include "mgilab/error.hpp"
#include "mgilab/model.hpp"
#include "mgilab/rng.hpp"

using namespace mgilab;

namespace {

const std::vector<OutlierSample>& pool() {
  static const auto p = [] {
    PoolConfig c;
    c.count = 200;
    c.seed = 12;
    return generate_pool(c);
  }();
  return p;
}

TokenizedEpisode episode(int shots, std::size_t query, Modality m = Modality::multimodal) {
  return tokenize_episode(assemble_episode(pool(), shots, query, m, 0));
}

// Rewrites nothing but reports every call, to prove the hook site is reached.
class CountingHook final : public InterventionHook {
 public:
  bool applies(int, int) const override { return true; }
  void apply(const HookSite&, std::span<float>) const override { ++calls; }
  mutable int calls = 0;
};

class BreakingHook final : public InterventionHook {
 public:
  bool applies(int layer, int) const override { return layer == 1; }
  void apply(const HookSite&, std::span<float> row) const override { row[0] += 0.5f; }
};

}  // namespace

TEST(ToyMllm, DefaultProfileConstructs) {
  ModelConfig c;
  EXPECT_EQ(c.layers, 8);
  EXPECT_EQ(c.heads, 4);
  EXPECT_EQ(c.model_dim, 64);
  EXPECT_NO_THROW(ToyMllm{c});
}

TEST(ToyMllm, SeededWeights) {
  ModelConfig c;
  c.seed = 3;
  const ToyMllm a(c), b(c);
  EXPECT_TRUE(std::equal(a.parameters().begin(), a.parameters().end(), b.parameters().begin(),
                         b.parameters().end()));
  c.seed = 4;
  const ToyMllm other(c);
  EXPECT_FALSE(std::equal(a.parameters().begin(), a.parameters().end(),
                          other.parameters().begin(), other.parameters().end()));
}

TEST(ToyMllm, LogitsDeterministicAcrossConstructions) {
  const auto t = episode(2, 1);
  const auto a = ToyMllm(ModelConfig{}).forward_with_trace(t.tokens, t.spans);
  const auto b = ToyMllm(ModelConfig{}).forward_with_trace(t.tokens, t.spans);
  EXPECT_EQ(a.logits, b.logits);
  EXPECT_EQ(a.trace, b.trace);
}

TEST(ToyMllm, IdentityHookIsTransparent) {
  const ToyMllm model(ModelConfig{});
  const auto t = episode(4, 2);
  const IdentityHook id;
  const auto plain = model.forward_with_trace(t.tokens, t.spans);
  const auto hooked = model.forward_with_trace(t.tokens, t.spans, &id);
  EXPECT_EQ(plain.logits, hooked.logits);
  EXPECT_EQ(plain.trace, hooked.trace);
}

TEST(ToyMllm, HookSiteReachedForEveryRow) {
  const ToyMllm model(ModelConfig{});
  const auto t = episode(1, 3);
  CountingHook hook;
  model.forward_with_trace(t.tokens, t.spans, &hook);
  EXPECT_EQ(hook.calls, 8 * 4 * static_cast<int>(t.tokens.size()));
}

TEST(ToyMllm, RowsStochasticAndCausal) {
  const ToyMllm model(ModelConfig{});
  Rng rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    const auto m = rng.below(2) ? Modality::text : Modality::multimodal;
    const auto t = episode(static_cast<int>(rng.below(3)), rng.below(pool().size()), m);
    const auto r = model.forward_with_trace(t.tokens, t.spans);
    ASSERT_LT(r.trace.max_row_sum_error(), 1e-5);
    ASSERT_TRUE(r.trace.is_causal());
  }
}

TEST(ToyMllm, InvalidHookOutputRejected) {
  const ToyMllm model(ModelConfig{});
  const auto t = episode(1, 3);
  const BreakingHook hook;
  EXPECT_THROW(model.forward_with_trace(t.tokens, t.spans, &hook), Error);
}

TEST(ToyMllm, OverlongInputRejected) {
  ModelConfig c;
  c.max_seq_len = 16;
  const ToyMllm model(c);
  const auto t = episode(1, 3);
  EXPECT_THROW(model.forward_with_trace(t.tokens, t.spans), ConfigError);
}

TEST(GenerateGreedy, SingleTokenBudget) {
  const ToyMllm model(ModelConfig{});
  const auto g = model.generate_greedy(episode(2, 4), 1);
  EXPECT_EQ(g.output_token_ids.size(), 1u);
  EXPECT_EQ(g.step_latency_ns.size(), 1u);
  EXPECT_THROW(model.generate_greedy(episode(2, 4), 0), ConfigError);
}

TEST(GenerateGreedy, IdentityHookSameOutput) {
  const ToyMllm model(ModelConfig{});
  const auto t = episode(3, 5);
  const IdentityHook id;
  const auto a = model.generate_greedy(t, 4);
  const auto b = model.generate_greedy(t, 4, &id);
  EXPECT_EQ(a.output_token_ids, b.output_token_ids);
  EXPECT_EQ(a.output_text, b.output_text);
  EXPECT_EQ(a.trace, b.trace);
}

TEST(GenerateGreedy, EmitsOnlyTextTokens) {
  const ToyMllm model(ModelConfig{});
  for (std::size_t q = 0; q < 10; ++q) {
    for (int id : model.generate_greedy(episode(2, q), 4).output_token_ids) {
      EXPECT_TRUE(vocab::is_emittable(id)) << id;
    }
  }
}

TEST(GenerateGreedy, LatencyTotalIsSumOfSteps) {
  const ToyMllm model(ModelConfig{});
  const auto g = model.generate_greedy(episode(2, 6), 3);
  const auto sum = std::accumulate(g.step_latency_ns.begin(), g.step_latency_ns.end(), std::int64_t{0});
  EXPECT_EQ(g.total_latency_ns(), sum);
  for (auto ns : g.step_latency_ns) EXPECT_GT(ns, 0);
}

TEST(GenerateGreedy, TraceCoversGeneratedPositions) {
  const ToyMllm model(ModelConfig{});
  const auto t = episode(2, 7);
  const auto g = model.generate_greedy(t, 3);
  const int generated = static_cast<int>(g.output_token_ids.size());
  // The final step's own token is never fed back.
  EXPECT_EQ(g.trace.seq_len(), static_cast<int>(t.tokens.size()) + generated - 1);
}
