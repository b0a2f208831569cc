// SPDX-License-Identifier: Apache-2.0
//
// A small decoder-only transformer over the joint text/image-cell vocabulary
// with full attention capture. Weights are seeded, never trained: the model is
// a vehicle for exercising interventions, not a solver of the task.
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mgilab/numeric.hpp"
#include "mgilab/trace.hpp"
#include "mgilab/vocabulary.hpp"

namespace mgilab {

struct ModelConfig {
  int layers = 8;
  int heads = 4;
  int model_dim = 64;
  int vocab_size = 96;
  int max_seq_len = 512;
  std::uint64_t seed = 0;

  int head_dim() const { return model_dim / heads; }
  int mlp_dim() const { return 4 * model_dim; }
  void validate() const;
};

struct HookSite {
  int layer;
  int head;
  int position;  // query position of the row
  const SpanMap& spans;
};

// Intervention point between the attention softmax and value mixing.
class InterventionHook {
 public:
  virtual ~InterventionHook() = default;
  // Per (layer, position) filter; apply() is only called where this holds.
  virtual bool applies(int layer, int position) const = 0;
  // Rewrites a full-length attention row in place. The result must remain a
  // distribution; the model rejects rows whose sum drifts beyond 1e-5.
  virtual void apply(const HookSite& site, std::span<float> row) const = 0;
};

class IdentityHook final : public InterventionHook {
 public:
  bool applies(int, int) const override { return true; }
  void apply(const HookSite&, std::span<float>) const override {}
};

struct ForwardResult {
  Vector logits;  // next-token logits at the final position
  AttentionTrace trace;
};

struct GenerationResult {
  std::string output_text;
  std::vector<int> output_token_ids;
  // Attention of the last decoding forward pass, covering the prompt and every
  // decoding step's query row.
  AttentionTrace trace;
  std::vector<std::int64_t> step_latency_ns;

  std::int64_t total_latency_ns() const;
};

class ToyMllm {
 public:
  explicit ToyMllm(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }
  std::span<const float> parameters() const { return params_; }

  // Throws ConfigError for sequences longer than max_seq_len or tokens outside
  // the vocabulary.
  ForwardResult forward_with_trace(std::span<const int> tokens, const SpanMap& spans,
                                   const InterventionHook* hook = nullptr) const;

  // Greedy argmax over emittable ids (lowest id on ties) until <sep>/<eos> or
  // the token budget. The full sequence is recomputed every step.
  // output_token_ids includes the end token when one is produced;
  // output_text does not.
  GenerationResult generate_greedy(const TokenizedEpisode& episode, int max_new_tokens,
                                   const InterventionHook* hook = nullptr) const;

 private:
  struct LayerOffsets {
    std::size_t ln1_g, ln1_b, wq, wk, wv, wo, ln2_g, ln2_b, w1, b1, w2, b2;
  };

  const float* at(std::size_t offset) const { return params_.data() + offset; }

  ModelConfig config_;
  std::vector<float> params_;
  std::size_t embed_ = 0, pos_ = 0, lnf_g_ = 0, lnf_b_ = 0, unembed_ = 0;
  std::vector<LayerOffsets> layers_;
};

ToyMllm init_model(const ModelConfig& config);

}  // namespace mgilab
