// SPDX-License-Identifier: Apache-2.0
//
// Synthetic attention traces with planted structure. These drive the oracle
// suites and the scripted-responder experiments.
#pragma once

#include <cstdint>
#include <span>
#include <utility>

#include "mgilab/episodes.hpp"
#include "mgilab/trace.hpp"
#include "mgilab/vocabulary.hpp"

namespace mgilab::synthetic {

// Every row uniform over its causal prefix.
AttentionTrace uniform_trace(int layers, int heads, const SpanMap& spans);

// Every row a softmax of N(0, spread^2) logits over its causal prefix.
AttentionTrace random_trace(int layers, int heads, const SpanMap& spans, std::uint64_t seed,
                            double spread = 1.0);

// Replaces one row with (1 - sum of peak masses) * uniform prefix plus the
// given point masses.
void plant_row(AttentionTrace& trace, int layer, int head, int position,
               std::span<const std::pair<int, float>> peaks);

// Token index of a grid cell inside an image span.
int cell_position(Span image, const GridSize& grid, Cell cell);

// Every head of every demonstration label row at `layer` puts `strength` on
// that demonstration's correct-evidence cell. strength = 1 gives a one-hot row.
void plant_label_grounding(AttentionTrace& trace, const Episode& episode, int layer,
                           float strength);

enum class QueryPattern {
  grounded,     // mass on the query's correct cell
  misdirected,  // more mass on the distractor cell than on the correct cell
};

struct PlantedScenario {
  int grounding_layer = 3;
  float grounding_strength = 0.8f;
  int query_layer_begin = 5;  // query rows planted on [begin, layers)
  QueryPattern pattern = QueryPattern::grounded;
  float correct_mass = 0.6f;
  float distractor_mass = 0.0f;

  static PlantedScenario grounded(int grounding_layer, int query_layer_begin);
  // Distractor 0.3 vs correct 0.2: doubling the correct cell restores it.
  static PlantedScenario misdirected(int grounding_layer, int query_layer_begin);
};

// Uniform background, planted demonstration grounding and planted query rows
// (every head, query's final prompt position).
AttentionTrace planted_trace(const Episode& episode, const TokenizedEpisode& tokens, int layers,
                             int heads, const PlantedScenario& scenario);

// Like assemble_episode, restricted to demonstrations whose correct-evidence
// cell sits at the same grid position as the query's.
Episode assemble_aligned_episode(std::span<const OutlierSample> support, const OutlierSample& query,
                                 int n, Modality modality, std::uint64_t seed);

}  // namespace mgilab::synthetic
