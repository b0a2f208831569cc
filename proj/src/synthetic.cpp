// SPDX-License-Identifier: Apache-2.0
#include "mgilab/synthetic.hpp"

#include <cmath>

#include "mgilab/error.hpp"
#include "mgilab/numeric.hpp"
#include "mgilab/rng.hpp"

namespace mgilab::synthetic {

AttentionTrace uniform_trace(int layers, int heads, const SpanMap& spans) {
  AttentionTrace trace(layers, heads, spans);
  for (int l = 0; l < layers; ++l) {
    for (int h = 0; h < heads; ++h) {
      for (int i = 0; i < trace.seq_len(); ++i) {
        auto row = trace.row(l, h, i);
        std::fill_n(row.begin(), i + 1, 1.0f / static_cast<float>(i + 1));
      }
    }
  }
  return trace;
}

AttentionTrace random_trace(int layers, int heads, const SpanMap& spans, std::uint64_t seed,
                            double spread) {
  AttentionTrace trace(layers, heads, spans);
  Rng rng(seed, 0x7ace5ULL);
  for (int l = 0; l < layers; ++l) {
    for (int h = 0; h < heads; ++h) {
      for (int i = 0; i < trace.seq_len(); ++i) {
        auto row = trace.row(l, h, i).first(static_cast<std::size_t>(i) + 1);
        for (float& x : row) x = static_cast<float>(rng.normal() * spread);
        softmax_inplace(row);
      }
    }
  }
  return trace;
}

void plant_row(AttentionTrace& trace, int layer, int head, int position,
               std::span<const std::pair<int, float>> peaks) {
  double peak_total = 0.0;
  for (const auto& [index, mass] : peaks) {
    if (index < 0 || index > position) throw Error("planted peak outside causal prefix");
    peak_total += mass;
  }
  if (peak_total > 1.0 + 1e-9) throw Error("planted peaks exceed unit mass");
  auto row = trace.row(layer, head, position);
  std::fill(row.begin(), row.end(), 0.0f);
  const float background = static_cast<float>((1.0 - peak_total) / (position + 1));
  std::fill_n(row.begin(), position + 1, background);
  for (const auto& [index, mass] : peaks) row[index] += mass;
}

int cell_position(Span image, const GridSize& grid, Cell cell) {
  if (image.size() != grid.cells()) throw Error("image span does not match grid");
  return image.begin + grid.index(cell);
}

void plant_label_grounding(AttentionTrace& trace, const Episode& episode, int layer,
                           float strength) {
  const SpanMap& spans = trace.spans();
  for (std::size_t i = 0; i < spans.demos.size(); ++i) {
    const auto& d = spans.demos[i];
    const auto& sample = episode.demonstrations.at(i);
    const int target = cell_position(d.image, sample.scene.grid, sample.target().cell);
    for (int p = d.label.begin; p < d.label.end; ++p) {
      for (int h = 0; h < trace.heads(); ++h) {
        if (strength >= 1.0f) {
          auto row = trace.row(layer, h, p);
          std::fill(row.begin(), row.end(), 0.0f);
          row[target] = 1.0f;
        } else {
          const std::pair<int, float> peak{target, strength};
          plant_row(trace, layer, h, p, std::span(&peak, 1));
        }
      }
    }
  }
}

PlantedScenario PlantedScenario::grounded(int grounding_layer, int query_layer_begin) {
  PlantedScenario s;
  s.grounding_layer = grounding_layer;
  s.query_layer_begin = query_layer_begin;
  s.pattern = QueryPattern::grounded;
  s.correct_mass = 0.6f;
  s.distractor_mass = 0.0f;
  return s;
}

PlantedScenario PlantedScenario::misdirected(int grounding_layer, int query_layer_begin) {
  PlantedScenario s;
  s.grounding_layer = grounding_layer;
  s.query_layer_begin = query_layer_begin;
  s.pattern = QueryPattern::misdirected;
  s.correct_mass = 0.2f;
  s.distractor_mass = 0.3f;
  return s;
}

AttentionTrace planted_trace(const Episode& episode, const TokenizedEpisode& tokens, int layers,
                             int heads, const PlantedScenario& scenario) {
  AttentionTrace trace = uniform_trace(layers, heads, tokens.spans);
  if (!tokens.spans.demos.empty()) {
    plant_label_grounding(trace, episode, scenario.grounding_layer, scenario.grounding_strength);
  }
  const SpanMap& spans = tokens.spans;
  if (spans.query_image.empty()) return trace;

  const auto& grid = episode.query.scene.grid;
  const int correct = cell_position(spans.query_image, grid, episode.query.target().cell);
  const int distractor = cell_position(spans.query_image, grid, episode.query.distractor().cell);
  std::vector<std::pair<int, float>> peaks{{correct, scenario.correct_mass}};
  if (scenario.pattern == QueryPattern::misdirected) {
    peaks.emplace_back(distractor, scenario.distractor_mass);
  }
  for (int l = scenario.query_layer_begin; l < layers; ++l) {
    for (int h = 0; h < heads; ++h) plant_row(trace, l, h, spans.query_last, peaks);
  }
  return trace;
}

Episode assemble_aligned_episode(std::span<const OutlierSample> support, const OutlierSample& query,
                                 int n, Modality modality, std::uint64_t seed) {
  std::vector<OutlierSample> aligned;
  for (const auto& s : support) {
    if (s.task == query.task && s.id != query.id && s.target().cell == query.target().cell &&
        s.scene.grid == query.scene.grid) {
      aligned.push_back(s);
    }
  }
  return assemble_episode(aligned, query, n, modality, seed);
}

}  // namespace mgilab::synthetic
