// SPDX-License-Identifier: Apache-2.0
//
// Mapping-guided intervention engine.
//
// The task mapping is read from how each demonstration's label token attends
// to that demonstration's image: at every layer the label->image rows are
// L1-normalized, their entropies summed over demonstrations and heads, and the
// layer with the smallest total (the peak grounding layer) supplies the
// mapping rows. Deeper layers then have the query's attention over each
// demonstration image steered towards the same pattern, either additively
// (row + lambda * mapping) or by multiplying the salient entries
// (mapping > k * mean) by lambda, followed by renormalization.
#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "mgilab/model.hpp"
#include "mgilab/numeric.hpp"
#include "mgilab/trace.hpp"

namespace mgilab {

// Label->image attention rows of every (demonstration, head) at one layer.
struct AttentionSet {
  int layer = 0;
  int demos = 0;
  int heads = 0;
  std::vector<Vector> rows;  // rows[demo * heads + head], length = image span

  std::span<const float> row(int demo, int head) const { return rows[demo * heads + head]; }
};

// Throws ConfigError "no image spans" for text-only episodes. Multi-token
// labels contribute the entrywise mean of their rows.
AttentionSet collect_attention_set(const AttentionTrace& trace, const SpanMap& spans, int layer);

// Per-layer sum over demonstrations and heads of the entropy of the
// L1-normalized label->image rows. All-zero rows count as ln(image length).
std::vector<double> grounding_entropy_by_layer(const AttentionTrace& trace, const SpanMap& spans);

// argmin of grounding_entropy_by_layer; ties resolve to the lowest layer.
int peak_grounding_layer(const AttentionTrace& trace, const SpanMap& spans);

struct TaskMapping {
  int peak_layer = 0;
  AttentionSet rows;
};

TaskMapping estimate_task_mapping(const AttentionTrace& trace, const SpanMap& spans);

// Exports the mapping rows (demo-major, head-major) as a manifest plus f32-le
// payload.
void write_task_mapping(const std::filesystem::path& manifest_path, const TaskMapping& mapping);

struct SalientIndexSet {
  std::vector<int> indices;  // ascending, relative to the image span
  bool contains(int j) const;
  friend bool operator==(const SalientIndexSet&, const SalientIndexSet&) = default;
};

// { j : row[j] > k * mean(row) }, strict.
SalientIndexSet salient_indices(std::span<const float> mapping_row, double k);

enum class Renormalization {
  full_row,  // divide the whole row by its sum
  span,      // rescale each intervened span back to its original mass
};

// Multiplies row[span.begin + j] by lambda for j in S, then renormalizes.
// Requires lambda > 1.
Vector apply_selective_scale(std::span<const float> row, Span span, const SalientIndexSet& salient,
                             double lambda, Renormalization renorm = Renormalization::full_row);

// Adds lambda * mapping_row over the span, then renormalizes. Requires
// lambda > 0 and mapping_row.size() == span.size().
Vector apply_additive(std::span<const float> row, Span span, std::span<const float> mapping_row,
                      double lambda, Renormalization renorm = Renormalization::full_row);

// Replaces each span's entries with their mean, preserving span mass.
Vector apply_uas(std::span<const float> row, std::span<const Span> spans);

enum class InterventionMode { none, selective_scale, additive, uas };
enum class DecodeSteps { every, first };

struct LayerRange {
  int begin = 0;
  int end = -1;  // exclusive; -1 means the last layer
  bool contains(int layer, int num_layers) const {
    return layer >= begin && layer < (end < 0 ? num_layers : end);
  }
};

struct InterventionSpec {
  InterventionMode mode = InterventionMode::selective_scale;
  double lambda = 2.0;
  double k = 1.5;
  std::optional<int> l_start;  // defaults to floor(L / 2)
  std::optional<LayerRange> apply_layers;  // UAS only; defaults to all layers
  Renormalization renorm = Renormalization::full_row;
  DecodeSteps steps = DecodeSteps::every;
  // Also steer the query's attention over its own image using the
  // head-wise mean of the demonstration mapping rows.
  bool query_image = true;

  bool needs_mapping() const {
    return mode == InterventionMode::selective_scale || mode == InterventionMode::additive;
  }
  int resolved_l_start(int num_layers) const { return l_start.value_or(num_layers / 2); }
  // Throws ConfigError.
  void validate(int num_layers) const;
  std::string describe() const;
};

std::string_view to_string(InterventionMode m);
InterventionMode parse_mode(std::string_view s);

nlohmann::json to_json(const InterventionSpec& spec);
// Unknown keys are rejected.
InterventionSpec intervention_from_json(const nlohmann::json& j);

// Builds the hook for `spec`. MGI modes require a mapping whose demonstration
// count matches the span map; mode=none yields an IdentityHook.
std::shared_ptr<const InterventionHook> build_intervention_hook(const InterventionSpec& spec,
                                                                const TaskMapping* mapping,
                                                                const SpanMap& spans,
                                                                int num_layers);

// Rewrites every (layer, head, position) row of a recorded trace where the
// hook applies. Used to replay interventions on traces without a model.
void apply_hook_to_trace(AttentionTrace& trace, const InterventionHook& hook);

}  // namespace mgilab
