// SPDX-License-Identifier: Apache-2.0
//
// Layer-wise attention analytics over recorded traces. Head aggregation is
// the arithmetic mean unless stated otherwise.
#pragma once

#include <optional>
#include <span>
#include <vector>

#include "mgilab/episodes.hpp"
#include "mgilab/trace.hpp"

namespace mgilab {

enum class AttentionSource { demo_labels, query_last };

enum class RatioNormalization {
  image_mass,  // shares of the attention mass that lands on image tokens
  whole_row,   // shares of the whole attention row
};

struct EvidenceRatios {
  double correct = 0.0;
  double false_evidence = 0.0;
  double irrelevant = 0.0;
  // Set when the layer had no image mass and the ratios are the uniform prior
  // (each class's share of the image cells).
  bool flagged = false;
};

struct LayerProfile {
  std::vector<EvidenceRatios> layers;
};

struct EvidenceMasks {
  std::vector<EvidenceMask> demos;  // aligned with SpanMap::demos
  std::optional<EvidenceMask> query;
};

// demo_labels: each demonstration's label token(s) onto its own image.
// query_last: the final prompt position onto every demonstration image and
// the query image (when a query mask is supplied).
LayerProfile evidence_attention_ratios(const AttentionTrace& trace, const SpanMap& spans,
                                       const EvidenceMasks& masks, AttentionSource source,
                                       RatioNormalization norm = RatioNormalization::image_mass);

enum class TokenTarget { demo_labels, correct_evidence, demo_text, demo_image };

// Sorted token indices for a target class. correct_evidence needs masks.
std::vector<int> target_indices(const SpanMap& spans, TokenTarget target,
                                const EvidenceMasks* masks = nullptr);

// Per layer, head-averaged attention mass from the query's final prompt
// position onto `targets`.
std::vector<double> last_token_attention_profile(const AttentionTrace& trace, const SpanMap& spans,
                                                 std::span<const int> targets);

struct RatLayer {
  double text_mean = 0.0;   // mean attention per demonstration text token
  double image_mean = 0.0;  // mean attention per demonstration image token
  std::optional<double> ratio;  // text_mean / image_mean when image_mean > 0
};

struct RatProfile {
  std::vector<RatLayer> layers;
};

// Relative attention per token from the query's final prompt position. Throws
// "text-only episode" when the demonstrations have no image tokens.
RatProfile relative_attention_per_token(const AttentionTrace& trace, const SpanMap& spans);

enum class SpanClass { demo_text, demo_image };

struct HeadMap {
  int layers = 0;
  int heads = 0;
  std::vector<double> values;  // layer-major

  double at(int layer, int head) const { return values[layer * heads + head]; }
  // Fraction of cells whose value is below `fraction` of the maximum.
  double sparsity(double fraction = 0.01) const;
};

// Total attention mass per (layer, head) from the source onto the span class,
// without head averaging. For demo_labels the mass is averaged over
// demonstrations.
HeadMap head_activation_map(const AttentionTrace& trace, const SpanMap& spans,
                            AttentionSource source, SpanClass target);

// Per-layer summed label->image entropy; its argmin is the peak grounding
// layer.
std::vector<double> entropy_profile(const AttentionTrace& trace, const SpanMap& spans);

}  // namespace mgilab
