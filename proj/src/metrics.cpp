// SPDX-License-Identifier: Apache-2.0
#include "mgilab/metrics.hpp"

#include <algorithm>

#include "mgilab/error.hpp"
#include "mgilab/mgi.hpp"

namespace mgilab {

namespace {

struct ClassMass {
  double correct = 0.0;
  double false_evidence = 0.0;
  double irrelevant = 0.0;
  double total() const { return correct + false_evidence + irrelevant; }
};

void accumulate(ClassMass& acc, std::span<const float> row, Span image, const EvidenceMask& mask) {
  if (mask.cells.size() != static_cast<std::size_t>(image.size())) {
    throw Error("evidence mask does not match image span");
  }
  for (int j = 0; j < image.size(); ++j) {
    const double a = row[image.begin + j];
    switch (mask.cells[j]) {
      case Evidence::correct: acc.correct += a; break;
      case Evidence::false_evidence: acc.false_evidence += a; break;
      case Evidence::irrelevant: acc.irrelevant += a; break;
    }
  }
}

// Mean of the label-token rows of demonstration `d`.
std::vector<float> label_row(const AttentionTrace& trace, int layer, int head, const DemoSpans& d) {
  if (d.label.size() == 1) {
    const auto r = trace.row(layer, head, d.label.begin);
    return {r.begin(), r.end()};
  }
  std::vector<double> acc(trace.seq_len(), 0.0);
  for (int p = d.label.begin; p < d.label.end; ++p) {
    const auto r = trace.row(layer, head, p);
    for (int j = 0; j < trace.seq_len(); ++j) acc[j] += r[j];
  }
  std::vector<float> out(trace.seq_len());
  for (int j = 0; j < trace.seq_len(); ++j) out[j] = static_cast<float>(acc[j] / d.label.size());
  return out;
}

}  // namespace

LayerProfile evidence_attention_ratios(const AttentionTrace& trace, const SpanMap& spans,
                                       const EvidenceMasks& masks, AttentionSource source,
                                       RatioNormalization norm) {
  if (!spans.has_images()) throw ConfigError("no image spans");
  if (masks.demos.size() != spans.demos.size()) {
    throw Error("evidence masks must cover every demonstration image");
  }

  // Class cell counts for the uniform prior.
  ClassMass prior;
  auto count_cells = [&](const EvidenceMask& m) {
    prior.correct += m.count(Evidence::correct);
    prior.false_evidence += m.count(Evidence::false_evidence);
    prior.irrelevant += m.count(Evidence::irrelevant);
  };
  for (const auto& m : masks.demos) count_cells(m);
  const bool use_query = source == AttentionSource::query_last && masks.query &&
                         !spans.query_image.empty();
  if (use_query) count_cells(*masks.query);

  LayerProfile profile;
  for (int l = 0; l < trace.layers(); ++l) {
    ClassMass acc;
    int rows = 0;
    for (int h = 0; h < trace.heads(); ++h) {
      if (source == AttentionSource::demo_labels) {
        for (std::size_t i = 0; i < spans.demos.size(); ++i) {
          const auto row = label_row(trace, l, h, spans.demos[i]);
          accumulate(acc, row, spans.demos[i].image, masks.demos[i]);
          ++rows;
        }
      } else {
        const auto row = trace.row(l, h, spans.query_last);
        for (std::size_t i = 0; i < spans.demos.size(); ++i) {
          accumulate(acc, row, spans.demos[i].image, masks.demos[i]);
        }
        if (use_query) accumulate(acc, row, spans.query_image, *masks.query);
        ++rows;
      }
    }

    EvidenceRatios r;
    const double denom = norm == RatioNormalization::image_mass ? acc.total() : rows;
    if (acc.total() > 0.0) {
      r.correct = acc.correct / denom;
      r.false_evidence = acc.false_evidence / denom;
      r.irrelevant = acc.irrelevant / denom;
    } else {
      r.flagged = true;
      r.correct = prior.correct / prior.total();
      r.false_evidence = prior.false_evidence / prior.total();
      r.irrelevant = prior.irrelevant / prior.total();
    }
    profile.layers.push_back(r);
  }
  return profile;
}

std::vector<int> target_indices(const SpanMap& spans, TokenTarget target, const EvidenceMasks* masks) {
  std::vector<int> out;
  auto add_span = [&](Span s) {
    for (int j = s.begin; j < s.end; ++j) out.push_back(j);
  };
  switch (target) {
    case TokenTarget::demo_labels:
      for (const auto& d : spans.demos) add_span(d.label);
      break;
    case TokenTarget::demo_image:
      for (const auto& d : spans.demos) add_span(d.image);
      break;
    case TokenTarget::demo_text:
      for (const auto& d : spans.demos) {
        for (int j = d.block.begin; j < d.block.end; ++j) {
          if (!d.image.contains(j)) out.push_back(j);
        }
      }
      break;
    case TokenTarget::correct_evidence: {
      if (!masks) throw Error("correct_evidence target needs evidence masks");
      auto add_cells = [&](Span s, const EvidenceMask& m) {
        for (int j = 0; j < s.size() && j < static_cast<int>(m.cells.size()); ++j) {
          if (m.cells[j] == Evidence::correct) out.push_back(s.begin + j);
        }
      };
      for (std::size_t i = 0; i < spans.demos.size() && i < masks->demos.size(); ++i) {
        add_cells(spans.demos[i].image, masks->demos[i]);
      }
      if (masks->query) add_cells(spans.query_image, *masks->query);
      break;
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<double> last_token_attention_profile(const AttentionTrace& trace, const SpanMap& spans,
                                                 std::span<const int> targets) {
  std::vector<double> series(trace.layers(), 0.0);
  for (int l = 0; l < trace.layers(); ++l) {
    double acc = 0.0;
    for (int h = 0; h < trace.heads(); ++h) {
      const auto row = trace.row(l, h, spans.query_last);
      for (int j : targets) acc += row[j];
    }
    series[l] = acc / trace.heads();
  }
  return series;
}

RatProfile relative_attention_per_token(const AttentionTrace& trace, const SpanMap& spans) {
  const auto text = target_indices(spans, TokenTarget::demo_text);
  const auto image = target_indices(spans, TokenTarget::demo_image);
  if (image.empty()) throw Error("text-only episode");
  if (text.empty()) throw Error("demonstrations have no text tokens");

  const auto text_mass = last_token_attention_profile(trace, spans, text);
  const auto image_mass = last_token_attention_profile(trace, spans, image);
  RatProfile p;
  for (int l = 0; l < trace.layers(); ++l) {
    RatLayer r;
    r.text_mean = text_mass[l] / static_cast<double>(text.size());
    r.image_mean = image_mass[l] / static_cast<double>(image.size());
    if (r.image_mean > 0.0) r.ratio = r.text_mean / r.image_mean;
    p.layers.push_back(r);
  }
  return p;
}

double HeadMap::sparsity(double fraction) const {
  if (values.empty()) return 0.0;
  const double max = *std::max_element(values.begin(), values.end());
  const auto below = std::count_if(values.begin(), values.end(),
                                   [&](double v) { return v < fraction * max; });
  return static_cast<double>(below) / static_cast<double>(values.size());
}

HeadMap head_activation_map(const AttentionTrace& trace, const SpanMap& spans,
                            AttentionSource source, SpanClass target) {
  const auto idx = target_indices(
      spans, target == SpanClass::demo_text ? TokenTarget::demo_text : TokenTarget::demo_image);
  HeadMap map{trace.layers(), trace.heads(), {}};
  map.values.assign(static_cast<std::size_t>(trace.layers()) * trace.heads(), 0.0);
  for (int l = 0; l < trace.layers(); ++l) {
    for (int h = 0; h < trace.heads(); ++h) {
      double mass = 0.0;
      if (source == AttentionSource::query_last) {
        const auto row = trace.row(l, h, spans.query_last);
        for (int j : idx) mass += row[j];
      } else {
        if (spans.demos.empty()) throw Error("no demonstrations");
        for (const auto& d : spans.demos) {
          const auto row = label_row(trace, l, h, d);
          for (int j : idx) mass += row[j];
        }
        mass /= static_cast<double>(spans.demos.size());
      }
      map.values[static_cast<std::size_t>(l) * trace.heads() + h] = mass;
    }
  }
  return map;
}

std::vector<double> entropy_profile(const AttentionTrace& trace, const SpanMap& spans) {
  return grounding_entropy_by_layer(trace, spans);
}

}  // namespace mgilab
