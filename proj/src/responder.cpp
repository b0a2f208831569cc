// SPDX-License-Identifier: Apache-2.0
#include "mgilab/responder.hpp"

#include "mgilab/error.hpp"

namespace mgilab {

namespace {

AnswerSource infer_attribute(const TokenizedEpisode& episode) {
  int shapes = 0;
  int colors = 0;
  for (const auto& d : episode.spans.demos) {
    for (int p = d.label.begin; p < d.label.end; ++p) {
      const int id = episode.tokens[p];
      if (id >= vocab::kFirstShape && id < vocab::kFirstColor) ++shapes;
      if (id >= vocab::kFirstColor && id < vocab::kFirstDigit) ++colors;
    }
  }
  if (shapes == 0 && colors == 0) throw ConfigError("cannot infer answer attribute without demonstrations");
  return shapes >= colors ? AnswerSource::shape : AnswerSource::color;
}

}  // namespace

int scripted_responder(const TokenizedEpisode& episode, const AttentionTrace& trace,
                       const ResponderRule& rule) {
  const SpanMap& spans = episode.spans;
  if (spans.query_image.empty()) throw ConfigError("empty query image span");
  if (rule.read_layer < 0 || rule.read_layer >= trace.layers()) {
    throw ConfigError("read_layer outside the trace");
  }
  const AnswerSource attribute = rule.answer_source == AnswerSource::demonstrations
                                     ? infer_attribute(episode)
                                     : rule.answer_source;

  int best = spans.query_image.begin;
  double best_mass = -1.0;
  for (int j = spans.query_image.begin; j < spans.query_image.end; ++j) {
    double mass = 0.0;
    for (int h = 0; h < trace.heads(); ++h) mass += trace.at(rule.read_layer, h, spans.query_last, j);
    mass /= trace.heads();
    if (mass > best_mass) {
      best_mass = mass;
      best = j;
    }
  }

  const int cell = episode.tokens[best];
  if (cell < vocab::kFirstCellCode || cell >= vocab::kUsedSize) return vocab::kUnknown;
  const int code = cell - vocab::kFirstCellCode;
  return attribute == AnswerSource::shape
             ? vocab::shape_token(static_cast<Shape>(code / kNumColors))
             : vocab::color_token(static_cast<Color>(code % kNumColors));
}

}  // namespace mgilab
