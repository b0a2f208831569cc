// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "mgilab/trace.hpp"
#include "mgilab/vocabulary.hpp"

namespace mgilab {

enum class AnswerSource {
  demonstrations,  // attribute implied by the demonstration label tokens
  shape,
  color,
};

struct ResponderRule {
  int read_layer = 7;
  AnswerSource answer_source = AnswerSource::demonstrations;
};

// Rule-based stand-in for a model: reads the head-averaged attention of the
// query's final prompt position over the query image at `read_layer` and
// answers with the chosen attribute of the most attended cell (lowest index on
// ties). Empty cells answer <unk>. Throws ConfigError for an empty query image
// span and for an attribute that cannot be inferred.
int scripted_responder(const TokenizedEpisode& episode, const AttentionTrace& trace,
                       const ResponderRule& rule);

}  // namespace mgilab
