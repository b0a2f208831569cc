// SPDX-License-Identifier: Apache-2.0
#include "mgilab/trace.hpp"

#include <algorithm>
#include <cmath>

#include "mgilab/error.hpp"
#include "mgilab/numeric.hpp"

namespace mgilab {

AttentionTrace::AttentionTrace(int layers, int heads, SpanMap spans)
    : layers_(layers), heads_(heads), seq_len_(spans.seq_len), spans_(std::move(spans)) {
  if (layers <= 0 || heads <= 0 || seq_len_ <= 0) throw Error("invalid trace shape");
  data_.assign(static_cast<std::size_t>(layers) * heads * seq_len_ * seq_len_, 0.0f);
}

void AttentionTrace::set_spans(SpanMap spans) {
  if (spans.seq_len != seq_len_) throw Error("span map length does not match trace");
  spans_ = std::move(spans);
}

double AttentionTrace::max_row_sum_error() const {
  double worst = 0.0;
  for (int l = 0; l < layers_; ++l) {
    for (int h = 0; h < heads_; ++h) {
      for (int i = 0; i < seq_len_; ++i) {
        worst = std::max(worst, std::abs(sum(row(l, h, i)) - 1.0));
      }
    }
  }
  return worst;
}

bool AttentionTrace::is_causal() const {
  for (int l = 0; l < layers_; ++l) {
    for (int h = 0; h < heads_; ++h) {
      for (int i = 0; i < seq_len_; ++i) {
        const auto r = row(l, h, i);
        if (std::any_of(r.begin() + i + 1, r.end(), [](float x) { return x != 0.0f; })) {
          return false;
        }
      }
    }
  }
  return true;
}

}  // namespace mgilab
