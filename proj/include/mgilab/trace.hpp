// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "mgilab/span_map.hpp"

namespace mgilab {

// Full post-softmax attention for one sequence: for every (layer, head) an
// seq_len x seq_len row-stochastic, causal matrix. Storage is layer-major,
// then head-major, then row-major, the same order as the on-disk payload.
class AttentionTrace {
 public:
  AttentionTrace() = default;
  AttentionTrace(int layers, int heads, SpanMap spans);

  int layers() const { return layers_; }
  int heads() const { return heads_; }
  int seq_len() const { return seq_len_; }
  const SpanMap& spans() const { return spans_; }
  void set_spans(SpanMap spans);

  std::span<float> row(int layer, int head, int query) {
    return {data_.data() + offset(layer, head, query), static_cast<std::size_t>(seq_len_)};
  }
  std::span<const float> row(int layer, int head, int query) const {
    return {data_.data() + offset(layer, head, query), static_cast<std::size_t>(seq_len_)};
  }
  float at(int layer, int head, int query, int key) const {
    return data_[offset(layer, head, query) + key];
  }

  std::span<float> data() { return data_; }
  std::span<const float> data() const { return data_; }

  // Largest |row sum - 1| over all rows, and whether any entry above the
  // diagonal is non-zero.
  double max_row_sum_error() const;
  bool is_causal() const;

  friend bool operator==(const AttentionTrace&, const AttentionTrace&) = default;

 private:
  std::size_t offset(int layer, int head, int query) const {
    return ((static_cast<std::size_t>(layer) * heads_ + head) * seq_len_ + query) *
           static_cast<std::size_t>(seq_len_);
  }

  int layers_ = 0;
  int heads_ = 0;
  int seq_len_ = 0;
  SpanMap spans_;
  std::vector<float> data_;
};

}  // namespace mgilab
