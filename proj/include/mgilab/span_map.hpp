// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <vector>

namespace mgilab {

// Half-open token interval [begin, end).
struct Span {
  int begin = 0;
  int end = 0;

  int size() const { return end - begin; }
  bool empty() const { return end <= begin; }
  bool contains(int i) const { return i >= begin && i < end; }
  friend bool operator==(const Span&, const Span&) = default;
};

struct DemoSpans {
  Span block;     // whole demonstration, including separators
  Span image;     // image cell tokens; empty for text-only episodes
  Span question;  // "Question : ... ?"
  Span label;     // answer label token(s)
  friend bool operator==(const DemoSpans&, const DemoSpans&) = default;
};

// Locates the demonstration image/label tokens and the query positions in a
// flat token sequence.
struct SpanMap {
  std::vector<DemoSpans> demos;
  Span query_block;
  Span query_image;
  Span query_question;
  int query_last = 0;  // final prompt position
  int seq_len = 0;

  bool has_images() const;
  // Demo image spans followed by the query image span, skipping empty ones.
  std::vector<Span> image_spans() const;
  // Throws mgilab::Error when spans overlap, are out of order or out of bounds.
  void validate() const;
  friend bool operator==(const SpanMap&, const SpanMap&) = default;
};

}  // namespace mgilab
