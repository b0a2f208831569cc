// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "mgilab/episodes.hpp"
#include "mgilab/span_map.hpp"

namespace mgilab {

// Word-level vocabulary. Layout of the id space:
//   [0, 7)     specials <pad> <bos> <eos> <sep> <img> </img> <unk>
//   [7, 20)    structural words and punctuation
//   [20, 24)   shape words
//   [24, 34)   color words
//   [34, 44)   digits
//   44         empty image cell
//   [45, 85)   image cell codes, 45 + shape * 10 + color
// Every label is a single token.
namespace vocab {

inline constexpr int kPad = 0;
inline constexpr int kBos = 1;
inline constexpr int kEos = 2;
inline constexpr int kSep = 3;
inline constexpr int kImageBegin = 4;
inline constexpr int kImageEnd = 5;
inline constexpr int kUnknown = 6;
inline constexpr int kFirstWord = 7;
inline constexpr int kFirstShape = 20;
inline constexpr int kFirstColor = 24;
inline constexpr int kFirstDigit = 34;
inline constexpr int kEmptyCell = 44;
inline constexpr int kFirstCellCode = 45;
inline constexpr int kUsedSize = 85;

int shape_token(Shape s);
int color_token(Color c);
int cell_token(const CellCode& code);
bool is_cell_token(int id);
// Ids a decoder may emit: <eos>, <sep>, <unk>, words, attribute words and
// digits. Image markers and cell codes are input-only.
bool is_emittable(int id);

// Id of a word ("Question", ":", "star", "7", ...); kUnknown if absent.
int word_id(std::string_view word);
std::string_view token_text(int id);

// Splits on whitespace and isolates ':', ',', '?' and newlines (newline maps
// to <sep>).
std::vector<int> encode_text(std::string_view text);
// Joins word tokens with single spaces, attaching punctuation to the previous
// word. Specials are rendered literally.
std::string decode(const std::vector<int>& ids);

}  // namespace vocab

struct TokenizedEpisode {
  std::vector<int> tokens;
  SpanMap spans;
  Modality modality = Modality::multimodal;
};

// Layout: <bos> then per demonstration
//   multimodal: <img> cells... </img> Question : ... ? Answer : <label> <sep>
//   text:       Objects : ... <sep> Question : ... ? Answer : <label> <sep>
// and the query in the same format ending after "Answer :".
TokenizedEpisode tokenize_episode(const Episode& episode);

}  // namespace mgilab
