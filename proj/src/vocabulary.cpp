// SPDX-License-Identifier: Apache-2.0
#include "mgilab/vocabulary.hpp"

#include <array>
#include <cctype>
#include <string>

#include "mgilab/error.hpp"

namespace mgilab {

bool SpanMap::has_images() const {
  if (!query_image.empty()) return true;
  for (const auto& d : demos) {
    if (!d.image.empty()) return true;
  }
  return false;
}

std::vector<Span> SpanMap::image_spans() const {
  std::vector<Span> out;
  for (const auto& d : demos) {
    if (!d.image.empty()) out.push_back(d.image);
  }
  if (!query_image.empty()) out.push_back(query_image);
  return out;
}

void SpanMap::validate() const {
  auto check = [&](const Span& s, const char* what) {
    if (s.begin < 0 || s.end < s.begin || s.end > seq_len) {
      throw Error(std::string("span out of bounds: ") + what);
    }
  };
  int cursor = 0;
  auto check_inner = [&](const Span& outer, const Span& inner, const char* what) {
    check(inner, what);
    if (inner.empty()) return;
    if (inner.begin < outer.begin || inner.end > outer.end) {
      throw Error(std::string("span escapes its block: ") + what);
    }
    if (inner.begin < cursor) throw Error(std::string("overlapping spans: ") + what);
    cursor = inner.end;
  };
  for (const auto& d : demos) {
    check(d.block, "demo block");
    if (d.block.begin < cursor) throw Error("overlapping demonstration blocks");
    cursor = d.block.begin;
    check_inner(d.block, d.image, "demo image");
    check_inner(d.block, d.question, "demo question");
    check_inner(d.block, d.label, "demo label");
    cursor = d.block.end;
  }
  check(query_block, "query block");
  if (query_block.begin < cursor) throw Error("overlapping query block");
  cursor = query_block.begin;
  check_inner(query_block, query_image, "query image");
  check_inner(query_block, query_question, "query question");
  if (query_last < 0 || query_last >= seq_len) throw Error("query position out of bounds");
}

namespace vocab {

namespace {

// Ids [7, 20) in order.
constexpr std::array<std::string_view, 13> kWords = {
    "Objects", "Question", "Answer", "Which", "object", "is", "the",
    "odd",     "one",      "out",    ":",     ",",      "?"};

constexpr std::array<std::string_view, 7> kSpecials = {
    "<pad>", "<bos>", "<eos>", "<sep>", "<img>", "</img>", "<unk>"};

constexpr std::array<std::string_view, 10> kDigits = {"0", "1", "2", "3", "4",
                                                      "5", "6", "7", "8", "9"};

std::string cell_text(int id) {
  const int code = id - kFirstCellCode;
  return "<cell:" + std::string(to_string(static_cast<Shape>(code / kNumColors))) + ":" +
         std::string(to_string(static_cast<Color>(code % kNumColors))) + ">";
}

bool is_punct(char c) { return c == ':' || c == ',' || c == '?'; }

}  // namespace

int shape_token(Shape s) { return kFirstShape + static_cast<int>(s); }
int color_token(Color c) { return kFirstColor + static_cast<int>(c); }
int cell_token(const CellCode& code) {
  if (code.empty()) return kEmptyCell;
  return kFirstCellCode + code.shape * kNumColors + code.color;
}
bool is_cell_token(int id) { return id >= kEmptyCell && id < kUsedSize; }

bool is_emittable(int id) {
  return id == kEos || id == kSep || (id >= kUnknown && id < kEmptyCell);
}

int word_id(std::string_view word) {
  for (std::size_t i = 0; i < kSpecials.size(); ++i) {
    if (kSpecials[i] == word) return static_cast<int>(i);
  }
  for (std::size_t i = 0; i < kWords.size(); ++i) {
    if (kWords[i] == word) return kFirstWord + static_cast<int>(i);
  }
  if (auto s = parse_shape(word)) return shape_token(*s);
  if (auto c = parse_color(word)) return color_token(*c);
  for (std::size_t i = 0; i < kDigits.size(); ++i) {
    if (kDigits[i] == word) return kFirstDigit + static_cast<int>(i);
  }
  return kUnknown;
}

std::string_view token_text(int id) {
  static const std::array<std::string, kUsedSize - kEmptyCell> cell_names = [] {
    std::array<std::string, kUsedSize - kEmptyCell> names;
    names[0] = "<cell:empty>";
    for (int i = kFirstCellCode; i < kUsedSize; ++i) names[i - kEmptyCell] = cell_text(i);
    return names;
  }();
  if (id >= 0 && id < kFirstWord) return kSpecials[id];
  if (id < kFirstShape) return kWords[id - kFirstWord];
  if (id < kFirstColor) return to_string(static_cast<Shape>(id - kFirstShape));
  if (id < kFirstDigit) return to_string(static_cast<Color>(id - kFirstColor));
  if (id < kEmptyCell) return kDigits[id - kFirstDigit];
  if (id < kUsedSize) return cell_names[id - kEmptyCell];
  return "<unused>";
}

std::vector<int> encode_text(std::string_view text) {
  std::vector<int> ids;
  std::string word;
  auto flush = [&] {
    if (!word.empty()) ids.push_back(word_id(word));
    word.clear();
  };
  for (char c : text) {
    if (c == '\n') {
      flush();
      ids.push_back(kSep);
    } else if (std::isspace(static_cast<unsigned char>(c))) {
      flush();
    } else if (is_punct(c)) {
      flush();
      ids.push_back(word_id(std::string_view(&c, 1)));
    } else {
      word += c;
    }
  }
  flush();
  return ids;
}

std::string decode(const std::vector<int>& ids) {
  std::string out;
  for (int id : ids) {
    const std::string_view t = token_text(id);
    const bool punct = t.size() == 1 && is_punct(t[0]);
    if (!out.empty() && !punct) out += ' ';
    out += t;
  }
  return out;
}

}  // namespace vocab

namespace {

void append_question_answer(std::vector<int>& tokens, Span& question) {
  question.begin = static_cast<int>(tokens.size());
  const auto q = vocab::encode_text("Question: " + std::string(kQuestion));
  tokens.insert(tokens.end(), q.begin(), q.end());
  question.end = static_cast<int>(tokens.size());
  tokens.push_back(vocab::word_id("Answer"));
  tokens.push_back(vocab::word_id(":"));
}

void append_scene(std::vector<int>& tokens, const OutlierSample& s, Modality m, Span& image) {
  if (m == Modality::multimodal) {
    tokens.push_back(vocab::kImageBegin);
    image.begin = static_cast<int>(tokens.size());
    for (const auto& cell : render_image(s).cells) tokens.push_back(vocab::cell_token(cell));
    image.end = static_cast<int>(tokens.size());
    tokens.push_back(vocab::kImageEnd);
  } else {
    // Objects line only; the question is appended separately.
    const std::string text = render_text(s);
    const auto line = vocab::encode_text(std::string_view(text).substr(0, text.find('\n') + 1));
    image = Span{static_cast<int>(tokens.size()), static_cast<int>(tokens.size())};
    tokens.insert(tokens.end(), line.begin(), line.end());
  }
}

}  // namespace

TokenizedEpisode tokenize_episode(const Episode& episode) {
  TokenizedEpisode out;
  out.modality = episode.modality;
  auto& tokens = out.tokens;
  tokens.push_back(vocab::kBos);

  for (const auto& demo : episode.demonstrations) {
    DemoSpans d;
    d.block.begin = static_cast<int>(tokens.size());
    append_scene(tokens, demo, episode.modality, d.image);
    append_question_answer(tokens, d.question);
    d.label.begin = static_cast<int>(tokens.size());
    const auto label = vocab::encode_text(demo.label);
    tokens.insert(tokens.end(), label.begin(), label.end());
    d.label.end = static_cast<int>(tokens.size());
    tokens.push_back(vocab::kSep);
    d.block.end = static_cast<int>(tokens.size());
    out.spans.demos.push_back(d);
  }

  auto& sm = out.spans;
  sm.query_block.begin = static_cast<int>(tokens.size());
  append_scene(tokens, episode.query, episode.modality, sm.query_image);
  append_question_answer(tokens, sm.query_question);
  sm.query_block.end = static_cast<int>(tokens.size());
  sm.query_last = static_cast<int>(tokens.size()) - 1;
  sm.seq_len = static_cast<int>(tokens.size());
  return out;
}

}  // namespace mgilab
