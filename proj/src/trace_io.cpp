// SPDX-License-Identifier: Apache-2.0
#include "mgilab/trace_io.hpp"

#include <bit>
#include <fstream>
#include <sstream>

#include "mgilab/error.hpp"

namespace mgilab {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json span_to_json(const Span& s) { return json::array({s.begin, s.end}); }

Span span_from_json(const json& j) {
  if (!j.is_array() || j.size() != 2) throw DataError("span must be [begin, end]");
  return Span{j.at(0).get<int>(), j.at(1).get<int>()};
}

json mask_to_json(const EvidenceMask& m) {
  json a = json::array();
  for (Evidence e : m.cells) a.push_back(static_cast<int>(e));
  return a;
}

EvidenceMask mask_from_json(const json& j) {
  EvidenceMask m;
  for (const auto& v : j) {
    const int x = v.get<int>();
    if (x < 0 || x > 2) throw DataError("evidence code out of range");
    m.cells.push_back(static_cast<Evidence>(x));
  }
  return m;
}

}  // namespace

json span_map_to_json(const SpanMap& spans) {
  json demos = json::array();
  for (const auto& d : spans.demos) {
    demos.push_back({{"block", span_to_json(d.block)},
                     {"image", span_to_json(d.image)},
                     {"question", span_to_json(d.question)},
                     {"label", span_to_json(d.label)}});
  }
  return {{"demos", demos},
          {"query_block", span_to_json(spans.query_block)},
          {"query_image", span_to_json(spans.query_image)},
          {"query_question", span_to_json(spans.query_question)},
          {"query_last", spans.query_last},
          {"seq_len", spans.seq_len}};
}

SpanMap span_map_from_json(const json& j) {
  SpanMap s;
  for (const auto& d : j.at("demos")) {
    s.demos.push_back(DemoSpans{span_from_json(d.at("block")), span_from_json(d.at("image")),
                                span_from_json(d.at("question")),
                                span_from_json(d.at("label"))});
  }
  s.query_block = span_from_json(j.at("query_block"));
  s.query_image = span_from_json(j.at("query_image"));
  s.query_question = span_from_json(j.at("query_question"));
  s.query_last = j.at("query_last").get<int>();
  s.seq_len = j.at("seq_len").get<int>();
  return s;
}

void write_file_atomic(const fs::path& path, const std::string& contents) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ConfigError("cannot write " + path.string());
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) throw ConfigError("cannot write " + path.string());
  }
  fs::rename(tmp, path);
}

void write_f32_le(const fs::path& path, std::span<const float> values) {
  std::string bytes(values.size() * 4, '\0');
  for (std::size_t i = 0; i < values.size(); ++i) {
    const auto bits = std::bit_cast<std::uint32_t>(values[i]);
    bytes[4 * i + 0] = static_cast<char>(bits & 0xff);
    bytes[4 * i + 1] = static_cast<char>((bits >> 8) & 0xff);
    bytes[4 * i + 2] = static_cast<char>((bits >> 16) & 0xff);
    bytes[4 * i + 3] = static_cast<char>((bits >> 24) & 0xff);
  }
  write_file_atomic(path, bytes);
}

std::vector<float> read_f32_le(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open payload " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() % 4 != 0) throw DataError("payload size not a multiple of 4: " + path.string());
  std::vector<float> values(bytes.size() / 4);
  for (std::size_t i = 0; i < values.size(); ++i) {
    const auto b = [&](int k) {
      return static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[4 * i + k]));
    };
    values[i] = std::bit_cast<float>(b(0) | (b(1) << 8) | (b(2) << 16) | (b(3) << 24));
  }
  return values;
}

void write_trace(const fs::path& manifest_path, const AttentionTrace& trace,
                 const TraceAnnotations& annotations) {
  fs::path payload = manifest_path;
  payload.replace_extension(".bin");
  json manifest = {{"format", "mgilab-trace"},
                   {"L", trace.layers()},
                   {"H", trace.heads()},
                   {"seq_len", trace.seq_len()},
                   {"dtype", "f32-le"},
                   {"payload", payload.filename().string()},
                   {"span_map", span_map_to_json(trace.spans())}};
  if (!annotations.demo_masks.empty()) {
    json masks = json::array();
    for (const auto& m : annotations.demo_masks) masks.push_back(mask_to_json(m));
    manifest["demo_masks"] = masks;
  }
  if (annotations.query_mask) manifest["query_mask"] = mask_to_json(*annotations.query_mask);
  if (!annotations.outcome.empty()) manifest["outcome"] = annotations.outcome;
  if (annotations.task) manifest["task"] = std::string(to_string(*annotations.task));

  // Payload first so a manifest never points at a missing payload.
  write_f32_le(payload, trace.data());
  write_file_atomic(manifest_path, manifest.dump(2) + "\n");
}

TraceFile read_trace(const fs::path& manifest_path) {
  const std::string where = manifest_path.string();
  try {
    std::ifstream in(manifest_path);
    if (!in) throw DataError("cannot open");
    const json m = json::parse(in);
    if (m.value("dtype", "") != "f32-le") throw DataError("dtype must be f32-le");
    const int layers = m.at("L").get<int>();
    const int heads = m.at("H").get<int>();
    const int seq_len = m.at("seq_len").get<int>();
    SpanMap spans = span_map_from_json(m.at("span_map"));
    if (spans.seq_len != seq_len) throw DataError("span_map seq_len mismatch");
    spans.validate();

    fs::path payload = manifest_path.parent_path() / m.at("payload").get<std::string>();
    std::vector<float> values = read_f32_le(payload);

    TraceFile file{AttentionTrace(layers, heads, spans), {}};
    if (values.size() != file.trace.data().size()) throw DataError("payload size mismatch");
    std::copy(values.begin(), values.end(), file.trace.data().begin());

    if (m.contains("demo_masks")) {
      for (const auto& mj : m.at("demo_masks")) file.annotations.demo_masks.push_back(mask_from_json(mj));
    }
    if (m.contains("query_mask")) file.annotations.query_mask = mask_from_json(m.at("query_mask"));
    file.annotations.outcome = m.value("outcome", "");
    if (m.contains("task")) file.annotations.task = parse_task(m.at("task").get<std::string>());
    return file;
  } catch (const DataError& e) {
    throw DataError(where + ": " + e.what());
  } catch (const std::exception& e) {
    throw DataError(where + ": malformed trace manifest (" + e.what() + ")");
  }
}

}  // namespace mgilab
