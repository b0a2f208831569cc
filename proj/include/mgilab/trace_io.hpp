// SPDX-License-Identifier: Apache-2.0
//
// Trace file format: a JSON manifest
//   {"format": "mgilab-trace", "L": .., "H": .., "seq_len": .., "dtype": "f32-le",
//    "payload": "<name>.bin", "span_map": {...}, optional annotations}
// next to a binary payload of little-endian IEEE-754 32-bit floats ordered
// layer-major, then head-major, then row-major. Reading back is bit-exact.
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mgilab/episodes.hpp"
#include "mgilab/trace.hpp"

namespace mgilab {

// Optional metadata carried alongside a trace so that analysis can split by
// outcome and score evidence regions without the originating dataset.
struct TraceAnnotations {
  std::vector<EvidenceMask> demo_masks;  // one per demonstration image
  std::optional<EvidenceMask> query_mask;
  std::string outcome;  // "correct_pred", "error_pred" or empty
  std::optional<TaskAttribute> task;
};

struct TraceFile {
  AttentionTrace trace;
  TraceAnnotations annotations;
};

nlohmann::json span_map_to_json(const SpanMap& spans);
SpanMap span_map_from_json(const nlohmann::json& j);

// Writes <stem>.json and <stem>.bin (manifest_path must end in ".json").
void write_trace(const std::filesystem::path& manifest_path, const AttentionTrace& trace,
                 const TraceAnnotations& annotations = {});

// Throws DataError naming the offending path on any malformed input.
TraceFile read_trace(const std::filesystem::path& manifest_path);

// Raw little-endian f32 payload helpers shared by other exporters.
void write_f32_le(const std::filesystem::path& path, std::span<const float> values);
std::vector<float> read_f32_le(const std::filesystem::path& path);

// Writes to a sibling temporary file and renames it into place.
void write_file_atomic(const std::filesystem::path& path, const std::string& contents);

}  // namespace mgilab
