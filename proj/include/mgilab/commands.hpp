// SPDX-License-Identifier: Apache-2.0
//
// The four CLI commands as library calls. Every file is written through a
// temporary sibling and renamed into place; outputs depend only on the
// config, never on timing or worker count (latencies go to timing.json).
#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mgilab/config.hpp"
#include "mgilab/episodes.hpp"

namespace mgilab {

enum class SplitTag { support, test };

struct Dataset {
  std::vector<OutlierSample> samples;
  std::vector<SplitTag> splits;  // aligned with samples
};

nlohmann::json sample_to_json(const OutlierSample& sample, SplitTag split);
OutlierSample sample_from_json(const nlohmann::json& j, SplitTag* split = nullptr);

// Missing directory or samples file: ConfigError. Malformed content: DataError.
Dataset load_dataset(const std::filesystem::path& dir);

// <output>/samples.jsonl and <output>/manifest.json.
void cmd_gen(const RunConfig& config);
// <output>/report.json, summary.csv, timing.json and, with persist_traces,
// traces/<cell>/<seed>/<episode>.json.
void cmd_eval(const RunConfig& config);
// fig4_entropy.csv, fig5_ratios.csv, fig6_lasttoken.csv, fig8_rat.csv,
// fig9_heads.csv under <output>. Malformed or missing traces: DataError.
void cmd_analyze(const RunConfig& config);
// <output>/sweep.csv and sweep.json.
void cmd_sweep(const RunConfig& config);

// Exit code for an exception escaping a command: 2 config, 3 data, 1 other.
int exit_code_for(const std::exception& e);

}  // namespace mgilab
