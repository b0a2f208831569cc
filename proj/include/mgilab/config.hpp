// SPDX-License-Identifier: Apache-2.0
//
// Run configuration shared by every CLI command. A config is a JSON object
// whose keys are listed in config_keys(); anything else is rejected.
// Overrides use dotted keys ("episode.shots=[0,4]") and are applied on top of
// the file before parsing.
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "mgilab/episodes.hpp"
#include "mgilab/metrics.hpp"
#include "mgilab/mgi.hpp"
#include "mgilab/model.hpp"
#include "mgilab/responder.hpp"
#include "mgilab/synthetic.hpp"

namespace mgilab {

struct ConfigKey {
  std::string_view key;
  std::string_view type;
  std::string_view fallback;
  std::string_view help;
};

// Every accepted key in dotted form, in help order.
std::span<const ConfigKey> config_keys();
std::string config_help();

enum class ModelKind { toy, scripted };

struct DatasetBlock {
  PoolConfig pool;
  int query_per_category = 500;
  std::optional<std::filesystem::path> path;  // directory holding samples.jsonl
};

struct ModelBlock {
  ModelKind kind = ModelKind::toy;
  ModelConfig toy;
  int max_new_tokens = 4;
  // Scripted responder and its planted traces.
  ResponderRule rule;
  synthetic::PlantedScenario scenario;
};

struct EpisodeBlock {
  std::vector<int> shots{4};
  std::vector<Modality> modalities{Modality::multimodal};
  int query_count = 50;
  std::vector<std::uint64_t> seeds;
  bool aligned = false;
};

struct SweepBlock {
  std::string param;
  std::vector<double> values;
};

struct AnalyzeBlock {
  AttentionSource source = AttentionSource::demo_labels;
  RatioNormalization normalization = RatioNormalization::image_mass;
  std::optional<std::filesystem::path> trace_dir;
};

struct RunConfig {
  std::uint64_t seed = 0;
  int threads = 0;
  bool persist_traces = false;
  std::filesystem::path output = "out";
  DatasetBlock dataset;
  ModelBlock model;
  EpisodeBlock episode;
  std::vector<InterventionSpec> interventions;  // empty means vanilla only
  SweepBlock sweep;
  AnalyzeBlock analyze;
};

// Sets a dotted key inside a JSON object. The value is parsed as JSON when
// possible and kept as a string otherwise. Overrides of intervention.* apply
// to every entry when the block is a list.
void apply_override(nlohmann::json& root, std::string_view assignment);

// Throws ConfigError on unknown keys, wrong types and missing seed.
RunConfig parse_config(const nlohmann::json& root);

// Reads the file, applies overrides in order, parses.
RunConfig load_config(const std::filesystem::path& path,
                      const std::vector<std::string>& overrides = {});

}  // namespace mgilab
