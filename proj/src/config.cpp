// SPDX-License-Identifier: Apache-2.0
#include "mgilab/config.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "mgilab/error.hpp"

namespace mgilab {

using nlohmann::json;

namespace {

constexpr ConfigKey kKeys[] = {
    {"seed", "uint", "(required)", "master seed; default for every other seed"},
    {"threads", "int", "0", "worker threads, 0 = hardware concurrency (capped by MGI_LAB_THREADS)"},
    {"output", "path", "out", "output directory"},
    {"persist_traces", "bool", "false", "eval: write per-episode traces under <output>/traces"},
    {"dataset.count", "int", "2000", "pool size"},
    {"dataset.shape_fraction", "float", "0.5", "fraction of shape-task samples"},
    {"dataset.grid_width", "int", "4", "grid columns"},
    {"dataset.grid_height", "int", "4", "grid rows"},
    {"dataset.min_objects", "int", "4", "fewest objects per scene"},
    {"dataset.max_objects", "int", "8", "most objects per scene"},
    {"dataset.seed", "uint", "seed", "pool seed"},
    {"dataset.query_per_category", "int", "500", "test samples per task attribute"},
    {"dataset.path", "path", "-", "eval: directory holding samples.jsonl"},
    {"model.kind", "toy|scripted", "toy", "responder"},
    {"model.layers", "int", "8", "layers"},
    {"model.heads", "int", "4", "attention heads"},
    {"model.model_dim", "int", "64", "toy model width"},
    {"model.max_seq_len", "int", "512", "toy model context length"},
    {"model.seed", "uint", "seed", "toy model weight seed"},
    {"model.max_new_tokens", "int", "4", "toy model decode budget"},
    {"model.read_layer", "int", "7", "scripted: layer whose query attention decides the answer"},
    {"model.answer_source", "demonstrations|shape|color", "demonstrations",
     "scripted: attribute to answer with"},
    {"model.grounding_layer", "int", "3", "scripted: layer of planted demo grounding"},
    {"model.grounding_strength", "float", "0.8", "scripted: planted grounding mass"},
    {"model.query_layer_begin", "int", "5", "scripted: first layer of planted query rows"},
    {"model.query_pattern", "grounded|misdirected", "grounded", "scripted: planted query rows"},
    {"episode.shots", "[int]", "[4]", "demonstration counts"},
    {"episode.modalities", "[text|multimodal]", "[\"multimodal\"]", "episode modalities"},
    {"episode.query_count", "int", "50", "queries per seed"},
    {"episode.seeds", "[uint]", "[seed]", "episode seeds"},
    {"episode.aligned", "bool", "false",
     "draw demonstrations whose target cell matches the query's"},
    {"intervention.mode", "none|selective_scale|additive|uas", "none",
     "object or list of objects; each entry is one condition"},
    {"intervention.lambda", "float", "2.0", "intervention strength"},
    {"intervention.k", "float", "1.5", "salience threshold multiplier"},
    {"intervention.l_start", "int", "layers/2", "intervene on layers above this one"},
    {"intervention.apply_layers", "[int,int]", "all", "uas layer range [begin, end)"},
    {"intervention.renormalize", "full_row|span", "full_row", "renormalization after editing"},
    {"intervention.decode_steps", "every|first", "every", "decode steps that are steered"},
    {"intervention.query_image", "bool", "true", "also steer attention over the query image"},
    {"sweep.param", "lambda|k|l_start|shots", "-", "swept parameter"},
    {"sweep.values", "[number]", "-", "swept values"},
    {"analyze.source", "demo_labels|query_last", "demo_labels", "ratio source rows"},
    {"analyze.normalization", "image_mass|whole_row", "image_mass", "ratio denominator"},
    {"analyze.trace_dir", "path", "<output>/traces", "directory searched for trace manifests"},
};

bool known_key(std::string_view key) {
  return std::any_of(std::begin(kKeys), std::end(kKeys),
                     [&](const ConfigKey& k) { return k.key == key; });
}

// "dataset", "intervention", ...: overridable as a whole JSON value.
bool known_block(std::string_view key) {
  return std::any_of(std::begin(kKeys), std::end(kKeys), [&](const ConfigKey& k) {
    return k.key.size() > key.size() && k.key.substr(0, key.size()) == key &&
           k.key[key.size()] == '.';
  });
}

// Leaf keys of a config in dotted form. Intervention entries are flattened
// whether the block is an object or a list.
void collect_keys(const json& node, const std::string& prefix, std::vector<std::string>& out) {
  for (const auto& [key, value] : node.items()) {
    const std::string dotted = prefix.empty() ? key : prefix + "." + key;
    if (dotted == "intervention" && value.is_array()) {
      for (const auto& entry : value) {
        if (!entry.is_object()) throw ConfigError("intervention entries must be objects");
        collect_keys(entry, dotted, out);
      }
    } else if (value.is_object()) {
      collect_keys(value, dotted, out);
    } else {
      out.push_back(dotted);
    }
  }
}

const json* find(const json& root, std::string_view dotted) {
  const json* node = &root;
  std::size_t pos = 0;
  while (true) {
    const auto dot = dotted.find('.', pos);
    const std::string part(dotted.substr(pos, dot == std::string_view::npos ? dotted.npos : dot - pos));
    if (!node->is_object() || !node->contains(part)) return nullptr;
    node = &(*node)[part];
    if (dot == std::string_view::npos) return node;
    pos = dot + 1;
  }
}

template <typename T>
void read(const json& root, std::string_view key, T& out) {
  if (const json* v = find(root, key)) {
    try {
      out = v->get<T>();
    } catch (const json::exception&) {
      throw ConfigError("config key '" + std::string(key) + "' has the wrong type");
    }
  }
}

// Accepts a scalar or a list.
template <typename T>
void read_list(const json& root, std::string_view key, std::vector<T>& out) {
  if (const json* v = find(root, key)) {
    try {
      out.clear();
      if (v->is_array()) {
        for (const auto& e : *v) out.push_back(e.get<T>());
      } else {
        out.push_back(v->get<T>());
      }
    } catch (const json::exception&) {
      throw ConfigError("config key '" + std::string(key) + "' has the wrong type");
    }
    if (out.empty()) throw ConfigError("config key '" + std::string(key) + "' is empty");
  }
}

std::string read_string(const json& root, std::string_view key, std::string fallback) {
  read(root, key, fallback);
  return fallback;
}

}  // namespace

std::span<const ConfigKey> config_keys() { return kKeys; }

std::string config_help() {
  std::ostringstream out;
  out << "Config keys (JSON object, dotted paths; override with --set key=value):\n";
  for (const auto& k : kKeys) {
    out << "  " << k.key << " <" << k.type << "> default " << k.fallback << "\n      " << k.help
        << "\n";
  }
  return out.str();
}

void apply_override(json& root, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos || eq == 0) {
    throw ConfigError("override '" + std::string(assignment) + "' must look like key=value");
  }
  const std::string key(assignment.substr(0, eq));
  const std::string raw(assignment.substr(eq + 1));
  if (!known_key(key) && !known_block(key)) {
    throw ConfigError("unknown config key '" + key + "'");
  }
  json value = json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;

  if (!root.is_object()) root = json::object();
  const auto dot = key.find('.');
  if (dot == std::string::npos) {
    root[key] = value;
    return;
  }
  const std::string block = key.substr(0, dot);
  const std::string leaf = key.substr(dot + 1);
  json& target = root[block];
  if (target.is_array()) {
    for (auto& entry : target) entry[leaf] = value;
  } else {
    if (!target.is_object()) target = json::object();
    target[leaf] = value;
  }
}

RunConfig parse_config(const json& root) {
  if (!root.is_object()) throw ConfigError("config must be a JSON object");
  std::vector<std::string> keys;
  collect_keys(root, "", keys);
  for (const auto& k : keys) {
    if (!known_key(k)) throw ConfigError("unknown config key '" + k + "'");
  }
  if (!root.contains("seed")) throw ConfigError("config key 'seed' is required");

  RunConfig c;
  read(root, "seed", c.seed);
  read(root, "threads", c.threads);
  read(root, "persist_traces", c.persist_traces);
  c.output = read_string(root, "output", c.output.string());
  if (c.threads < 0) throw ConfigError("threads must be >= 0");

  auto& pool = c.dataset.pool;
  pool.seed = c.seed;
  read(root, "dataset.count", pool.count);
  read(root, "dataset.shape_fraction", pool.shape_fraction);
  read(root, "dataset.grid_width", pool.grid.width);
  read(root, "dataset.grid_height", pool.grid.height);
  read(root, "dataset.min_objects", pool.min_objects);
  read(root, "dataset.max_objects", pool.max_objects);
  read(root, "dataset.seed", pool.seed);
  read(root, "dataset.query_per_category", c.dataset.query_per_category);
  if (find(root, "dataset.path")) c.dataset.path = read_string(root, "dataset.path", "");
  if (c.dataset.query_per_category < 0) throw ConfigError("dataset.query_per_category must be >= 0");

  auto& m = c.model;
  const std::string kind = read_string(root, "model.kind", "toy");
  if (kind == "toy") {
    m.kind = ModelKind::toy;
  } else if (kind == "scripted") {
    m.kind = ModelKind::scripted;
  } else {
    throw ConfigError("model.kind must be toy or scripted");
  }
  m.toy.seed = c.seed;
  read(root, "model.layers", m.toy.layers);
  read(root, "model.heads", m.toy.heads);
  read(root, "model.model_dim", m.toy.model_dim);
  read(root, "model.max_seq_len", m.toy.max_seq_len);
  read(root, "model.seed", m.toy.seed);
  read(root, "model.max_new_tokens", m.max_new_tokens);
  read(root, "model.read_layer", m.rule.read_layer);
  const std::string source = read_string(root, "model.answer_source", "demonstrations");
  if (source == "demonstrations") {
    m.rule.answer_source = AnswerSource::demonstrations;
  } else if (source == "shape") {
    m.rule.answer_source = AnswerSource::shape;
  } else if (source == "color") {
    m.rule.answer_source = AnswerSource::color;
  } else {
    throw ConfigError("model.answer_source must be demonstrations, shape or color");
  }
  int grounding_layer = m.scenario.grounding_layer;
  int query_begin = m.scenario.query_layer_begin;
  read(root, "model.grounding_layer", grounding_layer);
  read(root, "model.query_layer_begin", query_begin);
  const std::string pattern = read_string(root, "model.query_pattern", "grounded");
  if (pattern == "grounded") {
    m.scenario = synthetic::PlantedScenario::grounded(grounding_layer, query_begin);
  } else if (pattern == "misdirected") {
    m.scenario = synthetic::PlantedScenario::misdirected(grounding_layer, query_begin);
  } else {
    throw ConfigError("model.query_pattern must be grounded or misdirected");
  }
  read(root, "model.grounding_strength", m.scenario.grounding_strength);
  m.toy.validate();
  if (m.max_new_tokens < 1) throw ConfigError("model.max_new_tokens must be >= 1");
  const int layers = m.toy.layers;
  if (m.rule.read_layer < 0 || m.rule.read_layer >= layers) {
    throw ConfigError("model.read_layer outside [0, layers)");
  }
  if (m.scenario.grounding_layer < 0 || m.scenario.grounding_layer >= layers) {
    throw ConfigError("model.grounding_layer outside [0, layers)");
  }
  if (m.scenario.query_layer_begin < 0 || m.scenario.query_layer_begin > layers) {
    throw ConfigError("model.query_layer_begin outside [0, layers]");
  }
  if (!(m.scenario.grounding_strength > 0.0f && m.scenario.grounding_strength <= 1.0f)) {
    throw ConfigError("model.grounding_strength must lie in (0, 1]");
  }

  auto& e = c.episode;
  read_list(root, "episode.shots", e.shots);
  std::vector<std::string> modalities;
  read_list(root, "episode.modalities", modalities);
  if (!modalities.empty()) {
    e.modalities.clear();
    for (const auto& s : modalities) e.modalities.push_back(parse_modality(s));
  }
  read(root, "episode.query_count", e.query_count);
  e.seeds = {c.seed};
  read_list(root, "episode.seeds", e.seeds);
  read(root, "episode.aligned", e.aligned);
  for (int s : e.shots) {
    if (s < 0) throw ConfigError("episode.shots entries must be >= 0");
  }
  if (e.query_count < 1) throw ConfigError("episode.query_count must be >= 1");

  if (const json* iv = find(root, "intervention")) {
    const json list = iv->is_array() ? *iv : json::array({*iv});
    if (list.empty()) throw ConfigError("intervention list is empty");
    for (const auto& entry : list) {
      json patched = entry;
      if (patched.is_object() && !patched.contains("mode")) patched["mode"] = "none";
      InterventionSpec spec;
      try {
        spec = intervention_from_json(patched);
      } catch (const json::exception&) {
        throw ConfigError("intervention block has a value of the wrong type");
      }
      spec.validate(layers);
      c.interventions.push_back(spec);
    }
  }

  c.sweep.param = read_string(root, "sweep.param", "");
  read_list(root, "sweep.values", c.sweep.values);

  const std::string src = read_string(root, "analyze.source", "demo_labels");
  if (src == "demo_labels") {
    c.analyze.source = AttentionSource::demo_labels;
  } else if (src == "query_last") {
    c.analyze.source = AttentionSource::query_last;
  } else {
    throw ConfigError("analyze.source must be demo_labels or query_last");
  }
  const std::string norm = read_string(root, "analyze.normalization", "image_mass");
  if (norm == "image_mass") {
    c.analyze.normalization = RatioNormalization::image_mass;
  } else if (norm == "whole_row") {
    c.analyze.normalization = RatioNormalization::whole_row;
  } else {
    throw ConfigError("analyze.normalization must be image_mass or whole_row");
  }
  if (find(root, "analyze.trace_dir")) c.analyze.trace_dir = read_string(root, "analyze.trace_dir", "");
  return c;
}

RunConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides) {
  json root = json::object();
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config " + path.string());
    std::stringstream buffer;
    buffer << in.rdbuf();
    root = json::parse(buffer.str(), nullptr, false);
    if (root.is_discarded()) throw ConfigError("config " + path.string() + " is not valid JSON");
  }
  for (const auto& o : overrides) apply_override(root, o);
  return parse_config(root);
}

}  // namespace mgilab
