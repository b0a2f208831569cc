// SPDX-License-Identifier: Apache-2.0
#include "mgilab/mgi.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "mgilab/error.hpp"
#include "mgilab/trace_io.hpp"

namespace mgilab {

using nlohmann::json;

AttentionSet collect_attention_set(const AttentionTrace& trace, const SpanMap& spans, int layer) {
  if (layer < 0 || layer >= trace.layers()) throw Error("layer out of range");
  if (spans.demos.empty()) throw Error("no demonstrations");
  AttentionSet set;
  set.layer = layer;
  set.demos = static_cast<int>(spans.demos.size());
  set.heads = trace.heads();
  set.rows.reserve(static_cast<std::size_t>(set.demos) * set.heads);
  for (const auto& d : spans.demos) {
    if (d.image.empty()) throw ConfigError("no image spans");
    if (d.label.empty()) throw Error("empty label span");
    const float inv = 1.0f / static_cast<float>(d.label.size());
    for (int h = 0; h < trace.heads(); ++h) {
      Vector row(d.image.size(), 0.0f);
      if (d.label.size() == 1) {
        const auto src = trace.row(layer, h, d.label.begin);
        std::copy_n(src.begin() + d.image.begin, d.image.size(), row.begin());
      } else {
        for (int p = d.label.begin; p < d.label.end; ++p) {
          const auto src = trace.row(layer, h, p);
          for (int j = 0; j < d.image.size(); ++j) row[j] += src[d.image.begin + j];
        }
        for (float& x : row) x *= inv;
      }
      set.rows.push_back(std::move(row));
    }
  }
  return set;
}

namespace {

double row_entropy(std::span<const float> row) {
  const double mass = sum(row);
  if (!(mass > 0.0)) return std::log(static_cast<double>(row.size()));
  Vector p(row.begin(), row.end());
  normalize_l1_inplace(p);
  return entropy(p);
}

}  // namespace

std::vector<double> grounding_entropy_by_layer(const AttentionTrace& trace, const SpanMap& spans) {
  std::vector<double> totals(trace.layers(), 0.0);
  for (int l = 0; l < trace.layers(); ++l) {
    const AttentionSet set = collect_attention_set(trace, spans, l);
    double total = 0.0;
    for (const auto& row : set.rows) total += row_entropy(row);
    totals[l] = total;
  }
  return totals;
}

int peak_grounding_layer(const AttentionTrace& trace, const SpanMap& spans) {
  const auto totals = grounding_entropy_by_layer(trace, spans);
  return static_cast<int>(std::min_element(totals.begin(), totals.end()) - totals.begin());
}

TaskMapping estimate_task_mapping(const AttentionTrace& trace, const SpanMap& spans) {
  const int peak = peak_grounding_layer(trace, spans);
  return TaskMapping{peak, collect_attention_set(trace, spans, peak)};
}

void write_task_mapping(const std::filesystem::path& manifest_path, const TaskMapping& mapping) {
  std::filesystem::path payload = manifest_path;
  payload.replace_extension(".bin");
  Vector flat;
  json lengths = json::array();
  for (const auto& r : mapping.rows.rows) {
    flat.insert(flat.end(), r.begin(), r.end());
    lengths.push_back(r.size());
  }
  const json manifest = {{"format", "mgilab-task-mapping"},
                         {"peak_layer", mapping.peak_layer},
                         {"n", mapping.rows.demos},
                         {"H", mapping.rows.heads},
                         {"row_lengths", lengths},
                         {"dtype", "f32-le"},
                         {"payload", payload.filename().string()}};
  write_f32_le(payload, flat);
  write_file_atomic(manifest_path, manifest.dump(2) + "\n");
}

bool SalientIndexSet::contains(int j) const {
  return std::binary_search(indices.begin(), indices.end(), j);
}

SalientIndexSet salient_indices(std::span<const float> mapping_row, double k) {
  SalientIndexSet s;
  if (mapping_row.empty()) return s;
  const double mean = sum(mapping_row) / static_cast<double>(mapping_row.size());
  const double threshold = k * mean;
  for (std::size_t j = 0; j < mapping_row.size(); ++j) {
    if (static_cast<double>(mapping_row[j]) > threshold) s.indices.push_back(static_cast<int>(j));
  }
  return s;
}

namespace {

void check_span(Span span, std::size_t row_len) {
  if (span.begin < 0 || span.end < span.begin || static_cast<std::size_t>(span.end) > row_len) {
    throw Error("invalid span");
  }
}

void scale_salient(std::span<float> row, Span span, const SalientIndexSet& salient, double lambda) {
  for (int j : salient.indices) {
    if (j < 0 || j >= span.size()) throw Error("salient index outside span");
    float& x = row[span.begin + j];
    x = static_cast<float>(x * lambda);
  }
}

void add_mapping(std::span<float> row, Span span, std::span<const float> mapping, double lambda) {
  for (int j = 0; j < span.size(); ++j) {
    float& x = row[span.begin + j];
    x = static_cast<float>(x + lambda * mapping[j]);
  }
}

void rescale_span(std::span<float> row, Span span, double target_mass) {
  const double mass = sum(row.subspan(span.begin, span.size()));
  if (!(mass > 0.0)) return;
  const double factor = target_mass / mass;
  for (int j = span.begin; j < span.end; ++j) row[j] = static_cast<float>(row[j] * factor);
}

void renormalize_full(std::span<float> row) {
  const double total = sum(row);
  if (!(total > 0.0)) throw Error("invalid attention mass");
  for (float& x : row) x = static_cast<float>(x / total);
}

void uniformize(std::span<float> row, Span span) {
  if (span.empty()) return;
  const double mass = sum(row.subspan(span.begin, span.size()));
  const float value = static_cast<float>(mass / span.size());
  std::fill(row.begin() + span.begin, row.begin() + span.end, value);
}

}  // namespace

Vector apply_selective_scale(std::span<const float> row, Span span, const SalientIndexSet& salient,
                             double lambda, Renormalization renorm) {
  check_span(span, row.size());
  if (!(lambda > 1.0)) throw ConfigError("selective scaling requires lambda > 1");
  Vector out(row.begin(), row.end());
  if (salient.indices.empty()) return out;
  const double original_mass = sum(row.subspan(span.begin, span.size()));
  scale_salient(out, span, salient, lambda);
  if (renorm == Renormalization::full_row) {
    renormalize_full(out);
  } else {
    rescale_span(out, span, original_mass);
  }
  return out;
}

Vector apply_additive(std::span<const float> row, Span span, std::span<const float> mapping_row,
                      double lambda, Renormalization renorm) {
  check_span(span, row.size());
  if (!(lambda > 0.0)) throw ConfigError("additive injection requires lambda > 0");
  if (mapping_row.size() != static_cast<std::size_t>(span.size())) {
    throw Error("mapping row length does not match span");
  }
  Vector out(row.begin(), row.end());
  const double original_mass = sum(row.subspan(span.begin, span.size()));
  add_mapping(out, span, mapping_row, lambda);
  if (renorm == Renormalization::full_row) {
    renormalize_full(out);
  } else {
    rescale_span(out, span, original_mass);
  }
  return out;
}

Vector apply_uas(std::span<const float> row, std::span<const Span> spans) {
  Vector out(row.begin(), row.end());
  for (const Span& s : spans) {
    check_span(s, row.size());
    uniformize(out, s);
  }
  return out;
}

std::string_view to_string(InterventionMode m) {
  switch (m) {
    case InterventionMode::none: return "none";
    case InterventionMode::selective_scale: return "selective_scale";
    case InterventionMode::additive: return "additive";
    case InterventionMode::uas: return "uas";
  }
  return "none";
}

InterventionMode parse_mode(std::string_view s) {
  for (auto m : {InterventionMode::none, InterventionMode::selective_scale,
                 InterventionMode::additive, InterventionMode::uas}) {
    if (to_string(m) == s) return m;
  }
  throw ConfigError("unknown intervention mode '" + std::string(s) + "'");
}

void InterventionSpec::validate(int num_layers) const {
  if (mode == InterventionMode::selective_scale && !(lambda > 1.0)) {
    throw ConfigError("selective_scale requires lambda > 1");
  }
  if (mode == InterventionMode::additive && !(lambda > 0.0)) {
    throw ConfigError("additive requires lambda > 0");
  }
  if (!(k > 0.0)) throw ConfigError("k must be > 0");
  const int ls = resolved_l_start(num_layers);
  if (ls < 0 || ls >= num_layers) throw ConfigError("l_start must lie in [0, L)");
  if (apply_layers) {
    const int end = apply_layers->end < 0 ? num_layers : apply_layers->end;
    if (apply_layers->begin < 0 || end > num_layers || apply_layers->begin >= end) {
      throw ConfigError("apply_layers must be a non-empty range within [0, L)");
    }
  }
}

std::string InterventionSpec::describe() const {
  std::ostringstream os;
  os << to_string(mode);
  if (needs_mapping()) {
    os << "(lambda=" << lambda;
    if (mode == InterventionMode::selective_scale) os << ",k=" << k;
    os << ",l_start=" << (l_start ? std::to_string(*l_start) : std::string("mid")) << ")";
  }
  return os.str();
}

json to_json(const InterventionSpec& spec) {
  json j = {{"mode", std::string(to_string(spec.mode))},
            {"lambda", spec.lambda},
            {"k", spec.k},
            {"l_start", spec.l_start ? json(*spec.l_start) : json(nullptr)},
            {"apply_layers", spec.apply_layers
                                 ? json::array({spec.apply_layers->begin, spec.apply_layers->end})
                                 : json(nullptr)},
            {"renormalize", spec.renorm == Renormalization::full_row ? "full_row" : "span"},
            {"decode_steps", spec.steps == DecodeSteps::every ? "every" : "first"},
            {"query_image", spec.query_image}};
  return j;
}

InterventionSpec intervention_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("intervention block must be an object");
  InterventionSpec s;
  for (const auto& [key, value] : j.items()) {
    if (key == "mode") {
      s.mode = parse_mode(value.get<std::string>());
    } else if (key == "lambda") {
      s.lambda = value.get<double>();
    } else if (key == "k") {
      s.k = value.get<double>();
    } else if (key == "l_start") {
      if (!value.is_null()) s.l_start = value.get<int>();
    } else if (key == "apply_layers") {
      if (!value.is_null()) {
        if (!value.is_array() || value.size() != 2) {
          throw ConfigError("apply_layers must be [begin, end]");
        }
        s.apply_layers = LayerRange{value.at(0).get<int>(), value.at(1).get<int>()};
      }
    } else if (key == "renormalize") {
      const auto v = value.get<std::string>();
      if (v == "full_row") {
        s.renorm = Renormalization::full_row;
      } else if (v == "span") {
        s.renorm = Renormalization::span;
      } else {
        throw ConfigError("renormalize must be full_row or span");
      }
    } else if (key == "decode_steps") {
      const auto v = value.get<std::string>();
      if (v == "every") {
        s.steps = DecodeSteps::every;
      } else if (v == "first") {
        s.steps = DecodeSteps::first;
      } else {
        throw ConfigError("decode_steps must be every or first");
      }
    } else if (key == "query_image") {
      s.query_image = value.get<bool>();
    } else {
      throw ConfigError("unknown intervention key '" + key + "'");
    }
  }
  return s;
}

namespace {

class MappingHook final : public InterventionHook {
 public:
  struct Target {
    Span span;
    std::vector<Vector> mapping;             // per head
    std::vector<SalientIndexSet> salient;    // per head, selective mode only
  };

  MappingHook(const InterventionSpec& spec, int first_layer, int query_last,
              std::vector<Target> targets)
      : mode_(spec.mode),
        lambda_(spec.lambda),
        renorm_(spec.renorm),
        steps_(spec.steps),
        first_layer_(first_layer),
        query_last_(query_last),
        targets_(std::move(targets)) {}

  bool applies(int layer, int position) const override {
    if (layer < first_layer_) return false;
    return position == query_last_ || (steps_ == DecodeSteps::every && position > query_last_);
  }

  void apply(const HookSite& site, std::span<float> row) const override {
    if (renorm_ == Renormalization::span) {
      std::vector<double> masses;
      masses.reserve(targets_.size());
      for (const Target& t : targets_) masses.push_back(sum(row.subspan(t.span.begin, t.span.size())));
      modify(site.head, row);
      for (std::size_t t = 0; t < targets_.size(); ++t) rescale_span(row, targets_[t].span, masses[t]);
    } else {
      modify(site.head, row);
      renormalize_full(row);
    }
  }

 private:
  void modify(int head, std::span<float> row) const {
    for (const Target& t : targets_) {
      if (mode_ == InterventionMode::selective_scale) {
        scale_salient(row, t.span, t.salient[head], lambda_);
      } else {
        add_mapping(row, t.span, t.mapping[head], lambda_);
      }
    }
  }

  InterventionMode mode_;
  double lambda_;
  Renormalization renorm_;
  DecodeSteps steps_;
  int first_layer_;
  int query_last_;
  std::vector<Target> targets_;
};

class UniformHook final : public InterventionHook {
 public:
  UniformHook(LayerRange layers, int num_layers, std::vector<Span> spans)
      : layers_(layers), num_layers_(num_layers), spans_(std::move(spans)) {}

  bool applies(int layer, int) const override { return layers_.contains(layer, num_layers_); }

  void apply(const HookSite& site, std::span<float> row) const override {
    // Image spans are clipped to the causal prefix of the row.
    for (const Span& s : spans_) {
      const Span clipped{s.begin, std::min(s.end, site.position + 1)};
      uniformize(row, clipped);
    }
  }

 private:
  LayerRange layers_;
  int num_layers_;
  std::vector<Span> spans_;
};

}  // namespace

std::shared_ptr<const InterventionHook> build_intervention_hook(const InterventionSpec& spec,
                                                                const TaskMapping* mapping,
                                                                const SpanMap& spans,
                                                                int num_layers) {
  spec.validate(num_layers);
  switch (spec.mode) {
    case InterventionMode::none:
      return std::make_shared<IdentityHook>();
    case InterventionMode::uas:
      if (!spans.has_images()) throw ConfigError("no image spans");
      return std::make_shared<UniformHook>(spec.apply_layers.value_or(LayerRange{}), num_layers,
                                           spans.image_spans());
    case InterventionMode::selective_scale:
    case InterventionMode::additive:
      break;
  }

  if (!mapping) throw ConfigError("intervention mode " + std::string(to_string(spec.mode)) +
                                  " requires a task mapping");
  const AttentionSet& set = mapping->rows;
  if (set.demos != static_cast<int>(spans.demos.size())) {
    throw ConfigError("task mapping does not match the episode's demonstrations");
  }
  const bool selective = spec.mode == InterventionMode::selective_scale;

  std::vector<MappingHook::Target> targets;
  for (int i = 0; i < set.demos; ++i) {
    MappingHook::Target t;
    t.span = spans.demos[i].image;
    for (int h = 0; h < set.heads; ++h) {
      const auto row = set.row(i, h);
      if (row.size() != static_cast<std::size_t>(t.span.size())) {
        throw ConfigError("task mapping row length does not match image span");
      }
      t.mapping.emplace_back(row.begin(), row.end());
      if (selective) t.salient.push_back(salient_indices(row, spec.k));
    }
    targets.push_back(std::move(t));
  }

  if (spec.query_image && !spans.query_image.empty()) {
    const int len = spans.query_image.size();
    const bool aligned = std::all_of(spans.demos.begin(), spans.demos.end(),
                                     [&](const DemoSpans& d) { return d.image.size() == len; });
    if (aligned && set.demos > 0) {
      MappingHook::Target t;
      t.span = spans.query_image;
      for (int h = 0; h < set.heads; ++h) {
        std::vector<double> acc(len, 0.0);
        for (int i = 0; i < set.demos; ++i) {
          const auto row = set.row(i, h);
          for (int j = 0; j < len; ++j) acc[j] += row[j];
        }
        Vector consensus(len);
        for (int j = 0; j < len; ++j) consensus[j] = static_cast<float>(acc[j] / set.demos);
        if (selective) t.salient.push_back(salient_indices(consensus, spec.k));
        t.mapping.push_back(std::move(consensus));
      }
      targets.push_back(std::move(t));
    }
  }

  return std::make_shared<MappingHook>(spec, spec.resolved_l_start(num_layers) + 1,
                                       spans.query_last, std::move(targets));
}

void apply_hook_to_trace(AttentionTrace& trace, const InterventionHook& hook) {
  const SpanMap& spans = trace.spans();
  for (int l = 0; l < trace.layers(); ++l) {
    for (int p = 0; p < trace.seq_len(); ++p) {
      if (!hook.applies(l, p)) continue;
      for (int h = 0; h < trace.heads(); ++h) hook.apply(HookSite{l, h, p, spans}, trace.row(l, h, p));
    }
  }
}

}  // namespace mgilab
