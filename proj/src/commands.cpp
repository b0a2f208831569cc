// SPDX-License-Identifier: Apache-2.0
#include "mgilab/commands.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <memory>
#include <sstream>

#include "mgilab/error.hpp"
#include "mgilab/harness.hpp"
#include "mgilab/metrics.hpp"
#include "mgilab/synthetic.hpp"
#include "mgilab/trace_io.hpp"

namespace mgilab {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string num(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) {
    throw ConfigError("cannot create output directory " + dir.string());
  }
}

void write_output(const fs::path& path, const std::string& contents) {
  try {
    write_file_atomic(path, contents);
  } catch (const DataError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError("cannot write " + path.string() + ": " + e.what());
  }
}

struct Responders {
  std::unique_ptr<ToyMllm> model;
  std::unique_ptr<Responder> responder;
};

Responders make_responder(const RunConfig& c) {
  Responders r;
  const auto& m = c.model;
  if (m.kind == ModelKind::toy) {
    r.model = std::make_unique<ToyMllm>(m.toy);
    r.responder = std::make_unique<ModelResponder>(*r.model, m.max_new_tokens);
    return r;
  }
  const int layers = m.toy.layers;
  const int heads = m.toy.heads;
  const auto scenario = m.scenario;
  auto provider = [layers, heads, scenario](const Episode& e, const TokenizedEpisode& t) {
    return synthetic::planted_trace(e, t, layers, heads, scenario);
  };
  const std::string profile =
      "scripted-L" + std::to_string(layers) + "-H" + std::to_string(heads) + "-" +
      (scenario.pattern == synthetic::QueryPattern::grounded ? "grounded" : "misdirected");
  r.responder = std::make_unique<ScriptedResponder>(layers, m.rule, provider, profile);
  return r;
}

struct EvalInputs {
  Dataset dataset;
  std::vector<OutlierSample> support;
  std::vector<OutlierSample> queries;
};

EvalInputs load_inputs(const RunConfig& c) {
  if (!c.dataset.path) throw ConfigError("dataset.path is required");
  EvalInputs in;
  in.dataset = load_dataset(*c.dataset.path);
  for (std::size_t i = 0; i < in.dataset.samples.size(); ++i) {
    (in.dataset.splits[i] == SplitTag::test ? in.queries : in.support)
        .push_back(in.dataset.samples[i]);
  }
  if (in.queries.empty()) throw ConfigError("dataset has no test samples");
  return in;
}

ConditionMatrix make_matrix(const RunConfig& c, const EvalInputs& in) {
  ConditionMatrix m;
  m.modalities = c.episode.modalities;
  m.shots = c.episode.shots;
  m.interventions = c.interventions;
  m.seeds = c.episode.seeds;
  m.query_count = c.episode.query_count;
  m.support = in.support;
  m.queries = in.queries;
  m.aligned_demos = c.episode.aligned;
  m.threads = resolve_threads(c.threads);
  return m;
}

std::string summary_csv(const std::vector<RunReport>& reports) {
  std::string out = summary_csv_header();
  for (const auto& r : reports) out += summary_csv_row(r);
  return out;
}

std::string outcome_name(const EpisodeResult& r) { return r.matched ? "correct_pred" : "error_pred"; }

// ---------------------------------------------------------------- analyze

struct OutcomeAccumulator {
  int traces = 0;
  // fig4
  std::vector<double> entropy;
  std::vector<int> peaks;
  int entropy_n = 0;
  // fig5
  std::vector<std::array<double, 3>> ratios;
  std::vector<int> flagged;
  int ratio_n = 0;
  // fig6
  std::vector<double> label_mass, evidence_mass;
  int label_n = 0, evidence_n = 0;
  // fig8
  std::vector<double> text_mean, image_mean;
  int rat_n = 0;
  // fig9, [target][layer * heads + head]
  std::array<std::vector<double>, 2> heads;
  int head_n = 0;

  void init(int layers, int h) {
    entropy.assign(layers, 0.0);
    peaks.assign(layers, 0);
    ratios.assign(layers, {0.0, 0.0, 0.0});
    flagged.assign(layers, 0);
    label_mass.assign(layers, 0.0);
    evidence_mass.assign(layers, 0.0);
    text_mean.assign(layers, 0.0);
    image_mean.assign(layers, 0.0);
    for (auto& v : heads) v.assign(static_cast<std::size_t>(layers) * h, 0.0);
  }
};

std::string mean_or_blank(double sum, int n) { return n ? num(sum / n) : ""; }

std::vector<fs::path> find_manifests(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw ConfigError("trace directory " + dir.string() + " does not exist");
  std::vector<fs::path> out;
  for (const auto& entry : fs::recursive_directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".json") out.push_back(entry.path());
  }
  std::sort(out.begin(), out.end());
  if (out.empty()) throw DataError("no trace manifests under " + dir.string());
  return out;
}

std::string_view source_name(AttentionSource s) {
  return s == AttentionSource::demo_labels ? "demo_labels" : "query_last";
}

}  // namespace

// ---------------------------------------------------------------- dataset I/O

json sample_to_json(const OutlierSample& s, SplitTag split) {
  json objects = json::array();
  for (const auto& o : s.scene.objects) {
    objects.push_back({{"shape", std::string(to_string(o.shape))},
                       {"color", std::string(to_string(o.color))},
                       {"row", o.cell.row},
                       {"col", o.cell.col}});
  }
  const CellGrid grid = render_image(s);
  json image = json::array();
  for (int r = 0; r < grid.grid.height; ++r) {
    json row = json::array();
    for (int c = 0; c < grid.grid.width; ++c) {
      const CellCode& code = grid.cells[grid.grid.index({r, c})];
      row.push_back(json::array({code.shape, code.color}));
    }
    image.push_back(std::move(row));
  }
  return {{"id", s.id},
          {"task", std::string(to_string(s.task))},
          {"label", s.label},
          {"question", s.question},
          {"split", split == SplitTag::test ? "test" : "support"},
          {"grid", {s.scene.grid.width, s.scene.grid.height}},
          {"objects", objects},
          {"shape_outlier", s.scene.shape_outlier},
          {"color_outlier", s.scene.color_outlier},
          {"image", image}};
}

OutlierSample sample_from_json(const json& j, SplitTag* split) {
  OutlierSample s;
  try {
    s.id = j.at("id").get<int>();
    s.task = parse_task(j.at("task").get<std::string>());
    s.label = j.at("label").get<std::string>();
    s.question = j.at("question").get<std::string>();
    s.scene.grid = {j.at("grid").at(0).get<int>(), j.at("grid").at(1).get<int>()};
    for (const auto& o : j.at("objects")) {
      const auto shape = parse_shape(o.at("shape").get<std::string>());
      const auto color = parse_color(o.at("color").get<std::string>());
      if (!shape || !color) throw DataError("unknown object attribute");
      s.scene.objects.push_back({*shape, *color, {o.at("row").get<int>(), o.at("col").get<int>()}});
    }
    s.scene.shape_outlier = j.at("shape_outlier").get<std::size_t>();
    s.scene.color_outlier = j.at("color_outlier").get<std::size_t>();
    if (split) {
      const auto tag = j.at("split").get<std::string>();
      if (tag != "test" && tag != "support") throw DataError("unknown split '" + tag + "'");
      *split = tag == "test" ? SplitTag::test : SplitTag::support;
    }
    s.scene.validate();
  } catch (const DataError&) {
    throw;
  } catch (const std::exception& e) {
    throw DataError(std::string("malformed sample: ") + e.what());
  }
  const ObjectSpec& t = s.target();
  const std::string expected(s.task == TaskAttribute::shape ? to_string(t.shape) : to_string(t.color));
  if (s.label != expected) throw DataError("sample " + std::to_string(s.id) + " label mismatch");
  return s;
}

Dataset load_dataset(const fs::path& dir) {
  const fs::path file = dir / "samples.jsonl";
  if (!fs::is_regular_file(file)) throw ConfigError("dataset not found: " + file.string());
  std::ifstream in(file);
  if (!in) throw ConfigError("cannot read " + file.string());
  Dataset d;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const json j = json::parse(line, nullptr, false);
    try {
      if (j.is_discarded()) throw DataError("invalid JSON");
      SplitTag tag{};
      d.samples.push_back(sample_from_json(j, &tag));
      d.splits.push_back(tag);
    } catch (const DataError& e) {
      throw DataError(file.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  if (d.samples.empty()) throw DataError(file.string() + ": no samples");
  return d;
}

// ---------------------------------------------------------------- commands

void cmd_gen(const RunConfig& c) {
  const PoolConfig& pc = c.dataset.pool;
  pc.validate();
  const auto pool = generate_pool(pc);
  const PoolSplit split = split_per_category(pool, c.dataset.query_per_category, pc.seed);

  std::vector<int> test_ids;
  for (const auto& s : split.test) test_ids.push_back(s.id);
  std::sort(test_ids.begin(), test_ids.end());

  std::string lines;
  int shape_count = 0;
  for (const auto& s : pool) {
    const bool test = std::binary_search(test_ids.begin(), test_ids.end(), s.id);
    lines += sample_to_json(s, test ? SplitTag::test : SplitTag::support).dump() + "\n";
    if (s.task == TaskAttribute::shape) ++shape_count;
  }
  const json manifest = {
      {"format", "mgilab-dataset"},
      {"samples", "samples.jsonl"},
      {"count", pool.size()},
      {"shape_count", shape_count},
      {"color_count", static_cast<int>(pool.size()) - shape_count},
      {"support_count", split.support.size()},
      {"test_count", split.test.size()},
      {"config",
       {{"count", pc.count},
        {"shape_fraction", pc.shape_fraction},
        {"grid_width", pc.grid.width},
        {"grid_height", pc.grid.height},
        {"min_objects", pc.min_objects},
        {"max_objects", pc.max_objects},
        {"seed", pc.seed},
        {"query_per_category", c.dataset.query_per_category}}}};

  ensure_dir(c.output);
  write_output(c.output / "samples.jsonl", lines);
  write_output(c.output / "manifest.json", manifest.dump(2) + "\n");
}

void cmd_eval(const RunConfig& c) {
  const EvalInputs in = load_inputs(c);
  const Responders r = make_responder(c);
  ConditionMatrix m = make_matrix(c, in);

  ensure_dir(c.output);
  const fs::path staging = c.output / "traces.partial";
  if (c.persist_traces) {
    fs::remove_all(staging);
    m.on_episode = [&](std::size_t cell, std::uint64_t seed, int index, const Episode& episode,
                       const EpisodeResult& result, const AttentionTrace& trace) {
      char name[64];
      std::snprintf(name, sizeof(name), "cell-%03zu/seed-%llu/episode-%04d.json", cell,
                    static_cast<unsigned long long>(seed), index);
      const fs::path path = staging / name;
      fs::create_directories(path.parent_path());
      TraceAnnotations notes;
      for (const auto& d : episode.demonstrations) notes.demo_masks.push_back(build_evidence_mask(d));
      notes.query_mask = build_evidence_mask(episode.query);
      notes.outcome = outcome_name(result);
      notes.task = episode.task();
      write_trace(path, trace, notes);
    };
  }

  const auto reports = compare_conditions(*r.responder, m);

  json report = json::array();
  json timing = json::array();
  std::string episodes;
  for (std::size_t cell = 0; cell < reports.size(); ++cell) {
    const RunReport& rep = reports[cell];
    report.push_back(report_to_json(rep));
    timing.push_back(timing_to_json(rep));
    for (const auto& group : rep.results) {
      for (std::size_t i = 0; i < group.results.size(); ++i) {
        json j = episode_to_json(group.results[i]);
        j["cell"] = cell;
        j["seed"] = group.seed;
        j["index"] = i;
        episodes += j.dump() + "\n";
      }
    }
  }
  write_output(c.output / "episodes.jsonl", episodes);
  write_output(c.output / "report.json", json{{"reports", report}}.dump(2) + "\n");
  write_output(c.output / "summary.csv", summary_csv(reports));
  write_output(c.output / "timing.json", json{{"timing", timing}}.dump(2) + "\n");
  if (c.persist_traces) {
    const fs::path final_dir = c.output / "traces";
    fs::remove_all(final_dir);
    fs::rename(staging, final_dir);
  }
}

void cmd_analyze(const RunConfig& c) {
  const fs::path dir = c.analyze.trace_dir.value_or(c.output / "traces");
  const auto manifests = find_manifests(dir);

  int layers = -1, heads = -1;
  std::map<std::string, OutcomeAccumulator> acc;
  for (const auto& path : manifests) {
    const TraceFile tf = read_trace(path);
    const AttentionTrace& trace = tf.trace;
    const SpanMap& spans = trace.spans();
    if (layers < 0) {
      layers = trace.layers();
      heads = trace.heads();
    } else if (trace.layers() != layers || trace.heads() != heads) {
      throw DataError(path.string() + ": layer/head count differs from earlier traces");
    }
    const std::string outcome = tf.annotations.outcome.empty() ? "unlabeled" : tf.annotations.outcome;
    auto [it, fresh] = acc.try_emplace(outcome);
    OutcomeAccumulator& a = it->second;
    if (fresh) a.init(layers, heads);
    ++a.traces;

    const auto labels = target_indices(spans, TokenTarget::demo_labels);
    if (!labels.empty()) {
      const auto p = last_token_attention_profile(trace, spans, labels);
      for (int l = 0; l < layers; ++l) a.label_mass[l] += p[l];
      ++a.label_n;
    }
    if (!spans.has_images() || spans.demos.empty()) continue;

    const auto ent = entropy_profile(trace, spans);
    for (int l = 0; l < layers; ++l) a.entropy[l] += ent[l];
    ++a.peaks[peak_grounding_layer(trace, spans)];
    ++a.entropy_n;

    const RatProfile rat = relative_attention_per_token(trace, spans);
    for (int l = 0; l < layers; ++l) {
      a.text_mean[l] += rat.layers[l].text_mean;
      a.image_mean[l] += rat.layers[l].image_mean;
    }
    ++a.rat_n;

    const SpanClass classes[2] = {SpanClass::demo_image, SpanClass::demo_text};
    for (int t = 0; t < 2; ++t) {
      const HeadMap hm = head_activation_map(trace, spans, c.analyze.source, classes[t]);
      for (std::size_t i = 0; i < hm.values.size(); ++i) a.heads[t][i] += hm.values[i];
    }
    ++a.head_n;

    const auto& notes = tf.annotations;
    if (notes.demo_masks.size() != spans.demos.size()) continue;
    EvidenceMasks masks{notes.demo_masks, notes.query_mask};
    const LayerProfile lp =
        evidence_attention_ratios(trace, spans, masks, c.analyze.source, c.analyze.normalization);
    for (int l = 0; l < layers; ++l) {
      a.ratios[l][0] += lp.layers[l].correct;
      a.ratios[l][1] += lp.layers[l].false_evidence;
      a.ratios[l][2] += lp.layers[l].irrelevant;
      if (lp.layers[l].flagged) ++a.flagged[l];
    }
    ++a.ratio_n;
    const auto evidence = target_indices(spans, TokenTarget::correct_evidence, &masks);
    if (!evidence.empty()) {
      const auto p = last_token_attention_profile(trace, spans, evidence);
      for (int l = 0; l < layers; ++l) a.evidence_mass[l] += p[l];
      ++a.evidence_n;
    }
  }

  std::string fig4 = "outcome,layer,entropy,peak_count,traces\n";
  std::string fig5 = "outcome,layer,source,correct,false_evidence,irrelevant,flagged,traces\n";
  std::string fig6 = "outcome,layer,label_mass,evidence_mass\n";
  std::string fig8 = "outcome,layer,text_mean,image_mean,ratio\n";
  std::string fig9 = "outcome,layer,head,target,mass\n";
  const std::string source(source_name(c.analyze.source));
  for (const auto& [outcome, a] : acc) {
    for (int l = 0; l < layers; ++l) {
      const std::string prefix = outcome + "," + std::to_string(l) + ",";
      fig4 += prefix + mean_or_blank(a.entropy[l], a.entropy_n) + "," + std::to_string(a.peaks[l]) +
              "," + std::to_string(a.entropy_n) + "\n";
      fig5 += prefix + source;
      for (int k = 0; k < 3; ++k) fig5 += "," + mean_or_blank(a.ratios[l][k], a.ratio_n);
      fig5 += "," + std::to_string(a.flagged[l]) + "," + std::to_string(a.ratio_n) + "\n";
      fig6 += prefix + mean_or_blank(a.label_mass[l], a.label_n) + "," +
              mean_or_blank(a.evidence_mass[l], a.evidence_n) + "\n";
      std::string ratio;
      if (a.rat_n && a.image_mean[l] > 0.0) ratio = num(a.text_mean[l] / a.image_mean[l]);
      fig8 += prefix + mean_or_blank(a.text_mean[l], a.rat_n) + "," +
              mean_or_blank(a.image_mean[l], a.rat_n) + "," + ratio + "\n";
      for (int h = 0; h < heads; ++h) {
        const char* names[2] = {"demo_image", "demo_text"};
        for (int t = 0; t < 2; ++t) {
          fig9 += prefix + std::to_string(h) + "," + names[t] + "," +
                  mean_or_blank(a.heads[t][static_cast<std::size_t>(l) * heads + h], a.head_n) + "\n";
        }
      }
    }
  }

  ensure_dir(c.output);
  write_output(c.output / "fig4_entropy.csv", fig4);
  write_output(c.output / "fig5_ratios.csv", fig5);
  write_output(c.output / "fig6_lasttoken.csv", fig6);
  write_output(c.output / "fig8_rat.csv", fig8);
  write_output(c.output / "fig9_heads.csv", fig9);
}

void cmd_sweep(const RunConfig& c) {
  const std::string& param = c.sweep.param;
  if (param != "lambda" && param != "k" && param != "l_start" && param != "shots") {
    throw ConfigError("sweep.param must be lambda, k, l_start or shots");
  }
  if (c.sweep.values.empty()) throw ConfigError("sweep.values is empty");
  const int layers = c.model.toy.layers;
  const bool integral = param == "l_start" || param == "shots";
  const bool on_specs = param != "shots";
  if (on_specs && std::none_of(c.interventions.begin(), c.interventions.end(),
                               [](const InterventionSpec& s) { return s.needs_mapping(); })) {
    throw ConfigError("sweeping " + param + " needs a selective_scale or additive intervention");
  }

  // Every point is validated before any work starts.
  std::vector<RunConfig> points;
  for (double v : c.sweep.values) {
    if (!std::isfinite(v) || (integral && v != std::floor(v))) {
      throw ConfigError("invalid sweep value " + num(v) + " for " + param);
    }
    RunConfig p = c;
    if (param == "shots") {
      if (v < 0) throw ConfigError("shots must be >= 0");
      p.episode.shots = {static_cast<int>(v)};
    }
    for (auto& s : p.interventions) {
      if (!s.needs_mapping()) continue;
      if (param == "lambda") s.lambda = v;
      if (param == "k") s.k = v;
      if (param == "l_start") s.l_start = static_cast<int>(v);
      s.validate(layers);
    }
    points.push_back(std::move(p));
  }

  const EvalInputs in = load_inputs(c);
  const Responders r = make_responder(c);

  std::string csv = "param,value," + summary_csv_header();
  json out = json::array();
  for (std::size_t i = 0; i < points.size(); ++i) {
    const auto reports = compare_conditions(*r.responder, make_matrix(points[i], in));
    json reps = json::array();
    for (const auto& rep : reports) {
      csv += param + "," + num(c.sweep.values[i]) + "," + summary_csv_row(rep);
      reps.push_back(report_to_json(rep));
    }
    out.push_back({{"value", c.sweep.values[i]}, {"reports", reps}});
  }
  ensure_dir(c.output);
  write_output(c.output / "sweep.csv", csv);
  write_output(c.output / "sweep.json", json{{"param", param}, {"points", out}}.dump(2) + "\n");
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const DataError*>(&e)) return 3;
  if (dynamic_cast<const ConfigError*>(&e)) return 2;
  if (dynamic_cast<const Error*>(&e)) return 2;
  if (dynamic_cast<const fs::filesystem_error*>(&e)) return 2;
  return 1;
}

}  // namespace mgilab
