// SPDX-License-Identifier: Apache-2.0
#include "mgilab/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <thread>

#include "mgilab/error.hpp"
#include "mgilab/rng.hpp"
#include "mgilab/synthetic.hpp"

namespace mgilab {

using nlohmann::json;
using Clock = std::chrono::steady_clock;

namespace {

std::int64_t elapsed_ns(Clock::time_point start) {
  return std::chrono::duration_cast<std::chrono::nanoseconds>(Clock::now() - start).count();
}

// Lower-cased alphanumeric words in order of appearance.
std::vector<std::string> words_of(std::string_view text) {
  std::vector<std::string> words;
  std::string cur;
  for (char c : text) {
    if (std::isalnum(static_cast<unsigned char>(c))) {
      cur += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    } else if (!cur.empty()) {
      words.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) words.push_back(std::move(cur));
  return words;
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

}  // namespace

std::string_view to_string(ErrorCase c) {
  switch (c) {
    case ErrorCase::correct: return "correct";
    case ErrorCase::false_task_recognition: return "false_task_recognition";
    case ErrorCase::correct_task_wrong_answer: return "correct_task_wrong_answer";
    case ErrorCase::unparseable: return "unparseable";
  }
  return "unparseable";
}

bool match_answer(std::string_view predicted, std::string_view label, LabelKind kind) {
  if (kind == LabelKind::numeric) return trim(predicted) == trim(label);
  const auto needle = words_of(label);
  if (needle.empty()) return false;
  const auto hay = words_of(predicted);
  if (hay.size() < needle.size()) return false;
  for (std::size_t i = 0; i + needle.size() <= hay.size(); ++i) {
    if (std::equal(needle.begin(), needle.end(), hay.begin() + static_cast<std::ptrdiff_t>(i))) {
      return true;
    }
  }
  return false;
}

Classification classify_error(std::string_view predicted, const OutlierSample& query) {
  if (match_answer(predicted, query.label, LabelKind::keyword)) return {ErrorCase::correct, false};
  const auto right = query.task == TaskAttribute::shape ? shape_words() : color_words();
  const auto wrong = query.task == TaskAttribute::shape ? color_words() : shape_words();
  auto in = [](std::span<const std::string_view> vocab, const std::string& w) {
    return std::find(vocab.begin(), vocab.end(), w) != vocab.end();
  };

  bool saw_right = false;
  bool saw_wrong = false;
  bool last_is_right = false;
  for (const auto& w : words_of(predicted)) {
    if (in(right, w)) {
      saw_right = true;
      last_is_right = true;
    } else if (in(wrong, w)) {
      saw_wrong = true;
      last_is_right = false;
    }
  }
  if (!saw_right && !saw_wrong) return {ErrorCase::unparseable, false};
  if (saw_right && saw_wrong) {
    return {last_is_right ? ErrorCase::correct_task_wrong_answer
                          : ErrorCase::false_task_recognition,
            true};
  }
  return {saw_right ? ErrorCase::correct_task_wrong_answer : ErrorCase::false_task_recognition,
          false};
}

std::string ModelResponder::profile() const {
  const auto& c = model_.config();
  return "toy-L" + std::to_string(c.layers) + "-H" + std::to_string(c.heads) + "-D" +
         std::to_string(c.model_dim) + "-seed" + std::to_string(c.seed);
}

AttentionTrace ModelResponder::prompt_trace(const Episode&, const TokenizedEpisode& tokens) const {
  return model_.forward_with_trace(tokens.tokens, tokens.spans).trace;
}

Answer ModelResponder::answer(const Episode&, const TokenizedEpisode& tokens,
                              const InterventionHook* hook) const {
  GenerationResult g = model_.generate_greedy(tokens, max_new_tokens_, hook);
  return Answer{std::move(g.output_text), std::move(g.trace), g.total_latency_ns()};
}

AttentionTrace ScriptedResponder::prompt_trace(const Episode& episode,
                                               const TokenizedEpisode& tokens) const {
  return provider_(episode, tokens);
}

Answer ScriptedResponder::answer(const Episode& episode, const TokenizedEpisode& tokens,
                                 const InterventionHook* hook) const {
  const auto start = Clock::now();
  AttentionTrace trace = provider_(episode, tokens);
  if (hook) apply_hook_to_trace(trace, *hook);
  const int token = scripted_responder(tokens, trace, rule_);
  Answer a{std::string(vocab::token_text(token)), std::move(trace), 0};
  a.latency_ns = elapsed_ns(start);
  return a;
}

EpisodeResult run_episode(const Responder& responder, const Episode& episode,
                          const InterventionSpec& spec, AttentionTrace* trace_out) {
  episode.validate();
  const TokenizedEpisode tokens = tokenize_episode(episode);
  const bool intervenes = spec.mode != InterventionMode::none;
  if (intervenes && !tokens.spans.has_images()) throw ConfigError("no image spans");
  if (spec.needs_mapping() && tokens.spans.demos.empty()) {
    throw ConfigError("mapping-guided intervention needs at least one demonstration");
  }
  spec.validate(responder.num_layers());

  EpisodeResult r;
  r.query_id = episode.query.id;

  std::shared_ptr<const InterventionHook> hook;
  if (intervenes) {
    const auto start = Clock::now();
    std::optional<TaskMapping> mapping;
    if (spec.needs_mapping()) {
      mapping = estimate_task_mapping(responder.prompt_trace(episode, tokens), tokens.spans);
      r.peak_layer = mapping->peak_layer;
    }
    hook = build_intervention_hook(spec, mapping ? &*mapping : nullptr, tokens.spans,
                                   responder.num_layers());
    r.prep_latency_ns = elapsed_ns(start);
  }

  try {
    Answer a = responder.answer(episode, tokens, hook.get());
    r.predicted_text = std::move(a.text);
    if (intervenes) {
      r.intervened_latency_ns = a.latency_ns;
    } else {
      r.vanilla_latency_ns = a.latency_ns;
    }
    if (trace_out) *trace_out = std::move(a.trace);
  } catch (const std::exception& e) {
    r.failure = e.what();
  }

  r.matched = r.failure.empty() && match_answer(r.predicted_text, episode.query.label, LabelKind::keyword);
  if (r.matched) {
    r.error_case = ErrorCase::correct;
  } else if (!r.failure.empty()) {
    r.error_case = ErrorCase::unparseable;
  } else {
    const Classification c = classify_error(r.predicted_text, episode.query);
    r.error_case = c.error_case;
    r.ambiguous = c.ambiguous;
  }
  return r;
}

RunReport aggregate_runs(std::span<const SeedResults> groups, ConditionDescriptor condition) {
  if (groups.empty()) throw ConfigError("no seed groups to aggregate");
  RunReport report;
  report.condition = std::move(condition);

  std::array<long, kNumErrorCases> case_counts{};
  long double prep = 0, vanilla = 0, intervened = 0;
  long vanilla_n = 0, intervened_n = 0;
  double accuracy_sum = 0.0;
  for (const auto& g : groups) {
    if (g.results.empty()) throw ConfigError("empty seed group");
    SeedBreakdown b{g.seed, static_cast<int>(g.results.size()), 0, 0.0};
    for (const auto& r : g.results) {
      if (r.matched) ++b.matched;
      ++case_counts[static_cast<int>(r.error_case)];
      if (r.ambiguous) ++report.ambiguous;
      prep += r.prep_latency_ns;
      if (r.vanilla_latency_ns) {
        vanilla += *r.vanilla_latency_ns;
        ++vanilla_n;
      }
      if (r.intervened_latency_ns) {
        intervened += *r.intervened_latency_ns;
        ++intervened_n;
      }
    }
    b.accuracy = static_cast<double>(b.matched) / b.episodes;
    accuracy_sum += b.accuracy;
    report.episodes += b.episodes;
    report.per_seed.push_back(b);
  }

  report.results.assign(groups.begin(), groups.end());
  const double n_seeds = static_cast<double>(groups.size());
  report.accuracy_mean = accuracy_sum / n_seeds;
  double var = 0.0;
  for (const auto& b : report.per_seed) {
    var += (b.accuracy - report.accuracy_mean) * (b.accuracy - report.accuracy_mean);
  }
  report.accuracy_std = std::sqrt(var / n_seeds);
  for (int c = 0; c < kNumErrorCases; ++c) {
    report.error_proportions[c] = static_cast<double>(case_counts[c]) / report.episodes;
  }
  report.mean_prep_ns = static_cast<double>(prep / report.episodes);
  if (vanilla_n) report.mean_vanilla_ns = static_cast<double>(vanilla / vanilla_n);
  if (intervened_n) report.mean_intervened_ns = static_cast<double>(intervened / intervened_n);
  return report;
}

json report_to_json(const RunReport& report) {
  json per_seed = json::array();
  for (const auto& b : report.per_seed) {
    per_seed.push_back({{"seed", b.seed},
                        {"episodes", b.episodes},
                        {"matched", b.matched},
                        {"accuracy", b.accuracy}});
  }
  json cases = json::object();
  for (int c = 0; c < kNumErrorCases; ++c) {
    cases[std::string(to_string(static_cast<ErrorCase>(c)))] = report.error_proportions[c];
  }
  return {{"condition",
           {{"modality", std::string(to_string(report.condition.modality))},
            {"shots", report.condition.shots},
            {"intervention", to_json(report.condition.intervention)},
            {"model", report.condition.model_profile}}},
          {"episodes", report.episodes},
          {"accuracy_mean", report.accuracy_mean},
          {"accuracy_std", report.accuracy_std},
          {"error_proportions", cases},
          {"ambiguous", report.ambiguous},
          {"per_seed", per_seed}};
}

json episode_to_json(const EpisodeResult& r) {
  json j = {{"query_id", r.query_id},
            {"predicted", r.predicted_text},
            {"matched", r.matched},
            {"error_case", std::string(to_string(r.error_case))},
            {"ambiguous", r.ambiguous},
            {"peak_layer", r.peak_layer}};
  if (!r.failure.empty()) j["failure"] = r.failure;
  if (!r.trace_ref.empty()) j["trace"] = r.trace_ref;
  return j;
}

json timing_to_json(const RunReport& report) {
  return {{"modality", std::string(to_string(report.condition.modality))},
          {"shots", report.condition.shots},
          {"intervention", report.condition.intervention.describe()},
          {"mean_prep_ns", report.mean_prep_ns},
          {"mean_vanilla_ns", report.mean_vanilla_ns},
          {"mean_intervened_ns", report.mean_intervened_ns}};
}

std::string summary_csv_header() {
  return "modality,shots,intervention,model,episodes,accuracy_mean,accuracy_std,"
         "p_correct,p_false_task_recognition,p_correct_task_wrong_answer,p_unparseable\n";
}

std::string summary_csv_row(const RunReport& r) {
  std::vector<std::string> fields{std::string(to_string(r.condition.modality)),
                                  std::to_string(r.condition.shots),
                                  r.condition.intervention.describe(),
                                  r.condition.model_profile,
                                  std::to_string(r.episodes),
                                  fmt_double(r.accuracy_mean),
                                  fmt_double(r.accuracy_std)};
  for (double p : r.error_proportions) fields.push_back(fmt_double(p));
  std::string row;
  for (std::size_t i = 0; i < fields.size(); ++i) {
    if (i) row += ',';
    row += csv_field(fields[i]);
  }
  return row + "\n";
}

OverheadReport measure_overhead(const ToyMllm& model, std::span<const Episode> episodes,
                                const InterventionSpec& spec, int max_new_tokens, int repeats) {
  if (episodes.empty()) throw ConfigError("overhead measurement needs at least one episode");
  repeats = std::max(repeats, 1);
  const int layers = model.config().layers;
  spec.validate(layers);

  double prep = 0, vanilla = 0, intervened = 0, measured = 0;
  for (const auto& episode : episodes) {
    const TokenizedEpisode tokens = tokenize_episode(episode);
    double best_vanilla = INFINITY;
    double best_prep = 0, best_gen = 0, best_total = INFINITY;
    for (int rep = 0; rep < repeats; ++rep) {
      const double v = static_cast<double>(
          model.generate_greedy(tokens, max_new_tokens, nullptr).total_latency_ns());
      best_vanilla = std::min(best_vanilla, v);
      if (spec.mode == InterventionMode::none) continue;

      const auto wall = Clock::now();
      const auto start = Clock::now();
      std::optional<TaskMapping> mapping;
      if (spec.needs_mapping()) {
        mapping = estimate_task_mapping(model.forward_with_trace(tokens.tokens, tokens.spans).trace,
                                        tokens.spans);
      }
      const auto hook = build_intervention_hook(spec, mapping ? &*mapping : nullptr, tokens.spans, layers);
      const double p = static_cast<double>(elapsed_ns(start));
      const double g = static_cast<double>(
          model.generate_greedy(tokens, max_new_tokens, hook.get()).total_latency_ns());
      const double total = static_cast<double>(elapsed_ns(wall));
      if (total < best_total) {
        best_total = total;
        best_prep = p;
        best_gen = g;
      }
    }
    vanilla += best_vanilla;
    if (spec.mode == InterventionMode::none) {
      intervened += best_vanilla;
      measured += best_vanilla;
    } else {
      prep += best_prep;
      intervened += best_gen;
      measured += best_total;
    }
  }

  const double n = static_cast<double>(episodes.size());
  OverheadReport r;
  r.prep_ns = prep / n;
  r.vanilla_gen_ns = vanilla / n;
  r.intervened_gen_ns = intervened / n;
  r.overhead_fraction = spec.mode == InterventionMode::none
                            ? 0.0
                            : r.intervened_gen_ns / r.vanilla_gen_ns - 1.0;
  r.total_intervened_ns = r.prep_ns + r.intervened_gen_ns;
  r.measured_total_ns = measured / n;
  return r;
}

int resolve_threads(int requested) {
  int n = requested > 0 ? requested : static_cast<int>(std::thread::hardware_concurrency());
  if (n <= 0) n = 1;
  if (const char* cap = std::getenv("MGI_LAB_THREADS")) {
    const int c = std::atoi(cap);
    if (c > 0) n = std::min(n, c);
  }
  return n;
}

void parallel_for(int n, int threads, const std::function<void(int)>& fn) {
  threads = std::max(1, std::min(threads, n));
  if (threads == 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr first_error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  for (int t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (int i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!first_error) first_error = std::current_exception();
          next = n;
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (first_error) std::rethrow_exception(first_error);
}

std::vector<RunReport> compare_conditions(const Responder& responder, const ConditionMatrix& m) {
  if (m.queries.empty()) throw ConfigError("no query samples");
  if (m.seeds.empty()) throw ConfigError("no seeds");
  if (m.query_count < 1) throw ConfigError("query_count must be >= 1");
  std::vector<InterventionSpec> specs = m.interventions;
  if (specs.empty()) {
    InterventionSpec none;
    none.mode = InterventionMode::none;
    specs.push_back(none);
  }

  // Query draws per seed, shared by every cell.
  std::vector<std::vector<std::size_t>> draws;
  for (auto seed : m.seeds) {
    std::vector<std::size_t> idx(m.queries.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    Rng rng(seed, 0x9e37ULL);
    rng.shuffle(std::span<std::size_t>(idx));
    idx.resize(std::min<std::size_t>(idx.size(), static_cast<std::size_t>(m.query_count)));
    draws.push_back(std::move(idx));
  }

  std::vector<RunReport> reports;
  std::size_t cell = 0;
  for (Modality modality : m.modalities) {
    for (int shots : m.shots) {
      for (const auto& spec : specs) {
        std::vector<SeedResults> groups;
        for (std::size_t s = 0; s < m.seeds.size(); ++s) {
          const auto seed = m.seeds[s];
          const auto& idx = draws[s];
          SeedResults g{seed, std::vector<EpisodeResult>(idx.size())};
          parallel_for(static_cast<int>(idx.size()), m.threads, [&](int e) {
            const OutlierSample& query = m.queries[idx[e]];
            const Episode episode =
                m.aligned_demos
                    ? synthetic::assemble_aligned_episode(m.support, query, shots, modality, seed)
                    : assemble_episode(m.support, query, shots, modality, seed);
            AttentionTrace trace;
            g.results[e] = run_episode(responder, episode, spec, m.on_episode ? &trace : nullptr);
            if (m.on_episode) m.on_episode(cell, seed, e, episode, g.results[e], trace);
          });
          groups.push_back(std::move(g));
        }
        reports.push_back(aggregate_runs(groups, {modality, shots, spec, responder.profile()}));
        ++cell;
      }
    }
  }
  return reports;
}

}  // namespace mgilab
