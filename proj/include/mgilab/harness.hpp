// SPDX-License-Identifier: Apache-2.0
//
// Episode runner, answer scoring, error taxonomy and seed-aggregated reports.
#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "mgilab/episodes.hpp"
#include "mgilab/mgi.hpp"
#include "mgilab/model.hpp"
#include "mgilab/responder.hpp"
#include "mgilab/vocabulary.hpp"

namespace mgilab {

enum class ErrorCase { correct, false_task_recognition, correct_task_wrong_answer, unparseable };
inline constexpr int kNumErrorCases = 4;
std::string_view to_string(ErrorCase c);

enum class LabelKind { numeric, keyword };

// numeric: exact string match after trimming surrounding whitespace.
// keyword: case-insensitive whole-word containment of the label.
bool match_answer(std::string_view predicted, std::string_view label, LabelKind kind);

struct Classification {
  ErrorCase error_case = ErrorCase::unparseable;
  // Both attribute vocabularies were mentioned; the last mentioned word
  // decided the class.
  bool ambiguous = false;
};

// Classifies a prediction that did not match the query label.
Classification classify_error(std::string_view predicted, const OutlierSample& query);

struct EpisodeResult {
  int query_id = 0;
  std::string predicted_text;
  bool matched = false;
  ErrorCase error_case = ErrorCase::unparseable;
  bool ambiguous = false;
  int peak_layer = -1;  // -1 when no mapping was estimated
  std::string trace_ref;
  std::string failure;  // generation error message, if any
  std::int64_t prep_latency_ns = 0;
  std::optional<std::int64_t> vanilla_latency_ns;
  std::optional<std::int64_t> intervened_latency_ns;
};

struct Answer {
  std::string text;
  AttentionTrace trace;
  std::int64_t latency_ns = 0;
};

// Anything that can answer an episode with an optional attention hook.
class Responder {
 public:
  virtual ~Responder() = default;
  virtual int num_layers() const = 0;
  virtual std::string profile() const = 0;
  // Vanilla attention over the prompt, the input to task-mapping estimation.
  virtual AttentionTrace prompt_trace(const Episode& episode, const TokenizedEpisode& tokens) const = 0;
  virtual Answer answer(const Episode& episode, const TokenizedEpisode& tokens,
                        const InterventionHook* hook) const = 0;
};

class ModelResponder final : public Responder {
 public:
  ModelResponder(const ToyMllm& model, int max_new_tokens)
      : model_(model), max_new_tokens_(max_new_tokens) {}
  int num_layers() const override { return model_.config().layers; }
  std::string profile() const override;
  AttentionTrace prompt_trace(const Episode& episode, const TokenizedEpisode& tokens) const override;
  Answer answer(const Episode& episode, const TokenizedEpisode& tokens,
                const InterventionHook* hook) const override;

 private:
  const ToyMllm& model_;
  int max_new_tokens_;
};

using TraceProvider = std::function<AttentionTrace(const Episode&, const TokenizedEpisode&)>;

// Answers through scripted_responder over a provided trace; hooks are
// replayed onto a copy of that trace.
class ScriptedResponder final : public Responder {
 public:
  ScriptedResponder(int layers, ResponderRule rule, TraceProvider provider, std::string profile)
      : layers_(layers), rule_(rule), provider_(std::move(provider)), profile_(std::move(profile)) {}
  int num_layers() const override { return layers_; }
  std::string profile() const override { return profile_; }
  AttentionTrace prompt_trace(const Episode& episode, const TokenizedEpisode& tokens) const override;
  Answer answer(const Episode& episode, const TokenizedEpisode& tokens,
                const InterventionHook* hook) const override;

 private:
  int layers_;
  ResponderRule rule_;
  TraceProvider provider_;
  std::string profile_;
};

// Tokenizes, estimates the task mapping when the intervention needs one, answers and
// scores. Throws ConfigError when the intervention cannot apply to the episode (an
// MGI or UAS spec on a text-only episode raises "no image spans"); failures
// while answering produce an unparseable result instead.
EpisodeResult run_episode(const Responder& responder, const Episode& episode,
                          const InterventionSpec& spec, AttentionTrace* trace_out = nullptr);

struct SeedResults {
  std::uint64_t seed = 0;
  std::vector<EpisodeResult> results;
};

struct ConditionDescriptor {
  Modality modality = Modality::multimodal;
  int shots = 0;
  InterventionSpec intervention;
  std::string model_profile;
};

struct SeedBreakdown {
  std::uint64_t seed = 0;
  int episodes = 0;
  int matched = 0;
  double accuracy = 0.0;
};

struct RunReport {
  ConditionDescriptor condition;
  int episodes = 0;
  double accuracy_mean = 0.0;
  double accuracy_std = 0.0;  // population std over per-seed accuracies
  std::array<double, kNumErrorCases> error_proportions{};  // indexed by ErrorCase
  int ambiguous = 0;
  std::vector<SeedBreakdown> per_seed;
  std::vector<SeedResults> results;  // the aggregated episodes, seed order
  double mean_prep_ns = 0.0;
  double mean_vanilla_ns = 0.0;
  double mean_intervened_ns = 0.0;
};

// Throws ConfigError on an empty group list or an empty group.
RunReport aggregate_runs(std::span<const SeedResults> groups, ConditionDescriptor condition = {});

// Deterministic report fields only; latencies live in timing_to_json.
nlohmann::json report_to_json(const RunReport& report);
// One object per episode: cell, seed, index and the deterministic result
// fields.
nlohmann::json episode_to_json(const EpisodeResult& result);
nlohmann::json timing_to_json(const RunReport& report);
std::string summary_csv_header();
std::string summary_csv_row(const RunReport& report);

struct OverheadReport {
  double prep_ns = 0.0;            // mean per-query mapping estimation
  double vanilla_gen_ns = 0.0;     // mean decode time without hook
  double intervened_gen_ns = 0.0;  // mean decode time with hook
  double overhead_fraction = 0.0;  // intervened / vanilla - 1
  double total_intervened_ns = 0.0;  // prep + intervened decode
  double measured_total_ns = 0.0;    // wall clock around prep + decode
};

// mode=none reuses the vanilla measurement, so its overhead is exactly zero.
OverheadReport measure_overhead(const ToyMllm& model, std::span<const Episode> episodes,
                                const InterventionSpec& spec, int max_new_tokens,
                                int repeats = 1);

struct ConditionMatrix {
  std::vector<Modality> modalities{Modality::multimodal};
  std::vector<int> shots{4};
  std::vector<InterventionSpec> interventions;
  std::vector<std::uint64_t> seeds{0};
  int query_count = 50;
  std::span<const OutlierSample> support;
  std::span<const OutlierSample> queries;
  bool aligned_demos = false;
  int threads = 1;
  // Called from worker threads with (cell index, seed, episode index, result,
  // trace) for persistence.
  std::function<void(std::size_t, std::uint64_t, int, const Episode&, const EpisodeResult&,
                     const AttentionTrace&)>
      on_episode;
};

// One RunReport per (modality, shots, intervention) cell, in that nesting
// order. Every cell sees the same query draws for a given seed.
std::vector<RunReport> compare_conditions(const Responder& responder, const ConditionMatrix& matrix);

// Worker count: `requested` (0 = hardware concurrency), capped by the
// MGI_LAB_THREADS environment variable.
int resolve_threads(int requested);

// Runs fn(i) for i in [0, n) on up to `threads` workers; rethrows the first
// exception on the calling thread.
void parallel_for(int n, int threads, const std::function<void(int)>& fn);

}  // namespace mgilab
