#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "docqa/gateway.hpp"
#include "docqa/prompts.hpp"
#include "docqa/qa_pipeline.hpp"
#include "docqa/region_refine.hpp"
#include "docqa/retrieval.hpp"
#include "docqa/vote_ensemble.hpp"
#include "json.hpp"

namespace docqa {

// ---------------------------------------------------------------------------
// Dataset

struct QuestionItem {
  std::string question_id;
  std::string doc_id;
  std::string question;
  std::vector<std::string> options;  // exactly 10
  std::optional<int> gold;           // 1..10

  friend bool operator==(const QuestionItem&, const QuestionItem&) = default;
};

/// Validates one record; `where` prefixes error messages (e.g. "line 4").
QuestionItem question_from_json(const nlohmann::json& j, const std::string& where);
nlohmann::json to_json(const QuestionItem& item);

/// JSONL, one question per line; blank lines are ignored. Throws Error(Load)
/// naming the offending line.
std::vector<QuestionItem> load_dataset(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Config
//
// YAML mapping with up to four top-level sections. Scalars may contain
// ${NAME}, replaced by the environment variable NAME (unset is an error).
// Relative paths are resolved against the config file's directory.
//
//   pipeline:  k, seed, parallelism, use_filter, use_decomposition,
//              bilingual_first_stage, use_region_refine, use_voting,
//              fusion_models (list), work_dir, templates_dir,
//              manual_regions, rasterizer
//   backend:   default for every stage
//   stages:    <stage>: backend override, stage in embed | filter |
//              decompose | answer | region
//   models:    <id>: answer-stage backend for fusion model <id>
//
// Backend keys: kind (mock|http), endpoint_url, model_name, api_key_env,
// timeout_ms, max_retries, retry_backoff_ms, fixtures_dir, scenario.

inline constexpr const char* kStages[] = {"embed", "filter", "decompose", "answer", "region"};

struct PipelineConfig {
  bool use_filter = true;
  bool use_decomposition = true;
  bool bilingual_first_stage = true;  // false: English block only
  bool use_region_refine = false;
  bool use_voting = true;
  std::vector<std::string> fusion_models;
  std::size_t k = kDefaultTopK;
  std::uint64_t seed = 0;
  std::size_t parallelism = 1;
  std::filesystem::path work_dir = "docqa-work";
  std::filesystem::path templates_dir;  // empty: TemplateSet::default_dir()
  std::filesystem::path manual_regions;
  std::string rasterizer;

  BackendConfig default_backend;
  std::map<std::string, BackendConfig> stage_backends;
  std::map<std::string, BackendConfig> model_backends;

  void validate() const;
  const BackendConfig& backend_for(const std::string& stage) const;
  /// Everything that can change a question's outcome. Excludes work_dir and
  /// parallelism.
  nlohmann::json describe() const;
};

PipelineConfig parse_pipeline_config(const std::string& text,
                                     const std::filesystem::path& base_dir);
PipelineConfig load_pipeline_config(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Running

struct StageBackends {
  std::shared_ptr<Backend> embed, filter, decompose, answer, region;
  std::map<std::string, std::shared_ptr<Backend>> models;  // fusion

  static StageBackends from_config(const PipelineConfig& config);
  /// One backend for every stage and fusion model.
  static StageBackends uniform(std::shared_ptr<Backend> backend,
                               const std::vector<std::string>& fusion_models = {});
};

struct QuestionRow {
  std::string question_id;
  std::optional<int> predicted;
  std::optional<int> gold;
  bool correct = false;
  std::string decided_by;  // majority | second_round_majority | final_inference | single | fusion
  int rounds_used = 0;
  std::vector<std::string> pages_used;
  std::string error;  // empty unless the question errored

  friend bool operator==(const QuestionRow&, const QuestionRow&) = default;
};

nlohmann::json to_json(const QuestionRow& row);
QuestionRow question_row_from_json(const nlohmann::json& j);

struct QuestionRun {
  QuestionRow row;
  nlohmann::json audit;          // retrieval, filter, refinement, trace, answers, votes
  std::vector<std::string> stages;  // stage-execution trace
  std::shared_ptr<Transcript> transcript;
};

/// Shared read-only state for answering questions.
struct PipelineContext {
  const PipelineConfig* config = nullptr;
  const PageIndex* index = nullptr;
  const TemplateSet* templates = nullptr;
  StageBackends backends;
  ManualRegions manual_regions;
};

/// Runs the full pipeline for one question. Domain errors become an errored
/// row; the run continues.
QuestionRun run_question(const PipelineContext& ctx, const QuestionItem& item);

struct BenchmarkReport {
  double public_score = 0.0;
  std::size_t n_questions = 0;
  std::size_t n_scored = 0;  // questions with a gold label
  std::size_t n_correct = 0;
  std::size_t n_errored = 0;
  std::size_t n_resumed = 0;  // taken from audit records; not serialized
  std::string config_fingerprint;
  std::vector<QuestionRow> per_question;  // ordered by question_id

  nlohmann::json to_json() const;
  std::string to_csv() const;
};

/// Writes {stem}.json and {stem}.csv next to `json_path`.
void write_report(const BenchmarkReport& report, const std::filesystem::path& json_path);

/// Fingerprint of config, templates, manual regions and index contents.
std::string config_fingerprint(const PipelineConfig& config, const TemplateSet& templates,
                               const PageIndex& index);

/// Per-question audits go to work_dir/audit, transcripts to
/// work_dir/transcripts; work_dir/transcript.jsonl holds all of them merged
/// in question_id order. Completed audits with a matching fingerprint are
/// reused, so an interrupted run can be resumed.
BenchmarkReport run_benchmark(const PipelineConfig& config,
                              const std::vector<QuestionItem>& dataset, const PageIndex& index,
                              const StageBackends& backends, const TemplateSet& templates);

BenchmarkReport run_benchmark(const PipelineConfig& config,
                              const std::vector<QuestionItem>& dataset, const PageIndex& index);

/// Correct over gold keys; missing predictions are wrong. No golds gives 0.
double score_predictions(const std::map<std::string, int>& predictions,
                         const std::map<std::string, int>& golds);

}  // namespace docqa
