#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "detox/data/prompts.hpp"
#include "detox/data/vocabulary.hpp"
#include "detox/lm/policy_lm.hpp"
#include "detox/reward/mtl_model.hpp"

namespace detox::eval {

// scores[prompt][sample]
using ScoreMatrix = std::vector<std::vector<double>>;

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // population
};

// Per-prompt maximum, then mean and population std across prompts. Throws
// DataError for an empty or ragged matrix.
MeanStd expected_max_toxicity(const ScoreMatrix& scores);

// Fraction of prompts with at least one score >= threshold.
double toxicity_probability(const ScoreMatrix& scores, double threshold = 0.5);

enum class ScoreSpan { kContinuation, kPromptAndContinuation };

// Key used to split prompts into report rows.
enum class GroupBy { kGroupField, kToxicity, kNone };

struct EvalConfig {
  std::size_t samples_per_prompt = 20;
  std::size_t max_new_tokens = 20;
  double top_p = 0.9;
  double threshold = 0.5;
  ScoreSpan span = ScoreSpan::kContinuation;
  GroupBy group_by = GroupBy::kGroupField;
  std::uint64_t seed = 0;

  void validate() const;  // ConfigError
};

// A trained classifier used as the toxicity judge, with the fingerprint of
// the vocabulary it was trained on.
struct Judge {
  const reward::MtlModel<float>* model = nullptr;
  std::uint64_t vocab_fingerprint = 0;
};

struct GenerationRecord {
  std::size_t prompt_id = 0;
  std::size_t sample_id = 0;
  std::string text;  // continuation
  double toxicity = 0.0;
};

struct GroupRow {
  std::string group;
  std::size_t prompts = 0;
  std::size_t samples = 0;
  double emt_mean = 0.0;
  double emt_std = 0.0;
  double toxicity_probability = 0.0;
  double mean_toxicity = 0.0;
  double perplexity = 0.0;      // model perplexity on the group's prompt texts
  double distinct_ratio = 0.0;  // mean distinct / total tokens per continuation
};

struct EvalReport {
  std::string model;
  std::vector<GroupRow> rows;  // sorted by group name, then "all"
  std::string caveat;
};

std::string group_of(const data::PromptRecord& prompt, GroupBy by);

// Distinct tokens over total tokens of one continuation (1 for empty).
double distinct_ratio(std::span<const int> tokens);
// The same over the whitespace-separated words of a decoded continuation.
double distinct_word_ratio(std::string_view text);

// Builds the report from a generation log. Deterministic in its inputs.
// `perplexities` maps group name to perplexity; missing groups get 0.
EvalReport report_from_log(const std::string& model_name,
                           std::span<const data::PromptRecord> prompts,
                           std::span<const GenerationRecord> log, const EvalConfig& config,
                           const std::map<std::string, double>& perplexities = {});

struct Evaluation {
  EvalReport report;
  std::vector<GenerationRecord> log;
};

// Generates samples_per_prompt continuations per prompt (one random stream
// per prompt), scores them with the judge and aggregates per group. Throws
// ConfigError when the judge was trained on a different vocabulary.
Evaluation evaluate_model(const std::string& model_name, const lm::PolicyLm<float>& policy,
                          const data::Vocabulary& vocab,
                          std::span<const data::PromptRecord> prompts, const Judge& judge,
                          const EvalConfig& config);

void write_generation_log(const std::filesystem::path& path,
                          std::span<const GenerationRecord> log);
std::vector<GenerationRecord> read_generation_log(const std::filesystem::path& path);

void write_report(const std::filesystem::path& path, const EvalReport& report);
EvalReport read_report(const std::filesystem::path& path);
std::string render_report(const EvalReport& report);

// Side-by-side table; deltas are relative to the first report.
struct Comparison {
  std::vector<std::string> models;
  std::vector<std::string> groups;
  // values[group][model]
  std::vector<std::vector<GroupRow>> values;
};

// Throws ReportError when the reports do not share the same group keys.
Comparison compare_models(std::span<const EvalReport> reports);
void write_comparison(const std::filesystem::path& path, const Comparison& comparison);
std::string render_comparison(const Comparison& comparison);

}  // namespace detox::eval
