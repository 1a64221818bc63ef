#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "detox/data/run_config.hpp"
#include "detox/eval/eval.hpp"
#include "detox/reward/mtl_train.hpp"

// Stages of the command-line workflow. Every stage writes into its own
// subdirectory of a run directory, echoes the effective configuration there
// as config.txt and holds the run-directory lock while it runs.
namespace detox::pipeline {

namespace fs = std::filesystem;

// Run directory used when none is given: $DETOX_RUN_ROOT/default, or
// runs/default when the variable is unset.
fs::path default_run_dir();

using Progress = std::function<void(const std::string&)>;

struct Paths {
  fs::path run;
  fs::path data() const { return run / "data"; }
  fs::path stage(const std::string& name) const { return run / name; }
};

data::DataFiles make_data(const data::RunConfig& cfg, const Paths& paths,
                          const Progress& progress = {});

struct PretrainResult {
  double heldout_perplexity = 0.0;
  fs::path checkpoint;
};
PretrainResult pretrain_lm(const data::RunConfig& cfg, const Paths& paths,
                           const Progress& progress = {});

struct RewardOptions {
  bool single_task = false;
  std::string name;  // stage directory; defaults to "reward" or "reward_single"
};
struct RewardResult {
  reward::BinaryMetrics task1_test;
  fs::path checkpoint;
};
RewardResult train_reward(const data::RunConfig& cfg, const Paths& paths,
                          const RewardOptions& options, const Progress& progress = {});

struct PpoOptions {
  bool no_kl_penalty = false;
  bool resume = false;
  std::string name;  // defaults to "ppo" or "ppo_no_kl"
  fs::path policy;   // defaults to <run>/pretrain/model.ckpt
  fs::path reward;   // defaults to <run>/reward/model.ckpt
  fs::path prompts;  // defaults to <run>/data/prompts_train.jsonl
  // Stop after this many batches in total (for interrupted-run tests).
  std::optional<std::size_t> stop_after;
};
struct PpoResult {
  std::size_t steps = 0;
  double final_beta = 0.0;
  double final_kl = 0.0;
  fs::path checkpoint;
};
PpoResult train_ppo(const data::RunConfig& cfg, const Paths& paths, const PpoOptions& options,
                    const Progress& progress = {});

struct DaptResult {
  std::size_t documents = 0;
  std::size_t rejected = 0;
  fs::path checkpoint;
};
DaptResult train_dapt(const data::RunConfig& cfg, const Paths& paths, const Progress& progress = {});

struct GenerateOptions {
  fs::path model;
  std::string prompt;
  std::optional<std::size_t> samples;
  std::optional<double> top_p;
  std::optional<std::size_t> max_new_tokens;
};
std::vector<std::string> generate(const data::RunConfig& cfg, const Paths& paths,
                                  const GenerateOptions& options);

struct EvaluateOptions {
  fs::path model;    // required; missing file -> CheckpointError
  fs::path judge;    // defaults to <run>/reward/model.ckpt
  fs::path prompts;  // defaults to <run>/data/prompts_test.jsonl
  std::string name;  // report name; defaults to the model's directory name
};
struct EvaluateResult {
  eval::EvalReport report;
  fs::path directory;
};
EvaluateResult evaluate(const data::RunConfig& cfg, const Paths& paths,
                        const EvaluateOptions& options, const Progress& progress = {});

// Reads reports, writes comparison.jsonl and comparison.txt under `out`
// and returns the text rendering.
std::string compare(const std::vector<fs::path>& reports, const fs::path& out);

// Held-out perplexity of a policy checkpoint on <run>/data/heldout.txt.
double heldout_perplexity(const Paths& paths, const fs::path& policy);

}  // namespace detox::pipeline
