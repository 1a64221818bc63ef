#include <cstdio>
#include <exception>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "detox/core/error.hpp"
#include "detox/pipeline/pipeline.hpp"

namespace fs = std::filesystem;
namespace pl = detox::pipeline;

namespace {

struct Globals {
  std::string run_dir;
  std::string config_file;
  std::vector<std::string> overrides;
  bool quiet = false;
};

detox::data::RunConfig load_config(const Globals& g) {
  detox::data::RunConfig cfg =
      g.config_file.empty() ? detox::data::RunConfig() : detox::data::RunConfig::load(g.config_file);
  for (const auto& o : g.overrides) cfg.set(o);
  return cfg;
}

pl::Paths paths_of(const Globals& g) {
  return {g.run_dir.empty() ? pl::default_run_dir() : fs::path(g.run_dir)};
}

pl::Progress progress_of(const Globals& g) {
  if (g.quiet) return {};
  return [](const std::string& line) { std::cerr << line << '\n'; };
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Toxicity-reward PPO fine-tuning of small language models"};
  app.require_subcommand(1);
  app.fallthrough();

  Globals g;
  app.add_option("--run-dir", g.run_dir,
                 "Run directory (default: $DETOX_RUN_ROOT/default, else runs/default)");
  app.add_option("--config", g.config_file, "Configuration file of key = value lines");
  app.add_option("--set", g.overrides, "Override one key, e.g. --set ppo.episodes=3200")
      ->type_name("KEY=VALUE");
  app.add_flag("-q,--quiet", g.quiet, "Suppress progress output");

  auto* make_data = app.add_subcommand("make-data", "Generate the synthetic corpus and prompt splits");
  auto* pretrain = app.add_subcommand("pretrain-lm", "Pretrain the policy LM on the synthetic corpus");

  auto* reward = app.add_subcommand("train-reward", "Train the multitask toxicity reward model");
  pl::RewardOptions reward_opts;
  reward->add_flag("--single-task", reward_opts.single_task, "Train only the Task 1 head (ablation)");
  reward->add_option("--name", reward_opts.name, "Output stage directory name");

  auto* ppo = app.add_subcommand("train-ppo", "Fine-tune the policy with PPO against the reward model");
  pl::PpoOptions ppo_opts;
  std::string ppo_policy, ppo_reward, ppo_prompts;
  std::size_t stop_after = 0;
  ppo->add_flag("--no-kl-penalty", ppo_opts.no_kl_penalty, "Fix beta at 0 for the whole run (ablation)");
  ppo->add_flag("--resume", ppo_opts.resume, "Continue from the stage's state checkpoint");
  ppo->add_option("--name", ppo_opts.name, "Output stage directory name");
  ppo->add_option("--policy", ppo_policy, "Initial policy checkpoint");
  ppo->add_option("--reward", ppo_reward, "Reward model checkpoint");
  ppo->add_option("--prompts", ppo_prompts, "Training prompt file");
  ppo->add_option("--stop-after", stop_after, "Stop after this many batches in total");

  auto* dapt = app.add_subcommand("train-dapt", "Continue pretraining on the nontoxic subset (baseline)");

  auto* gen = app.add_subcommand("generate", "Sample continuations of a prompt");
  pl::GenerateOptions gen_opts;
  std::string gen_model;
  std::size_t gen_samples = 0, gen_tokens = 0;
  double gen_top_p = 0.0;
  gen->add_option("--prompt", gen_opts.prompt, "Prompt text")->required();
  gen->add_option("--model", gen_model, "Policy checkpoint (default: pretrained LM)");
  auto* samples_opt = gen->add_option("--samples", gen_samples, "Number of continuations");
  auto* top_p_opt = gen->add_option("--top-p", gen_top_p, "Nucleus probability mass");
  auto* tokens_opt = gen->add_option("--max-new-tokens", gen_tokens, "Continuation length");

  auto* evaluate = app.add_subcommand("evaluate", "Score a policy's generations with the judge model");
  pl::EvaluateOptions eval_opts;
  std::string eval_model, eval_judge, eval_prompts;
  evaluate->add_option("--model", eval_model, "Policy checkpoint to evaluate")->required();
  evaluate->add_option("--judge", eval_judge, "Judge checkpoint (default: reward/model.ckpt)");
  evaluate->add_option("--prompts", eval_prompts, "Prompt file (default: data/prompts_test.jsonl)");
  evaluate->add_option("--name", eval_opts.name, "Report name");

  auto* ppl = app.add_subcommand("perplexity", "Held-out perplexity of a policy checkpoint");
  std::string ppl_model;
  ppl->add_option("--model", ppl_model, "Policy checkpoint")->required();

  auto* compare = app.add_subcommand("compare", "Tabulate several evaluation reports side by side");
  std::vector<std::string> reports;
  std::string compare_out;
  compare->add_option("reports", reports, "report.jsonl files")->required()->expected(2, -1);
  compare->add_option("--out", compare_out, "Directory for comparison.jsonl and comparison.txt");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    const detox::data::RunConfig cfg = load_config(g);
    const pl::Paths paths = paths_of(g);
    const pl::Progress progress = progress_of(g);

    if (*make_data) {
      const auto files = pl::make_data(cfg, paths, progress);
      std::cout << "wrote " << files.manifest.parent_path().string() << '\n';
    } else if (*pretrain) {
      const auto r = pl::pretrain_lm(cfg, paths, progress);
      std::printf("held-out perplexity %.4f\n%s\n", r.heldout_perplexity, r.checkpoint.c_str());
    } else if (*reward) {
      const auto r = pl::train_reward(cfg, paths, reward_opts, progress);
      std::printf("task 1 test precision %.4f recall %.4f f1 %.4f\n%s\n", r.task1_test.precision,
                  r.task1_test.recall, r.task1_test.f1, r.checkpoint.c_str());
    } else if (*ppo) {
      ppo_opts.policy = ppo_policy;
      ppo_opts.reward = ppo_reward;
      ppo_opts.prompts = ppo_prompts;
      if (ppo->count("--stop-after")) ppo_opts.stop_after = stop_after;
      const auto r = pl::train_ppo(cfg, paths, ppo_opts, progress);
      std::printf("%zu batches, beta %.6g, last kl %.6g\n", r.steps, r.final_beta, r.final_kl);
      if (!r.checkpoint.empty()) std::printf("%s\n", r.checkpoint.c_str());
    } else if (*dapt) {
      const auto r = pl::train_dapt(cfg, paths, progress);
      std::printf("%zu documents, %zu rejected\n%s\n", r.documents, r.rejected, r.checkpoint.c_str());
    } else if (*gen) {
      gen_opts.model = gen_model;
      if (*samples_opt) gen_opts.samples = gen_samples;
      if (*top_p_opt) gen_opts.top_p = gen_top_p;
      if (*tokens_opt) gen_opts.max_new_tokens = gen_tokens;
      for (const auto& text : pl::generate(cfg, paths, gen_opts)) std::cout << text << '\n';
    } else if (*evaluate) {
      eval_opts.model = eval_model;
      eval_opts.judge = eval_judge;
      eval_opts.prompts = eval_prompts;
      const auto r = pl::evaluate(cfg, paths, eval_opts, progress);
      std::cout << detox::eval::render_report(r.report);
    } else if (*ppl) {
      std::printf("%.4f\n", pl::heldout_perplexity(paths, ppl_model));
    } else if (*compare) {
      std::vector<fs::path> files(reports.begin(), reports.end());
      std::cout << pl::compare(files, compare_out);
    }
  } catch (const detox::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return e.exit_code();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
