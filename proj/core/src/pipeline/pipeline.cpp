#include "detox/pipeline/pipeline.hpp"

#include <cstdlib>
#include <fstream>

#include <nlohmann/json.hpp>

#include "detox/core/error.hpp"
#include "detox/data/checkpoint.hpp"
#include "detox/data/jsonl.hpp"
#include "detox/data/prompts.hpp"
#include "detox/lm/generation.hpp"
#include "detox/lm/training.hpp"
#include "detox/ppo/trainer.hpp"

namespace detox::pipeline {

namespace {

void say(const Progress& progress, const std::string& message) {
  if (progress) progress(message);
}

fs::path prepare_stage(const data::RunConfig& cfg, const fs::path& dir) {
  fs::create_directories(dir);
  cfg.save(dir / "config.txt");
  return dir;
}

data::Vocabulary load_vocab(const Paths& paths) {
  const fs::path p = paths.data() / "vocab.txt";
  if (!fs::exists(p)) throw DataError("missing vocabulary " + p.string() + " (run make-data first)");
  return data::Vocabulary::load(p);
}

lm::Corpus encode_lines(const data::Vocabulary& vocab, const fs::path& path) {
  lm::Corpus corpus;
  for (const auto& line : data::read_lines(path)) corpus.push_back(vocab.encode_document(line));
  return corpus;
}

void check_vocab(const data::Checkpoint& ckpt, const data::Vocabulary& vocab, const fs::path& path) {
  if (data::vocab_fingerprint_of(ckpt) != vocab.fingerprint()) {
    throw ConfigError(path.string() + " was trained on a different vocabulary");
  }
}

nlohmann::json metrics_json(const reward::BinaryMetrics& m) {
  return {{"precision", m.precision}, {"recall", m.recall},       {"f1", m.f1},
          {"accuracy", m.accuracy},   {"tp", m.true_positive},    {"fp", m.false_positive},
          {"tn", m.true_negative},    {"fn", m.false_negative}};
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

}  // namespace

fs::path default_run_dir() {
  const char* root = std::getenv("DETOX_RUN_ROOT");
  return fs::path(root && *root ? root : "runs") / "default";
}

data::DataFiles make_data(const data::RunConfig& cfg, const Paths& paths, const Progress& progress) {
  data::RunLock lock(paths.run);
  const fs::path dir = prepare_stage(cfg, paths.data());
  say(progress, "generating synthetic corpus in " + dir.string());
  return data::make_toy_data(cfg.synthetic(), dir);
}

PretrainResult pretrain_lm(const data::RunConfig& cfg, const Paths& paths, const Progress& progress) {
  data::RunLock lock(paths.run);
  const data::Vocabulary vocab = load_vocab(paths);
  const lm::Corpus train = encode_lines(vocab, paths.data() / "pretrain.txt");
  const lm::Corpus heldout = encode_lines(vocab, paths.data() / "heldout.txt");
  const fs::path dir = prepare_stage(cfg, paths.stage("pretrain"));

  const std::uint64_t seed = cfg.u64("seed");
  core::Rng init = core::make_rng(seed, core::Stream::kInit, 0);
  lm::PolicyLm<float> model(cfg.lm(vocab.size()), core::Init::kNormal, init);
  lm::NllTrainer<float> trainer(model, train, cfg.pretrain(),
                                core::make_rng(seed, core::Stream::kShuffle, 0));
  const lm::Corpus held = lm::prepare_corpus(heldout, model.config().max_sequence_length);
  const auto curve = trainer.run(&held);
  data::JsonlWriter log(dir / "metrics.jsonl");
  for (const auto& p : curve) {
    nlohmann::json j = {{"step", p.step}, {"train_nll", p.train_nll}};
    if (p.heldout_nll >= 0.0) {
      j["heldout_nll"] = p.heldout_nll;
      say(progress, "step " + std::to_string(p.step) + " train " + fmt(p.train_nll) +
                        " heldout " + fmt(p.heldout_nll));
    }
    log.write(j);
  }
  PretrainResult r;
  r.heldout_perplexity = lm::perplexity(model, held);
  r.checkpoint = dir / "model.ckpt";
  data::save_checkpoint(r.checkpoint, data::policy_checkpoint(model, vocab.fingerprint()));
  say(progress, "held-out perplexity " + fmt(r.heldout_perplexity));
  return r;
}

RewardResult train_reward(const data::RunConfig& cfg, const Paths& paths,
                          const RewardOptions& options, const Progress& progress) {
  data::RunLock lock(paths.run);
  const data::Vocabulary vocab = load_vocab(paths);
  const auto train = reward::read_mtl_jsonl((paths.data() / "mtl_train.jsonl").string());
  const auto test = reward::read_mtl_jsonl((paths.data() / "mtl_test.jsonl").string());
  const std::string name =
      options.name.empty() ? (options.single_task ? "reward_single" : "reward") : options.name;
  const fs::path dir = prepare_stage(cfg, paths.stage(name));

  const std::uint64_t seed = cfg.u64("seed");
  core::Rng init = core::make_rng(seed, core::Stream::kInit, 1);
  core::Rng shuffle = core::make_rng(seed, core::Stream::kShuffle, 1);
  const std::vector<int> tasks =
      options.single_task ? std::vector<int>{1} : std::vector<int>{1, 2, 3, 4, 5, 6};
  reward::MtlModel<float> model(cfg.mtl(vocab.size()), tasks, core::Init::kNormal,
                                core::Init::kNormal, init);
  data::JsonlWriter schedule(dir / "schedule.jsonl");
  std::size_t last_epoch = 0;
  double epoch_loss = 0.0;
  std::size_t epoch_steps = 0;
  auto on_step = [&](const reward::ScheduleEntry& e) {
    schedule.write({{"epoch", e.epoch}, {"step", e.step}, {"task", e.task_id}, {"loss", e.loss}});
    if (e.epoch != last_epoch && epoch_steps > 0) {
      say(progress, "epoch " + std::to_string(last_epoch) + " mean loss " +
                        fmt(epoch_loss / static_cast<double>(epoch_steps)));
      epoch_loss = 0.0;
      epoch_steps = 0;
    }
    last_epoch = e.epoch;
    epoch_loss += e.loss;
    ++epoch_steps;
  };
  if (options.single_task) {
    reward::train_single_task_ablation(model, reward::build_task1_dataset(train, vocab),
                                       cfg.mtl_train(), shuffle, on_step);
  } else {
    reward::train_anti_curriculum(model, reward::build_task_datasets(train, vocab),
                                  cfg.mtl_train(), shuffle, on_step);
  }
  if (epoch_steps > 0) {
    say(progress, "epoch " + std::to_string(last_epoch) + " mean loss " +
                      fmt(epoch_loss / static_cast<double>(epoch_steps)));
  }
  RewardResult r;
  r.task1_test = reward::evaluate_task1(model, reward::build_task1_dataset(test, vocab));
  std::ofstream(dir / "metrics.json") << nlohmann::json{{"task1_test", metrics_json(r.task1_test)}}.dump(2)
                                      << '\n';
  r.checkpoint = dir / "model.ckpt";
  data::save_checkpoint(r.checkpoint, data::reward_checkpoint(model, vocab.fingerprint()));
  say(progress, "task 1 test precision " + fmt(r.task1_test.precision) + " recall " +
                    fmt(r.task1_test.recall) + " f1 " + fmt(r.task1_test.f1));
  return r;
}

PpoResult train_ppo(const data::RunConfig& base_cfg, const Paths& paths, const PpoOptions& options,
                    const Progress& progress) {
  data::RunLock lock(paths.run);
  data::RunConfig cfg = base_cfg;
  if (options.no_kl_penalty) {
    cfg.set("ppo.initial_beta", "0");
    cfg.set("ppo.adaptive_kl", "false");
  }
  const data::Vocabulary vocab = load_vocab(paths);
  const fs::path policy_path =
      options.policy.empty() ? paths.stage("pretrain") / "model.ckpt" : options.policy;
  const fs::path reward_path =
      options.reward.empty() ? paths.stage("reward") / "model.ckpt" : options.reward;
  const fs::path prompts_path =
      options.prompts.empty() ? paths.data() / "prompts_train.jsonl" : options.prompts;

  const data::Checkpoint policy_ckpt = data::load_checkpoint(policy_path);
  check_vocab(policy_ckpt, vocab, policy_path);
  const data::Checkpoint reward_ckpt = data::load_checkpoint(reward_path);
  check_vocab(reward_ckpt, vocab, reward_path);
  const lm::PolicyLm<float> reference = data::load_policy(policy_ckpt);
  lm::PolicyLm<float> policy = reference;
  const reward::MtlModel<float> scorer = data::load_reward(reward_ckpt);
  if (!scorer.has_task(reward::kToxicityTask)) throw ConfigError("reward model lacks a Task 1 head");

  std::vector<lm::TokenSequence> prompts;
  for (const auto& p : data::read_prompts(prompts_path)) {
    lm::TokenSequence s;
    s.tokens = vocab.encode_document(p.text);
    s.prompt_len = s.tokens.size();
    prompts.push_back(std::move(s));
  }

  const std::string name =
      options.name.empty() ? (options.no_kl_penalty ? "ppo_no_kl" : "ppo") : options.name;
  const fs::path dir = prepare_stage(cfg, paths.stage(name));
  const fs::path state_path = dir / "state.ckpt";
  const fs::path metrics_path = dir / "metrics.jsonl";

  ppo::DetoxTrainer<float> trainer(policy, reference,
                                   ppo::make_toxicity_reward(scorer, cfg.reward_span()), prompts,
                                   cfg.ppo(), core::make_rng(cfg.u64("seed"), core::Stream::kSampling, 0));
  bool append = false;
  if (options.resume && fs::exists(state_path)) {
    const data::Checkpoint state = data::load_checkpoint(state_path);
    data::restore(policy.parameters(), state.arrays);
    if (!state.optimizer || !state.rng) throw CheckpointError("state checkpoint lacks trainer state");
    ppo::KlControllerState kl;
    std::size_t step = 0;
    try {
      step = state.extra.at("step").get<std::size_t>();
      kl.beta = state.extra.at("beta").get<double>();
      kl.kl_target = state.extra.at("kl_target").get<double>();
      kl.last_kl = state.extra.at("last_kl").get<double>();
    } catch (const nlohmann::json::exception& e) {
      throw CheckpointError(state_path.string() + ": " + e.what());
    }
    trainer.restore(step, kl, core::deserialize_rng(*state.rng), *state.optimizer);
    // Keep the metric lines written up to the restored step.
    std::vector<nlohmann::json> kept;
    if (fs::exists(metrics_path)) {
      for (const auto& j : data::read_jsonl(metrics_path)) {
        if (j.at("step").get<std::size_t>() <= step) kept.push_back(j);
      }
    }
    data::write_jsonl(metrics_path, kept);
    append = true;
    say(progress, "resumed at batch " + std::to_string(step));
  }

  auto save_state = [&]() {
    data::Checkpoint c = data::policy_checkpoint(policy, vocab.fingerprint());
    c.optimizer = trainer.optimizer().state();
    c.rng = core::serialize_rng(trainer.rng());
    c.extra["step"] = trainer.steps_done();
    c.extra["beta"] = trainer.kl_state().beta;
    c.extra["kl_target"] = trainer.kl_state().kl_target;
    c.extra["last_kl"] = trainer.kl_state().last_kl;
    data::save_checkpoint(state_path, c);
  };

  data::JsonlWriter metrics(metrics_path, append);
  const std::size_t every = std::max<std::size_t>(1, cfg.count("ppo.checkpoint_every"));
  const std::size_t limit = std::min(trainer.total_steps(), options.stop_after.value_or(trainer.total_steps()));
  while (trainer.steps_done() < limit) {
    const ppo::DetoxMetrics m = trainer.step();
    metrics.write({{"step", m.step},
                   {"mean_reward", m.mean_reward},
                   {"mean_toxicity", m.mean_toxicity},
                   {"kl", m.kl},
                   {"beta", m.beta},
                   {"clip_fraction", m.clip_fraction},
                   {"mean_ratio", m.mean_ratio},
                   {"mean_advantage", m.mean_advantage},
                   {"skipped", m.skipped}});
    if (m.skipped) say(progress, "batch " + std::to_string(m.step) + " skipped: KL " + fmt(m.kl));
    if (m.step % every == 0 || m.step == limit) {
      save_state();
      say(progress, "batch " + std::to_string(m.step) + "/" + std::to_string(trainer.total_steps()) +
                        " reward " + fmt(m.mean_reward) + " toxicity " + fmt(m.mean_toxicity) +
                        " kl " + fmt(m.kl) + " beta " + fmt(m.beta));
    }
  }
  PpoResult r;
  r.steps = trainer.steps_done();
  r.final_beta = trainer.kl_state().beta;
  r.final_kl = trainer.kl_state().last_kl;
  if (trainer.steps_done() == trainer.total_steps()) {
    r.checkpoint = dir / "model.ckpt";
    data::save_checkpoint(r.checkpoint, data::policy_checkpoint(policy, vocab.fingerprint()));
  }
  return r;
}

DaptResult train_dapt(const data::RunConfig& cfg, const Paths& paths, const Progress& progress) {
  data::RunLock lock(paths.run);
  const data::Vocabulary vocab = load_vocab(paths);
  const fs::path policy_path = paths.stage("pretrain") / "model.ckpt";
  const data::Checkpoint ckpt = data::load_checkpoint(policy_path);
  check_vocab(ckpt, vocab, policy_path);
  lm::PolicyLm<float> policy = data::load_policy(ckpt);
  const auto docs = reward::read_mtl_jsonl((paths.data() / "mtl_train.jsonl").string());
  const fs::path dir = prepare_stage(cfg, paths.stage("dapt"));

  DaptResult r;
  const lm::Corpus corpus = ppo::nontoxic_corpus(docs, vocab, &r.rejected);
  r.documents = corpus.size();
  say(progress, "dapt corpus: " + std::to_string(r.documents) + " nontoxic documents, " +
                    std::to_string(r.rejected) + " rejected");
  const auto curve = ppo::train_dapt_baseline(policy, docs, vocab, cfg.dapt(),
                                              core::make_rng(cfg.u64("seed"), core::Stream::kShuffle, 2));
  data::JsonlWriter log(dir / "metrics.jsonl");
  for (const auto& p : curve) log.write({{"step", p.step}, {"train_nll", p.train_nll}});
  r.checkpoint = dir / "model.ckpt";
  data::save_checkpoint(r.checkpoint, data::policy_checkpoint(policy, vocab.fingerprint()));
  return r;
}

std::vector<std::string> generate(const data::RunConfig& cfg, const Paths& paths,
                                  const GenerateOptions& options) {
  const data::Vocabulary vocab = load_vocab(paths);
  const fs::path model_path =
      options.model.empty() ? paths.stage("pretrain") / "model.ckpt" : options.model;
  const data::Checkpoint ckpt = data::load_checkpoint(model_path);
  check_vocab(ckpt, vocab, model_path);
  const lm::PolicyLm<float> policy = data::load_policy(ckpt);
  lm::GenerationParams params = cfg.generation();
  if (options.samples) params.num_samples = *options.samples;
  if (options.top_p) params.top_p = *options.top_p;
  if (options.max_new_tokens) params.max_new_tokens = *options.max_new_tokens;
  params.validate();
  lm::TokenSequence prompt;
  prompt.tokens = vocab.encode_document(options.prompt);
  prompt.prompt_len = prompt.tokens.size();
  core::Rng rng = core::make_rng(cfg.u64("seed"), core::Stream::kSampling, 1);
  std::vector<std::string> out;
  for (const auto& g : lm::sample_nucleus(policy, prompt, params, rng)) {
    out.push_back(vocab.decode(g.continuation()));
  }
  return out;
}

EvaluateResult evaluate(const data::RunConfig& cfg, const Paths& paths,
                        const EvaluateOptions& options, const Progress& progress) {
  data::RunLock lock(paths.run);
  if (options.model.empty()) throw ConfigError("evaluate: no model checkpoint given");
  const data::Checkpoint ckpt = data::load_checkpoint(options.model);
  const data::Vocabulary vocab = load_vocab(paths);
  check_vocab(ckpt, vocab, options.model);
  const lm::PolicyLm<float> policy = data::load_policy(ckpt);
  const fs::path judge_path =
      options.judge.empty() ? paths.stage("reward") / "model.ckpt" : options.judge;
  const data::Checkpoint judge_ckpt = data::load_checkpoint(judge_path);
  const reward::MtlModel<float> judge = data::load_reward(judge_ckpt);
  const fs::path prompts_path =
      options.prompts.empty() ? paths.data() / "prompts_test.jsonl" : options.prompts;
  const auto prompts = data::read_prompts(prompts_path);

  std::string name = options.name;
  if (name.empty()) name = fs::absolute(options.model).parent_path().filename().string();
  const fs::path dir = prepare_stage(cfg, paths.stage("eval") / name);
  say(progress, "evaluating " + name + " on " + std::to_string(prompts.size()) + " prompts");
  const eval::Evaluation result =
      eval::evaluate_model(name, policy, vocab, prompts, {&judge, data::vocab_fingerprint_of(judge_ckpt)},
                           cfg.evaluation());
  eval::write_generation_log(dir / "generations.jsonl", result.log);
  eval::write_report(dir / "report.jsonl", result.report);
  std::ofstream(dir / "report.txt") << eval::render_report(result.report);
  return {result.report, dir};
}

std::string compare(const std::vector<fs::path>& reports, const fs::path& out) {
  std::vector<eval::EvalReport> loaded;
  for (const auto& p : reports) loaded.push_back(eval::read_report(p));
  const eval::Comparison c = eval::compare_models(loaded);
  const std::string text = eval::render_comparison(c);
  if (!out.empty()) {
    fs::create_directories(out);
    eval::write_comparison(out / "comparison.jsonl", c);
    std::ofstream(out / "comparison.txt") << text;
  }
  return text;
}

double heldout_perplexity(const Paths& paths, const fs::path& policy_path) {
  const data::Vocabulary vocab = load_vocab(paths);
  const data::Checkpoint ckpt = data::load_checkpoint(policy_path);
  check_vocab(ckpt, vocab, policy_path);
  const lm::PolicyLm<float> policy = data::load_policy(ckpt);
  return lm::perplexity(policy, encode_lines(vocab, paths.data() / "heldout.txt"));
}

}  // namespace detox::pipeline
