#include "detox/ppo/trainer.hpp"

#include <cmath>
#include <string>

#include "detox/core/error.hpp"
#include "detox/data/vocabulary.hpp"

namespace detox::ppo {

std::vector<int> strip_specials(std::span<const int> tokens) {
  std::vector<int> out;
  out.reserve(tokens.size());
  for (int t : tokens) {
    if (t < 0 || static_cast<std::size_t>(t) >= data::Vocabulary::kNumSpecial) out.push_back(t);
  }
  return out;
}

RewardFunction make_toxicity_reward(const reward::MtlModel<float>& model, RewardSpan span) {
  return [&model, span](const std::vector<lm::TokenSequence>& sequences) {
    std::vector<std::vector<int>> inputs;
    inputs.reserve(sequences.size());
    for (const auto& s : sequences) {
      inputs.push_back(strip_specials(span == RewardSpan::kContinuation ? s.continuation()
                                                                         : std::span<const int>(s.tokens)));
    }
    std::vector<ScoredText> scores;
    scores.reserve(sequences.size());
    for (double p : model.toxicity_scores(inputs)) {
      scores.push_back({reward::reward_from_toxicity(p), p});
    }
    return scores;
  };
}

template <typename T>
DetoxTrainer<T>::DetoxTrainer(lm::PolicyLm<T>& policy, const lm::PolicyLm<T>& reference,
                              RewardFunction reward, std::vector<lm::TokenSequence> prompts,
                              PpoConfig config, core::Rng rng)
    : policy_(&policy),
      reference_(&reference),
      reward_(std::move(reward)),
      prompts_(std::move(prompts)),
      config_(config),
      rng_(std::move(rng)),
      optimizer_(policy.parameters(), config.adam),
      kl_{config.initial_beta, config.kl_target, 0.0} {
  config_.validate();
  if (prompts_.empty()) throw DataError("detox training: no prompts");
  for (const auto& p : prompts_) p.validate(policy.config().vocab_size);
}

template <typename T>
std::size_t DetoxTrainer<T>::total_steps() const {
  return (config_.episodes + config_.batch_size - 1) / config_.batch_size;
}

template <typename T>
DetoxMetrics DetoxTrainer<T>::step() {
  std::vector<lm::TokenSequence> batch_prompts;
  batch_prompts.reserve(config_.batch_size);
  for (std::size_t i = 0; i < config_.batch_size; ++i) {
    batch_prompts.push_back(prompts_[core::uniform_index(rng_, prompts_.size())]);
  }
  TrajectoryBatch batch =
      collect_rollouts(*policy_, *reference_, reward_, batch_prompts, config_.generation, rng_);
  assign_advantages(batch, kl_.beta, config_.gamma);
  const PpoDiagnostics diag = ppo_update(*policy_, optimizer_, batch, config_, kl_.last_kl);

  DetoxMetrics m;
  m.step = ++step_;
  m.mean_reward = diag.mean_reward;
  m.mean_toxicity = diag.mean_toxicity;
  m.kl = diag.kl;
  m.beta = kl_.beta;
  m.clip_fraction = diag.clip_fraction;
  m.mean_ratio = diag.mean_ratio;
  m.skipped = diag.skipped;
  for (const auto& e : batch.elements) m.mean_advantage += e.advantage;
  m.mean_advantage /= static_cast<double>(batch.elements.size());
  if (config_.adaptive_kl) {
    update_beta(kl_, diag.kl);
  } else {
    kl_.last_kl = diag.kl;
  }
  return m;
}

template <typename T>
std::vector<DetoxMetrics> DetoxTrainer<T>::run(
    const std::function<void(const DetoxMetrics&)>& on_step) {
  std::vector<DetoxMetrics> log;
  while (step_ < total_steps()) {
    log.push_back(step());
    if (on_step) on_step(log.back());
  }
  return log;
}

template <typename T>
void DetoxTrainer<T>::restore(std::size_t step, KlControllerState kl, core::Rng rng,
                              core::OptimizerState<T> optimizer_state) {
  step_ = step;
  kl_ = kl;
  rng_ = std::move(rng);
  optimizer_.load_state(std::move(optimizer_state));
}

lm::Corpus nontoxic_corpus(std::span<const reward::MtlExample> documents,
                           const data::Vocabulary& vocab, std::size_t* rejected) {
  lm::Corpus corpus;
  std::size_t dropped = 0;
  for (const auto& d : documents) {
    if (reward::derive_task1_label(d) != reward::Task1Label::kNontoxic) {
      ++dropped;
      continue;
    }
    corpus.push_back(vocab.encode_document(d.text));
  }
  if (rejected) *rejected = dropped;
  return corpus;
}

template <typename T>
std::vector<lm::LossPoint> train_dapt_baseline(lm::PolicyLm<T>& policy,
                                               std::span<const reward::MtlExample> documents,
                                               const data::Vocabulary& vocab,
                                               const lm::NllConfig& config, core::Rng rng) {
  const lm::Corpus corpus = nontoxic_corpus(documents, vocab);
  if (corpus.empty()) throw DataError("dapt: no nontoxic documents");
  return lm::pretrain_nll(policy, corpus, {}, config, std::move(rng));
}

template class DetoxTrainer<float>;
template class DetoxTrainer<double>;
template std::vector<lm::LossPoint> train_dapt_baseline(lm::PolicyLm<float>&,
                                                        std::span<const reward::MtlExample>,
                                                        const data::Vocabulary&,
                                                        const lm::NllConfig&, core::Rng);
template std::vector<lm::LossPoint> train_dapt_baseline(lm::PolicyLm<double>&,
                                                        std::span<const reward::MtlExample>,
                                                        const data::Vocabulary&,
                                                        const lm::NllConfig&, core::Rng);

}  // namespace detox::ppo
