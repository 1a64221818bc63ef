#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "detox/core/adam.hpp"
#include "detox/core/random.hpp"
#include "detox/lm/policy_lm.hpp"
#include "detox/lm/training.hpp"
#include "detox/ppo/ppo.hpp"
#include "detox/reward/mtl_model.hpp"
#include "detox/reward/tasks.hpp"

namespace detox::ppo {

// Which part of a sequence the reward model reads.
enum class RewardSpan { kPromptAndContinuation, kContinuation };

// Scores sequences with the Task 1 head; special tokens are stripped and the
// reward is 1 - 2 P(toxic). The model must outlive the returned function.
RewardFunction make_toxicity_reward(const reward::MtlModel<float>& model, RewardSpan span);

// Word ids with special tokens removed.
std::vector<int> strip_specials(std::span<const int> tokens);

// One logged batch.
struct DetoxMetrics {
  std::size_t step = 0;
  double mean_reward = 0.0;
  double mean_toxicity = 0.0;
  double kl = 0.0;
  double beta = 0.0;  // value used for this batch's returns
  double clip_fraction = 0.0;
  double mean_ratio = 1.0;
  double mean_advantage = 0.0;
  bool skipped = false;
};

// The rollout / advantage / update / beta loop. Prompts for each batch are
// drawn uniformly with replacement from the training prompts.
template <typename T>
class DetoxTrainer {
 public:
  DetoxTrainer(lm::PolicyLm<T>& policy, const lm::PolicyLm<T>& reference, RewardFunction reward,
               std::vector<lm::TokenSequence> prompts, PpoConfig config, core::Rng rng);

  DetoxMetrics step();
  // Runs to ceil(episodes / batch_size) batches.
  std::vector<DetoxMetrics> run(const std::function<void(const DetoxMetrics&)>& on_step = {});

  std::size_t total_steps() const;
  std::size_t steps_done() const { return step_; }
  const KlControllerState& kl_state() const { return kl_; }
  const core::Rng& rng() const { return rng_; }
  core::Adam<T>& optimizer() { return optimizer_; }
  const PpoConfig& config() const { return config_; }

  void restore(std::size_t step, KlControllerState kl, core::Rng rng,
               core::OptimizerState<T> optimizer_state);

 private:
  lm::PolicyLm<T>* policy_;
  const lm::PolicyLm<T>* reference_;
  RewardFunction reward_;
  std::vector<lm::TokenSequence> prompts_;
  PpoConfig config_;
  core::Rng rng_;
  core::Adam<T> optimizer_;
  KlControllerState kl_;
  std::size_t step_ = 0;
};

// Nontoxic documents (Task 1 label "nontoxic") as <bos>-prefixed token
// sequences; toxic and borderline documents are rejected and counted.
lm::Corpus nontoxic_corpus(std::span<const reward::MtlExample> documents,
                           const data::Vocabulary& vocab, std::size_t* rejected = nullptr);

// Continued NLL training on a nontoxic corpus.
template <typename T>
std::vector<lm::LossPoint> train_dapt_baseline(lm::PolicyLm<T>& policy,
                                               std::span<const reward::MtlExample> documents,
                                               const data::Vocabulary& vocab,
                                               const lm::NllConfig& config, core::Rng rng);

extern template class DetoxTrainer<float>;
extern template class DetoxTrainer<double>;

}  // namespace detox::ppo
