#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "detox/core/adam.hpp"
#include "detox/core/random.hpp"
#include "detox/core/tensor.hpp"
#include "detox/lm/generation.hpp"
#include "detox/lm/policy_lm.hpp"

namespace detox::ppo {

struct PpoConfig {
  double clip_epsilon = 0.1;
  std::size_t ppo_epochs = 2;
  std::size_t minibatches = 1;
  std::size_t episodes = 20000;
  std::size_t batch_size = 16;  // prompts per batch
  double gamma = 1.0;
  core::AdamConfig adam{1.1e-5, 0.9, 0.999, 1e-8, 0.0};
  double initial_beta = 0.1;
  double kl_target = 18.0;
  bool adaptive_kl = true;
  // Divergence guard: multiple of kl_target above which a KL spike skips the update.
  double skip_kl_factor = 4.0;
  lm::GenerationParams generation{};

  void validate() const;  // ConfigError
};

struct KlControllerState {
  double beta = 0.1;
  double kl_target = 18.0;
  double last_kl = 0.0;
};

// e = clip(KL / KL_target - 1, -0.1, 0.1); beta <- beta (1 + 0.1 e).
// Returns the new beta.
double update_beta(KlControllerState& state, double measured_kl);

// min(ratio A, (1 + eps) A) for A >= 0, min(ratio A, (1 - eps) A) for A < 0.
// Throws NumericalError for a non-finite ratio.
double ppo_surrogate(double ratio, double advantage, double epsilon);

// Per-token rewards -beta (log pi - log pi_init), with the toxicity reward
// added at the last token. Throws DataError on misaligned inputs.
std::vector<double> shaped_reward(double toxicity_reward, std::span<const double> logp_policy,
                                  std::span<const double> logp_init, double beta);

// sum_t gamma^t r_t
double discounted_return(std::span<const double> rewards, double gamma);

struct ScoredText {
  double reward = 0.0;    // r^toxicity
  double toxicity = 0.0;  // P(toxic)
};

// Scores complete sequences (prompt and continuation).
using RewardFunction = std::function<std::vector<ScoredText>(const std::vector<lm::TokenSequence>&)>;

// One prompt's sampled and greedy continuations.
struct Trajectory {
  lm::TokenSequence sampled, greedy;
  std::vector<double> logp_sampled, logp_sampled_init;
  std::vector<double> logp_greedy, logp_greedy_init;
  ScoredText score_sampled, score_greedy;
  double return_sampled = 0.0, return_greedy = 0.0;
  double advantage = 0.0;
};

struct TrajectoryBatch {
  std::vector<Trajectory> elements;
  std::size_t continuation_tokens() const;
};

// Samples one nucleus continuation and one greedy continuation per prompt
// and records per-token log-probs under the policy and the reference. Throws
// DataError for an empty prompt set.
template <typename T>
TrajectoryBatch collect_rollouts(const lm::PolicyLm<T>& policy, const lm::PolicyLm<T>& reference,
                                 const RewardFunction& reward,
                                 const std::vector<lm::TokenSequence>& prompts,
                                 const lm::GenerationParams& params, core::Rng& rng);

// Fills the shaped returns of both branches and the advantage
// R(sampled) - R(greedy).
void assign_advantages(TrajectoryBatch& batch, double beta, double gamma);

double self_critical_advantage(double sampled_return, double greedy_return);

// Batch mean of the per-sequence mean log-ratio of the sampled branch.
double measured_kl(const TrajectoryBatch& batch);

// Differentiable log pi(token | prefix) of every continuation token of every
// sequence, concatenated in order.
template <typename T>
core::Tensor<T> continuation_log_probs(const lm::PolicyLm<T>& model,
                                       std::span<const lm::TokenSequence> sequences);

// -mean_t min(ratio_t A_t, clip(ratio_t) A_t) with ratio_t = exp(logp_t - old_t).
template <typename T>
core::Tensor<T> clipped_surrogate_loss(const core::Tensor<T>& logp, std::span<const double> old_logp,
                                       std::span<const double> advantages, double epsilon);

struct PpoDiagnostics {
  double mean_ratio = 1.0;
  double clip_fraction = 0.0;
  double kl = 0.0;
  double mean_reward = 0.0;
  double mean_toxicity = 0.0;
  double objective = 0.0;
  bool skipped = false;
};

// PPO epochs over the batch (whole batch per minibatch unless configured
// otherwise). The first epoch's log-probs are the old-policy values, so
// every ratio starts at exactly 1. The update is skipped when the batch KL
// crosses skip_kl_factor * kl_target while `previous_kl` was still within
// it; a policy that stays above the limit keeps updating so the KL penalty
// can pull it back.
template <typename T>
PpoDiagnostics ppo_update(lm::PolicyLm<T>& policy, core::Adam<T>& optimizer,
                          const TrajectoryBatch& batch, const PpoConfig& config,
                          double previous_kl = 0.0);

extern template TrajectoryBatch collect_rollouts(const lm::PolicyLm<float>&,
                                                 const lm::PolicyLm<float>&, const RewardFunction&,
                                                 const std::vector<lm::TokenSequence>&,
                                                 const lm::GenerationParams&, core::Rng&);
extern template TrajectoryBatch collect_rollouts(const lm::PolicyLm<double>&,
                                                 const lm::PolicyLm<double>&,
                                                 const RewardFunction&,
                                                 const std::vector<lm::TokenSequence>&,
                                                 const lm::GenerationParams&, core::Rng&);

}  // namespace detox::ppo
