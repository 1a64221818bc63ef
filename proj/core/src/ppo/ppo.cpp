#include "detox/ppo/ppo.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "detox/core/error.hpp"
#include "detox/core/ops.hpp"

namespace detox::ppo {

using core::Tensor;

void PpoConfig::validate() const {
  if (!(clip_epsilon > 0.0 && clip_epsilon <= 0.5)) {
    throw ConfigError("ppo: clip_epsilon must be in (0, 0.5]");
  }
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw ConfigError("ppo: gamma must be in [0, 1]");
  if (ppo_epochs == 0) throw ConfigError("ppo: ppo_epochs must be positive");
  if (minibatches == 0) throw ConfigError("ppo: minibatches must be positive");
  if (batch_size == 0) throw ConfigError("ppo: batch_size must be positive");
  if (minibatches > batch_size) throw ConfigError("ppo: more minibatches than batch elements");
  if (!(initial_beta >= 0.0)) throw ConfigError("ppo: initial_beta must be >= 0");
  if (!(kl_target > 0.0)) throw ConfigError("ppo: kl_target must be positive");
  if (!(adam.learning_rate > 0.0)) throw ConfigError("ppo: learning rate must be positive");
  generation.validate();
}

double update_beta(KlControllerState& state, double measured_kl) {
  const double e = std::clamp(measured_kl / state.kl_target - 1.0, -0.1, 0.1);
  state.beta *= 1.0 + 0.1 * e;
  state.last_kl = measured_kl;
  return state.beta;
}

double ppo_surrogate(double ratio, double advantage, double epsilon) {
  if (!std::isfinite(ratio)) throw NumericalError("ppo_surrogate: non-finite ratio");
  const double clipped = advantage >= 0.0 ? (1.0 + epsilon) * advantage : (1.0 - epsilon) * advantage;
  return std::min(ratio * advantage, clipped);
}

std::vector<double> shaped_reward(double toxicity_reward, std::span<const double> logp_policy,
                                  std::span<const double> logp_init, double beta) {
  if (logp_policy.size() != logp_init.size()) {
    throw DataError("shaped_reward: " + std::to_string(logp_policy.size()) + " policy vs " +
                    std::to_string(logp_init.size()) + " reference log-probs");
  }
  if (logp_policy.empty()) throw DataError("shaped_reward: empty continuation");
  std::vector<double> rewards(logp_policy.size());
  for (std::size_t t = 0; t < rewards.size(); ++t) {
    rewards[t] = -beta * (logp_policy[t] - logp_init[t]);
  }
  rewards.back() += toxicity_reward;
  return rewards;
}

double discounted_return(std::span<const double> rewards, double gamma) {
  double g = 0.0;
  for (std::size_t t = rewards.size(); t > 0; --t) g = rewards[t - 1] + gamma * g;
  return g;
}

double self_critical_advantage(double sampled_return, double greedy_return) {
  return sampled_return - greedy_return;
}

std::size_t TrajectoryBatch::continuation_tokens() const {
  std::size_t n = 0;
  for (const auto& e : elements) n += e.sampled.continuation().size();
  return n;
}

void assign_advantages(TrajectoryBatch& batch, double beta, double gamma) {
  for (auto& e : batch.elements) {
    e.return_sampled = discounted_return(
        shaped_reward(e.score_sampled.reward, e.logp_sampled, e.logp_sampled_init, beta), gamma);
    e.return_greedy = discounted_return(
        shaped_reward(e.score_greedy.reward, e.logp_greedy, e.logp_greedy_init, beta), gamma);
    e.advantage = self_critical_advantage(e.return_sampled, e.return_greedy);
  }
}

double measured_kl(const TrajectoryBatch& batch) {
  if (batch.elements.empty()) return 0.0;
  double total = 0.0;
  for (const auto& e : batch.elements) {
    double s = 0.0;
    for (std::size_t t = 0; t < e.logp_sampled.size(); ++t) {
      s += e.logp_sampled[t] - e.logp_sampled_init[t];
    }
    total += s / static_cast<double>(std::max<std::size_t>(1, e.logp_sampled.size()));
  }
  return total / static_cast<double>(batch.elements.size());
}

template <typename T>
Tensor<T> continuation_log_probs(const lm::PolicyLm<T>& model,
                                 std::span<const lm::TokenSequence> sequences) {
  lm::PackedBatch packed;
  std::vector<std::size_t> rows;
  std::vector<int> targets;
  for (const auto& s : sequences) {
    s.validate(model.config().vocab_size);
    if (s.prompt_len == 0) throw ContextError("continuation_log_probs: prompt must be nonempty");
    const std::size_t offset = packed.total();
    for (std::size_t t = s.prompt_len; t < s.tokens.size(); ++t) {
      rows.push_back(offset + t - 1);
      targets.push_back(s.tokens[t]);
    }
    packed.append(s.tokens);
  }
  if (rows.empty()) throw DataError("continuation_log_probs: no continuation tokens");
  Tensor<T> hidden = core::select_rows(model.hidden_states(packed), rows);
  return core::log_softmax_gather(core::matmul_transposed(hidden, model.head()), targets);
}

namespace {

template <typename T>
std::vector<std::vector<double>> split_log_probs(const Tensor<T>& flat,
                                                 std::span<const lm::TokenSequence> sequences) {
  std::vector<std::vector<double>> out;
  std::size_t k = 0;
  for (const auto& s : sequences) {
    std::vector<double> row;
    for (std::size_t t = s.prompt_len; t < s.tokens.size(); ++t) {
      row.push_back(static_cast<double>(flat[k++]));
    }
    out.push_back(std::move(row));
  }
  return out;
}

template <typename T>
std::vector<std::vector<double>> log_probs_of(const lm::PolicyLm<T>& model,
                                              const std::vector<lm::TokenSequence>& sequences) {
  core::NoGradGuard no_grad;
  return split_log_probs(continuation_log_probs(model, sequences), sequences);
}

}  // namespace

template <typename T>
TrajectoryBatch collect_rollouts(const lm::PolicyLm<T>& policy, const lm::PolicyLm<T>& reference,
                                 const RewardFunction& reward,
                                 const std::vector<lm::TokenSequence>& prompts,
                                 const lm::GenerationParams& params, core::Rng& rng) {
  if (prompts.empty()) throw DataError("collect_rollouts: empty prompt set");
  if (policy.config().vocab_size != reference.config().vocab_size) {
    throw ConfigError("collect_rollouts: policy and reference vocabularies differ");
  }
  lm::GenerationParams one = params;
  one.num_samples = 1;
  std::vector<lm::TokenSequence> sampled, greedy;
  sampled.reserve(prompts.size());
  greedy.reserve(prompts.size());
  for (const auto& prompt : prompts) {
    sampled.push_back(lm::sample_nucleus(policy, prompt, one, rng).front().sequence);
    greedy.push_back(lm::decode_greedy(policy, prompt, params.max_new_tokens, params.end_token).sequence);
  }
  const auto lp_s = log_probs_of(policy, sampled);
  const auto lp_s_init = log_probs_of(reference, sampled);
  const auto lp_g = log_probs_of(policy, greedy);
  const auto lp_g_init = log_probs_of(reference, greedy);
  const auto score_s = reward(sampled);
  const auto score_g = reward(greedy);
  if (score_s.size() != prompts.size() || score_g.size() != prompts.size()) {
    throw DataError("collect_rollouts: reward function returned the wrong number of scores");
  }
  TrajectoryBatch batch;
  batch.elements.resize(prompts.size());
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    auto& e = batch.elements[i];
    e.sampled = std::move(sampled[i]);
    e.greedy = std::move(greedy[i]);
    e.logp_sampled = lp_s[i];
    e.logp_sampled_init = lp_s_init[i];
    e.logp_greedy = lp_g[i];
    e.logp_greedy_init = lp_g_init[i];
    e.score_sampled = score_s[i];
    e.score_greedy = score_g[i];
  }
  return batch;
}

template <typename T>
Tensor<T> clipped_surrogate_loss(const Tensor<T>& logp, std::span<const double> old_logp,
                                 std::span<const double> advantages, double epsilon) {
  const std::size_t n = logp.size();
  if (old_logp.size() != n || advantages.size() != n || n == 0) {
    throw DataError("clipped_surrogate_loss: misaligned inputs");
  }
  std::vector<T> active(n);
  double objective = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double ratio = std::exp(static_cast<double>(logp[i]) - old_logp[i]);
    const double a = advantages[i];
    const double value = ppo_surrogate(ratio, a, epsilon);
    objective += value;
    // Gradient flows only through the unclipped branch.
    active[i] = ratio * a <= value ? static_cast<T>(ratio * a) : T(0);
  }
  const T scale = T(1) / static_cast<T>(n);
  return Tensor<T>::make_result(core::Shape{1}, {static_cast<T>(-objective / static_cast<double>(n))},
                                {logp},
                                [logp, active = std::move(active), scale](core::detail::Node<T>& self) mutable {
                                  auto& g = logp.node()->ensure_grad();
                                  for (std::size_t i = 0; i < g.size(); ++i) {
                                    g[i] -= self.grad[0] * scale * active[i];
                                  }
                                });
}

template <typename T>
PpoDiagnostics ppo_update(lm::PolicyLm<T>& policy, core::Adam<T>& optimizer,
                          const TrajectoryBatch& batch, const PpoConfig& config,
                          double previous_kl) {
  PpoDiagnostics diag;
  const std::size_t b = batch.elements.size();
  if (b == 0) throw DataError("ppo_update: empty batch");
  diag.kl = measured_kl(batch);
  for (const auto& e : batch.elements) {
    diag.mean_reward += e.score_sampled.reward;
    diag.mean_toxicity += e.score_sampled.toxicity;
  }
  diag.mean_reward /= static_cast<double>(b);
  diag.mean_toxicity /= static_cast<double>(b);
  if (!std::isfinite(diag.kl)) throw NumericalError("ppo_update: non-finite KL estimate");
  const double limit = config.skip_kl_factor * config.kl_target;
  if (diag.kl > limit && previous_kl <= limit) {
    diag.skipped = true;
    return diag;
  }

  // Contiguous minibatches over the batch, fixed across epochs.
  const std::size_t m = std::min(config.minibatches, b);
  std::vector<std::vector<lm::TokenSequence>> seqs(m);
  std::vector<std::vector<double>> adv(m), old(m);
  for (std::size_t i = 0; i < b; ++i) {
    const std::size_t k = i * m / b;
    const auto& e = batch.elements[i];
    seqs[k].push_back(e.sampled);
    adv[k].insert(adv[k].end(), e.sampled.continuation().size(), e.advantage);
  }

  double ratio_sum = 0.0, clipped = 0.0, objective = 0.0;
  std::size_t counted = 0;
  for (std::size_t epoch = 0; epoch < config.ppo_epochs; ++epoch) {
    for (std::size_t k = 0; k < m; ++k) {
      policy.parameters().zero_grad();
      Tensor<T> logp = continuation_log_probs<T>(policy, seqs[k]);
      if (epoch == 0) {
        old[k].resize(logp.size());
        for (std::size_t i = 0; i < logp.size(); ++i) old[k][i] = static_cast<double>(logp[i]);
      }
      Tensor<T> loss = clipped_surrogate_loss(logp, old[k], adv[k], config.clip_epsilon);
      for (std::size_t i = 0; i < logp.size(); ++i) {
        const double r = std::exp(static_cast<double>(logp[i]) - old[k][i]);
        ratio_sum += r;
        if (ppo_surrogate(r, adv[k][i], config.clip_epsilon) < r * adv[k][i]) clipped += 1.0;
      }
      counted += logp.size();
      objective = -static_cast<double>(loss.item());
      loss.backward();
      optimizer.step();
    }
  }
  diag.mean_ratio = ratio_sum / static_cast<double>(counted);
  diag.clip_fraction = clipped / static_cast<double>(counted);
  diag.objective = objective;
  return diag;
}

#define DETOX_INSTANTIATE_PPO(T)                                                                  \
  template TrajectoryBatch collect_rollouts(const lm::PolicyLm<T>&, const lm::PolicyLm<T>&,       \
                                            const RewardFunction&,                                \
                                            const std::vector<lm::TokenSequence>&,                \
                                            const lm::GenerationParams&, core::Rng&);             \
  template Tensor<T> continuation_log_probs(const lm::PolicyLm<T>&,                              \
                                            std::span<const lm::TokenSequence>);                  \
  template Tensor<T> clipped_surrogate_loss(const Tensor<T>&, std::span<const double>,           \
                                            std::span<const double>, double);                     \
  template PpoDiagnostics ppo_update(lm::PolicyLm<T>&, core::Adam<T>&, const TrajectoryBatch&,   \
                                     const PpoConfig&, double);

DETOX_INSTANTIATE_PPO(float)
DETOX_INSTANTIATE_PPO(double)

}  // namespace detox::ppo
