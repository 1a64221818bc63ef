#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "detox/core/parameters.hpp"
#include "detox/core/random.hpp"
#include "detox/core/tensor.hpp"
#include "detox/lm/policy_lm.hpp"
#include "detox/ppo/ppo.hpp"

namespace detox::testkit {

struct GradCheck {
  std::size_t checked = 0;
  double max_relative_error = 0.0;
  std::string worst;  // "name[index]" of the worst entry
};

// Compares backward() against fourth-order central differences on `count`
// distinct parameter entries drawn uniformly from the whole set. The relative
// error of an entry is |a - n| / max(|a|, |n|, floor).
GradCheck check_gradients(core::ParameterSet<double>& params,
                          const std::function<core::Tensor<double>()>& loss, std::size_t count,
                          core::Rng& rng, double step = 1e-3, double floor = 1e-7);

// Brute-force loops over a score matrix.
double brute_expected_max(const std::vector<std::vector<double>>& scores);
double brute_expected_max_std(const std::vector<std::vector<double>>& scores);
double brute_toxicity_probability(const std::vector<std::vector<double>>& scores,
                                  double threshold);

// The two-token world: vocabulary {good = 0, bad = 1}, prompt "good", a
// two-token continuation, reward = mean over continuation tokens of +1 for
// good and -1 for bad.
inline constexpr int kGood = 0;
inline constexpr int kBad = 1;
inline constexpr std::size_t kToyHorizon = 2;

lm::LmConfig toy_config();
lm::TokenSequence toy_prompt();
ppo::RewardFunction toy_reward();

// Expected fraction of good tokens in a continuation, by exact enumeration
// of every prefix.
double toy_p_good(const lm::PolicyLm<double>& policy);
// Best achievable expected reward and the continuation reaching it, by
// enumerating all 2^H continuations.
double toy_optimal_reward(std::vector<int>* best = nullptr);

struct ToyRun {
  std::vector<double> p_good;  // after each update, index 0 = before training
  std::size_t updates_to_threshold = 0;  // 0 when never reached
};

// PPO with beta = 0 on the toy world, untruncated sampling.
ToyRun run_toy_ppo(std::size_t updates, std::uint64_t seed, double threshold = 0.95);

}  // namespace detox::testkit
