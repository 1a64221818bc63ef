#include "support.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "detox/core/tensor.hpp"
#include "detox/ppo/trainer.hpp"

namespace detox::testkit {

GradCheck check_gradients(core::ParameterSet<double>& params,
                          const std::function<core::Tensor<double>()>& loss, std::size_t count,
                          core::Rng& rng, double step, double floor) {
  params.zero_grad();
  core::Tensor<double> value = loss();
  value.backward();

  std::vector<std::pair<core::Tensor<double>*, std::string>> tensors;
  std::vector<std::size_t> offsets;
  std::size_t total = 0;
  for (auto& [name, tensor] : params) {
    tensors.emplace_back(&tensor, name);
    offsets.push_back(total);
    total += tensor.size();
  }
  std::vector<std::size_t> flat(total);
  std::iota(flat.begin(), flat.end(), std::size_t{0});
  core::shuffle(flat, rng);
  flat.resize(std::min(count, total));

  GradCheck result;
  for (const std::size_t f : flat) {
    const auto it = std::upper_bound(offsets.begin(), offsets.end(), f);
    const std::size_t k = static_cast<std::size_t>(it - offsets.begin()) - 1;
    core::Tensor<double>& t = *tensors[k].first;
    const std::size_t i = f - offsets[k];
    const double analytic = t.has_grad() ? t.grad()[i] : 0.0;
    const double saved = t[i];
    auto at = [&](double offset) {
      t[i] = saved + offset;
      return loss().item();
    };
    double numeric = 0.0;
    {
      core::NoGradGuard guard;
      numeric = (-at(2 * step) + 8 * at(step) - 8 * at(-step) + at(-2 * step)) / (12.0 * step);
      t[i] = saved;
    }
    const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
    const double rel = std::abs(analytic - numeric) / denom;
    if (rel >= result.max_relative_error) {
      result.max_relative_error = rel;
      result.worst = tensors[k].second + "[" + std::to_string(i) + "]";
    }
    ++result.checked;
  }
  return result;
}

double brute_expected_max(const std::vector<std::vector<double>>& scores) {
  double total = 0.0;
  for (const auto& row : scores) {
    double best = row[0];
    for (double v : row) {
      if (v > best) best = v;
    }
    total += best;
  }
  return total / static_cast<double>(scores.size());
}

double brute_expected_max_std(const std::vector<std::vector<double>>& scores) {
  const double mean = brute_expected_max(scores);
  double total = 0.0;
  for (const auto& row : scores) {
    double best = row[0];
    for (double v : row) {
      if (v > best) best = v;
    }
    total += (best - mean) * (best - mean);
  }
  return std::sqrt(total / static_cast<double>(scores.size()));
}

double brute_toxicity_probability(const std::vector<std::vector<double>>& scores,
                                  double threshold) {
  std::size_t hits = 0;
  for (const auto& row : scores) {
    bool any = false;
    for (double v : row) {
      if (v >= threshold) any = true;
    }
    if (any) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(scores.size());
}

lm::LmConfig toy_config() {
  lm::LmConfig c;
  c.vocab_size = 2;
  c.n_layers = 1;
  c.n_heads = 2;
  c.d_model = 8;
  c.max_sequence_length = 24;
  return c;
}

lm::TokenSequence toy_prompt() { return {{kGood}, 1}; }

ppo::RewardFunction toy_reward() {
  return [](const std::vector<lm::TokenSequence>& seqs) {
    std::vector<ppo::ScoredText> out;
    for (const auto& s : seqs) {
      const auto c = s.continuation();
      double good = 0.0;
      for (int t : c) good += t == kGood ? 1.0 : 0.0;
      const double n = static_cast<double>(c.size());
      out.push_back({(2.0 * good - n) / n, (n - good) / n});
    }
    return out;
  };
}

namespace {

double prob_good(const lm::PolicyLm<double>& policy, const std::vector<int>& prefix) {
  const auto logits = policy.next_token_logits(prefix);
  const double m = std::max(logits[0], logits[1]);
  const double a = std::exp(logits[0] - m), b = std::exp(logits[1] - m);
  return a / (a + b);
}

double expected_good(const lm::PolicyLm<double>& policy, std::vector<int>& prefix,
                     std::size_t remaining) {
  if (remaining == 0) return 0.0;
  const double g = prob_good(policy, prefix);
  double total = g;
  for (int tok : {kGood, kBad}) {
    prefix.push_back(tok);
    total += (tok == kGood ? g : 1.0 - g) * expected_good(policy, prefix, remaining - 1);
    prefix.pop_back();
  }
  return total;
}

}  // namespace

double toy_p_good(const lm::PolicyLm<double>& policy) {
  core::NoGradGuard guard;
  std::vector<int> prefix = toy_prompt().tokens;
  return expected_good(policy, prefix, kToyHorizon) / static_cast<double>(kToyHorizon);
}

double toy_optimal_reward(std::vector<int>* best) {
  const auto reward = toy_reward();
  double top = -1e300;
  for (std::size_t code = 0; code < (std::size_t{1} << kToyHorizon); ++code) {
    lm::TokenSequence s = toy_prompt();
    for (std::size_t t = 0; t < kToyHorizon; ++t) s.tokens.push_back(static_cast<int>((code >> t) & 1));
    const double r = reward({s})[0].reward;
    if (r > top) {
      top = r;
      if (best) best->assign(s.tokens.begin() + 1, s.tokens.end());
    }
  }
  return top;
}

ToyRun run_toy_ppo(std::size_t updates, std::uint64_t seed, double threshold) {
  core::Rng init = core::make_rng(seed, core::Stream::kInit);
  lm::PolicyLm<double> policy(toy_config(), core::Init::kNormal, init);
  const lm::PolicyLm<double> reference = policy;
  ppo::PpoConfig config;
  config.batch_size = 16;
  config.episodes = updates * config.batch_size;
  config.initial_beta = 0.0;
  config.adaptive_kl = false;
  config.kl_target = 1.0;
  config.adam.learning_rate = 1e-2;
  config.generation.top_p = 1.0;
  config.generation.max_new_tokens = kToyHorizon;
  ppo::DetoxTrainer<double> trainer(policy, reference, toy_reward(), {toy_prompt()}, config,
                                    core::make_rng(seed, core::Stream::kSampling));
  ToyRun run;
  run.p_good.push_back(toy_p_good(policy));
  for (std::size_t u = 1; u <= updates; ++u) {
    trainer.step();
    run.p_good.push_back(toy_p_good(policy));
    if (run.updates_to_threshold == 0 && run.p_good.back() > threshold) run.updates_to_threshold = u;
  }
  return run;
}

}  // namespace detox::testkit
