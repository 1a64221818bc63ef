#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "detox/core/adam.hpp"
#include "detox/core/random.hpp"
#include "detox/lm/policy_lm.hpp"

namespace detox::lm {

// Tokenized documents; each starts with the begin-of-sequence token.
using Corpus = std::vector<std::vector<int>>;

// Truncates documents to the model context and drops ones too short to
// predict anything. Throws DataError if nothing usable remains.
Corpus prepare_corpus(const Corpus& documents, std::size_t max_sequence_length);

struct NllConfig {
  std::size_t steps = 1000;
  std::size_t batch_size = 16;
  core::AdamConfig adam{};
  // Held-out NLL is recorded every `eval_every` steps (0 disables).
  std::size_t eval_every = 100;
};

struct LossPoint {
  std::size_t step = 0;
  double train_nll = 0.0;
  double heldout_nll = -1.0;  // negative when not evaluated at this step
};

// Minibatch NLL training with uniformly sampled documents. Owns its
// optimizer and random stream so a run can be checkpointed and resumed.
template <typename T>
class NllTrainer {
 public:
  NllTrainer(PolicyLm<T>& model, Corpus corpus, NllConfig config, core::Rng rng);

  // One optimizer step; returns the batch mean NLL.
  double train_step();
  // Runs up to config.steps total steps, recording the loss curve.
  std::vector<LossPoint> run(const Corpus* heldout = nullptr);

  std::size_t step() const { return step_; }
  const NllConfig& config() const { return config_; }
  core::Adam<T>& optimizer() { return optimizer_; }
  const core::Rng& rng() const { return rng_; }
  void restore(std::size_t step, core::Rng rng, core::OptimizerState<T> optimizer_state);

 private:
  PolicyLm<T>* model_;
  Corpus corpus_;
  NllConfig config_;
  core::Rng rng_;
  core::Adam<T> optimizer_;
  std::size_t step_ = 0;
};

// Differentiable mean NLL of the next token over every position of `docs`.
template <typename T>
core::Tensor<T> nll_loss(const PolicyLm<T>& model, std::span<const std::vector<int>> docs);

template <typename T>
std::vector<LossPoint> pretrain_nll(PolicyLm<T>& model, const Corpus& train, const Corpus& heldout,
                                    const NllConfig& config, core::Rng rng);

// Mean per-token NLL over all predicted positions.
template <typename T>
double mean_nll(const PolicyLm<T>& model, const Corpus& corpus);

// exp(mean per-token NLL)
template <typename T>
double perplexity(const PolicyLm<T>& model, const Corpus& corpus);

// log pi(token | prefix) for each continuation token of `sequence`.
template <typename T>
std::vector<double> sequence_log_prob(const PolicyLm<T>& model, const TokenSequence& sequence);

template <typename T>
std::vector<std::vector<double>> sequence_log_probs(const PolicyLm<T>& model,
                                                    std::span<const TokenSequence> sequences);

}  // namespace detox::lm
