#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "detox/core/random.hpp"
#include "detox/lm/policy_lm.hpp"

namespace detox::lm {

struct GenerationParams {
  double top_p = 0.9;
  double temperature = 1.0;
  std::size_t max_new_tokens = 20;
  std::size_t num_samples = 1;
  std::uint64_t seed = 0;
  // Generation stops early after emitting this id; negative disables it.
  int end_token = -1;

  void validate() const;
};

// A generated continuation. `token_log_probs[i]` is log p_theta of the i-th
// continuation token under the untruncated, untempered softmax.
struct Generation {
  TokenSequence sequence;
  std::vector<double> token_log_probs;

  std::span<const int> continuation() const { return sequence.continuation(); }
};

// Indices of the smallest set of most probable tokens whose cumulative mass
// reaches top_p, in decreasing probability (ties: lower id first). top_p >= 1
// keeps the whole vocabulary.
std::vector<std::size_t> nucleus_indices(std::span<const double> probs, double top_p);

// The nucleus renormalized to sum to 1, as a full-length vector.
std::vector<double> nucleus_distribution(std::span<const double> probs, double top_p);

// softmax(logits / temperature)
template <typename T>
std::vector<double> tempered_probabilities(std::span<const T> logits, double temperature);

// Draws one token from the nucleus of softmax(logits / temperature).
template <typename T>
int sample_nucleus_token(std::span<const T> logits, double top_p, double temperature,
                         core::Rng& rng);

// Argmax with ties broken toward the lowest id.
template <typename T>
int argmax_token(std::span<const T> logits);

template <typename T>
double token_log_prob(std::span<const T> logits, int token);

// params.num_samples nucleus-sampled continuations of `prompt`.
template <typename T>
std::vector<Generation> sample_nucleus(const PolicyLm<T>& model, const TokenSequence& prompt,
                                       const GenerationParams& params, core::Rng& rng);

// Deterministic greedy continuation.
template <typename T>
Generation decode_greedy(const PolicyLm<T>& model, const TokenSequence& prompt,
                         std::size_t max_new_tokens, int end_token = -1);

}  // namespace detox::lm
