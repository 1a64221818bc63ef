#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "detox/core/parameters.hpp"
#include "detox/core/random.hpp"
#include "detox/core/tensor.hpp"
#include "detox/core/transformer.hpp"

namespace detox::lm {

struct LmConfig {
  std::size_t vocab_size = 512;
  std::size_t n_layers = 4;
  std::size_t n_heads = 4;
  std::size_t d_model = 128;
  std::size_t max_sequence_length = 64;
  bool tie_embeddings = true;

  std::size_t d_ff() const { return 4 * d_model; }
  // Throws ConfigError. Requires room for a prompt plus 20 generated tokens.
  void validate() const;
};

// Token ids with a prompt/continuation boundary.
struct TokenSequence {
  std::vector<int> tokens;
  std::size_t prompt_len = 0;

  std::span<const int> prompt() const { return {tokens.data(), prompt_len}; }
  std::span<const int> continuation() const {
    return {tokens.data() + prompt_len, tokens.size() - prompt_len};
  }
  // Throws DataError if an id is out of range or prompt_len > length.
  void validate(std::size_t vocab_size) const;
};

// Several independent sequences laid end to end.
struct PackedBatch {
  std::vector<int> tokens;
  std::vector<std::size_t> lengths;

  static PackedBatch from(std::span<const std::vector<int>> sequences);
  void append(std::span<const int> sequence);
  std::size_t total() const { return tokens.size(); }
};

// Decoder-only causal transformer, the policy pi_theta.
template <typename T>
class PolicyLm {
 public:
  PolicyLm(const LmConfig& config, core::Init init, core::Rng& rng);
  PolicyLm(const PolicyLm& other);
  PolicyLm& operator=(const PolicyLm& other);
  PolicyLm(PolicyLm&&) noexcept = default;
  PolicyLm& operator=(PolicyLm&&) noexcept = default;

  const LmConfig& config() const { return config_; }
  core::ParameterSet<T>& parameters() { return params_; }
  const core::ParameterSet<T>& parameters() const { return params_; }

  // Logits for every position of every packed sequence, [total x vocab].
  // Row t of a sequence scores the token at t + 1. Throws ContextError for
  // sequences longer than max_sequence_length and NumericalError (with the
  // layer index) on non-finite activations.
  core::Tensor<T> forward(const PackedBatch& batch) const;

  // Final hidden states (after the last layer norm), [total x d_model].
  core::Tensor<T> hidden_states(const PackedBatch& batch) const;

  // z_t for the token following `prefix`.
  std::vector<T> next_token_logits(std::span<const int> prefix) const;

  // Weight handles, for the incremental decoder.
  const core::Tensor<T>& token_embedding() const { return wte_; }
  const core::Tensor<T>& position_embedding() const { return wpe_; }
  const core::Tensor<T>& final_gamma() const { return lnf_gamma_; }
  const core::Tensor<T>& final_beta() const { return lnf_beta_; }
  const core::Tensor<T>& head() const { return head_; }
  const std::vector<core::BlockWeights<T>>& blocks() const { return blocks_; }

 private:
  void bind();

  LmConfig config_;
  core::ParameterSet<T> params_;
  core::Tensor<T> wte_, wpe_, lnf_gamma_, lnf_beta_, head_;
  std::vector<core::BlockWeights<T>> blocks_;
};

// Incremental decoder with a key/value cache, for B sequences stepping in
// lockstep. Runs without graph recording.
template <typename T>
class DecodeSession {
 public:
  DecodeSession(const PolicyLm<T>& model, std::size_t batch_size);

  // Feeds one token per row at the current position; returns next-token
  // logits, row-major [batch x vocab].
  const core::Buffer<T>& step(std::span<const int> tokens);
  std::size_t position() const { return position_; }
  std::size_t batch_size() const { return batch_; }

 private:
  const PolicyLm<T>* model_;
  std::size_t batch_;
  std::size_t position_ = 0;
  std::vector<core::Buffer<T>> keys_, values_;  // per layer [batch x max_len x d]
  core::Buffer<T> logits_;
};

extern template class PolicyLm<float>;
extern template class PolicyLm<double>;
extern template class DecodeSession<float>;
extern template class DecodeSession<double>;

}  // namespace detox::lm
