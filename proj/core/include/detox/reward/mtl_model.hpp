#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "detox/core/parameters.hpp"
#include "detox/core/random.hpp"
#include "detox/core/tensor.hpp"
#include "detox/core/transformer.hpp"
#include "detox/reward/tasks.hpp"

namespace detox::reward {

struct MtlConfig {
  std::size_t vocab_size = 512;
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t d_model = 128;
  std::size_t max_sequence_length = 256;

  std::size_t d_ff() const { return 4 * d_model; }
  void validate() const;  // ConfigError
};

// Shared bidirectional encoder with one linear head per task. Inputs are word
// ids without specials; the model prepends [CLS] and classifies from its
// final hidden state.
template <typename T>
class MtlModel {
 public:
  // `task_ids` selects which heads exist (all six, or {1} for the single-task
  // variant). `head_init` lets tests start from zero heads.
  MtlModel(const MtlConfig& config, std::vector<int> task_ids, core::Init encoder_init,
           core::Init head_init, core::Rng& rng);
  MtlModel(const MtlModel& other);
  MtlModel& operator=(const MtlModel& other);
  MtlModel(MtlModel&&) noexcept = default;
  MtlModel& operator=(MtlModel&&) noexcept = default;

  const MtlConfig& config() const { return config_; }
  const std::vector<int>& task_ids() const { return task_ids_; }
  bool has_task(int task_id) const;
  core::ParameterSet<T>& parameters() { return params_; }
  const core::ParameterSet<T>& parameters() const { return params_; }

  // Pooled [CLS] representations, [batch x d_model]. Inputs longer than the
  // context are truncated.
  core::Tensor<T> encode(std::span<const std::vector<int>> inputs) const;

  // Raw head outputs, [batch x labels]. Unknown task -> ConfigError.
  core::Tensor<T> logits(std::span<const std::vector<int>> inputs, int task_id) const;

  // Softmax rows for Task 1, independent sigmoids for the others.
  std::vector<std::vector<double>> predict(std::span<const std::vector<int>> inputs,
                                           int task_id) const;

  // P(toxic) from the Task 1 head.
  std::vector<double> toxicity_scores(std::span<const std::vector<int>> inputs) const;
  double toxicity_score(std::span<const int> input) const;

 private:
  void bind();
  std::size_t head_index(int task_id) const;

  MtlConfig config_;
  std::vector<int> task_ids_;
  core::ParameterSet<T> params_;
  core::Tensor<T> wte_, wpe_, lnf_gamma_, lnf_beta_;
  std::vector<core::BlockWeights<T>> blocks_;
  std::vector<core::Tensor<T>> head_w_, head_b_;
};

// Loss of one single-task batch: softmax cross-entropy for Task 1, mean
// per-label binary cross-entropy otherwise. Throws DataError when an example
// does not carry targets for the task.
template <typename T>
core::Tensor<T> mtl_loss(const MtlModel<T>& model, std::span<const TaskExample* const> batch,
                         int task_id);

// 1 - 2 p: positive for nontoxic text, negative for toxic text.
inline double reward_from_toxicity(double p_toxic) { return 1.0 - 2.0 * p_toxic; }

extern template class MtlModel<float>;
extern template class MtlModel<double>;

}  // namespace detox::reward
