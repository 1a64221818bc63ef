#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "detox/core/parameters.hpp"

namespace detox::core {

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  // Decoupled (AdamW) decay; 0 gives plain Adam.
  double weight_decay = 0.0;
};

template <typename T>
struct OptimizerState {
  AdamConfig config;
  std::uint64_t step = 0;
  std::vector<std::vector<T>> first_moment;
  std::vector<std::vector<T>> second_moment;
};

// Bias-corrected AdamW update of one parameter buffer. `step` is the 1-based
// index of this update.
template <typename T>
void adam_step(std::span<T> param, std::span<const T> grad, std::span<T> first_moment,
               std::span<T> second_moment, const AdamConfig& config, std::uint64_t step);

template <typename T>
class Adam {
 public:
  Adam(ParameterSet<T>& params, AdamConfig config);

  // Applies one update from the parameters' current gradients. Parameters
  // without a gradient are left untouched. Throws NumericalError, without
  // modifying anything, if any gradient is non-finite.
  void step();

  const OptimizerState<T>& state() const { return state_; }
  // Restores a saved state; buffer shapes must match the parameter set.
  void load_state(OptimizerState<T> state);
  void set_learning_rate(double lr) { state_.config.learning_rate = lr; }

 private:
  ParameterSet<T>* params_;
  OptimizerState<T> state_;
};

extern template class Adam<float>;
extern template class Adam<double>;

}  // namespace detox::core
