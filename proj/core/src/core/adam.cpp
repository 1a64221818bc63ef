#include "detox/core/adam.hpp"

#include <cmath>
#include <string>

#include "detox/core/error.hpp"
#include "detox/core/ops.hpp"

namespace detox::core {

template <typename T>
void adam_step(std::span<T> param, std::span<const T> grad, std::span<T> first_moment,
               std::span<T> second_moment, const AdamConfig& config, std::uint64_t step) {
  if (grad.size() != param.size() || first_moment.size() != param.size() ||
      second_moment.size() != param.size()) {
    throw DimensionError("adam_step: buffer sizes differ from parameter size " +
                         std::to_string(param.size()));
  }
  const T b1 = static_cast<T>(config.beta1);
  const T b2 = static_cast<T>(config.beta2);
  const T lr = static_cast<T>(config.learning_rate);
  const T eps = static_cast<T>(config.epsilon);
  const T decay = static_cast<T>(config.learning_rate * config.weight_decay);
  const T c1 = static_cast<T>(1.0 - std::pow(config.beta1, static_cast<double>(step)));
  const T c2 = static_cast<T>(1.0 - std::pow(config.beta2, static_cast<double>(step)));
  for (std::size_t i = 0; i < param.size(); ++i) {
    const T g = grad[i];
    first_moment[i] = b1 * first_moment[i] + (T(1) - b1) * g;
    second_moment[i] = b2 * second_moment[i] + (T(1) - b2) * g * g;
    const T m_hat = first_moment[i] / c1;
    const T v_hat = second_moment[i] / c2;
    if (decay != T(0)) param[i] -= decay * param[i];
    param[i] -= lr * m_hat / (std::sqrt(v_hat) + eps);
  }
}

template <typename T>
Adam<T>::Adam(ParameterSet<T>& params, AdamConfig config) : params_(&params) {
  state_.config = config;
  for (const auto& [name, tensor] : params) {
    state_.first_moment.emplace_back(tensor.size(), T(0));
    state_.second_moment.emplace_back(tensor.size(), T(0));
  }
}

template <typename T>
void Adam<T>::step() {
  for (const auto& [name, tensor] : *params_) {
    if (tensor.has_grad() && !all_finite<T>(tensor.grad())) {
      throw NumericalError("non-finite gradient in parameter '" + name + "' at optimizer step " +
                           std::to_string(state_.step + 1) + "; update rejected");
    }
  }
  ++state_.step;
  std::size_t i = 0;
  for (auto& [name, tensor] : *params_) {
    if (tensor.has_grad()) {
      adam_step<T>(tensor.data(), tensor.grad(), state_.first_moment[i], state_.second_moment[i],
                   state_.config, state_.step);
    }
    ++i;
  }
}

template <typename T>
void Adam<T>::load_state(OptimizerState<T> state) {
  if (state.first_moment.size() != params_->size() ||
      state.second_moment.size() != params_->size()) {
    throw DimensionError("optimizer state has " + std::to_string(state.first_moment.size()) +
                         " buffers for " + std::to_string(params_->size()) + " parameters");
  }
  std::size_t i = 0;
  for (const auto& [name, tensor] : *params_) {
    if (state.first_moment[i].size() != tensor.size() ||
        state.second_moment[i].size() != tensor.size()) {
      throw DimensionError("optimizer moment shape mismatch for '" + name + "'");
    }
    ++i;
  }
  state_ = std::move(state);
}

template void adam_step(std::span<float>, std::span<const float>, std::span<float>,
                        std::span<float>, const AdamConfig&, std::uint64_t);
template void adam_step(std::span<double>, std::span<const double>, std::span<double>,
                        std::span<double>, const AdamConfig&, std::uint64_t);
template class Adam<float>;
template class Adam<double>;

}  // namespace detox::core
