#pragma once

#include <cstddef>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "detox/core/tensor.hpp"

namespace detox::core {

// Named, ordered collection of trainable tensors. Insertion order is the
// canonical order for optimizers and checkpoints.
template <typename T>
class ParameterSet {
 public:
  Tensor<T>& add(const std::string& name, Tensor<T> tensor);

  Tensor<T>& at(const std::string& name);
  const Tensor<T>& at(const std::string& name) const;
  bool contains(const std::string& name) const;

  std::size_t size() const { return entries_.size(); }
  std::size_t total_elements() const;

  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  void zero_grad();

  // Copies values from `other`; names and shapes must match exactly.
  void copy_values_from(const ParameterSet& other);

 private:
  std::vector<std::pair<std::string, Tensor<T>>> entries_;
};

enum class Init { kNormal, kZeros };

// normal(0, stddev) for weights; used by the model constructors.
template <typename T>
Tensor<T> normal_tensor(Shape shape, T stddev, std::mt19937_64& rng);

extern template class ParameterSet<float>;
extern template class ParameterSet<double>;

}  // namespace detox::core
