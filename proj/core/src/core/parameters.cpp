#include "detox/core/parameters.hpp"

#include <algorithm>

#include "detox/core/error.hpp"

namespace detox::core {

template <typename T>
Tensor<T>& ParameterSet<T>::add(const std::string& name, Tensor<T> tensor) {
  if (contains(name)) throw ConfigError("duplicate parameter name: " + name);
  entries_.emplace_back(name, std::move(tensor));
  return entries_.back().second;
}

template <typename T>
Tensor<T>& ParameterSet<T>::at(const std::string& name) {
  for (auto& [n, t] : entries_)
    if (n == name) return t;
  throw ConfigError("unknown parameter: " + name);
}

template <typename T>
const Tensor<T>& ParameterSet<T>::at(const std::string& name) const {
  for (const auto& [n, t] : entries_)
    if (n == name) return t;
  throw ConfigError("unknown parameter: " + name);
}

template <typename T>
bool ParameterSet<T>::contains(const std::string& name) const {
  return std::any_of(entries_.begin(), entries_.end(),
                     [&](const auto& e) { return e.first == name; });
}

template <typename T>
std::size_t ParameterSet<T>::total_elements() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.second.size();
  return n;
}

template <typename T>
void ParameterSet<T>::zero_grad() {
  for (auto& e : entries_) e.second.zero_grad();
}

template <typename T>
void ParameterSet<T>::copy_values_from(const ParameterSet& other) {
  if (other.size() != size()) throw DimensionError("parameter sets differ in size");
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    auto& [name, dst] = entries_[i];
    const auto& [oname, src] = other.entries_[i];
    if (name != oname || dst.shape() != src.shape()) {
      throw DimensionError("parameter mismatch: " + name + shape_string(dst.shape()) + " vs " +
                           oname + shape_string(src.shape()));
    }
    std::copy(src.data().begin(), src.data().end(), dst.data().begin());
  }
}

template <typename T>
Tensor<T> normal_tensor(Shape shape, T stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, static_cast<double>(stddev));
  std::vector<T> values(numel(shape));
  for (auto& v : values) v = static_cast<T>(dist(rng));
  return Tensor<T>::from(std::move(shape), std::move(values), true);
}

template class ParameterSet<float>;
template class ParameterSet<double>;
template Tensor<float> normal_tensor(Shape, float, std::mt19937_64&);
template Tensor<double> normal_tensor(Shape, double, std::mt19937_64&);

}  // namespace detox::core
