#include "detox/reward/mtl_model.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "detox/core/error.hpp"
#include "detox/core/ops.hpp"
#include "detox/data/vocabulary.hpp"

namespace detox::reward {

using core::Tensor;

void MtlConfig::validate() const {
  if (vocab_size <= data::Vocabulary::kNumSpecial) {
    throw ConfigError("mtl: vocab_size must exceed the special tokens");
  }
  if (n_layers == 0) throw ConfigError("mtl: n_layers must be positive");
  if (n_heads == 0 || d_model == 0 || d_model % n_heads != 0) {
    throw ConfigError("mtl: d_model " + std::to_string(d_model) + " not divisible by n_heads " +
                      std::to_string(n_heads));
  }
  if (max_sequence_length < 2) throw ConfigError("mtl: max_sequence_length must be at least 2");
}

template <typename T>
MtlModel<T>::MtlModel(const MtlConfig& config, std::vector<int> task_ids, core::Init encoder_init,
                      core::Init head_init, core::Rng& rng)
    : config_(config), task_ids_(std::move(task_ids)) {
  config_.validate();
  if (task_ids_.empty()) throw ConfigError("mtl: at least one task head is required");
  for (std::size_t i = 0; i < task_ids_.size(); ++i) {
    task_spec(task_ids_[i]);
    if (std::count(task_ids_.begin(), task_ids_.end(), task_ids_[i]) != 1) {
      throw ConfigError("mtl: duplicate task " + std::to_string(task_ids_[i]));
    }
  }
  const std::size_t d = config_.d_model;
  auto weight = [&](core::Shape shape, core::Init init) {
    return init == core::Init::kZeros ? Tensor<T>::zeros(std::move(shape), true)
                                      : core::normal_tensor<T>(std::move(shape), T(0.02), rng);
  };
  params_.add("wte", weight({config_.vocab_size, d}, encoder_init));
  params_.add("wpe", weight({config_.max_sequence_length, d}, encoder_init));
  for (std::size_t l = 0; l < config_.n_layers; ++l) {
    core::register_block<T>(params_, "enc." + std::to_string(l), d, config_.d_ff(), encoder_init,
                            rng);
  }
  params_.add("ln_f.gamma", Tensor<T>::full({d}, T(1), true));
  params_.add("ln_f.beta", Tensor<T>::zeros({d}, true));
  for (int id : task_ids_) {
    const std::string prefix = "task" + std::to_string(id);
    params_.add(prefix + ".w", weight({d, task_spec(id).labels.size()}, head_init));
    params_.add(prefix + ".b", Tensor<T>::zeros({task_spec(id).labels.size()}, true));
  }
  bind();
}

template <typename T>
MtlModel<T>::MtlModel(const MtlModel& other) : config_(other.config_), task_ids_(other.task_ids_) {
  for (const auto& [name, tensor] : other.params_) {
    params_.add(name, Tensor<T>::from(tensor.shape(),
                                      std::vector<T>(tensor.data().begin(), tensor.data().end()),
                                      true));
  }
  bind();
}

template <typename T>
MtlModel<T>& MtlModel<T>::operator=(const MtlModel& other) {
  if (this != &other) {
    MtlModel copy(other);
    *this = std::move(copy);
  }
  return *this;
}

template <typename T>
void MtlModel<T>::bind() {
  wte_ = params_.at("wte");
  wpe_ = params_.at("wpe");
  lnf_gamma_ = params_.at("ln_f.gamma");
  lnf_beta_ = params_.at("ln_f.beta");
  blocks_.clear();
  for (std::size_t l = 0; l < config_.n_layers; ++l) {
    blocks_.push_back(core::bind_block(params_, "enc." + std::to_string(l)));
  }
  head_w_.clear();
  head_b_.clear();
  for (int id : task_ids_) {
    head_w_.push_back(params_.at("task" + std::to_string(id) + ".w"));
    head_b_.push_back(params_.at("task" + std::to_string(id) + ".b"));
  }
}

template <typename T>
bool MtlModel<T>::has_task(int task_id) const {
  return std::find(task_ids_.begin(), task_ids_.end(), task_id) != task_ids_.end();
}

template <typename T>
std::size_t MtlModel<T>::head_index(int task_id) const {
  auto it = std::find(task_ids_.begin(), task_ids_.end(), task_id);
  if (it == task_ids_.end()) {
    throw ConfigError("mtl: model has no head for task " + std::to_string(task_id));
  }
  return static_cast<std::size_t>(it - task_ids_.begin());
}

template <typename T>
Tensor<T> MtlModel<T>::encode(std::span<const std::vector<int>> inputs) const {
  if (inputs.empty()) throw DataError("mtl: empty batch");
  std::vector<int> tokens, positions;
  std::vector<std::size_t> lengths, starts;
  for (const auto& input : inputs) {
    const std::size_t n = std::min(input.size(), config_.max_sequence_length - 1);
    starts.push_back(tokens.size());
    tokens.push_back(data::Vocabulary::kCls);
    tokens.insert(tokens.end(), input.begin(), input.begin() + static_cast<std::ptrdiff_t>(n));
    lengths.push_back(n + 1);
    for (std::size_t p = 0; p <= n; ++p) positions.push_back(static_cast<int>(p));
  }
  Tensor<T> h = core::add(core::embedding(wte_, tokens), core::embedding(wpe_, positions));
  const core::AttentionLayout layout{lengths, false};
  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    h = core::transformer_block(h, blocks_[l], config_.n_heads, layout);
    if (!core::all_finite<T>(h.data())) {
      throw NumericalError("mtl: non-finite activation in layer " + std::to_string(l));
    }
  }
  return core::layer_norm(core::select_rows(h, starts), lnf_gamma_, lnf_beta_);
}

template <typename T>
Tensor<T> MtlModel<T>::logits(std::span<const std::vector<int>> inputs, int task_id) const {
  const std::size_t k = head_index(task_id);
  return core::linear(encode(inputs), head_w_[k], head_b_[k]);
}

template <typename T>
std::vector<std::vector<double>> MtlModel<T>::predict(std::span<const std::vector<int>> inputs,
                                                      int task_id) const {
  core::NoGradGuard no_grad;
  const Tensor<T> z = logits(inputs, task_id);
  const std::size_t n = z.rows(), c = z.cols();
  const bool categorical = task_spec(task_id).mode == TaskMode::kCategorical;
  std::vector<std::vector<double>> out(n, std::vector<double>(c));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < c; ++j) out[i][j] = static_cast<double>(z.raw()[i * c + j]);
    if (categorical) {
      core::softmax_inplace<double>(out[i]);
    } else {
      for (double& v : out[i]) v = 1.0 / (1.0 + std::exp(-v));
    }
  }
  return out;
}

template <typename T>
std::vector<double> MtlModel<T>::toxicity_scores(std::span<const std::vector<int>> inputs) const {
  std::vector<double> scores;
  scores.reserve(inputs.size());
  for (const auto& row : predict(inputs, kToxicityTask)) scores.push_back(row[kToxicLabel]);
  return scores;
}

template <typename T>
double MtlModel<T>::toxicity_score(std::span<const int> input) const {
  const std::vector<int> one(input.begin(), input.end());
  return toxicity_scores(std::span<const std::vector<int>>(&one, 1))[0];
}

template <typename T>
Tensor<T> mtl_loss(const MtlModel<T>& model, std::span<const TaskExample* const> batch,
                   int task_id) {
  const TaskSpec& spec = task_spec(task_id);
  if (batch.empty()) throw DataError("mtl_loss: empty batch");
  std::vector<std::vector<int>> inputs;
  inputs.reserve(batch.size());
  for (const TaskExample* e : batch) inputs.push_back(e->tokens);
  const std::size_t c = spec.labels.size();
  if (spec.mode == TaskMode::kCategorical) {
    std::vector<int> labels;
    for (const TaskExample* e : batch) {
      if (e->label < 0 || static_cast<std::size_t>(e->label) >= c) {
        throw DataError("mtl_loss: example has no label for task " + std::to_string(task_id));
      }
      labels.push_back(e->label);
    }
    return core::softmax_cross_entropy(model.logits(inputs, task_id), std::span<const int>(labels));
  }
  std::vector<T> targets;
  targets.reserve(batch.size() * c);
  for (const TaskExample* e : batch) {
    if (e->targets.size() != c) {
      throw DataError("mtl_loss: example carries " + std::to_string(e->targets.size()) +
                      " targets, task " + std::to_string(task_id) + " has " + std::to_string(c) +
                      " labels");
    }
    for (float v : e->targets) targets.push_back(static_cast<T>(v));
  }
  return core::sigmoid_binary_cross_entropy(
      model.logits(inputs, task_id), Tensor<T>::from({batch.size(), c}, std::move(targets)));
}

template class MtlModel<float>;
template class MtlModel<double>;
template Tensor<float> mtl_loss(const MtlModel<float>&, std::span<const TaskExample* const>, int);
template Tensor<double> mtl_loss(const MtlModel<double>&, std::span<const TaskExample* const>,
                                 int);

}  // namespace detox::reward
