#include "detox/lm/policy_lm.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "detox/core/error.hpp"
#include "detox/core/ops.hpp"

namespace detox::lm {

using core::Tensor;

void LmConfig::validate() const {
  if (vocab_size < 2) throw ConfigError("lm: vocab_size must be at least 2");
  if (n_layers == 0) throw ConfigError("lm: n_layers must be positive");
  if (n_heads == 0 || d_model == 0 || d_model % n_heads != 0) {
    throw ConfigError("lm: d_model " + std::to_string(d_model) + " not divisible by n_heads " +
                      std::to_string(n_heads));
  }
  if (max_sequence_length < 21) {
    throw ConfigError("lm: max_sequence_length must leave room for a prompt and 20 new tokens");
  }
}

void TokenSequence::validate(std::size_t vocab_size) const {
  if (prompt_len > tokens.size()) {
    throw DataError("token sequence: prompt_len " + std::to_string(prompt_len) +
                    " exceeds length " + std::to_string(tokens.size()));
  }
  for (int id : tokens) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab_size) {
      throw DataError("token sequence: id " + std::to_string(id) + " outside vocabulary of " +
                      std::to_string(vocab_size));
    }
  }
}

PackedBatch PackedBatch::from(std::span<const std::vector<int>> sequences) {
  PackedBatch batch;
  for (const auto& s : sequences) batch.append(s);
  return batch;
}

void PackedBatch::append(std::span<const int> sequence) {
  tokens.insert(tokens.end(), sequence.begin(), sequence.end());
  lengths.push_back(sequence.size());
}

template <typename T>
PolicyLm<T>::PolicyLm(const LmConfig& config, core::Init init, core::Rng& rng) : config_(config) {
  config_.validate();
  const std::size_t d = config_.d_model;
  auto weight = [&](core::Shape shape) {
    return init == core::Init::kZeros ? Tensor<T>::zeros(std::move(shape), true)
                                      : core::normal_tensor<T>(std::move(shape), T(0.02), rng);
  };
  params_.add("wte", weight({config_.vocab_size, d}));
  params_.add("wpe", weight({config_.max_sequence_length, d}));
  for (std::size_t l = 0; l < config_.n_layers; ++l) {
    core::register_block<T>(params_, "h." + std::to_string(l), d, config_.d_ff(), init, rng);
  }
  params_.add("ln_f.gamma", Tensor<T>::full({d}, T(1), true));
  params_.add("ln_f.beta", Tensor<T>::zeros({d}, true));
  if (!config_.tie_embeddings) params_.add("lm_head", weight({config_.vocab_size, d}));
  bind();
}

template <typename T>
PolicyLm<T>::PolicyLm(const PolicyLm& other) : config_(other.config_) {
  for (const auto& [name, tensor] : other.params_) {
    params_.add(name, Tensor<T>::from(tensor.shape(), std::vector<T>(tensor.data().begin(),
                                                                     tensor.data().end()),
                                      true));
  }
  bind();
}

template <typename T>
PolicyLm<T>& PolicyLm<T>::operator=(const PolicyLm& other) {
  if (this != &other) {
    PolicyLm copy(other);
    *this = std::move(copy);
  }
  return *this;
}

template <typename T>
void PolicyLm<T>::bind() {
  wte_ = params_.at("wte");
  wpe_ = params_.at("wpe");
  lnf_gamma_ = params_.at("ln_f.gamma");
  lnf_beta_ = params_.at("ln_f.beta");
  head_ = config_.tie_embeddings ? wte_ : params_.at("lm_head");
  blocks_.clear();
  for (std::size_t l = 0; l < config_.n_layers; ++l) {
    blocks_.push_back(core::bind_block(params_, "h." + std::to_string(l)));
  }
}

template <typename T>
Tensor<T> PolicyLm<T>::hidden_states(const PackedBatch& batch) const {
  std::vector<int> positions;
  positions.reserve(batch.total());
  for (std::size_t len : batch.lengths) {
    if (len == 0) throw ContextError("policy lm: empty sequence");
    if (len > config_.max_sequence_length) {
      throw ContextError("policy lm: sequence of length " + std::to_string(len) +
                         " exceeds context of " + std::to_string(config_.max_sequence_length));
    }
    for (std::size_t p = 0; p < len; ++p) positions.push_back(static_cast<int>(p));
  }
  Tensor<T> h = core::add(core::embedding(wte_, batch.tokens), core::embedding(wpe_, positions));
  const core::AttentionLayout layout{batch.lengths, true};
  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    h = core::transformer_block(h, blocks_[l], config_.n_heads, layout);
    if (!core::all_finite<T>(h.data())) {
      throw NumericalError("policy lm: non-finite activation in layer " + std::to_string(l));
    }
  }
  return core::layer_norm(h, lnf_gamma_, lnf_beta_);
}

template <typename T>
Tensor<T> PolicyLm<T>::forward(const PackedBatch& batch) const {
  return core::matmul_transposed(hidden_states(batch), head_);
}

template <typename T>
std::vector<T> PolicyLm<T>::next_token_logits(std::span<const int> prefix) const {
  if (prefix.empty()) throw ContextError("policy lm: empty prefix");
  core::NoGradGuard no_grad;
  PackedBatch batch;
  batch.append(prefix);
  Tensor<T> logits = forward(batch);
  const std::size_t v = config_.vocab_size;
  const T* last = logits.raw() + (prefix.size() - 1) * v;
  return std::vector<T>(last, last + v);
}

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using ConstMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;

template <typename T>
ConstMap<T> as_matrix(const Tensor<T>& t) {
  return ConstMap<T>(t.raw(), static_cast<Eigen::Index>(t.rows()),
                     static_cast<Eigen::Index>(t.cols()));
}

template <typename T>
Eigen::Map<const RowVec<T>> as_row(const Tensor<T>& t) {
  return Eigen::Map<const RowVec<T>>(t.raw(), static_cast<Eigen::Index>(t.size()));
}

template <typename T>
void layer_norm_rows(const RowMat<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     RowMat<T>& out) {
  const Eigen::Index d = x.cols();
  out.resize(x.rows(), d);
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    T mu = 0;
    for (Eigen::Index j = 0; j < d; ++j) mu += x(r, j);
    mu /= static_cast<T>(d);
    T var = 0;
    for (Eigen::Index j = 0; j < d; ++j) var += (x(r, j) - mu) * (x(r, j) - mu);
    var /= static_cast<T>(d);
    const T rstd = T(1) / std::sqrt(var + T(1e-5));
    for (Eigen::Index j = 0; j < d; ++j) out(r, j) = gamma[j] * ((x(r, j) - mu) * rstd) + beta[j];
  }
}

template <typename T>
T gelu_scalar(T v) {
  constexpr T kC = T(0.7978845608028654);
  constexpr T kA = T(0.044715);
  return T(0.5) * v * (T(1) + std::tanh(kC * (v + kA * v * v * v)));
}

}  // namespace

template <typename T>
DecodeSession<T>::DecodeSession(const PolicyLm<T>& model, std::size_t batch_size)
    : model_(&model), batch_(batch_size) {
  if (batch_size == 0) throw ConfigError("decode session: batch size must be positive");
  const auto& c = model.config();
  keys_.assign(c.n_layers, core::Buffer<T>(batch_ * c.max_sequence_length * c.d_model, T(0)));
  values_ = keys_;
  logits_.assign(batch_ * c.vocab_size, T(0));
}

template <typename T>
const core::Buffer<T>& DecodeSession<T>::step(std::span<const int> tokens) {
  const auto& c = model_->config();
  const std::size_t d = c.d_model, v = c.vocab_size, max_len = c.max_sequence_length;
  if (tokens.size() != batch_) {
    throw DimensionError("decode session: expected " + std::to_string(batch_) + " tokens, got " +
                         std::to_string(tokens.size()));
  }
  if (position_ >= max_len) {
    throw ContextError("decode session: context of " + std::to_string(max_len) + " exhausted");
  }
  const std::size_t heads = c.n_heads, dk = d / heads;
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dk));
  const Tensor<T>& wte = model_->token_embedding();
  const Tensor<T>& wpe = model_->position_embedding();

  RowMat<T> x(batch_, d);
  for (std::size_t b = 0; b < batch_; ++b) {
    if (tokens[b] < 0 || static_cast<std::size_t>(tokens[b]) >= v) {
      throw IndexError("decode session: token " + std::to_string(tokens[b]) + " outside vocabulary");
    }
    for (std::size_t j = 0; j < d; ++j) {
      x(b, j) = wte[static_cast<std::size_t>(tokens[b]) * d + j] + wpe[position_ * d + j];
    }
  }

  RowMat<T> normed, qkv, attended(batch_, d), hidden;
  core::Buffer<T> scores(position_ + 1);
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const auto& w = model_->blocks()[l];
    layer_norm_rows(x, w.ln1_gamma, w.ln1_beta, normed);
    qkv.noalias() = normed * as_matrix(w.w_qkv);
    qkv.rowwise() += as_row(w.b_qkv);
    auto& kc = keys_[l];
    auto& vc = values_[l];
    for (std::size_t b = 0; b < batch_; ++b) {
      T* krow = kc.data() + (b * max_len + position_) * d;
      T* vrow = vc.data() + (b * max_len + position_) * d;
      for (std::size_t j = 0; j < d; ++j) {
        krow[j] = qkv(b, d + j);
        vrow[j] = qkv(b, 2 * d + j);
      }
      for (std::size_t hd = 0; hd < heads; ++hd) {
        T m = -std::numeric_limits<T>::infinity();
        for (std::size_t t = 0; t <= position_; ++t) {
          const T* k = kc.data() + (b * max_len + t) * d + hd * dk;
          T s = 0;
          for (std::size_t j = 0; j < dk; ++j) s += qkv(b, hd * dk + j) * k[j];
          scores[t] = s * inv_sqrt;
          m = std::max(m, scores[t]);
        }
        T total = 0;
        for (std::size_t t = 0; t <= position_; ++t) {
          scores[t] = std::exp(scores[t] - m);
          total += scores[t];
        }
        for (std::size_t j = 0; j < dk; ++j) attended(b, hd * dk + j) = 0;
        for (std::size_t t = 0; t <= position_; ++t) {
          const T p = scores[t] / total;
          const T* val = vc.data() + (b * max_len + t) * d + hd * dk;
          for (std::size_t j = 0; j < dk; ++j) attended(b, hd * dk + j) += p * val[j];
        }
      }
    }
    x.noalias() += attended * as_matrix(w.w_out);
    x.rowwise() += as_row(w.b_out);
    layer_norm_rows(x, w.ln2_gamma, w.ln2_beta, normed);
    hidden.noalias() = normed * as_matrix(w.w_fc);
    hidden.rowwise() += as_row(w.b_fc);
    hidden = hidden.unaryExpr([](T u) { return gelu_scalar(u); });
    x.noalias() += hidden * as_matrix(w.w_proj);
    x.rowwise() += as_row(w.b_proj);
  }
  layer_norm_rows(x, model_->final_gamma(), model_->final_beta(), normed);
  Eigen::Map<RowMat<T>>(logits_.data(), batch_, v).noalias() =
      normed * as_matrix(model_->head()).transpose();
  ++position_;
  return logits_;
}

template class PolicyLm<float>;
template class PolicyLm<double>;
template class DecodeSession<float>;
template class DecodeSession<double>;

}  // namespace detox::lm
