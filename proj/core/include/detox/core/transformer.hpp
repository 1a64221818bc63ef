#pragma once

#include <cstddef>
#include <string>

#include "detox/core/ops.hpp"
#include "detox/core/parameters.hpp"
#include "detox/core/random.hpp"

namespace detox::core {

// Weights of one pre-LN transformer block. The handles alias entries of the
// owning ParameterSet.
template <typename T>
struct BlockWeights {
  Tensor<T> ln1_gamma, ln1_beta;
  Tensor<T> w_qkv, b_qkv;  // [d x 3d], [3d]
  Tensor<T> w_out, b_out;  // [d x d], [d]
  Tensor<T> ln2_gamma, ln2_beta;
  Tensor<T> w_fc, b_fc;      // [d x d_ff], [d_ff]
  Tensor<T> w_proj, b_proj;  // [d_ff x d], [d]
};

// Registers "<prefix>.*" parameters. Projections ~ normal(0, 0.02), biases 0,
// layer-norm gain 1 (all zeros with Init::kZeros except the gains).
template <typename T>
BlockWeights<T> register_block(ParameterSet<T>& params, const std::string& prefix,
                               std::size_t d_model, std::size_t d_ff, Init init, Rng& rng);

// Re-binds handles after the parameter set was copied or reloaded.
template <typename T>
BlockWeights<T> bind_block(ParameterSet<T>& params, const std::string& prefix);

// Position-wise feature transform applied after the attention residual:
// u + W_proj gelu(W_fc LN(u)).
template <typename T>
Tensor<T> feature_transform(const Tensor<T>& u, const BlockWeights<T>& w);

// H_l = feature_transform(A_l(LN(H_{l-1})) + H_{l-1})
template <typename T>
Tensor<T> transformer_block(const Tensor<T>& h, const BlockWeights<T>& w, std::size_t n_heads,
                            const AttentionLayout& layout);

}  // namespace detox::core
