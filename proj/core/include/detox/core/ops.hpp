#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "detox/core/tensor.hpp"

// Differentiable operations used by the language models. All matrices are
// row-major rank-2 tensors [rows x cols]; a sequence of N feature vectors of
// width d is an [N x d] tensor.
namespace detox::core {

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

// a [n x k] times b^T where b is [m x k].
template <typename T>
Tensor<T> matmul_transposed(const Tensor<T>& a, const Tensor<T>& b);

// x [n x k] * w [k x m] + bias [m]
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor);

template <typename T>
Tensor<T> sum(const Tensor<T>& x);

template <typename T>
Tensor<T> mean(const Tensor<T>& x);

// Rows of `table` selected by id; ids must be < table.rows().
template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const int> ids);

template <typename T>
Tensor<T> select_rows(const Tensor<T>& x, std::span<const std::size_t> rows);

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = T(1e-5));

// tanh approximation, as in GPT-2.
template <typename T>
Tensor<T> gelu(const Tensor<T>& x);

// One self-attention head: softmax(Q K^T / sqrt(d_k) + M) V with Q = H W_Q,
// K = H W_K, V = H W_V. Mask entries are 0 (attend) or -infinity (blocked).
// A row whose entries are all blocked produces a zero output row.
template <typename T>
Tensor<T> attention_head(const Tensor<T>& h, const Tensor<T>& w_q, const Tensor<T>& w_k,
                         const Tensor<T>& w_v, const Tensor<T>& mask);

// Multi-head attention over a packed batch. `qkv` is [N x 3d] holding the
// query, key and value projections side by side; the rows are split into
// consecutive independent sequences of the given lengths. With `causal` set,
// position t attends only to positions <= t of its own sequence.
struct AttentionLayout {
  std::span<const std::size_t> segment_lengths;
  bool causal = true;
};

template <typename T>
Tensor<T> multi_head_attention(const Tensor<T>& qkv, std::size_t n_heads,
                               const AttentionLayout& layout);

// Mean over rows of -log softmax(logits)[target].
template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const int> targets);

// Mean over rows of -sum_c target[c] log softmax(logits)[c]; targets are
// per-class 0/1 (or probability) rows.
template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, const Tensor<T>& targets);

// Mean over all entries of the binary cross-entropy of sigmoid(logits).
template <typename T>
Tensor<T> sigmoid_binary_cross_entropy(const Tensor<T>& logits, const Tensor<T>& targets);

// log softmax(logits)[row, target[row]] as an [N] vector.
template <typename T>
Tensor<T> log_softmax_gather(const Tensor<T>& logits, std::span<const int> targets);

// sum_i weights[i] * x[i]
template <typename T>
Tensor<T> weighted_sum(const Tensor<T>& x, std::span<const T> weights);

// Plain numerical helpers (no graph recording).
template <typename T>
void softmax_inplace(std::span<T> values);

template <typename T>
T log_sum_exp(std::span<const T> values);

template <typename T>
bool all_finite(std::span<const T> values);

}  // namespace detox::core
