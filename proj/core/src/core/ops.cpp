#include "detox/core/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "detox/core/error.hpp"

namespace detox::core {

namespace {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<Mat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const Mat<T>>;
template <typename T>
using Vec = Eigen::Matrix<T, 1, Eigen::Dynamic>;
template <typename T>
using VecMap = Eigen::Map<Vec<T>>;
template <typename T>
using ConstVecMap = Eigen::Map<const Vec<T>>;

template <typename T>
ConstMatMap<T> as_matrix(const Tensor<T>& t) {
  return ConstMatMap<T>(t.raw(), static_cast<Eigen::Index>(t.rows()),
                        static_cast<Eigen::Index>(t.cols()));
}

template <typename T>
MatMap<T> grad_matrix(detail::Node<T>& node, std::size_t rows, std::size_t cols) {
  return MatMap<T>(node.ensure_grad().data(), static_cast<Eigen::Index>(rows),
                   static_cast<Eigen::Index>(cols));
}

template <typename T>
ConstMatMap<T> out_grad(const detail::Node<T>& node, std::size_t rows, std::size_t cols) {
  return ConstMatMap<T>(node.grad.data(), static_cast<Eigen::Index>(rows),
                        static_cast<Eigen::Index>(cols));
}

void require(bool ok, const std::string& what) {
  if (!ok) throw DimensionError(what);
}

template <typename T>
void require_rank2(const Tensor<T>& t, const char* op) {
  require(t.defined() && (t.rank() == 2 || t.rank() == 1),
          std::string(op) + ": expected a matrix, got " +
              (t.defined() ? shape_string(t.shape()) : std::string("undefined")));
}

template <typename T>
bool wants_grad(const Tensor<T>& t) {
  return t.requires_grad();
}

template <typename T>
T row_log_sum_exp(const T* z, std::size_t n) {
  T m = -std::numeric_limits<T>::infinity();
  for (std::size_t i = 0; i < n; ++i) m = std::max(m, z[i]);
  if (!std::isfinite(m)) return m;
  T s = 0;
  for (std::size_t i = 0; i < n; ++i) s += std::exp(z[i] - m);
  return m + std::log(s);
}

}  // namespace

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  require(b.rows() == k, "matmul: inner dimensions differ, " + shape_string(a.shape()) +
                             " x " + shape_string(b.shape()));
  Buffer<T> out(n * m);
  MatMap<T>(out.data(), n, m).noalias() = as_matrix(a) * as_matrix(b);
  return Tensor<T>::make_result(Shape{n, m}, std::move(out), {a, b},
                                [a, b, n, k, m](detail::Node<T>& self) mutable {
                                  auto g = out_grad(self, n, m);
                                  if (wants_grad(a))
                                    grad_matrix(*a.node(), n, k).noalias() +=
                                        g * as_matrix(b).transpose();
                                  if (wants_grad(b))
                                    grad_matrix(*b.node(), k, m).noalias() +=
                                        as_matrix(a).transpose() * g;
                                });
}

template <typename T>
Tensor<T> matmul_transposed(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank2(a, "matmul_transposed");
  require_rank2(b, "matmul_transposed");
  const std::size_t n = a.rows(), k = a.cols(), m = b.rows();
  require(b.cols() == k, "matmul_transposed: inner dimensions differ, " +
                             shape_string(a.shape()) + " x " + shape_string(b.shape()) + "^T");
  Buffer<T> out(n * m);
  MatMap<T>(out.data(), n, m).noalias() = as_matrix(a) * as_matrix(b).transpose();
  return Tensor<T>::make_result(Shape{n, m}, std::move(out), {a, b},
                                [a, b, n, k, m](detail::Node<T>& self) mutable {
                                  auto g = out_grad(self, n, m);
                                  if (wants_grad(a))
                                    grad_matrix(*a.node(), n, k).noalias() += g * as_matrix(b);
                                  if (wants_grad(b))
                                    grad_matrix(*b.node(), m, k).noalias() +=
                                        g.transpose() * as_matrix(a);
                                });
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
  require_rank2(x, "linear");
  require_rank2(w, "linear");
  const std::size_t n = x.rows(), k = x.cols(), m = w.cols();
  require(w.rows() == k, "linear: input width " + std::to_string(k) + " vs weight " +
                             shape_string(w.shape()));
  require(bias.size() == m, "linear: bias size " + std::to_string(bias.size()) +
                                " vs output width " + std::to_string(m));
  Buffer<T> out(n * m);
  MatMap<T> o(out.data(), n, m);
  o.noalias() = as_matrix(x) * as_matrix(w);
  o.rowwise() += ConstVecMap<T>(bias.raw(), m);
  return Tensor<T>::make_result(
      Shape{n, m}, std::move(out), {x, w, bias},
      [x, w, bias, n, k, m](detail::Node<T>& self) mutable {
        auto g = out_grad(self, n, m);
        if (wants_grad(x)) grad_matrix(*x.node(), n, k).noalias() += g * as_matrix(w).transpose();
        if (wants_grad(w)) grad_matrix(*w.node(), k, m).noalias() += as_matrix(x).transpose() * g;
        if (wants_grad(bias)) VecMap<T>(bias.node()->ensure_grad().data(), m) += g.colwise().sum();
      });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.shape() == b.shape(),
          "add: shapes differ, " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  Buffer<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return Tensor<T>::make_result(a.shape(), std::move(out), {a, b},
                                [a, b](detail::Node<T>& self) mutable {
                                  for (const Tensor<T>* p : {&a, &b}) {
                                    if (!wants_grad(*p)) continue;
                                    auto& g = p->node()->ensure_grad();
                                    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                                  }
                                });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  Buffer<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * factor;
  return Tensor<T>::make_result(x.shape(), std::move(out), {x},
                                [x, factor](detail::Node<T>& self) mutable {
                                  auto& g = x.node()->ensure_grad();
                                  for (std::size_t i = 0; i < g.size(); ++i)
                                    g[i] += factor * self.grad[i];
                                });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T s = 0;
  for (T v : x.data()) s += v;
  return Tensor<T>::make_result(Shape{1}, {s}, {x}, [x](detail::Node<T>& self) mutable {
    auto& g = x.node()->ensure_grad();
    for (auto& v : g) v += self.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  require(x.size() > 0, "mean: empty tensor");
  return scale(sum(x), T(1) / static_cast<T>(x.size()));
}

template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const int> ids) {
  require_rank2(table, "embedding");
  const std::size_t v = table.rows(), d = table.cols();
  Buffer<T> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= v) {
      throw IndexError("embedding: id " + std::to_string(ids[i]) + " outside table of " +
                       std::to_string(v) + " rows");
    }
    std::copy_n(table.raw() + static_cast<std::size_t>(ids[i]) * d, d, out.data() + i * d);
  }
  std::vector<int> kept(ids.begin(), ids.end());
  return Tensor<T>::make_result(Shape{ids.size(), d}, std::move(out), {table},
                                [table, kept = std::move(kept), d](detail::Node<T>& self) mutable {
                                  auto& g = table.node()->ensure_grad();
                                  for (std::size_t i = 0; i < kept.size(); ++i) {
                                    T* dst = g.data() + static_cast<std::size_t>(kept[i]) * d;
                                    const T* src = self.grad.data() + i * d;
                                    for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
                                  }
                                });
}

template <typename T>
Tensor<T> select_rows(const Tensor<T>& x, std::span<const std::size_t> rows) {
  require_rank2(x, "select_rows");
  const std::size_t n = x.rows(), d = x.cols();
  Buffer<T> out(rows.size() * d);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= n) {
      throw IndexError("select_rows: row " + std::to_string(rows[i]) + " of " + std::to_string(n));
    }
    std::copy_n(x.raw() + rows[i] * d, d, out.data() + i * d);
  }
  std::vector<std::size_t> kept(rows.begin(), rows.end());
  return Tensor<T>::make_result(Shape{rows.size(), d}, std::move(out), {x},
                                [x, kept = std::move(kept), d](detail::Node<T>& self) mutable {
                                  auto& g = x.node()->ensure_grad();
                                  for (std::size_t i = 0; i < kept.size(); ++i)
                                    for (std::size_t j = 0; j < d; ++j)
                                      g[kept[i] * d + j] += self.grad[i * d + j];
                                });
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  require_rank2(x, "layer_norm");
  const std::size_t n = x.rows(), d = x.cols();
  require(gamma.size() == d && beta.size() == d, "layer_norm: parameter width mismatch");
  Buffer<T> out(n * d), xhat(n * d), rstd(n);
  for (std::size_t r = 0; r < n; ++r) {
    const T* row = x.raw() + r * d;
    T mu = 0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<T>(d);
    T var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<T>(d);
    rstd[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[r * d + j] = (row[j] - mu) * rstd[r];
      out[r * d + j] = gamma[j] * xhat[r * d + j] + beta[j];
    }
  }
  return Tensor<T>::make_result(
      Shape{n, d}, std::move(out), {x, gamma, beta},
      [x, gamma, beta, xhat = std::move(xhat), rstd = std::move(rstd), n,
       d](detail::Node<T>& self) mutable {
        const T* dy = self.grad.data();
        if (wants_grad(gamma) || wants_grad(beta)) {
          auto& dg = gamma.node()->ensure_grad();
          auto& db = beta.node()->ensure_grad();
          for (std::size_t r = 0; r < n; ++r)
            for (std::size_t j = 0; j < d; ++j) {
              dg[j] += dy[r * d + j] * xhat[r * d + j];
              db[j] += dy[r * d + j];
            }
        }
        if (!wants_grad(x)) return;
        auto& dx = x.node()->ensure_grad();
        for (std::size_t r = 0; r < n; ++r) {
          T mean_dxhat = 0, mean_dxhat_xhat = 0;
          for (std::size_t j = 0; j < d; ++j) {
            const T dxh = dy[r * d + j] * gamma[j];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * xhat[r * d + j];
          }
          mean_dxhat /= static_cast<T>(d);
          mean_dxhat_xhat /= static_cast<T>(d);
          for (std::size_t j = 0; j < d; ++j) {
            const T dxh = dy[r * d + j] * gamma[j];
            dx[r * d + j] += rstd[r] * (dxh - mean_dxhat - xhat[r * d + j] * mean_dxhat_xhat);
          }
        }
      });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr T kC = T(0.7978845608028654);  // sqrt(2/pi)
  constexpr T kA = T(0.044715);
  Buffer<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T v = x[i];
    out[i] = T(0.5) * v * (T(1) + std::tanh(kC * (v + kA * v * v * v)));
  }
  return Tensor<T>::make_result(x.shape(), std::move(out), {x},
                                [x](detail::Node<T>& self) mutable {
                                  auto& g = x.node()->ensure_grad();
                                  for (std::size_t i = 0; i < g.size(); ++i) {
                                    const T v = x[i];
                                    const T t = std::tanh(kC * (v + kA * v * v * v));
                                    const T dt = (T(1) - t * t) * kC * (T(1) + T(3) * kA * v * v);
                                    g[i] += self.grad[i] * (T(0.5) * (T(1) + t) + T(0.5) * v * dt);
                                  }
                                });
}

namespace {

// Softmax of one score row in place. Entries equal to -inf get probability 0;
// a row with no finite entry becomes all zeros.
template <typename T>
void masked_softmax_row(T* row, std::size_t n) {
  T m = -std::numeric_limits<T>::infinity();
  for (std::size_t j = 0; j < n; ++j) m = std::max(m, row[j]);
  if (!std::isfinite(m)) {
    std::fill_n(row, n, T(0));
    return;
  }
  T s = 0;
  for (std::size_t j = 0; j < n; ++j) {
    row[j] = std::exp(row[j] - m);
    s += row[j];
  }
  for (std::size_t j = 0; j < n; ++j) row[j] /= s;
}

// dS = P * (dP - rowsum(dP * P)), in place over dP.
template <typename T>
void softmax_backward_rows(const Mat<T>& p, Mat<T>& dp) {
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    const T dot = (p.row(i).array() * dp.row(i).array()).sum();
    dp.row(i) = (p.row(i).array() * (dp.row(i).array() - dot)).matrix();
  }
}

}  // namespace

template <typename T>
Tensor<T> attention_head(const Tensor<T>& h, const Tensor<T>& w_q, const Tensor<T>& w_k,
                         const Tensor<T>& w_v, const Tensor<T>& mask) {
  require_rank2(h, "attention_head");
  const std::size_t n = h.rows();
  require(mask.rank() == 2 && mask.rows() == n && mask.cols() == n,
          "attention_head: mask must be " + std::to_string(n) + "x" + std::to_string(n) +
              ", got " + shape_string(mask.shape()));
  require(w_q.shape() == w_k.shape() && w_q.shape() == w_v.shape(),
          "attention_head: projection shapes differ");
  Tensor<T> q = matmul(h, w_q), k = matmul(h, w_k), v = matmul(h, w_v);
  const std::size_t dk = q.cols();
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dk));

  Mat<T> p = (as_matrix(q) * as_matrix(k).transpose()) * inv_sqrt + as_matrix(mask);
  for (Eigen::Index i = 0; i < p.rows(); ++i) masked_softmax_row(p.row(i).data(), n);
  Buffer<T> out(n * dk);
  MatMap<T>(out.data(), n, dk).noalias() = p * as_matrix(v);

  return Tensor<T>::make_result(
      Shape{n, dk}, std::move(out), {q, k, v},
      [q, k, v, p = std::move(p), n, dk, inv_sqrt](detail::Node<T>& self) mutable {
        auto g = out_grad(self, n, dk);
        if (wants_grad(v)) grad_matrix(*v.node(), n, dk).noalias() += p.transpose() * g;
        Mat<T> ds = g * as_matrix(v).transpose();
        softmax_backward_rows(p, ds);
        ds *= inv_sqrt;
        if (wants_grad(q)) grad_matrix(*q.node(), n, dk).noalias() += ds * as_matrix(k);
        if (wants_grad(k)) grad_matrix(*k.node(), n, dk).noalias() += ds.transpose() * as_matrix(q);
      });
}

template <typename T>
Tensor<T> multi_head_attention(const Tensor<T>& qkv, std::size_t n_heads,
                               const AttentionLayout& layout) {
  require_rank2(qkv, "multi_head_attention");
  const std::size_t n = qkv.rows();
  require(qkv.cols() % 3 == 0, "multi_head_attention: width must be 3*d_model");
  const std::size_t d = qkv.cols() / 3;
  require(n_heads > 0 && d % n_heads == 0, "multi_head_attention: d_model " + std::to_string(d) +
                                               " not divisible by " + std::to_string(n_heads) +
                                               " heads");
  std::size_t total = 0;
  for (auto len : layout.segment_lengths) total += len;
  require(total == n, "multi_head_attention: segment lengths sum to " + std::to_string(total) +
                          ", expected " + std::to_string(n));
  const std::size_t dk = d / n_heads;
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dk));
  using Strided = Eigen::Map<const Mat<T>, 0, Eigen::OuterStride<>>;
  using MutStrided = Eigen::Map<Mat<T>, 0, Eigen::OuterStride<>>;

  Buffer<T> out(n * d);
  std::vector<Mat<T>> probs;
  probs.reserve(layout.segment_lengths.size() * n_heads);
  std::size_t offset = 0;
  for (std::size_t len : layout.segment_lengths) {
    for (std::size_t hd = 0; hd < n_heads; ++hd) {
      const T* base = qkv.raw() + offset * 3 * d + hd * dk;
      Strided q(base, len, dk, Eigen::OuterStride<>(3 * d));
      Strided k(base + d, len, dk, Eigen::OuterStride<>(3 * d));
      Strided v(base + 2 * d, len, dk, Eigen::OuterStride<>(3 * d));
      Mat<T> p = (q * k.transpose()) * inv_sqrt;
      if (layout.causal) {
        for (std::size_t i = 0; i < len; ++i)
          for (std::size_t j = i + 1; j < len; ++j) p(i, j) = -std::numeric_limits<T>::infinity();
      }
      for (Eigen::Index i = 0; i < p.rows(); ++i) masked_softmax_row(p.row(i).data(), len);
      MutStrided o(out.data() + offset * d + hd * dk, len, dk, Eigen::OuterStride<>(d));
      o.noalias() = p * v;
      probs.push_back(std::move(p));
    }
    offset += len;
  }

  std::vector<std::size_t> lengths(layout.segment_lengths.begin(), layout.segment_lengths.end());
  return Tensor<T>::make_result(
      Shape{n, d}, std::move(out), {qkv},
      [qkv, probs = std::move(probs), lengths = std::move(lengths), n_heads, d, dk,
       inv_sqrt](detail::Node<T>& self) mutable {
        auto& dqkv = qkv.node()->ensure_grad();
        std::size_t offset = 0, idx = 0;
        for (std::size_t len : lengths) {
          for (std::size_t hd = 0; hd < n_heads; ++hd, ++idx) {
            const Mat<T>& p = probs[idx];
            const std::size_t base = offset * 3 * d + hd * dk;
            Strided q(qkv.raw() + base, len, dk, Eigen::OuterStride<>(3 * d));
            Strided k(qkv.raw() + base + d, len, dk, Eigen::OuterStride<>(3 * d));
            Strided v(qkv.raw() + base + 2 * d, len, dk, Eigen::OuterStride<>(3 * d));
            Strided g(self.grad.data() + offset * d + hd * dk, len, dk, Eigen::OuterStride<>(d));
            MutStrided dq(dqkv.data() + base, len, dk, Eigen::OuterStride<>(3 * d));
            MutStrided dk_(dqkv.data() + base + d, len, dk, Eigen::OuterStride<>(3 * d));
            MutStrided dv(dqkv.data() + base + 2 * d, len, dk, Eigen::OuterStride<>(3 * d));
            dv.noalias() += p.transpose() * g;
            Mat<T> ds = g * v.transpose();
            softmax_backward_rows(p, ds);
            ds *= inv_sqrt;
            dq.noalias() += ds * k;
            dk_.noalias() += ds.transpose() * q;
          }
          offset += len;
        }
      });
}

template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const int> targets) {
  require_rank2(logits, "softmax_cross_entropy");
  const std::size_t n = logits.rows(), c = logits.cols();
  require(c >= 2, "softmax_cross_entropy: need at least 2 classes");
  require(targets.size() == n, "softmax_cross_entropy: " + std::to_string(targets.size()) +
                                   " targets for " + std::to_string(n) + " rows");
  require(n > 0, "softmax_cross_entropy: empty batch");
  Buffer<T> probs(n * c);
  T loss = 0;
  for (std::size_t r = 0; r < n; ++r) {
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= c) {
      throw IndexError("softmax_cross_entropy: target " + std::to_string(targets[r]) +
                       " outside " + std::to_string(c) + " classes");
    }
    const T* z = logits.raw() + r * c;
    const T lse = row_log_sum_exp(z, c);
    loss += lse - z[targets[r]];
    for (std::size_t j = 0; j < c; ++j) probs[r * c + j] = std::exp(z[j] - lse);
  }
  std::vector<int> kept(targets.begin(), targets.end());
  return Tensor<T>::make_result(
      Shape{1}, {loss / static_cast<T>(n)}, {logits},
      [logits, probs = std::move(probs), kept = std::move(kept), n, c](detail::Node<T>& self) mutable {
        auto& g = logits.node()->ensure_grad();
        const T s = self.grad[0] / static_cast<T>(n);
        for (std::size_t r = 0; r < n; ++r) {
          for (std::size_t j = 0; j < c; ++j) g[r * c + j] += s * probs[r * c + j];
          g[r * c + static_cast<std::size_t>(kept[r])] -= s;
        }
      });
}

template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, const Tensor<T>& targets) {
  require_rank2(logits, "softmax_cross_entropy");
  const std::size_t n = logits.rows(), c = logits.cols();
  require(c >= 2, "softmax_cross_entropy: need at least 2 classes");
  require(targets.size() == n * c, "softmax_cross_entropy: target shape " +
                                       shape_string(targets.shape()) + " vs logits " +
                                       shape_string(logits.shape()));
  require(n > 0, "softmax_cross_entropy: empty batch");
  Buffer<T> probs(n * c);
  T loss = 0;
  for (std::size_t r = 0; r < n; ++r) {
    const T* z = logits.raw() + r * c;
    const T lse = row_log_sum_exp(z, c);
    for (std::size_t j = 0; j < c; ++j) {
      const T t = targets[r * c + j];
      if (t != T(0)) loss += t * (lse - z[j]);
      probs[r * c + j] = std::exp(z[j] - lse);
    }
  }
  return Tensor<T>::make_result(
      Shape{1}, {loss / static_cast<T>(n)}, {logits},
      [logits, targets, probs = std::move(probs), n, c](detail::Node<T>& self) mutable {
        auto& g = logits.node()->ensure_grad();
        const T s = self.grad[0] / static_cast<T>(n);
        for (std::size_t r = 0; r < n; ++r) {
          T mass = 0;
          for (std::size_t j = 0; j < c; ++j) mass += targets[r * c + j];
          for (std::size_t j = 0; j < c; ++j)
            g[r * c + j] += s * (probs[r * c + j] * mass - targets[r * c + j]);
        }
      });
}

template <typename T>
Tensor<T> sigmoid_binary_cross_entropy(const Tensor<T>& logits, const Tensor<T>& targets) {
  require(logits.size() == targets.size() && logits.size() > 0,
          "sigmoid_binary_cross_entropy: target shape " + shape_string(targets.shape()) +
              " vs logits " + shape_string(logits.shape()));
  const std::size_t n = logits.size();
  T loss = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const T z = logits[i], y = targets[i];
    loss += std::max(z, T(0)) - z * y + std::log1p(std::exp(-std::abs(z)));
  }
  return Tensor<T>::make_result(Shape{1}, {loss / static_cast<T>(n)}, {logits},
                                [logits, targets, n](detail::Node<T>& self) mutable {
                                  auto& g = logits.node()->ensure_grad();
                                  const T s = self.grad[0] / static_cast<T>(n);
                                  for (std::size_t i = 0; i < n; ++i) {
                                    const T sig = T(1) / (T(1) + std::exp(-logits[i]));
                                    g[i] += s * (sig - targets[i]);
                                  }
                                });
}

template <typename T>
Tensor<T> log_softmax_gather(const Tensor<T>& logits, std::span<const int> targets) {
  require_rank2(logits, "log_softmax_gather");
  const std::size_t n = logits.rows(), c = logits.cols();
  require(targets.size() == n, "log_softmax_gather: " + std::to_string(targets.size()) +
                                   " targets for " + std::to_string(n) + " rows");
  Buffer<T> out(n), probs(n * c);
  for (std::size_t r = 0; r < n; ++r) {
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= c) {
      throw IndexError("log_softmax_gather: target " + std::to_string(targets[r]) + " outside " +
                       std::to_string(c) + " classes");
    }
    const T* z = logits.raw() + r * c;
    const T lse = row_log_sum_exp(z, c);
    out[r] = z[targets[r]] - lse;
    for (std::size_t j = 0; j < c; ++j) probs[r * c + j] = std::exp(z[j] - lse);
  }
  std::vector<int> kept(targets.begin(), targets.end());
  return Tensor<T>::make_result(
      Shape{n}, std::move(out), {logits},
      [logits, probs = std::move(probs), kept = std::move(kept), n, c](detail::Node<T>& self) mutable {
        auto& g = logits.node()->ensure_grad();
        for (std::size_t r = 0; r < n; ++r) {
          const T gr = self.grad[r];
          if (gr == T(0)) continue;
          for (std::size_t j = 0; j < c; ++j) g[r * c + j] -= gr * probs[r * c + j];
          g[r * c + static_cast<std::size_t>(kept[r])] += gr;
        }
      });
}

template <typename T>
Tensor<T> weighted_sum(const Tensor<T>& x, std::span<const T> weights) {
  require(x.size() == weights.size(), "weighted_sum: " + std::to_string(weights.size()) +
                                          " weights for " + std::to_string(x.size()) + " values");
  T s = 0;
  for (std::size_t i = 0; i < x.size(); ++i) s += weights[i] * x[i];
  Buffer<T> w(weights.begin(), weights.end());
  return Tensor<T>::make_result(Shape{1}, {s}, {x},
                                [x, w = std::move(w)](detail::Node<T>& self) mutable {
                                  auto& g = x.node()->ensure_grad();
                                  for (std::size_t i = 0; i < g.size(); ++i)
                                    g[i] += self.grad[0] * w[i];
                                });
}

template <typename T>
void softmax_inplace(std::span<T> values) {
  masked_softmax_row(values.data(), values.size());
}

template <typename T>
T log_sum_exp(std::span<const T> values) {
  return row_log_sum_exp(values.data(), values.size());
}

template <typename T>
bool all_finite(std::span<const T> values) {
  return std::all_of(values.begin(), values.end(), [](T v) { return std::isfinite(v); });
}

#define DETOX_INSTANTIATE_OPS(T)                                                              \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                             \
  template Tensor<T> matmul_transposed(const Tensor<T>&, const Tensor<T>&);                  \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);           \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> scale(const Tensor<T>&, T);                                             \
  template Tensor<T> sum(const Tensor<T>&);                                                  \
  template Tensor<T> mean(const Tensor<T>&);                                                 \
  template Tensor<T> embedding(const Tensor<T>&, std::span<const int>);                      \
  template Tensor<T> select_rows(const Tensor<T>&, std::span<const std::size_t>);            \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);    \
  template Tensor<T> gelu(const Tensor<T>&);                                                 \
  template Tensor<T> attention_head(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,    \
                                    const Tensor<T>&, const Tensor<T>&);                     \
  template Tensor<T> multi_head_attention(const Tensor<T>&, std::size_t,                     \
                                          const AttentionLayout&);                           \
  template Tensor<T> softmax_cross_entropy(const Tensor<T>&, std::span<const int>);          \
  template Tensor<T> softmax_cross_entropy(const Tensor<T>&, const Tensor<T>&);              \
  template Tensor<T> sigmoid_binary_cross_entropy(const Tensor<T>&, const Tensor<T>&);       \
  template Tensor<T> log_softmax_gather(const Tensor<T>&, std::span<const int>);             \
  template Tensor<T> weighted_sum(const Tensor<T>&, std::span<const T>);                     \
  template void softmax_inplace(std::span<T>);                                               \
  template T log_sum_exp(std::span<const T>);                                                \
  template bool all_finite(std::span<const T>);

DETOX_INSTANTIATE_OPS(float)
DETOX_INSTANTIATE_OPS(double)

#undef DETOX_INSTANTIATE_OPS

}  // namespace detox::core
