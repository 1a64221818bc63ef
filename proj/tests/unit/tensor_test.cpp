#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <numeric>

#include "detox/core/adam.hpp"
#include "detox/core/error.hpp"
#include "detox/core/ops.hpp"
#include "detox/core/parameters.hpp"
#include "detox/core/random.hpp"
#include "detox/core/transformer.hpp"
#include "support.hpp"

using namespace detox;
using core::Tensor;
using TD = Tensor<double>;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

TD random_tensor(core::Shape shape, core::Rng& rng, double scale = 1.0, bool grad = false) {
  core::Buffer<double> v(core::numel(shape));
  for (auto& x : v) x = scale * (2.0 * core::uniform01(rng) - 1.0);
  return TD::from(std::move(shape), std::move(v), grad);
}

TD causal_mask(std::size_t n) {
  core::Buffer<double> m(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) m[i * n + j] = -kInf;
  }
  return TD::from({n, n}, std::move(m));
}

}  // namespace

TEST(Tensor, ShapeAndDataLengthAgree) {
  EXPECT_THROW(TD::from({2, 3}, {1.0, 2.0}), DimensionError);
  const auto t = TD::zeros({2, 3});
  EXPECT_EQ(t.size(), 6u);
  EXPECT_EQ(t.rows(), 2u);
  EXPECT_EQ(t.cols(), 3u);
}

TEST(Tensor, StorageIsCacheLineAligned) {
  for (std::size_t n : {1u, 3u, 17u, 100u}) {
    const auto t = TD::zeros({n});
    EXPECT_EQ(reinterpret_cast<std::uintptr_t>(t.raw()) % 64, 0u);
  }
}

TEST(Tensor, BackwardPopulatesEveryReachableParameter) {
  core::Rng rng = core::make_rng(1, core::Stream::kInit);
  auto a = random_tensor({3, 4}, rng, 1.0, true);
  auto b = random_tensor({4, 2}, rng, 1.0, true);
  auto unused = random_tensor({2}, rng, 1.0, true);
  auto loss = core::sum(core::matmul(a, b));
  loss.backward();
  EXPECT_TRUE(a.has_grad());
  EXPECT_TRUE(b.has_grad());
  EXPECT_FALSE(unused.has_grad());
  EXPECT_EQ(a.grad().size(), a.size());
}

TEST(Tensor, NoGradGuardSkipsRecording) {
  auto a = TD::from({2}, {1.0, 2.0}, true);
  {
    core::NoGradGuard guard;
    EXPECT_FALSE(core::scale(a, 2.0).requires_grad());
  }
  EXPECT_TRUE(core::scale(a, 2.0).requires_grad());
}

TEST(Ops, MatmulShapeMismatchThrows) {
  EXPECT_THROW(core::matmul(TD::zeros({2, 3}), TD::zeros({2, 3})), DimensionError);
}

TEST(Attention, SinglePositionReturnsValueRow) {
  core::Rng rng = core::make_rng(2, core::Stream::kInit);
  const auto h = random_tensor({1, 3}, rng);
  const auto wq = random_tensor({3, 2}, rng), wk = random_tensor({3, 2}, rng),
             wv = random_tensor({3, 2}, rng);
  const auto out = core::attention_head(h, wq, wk, wv, TD::zeros({1, 1}));
  const auto v = core::matmul(h, wv);
  EXPECT_NEAR(out[0], v[0], 1e-15);
  EXPECT_NEAR(out[1], v[1], 1e-15);
}

// N = 2, d = d_k = 2, integer weights, evaluated by hand in straight-line code.
TEST(Attention, TwoByTwoOracle) {
  const auto h = TD::from({2, 2}, {1.0, 0.0, 0.0, 2.0});
  const auto wq = TD::from({2, 2}, {1.0, 1.0, 0.0, 1.0});
  const auto wk = TD::from({2, 2}, {2.0, 0.0, 1.0, -1.0});
  const auto wv = TD::from({2, 2}, {1.0, 2.0, 3.0, -1.0});
  const auto out = core::attention_head(h, wq, wk, wv, TD::zeros({2, 2}));

  // Q = H Wq, K = H Wk, V = H Wv
  const double q[2][2] = {{1, 1}, {0, 2}};
  const double k[2][2] = {{2, 0}, {2, -2}};
  const double v[2][2] = {{1, 2}, {6, -2}};
  for (int i = 0; i < 2; ++i) {
    const double s0 = (q[i][0] * k[0][0] + q[i][1] * k[0][1]) / std::sqrt(2.0);
    const double s1 = (q[i][0] * k[1][0] + q[i][1] * k[1][1]) / std::sqrt(2.0);
    const double m = std::max(s0, s1);
    const double e0 = std::exp(s0 - m), e1 = std::exp(s1 - m);
    const double p0 = e0 / (e0 + e1), p1 = e1 / (e0 + e1);
    for (int j = 0; j < 2; ++j) EXPECT_NEAR(out[2 * i + j], p0 * v[0][j] + p1 * v[1][j], 1e-14);
  }
}

TEST(Attention, CausalRowZeroIsFirstValue) {
  core::Rng rng = core::make_rng(3, core::Stream::kInit);
  const auto h = random_tensor({4, 3}, rng);
  const auto wq = random_tensor({3, 3}, rng), wk = random_tensor({3, 3}, rng),
             wv = random_tensor({3, 3}, rng);
  const auto out = core::attention_head(h, wq, wk, wv, causal_mask(4));
  const auto v = core::matmul(h, wv);
  for (int j = 0; j < 3; ++j) EXPECT_NEAR(out[j], v[j], 1e-15);
}

TEST(Attention, AllBlockedRowIsZero) {
  core::Rng rng = core::make_rng(4, core::Stream::kInit);
  const auto h = random_tensor({2, 3}, rng);
  const auto w = random_tensor({3, 2}, rng);
  const auto mask = TD::from({2, 2}, {-kInf, -kInf, 0.0, 0.0});
  const auto out = core::attention_head(h, w, w, w, mask);
  EXPECT_EQ(out[0], 0.0);
  EXPECT_EQ(out[1], 0.0);
  EXPECT_TRUE(std::isfinite(out[2]));
}

TEST(Attention, ShapeMismatchThrows) {
  const auto h = TD::zeros({2, 3});
  const auto w = TD::zeros({3, 2});
  EXPECT_THROW(core::attention_head(h, w, w, w, TD::zeros({3, 3})), DimensionError);
  EXPECT_THROW(core::attention_head(h, TD::zeros({2, 2}), w, w, TD::zeros({2, 2})),
               DimensionError);
}

TEST(Attention, CausalPerturbationLeavesEarlierRowsBitIdentical) {
  core::Rng rng = core::make_rng(5, core::Stream::kInit);
  const std::size_t n = 6, d = 8;
  const auto qkv = random_tensor({n, 3 * d}, rng);
  const std::vector<std::size_t> lengths{n};
  const core::AttentionLayout layout{lengths, true};
  const auto base = core::multi_head_attention(qkv, 2, layout);
  for (std::size_t t = 0; t + 1 < n; ++t) {
    auto perturbed = qkv.clone();
    for (std::size_t r = t + 1; r < n; ++r) {
      for (std::size_t c = 0; c < 3 * d; ++c) perturbed[r * 3 * d + c] += 0.5;
    }
    const auto out = core::multi_head_attention(perturbed, 2, layout);
    for (std::size_t i = 0; i < (t + 1) * d; ++i) ASSERT_EQ(out[i], base[i]);
  }
}

// Each head of the packed op equals attention_head on slices of the projections.
TEST(Attention, MultiHeadMatchesPerHeadOracle) {
  core::Rng rng = core::make_rng(6, core::Stream::kInit);
  const std::size_t n = 5, d = 6, heads = 3, dk = d / heads;
  const auto h = random_tensor({n, d}, rng);
  const auto w = random_tensor({d, 3 * d}, rng);
  const auto qkv = core::matmul(h, w);
  const std::vector<std::size_t> lengths{n};
  const auto out = core::multi_head_attention(qkv, heads, {lengths, true});
  for (std::size_t head = 0; head < heads; ++head) {
    core::Buffer<double> wq(d * dk), wk(d * dk), wv(d * dk);
    for (std::size_t r = 0; r < d; ++r) {
      for (std::size_t c = 0; c < dk; ++c) {
        wq[r * dk + c] = w[r * 3 * d + head * dk + c];
        wk[r * dk + c] = w[r * 3 * d + d + head * dk + c];
        wv[r * dk + c] = w[r * 3 * d + 2 * d + head * dk + c];
      }
    }
    const auto ref = core::attention_head(h, TD::from({d, dk}, wq), TD::from({d, dk}, wk),
                                          TD::from({d, dk}, wv), causal_mask(n));
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t c = 0; c < dk; ++c) {
        EXPECT_NEAR(out[r * d + head * dk + c], ref[r * dk + c], 1e-12);
      }
    }
  }
}

TEST(Attention, PackedSegmentsAreIndependent) {
  core::Rng rng = core::make_rng(7, core::Stream::kInit);
  const std::size_t d = 4;
  const auto a = random_tensor({3, 3 * d}, rng), b = random_tensor({2, 3 * d}, rng);
  core::Buffer<double> joined(a.data().begin(), a.data().end());
  joined.insert(joined.end(), b.data().begin(), b.data().end());
  const std::vector<std::size_t> both{3, 2}, la{3}, lb{2};
  for (bool causal : {true, false}) {
    const auto packed = core::multi_head_attention(TD::from({5, 3 * d}, joined), 2, {both, causal});
    const auto oa = core::multi_head_attention(a, 2, {la, causal});
    const auto ob = core::multi_head_attention(b, 2, {lb, causal});
    for (std::size_t i = 0; i < oa.size(); ++i) EXPECT_NEAR(packed[i], oa[i], 1e-14);
    for (std::size_t i = 0; i < ob.size(); ++i) EXPECT_NEAR(packed[oa.size() + i], ob[i], 1e-14);
  }
}

TEST(Softmax, RowsAreDistributions) {
  core::Rng rng = core::make_rng(8, core::Stream::kEvaluation);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<float> v(1 + core::uniform_index(rng, 40));
    for (auto& x : v) x = static_cast<float>(40.0 * (core::uniform01(rng) - 0.5));
    core::softmax_inplace<float>(v);
    double total = 0.0;
    for (float p : v) {
      ASSERT_GE(p, 0.0f);
      total += p;
    }
    ASSERT_NEAR(total, 1.0, 1e-6);
  }
}

TEST(CrossEntropy, UniformLogitsGiveLogC) {
  for (std::size_t c : {2u, 5u, 17u}) {
    const std::vector<int> target{1};
    const auto loss = core::softmax_cross_entropy(TD::zeros({1, c}), std::span<const int>(target));
    EXPECT_NEAR(loss.item(), std::log(static_cast<double>(c)), 1e-14);
  }
}

TEST(CrossEntropy, DominantCorrectClassApproachesZero) {
  const std::vector<int> target{2};
  const auto loss =
      core::softmax_cross_entropy(TD::from({1, 3}, {0.0, 0.0, 800.0}), std::span<const int>(target));
  EXPECT_GE(loss.item(), 0.0);
  EXPECT_LT(loss.item(), 1e-300);
}

TEST(CrossEntropy, RandomLogitsMatchDirectOracle) {
  core::Rng rng = core::make_rng(9, core::Stream::kEvaluation);
  const std::size_t n = 4, c = 5;
  auto logits = random_tensor({n, c}, rng, 3.0, true);
  std::vector<int> targets(n);
  for (auto& t : targets) t = static_cast<int>(core::uniform_index(rng, c));
  auto loss = core::softmax_cross_entropy(logits, std::span<const int>(targets));
  double oracle = 0.0;
  std::vector<double> grad(n * c);
  for (std::size_t r = 0; r < n; ++r) {
    double z = 0.0;
    for (std::size_t k = 0; k < c; ++k) z += std::exp(logits[r * c + k]);
    oracle += -std::log(std::exp(logits[r * c + targets[r]]) / z);
    for (std::size_t k = 0; k < c; ++k) {
      grad[r * c + k] =
          (std::exp(logits[r * c + k]) / z - (static_cast<int>(k) == targets[r] ? 1.0 : 0.0)) / n;
    }
  }
  EXPECT_NEAR(loss.item(), oracle / n, 1e-13);
  loss.backward();
  for (std::size_t i = 0; i < grad.size(); ++i) EXPECT_NEAR(logits.grad()[i], grad[i], 1e-14);
}

TEST(CrossEntropy, TargetOutOfRangeThrows) {
  const std::vector<int> target{3};
  EXPECT_THROW(core::softmax_cross_entropy(TD::zeros({1, 3}), std::span<const int>(target)),
               IndexError);
}

TEST(CrossEntropy, MultiLabelTargetsMatchOracle) {
  const auto logits = TD::from({1, 3}, {0.5, -1.0, 2.0});
  const auto targets = TD::from({1, 3}, {1.0, 0.0, 1.0});
  const double z = std::exp(0.5) + std::exp(-1.0) + std::exp(2.0);
  const double oracle = -(std::log(std::exp(0.5) / z) + std::log(std::exp(2.0) / z));
  EXPECT_NEAR(core::softmax_cross_entropy(logits, targets).item(), oracle, 1e-14);
}

TEST(Ops, LayerNormHasZeroMeanUnitVariance) {
  core::Rng rng = core::make_rng(10, core::Stream::kEvaluation);
  const auto x = random_tensor({3, 16}, rng, 5.0);
  const auto y = core::layer_norm(x, TD::full({16}, 1.0), TD::zeros({16}));
  for (std::size_t r = 0; r < 3; ++r) {
    double mu = 0.0, var = 0.0;
    for (std::size_t j = 0; j < 16; ++j) mu += y[r * 16 + j];
    mu /= 16;
    for (std::size_t j = 0; j < 16; ++j) var += (y[r * 16 + j] - mu) * (y[r * 16 + j] - mu);
    EXPECT_NEAR(mu, 0.0, 1e-12);
    EXPECT_NEAR(var / 16, 1.0, 1e-4);
  }
}

TEST(Ops, GeluMatchesTanhFormula) {
  const auto x = TD::from({5}, {-3.0, -0.5, 0.0, 0.7, 2.5});
  const auto y = core::gelu(x);
  for (std::size_t i = 0; i < 5; ++i) {
    const double v = x[i];
    const double ref =
        0.5 * v * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (v + 0.044715 * v * v * v)));
    EXPECT_NEAR(y[i], ref, 1e-15);
  }
}

TEST(Ops, EmbeddingOutOfRangeThrows) {
  const std::vector<int> ids{0, 4};
  EXPECT_THROW(core::embedding(TD::zeros({4, 2}), std::span<const int>(ids)), IndexError);
}

TEST(Gradients, EveryOpMatchesFiniteDifferences) {
  core::Rng rng = core::make_rng(11, core::Stream::kInit);
  core::ParameterSet<double> p;
  auto x = p.add("x", random_tensor({4, 6}, rng, 1.0, true));
  auto w = p.add("w", random_tensor({6, 6}, rng, 0.5, true));
  auto b = p.add("b", random_tensor({6}, rng, 0.1, true));
  auto g = p.add("g", random_tensor({6}, rng, 1.0, true));
  auto beta = p.add("beta", random_tensor({6}, rng, 0.1, true));
  auto table = p.add("table", random_tensor({5, 6}, rng, 1.0, true));
  const std::vector<int> ids{4, 0, 2, 2}, targets{1, 5, 0, 3};
  const std::vector<std::size_t> rows{3, 1}, lengths{3, 1};
  const auto loss = [&] {
    auto h = core::add(x, core::embedding(table, std::span<const int>(ids)));
    h = core::layer_norm(h, g, beta);
    h = core::gelu(core::linear(h, w, b));
    h = core::add(h, core::matmul_transposed(h, core::scale(w, 0.5)));
    auto sel = core::select_rows(h, std::span<const std::size_t>(rows));
    auto ce = core::softmax_cross_entropy(h, std::span<const int>(targets));
    auto lp = core::log_softmax_gather(h, std::span<const int>(targets));
    const std::vector<double> wts{0.3, -0.2, 0.5, 0.1};
    return core::add(core::add(ce, core::mean(sel)),
                     core::weighted_sum(lp, std::span<const double>(wts)));
  };
  core::Rng pick = core::make_rng(12, core::Stream::kEvaluation);
  const auto r = testkit::check_gradients(p, loss, 60, pick);
  EXPECT_LE(r.max_relative_error, 1e-4) << r.worst;
}

TEST(Gradients, AttentionMatchesFiniteDifferences) {
  core::Rng rng = core::make_rng(13, core::Stream::kInit);
  core::ParameterSet<double> p;
  auto qkv = p.add("qkv", random_tensor({7, 12}, rng, 1.0, true));
  auto h = p.add("h", random_tensor({3, 4}, rng, 1.0, true));
  auto wq = p.add("wq", random_tensor({4, 2}, rng, 1.0, true));
  auto wk = p.add("wk", random_tensor({4, 2}, rng, 1.0, true));
  auto wv = p.add("wv", random_tensor({4, 2}, rng, 1.0, true));
  const std::vector<std::size_t> lengths{4, 3};
  const std::vector<double> weights = [] {
    std::vector<double> w(28);
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = std::sin(1.0 + static_cast<double>(i));
    return w;
  }();
  const auto loss = [&] {
    const auto a = core::multi_head_attention(qkv, 2, {lengths, true});
    const auto b = core::multi_head_attention(qkv, 2, {lengths, false});
    const auto c = core::attention_head(h, wq, wk, wv, causal_mask(3));
    return core::add(core::add(core::weighted_sum(a, std::span<const double>(weights)),
                               core::weighted_sum(b, std::span<const double>(weights))),
                     core::sum(core::scale(c, 0.7)));
  };
  core::Rng pick = core::make_rng(14, core::Stream::kEvaluation);
  const auto r = testkit::check_gradients(p, loss, 80, pick);
  EXPECT_LE(r.max_relative_error, 1e-4) << r.worst;
}

TEST(Block, RandomTinyBlockGradientsMatchFiniteDifferences) {
  core::Rng rng = core::make_rng(15, core::Stream::kInit);
  core::ParameterSet<double> p;
  const auto w = core::register_block(p, "b0", 8, 16, core::Init::kNormal, rng);
  // Perturb gains and biases away from their initial values.
  for (auto& [name, t] : p) {
    for (auto& v : t.data()) v += 0.1 * (2.0 * core::uniform01(rng) - 1.0);
  }
  auto x = p.add("x", random_tensor({5, 8}, rng, 1.0, true));
  const std::vector<std::size_t> lengths{5};
  const std::vector<double> weights = [] {
    std::vector<double> v(40);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::cos(0.3 * static_cast<double>(i));
    return v;
  }();
  const auto loss = [&] {
    return core::weighted_sum(core::transformer_block(x, w, 2, {lengths, true}),
                              std::span<const double>(weights));
  };
  core::Rng pick = core::make_rng(16, core::Stream::kEvaluation);
  const auto r = testkit::check_gradients(p, loss, 200, pick);
  EXPECT_GE(r.checked, 200u);
  EXPECT_LE(r.max_relative_error, 1e-4) << r.worst;
}

// Pre-LN residual identity: with zero attention and MLP output projections the
// block passes its input through unchanged.
TEST(Block, ZeroBranchesPassInputThrough) {
  core::Rng rng = core::make_rng(17, core::Stream::kInit);
  core::ParameterSet<double> p;
  const auto w = core::register_block(p, "b0", 6, 12, core::Init::kNormal, rng);
  for (auto* t : {&w.w_out, &w.b_out, &w.w_proj, &w.b_proj}) {
    auto copy = *t;
    for (auto& v : copy.data()) v = 0.0;
  }
  const auto x = random_tensor({4, 6}, rng);
  const std::vector<std::size_t> lengths{4};
  const auto y = core::transformer_block(x, w, 3, {lengths, true});
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(y[i], x[i]);
}

TEST(Block, ResidualStructure) {
  core::Rng rng = core::make_rng(18, core::Stream::kInit);
  core::ParameterSet<double> p;
  const auto w = core::register_block(p, "b0", 6, 12, core::Init::kNormal, rng);
  const auto x = random_tensor({4, 6}, rng);
  const std::vector<std::size_t> lengths{4};
  const core::AttentionLayout layout{lengths, true};
  const auto attn = core::linear(
      core::multi_head_attention(core::linear(core::layer_norm(x, w.ln1_gamma, w.ln1_beta),
                                              w.w_qkv, w.b_qkv),
                                 3, layout),
      w.w_out, w.b_out);
  const auto expected = core::feature_transform(core::add(attn, x), w);
  const auto y = core::transformer_block(x, w, 3, layout);
  for (std::size_t i = 0; i < y.size(); ++i) EXPECT_NEAR(y[i], expected[i], 1e-14);
}

TEST(Block, InitialisationFollowsConvention) {
  core::Rng rng = core::make_rng(19, core::Stream::kInit);
  core::ParameterSet<float> p;
  const auto w = core::register_block(p, "b0", 32, 64, core::Init::kNormal, rng);
  for (float v : w.b_qkv.data()) EXPECT_EQ(v, 0.0f);
  for (float v : w.ln1_gamma.data()) EXPECT_EQ(v, 1.0f);
  double ss = 0.0;
  for (float v : w.w_fc.data()) ss += double(v) * v;
  EXPECT_NEAR(std::sqrt(ss / static_cast<double>(w.w_fc.size())), 0.02, 0.002);
}

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
  core::ParameterSet<double> p;
  auto x = p.add("x", TD::from({3}, {1.0, -2.0, 0.5}, true));
  core::Adam<double> opt(p, {1e-2, 0.9, 0.999, 1e-8, 0.0});
  for (int k = 0; k < 5; ++k) {
    p.zero_grad();
    x.grad();
    opt.step();
  }
  EXPECT_EQ(x[0], 1.0);
  EXPECT_EQ(x[1], -2.0);
  EXPECT_EQ(x[2], 0.5);
  EXPECT_EQ(opt.state().step, 5u);
}

TEST(Adam, ScalarMatchesReferenceLoop) {
  const double g = 0.3, lr = 0.05, b1 = 0.9, b2 = 0.999, eps = 1e-8, wd = 0.01;
  core::ParameterSet<double> p;
  auto x = p.add("x", TD::from({1}, {2.0}, true));
  core::Adam<double> opt(p, {lr, b1, b2, eps, wd});
  double theta = 2.0, m = 0.0, v = 0.0;
  for (int k = 1; k <= 25; ++k) {
    p.zero_grad();
    x.grad()[0] = g;
    opt.step();
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    const double mhat = m / (1 - std::pow(b1, k)), vhat = v / (1 - std::pow(b2, k));
    theta -= lr * (mhat / (std::sqrt(vhat) + eps) + wd * theta);
    ASSERT_NEAR(x[0], theta, 1e-13) << "step " << k;
  }
}

TEST(Adam, IdenticalParametersStayIdentical) {
  core::Rng rng = core::make_rng(20, core::Stream::kEvaluation);
  core::ParameterSet<double> p;
  auto a = p.add("a", TD::from({2}, {0.4, -0.1}, true));
  auto b = p.add("b", TD::from({2}, {0.4, -0.1}, true));
  core::Adam<double> opt(p, {1e-2, 0.9, 0.999, 1e-8, 0.01});
  for (int k = 0; k < 50; ++k) {
    p.zero_grad();
    for (std::size_t i = 0; i < 2; ++i) a.grad()[i] = b.grad()[i] = core::uniform01(rng) - 0.5;
    opt.step();
    ASSERT_EQ(a[0], b[0]);
    ASSERT_EQ(a[1], b[1]);
  }
}

TEST(Adam, NonFiniteGradientRejectedWithoutChanges) {
  core::ParameterSet<double> p;
  auto a = p.add("a", TD::from({2}, {1.0, 2.0}, true));
  auto b = p.add("b", TD::from({1}, {3.0}, true));
  core::Adam<double> opt(p, {});
  a.grad()[0] = 0.1;
  b.grad()[0] = std::nan("");
  try {
    opt.step();
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("'b'"), std::string::npos);
  }
  EXPECT_EQ(a[0], 1.0);
  EXPECT_EQ(opt.state().step, 0u);
}

TEST(Adam, DeterministicAndStateRoundTrips) {
  const auto run = [](std::size_t split) {
    core::ParameterSet<double> p;
    auto& x = p.add("x", TD::from({3}, {0.1, 0.2, 0.3}, true));
    auto opt = std::make_unique<core::Adam<double>>(p, core::AdamConfig{1e-2, 0.9, 0.999, 1e-8, 0.0});
    for (std::size_t k = 0; k < 20; ++k) {
      if (k == split) {
        const auto saved = opt->state();
        opt = std::make_unique<core::Adam<double>>(p, core::AdamConfig{});
        opt->load_state(saved);
      }
      p.zero_grad();
      for (std::size_t i = 0; i < 3; ++i) x.grad()[i] = std::sin(double(k + i));
      opt->step();
    }
    return std::vector<double>(x.data().begin(), x.data().end());
  };
  EXPECT_EQ(run(100), run(100));
  EXPECT_EQ(run(7), run(100));
}

TEST(Random, DerivedStreamsDifferAndRoundTrip) {
  EXPECT_NE(core::derive_seed(1, core::Stream::kData), core::derive_seed(1, core::Stream::kInit));
  EXPECT_NE(core::derive_seed(1, core::Stream::kData, 0), core::derive_seed(1, core::Stream::kData, 1));
  EXPECT_NE(core::derive_seed(1, core::Stream::kData), core::derive_seed(2, core::Stream::kData));
  core::Rng rng = core::make_rng(5, core::Stream::kShuffle);
  rng.discard(17);
  core::Rng copy = core::deserialize_rng(core::serialize_rng(rng));
  for (int i = 0; i < 10; ++i) EXPECT_EQ(rng(), copy());
}

TEST(Random, UniformIndexIsUnbiased) {
  core::Rng rng = core::make_rng(6, core::Stream::kEvaluation);
  const std::size_t n = 6, draws = 60000;
  std::vector<std::size_t> counts(n, 0);
  for (std::size_t i = 0; i < draws; ++i) ++counts[core::uniform_index(rng, n)];
  const double expected = double(draws) / n, sigma = std::sqrt(draws * (1.0 / n) * (1 - 1.0 / n));
  for (auto c : counts) EXPECT_LT(std::abs(double(c) - expected), 4 * sigma);
}

TEST(Random, ShuffleIsAPermutation) {
  core::Rng rng = core::make_rng(7, core::Stream::kShuffle);
  std::vector<int> v(50);
  std::iota(v.begin(), v.end(), 0);
  core::shuffle(v, rng);
  auto sorted = v;
  std::sort(sorted.begin(), sorted.end());
  for (int i = 0; i < 50; ++i) EXPECT_EQ(sorted[i], i);
}
