#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <map>

#include "detox/core/error.hpp"
#include "detox/core/ops.hpp"
#include "detox/lm/generation.hpp"
#include "detox/lm/policy_lm.hpp"
#include "detox/lm/training.hpp"
#include "support.hpp"

using namespace detox;
using lm::PolicyLm;

namespace {

lm::LmConfig tiny_config(std::size_t vocab = 12) {
  lm::LmConfig c;
  c.vocab_size = vocab;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_model = 16;
  c.max_sequence_length = 32;
  return c;
}

template <typename T = double>
PolicyLm<T> tiny_model(std::uint64_t seed, std::size_t vocab = 12, double spread = 0.0) {
  core::Rng rng = core::make_rng(seed, core::Stream::kInit);
  PolicyLm<T> m(tiny_config(vocab), core::Init::kNormal, rng);
  // Larger weights make the distributions far from uniform.
  if (spread > 0.0) {
    for (auto& [name, t] : m.parameters()) {
      if (name.find("ln") != std::string::npos) continue;
      for (auto& v : t.data()) v += static_cast<T>(spread * (2.0 * core::uniform01(rng) - 1.0));
    }
  }
  return m;
}

std::vector<int> random_tokens(std::size_t n, std::size_t vocab, core::Rng& rng) {
  std::vector<int> out(n);
  for (auto& t : out) t = static_cast<int>(core::uniform_index(rng, vocab));
  return out;
}

double log_softmax_at(std::span<const double> logits, int token) {
  return logits[token] - core::log_sum_exp(logits);
}

// First-order chain over tokens 1..4 with token 0 as the start symbol.
const double kChain[5][5] = {
    {0.0, 0.5, 0.3, 0.2, 0.0},  {0.0, 0.1, 0.6, 0.2, 0.1}, {0.0, 0.4, 0.0, 0.3, 0.3},
    {0.0, 0.25, 0.25, 0.25, 0.25}, {0.0, 0.7, 0.1, 0.1, 0.1},
};

int chain_next(int prev, core::Rng& rng) {
  double u = core::uniform01(rng), acc = 0.0;
  for (int k = 1; k < 5; ++k) {
    acc += kChain[prev][k];
    if (u < acc) return k;
  }
  return 4;
}

}  // namespace

TEST(LmConfig, Validation) {
  auto c = tiny_config();
  EXPECT_NO_THROW(c.validate());
  c.n_heads = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny_config();
  c.max_sequence_length = 20;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(TokenSequence, Validation) {
  EXPECT_THROW((lm::TokenSequence{{1, 2}, 3}).validate(10), DataError);
  EXPECT_THROW((lm::TokenSequence{{1, 12}, 1}).validate(10), DataError);
  EXPECT_NO_THROW((lm::TokenSequence{{1, 9}, 2}).validate(10));
}

TEST(PolicyLm, ZeroModelIsUniform) {
  core::Rng rng = core::make_rng(1, core::Stream::kInit);
  const PolicyLm<double> m(tiny_config(50), core::Init::kZeros, rng);
  const std::vector<int> prefix{3, 7, 1};
  const auto logits = m.next_token_logits(prefix);
  for (double z : logits) EXPECT_NEAR(z - logits[0], 0.0, 1e-15);

  const lm::Corpus corpus{{0, 5, 9, 11, 2}, {0, 1, 2}};
  EXPECT_NEAR(lm::perplexity(m, corpus), 50.0, 1e-9);
  EXPECT_NEAR(lm::mean_nll(m, corpus), std::log(50.0), 1e-12);
  const lm::TokenSequence seq{{4, 4, 8, 2, 6}, 2};
  const auto lp = lm::sequence_log_prob(m, seq);
  double total = 0.0;
  for (double v : lp) total += v;
  EXPECT_NEAR(total, -3.0 * std::log(50.0), 1e-12);
}

TEST(PolicyLm, IdenticalPrefixesGiveIdenticalLogits) {
  const auto m = tiny_model(2);
  const std::vector<int> prefix{1, 5, 3};
  EXPECT_EQ(m.next_token_logits(prefix), m.next_token_logits(prefix));
}

TEST(PolicyLm, OverlengthThrowsContextError) {
  const auto m = tiny_model(3);
  std::vector<int> prefix(33, 1);
  EXPECT_THROW(m.next_token_logits(prefix), ContextError);
  const std::vector<std::vector<int>> docs{std::vector<int>(33, 2)};
  EXPECT_THROW(m.forward(lm::PackedBatch::from(docs)), ContextError);
}

TEST(PolicyLm, PackedBatchEqualsSeparateForwards) {
  const auto m = tiny_model(4, 12, 0.2);
  core::Rng rng = core::make_rng(4, core::Stream::kData);
  std::vector<std::vector<int>> seqs;
  for (std::size_t len : {5u, 1u, 9u}) seqs.push_back(random_tokens(len, 12, rng));
  const auto packed = m.forward(lm::PackedBatch::from(seqs));
  std::size_t offset = 0;
  for (const auto& s : seqs) {
    const auto single = m.forward(lm::PackedBatch::from(std::span(&s, 1)));
    for (std::size_t i = 0; i < single.size(); ++i) {
      ASSERT_NEAR(packed[offset * 12 + i], single[i], 1e-12);
    }
    offset += s.size();
  }
}

TEST(PolicyLm, KvCacheMatchesFullForward) {
  const auto m = tiny_model(5, 12, 0.2);
  core::Rng rng = core::make_rng(5, core::Stream::kData);
  const auto a = random_tokens(10, 12, rng), b = random_tokens(10, 12, rng);
  const std::vector<std::vector<int>> both{a, b};
  const auto full_a = m.forward(lm::PackedBatch::from(std::span(&both[0], 1)));
  const auto full_b = m.forward(lm::PackedBatch::from(std::span(&both[1], 1)));
  lm::DecodeSession<double> session(m, 2);
  for (std::size_t t = 0; t < 10; ++t) {
    const std::vector<int> feed{a[t], b[t]};
    const auto& logits = session.step(feed);
    for (std::size_t v = 0; v < 12; ++v) {
      ASSERT_NEAR(logits[v], full_a[t * 12 + v], 1e-12);
      ASSERT_NEAR(logits[12 + v], full_b[t * 12 + v], 1e-12);
    }
  }
  EXPECT_EQ(session.position(), 10u);
}

TEST(PolicyLm, SuffixPerturbationLeavesPrefixDistributionsUnchanged) {
  const auto m = tiny_model(6, 12, 0.2);
  core::Rng rng = core::make_rng(6, core::Stream::kData);
  auto seq = random_tokens(12, 12, rng);
  const auto base = m.forward(lm::PackedBatch::from(std::span(&seq, 1)));
  for (std::size_t t = 0; t + 1 < seq.size(); ++t) {
    auto changed = seq;
    for (std::size_t k = t + 1; k < seq.size(); ++k) changed[k] = (changed[k] + 5) % 12;
    const auto out = m.forward(lm::PackedBatch::from(std::span(&changed, 1)));
    for (std::size_t i = 0; i < (t + 1) * 12; ++i) ASSERT_EQ(out[i], base[i]);
  }
}

TEST(PolicyLm, CopyIsDeep) {
  auto a = tiny_model(7);
  auto b = a;
  b.parameters().at("wte")[0] += 1.0;
  EXPECT_NE(a.parameters().at("wte")[0], b.parameters().at("wte")[0]);
}

TEST(PolicyLm, GradientsMatchFiniteDifferences) {
  auto m = tiny_model(8, 12, 0.1);
  core::Rng rng = core::make_rng(8, core::Stream::kData);
  const std::vector<std::vector<int>> docs{random_tokens(7, 12, rng), random_tokens(4, 12, rng)};
  const auto loss = [&] { return lm::nll_loss(m, std::span(docs)); };
  core::Rng pick = core::make_rng(9, core::Stream::kEvaluation);
  const auto r = testkit::check_gradients(m.parameters(), loss, 200, pick);
  EXPECT_GE(r.checked, 200u);
  EXPECT_LE(r.max_relative_error, 1e-4) << r.worst;
}

TEST(SequenceLogProb, MatchesStepwiseOracle) {
  const auto m = tiny_model(10, 12, 0.2);
  const lm::TokenSequence seq{{2, 7, 1, 1, 9, 4, 0}, 3};
  const auto lp = lm::sequence_log_prob(m, seq);
  ASSERT_EQ(lp.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) {
    const std::vector<int> prefix(seq.tokens.begin(), seq.tokens.begin() + 3 + i);
    const auto logits = m.next_token_logits(prefix);
    EXPECT_NEAR(lp[i], log_softmax_at(logits, seq.tokens[3 + i]), 1e-12);
  }
  EXPECT_EQ(lm::sequence_log_prob(m, seq), lp);
  const std::vector<lm::TokenSequence> many{seq, {{5, 5}, 1}};
  const auto batch = lm::sequence_log_probs(m, std::span(many));
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(batch[0][i], lp[i], 1e-12);
}

TEST(Perplexity, MatchesIndependentOracle) {
  const auto m = tiny_model(11, 12, 0.3);
  core::Rng rng = core::make_rng(11, core::Stream::kData);
  const lm::Corpus corpus{random_tokens(9, 12, rng), random_tokens(5, 12, rng)};
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& doc : corpus) {
    for (std::size_t t = 1; t < doc.size(); ++t) {
      const std::vector<int> prefix(doc.begin(), doc.begin() + t);
      total += -log_softmax_at(m.next_token_logits(prefix), doc[t]);
      ++count;
    }
  }
  EXPECT_NEAR(lm::perplexity(m, corpus), std::exp(total / count), 1e-9);
}

TEST(Nucleus, ExampleDistribution) {
  const std::vector<double> probs{0.6, 0.35, 0.05};
  EXPECT_EQ(lm::nucleus_indices(probs, 0.9), (std::vector<std::size_t>{0, 1}));
  const auto d = lm::nucleus_distribution(probs, 0.9);
  EXPECT_NEAR(d[0], 0.6316, 5e-5);
  EXPECT_NEAR(d[1], 0.3684, 5e-5);
  EXPECT_EQ(d[2], 0.0);
  EXPECT_EQ(lm::nucleus_indices(probs, 1.0).size(), 3u);
  EXPECT_EQ(lm::nucleus_indices(probs, 1e-9), (std::vector<std::size_t>{0}));
}

TEST(Nucleus, EmittedTokensLieInTheNucleus) {
  core::Rng rng = core::make_rng(12, core::Stream::kSampling);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> logits(10);
    for (auto& z : logits) z = 4.0 * core::uniform01(rng);
    const double p = 0.05 + 0.9 * core::uniform01(rng);
    const auto probs = lm::tempered_probabilities<double>(logits, 1.0);
    const auto nucleus = lm::nucleus_indices(probs, p);
    double mass = 0.0;
    for (auto i : nucleus) mass += probs[i];
    EXPECT_GE(mass + 1e-12, p);
    for (int k = 0; k < 20; ++k) {
      const int tok = lm::sample_nucleus_token<double>(logits, p, 1.0, rng);
      ASSERT_NE(std::find(nucleus.begin(), nucleus.end(), static_cast<std::size_t>(tok)),
                nucleus.end());
    }
  }
}

TEST(Nucleus, EmpiricalFrequenciesWithinThreeSigma) {
  const std::vector<double> probs{0.4, 0.25, 0.15, 0.1, 0.06, 0.04};
  std::vector<double> logits;
  for (double p : probs) logits.push_back(std::log(p));
  const auto target = lm::nucleus_distribution(probs, 0.9);
  core::Rng rng = core::make_rng(13, core::Stream::kSampling);
  const std::size_t n = 100000;
  std::vector<std::size_t> counts(probs.size(), 0);
  for (std::size_t i = 0; i < n; ++i) {
    ++counts[lm::sample_nucleus_token<double>(logits, 0.9, 1.0, rng)];
  }
  for (std::size_t k = 0; k < probs.size(); ++k) {
    const double sigma = std::sqrt(n * target[k] * (1.0 - target[k]));
    EXPECT_LE(std::abs(static_cast<double>(counts[k]) - n * target[k]), 3.0 * sigma + 1e-9)
        << "token " << k;
  }
  EXPECT_EQ(counts[4] + counts[5], 0u);
}

TEST(Nucleus, TemperatureAppliesBeforeTruncation) {
  const std::vector<double> logits{2.0, 1.0, 0.0};
  const auto hot = lm::tempered_probabilities<double>(logits, 4.0);
  const double z = std::exp(0.5) + std::exp(0.25) + 1.0;
  EXPECT_NEAR(hot[0], std::exp(0.5) / z, 1e-15);
  // At T = 4 the top two hold less than 0.9 of the mass, so all three survive.
  EXPECT_EQ(lm::nucleus_indices(hot, 0.9).size(), 3u);
  EXPECT_EQ(lm::nucleus_indices(lm::tempered_probabilities<double>(logits, 1.0), 0.9).size(), 2u);
}

TEST(Generation, ParamsValidation) {
  lm::GenerationParams g;
  EXPECT_NO_THROW(g.validate());
  g.top_p = 0.0;
  EXPECT_THROW(g.validate(), ConfigError);
  g = {};
  g.top_p = 1.5;
  EXPECT_THROW(g.validate(), ConfigError);
  g = {};
  g.num_samples = 0;
  EXPECT_THROW(g.validate(), ConfigError);
  g = {};
  g.temperature = 0.0;
  EXPECT_THROW(g.validate(), ConfigError);
}

TEST(Greedy, TiesBreakTowardLowestId) {
  EXPECT_EQ(lm::argmax_token<double>(std::vector<double>{0.1, 0.7, 0.7, 0.2}), 1);
  EXPECT_EQ(lm::argmax_token<float>(std::vector<float>{3.0f, 3.0f}), 0);
}

TEST(Greedy, EachTokenIsArgmaxAndSeedInvariant) {
  const auto m = tiny_model(14, 12, 0.3);
  const lm::TokenSequence prompt{{3, 1, 4}, 3};
  const auto g = lm::decode_greedy(m, prompt, 8);
  ASSERT_EQ(g.continuation().size(), 8u);
  for (std::size_t i = 0; i < 8; ++i) {
    const std::vector<int> prefix(g.sequence.tokens.begin(), g.sequence.tokens.begin() + 3 + i);
    const auto logits = m.next_token_logits(prefix);
    EXPECT_EQ(g.sequence.tokens[3 + i], lm::argmax_token<double>(logits));
    EXPECT_NEAR(g.token_log_probs[i], log_softmax_at(logits, g.sequence.tokens[3 + i]), 1e-12);
  }
  EXPECT_EQ(lm::decode_greedy(m, prompt, 8).sequence.tokens, g.sequence.tokens);
}

TEST(Greedy, CoincidesWithTinyNucleus) {
  const auto m = tiny_model(15, 12, 0.3);
  const lm::TokenSequence prompt{{2, 2}, 2};
  const auto g = lm::decode_greedy(m, prompt, 10);
  lm::GenerationParams p;
  p.top_p = 1e-9;
  p.max_new_tokens = 10;
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    core::Rng rng = core::make_rng(seed, core::Stream::kSampling);
    EXPECT_EQ(lm::sample_nucleus(m, prompt, p, rng)[0].sequence.tokens, g.sequence.tokens);
  }
}

TEST(Greedy, SingleTokenPerturbationNeverBeatsGreedyStep) {
  const auto m = tiny_model(16, 12, 0.3);
  const lm::TokenSequence prompt{{5, 0, 7}, 3};
  const auto g = lm::decode_greedy(m, prompt, 6);
  const auto base = lm::sequence_log_prob(m, g.sequence);
  for (std::size_t i = 0; i < 6; ++i) {
    for (int v = 0; v < 12; ++v) {
      auto changed = g.sequence;
      changed.tokens[3 + i] = v;
      EXPECT_LE(lm::sequence_log_prob(m, changed)[i], base[i] + 1e-12);
    }
  }
}

TEST(Sampling, ReproducibleAndStopsAtEndToken) {
  const auto m = tiny_model(17, 12, 0.3);
  const lm::TokenSequence prompt{{1}, 1};
  lm::GenerationParams p;
  p.num_samples = 5;
  p.max_new_tokens = 12;
  core::Rng a = core::make_rng(3, core::Stream::kSampling), b = a;
  const auto x = lm::sample_nucleus(m, prompt, p, a);
  const auto y = lm::sample_nucleus(m, prompt, p, b);
  ASSERT_EQ(x.size(), 5u);
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_EQ(x[i].sequence.tokens, y[i].sequence.tokens);
    // Log-probs are untruncated and untempered.
    const auto lp = lm::sequence_log_prob(m, x[i].sequence);
    for (std::size_t k = 0; k < lp.size(); ++k) EXPECT_NEAR(x[i].token_log_probs[k], lp[k], 1e-12);
  }
  p.end_token = x[0].continuation()[0];
  core::Rng c = core::make_rng(3, core::Stream::kSampling);
  const auto z = lm::sample_nucleus(m, prompt, p, c);
  EXPECT_EQ(z[0].continuation().size(), 1u);
}

TEST(Training, EmptyCorpusIsDataError) {
  EXPECT_THROW(lm::prepare_corpus({}, 32), DataError);
  EXPECT_THROW(lm::prepare_corpus({{0}}, 32), DataError);
  const auto c = lm::prepare_corpus({{0}, {0, 1, 2, 3}}, 3);
  ASSERT_EQ(c.size(), 1u);
  EXPECT_EQ(c[0].size(), 3u);
}

TEST(Training, MemorisesAlternatingCorpus) {
  core::Rng init = core::make_rng(18, core::Stream::kInit);
  PolicyLm<float> m(tiny_config(4), core::Init::kNormal, init);
  std::vector<int> doc{0};
  for (int i = 0; i < 20; ++i) doc.push_back(i % 2 == 0 ? 1 : 2);  // "a b a b ..."
  const lm::Corpus corpus{doc};
  lm::NllConfig cfg;
  cfg.steps = 150;
  cfg.batch_size = 4;
  cfg.adam.learning_rate = 1e-2;
  cfg.eval_every = 0;
  const auto curve = lm::pretrain_nll(m, corpus, corpus, cfg, core::make_rng(18, core::Stream::kShuffle));
  EXPECT_LT(curve.back().train_nll, 0.05);
  const std::vector<int> after_a{0, 1};
  EXPECT_EQ(lm::argmax_token<float>(m.next_token_logits(after_a)), 2);

  // Smoothed training NLL is non-increasing over 10-step windows.
  double previous = 1e9;
  for (std::size_t w = 0; w + 10 <= curve.size(); w += 10) {
    double mean = 0.0;
    for (std::size_t i = w; i < w + 10; ++i) mean += curve[i].train_nll;
    mean /= 10.0;
    EXPECT_LE(mean, previous + 1e-6) << "window at step " << w;
    previous = mean;
  }
}

TEST(Training, UntrainedHeldoutNllNearLogV) {
  const auto m = tiny_model<float>(19, 12);
  core::Rng rng = core::make_rng(19, core::Stream::kData);
  lm::Corpus corpus;
  for (int i = 0; i < 10; ++i) corpus.push_back(random_tokens(16, 12, rng));
  EXPECT_NEAR(lm::mean_nll(m, corpus), std::log(12.0), 0.05);
}

TEST(Training, BigramFrequenciesMatchGenerator) {
  core::Rng data = core::make_rng(20, core::Stream::kData);
  const auto sample_chain = [&](std::size_t length) {
    std::vector<int> doc{0};
    for (std::size_t i = 0; i < length; ++i) doc.push_back(chain_next(doc.back(), data));
    return doc;
  };
  lm::Corpus train;
  for (int i = 0; i < 2000; ++i) train.push_back(sample_chain(24));

  core::Rng init = core::make_rng(20, core::Stream::kInit);
  lm::LmConfig cfg = tiny_config(5);
  cfg.n_layers = 1;
  PolicyLm<float> m(cfg, core::Init::kNormal, init);
  lm::NllConfig nll;
  nll.steps = 400;
  nll.batch_size = 16;
  nll.adam.learning_rate = 5e-3;
  nll.eval_every = 0;
  lm::pretrain_nll(m, train, train, nll, core::make_rng(20, core::Stream::kShuffle));

  // 100k tokens from the model and from the generator, counted as bigrams.
  const std::size_t per_doc = 25, docs = 4000;
  std::map<std::pair<int, int>, double> model_counts, gen_counts;
  lm::GenerationParams p;
  p.top_p = 1.0;
  p.max_new_tokens = per_doc;
  p.num_samples = docs;
  core::Rng sampling = core::make_rng(20, core::Stream::kSampling);
  for (const auto& g : lm::sample_nucleus(m, {{0}, 1}, p, sampling)) {
    const auto& t = g.sequence.tokens;
    for (std::size_t i = 1; i < t.size(); ++i) model_counts[{t[i - 1], t[i]}] += 1.0;
  }
  for (std::size_t d = 0; d < docs; ++d) {
    const auto t = sample_chain(per_doc);
    for (std::size_t i = 1; i < t.size(); ++i) gen_counts[{t[i - 1], t[i]}] += 1.0;
  }
  const double total = static_cast<double>(per_doc * docs);
  double tv = 0.0;
  std::map<std::pair<int, int>, bool> keys;
  for (const auto& [k, v] : model_counts) keys[k] = true;
  for (const auto& [k, v] : gen_counts) keys[k] = true;
  for (const auto& [k, unused] : keys) tv += std::abs(model_counts[k] - gen_counts[k]) / total;
  EXPECT_LT(0.5 * tv, 0.05);
}

TEST(Training, ResumeMatchesUninterrupted) {
  core::Rng data = core::make_rng(21, core::Stream::kData);
  lm::Corpus corpus;
  for (int i = 0; i < 30; ++i) corpus.push_back(random_tokens(10, 12, data));
  lm::NllConfig cfg;
  cfg.steps = 20;
  cfg.batch_size = 4;
  cfg.eval_every = 0;
  const auto start = tiny_model<float>(21);

  auto full = start;
  lm::NllTrainer<float> a(full, corpus, cfg, core::make_rng(21, core::Stream::kShuffle));
  a.run();

  auto part = start;
  lm::NllTrainer<float> b(part, corpus, cfg, core::make_rng(21, core::Stream::kShuffle));
  for (int i = 0; i < 8; ++i) b.train_step();
  auto resumed = start;
  resumed.parameters().copy_values_from(part.parameters());
  lm::NllTrainer<float> c(resumed, corpus, cfg, core::make_rng(999, core::Stream::kShuffle));
  c.restore(8, b.rng(), b.optimizer().state());
  c.run();
  EXPECT_EQ(c.step(), 20u);
  for (const auto& [name, t] : full.parameters()) {
    const auto& r = resumed.parameters().at(name);
    ASSERT_TRUE(std::equal(t.data().begin(), t.data().end(), r.data().begin())) << name;
  }
}
