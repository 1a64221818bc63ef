#include "detox/lm/generation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "detox/core/error.hpp"

namespace detox::lm {

void GenerationParams::validate() const {
  if (!(top_p > 0.0 && top_p <= 1.0)) throw ConfigError("generation: top_p must lie in (0, 1]");
  if (!(temperature > 0.0)) throw ConfigError("generation: temperature must be positive");
  if (num_samples < 1) throw ConfigError("generation: num_samples must be at least 1");
}

std::vector<std::size_t> nucleus_indices(std::span<const double> probs, double top_p) {
  std::vector<std::size_t> order(probs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return probs[a] > probs[b]; });
  if (top_p >= 1.0) return order;
  double cumulative = 0.0;
  std::size_t keep = 0;
  while (keep < order.size()) {
    cumulative += probs[order[keep++]];
    if (cumulative >= top_p) break;
  }
  order.resize(std::max<std::size_t>(keep, 1));
  return order;
}

std::vector<double> nucleus_distribution(std::span<const double> probs, double top_p) {
  const auto kept = nucleus_indices(probs, top_p);
  double mass = 0.0;
  for (auto i : kept) mass += probs[i];
  std::vector<double> out(probs.size(), 0.0);
  for (auto i : kept) out[i] = probs[i] / mass;
  return out;
}

template <typename T>
std::vector<double> tempered_probabilities(std::span<const T> logits, double temperature) {
  std::vector<double> probs(logits.size());
  double m = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < logits.size(); ++i) {
    probs[i] = static_cast<double>(logits[i]) / temperature;
    m = std::max(m, probs[i]);
  }
  double total = 0.0;
  for (auto& p : probs) {
    p = std::exp(p - m);
    total += p;
  }
  for (auto& p : probs) p /= total;
  return probs;
}

template <typename T>
int sample_nucleus_token(std::span<const T> logits, double top_p, double temperature,
                         core::Rng& rng) {
  const auto probs = tempered_probabilities(logits, temperature);
  const auto kept = nucleus_indices(probs, top_p);
  double mass = 0.0;
  for (auto i : kept) mass += probs[i];
  const double u = core::uniform01(rng) * mass;
  double cumulative = 0.0;
  for (auto i : kept) {
    cumulative += probs[i];
    if (u < cumulative) return static_cast<int>(i);
  }
  return static_cast<int>(kept.back());
}

template <typename T>
int argmax_token(std::span<const T> logits) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < logits.size(); ++i)
    if (logits[i] > logits[best]) best = i;
  return static_cast<int>(best);
}

template <typename T>
double token_log_prob(std::span<const T> logits, int token) {
  double m = -std::numeric_limits<double>::infinity();
  for (T z : logits) m = std::max(m, static_cast<double>(z));
  double total = 0.0;
  for (T z : logits) total += std::exp(static_cast<double>(z) - m);
  return static_cast<double>(logits[static_cast<std::size_t>(token)]) - m - std::log(total);
}

namespace {

template <typename T, typename Choose>
std::vector<Generation> decode_lockstep(const PolicyLm<T>& model, const TokenSequence& prompt,
                                        std::size_t rows, std::size_t max_new_tokens,
                                        int end_token, Choose&& choose) {
  const auto& config = model.config();
  prompt.validate(config.vocab_size);
  const std::size_t plen = prompt.tokens.size();
  if (plen == 0) throw ContextError("generation: empty prompt");
  if (plen + max_new_tokens > config.max_sequence_length) {
    throw ContextError("generation: prompt of " + std::to_string(plen) + " tokens plus " +
                       std::to_string(max_new_tokens) + " new tokens exceeds context of " +
                       std::to_string(config.max_sequence_length));
  }
  std::vector<Generation> out(rows);
  for (auto& g : out) {
    g.sequence.tokens = prompt.tokens;
    g.sequence.prompt_len = plen;
  }
  if (max_new_tokens == 0) return out;

  DecodeSession<T> session(model, rows);
  std::vector<int> feed(rows);
  const core::Buffer<T>* logits = nullptr;
  for (std::size_t i = 0; i < plen; ++i) {
    std::fill(feed.begin(), feed.end(), prompt.tokens[i]);
    logits = &session.step(feed);
  }
  std::vector<bool> done(rows, false);
  const std::size_t v = config.vocab_size;
  for (std::size_t n = 0; n < max_new_tokens; ++n) {
    for (std::size_t r = 0; r < rows; ++r) {
      if (done[r]) {
        feed[r] = std::max(end_token, 0);
        continue;
      }
      std::span<const T> row(logits->data() + r * v, v);
      const int token = choose(row, r);
      out[r].sequence.tokens.push_back(token);
      out[r].token_log_probs.push_back(token_log_prob(row, token));
      feed[r] = token;
      if (token == end_token) done[r] = true;
    }
    if (std::all_of(done.begin(), done.end(), [](bool b) { return b; })) break;
    if (n + 1 < max_new_tokens) logits = &session.step(feed);
  }
  return out;
}

}  // namespace

template <typename T>
std::vector<Generation> sample_nucleus(const PolicyLm<T>& model, const TokenSequence& prompt,
                                       const GenerationParams& params, core::Rng& rng) {
  params.validate();
  return decode_lockstep(model, prompt, params.num_samples, params.max_new_tokens,
                         params.end_token, [&](std::span<const T> row, std::size_t) {
                           return sample_nucleus_token(row, params.top_p, params.temperature,
                                                       rng);
                         });
}

template <typename T>
Generation decode_greedy(const PolicyLm<T>& model, const TokenSequence& prompt,
                         std::size_t max_new_tokens, int end_token) {
  auto out = decode_lockstep(model, prompt, 1, max_new_tokens, end_token,
                             [](std::span<const T> row, std::size_t) { return argmax_token(row); });
  return std::move(out.front());
}

#define DETOX_INSTANTIATE_GENERATION(T)                                                       \
  template std::vector<double> tempered_probabilities(std::span<const T>, double);           \
  template int sample_nucleus_token(std::span<const T>, double, double, core::Rng&);         \
  template int argmax_token(std::span<const T>);                                             \
  template double token_log_prob(std::span<const T>, int);                                   \
  template std::vector<Generation> sample_nucleus(const PolicyLm<T>&, const TokenSequence&,  \
                                                  const GenerationParams&, core::Rng&);      \
  template Generation decode_greedy(const PolicyLm<T>&, const TokenSequence&, std::size_t, int);

DETOX_INSTANTIATE_GENERATION(float)
DETOX_INSTANTIATE_GENERATION(double)

#undef DETOX_INSTANTIATE_GENERATION

}  // namespace detox::lm
