#include "detox/lm/training.hpp"

#include <cmath>
#include <string>

#include "detox/core/error.hpp"
#include "detox/core/ops.hpp"

namespace detox::lm {

using core::Tensor;

Corpus prepare_corpus(const Corpus& documents, std::size_t max_sequence_length) {
  Corpus out;
  out.reserve(documents.size());
  for (const auto& doc : documents) {
    if (doc.size() < 2) continue;
    const std::size_t n = std::min(doc.size(), max_sequence_length);
    out.emplace_back(doc.begin(), doc.begin() + static_cast<std::ptrdiff_t>(n));
  }
  if (out.empty()) throw DataError("corpus: no document with at least two tokens");
  return out;
}

namespace {

struct NllBatch {
  PackedBatch batch;
  std::vector<std::size_t> rows;
  std::vector<int> targets;
};

NllBatch make_nll_batch(std::span<const std::vector<int>> docs) {
  NllBatch b;
  std::size_t offset = 0;
  for (const auto& doc : docs) {
    b.batch.append(doc);
    for (std::size_t t = 0; t + 1 < doc.size(); ++t) {
      b.rows.push_back(offset + t);
      b.targets.push_back(doc[t + 1]);
    }
    offset += doc.size();
  }
  return b;
}

}  // namespace

template <typename T>
Tensor<T> nll_loss(const PolicyLm<T>& model, std::span<const std::vector<int>> docs) {
  NllBatch b = make_nll_batch(docs);
  if (b.rows.empty()) throw DataError("nll: batch has no predicted tokens");
  Tensor<T> hidden = core::select_rows(model.hidden_states(b.batch), b.rows);
  Tensor<T> logits = core::matmul_transposed(hidden, model.head());
  return core::softmax_cross_entropy(logits, b.targets);
}

template <typename T>
NllTrainer<T>::NllTrainer(PolicyLm<T>& model, Corpus corpus, NllConfig config, core::Rng rng)
    : model_(&model),
      corpus_(prepare_corpus(corpus, model.config().max_sequence_length)),
      config_(config),
      rng_(std::move(rng)),
      optimizer_(model.parameters(), config.adam) {
  if (config_.batch_size == 0) throw ConfigError("nll training: batch_size must be positive");
}

template <typename T>
double NllTrainer<T>::train_step() {
  std::vector<std::vector<int>> docs;
  docs.reserve(config_.batch_size);
  for (std::size_t i = 0; i < config_.batch_size; ++i) {
    docs.push_back(corpus_[core::uniform_index(rng_, corpus_.size())]);
  }
  model_->parameters().zero_grad();
  Tensor<T> loss = nll_loss(*model_, docs);
  if (!std::isfinite(static_cast<double>(loss.item()))) {
    throw NumericalError("nll training: non-finite loss at step " + std::to_string(step_ + 1));
  }
  loss.backward();
  optimizer_.step();
  ++step_;
  return static_cast<double>(loss.item());
}

template <typename T>
std::vector<LossPoint> NllTrainer<T>::run(const Corpus* heldout) {
  std::vector<LossPoint> curve;
  while (step_ < config_.steps) {
    LossPoint point;
    point.train_nll = train_step();
    point.step = step_;
    if (heldout && config_.eval_every > 0 &&
        (step_ % config_.eval_every == 0 || step_ == config_.steps)) {
      point.heldout_nll = mean_nll(*model_, *heldout);
    }
    curve.push_back(point);
  }
  return curve;
}

template <typename T>
void NllTrainer<T>::restore(std::size_t step, core::Rng rng,
                            core::OptimizerState<T> optimizer_state) {
  step_ = step;
  rng_ = std::move(rng);
  optimizer_.load_state(std::move(optimizer_state));
}

template <typename T>
std::vector<LossPoint> pretrain_nll(PolicyLm<T>& model, const Corpus& train, const Corpus& heldout,
                                    const NllConfig& config, core::Rng rng) {
  if (train.empty()) throw DataError("pretrain: empty corpus");
  NllTrainer<T> trainer(model, train, config, std::move(rng));
  const Corpus held = heldout.empty() ? Corpus{} : prepare_corpus(heldout, model.config().max_sequence_length);
  return trainer.run(held.empty() ? nullptr : &held);
}

namespace {

// Sum of next-token NLL and number of predicted tokens.
template <typename T>
std::pair<double, std::size_t> nll_total(const PolicyLm<T>& model, const Corpus& corpus) {
  core::NoGradGuard no_grad;
  const Corpus docs = prepare_corpus(corpus, model.config().max_sequence_length);
  const std::size_t v = model.config().vocab_size;
  double total = 0.0;
  std::size_t count = 0;
  constexpr std::size_t kChunk = 64;
  for (std::size_t start = 0; start < docs.size(); start += kChunk) {
    const std::size_t end = std::min(docs.size(), start + kChunk);
    NllBatch b = make_nll_batch(std::span(docs).subspan(start, end - start));
    Tensor<T> logits = model.forward(b.batch);
    for (std::size_t i = 0; i < b.rows.size(); ++i) {
      std::span<const T> row(logits.raw() + b.rows[i] * v, v);
      total -= static_cast<double>(row[static_cast<std::size_t>(b.targets[i])]) -
               static_cast<double>(core::log_sum_exp(row));
      ++count;
    }
  }
  return {total, count};
}

}  // namespace

template <typename T>
double mean_nll(const PolicyLm<T>& model, const Corpus& corpus) {
  if (corpus.empty()) throw DataError("nll: empty corpus");
  auto [total, count] = nll_total(model, corpus);
  return total / static_cast<double>(count);
}

template <typename T>
double perplexity(const PolicyLm<T>& model, const Corpus& corpus) {
  return std::exp(mean_nll(model, corpus));
}

template <typename T>
std::vector<std::vector<double>> sequence_log_probs(const PolicyLm<T>& model,
                                                    std::span<const TokenSequence> sequences) {
  core::NoGradGuard no_grad;
  const std::size_t v = model.config().vocab_size;
  PackedBatch batch;
  for (const auto& s : sequences) {
    s.validate(v);
    if (s.prompt_len == 0) throw ContextError("sequence_log_prob: prompt must be nonempty");
    batch.append(s.tokens);
  }
  std::vector<std::vector<double>> out(sequences.size());
  if (batch.total() == 0) return out;
  Tensor<T> logits = model.forward(batch);
  std::size_t offset = 0;
  for (std::size_t i = 0; i < sequences.size(); ++i) {
    const auto& s = sequences[i];
    for (std::size_t t = s.prompt_len; t < s.tokens.size(); ++t) {
      std::span<const T> row(logits.raw() + (offset + t - 1) * v, v);
      out[i].push_back(static_cast<double>(row[static_cast<std::size_t>(s.tokens[t])]) -
                       static_cast<double>(core::log_sum_exp(row)));
    }
    offset += s.tokens.size();
  }
  return out;
}

template <typename T>
std::vector<double> sequence_log_prob(const PolicyLm<T>& model, const TokenSequence& sequence) {
  return sequence_log_probs(model, std::span(&sequence, 1)).front();
}

#define DETOX_INSTANTIATE_TRAINING(T)                                                        \
  template class NllTrainer<T>;                                                              \
  template Tensor<T> nll_loss(const PolicyLm<T>&, std::span<const std::vector<int>>);        \
  template std::vector<LossPoint> pretrain_nll(PolicyLm<T>&, const Corpus&, const Corpus&,  \
                                               const NllConfig&, core::Rng);                 \
  template double mean_nll(const PolicyLm<T>&, const Corpus&);                               \
  template double perplexity(const PolicyLm<T>&, const Corpus&);                             \
  template std::vector<double> sequence_log_prob(const PolicyLm<T>&, const TokenSequence&);  \
  template std::vector<std::vector<double>> sequence_log_probs(const PolicyLm<T>&,           \
                                                               std::span<const TokenSequence>);

DETOX_INSTANTIATE_TRAINING(float)
DETOX_INSTANTIATE_TRAINING(double)

#undef DETOX_INSTANTIATE_TRAINING

}  // namespace detox::lm
