#include "detox/data/run_config.hpp"

#include <cerrno>
#include <charconv>
#include <csignal>
#include <fstream>
#include <sstream>

#include <fcntl.h>
#include <unistd.h>

#include "detox/core/error.hpp"

namespace detox::data {

const std::vector<ConfigKey>& config_registry() {
  static const std::vector<ConfigKey> keys = {
      {"seed", "1", ConfigType::kInt, "master seed; data, init, sampling and evaluation streams derive from it"},

      {"data.clean_words", "120", ConfigType::kInt, "size of the clean word list"},
      {"data.successors", "5", ConfigType::kInt, "out-degree of the clean bigram chain"},
      {"data.markers_per_subtype", "3", ConfigType::kInt, "marker words per toxicity subtype"},
      {"data.min_words", "12", ConfigType::kInt, "shortest document"},
      {"data.max_words", "28", ConfigType::kInt, "longest document"},
      {"data.toxic_rate", "0.25", ConfigType::kReal, "toxic document rate without identity mentions"},
      {"data.identity_rate", "0.3", ConfigType::kReal, "rate of documents mentioning an identity"},
      {"data.identity_toxic_rate", "0.45", ConfigType::kReal, "toxic rate of documents mentioning an identity"},
      {"data.marker_rate", "0.25", ConfigType::kReal, "marker probability per word once a document turns toxic"},
      {"data.identity_labeled_fraction", "0.5", ConfigType::kReal, "share of labeled documents with identity fields"},
      {"data.pretrain_docs", "8000", ConfigType::kInt, "pretraining documents"},
      {"data.heldout_docs", "500", ConfigType::kInt, "held-out documents for perplexity"},
      {"data.mtl_train_docs", "6000", ConfigType::kInt, "labeled classifier training documents"},
      {"data.mtl_test_docs", "1500", ConfigType::kInt, "labeled classifier test documents"},
      {"data.train_prompts", "1000", ConfigType::kInt, "prompts for policy optimization (half toxic)"},
      {"data.test_prompts_per_split", "100", ConfigType::kInt, "held-out toxic and nontoxic prompts, each"},
      {"data.identity_prompts_per_group", "25", ConfigType::kInt, "identity-grouped prompts per group"},
      {"data.min_prompt_words", "5", ConfigType::kInt, "shortest prompt"},
      {"data.max_prompt_words", "8", ConfigType::kInt, "longest prompt"},

      {"lm.n_layers", "2", ConfigType::kInt, "policy transformer layers"},
      {"lm.n_heads", "4", ConfigType::kInt, "policy attention heads"},
      {"lm.d_model", "64", ConfigType::kInt, "policy width"},
      {"lm.max_sequence_length", "48", ConfigType::kInt, "policy context length"},

      {"pretrain.steps", "3000", ConfigType::kInt, "NLL pretraining steps"},
      {"pretrain.batch_size", "16", ConfigType::kInt, "documents per pretraining step"},
      {"pretrain.learning_rate", "3e-3", ConfigType::kReal, "pretraining Adam learning rate"},
      {"pretrain.weight_decay", "0", ConfigType::kReal, "pretraining decoupled weight decay"},
      {"pretrain.eval_every", "500", ConfigType::kInt, "held-out NLL cadence in steps (0 disables)"},

      {"mtl.n_layers", "2", ConfigType::kInt, "classifier encoder layers"},
      {"mtl.n_heads", "4", ConfigType::kInt, "classifier attention heads"},
      {"mtl.d_model", "64", ConfigType::kInt, "classifier width"},
      {"mtl.max_sequence_length", "256", ConfigType::kInt, "classifier context length"},
      {"mtl.phase1_epochs", "2", ConfigType::kInt, "epochs over Tasks 2-6 before Task 1 joins"},
      {"mtl.phase2_epochs", "3", ConfigType::kInt, "epochs over all six tasks"},
      {"mtl.batch_size", "32", ConfigType::kInt, "examples per classifier step"},
      {"mtl.learning_rate", "1e-3", ConfigType::kReal, "classifier AdamW learning rate"},
      {"mtl.beta1", "0.9", ConfigType::kReal, "classifier AdamW beta1"},
      {"mtl.beta2", "0.999", ConfigType::kReal, "classifier AdamW beta2"},
      {"mtl.epsilon", "1e-6", ConfigType::kReal, "classifier AdamW epsilon"},
      {"mtl.weight_decay", "0.01", ConfigType::kReal, "classifier AdamW weight decay"},

      {"ppo.clip_epsilon", "0.1", ConfigType::kReal, "PPO clipping ratio"},
      {"ppo.epochs", "2", ConfigType::kInt, "PPO epochs per batch"},
      {"ppo.minibatches", "1", ConfigType::kInt, "minibatches per PPO epoch"},
      {"ppo.episodes", "12800", ConfigType::kInt, "total sampled episodes"},
      {"ppo.batch_size", "32", ConfigType::kInt, "prompts per batch"},
      {"ppo.gamma", "1", ConfigType::kReal, "discount factor"},
      {"ppo.learning_rate", "1e-3", ConfigType::kReal, "policy Adam learning rate"},
      {"ppo.adam_epsilon", "1e-8", ConfigType::kReal, "policy Adam epsilon"},
      {"ppo.initial_beta", "0.1", ConfigType::kReal, "initial KL penalty coefficient"},
      {"ppo.kl_target", "0.3", ConfigType::kReal, "target per-token KL for the adaptive coefficient"},
      {"ppo.adaptive_kl", "true", ConfigType::kBool, "adapt the KL coefficient toward the target"},
      {"ppo.skip_kl_factor", "4", ConfigType::kReal, "skip updates when batch KL exceeds this multiple of the target"},
      {"ppo.reward_span", "continuation", ConfigType::kText,
       "text the reward model scores: prompt_and_continuation or continuation"},
      {"ppo.top_p", "1", ConfigType::kReal, "nucleus mass for training rollouts (1 samples the full policy)"},
      {"ppo.checkpoint_every", "50", ConfigType::kInt, "checkpoint cadence in batches"},

      {"generation.top_p", "0.9", ConfigType::kReal, "nucleus mass"},
      {"generation.temperature", "1", ConfigType::kReal, "sampling temperature"},
      {"generation.max_new_tokens", "20", ConfigType::kInt, "tokens generated per continuation"},
      {"generation.samples", "20", ConfigType::kInt, "samples per prompt for the generate command"},

      {"dapt.steps", "600", ConfigType::kInt, "continued-pretraining steps on nontoxic text"},
      {"dapt.batch_size", "16", ConfigType::kInt, "documents per step"},
      {"dapt.learning_rate", "1e-3", ConfigType::kReal, "Adam learning rate"},

      {"eval.samples_per_prompt", "20", ConfigType::kInt, "generations per prompt"},
      {"eval.max_new_tokens", "20", ConfigType::kInt, "tokens per generation"},
      {"eval.top_p", "0.9", ConfigType::kReal, "nucleus mass"},
      {"eval.threshold", "0.5", ConfigType::kReal, "toxicity threshold (inclusive)"},
      {"eval.span", "continuation", ConfigType::kText, "text the judge scores: continuation or prompt_and_continuation"},
      {"eval.group_by", "group", ConfigType::kText, "report rows: group, toxicity or none"},
  };
  return keys;
}

const ConfigKey& registry_entry(const std::string& key) {
  for (const auto& k : config_registry()) {
    if (k.key == key) return k;
  }
  throw ConfigError("unknown config key '" + key + "'");
}

RunConfig::RunConfig() {
  for (const auto& k : config_registry()) values_[k.key] = k.default_value;
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  RunConfig cfg;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    const std::string body = trim(line.substr(0, line.find('#')));
    if (body.empty()) continue;
    if (body.find('=') == std::string::npos) {
      throw ConfigError(path.string() + ":" + std::to_string(n) + ": expected key = value");
    }
    cfg.set(body);
  }
  return cfg;
}

void RunConfig::set(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("expected key=value, got '" + assignment + "'");
  set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

void RunConfig::set(const std::string& key, const std::string& value) {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
  const std::string old = it->second;
  it->second = value;
  try {
    switch (registry_entry(key).type) {
      case ConfigType::kInt:
        u64(key);
        break;
      case ConfigType::kReal:
        number(key);
        break;
      case ConfigType::kBool:
        flag(key);
        break;
      case ConfigType::kText:
        break;
    }
  } catch (...) {
    it->second = old;
    throw;
  }
}

const std::string& RunConfig::get(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
  return it->second;
}

double RunConfig::number(const std::string& key) const {
  const std::string& v = get(key);
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::logic_error&) {
    throw ConfigError("config key '" + key + "': '" + v + "' is not a number");
  }
}

std::uint64_t RunConfig::u64(const std::string& key) const {
  const std::string& v = get(key);
  std::uint64_t out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw ConfigError("config key '" + key + "': '" + v + "' is not a non-negative integer");
  }
  return out;
}

std::size_t RunConfig::count(const std::string& key) const {
  return static_cast<std::size_t>(u64(key));
}

bool RunConfig::flag(const std::string& key) const {
  const std::string& v = get(key);
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config key '" + key + "': '" + v + "' is not true/false");
}

std::string RunConfig::render() const {
  std::ostringstream out;
  std::string section;
  for (const auto& k : config_registry()) {
    const std::string s = k.key.substr(0, k.key.find('.'));
    if (!section.empty() && s != section) out << '\n';
    section = s;
    out << "# " << k.description << '\n' << k.key << " = " << get(k.key) << '\n';
  }
  return out.str();
}

void RunConfig::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << render();
}

SyntheticCorpusSpec RunConfig::synthetic() const {
  SyntheticCorpusSpec s;
  s.seed = u64("seed");
  s.clean_words = count("data.clean_words");
  s.successors = count("data.successors");
  s.markers_per_subtype = count("data.markers_per_subtype");
  s.min_words = count("data.min_words");
  s.max_words = count("data.max_words");
  s.toxic_rate = number("data.toxic_rate");
  s.identity_rate = number("data.identity_rate");
  s.identity_toxic_rate = number("data.identity_toxic_rate");
  s.marker_rate = number("data.marker_rate");
  s.identity_labeled_fraction = number("data.identity_labeled_fraction");
  s.pretrain_docs = count("data.pretrain_docs");
  s.heldout_docs = count("data.heldout_docs");
  s.mtl_train_docs = count("data.mtl_train_docs");
  s.mtl_test_docs = count("data.mtl_test_docs");
  s.train_prompts = count("data.train_prompts");
  s.test_prompts_per_split = count("data.test_prompts_per_split");
  s.identity_prompts_per_group = count("data.identity_prompts_per_group");
  s.min_prompt_words = count("data.min_prompt_words");
  s.max_prompt_words = count("data.max_prompt_words");
  s.validate();
  return s;
}

lm::LmConfig RunConfig::lm(std::size_t vocab_size) const {
  lm::LmConfig c;
  c.vocab_size = vocab_size;
  c.n_layers = count("lm.n_layers");
  c.n_heads = count("lm.n_heads");
  c.d_model = count("lm.d_model");
  c.max_sequence_length = count("lm.max_sequence_length");
  c.validate();
  return c;
}

lm::NllConfig RunConfig::pretrain() const {
  lm::NllConfig c;
  c.steps = count("pretrain.steps");
  c.batch_size = count("pretrain.batch_size");
  c.adam.learning_rate = number("pretrain.learning_rate");
  c.adam.weight_decay = number("pretrain.weight_decay");
  c.eval_every = count("pretrain.eval_every");
  if (c.batch_size == 0) throw ConfigError("config key 'pretrain.batch_size' must be positive");
  return c;
}

reward::MtlConfig RunConfig::mtl(std::size_t vocab_size) const {
  reward::MtlConfig c;
  c.vocab_size = vocab_size;
  c.n_layers = count("mtl.n_layers");
  c.n_heads = count("mtl.n_heads");
  c.d_model = count("mtl.d_model");
  c.max_sequence_length = count("mtl.max_sequence_length");
  c.validate();
  return c;
}

reward::MtlTrainConfig RunConfig::mtl_train() const {
  reward::MtlTrainConfig c;
  c.phase1_epochs = count("mtl.phase1_epochs");
  c.phase2_epochs = count("mtl.phase2_epochs");
  c.batch_size = count("mtl.batch_size");
  c.adam = {number("mtl.learning_rate"), number("mtl.beta1"), number("mtl.beta2"),
            number("mtl.epsilon"), number("mtl.weight_decay")};
  c.validate();
  return c;
}

lm::GenerationParams RunConfig::generation() const {
  lm::GenerationParams g;
  g.top_p = number("generation.top_p");
  g.temperature = number("generation.temperature");
  g.max_new_tokens = count("generation.max_new_tokens");
  g.num_samples = count("generation.samples");
  g.validate();
  return g;
}

ppo::PpoConfig RunConfig::ppo() const {
  ppo::PpoConfig c;
  c.clip_epsilon = number("ppo.clip_epsilon");
  c.ppo_epochs = count("ppo.epochs");
  c.minibatches = count("ppo.minibatches");
  c.episodes = count("ppo.episodes");
  c.batch_size = count("ppo.batch_size");
  c.gamma = number("ppo.gamma");
  c.adam.learning_rate = number("ppo.learning_rate");
  c.adam.epsilon = number("ppo.adam_epsilon");
  c.initial_beta = number("ppo.initial_beta");
  c.kl_target = number("ppo.kl_target");
  c.adaptive_kl = flag("ppo.adaptive_kl");
  c.skip_kl_factor = number("ppo.skip_kl_factor");
  c.generation = generation();
  c.generation.num_samples = 1;
  c.generation.top_p = number("ppo.top_p");
  c.validate();
  return c;
}

ppo::RewardSpan RunConfig::reward_span() const {
  const std::string& v = get("ppo.reward_span");
  if (v == "prompt_and_continuation") return ppo::RewardSpan::kPromptAndContinuation;
  if (v == "continuation") return ppo::RewardSpan::kContinuation;
  throw ConfigError("config key 'ppo.reward_span': unknown value '" + v + "'");
}

lm::NllConfig RunConfig::dapt() const {
  lm::NllConfig c;
  c.steps = count("dapt.steps");
  c.batch_size = count("dapt.batch_size");
  c.adam.learning_rate = number("dapt.learning_rate");
  c.eval_every = 0;
  if (c.batch_size == 0) throw ConfigError("config key 'dapt.batch_size' must be positive");
  return c;
}

eval::EvalConfig RunConfig::evaluation() const {
  eval::EvalConfig c;
  c.samples_per_prompt = count("eval.samples_per_prompt");
  c.max_new_tokens = count("eval.max_new_tokens");
  c.top_p = number("eval.top_p");
  c.threshold = number("eval.threshold");
  const std::string& span = get("eval.span");
  if (span == "continuation") {
    c.span = eval::ScoreSpan::kContinuation;
  } else if (span == "prompt_and_continuation") {
    c.span = eval::ScoreSpan::kPromptAndContinuation;
  } else {
    throw ConfigError("config key 'eval.span': unknown value '" + span + "'");
  }
  const std::string& group = get("eval.group_by");
  if (group == "group") {
    c.group_by = eval::GroupBy::kGroupField;
  } else if (group == "toxicity") {
    c.group_by = eval::GroupBy::kToxicity;
  } else if (group == "none") {
    c.group_by = eval::GroupBy::kNone;
  } else {
    throw ConfigError("config key 'eval.group_by': unknown value '" + group + "'");
  }
  c.seed = u64("seed");
  c.validate();
  return c;
}

RunLock::RunLock(const std::filesystem::path& dir) : path_(dir / ".lock") {
  std::filesystem::create_directories(dir);
  for (int attempt = 0; attempt < 2; ++attempt) {
    const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd >= 0) {
      const std::string pid = std::to_string(::getpid()) + "\n";
      const ssize_t written = ::write(fd, pid.data(), pid.size());
      ::close(fd);
      if (written != static_cast<ssize_t>(pid.size())) {
        std::filesystem::remove(path_);
        throw DataError("cannot write lock " + path_.string());
      }
      return;
    }
    if (errno != EEXIST) throw DataError("cannot create lock " + path_.string());
    long holder = 0;
    std::ifstream(path_) >> holder;
    if (holder > 0 && (::kill(static_cast<pid_t>(holder), 0) == 0 || errno == EPERM)) {
      throw DataError("run directory " + dir.string() + " is locked by process " +
                      std::to_string(holder));
    }
    std::filesystem::remove(path_);  // stale lock
  }
  throw DataError("cannot acquire lock " + path_.string());
}

RunLock::~RunLock() {
  std::error_code ec;
  std::filesystem::remove(path_, ec);
}

}  // namespace detox::data
