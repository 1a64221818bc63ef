#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "detox/data/synthetic.hpp"
#include "detox/eval/eval.hpp"
#include "detox/lm/policy_lm.hpp"
#include "detox/lm/training.hpp"
#include "detox/ppo/ppo.hpp"
#include "detox/ppo/trainer.hpp"
#include "detox/reward/mtl_model.hpp"
#include "detox/reward/mtl_train.hpp"

namespace detox::data {

enum class ConfigType { kInt, kReal, kBool, kText };

struct ConfigKey {
  std::string key;
  std::string default_value;
  ConfigType type;
  std::string description;
};

// Every recognized key with its default, in file order.
const std::vector<ConfigKey>& config_registry();
const ConfigKey& registry_entry(const std::string& key);  // ConfigError if unknown

// Flat "dotted.key = value" settings. Unknown keys and malformed values are
// rejected with ConfigError naming the key.
class RunConfig {
 public:
  RunConfig();  // all defaults

  static RunConfig load(const std::filesystem::path& path);
  // Parses "key=value".
  void set(const std::string& assignment);
  void set(const std::string& key, const std::string& value);

  const std::string& get(const std::string& key) const;
  double number(const std::string& key) const;
  std::size_t count(const std::string& key) const;
  std::uint64_t u64(const std::string& key) const;
  bool flag(const std::string& key) const;

  // Effective configuration in file syntax, with descriptions as comments.
  std::string render() const;
  void save(const std::filesystem::path& path) const;

  SyntheticCorpusSpec synthetic() const;
  lm::LmConfig lm(std::size_t vocab_size) const;
  lm::NllConfig pretrain() const;
  reward::MtlConfig mtl(std::size_t vocab_size) const;
  reward::MtlTrainConfig mtl_train() const;
  ppo::PpoConfig ppo() const;
  ppo::RewardSpan reward_span() const;
  lm::NllConfig dapt() const;
  eval::EvalConfig evaluation() const;
  lm::GenerationParams generation() const;

 private:
  std::map<std::string, std::string> values_;
};

// Exclusive lock on a run directory, released on destruction. A lock left by
// a dead process is taken over; a live holder raises DataError.
class RunLock {
 public:
  explicit RunLock(const std::filesystem::path& dir);
  ~RunLock();
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  std::filesystem::path path_;
};

}  // namespace detox::data
