#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "detox/core/adam.hpp"
#include "detox/core/parameters.hpp"
#include "detox/core/random.hpp"
#include "detox/lm/policy_lm.hpp"
#include "detox/reward/mtl_model.hpp"

namespace detox::data {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedArray {
  std::string name;
  core::Shape shape;
  std::vector<float> values;
};

// File layout: 8-byte magic, u32 version, u64 header length, JSON header
// (kind, config, extra, array table with names/shapes/dtypes/offsets,
// optimizer hyperparameters, rng state), then the raw little-endian float32
// payload. Optimizer moments are stored as arrays named "adam.m.<param>" and
// "adam.v.<param>".
struct Checkpoint {
  std::string kind;  // "policy" or "reward"
  nlohmann::json config = nlohmann::json::object();
  nlohmann::json extra = nlohmann::json::object();
  std::vector<NamedArray> arrays;
  std::optional<core::OptimizerState<float>> optimizer;
  std::optional<std::string> rng;

  const NamedArray& array(const std::string& name) const;  // CheckpointError
};

// Written to a temporary file and renamed into place.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
// Throws CheckpointError on a missing, truncated or corrupt file and on a
// version mismatch.
Checkpoint load_checkpoint(const std::filesystem::path& path);

std::vector<NamedArray> capture(const core::ParameterSet<float>& params);
// Copies values into an existing set; names and shapes must match.
void restore(core::ParameterSet<float>& params, const std::vector<NamedArray>& arrays);

nlohmann::json to_json(const lm::LmConfig& c);
lm::LmConfig lm_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const reward::MtlConfig& c);
reward::MtlConfig mtl_config_from_json(const nlohmann::json& j);

Checkpoint policy_checkpoint(const lm::PolicyLm<float>& model, std::uint64_t vocab_fingerprint);
lm::PolicyLm<float> load_policy(const Checkpoint& checkpoint);

Checkpoint reward_checkpoint(const reward::MtlModel<float>& model, std::uint64_t vocab_fingerprint);
reward::MtlModel<float> load_reward(const Checkpoint& checkpoint);

std::uint64_t vocab_fingerprint_of(const Checkpoint& checkpoint);

}  // namespace detox::data
