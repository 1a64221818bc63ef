#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

namespace detox::data {

// One line of a prompt file: {"text", "toxicity": float|null, "group": string|null}.
struct PromptRecord {
  std::string text;
  std::optional<double> toxicity;
  std::optional<std::string> group;
};

void to_json(nlohmann::json& j, const PromptRecord& p);
void from_json(const nlohmann::json& j, PromptRecord& p);

std::vector<PromptRecord> read_prompts(const std::filesystem::path& path);
void write_prompts(const std::filesystem::path& path, std::span<const PromptRecord> prompts);

}  // namespace detox::data
