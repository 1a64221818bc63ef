#include "detox/data/prompts.hpp"

#include <nlohmann/json.hpp>

#include "detox/core/error.hpp"
#include "detox/data/jsonl.hpp"

namespace detox::data {

void to_json(nlohmann::json& j, const PromptRecord& p) {
  j = nlohmann::json{{"text", p.text}};
  j["toxicity"] = p.toxicity ? nlohmann::json(*p.toxicity) : nlohmann::json(nullptr);
  j["group"] = p.group ? nlohmann::json(*p.group) : nlohmann::json(nullptr);
}

void from_json(const nlohmann::json& j, PromptRecord& p) {
  try {
    p.text = j.at("text").get<std::string>();
    p.toxicity.reset();
    p.group.reset();
    if (j.contains("toxicity") && !j["toxicity"].is_null()) {
      p.toxicity = j["toxicity"].get<double>();
      if (!(*p.toxicity >= 0.0 && *p.toxicity <= 1.0)) {
        throw DataError("prompt: toxicity outside [0, 1]");
      }
    }
    if (j.contains("group") && !j["group"].is_null()) p.group = j["group"].get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("prompt: ") + e.what());
  }
}

std::vector<PromptRecord> read_prompts(const std::filesystem::path& path) {
  std::vector<PromptRecord> out;
  for (const auto& record : read_jsonl(path)) out.push_back(record.get<PromptRecord>());
  if (out.empty()) throw DataError(path.string() + ": no prompts");
  return out;
}

void write_prompts(const std::filesystem::path& path, std::span<const PromptRecord> prompts) {
  JsonlWriter writer(path);
  for (const auto& p : prompts) writer.write(nlohmann::json(p));
}

}  // namespace detox::data
