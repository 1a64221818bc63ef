#pragma once

#include <filesystem>
#include <fstream>
#include <vector>

#include <nlohmann/json.hpp>

namespace detox::data {

// Reads line-delimited JSON. Every record must be a complete line: a final
// line without its newline is a torn write and raises DataError, as does any
// line that fails to parse. Blank lines are skipped.
std::vector<nlohmann::json> read_jsonl(const std::filesystem::path& path);

// Appends one compact JSON object per line, flushing after each record.
class JsonlWriter {
 public:
  // Truncates the file unless `append` is set.
  explicit JsonlWriter(const std::filesystem::path& path, bool append = false);
  void write(const nlohmann::json& record);

 private:
  std::filesystem::path path_;
  std::ofstream out_;
};

void write_jsonl(const std::filesystem::path& path, const std::vector<nlohmann::json>& records);

}  // namespace detox::data
