#include "detox/data/jsonl.hpp"

#include <iterator>
#include <string>

#include "detox/core/error.hpp"

namespace detox::data {

std::vector<nlohmann::json> read_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path.string());
  const std::string content((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  std::vector<nlohmann::json> records;
  std::size_t start = 0, line_no = 0;
  while (start < content.size()) {
    const std::size_t end = content.find('\n', start);
    ++line_no;
    if (end == std::string::npos) {
      throw DataError(path.string() + ":" + std::to_string(line_no) +
                      ": incomplete final record (missing newline)");
    }
    const std::string_view line(content.data() + start, end - start);
    start = end + 1;
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
    try {
      records.push_back(nlohmann::json::parse(line));
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return records;
}

JsonlWriter::JsonlWriter(const std::filesystem::path& path, bool append)
    : path_(path), out_(path, append ? std::ios::app : std::ios::trunc) {
  if (!out_) throw DataError("cannot write " + path.string());
}

void JsonlWriter::write(const nlohmann::json& record) {
  out_ << record.dump() << '\n';
  out_.flush();
  if (!out_) throw DataError("failed writing " + path_.string());
}

void write_jsonl(const std::filesystem::path& path, const std::vector<nlohmann::json>& records) {
  JsonlWriter writer(path);
  for (const auto& r : records) writer.write(r);
}

}  // namespace detox::data
