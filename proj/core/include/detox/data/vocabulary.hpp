#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace detox::data {

// Whitespace word-level vocabulary. Ids 0..3 are reserved specials.
class Vocabulary {
 public:
  static constexpr int kBos = 0;
  static constexpr int kEos = 1;
  static constexpr int kCls = 2;
  static constexpr int kUnk = 3;
  static constexpr std::size_t kNumSpecial = 4;

  Vocabulary();
  explicit Vocabulary(const std::vector<std::string>& words);

  // Adds a word if new; returns its id.
  int add(const std::string& word);

  std::size_t size() const { return tokens_.size(); }
  int id(std::string_view word) const;  // kUnk when absent
  bool contains(std::string_view word) const;
  const std::string& token(int id) const;
  const std::vector<std::string>& tokens() const { return tokens_; }

  std::vector<int> encode(std::string_view text) const;
  // Prepends <bos>.
  std::vector<int> encode_document(std::string_view text) const;
  // Space-joined words; specials are skipped.
  std::string decode(std::span<const int> ids) const;

  // FNV-1a hash over the token list, used to pair checkpoints with data.
  std::uint64_t fingerprint() const;

  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

std::vector<std::string_view> split_words(std::string_view text);

}  // namespace detox::data
