#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "detox/core/random.hpp"
#include "detox/data/prompts.hpp"
#include "detox/data/vocabulary.hpp"
#include "detox/reward/tasks.hpp"

namespace detox::data {

// Settings of the synthetic world. Clean text follows a sparse bigram chain;
// a toxic document switches into a mode that interleaves marker words of one
// main subtype; identity words mark the labeled groups.
struct SyntheticCorpusSpec {
  std::uint64_t seed = 1;
  std::size_t clean_words = 120;
  std::size_t successors = 5;  // out-degree of the bigram chain
  std::size_t markers_per_subtype = 3;
  std::size_t min_words = 12;
  std::size_t max_words = 28;
  double toxic_rate = 0.25;
  double identity_rate = 0.3;
  // Toxic rate of documents mentioning an identity (co-occurrence bias).
  double identity_toxic_rate = 0.45;
  double marker_rate = 0.25;  // marker probability per word in toxic mode
  double identity_labeled_fraction = 0.5;

  std::size_t pretrain_docs = 8000;
  std::size_t heldout_docs = 500;
  std::size_t mtl_train_docs = 6000;
  std::size_t mtl_test_docs = 1500;
  std::size_t train_prompts = 1000;
  std::size_t test_prompts_per_split = 100;
  std::size_t identity_prompts_per_group = 25;
  std::size_t min_prompt_words = 5;
  std::size_t max_prompt_words = 8;

  void validate() const;  // ConfigError
};

void to_json(nlohmann::json& j, const SyntheticCorpusSpec& s);

// Identity groups of the grouped prompt file and the identity labels that
// belong to each.
const std::map<std::string, std::vector<std::string>>& identity_prompt_groups();

// Rater fraction from marker density: min(1, 6 m / n) rounded to 0.1.
double density_fraction(std::size_t markers, std::size_t words);

class SyntheticWorld {
 public:
  explicit SyntheticWorld(const SyntheticCorpusSpec& spec);

  const SyntheticCorpusSpec& spec() const { return spec_; }
  const Vocabulary& vocabulary() const { return vocab_; }

  // Marker words by subtype key, identity words by identity label.
  const std::map<std::string, std::vector<std::string>>& markers() const { return markers_; }
  const std::map<std::string, std::vector<std::string>>& identity_words() const {
    return identity_words_;
  }
  bool is_marker(const std::string& word) const;

  struct DocOptions {
    int force_toxic = -1;          // -1 natural, 0 clean, 1 toxic
    bool toxic_from_start = false;
    std::string identity_label;    // forced identity mention near the start
    std::size_t words = 0;         // 0 draws a length
  };

  // A labeled document. Identity fields are filled when `labeled` is set.
  reward::MtlExample document(core::Rng& rng, const DocOptions& options, bool labeled) const;
  reward::MtlExample document(core::Rng& rng) const { return document(rng, {}, false); }

  // Labels a text from its words alone.
  reward::MtlExample label(const std::string& text, bool with_identities) const;

  PromptRecord toxic_prompt(core::Rng& rng) const;
  PromptRecord nontoxic_prompt(core::Rng& rng) const;
  PromptRecord identity_prompt(core::Rng& rng, const std::string& group) const;

 private:
  std::string clean_successor(const std::string& word, core::Rng& rng) const;
  std::size_t prompt_words(core::Rng& rng) const;

  SyntheticCorpusSpec spec_;
  Vocabulary vocab_;
  std::vector<std::string> clean_;
  std::map<std::string, std::vector<std::string>> markers_;
  std::map<std::string, std::vector<std::string>> identity_words_;
  std::map<std::string, std::string> identity_label_of_;
  std::map<std::string, std::string> subtype_of_;
  std::map<std::string, std::vector<std::pair<std::string, double>>> chain_;
};

// Files written by make_toy_data.
struct DataFiles {
  std::filesystem::path vocab, pretrain, heldout, mtl_train, mtl_test, prompts_train,
      prompts_test, prompts_toxic, prompts_nontoxic, prompts_identity, manifest;
  static DataFiles in(const std::filesystem::path& dir);
};

// Emits the vocabulary, pretraining and neutral held-out text (one document per
// line), labeled train/test JSONL, and the prompt files.
DataFiles make_toy_data(const SyntheticCorpusSpec& spec, const std::filesystem::path& dir);

std::vector<std::string> read_lines(const std::filesystem::path& path);
void write_lines(const std::filesystem::path& path, const std::vector<std::string>& lines);

}  // namespace detox::data
