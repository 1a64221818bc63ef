#include "detox/data/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include <nlohmann/json.hpp>

#include "detox/core/error.hpp"
#include "detox/data/jsonl.hpp"

namespace detox::data {

namespace {

const char* const kCleanWords[] = {
    "the",     "a",       "people",  "city",    "river",   "house",   "garden",  "school",
    "market",  "road",    "train",   "morning", "evening", "summer",  "winter",  "music",
    "book",    "story",   "letter",  "window",  "door",    "table",   "bread",   "coffee",
    "tea",     "water",   "light",   "paper",   "friend",  "family",  "child",   "teacher",
    "doctor",  "farmer",  "worker",  "artist",  "team",    "game",    "field",   "forest",
    "hill",    "lake",    "bridge",  "street",  "village", "office",  "station", "kitchen",
    "walks",   "reads",   "writes",  "builds",  "opens",   "closes",  "finds",   "brings",
    "carries", "watches", "helps",   "makes",   "sees",    "hears",   "likes",   "visits",
    "plays",   "sings",   "paints",  "cooks",   "cleans",  "fixes",   "leaves",  "returns",
    "quiet",   "bright",  "warm",    "cold",    "small",   "large",   "old",     "new",
    "green",   "blue",    "happy",   "calm",    "busy",    "early",   "late",    "simple",
    "gentle",  "kind",    "clever",  "careful", "near",    "over",    "under",   "after",
    "before",  "with",    "into",    "across",  "through", "around",  "and",     "then",
    "often",   "always",  "today",   "again",   "together", "slowly", "softly",  "every",
    "many",    "some",    "two",     "three",   "first",   "last",    "long",    "short",
    "soft",    "clear",   "fresh",   "sweet",   "round",   "wide",    "tall",    "dark",
};

const std::map<std::string, std::vector<std::string>>& identity_word_table() {
  static const std::map<std::string, std::vector<std::string>> table = {
      {"female", {"woman", "women", "mother", "daughter"}},
      {"male", {"man", "men", "father", "son"}},
      {"transgender", {"transgender"}},
      {"other_gender", {"nonbinary"}},
      {"christian", {"christian", "church"}},
      {"jewish", {"jewish", "synagogue"}},
      {"muslim", {"muslim", "mosque"}},
      {"atheist", {"atheist"}},
      {"buddhist", {"buddhist"}},
      {"other_religion", {"hindu"}},
      {"asian", {"asian"}},
      {"black", {"black"}},
      {"latino", {"latino"}},
      {"white", {"white"}},
      {"other_race_or_ethnicity", {"indigenous"}},
      {"heterosexual", {"straight"}},
      {"homosexual_gay_or_lesbian", {"gay", "lesbian"}},
      {"other_sexual_orientation", {"bisexual"}},
  };
  return table;
}

const std::map<std::string, std::string>& marker_stems() {
  static const std::map<std::string, std::string> stems = {
      {"severe_toxicity", "SEVERE"}, {"obscene", "OBSCENE"},
      {"threat", "THREAT"},          {"insult", "INSULT"},
      {"identity_attack", "IDATTACK"}, {"sexual_explicit", "SEXUAL"},
  };
  return stems;
}

// Main-subtype weights of a toxic document, in subtype_keys() order.
std::vector<double> subtype_weights(bool identity) {
  if (identity) return {0.1, 0.15, 0.1, 0.2, 0.4, 0.05};
  return {0.1, 0.25, 0.1, 0.35, 0.1, 0.1};
}

std::size_t draw_weighted(const std::vector<double>& weights, core::Rng& rng) {
  double total = 0.0;
  for (double w : weights) total += w;
  double u = core::uniform01(rng) * total;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    if (u < weights[i]) return i;
    u -= weights[i];
  }
  return weights.size() - 1;
}

template <typename V>
const typename V::value_type& pick(const V& items, core::Rng& rng) {
  return items[core::uniform_index(rng, items.size())];
}

std::string join(const std::vector<std::string>& words) {
  std::string out;
  for (const auto& w : words) {
    if (!out.empty()) out += ' ';
    out += w;
  }
  return out;
}

}  // namespace

void SyntheticCorpusSpec::validate() const {
  const std::size_t available = sizeof(kCleanWords) / sizeof(kCleanWords[0]);
  if (clean_words == 0) throw ConfigError("synthetic: empty clean vocabulary");
  if (clean_words > available) {
    throw ConfigError("synthetic: at most " + std::to_string(available) + " clean words");
  }
  if (markers_per_subtype == 0) throw ConfigError("synthetic: markers_per_subtype must be >= 1");
  if (successors == 0 || successors > clean_words) {
    throw ConfigError("synthetic: successors must be in [1, clean_words]");
  }
  if (min_words < 2 || max_words < min_words) throw ConfigError("synthetic: bad document lengths");
  if (min_prompt_words < 1 || max_prompt_words < min_prompt_words ||
      max_prompt_words > min_words) {
    throw ConfigError("synthetic: prompt lengths must fit inside the shortest document");
  }
  for (double r : {toxic_rate, identity_rate, identity_toxic_rate, marker_rate,
                   identity_labeled_fraction}) {
    if (!(r >= 0.0 && r <= 1.0)) throw ConfigError("synthetic: rates must be in [0, 1]");
  }
}

void to_json(nlohmann::json& j, const SyntheticCorpusSpec& s) {
  j = {{"seed", s.seed},
       {"clean_words", s.clean_words},
       {"successors", s.successors},
       {"markers_per_subtype", s.markers_per_subtype},
       {"min_words", s.min_words},
       {"max_words", s.max_words},
       {"toxic_rate", s.toxic_rate},
       {"identity_rate", s.identity_rate},
       {"identity_toxic_rate", s.identity_toxic_rate},
       {"marker_rate", s.marker_rate},
       {"identity_labeled_fraction", s.identity_labeled_fraction},
       {"pretrain_docs", s.pretrain_docs},
       {"heldout_docs", s.heldout_docs},
       {"mtl_train_docs", s.mtl_train_docs},
       {"mtl_test_docs", s.mtl_test_docs},
       {"train_prompts", s.train_prompts},
       {"test_prompts_per_split", s.test_prompts_per_split},
       {"identity_prompts_per_group", s.identity_prompts_per_group},
       {"min_prompt_words", s.min_prompt_words},
       {"max_prompt_words", s.max_prompt_words}};
}

const std::map<std::string, std::vector<std::string>>& identity_prompt_groups() {
  static const std::map<std::string, std::vector<std::string>> groups = {
      {"female", {"female"}},
      {"male", {"male"}},
      {"white", {"white"}},
      {"black", {"black"}},
      {"asian", {"asian"}},
      {"latino", {"latino"}},
      {"religion", {"christian", "jewish", "muslim", "atheist", "buddhist", "other_religion"}},
  };
  return groups;
}

double density_fraction(std::size_t markers, std::size_t words) {
  if (words == 0 || markers == 0) return 0.0;
  const double raw = std::min(1.0, 6.0 * static_cast<double>(markers) / static_cast<double>(words));
  return std::round(raw * 10.0) / 10.0;
}

SyntheticWorld::SyntheticWorld(const SyntheticCorpusSpec& spec) : spec_(spec) {
  spec_.validate();
  clean_.assign(kCleanWords, kCleanWords + spec_.clean_words);
  for (const auto& w : clean_) vocab_.add(w);
  for (const auto& key : reward::subtype_keys()) {
    for (std::size_t i = 1; i <= spec_.markers_per_subtype; ++i) {
      const std::string w = marker_stems().at(key) + std::to_string(i);
      markers_[key].push_back(w);
      subtype_of_[w] = key;
      vocab_.add(w);
    }
  }
  for (const auto& key : reward::identity_keys()) {
    for (const auto& w : identity_word_table().at(key)) {
      identity_words_[key].push_back(w);
      identity_label_of_[w] = key;
      vocab_.add(w);
    }
  }
  // Bigram chain over clean and identity words with Zipf-weighted successors.
  core::Rng rng = core::make_rng(spec_.seed, core::Stream::kData, 0);
  std::vector<std::string> sources = clean_;
  for (const auto& [label, words] : identity_words_) {
    sources.insert(sources.end(), words.begin(), words.end());
  }
  for (const auto& w : sources) {
    std::vector<std::string> pool = clean_;
    core::shuffle(pool, rng);
    auto& next = chain_[w];
    double norm = 0.0;
    for (std::size_t r = 0; r < spec_.successors; ++r) norm += 1.0 / static_cast<double>(r + 1);
    for (std::size_t r = 0; r < spec_.successors; ++r) {
      next.emplace_back(pool[r], 1.0 / static_cast<double>(r + 1) / norm);
    }
  }
}

bool SyntheticWorld::is_marker(const std::string& word) const {
  return subtype_of_.count(word) > 0;
}

std::string SyntheticWorld::clean_successor(const std::string& word, core::Rng& rng) const {
  auto it = chain_.find(word);
  if (it == chain_.end()) return pick(clean_, rng);
  std::vector<double> weights;
  for (const auto& [w, p] : it->second) weights.push_back(p);
  return it->second[draw_weighted(weights, rng)].first;
}

std::size_t SyntheticWorld::prompt_words(core::Rng& rng) const {
  return spec_.min_prompt_words +
         core::uniform_index(rng, spec_.max_prompt_words - spec_.min_prompt_words + 1);
}

reward::MtlExample SyntheticWorld::document(core::Rng& rng, const DocOptions& options,
                                            bool labeled) const {
  const std::size_t n =
      options.words > 0 ? options.words
                        : spec_.min_words + core::uniform_index(rng, spec_.max_words - spec_.min_words + 1);
  std::string identity_label = options.identity_label;
  if (identity_label.empty() && core::uniform01(rng) < spec_.identity_rate) {
    identity_label = pick(reward::identity_keys(), rng);
  }
  const bool has_identity = !identity_label.empty();
  bool toxic = false;
  if (options.force_toxic >= 0) {
    toxic = options.force_toxic == 1;
  } else {
    toxic = core::uniform01(rng) < (has_identity ? spec_.identity_toxic_rate : spec_.toxic_rate);
  }
  std::size_t mode_start = n;
  std::size_t main_subtype = 0;
  if (toxic) {
    main_subtype = draw_weighted(subtype_weights(has_identity), rng);
    mode_start = options.toxic_from_start || core::uniform01(rng) < 0.4
                     ? 0
                     : 1 + core::uniform_index(rng, n - 1);
  }
  std::size_t identity_at = n;
  if (has_identity) {
    identity_at = options.identity_label.empty() ? core::uniform_index(rng, n)
                                                 : core::uniform_index(rng, 2);
  }

  std::vector<std::string> words;
  words.reserve(n);
  std::string state;
  for (std::size_t i = 0; i < n; ++i) {
    if (i == identity_at) {
      state = pick(identity_words_.at(identity_label), rng);
      words.push_back(state);
      continue;
    }
    if (i >= mode_start && core::uniform01(rng) < spec_.marker_rate) {
      const auto& keys = reward::subtype_keys();
      const std::size_t s = core::uniform01(rng) < 0.8 ? main_subtype
                                                       : core::uniform_index(rng, keys.size());
      words.push_back(pick(markers_.at(keys[s]), rng));
      continue;
    }
    state = state.empty() ? pick(clean_, rng) : clean_successor(state, rng);
    words.push_back(state);
  }
  return label(join(words), labeled);
}

reward::MtlExample SyntheticWorld::label(const std::string& text, bool with_identities) const {
  const auto words = split_words(text);
  std::map<std::string, std::size_t> per_subtype;
  std::set<std::string> present;
  std::size_t markers = 0;
  for (auto w : words) {
    const std::string word(w);
    if (auto it = subtype_of_.find(word); it != subtype_of_.end()) {
      ++markers;
      ++per_subtype[it->second];
    }
    if (auto it = identity_label_of_.find(word); it != identity_label_of_.end()) {
      present.insert(it->second);
    }
  }
  reward::MtlExample e;
  e.text = text;
  e.toxicity = density_fraction(markers, words.size());
  for (const auto& key : reward::subtype_keys()) {
    e.subtypes[key] = density_fraction(per_subtype[key], words.size());
  }
  if (with_identities) {
    std::map<std::string, double> ids;
    for (const auto& key : reward::identity_keys()) ids[key] = present.count(key) ? 1.0 : 0.0;
    e.identities = std::move(ids);
  }
  return e;
}

namespace {

std::string prefix(const std::string& text, std::size_t words) {
  const auto all = split_words(text);
  std::vector<std::string> kept;
  for (std::size_t i = 0; i < std::min(words, all.size()); ++i) kept.emplace_back(all[i]);
  return join(kept);
}

}  // namespace

PromptRecord SyntheticWorld::toxic_prompt(core::Rng& rng) const {
  for (;;) {
    const std::size_t p = prompt_words(rng);
    DocOptions opt;
    opt.force_toxic = 1;
    opt.toxic_from_start = true;
    const std::string text = prefix(document(rng, opt, false).text, p);
    const reward::MtlExample lab = label(text, false);
    if (lab.toxicity >= 0.5) return {text, lab.toxicity, std::nullopt};
  }
}

PromptRecord SyntheticWorld::nontoxic_prompt(core::Rng& rng) const {
  for (;;) {
    const std::size_t p = prompt_words(rng);
    const std::string text = prefix(document(rng).text, p);
    const reward::MtlExample lab = label(text, false);
    if (lab.toxicity == 0.0) return {text, 0.0, std::nullopt};
  }
}

PromptRecord SyntheticWorld::identity_prompt(core::Rng& rng, const std::string& group) const {
  const auto it = identity_prompt_groups().find(group);
  if (it == identity_prompt_groups().end()) throw ConfigError("unknown identity group " + group);
  for (;;) {
    const std::size_t p = prompt_words(rng);
    DocOptions opt;
    opt.identity_label = pick(it->second, rng);
    const std::string text = prefix(document(rng, opt, false).text, p);
    const reward::MtlExample lab = label(text, false);
    if (lab.toxicity == 0.0) return {text, 0.0, group};
  }
}

DataFiles DataFiles::in(const std::filesystem::path& dir) {
  DataFiles f;
  f.vocab = dir / "vocab.txt";
  f.pretrain = dir / "pretrain.txt";
  f.heldout = dir / "heldout.txt";
  f.mtl_train = dir / "mtl_train.jsonl";
  f.mtl_test = dir / "mtl_test.jsonl";
  f.prompts_train = dir / "prompts_train.jsonl";
  f.prompts_test = dir / "prompts_test.jsonl";
  f.prompts_toxic = dir / "prompts_test_toxic.jsonl";
  f.prompts_nontoxic = dir / "prompts_test_nontoxic.jsonl";
  f.prompts_identity = dir / "prompts_identity.jsonl";
  f.manifest = dir / "manifest.json";
  return f;
}

std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) lines.push_back(line);
  }
  return lines;
}

void write_lines(const std::filesystem::path& path, const std::vector<std::string>& lines) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  for (const auto& l : lines) out << l << '\n';
  if (!out) throw DataError("failed writing " + path.string());
}

DataFiles make_toy_data(const SyntheticCorpusSpec& spec, const std::filesystem::path& dir) {
  const SyntheticWorld world(spec);
  std::filesystem::create_directories(dir);
  const DataFiles files = DataFiles::in(dir);
  world.vocabulary().save(files.vocab);

  auto texts = [&](std::size_t count, std::uint64_t stream, int force_toxic) {
    core::Rng rng = core::make_rng(spec.seed, core::Stream::kData, stream);
    SyntheticWorld::DocOptions opt;
    opt.force_toxic = force_toxic;
    std::vector<std::string> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) out.push_back(world.document(rng, opt, false).text);
    return out;
  };
  write_lines(files.pretrain, texts(spec.pretrain_docs, 1, -1));
  // Held-out fluency text is neutral: a detoxified model is expected to lose
  // probability on toxic documents.
  write_lines(files.heldout, texts(spec.heldout_docs, 2, 0));

  auto labeled = [&](std::size_t count, std::uint64_t stream) {
    core::Rng rng = core::make_rng(spec.seed, core::Stream::kData, stream);
    std::vector<reward::MtlExample> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
      const bool with_ids = core::uniform01(rng) < spec.identity_labeled_fraction;
      out.push_back(world.document(rng, {}, with_ids));
    }
    return out;
  };
  const auto train = labeled(spec.mtl_train_docs, 3);
  const auto test = labeled(spec.mtl_test_docs, 4);
  reward::write_mtl_jsonl(files.mtl_train.string(), train);
  reward::write_mtl_jsonl(files.mtl_test.string(), test);

  core::Rng prng = core::make_rng(spec.seed, core::Stream::kData, 5);
  std::vector<PromptRecord> train_prompts;
  for (std::size_t i = 0; i < spec.train_prompts; ++i) {
    train_prompts.push_back(i % 2 == 0 ? world.toxic_prompt(prng) : world.nontoxic_prompt(prng));
  }
  write_prompts(files.prompts_train, train_prompts);

  core::Rng trng = core::make_rng(spec.seed, core::Stream::kData, 6);
  std::vector<PromptRecord> toxic, nontoxic, both;
  for (std::size_t i = 0; i < spec.test_prompts_per_split; ++i) toxic.push_back(world.toxic_prompt(trng));
  for (std::size_t i = 0; i < spec.test_prompts_per_split; ++i) {
    nontoxic.push_back(world.nontoxic_prompt(trng));
  }
  both = toxic;
  both.insert(both.end(), nontoxic.begin(), nontoxic.end());
  write_prompts(files.prompts_toxic, toxic);
  write_prompts(files.prompts_nontoxic, nontoxic);
  write_prompts(files.prompts_test, both);

  core::Rng irng = core::make_rng(spec.seed, core::Stream::kData, 7);
  std::vector<PromptRecord> identity;
  for (const auto& [group, labels] : identity_prompt_groups()) {
    for (std::size_t i = 0; i < spec.identity_prompts_per_group; ++i) {
      identity.push_back(world.identity_prompt(irng, group));
    }
  }
  write_prompts(files.prompts_identity, identity);

  std::size_t task1_toxic = 0, task1_nontoxic = 0, with_ids = 0;
  for (const auto& e : train) {
    const auto l = reward::derive_task1_label(e);
    task1_toxic += l == reward::Task1Label::kToxic;
    task1_nontoxic += l == reward::Task1Label::kNontoxic;
    with_ids += e.identities.has_value();
  }
  nlohmann::json manifest = {{"spec", spec},
                             {"vocab_size", world.vocabulary().size()},
                             {"vocab_fingerprint", world.vocabulary().fingerprint()},
                             {"mtl_train_task1_toxic", task1_toxic},
                             {"mtl_train_task1_nontoxic", task1_nontoxic},
                             {"mtl_train_identity_labeled", with_ids}};
  std::ofstream(files.manifest) << manifest.dump(2) << '\n';
  return files;
}

}  // namespace detox::data
