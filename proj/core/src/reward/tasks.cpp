#include "detox/reward/tasks.hpp"

#include <cmath>

#include <nlohmann/json.hpp>

#include "detox/core/error.hpp"
#include "detox/data/jsonl.hpp"

namespace detox::reward {

const std::vector<TaskSpec>& task_specs() {
  static const std::vector<TaskSpec> specs = {
      {1, "Toxicity detection", {"toxic", "nontoxic"}, TaskMode::kCategorical},
      {2,
       "Subtype toxicity identification",
       {"severe_toxicity", "obscene", "threat", "insult", "identity_attack", "sexual_explicit"},
       TaskMode::kMultilabel},
      {3, "Gender identification", {"female", "male", "transgender", "other_gender"},
       TaskMode::kMultilabel},
      {4,
       "Religion identification",
       {"christian", "jewish", "muslim", "atheist", "buddhist", "other_religion"},
       TaskMode::kMultilabel},
      {5,
       "Race or ethnicity identification",
       {"asian", "black", "latino", "white", "other_race_or_ethnicity"},
       TaskMode::kMultilabel},
      {6,
       "Sexual orientation identification",
       {"heterosexual", "homosexual_gay_or_lesbian", "other_sexual_orientation"},
       TaskMode::kMultilabel},
  };
  return specs;
}

const TaskSpec& task_spec(int task_id) {
  if (task_id < 1 || task_id > kNumTasks) {
    throw ConfigError("unknown task id " + std::to_string(task_id));
  }
  return task_specs()[static_cast<std::size_t>(task_id - 1)];
}

const std::vector<std::string>& subtype_keys() { return task_spec(2).labels; }

const std::vector<std::string>& identity_keys() {
  static const std::vector<std::string> keys = [] {
    std::vector<std::string> k;
    for (int t = 3; t <= kNumTasks; ++t)
      for (const auto& l : task_spec(t).labels) k.push_back(l);
    return k;
  }();
  return keys;
}

namespace {

void check_fraction(double v, const std::string& field) {
  if (!(v >= 0.0 && v <= 1.0)) {
    throw DataError("mtl example: " + field + " = " + std::to_string(v) + " outside [0, 1]");
  }
}

}  // namespace

void MtlExample::validate() const {
  check_fraction(toxicity, "toxicity");
  for (const auto& key : subtype_keys()) {
    auto it = subtypes.find(key);
    if (it == subtypes.end()) throw DataError("mtl example: missing subtype '" + key + "'");
    check_fraction(it->second, key);
  }
  if (identities) {
    for (const auto& key : identity_keys()) {
      auto it = identities->find(key);
      if (it == identities->end()) {
        throw DataError("mtl example: identity fields must be jointly present; missing '" + key +
                        "'");
      }
      check_fraction(it->second, key);
    }
  }
}

void to_json(nlohmann::json& j, const MtlExample& e) {
  j = nlohmann::json{{"text", e.text}, {"toxicity", e.toxicity}, {"subtypes", e.subtypes}};
  j["identities"] = e.identities ? nlohmann::json(*e.identities) : nlohmann::json(nullptr);
}

void from_json(const nlohmann::json& j, MtlExample& e) {
  try {
    e.text = j.at("text").get<std::string>();
    e.toxicity = j.at("toxicity").get<double>();
    e.subtypes = j.at("subtypes").get<std::map<std::string, double>>();
    const auto& ids = j.at("identities");
    if (ids.is_null()) {
      e.identities.reset();
    } else {
      e.identities = ids.get<std::map<std::string, double>>();
    }
  } catch (const nlohmann::json::exception& ex) {
    throw DataError(std::string("mtl example: ") + ex.what());
  }
  e.validate();
}

Task1Label derive_task1_label(const MtlExample& example) {
  if (example.toxicity >= 0.5) return Task1Label::kToxic;
  if (example.toxicity == 0.0) return Task1Label::kNontoxic;
  return Task1Label::kExcluded;
}

namespace {

std::vector<int> tokenize(const MtlExample& e, const data::Vocabulary& vocab) {
  return vocab.encode(e.text);
}

std::vector<float> binarize(const std::map<std::string, double>& values,
                            const std::vector<std::string>& keys) {
  std::vector<float> out;
  out.reserve(keys.size());
  for (const auto& k : keys) out.push_back(values.at(k) >= 0.5 ? 1.0f : 0.0f);
  return out;
}

}  // namespace

TaskDataset build_task1_dataset(std::span<const MtlExample> examples,
                                const data::Vocabulary& vocab) {
  TaskDataset ds{kToxicityTask, {}};
  for (const auto& e : examples) {
    const Task1Label label = derive_task1_label(e);
    if (label == Task1Label::kExcluded) continue;
    TaskExample te;
    te.tokens = tokenize(e, vocab);
    te.label = label == Task1Label::kToxic ? kToxicLabel : kNontoxicLabel;
    ds.examples.push_back(std::move(te));
  }
  return ds;
}

TaskDatasets build_task_datasets(std::span<const MtlExample> examples,
                                 const data::Vocabulary& vocab) {
  TaskDatasets out;
  out[0] = build_task1_dataset(examples, vocab);
  for (int t = 2; t <= kNumTasks; ++t) out[static_cast<std::size_t>(t - 1)].task_id = t;
  for (const auto& e : examples) {
    e.validate();
    const std::vector<int> tokens = tokenize(e, vocab);
    out[1].examples.push_back({tokens, -1, binarize(e.subtypes, subtype_keys())});
    if (!e.identities) continue;
    for (int t = 3; t <= kNumTasks; ++t) {
      out[static_cast<std::size_t>(t - 1)].examples.push_back(
          {tokens, -1, binarize(*e.identities, task_spec(t).labels)});
    }
  }
  return out;
}

std::vector<MtlExample> read_mtl_jsonl(const std::string& path) {
  std::vector<MtlExample> out;
  for (const auto& record : data::read_jsonl(path)) out.push_back(record.get<MtlExample>());
  return out;
}

void write_mtl_jsonl(const std::string& path, std::span<const MtlExample> examples) {
  data::JsonlWriter writer(path);
  for (const auto& e : examples) writer.write(nlohmann::json(e));
}

}  // namespace detox::reward
