#pragma once

#include <array>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "detox/data/vocabulary.hpp"

namespace detox::reward {

enum class TaskMode {
  kCategorical,  // exactly one label; softmax cross-entropy
  kMultilabel,   // independent labels; per-label binary cross-entropy
};

struct TaskSpec {
  int id = 0;
  std::string objective;
  std::vector<std::string> labels;
  TaskMode mode = TaskMode::kCategorical;
};

inline constexpr int kNumTasks = 6;
inline constexpr int kToxicityTask = 1;
// Task 1 label order: index 0 is "toxic".
inline constexpr int kToxicLabel = 0;
inline constexpr int kNontoxicLabel = 1;

// Toxicity detection, subtype identification and the four identity tasks.
const std::vector<TaskSpec>& task_specs();
// Throws ConfigError for ids outside 1..6.
const TaskSpec& task_spec(int task_id);

// Field names of the subtype and identity attributes in the training file.
const std::vector<std::string>& subtype_keys();
const std::vector<std::string>& identity_keys();

// One labeled comment. Attribute values are rater fractions in [0, 1];
// identities are present only on the identity-labeled subset.
struct MtlExample {
  std::string text;
  double toxicity = 0.0;
  std::map<std::string, double> subtypes;
  std::optional<std::map<std::string, double>> identities;

  // Throws DataError on out-of-range fractions or partial identity fields.
  void validate() const;
};

void to_json(nlohmann::json& j, const MtlExample& e);
void from_json(const nlohmann::json& j, MtlExample& e);

enum class Task1Label { kToxic, kNontoxic, kExcluded };

// >= 0.5 is toxic, exactly 0 is nontoxic, anything between is left out.
Task1Label derive_task1_label(const MtlExample& example);

// A tokenized example for one task: `label` for categorical tasks, a 0/1
// `targets` row for multilabel tasks.
struct TaskExample {
  std::vector<int> tokens;
  int label = -1;
  std::vector<float> targets;
};

struct TaskDataset {
  int task_id = 0;
  std::vector<TaskExample> examples;
};

using TaskDatasets = std::array<TaskDataset, kNumTasks>;

// Builds the six per-task datasets. Attribute fractions for Tasks 2-6 are
// binarized at 0.5; every row with the relevant fields is used.
TaskDatasets build_task_datasets(std::span<const MtlExample> examples,
                                 const data::Vocabulary& vocab);

// Only the Task 1 dataset.
TaskDataset build_task1_dataset(std::span<const MtlExample> examples,
                                const data::Vocabulary& vocab);

std::vector<MtlExample> read_mtl_jsonl(const std::string& path);
void write_mtl_jsonl(const std::string& path, std::span<const MtlExample> examples);

}  // namespace detox::reward
