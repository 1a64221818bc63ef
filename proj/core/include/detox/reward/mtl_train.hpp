#pragma once

#include <cstddef>
#include <functional>
#include <vector>

#include "detox/core/adam.hpp"
#include "detox/core/random.hpp"
#include "detox/reward/mtl_model.hpp"
#include "detox/reward/tasks.hpp"

namespace detox::reward {

struct MtlTrainConfig {
  std::size_t phase1_epochs = 2;  // Tasks 2-6 only
  std::size_t phase2_epochs = 3;  // all six tasks
  std::size_t batch_size = 32;
  core::AdamConfig adam{2e-5, 0.9, 0.999, 1e-6, 0.01};

  void validate() const;  // ConfigError
};

// One optimizer step of the schedule.
struct ScheduleEntry {
  std::size_t epoch = 0;  // 1-based
  std::size_t step = 0;   // 1-based, global
  int task_id = 0;
  double loss = 0.0;
};

struct PlannedBatch {
  int task_id = 0;
  std::vector<std::size_t> indices;  // into the task's dataset
};

// One epoch over the given tasks: each dataset is shuffled and cut into
// batches, then all batches are shuffled together, so tasks are drawn in
// proportion to their dataset sizes.
std::vector<PlannedBatch> plan_epoch(const TaskDatasets& datasets, const std::vector<int>& tasks,
                                     std::size_t batch_size, core::Rng& rng);

using ScheduleCallback = std::function<void(const ScheduleEntry&)>;

// Phase 1 trains on Tasks 2-6, phase 2 on all six. Throws ConfigError when
// any identity task has no examples.
template <typename T>
std::vector<ScheduleEntry> train_anti_curriculum(MtlModel<T>& model, const TaskDatasets& datasets,
                                                 const MtlTrainConfig& config, core::Rng& rng,
                                                 const ScheduleCallback& on_step = {});

// Fine-tunes a Task-1-only model for phase1 + phase2 epochs, so it sees at
// least as many Task 1 batches as the multitask schedule.
template <typename T>
std::vector<ScheduleEntry> train_single_task_ablation(MtlModel<T>& model,
                                                      const TaskDataset& task1,
                                                      const MtlTrainConfig& config,
                                                      core::Rng& rng,
                                                      const ScheduleCallback& on_step = {});

// Toxic is the positive class; a prediction is toxic when P(toxic) >= 0.5.
struct BinaryMetrics {
  std::size_t true_positive = 0, false_positive = 0, true_negative = 0, false_negative = 0;
  double precision = 0.0, recall = 0.0, f1 = 0.0, accuracy = 0.0;
};

BinaryMetrics binary_metrics(const std::vector<int>& predicted_toxic,
                             const std::vector<int>& actual_toxic);

template <typename T>
BinaryMetrics evaluate_task1(const MtlModel<T>& model, const TaskDataset& task1,
                             std::size_t batch_size = 64);

}  // namespace detox::reward
