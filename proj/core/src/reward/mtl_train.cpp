#include "detox/reward/mtl_train.hpp"

#include <algorithm>
#include <numeric>
#include <string>

#include "detox/core/error.hpp"

namespace detox::reward {

void MtlTrainConfig::validate() const {
  if (batch_size == 0) throw ConfigError("mtl training: batch_size must be positive");
  if (phase2_epochs == 0) throw ConfigError("mtl training: phase2_epochs must be positive");
  if (!(adam.learning_rate > 0.0)) throw ConfigError("mtl training: learning rate must be > 0");
}

std::vector<PlannedBatch> plan_epoch(const TaskDatasets& datasets, const std::vector<int>& tasks,
                                     std::size_t batch_size, core::Rng& rng) {
  std::vector<PlannedBatch> batches;
  for (int task : tasks) {
    const TaskDataset& ds = datasets[static_cast<std::size_t>(task - 1)];
    std::vector<std::size_t> order(ds.examples.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    core::shuffle(order, rng);
    for (std::size_t start = 0; start < order.size(); start += batch_size) {
      const std::size_t end = std::min(order.size(), start + batch_size);
      batches.push_back({task, std::vector<std::size_t>(order.begin() + start, order.begin() + end)});
    }
  }
  core::shuffle(batches, rng);
  return batches;
}

namespace {

template <typename T>
double train_batch(MtlModel<T>& model, core::Adam<T>& adam, const TaskDataset& ds,
                   const PlannedBatch& batch) {
  std::vector<const TaskExample*> examples;
  examples.reserve(batch.indices.size());
  for (std::size_t i : batch.indices) examples.push_back(&ds.examples[i]);
  model.parameters().zero_grad();
  core::Tensor<T> loss = mtl_loss(model, std::span<const TaskExample* const>(examples), batch.task_id);
  loss.backward();
  adam.step();
  return static_cast<double>(loss.item());
}

template <typename T>
std::vector<ScheduleEntry> run_phases(MtlModel<T>& model, const TaskDatasets& datasets,
                                      const std::vector<std::pair<std::size_t, std::vector<int>>>& phases,
                                      const MtlTrainConfig& config, core::Rng& rng,
                                      const ScheduleCallback& on_step) {
  core::Adam<T> adam(model.parameters(), config.adam);
  std::vector<ScheduleEntry> log;
  std::size_t epoch = 0, step = 0;
  for (const auto& [epochs, tasks] : phases) {
    for (std::size_t e = 0; e < epochs; ++e) {
      ++epoch;
      for (const PlannedBatch& batch : plan_epoch(datasets, tasks, config.batch_size, rng)) {
        const double loss =
            train_batch(model, adam, datasets[static_cast<std::size_t>(batch.task_id - 1)], batch);
        log.push_back({epoch, ++step, batch.task_id, loss});
        if (on_step) on_step(log.back());
      }
    }
  }
  return log;
}

}  // namespace

template <typename T>
std::vector<ScheduleEntry> train_anti_curriculum(MtlModel<T>& model, const TaskDatasets& datasets,
                                                 const MtlTrainConfig& config, core::Rng& rng,
                                                 const ScheduleCallback& on_step) {
  config.validate();
  for (int t = 1; t <= kNumTasks; ++t) {
    if (!model.has_task(t)) {
      throw ConfigError("mtl training: model lacks a head for task " + std::to_string(t));
    }
    if (datasets[static_cast<std::size_t>(t - 1)].examples.empty()) {
      throw ConfigError("mtl training: no examples for task " + std::to_string(t) +
                        (t >= 3 ? " (identity-labeled subset missing)" : ""));
    }
  }
  const std::vector<int> harder{2, 3, 4, 5, 6};
  const std::vector<int> all{1, 2, 3, 4, 5, 6};
  return run_phases(model, datasets, {{config.phase1_epochs, harder}, {config.phase2_epochs, all}},
                    config, rng, on_step);
}

template <typename T>
std::vector<ScheduleEntry> train_single_task_ablation(MtlModel<T>& model,
                                                      const TaskDataset& task1,
                                                      const MtlTrainConfig& config,
                                                      core::Rng& rng,
                                                      const ScheduleCallback& on_step) {
  config.validate();
  if (task1.task_id != kToxicityTask) throw ConfigError("single-task ablation needs Task 1 data");
  if (task1.examples.empty()) throw DataError("single-task ablation: no Task 1 examples");
  TaskDatasets datasets;
  datasets[0] = task1;
  return run_phases(model, datasets, {{config.phase1_epochs + config.phase2_epochs, {1}}}, config,
                    rng, on_step);
}

BinaryMetrics binary_metrics(const std::vector<int>& predicted_toxic,
                             const std::vector<int>& actual_toxic) {
  if (predicted_toxic.size() != actual_toxic.size()) {
    throw DataError("binary_metrics: prediction and label counts differ");
  }
  BinaryMetrics m;
  for (std::size_t i = 0; i < actual_toxic.size(); ++i) {
    const bool p = predicted_toxic[i] != 0, a = actual_toxic[i] != 0;
    if (p && a) ++m.true_positive;
    if (p && !a) ++m.false_positive;
    if (!p && !a) ++m.true_negative;
    if (!p && a) ++m.false_negative;
  }
  const double tp = static_cast<double>(m.true_positive);
  const double pp = tp + static_cast<double>(m.false_positive);
  const double ap = tp + static_cast<double>(m.false_negative);
  m.precision = pp > 0 ? tp / pp : 0.0;
  m.recall = ap > 0 ? tp / ap : 0.0;
  m.f1 = m.precision + m.recall > 0 ? 2 * m.precision * m.recall / (m.precision + m.recall) : 0.0;
  m.accuracy = actual_toxic.empty()
                   ? 0.0
                   : static_cast<double>(m.true_positive + m.true_negative) /
                         static_cast<double>(actual_toxic.size());
  return m;
}

template <typename T>
BinaryMetrics evaluate_task1(const MtlModel<T>& model, const TaskDataset& task1,
                             std::size_t batch_size) {
  std::vector<int> predicted, actual;
  for (std::size_t start = 0; start < task1.examples.size(); start += batch_size) {
    const std::size_t end = std::min(task1.examples.size(), start + batch_size);
    std::vector<std::vector<int>> inputs;
    for (std::size_t i = start; i < end; ++i) {
      inputs.push_back(task1.examples[i].tokens);
      actual.push_back(task1.examples[i].label == kToxicLabel ? 1 : 0);
    }
    for (double p : model.toxicity_scores(inputs)) predicted.push_back(p >= 0.5 ? 1 : 0);
  }
  return binary_metrics(predicted, actual);
}

#define DETOX_INSTANTIATE_MTL_TRAIN(T)                                                          \
  template std::vector<ScheduleEntry> train_anti_curriculum(                                    \
      MtlModel<T>&, const TaskDatasets&, const MtlTrainConfig&, core::Rng&,                     \
      const ScheduleCallback&);                                                                 \
  template std::vector<ScheduleEntry> train_single_task_ablation(                               \
      MtlModel<T>&, const TaskDataset&, const MtlTrainConfig&, core::Rng&,                      \
      const ScheduleCallback&);                                                                 \
  template BinaryMetrics evaluate_task1(const MtlModel<T>&, const TaskDataset&, std::size_t);

DETOX_INSTANTIATE_MTL_TRAIN(float)
DETOX_INSTANTIATE_MTL_TRAIN(double)

}  // namespace detox::reward
