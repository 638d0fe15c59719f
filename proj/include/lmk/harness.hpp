// Copyright 2026 The lmk Authors
// SPDX-License-Identifier: Apache-2.0

// Synthetic multi-task harness: suite generation, toy LoRA fine-tuning,
// evaluation protocols and a uniform runner over every merging method.

#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "lmk/adapters.hpp"
#include "lmk/mergers.hpp"
#include "lmk/suite.hpp"
#include "lmk/tara.hpp"

namespace lmk {

/// Gaussian-mixture tasks over a frozen base. Each task's class means live in
/// its own signal subspace of the input, and layer 0 of the base maps the
/// union of those subspaces to zero, so the base alone is near chance.
TaskSuite generate_suite(const SuiteParams& params);

/// Adds a task with the class means, head and reference of `source` but
/// freshly drawn samples.
void add_twin_task(TaskSuite& suite, std::size_t source, const std::string& id, std::uint64_t seed);

struct FinetuneConfig {
  std::size_t rank = 16;
  double lora_alpha = 16.0;
  double dropout = 0.1;  // recorded only
  std::size_t steps = 300;
  double lr = 1e-2;
  std::size_t batch_size = 32;
  bool train_head = true;
  std::uint64_t seed = 0;
  double divergence_factor = 10.0;

  void validate(const SuiteParams& p) const;
};

struct FinetuneResult {
  std::vector<LoraAdapter> adapters;  // one per layer
  Matrix head;
  double eval_accuracy = 0.0;
  std::vector<double> loss_trace;
};

/// Cross-entropy training of one task's adapters (B = 0, A small Gaussian at
/// start) and head with AdamW. Zero steps leaves delta = 0.
FinetuneResult finetune_lora(const TaskSuite& suite, std::size_t task, const FinetuneConfig& cfg);

struct ToyRun {
  TaskSuite suite;
  AdapterCollection coll;
};

/// Generates the suite, fine-tunes every task, rounds adapters and base to
/// binary32 and records each task's reference accuracy with the rounded values.
ToyRun train_toy(const SuiteParams& params, const FinetuneConfig& ft);

struct TaskScore {
  std::string task_id;
  double accuracy = 0.0;    // fraction in [0, 1]
  double normalized = 0.0;  // percent of the fine-tuned reference
};

struct SplitSummary {
  std::vector<std::string> seen;
  std::vector<std::string> unseen;
  double seen_avg = 0.0;  // normalized, percent
  std::optional<double> unseen_avg;
  double combined_avg = 0.0;
};

struct EvalReport {
  std::vector<TaskScore> tasks;
  double avg_accuracy = 0.0;
  double avg_normalized = 0.0;
  std::vector<std::pair<std::size_t, double>> hits;  // (k, Hits@k)
  std::optional<SplitSummary> split;

  const TaskScore& score(const std::string& task_id) const;
};

/// Accuracy of each listed task (all when empty) under its own head.
/// Throws std::invalid_argument when a task has no reference.
EvalReport evaluate(std::span<const Matrix> weights, const TaskSuite& suite,
                    const std::vector<std::size_t>& subset = {});

/// Joint scores over the union label space: every head is applied to the
/// shared features, columns with the same label id merge by max, and a
/// label's rank counts strictly larger scores plus equal scores at a smaller
/// union index.
Matrix joint_scores(std::span<const Matrix> weights, const TaskSuite& suite, const Matrix& x);

/// Hits@k over the pooled eval sets of the listed tasks (all when empty).
std::vector<std::pair<std::size_t, double>> evaluate_joint(std::span<const Matrix> weights, const TaskSuite& suite,
                                                           std::vector<std::size_t> ks = {1, 3, 5},
                                                           const std::vector<std::size_t>& subset = {});

/// A merging method plus every knob it may use.
struct MethodSpec {
  std::string name = "ta";  // a MergeMethod name, "tara-a", "tara-b" or "adamerging"
  MergeConfig merge{};
  std::optional<Preference> pref;  // uniform when absent
  double alpha = 1.0;
  OptimConfig optim{};
  std::optional<std::size_t> shared_rank;

  bool is_optimized() const;
  void validate() const;
};

const std::vector<std::string>& method_names();

struct MethodOutcome {
  std::vector<Matrix> weights;
  std::optional<MergeRun> run;  // optimized methods only
};

MethodOutcome run_method(const AdapterCollection& coll, const TaskSuite& suite, const MethodSpec& spec);

struct SweepPoint {
  Preference pref;
  EvalReport report;
};

/// One optimize + evaluate per preference. Points run on a small thread pool
/// and come back in input order.
std::vector<SweepPoint> sweep_preferences(const AdapterCollection& coll, const TaskSuite& suite,
                                          const std::vector<Preference>& prefs, const MethodSpec& spec,
                                          std::size_t threads = 0);

/// Evenly spaced two-task preferences (t, 1 - t), t from lo to hi.
std::vector<Preference> two_task_grid(std::size_t points, double lo = 0.0, double hi = 1.0);

/// k preferences with the given entries fixed and the rest drawn uniformly
/// from the scaled simplex.
std::vector<Preference> random_completions(std::size_t n_tasks, const std::map<std::size_t, double>& fixed,
                                           std::size_t k, std::uint64_t seed);

/// Sample covariance (n - 1 denominator) of two tasks' accuracies over a sweep.
double focal_covariance(const std::vector<SweepPoint>& pts, const std::string& a, const std::string& b);

/// Merge only the `seen` tasks (indices into coll), evaluate every suite task.
EvalReport unseen_split_eval(const AdapterCollection& coll, const TaskSuite& suite,
                             const std::vector<std::size_t>& seen, const MethodSpec& spec);

/// Pool-adjacent-violators fit, non-decreasing.
std::vector<double> isotonic_increasing(std::span<const double> y);

/// Spearman correlation with average ranks for ties; 0 when either side is constant.
double spearman(std::span<const double> x, std::span<const double> y);

nlohmann::json to_json(const SuiteParams& p);
SuiteParams suite_params_from_json(const nlohmann::json& j);
nlohmann::json to_json(const FinetuneConfig& c);
FinetuneConfig finetune_config_from_json(const nlohmann::json& j);

/// Heads, label ids, references and generator parameters. Datasets are
/// regenerated from the parameters.
nlohmann::json suite_sidecar(const TaskSuite& suite);
TaskSuite suite_from_sidecar(const nlohmann::json& j);

nlohmann::json to_json(const EvalReport& r);
std::string to_csv(const EvalReport& r);
std::string sweep_csv(const std::vector<SweepPoint>& pts);

}  // namespace lmk
