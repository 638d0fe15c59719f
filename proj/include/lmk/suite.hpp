// Copyright 2026 The lmk Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "lmk/matrix.hpp"

namespace lmk {

struct Dataset {
  Matrix x;            // n x m
  std::vector<int> y;  // class index within the task
  std::size_t size() const noexcept { return y.size(); }
};

struct Task {
  std::string id;
  std::vector<int> label_ids;  // global label id of each local class
  Matrix class_means;          // classes x m
  Dataset train;
  Dataset eval;
  Dataset adapt;  // labels kept for bookkeeping, never read by label-free objectives
  Matrix head;    // classes x d
  double reference_accuracy = std::numeric_limits<double>::quiet_NaN();

  std::size_t n_classes() const noexcept { return label_ids.size(); }
  bool has_reference() const noexcept { return reference_accuracy == reference_accuracy; }
};

/// Generator parameters. Identical parameters give an identical suite.
struct SuiteParams {
  std::size_t n_tasks = 4;
  std::size_t d = 32;
  std::size_t m = 24;
  std::size_t classes = 5;
  std::size_t n_layers = 2;
  std::size_t n_train = 400;
  std::size_t n_eval = 200;
  std::size_t n_adapt = 200;
  std::size_t signal_dim = 4;     // per-task discriminative input subspace
  double class_sep = 5.0;         // class-mean scale inside that subspace
  double noise_std = 1.0;
  std::size_t shared_labels = 0;  // leading classes whose label id is shared by all tasks
  std::uint64_t seed = 0;

  void validate() const;
};

/// Frozen base network plus N labelled classification tasks.
struct TaskSuite {
  SuiteParams params;
  std::vector<std::string> layer_ids;
  std::vector<Matrix> base;  // W0 per layer; layer 0 is d x m, later layers d x d
  std::vector<Task> tasks;
  std::vector<double> preference;  // default rho, uniform

  std::size_t n_tasks() const noexcept { return tasks.size(); }
  std::size_t n_layers() const noexcept { return base.size(); }
  /// Distinct label ids over all tasks, ascending.
  std::vector<int> label_union() const;
};

}  // namespace lmk
