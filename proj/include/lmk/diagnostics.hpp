// Copyright 2026 The lmk Authors
// SPDX-License-Identifier: Apache-2.0

// Coverage and anisotropy diagnostics for a set of LoRA adapters.
//
// Coverage compares three stacks of vectorized updates per layer: each
// task's own rank-1 directions, one row per task update (agnostic), and all
// rank-1 directions of all tasks together (aware). Anisotropy looks at the
// task-loss Jacobian restricted to a set of rank-1 directions.

#pragma once

#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "lmk/adapters.hpp"
#include "lmk/suite.hpp"

namespace lmk {

/// Singular values of a row stack given its Gram matrix (rows' inner products).
std::vector<double> stack_singular_values(const Matrix& gram);

/// Gram matrix of vec(s_k l_k r_k^T) rows: (l_i.l_j)(r_i.r_j) s_i s_j.
Matrix direction_gram(std::span<const Rank1Direction> dirs);

/// Gram matrix of vec(delta_i) rows, computed from the factors.
Matrix delta_gram(std::span<const LoraAdapter> adapters);

/// erank of one stack; absent when the stack is all zero.
struct StackRank {
  std::optional<double> erank;
  std::vector<double> sigma;
};

struct LayerCoverage {
  std::string layer_id;
  std::vector<StackRank> per_task;
  double per_task_sum = 0.0;  // over tasks whose stack is nonzero
  StackRank agnostic;
  StackRank aware;
  std::vector<std::string> warnings;

  /// per_task_sum >= aware >= agnostic, with `slack` absolute tolerance.
  bool ordered(double slack = 1e-9) const;
};

LayerCoverage coverage_stacks(const std::string& layer_id, std::span<const LoraAdapter> adapters);

/// Means over layers of the per-layer values, plus the per-layer breakdown.
struct CoverageReport {
  double per_task_sum = 0.0;
  double agnostic_erank = 0.0;
  double aware_erank = 0.0;
  std::vector<LayerCoverage> layers;
};

CoverageReport coverage_report(const AdapterCollection& coll);

struct Jacobian {
  Matrix entries;  // N x K
  std::vector<std::pair<std::size_t, std::size_t>> direction_ids;  // (owner task, index)
};

/// J(i, k) = <grads[i], sigma_k left_k right_k^T>_F.
Jacobian jacobian(std::span<const Rank1Direction> directions, std::span<const Matrix> grads);

struct Anisotropy {
  std::vector<double> sigma;  // singular values of J, descending
  double kappa = 1.0;         // sigma_max / smallest sigma above kZeroSingularRel * sigma_max
  std::size_t rank = 0;
  Matrix v;  // K x rank, right singular vectors of the nonzero part
};

/// Throws std::invalid_argument when J is zero.
Anisotropy anisotropy(const Jacobian& j);

struct SensitivityProfile {
  std::vector<double> h;
  std::vector<double> rho;
};

/// h = J^T rho.
SensitivityProfile sensitivity_profile(const Jacobian& j, std::span<const double> rho);
SensitivityProfile sensitivity_profile(std::span<const Rank1Direction> directions, std::span<const Matrix> grads,
                                       std::span<const double> rho);

/// 1 - |<h1, h2>| / (|h1| |h2|), clamped to [0, 1]. Throws
/// std::domain_error("undefined misalignment") when either norm is below 1e-12.
double misalignment_xi(std::span<const double> h1, std::span<const double> h2);
double misalignment_xi(const SensitivityProfile& a, const SensitivityProfile& b);

/// Per-task entropy gradients on the full adaptation pools: [task][layer].
std::vector<std::vector<Matrix>> task_gradients(std::span<const Matrix> weights, const TaskSuite& suite,
                                                const std::vector<std::string>& task_ids);

/// Raw adapter columns of one layer with sigma = adapter scale.
std::vector<Rank1Direction> raw_directions(const LayerAdapters& layer);

inline constexpr double kXiMergeLambda = 0.3;

struct XiResult {
  std::string layer_id;
  std::size_t onehot_task = 0;
  double xi = 0.0;
};

/// xi(uniform, one-hot on `onehot_task`) at W0 + 0.3 sum delta_i for one layer.
double xi_protocol(const AdapterCollection& coll, const TaskSuite& suite, const std::string& layer_id,
                   std::size_t onehot_task = 0);

/// xi_protocol for every layer and every one-hot task.
std::vector<XiResult> xi_all(const AdapterCollection& coll, const TaskSuite& suite);

enum class DirectionSet { raw, shared };

struct KappaResult {
  std::string layer_id;
  DirectionSet set = DirectionSet::raw;
  Anisotropy anis;
};

/// Jacobian spectra at the 0.3 task-arithmetic merge for raw and shared-SVD directions.
std::vector<KappaResult> kappa_profile(const AdapterCollection& coll, const TaskSuite& suite);

nlohmann::json to_json(const CoverageReport& r);
nlohmann::json to_json(const std::vector<XiResult>& xs);
nlohmann::json to_json(const std::vector<KappaResult>& ks);

/// Long-format CSV rows "section,layer,key,value".
std::string coverage_csv(const CoverageReport& r);
std::string xi_csv(const std::vector<XiResult>& xs);
std::string kappa_csv(const std::vector<KappaResult>& ks);

}  // namespace lmk
