// Copyright 2026 The lmk Authors
// SPDX-License-Identifier: Apache-2.0

// Preference-aligned direction reweighting.
//
// A DirectionBasis holds, for every layer, a list of weighted rank-1
// components sigma_k * left_k * right_k^T and a map from component to a
// learnable coefficient phi_p. The merged weight of a layer is
//
//   W(phi) = W0 + sum_k phi_{p(k)} sigma_k left_k right_k^T
//
// Variant A uses the raw adapter columns (one coefficient per column),
// Variant B a shared left singular basis of the horizontally concatenated
// task updates (one coefficient per task and singular index), and the
// AdaMerging baseline one coefficient per (task, layer) shared by all of
// that adapter's columns.

#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lmk/adapters.hpp"
#include "lmk/optim.hpp"
#include "lmk/suite.hpp"

namespace lmk {

enum class BasisKind { variant_a, variant_b, adamerging };

const char* to_string(BasisKind k) noexcept;

inline constexpr double kPhiInit = 0.4;
inline constexpr double kAdaMergingInit = 0.3;

struct LayerBasis {
  std::string layer_id;
  Matrix base;
  std::vector<Rank1Direction> directions;
  std::vector<std::size_t> param_of;  // index into DirectionBasis::phi, per direction
  std::size_t param_offset = 0;
  std::size_t n_params = 0;
  std::vector<double> singular_values;  // Variant B: top-R spectrum of the concatenation
};

struct DirectionBasis {
  BasisKind kind = BasisKind::variant_a;
  std::vector<std::string> task_ids;
  std::vector<LayerBasis> layers;
  std::vector<double> phi;  // initial coefficients, layer blocks in order
  std::size_t R = 0;        // Variant B only

  std::size_t n_params() const noexcept { return phi.size(); }
};

DirectionBasis build_variant_a(const AdapterCollection& coll, double phi_init = kPhiInit);

/// Sum of the adapter ranks on the first layer, capped at min(d, m*N) per layer.
std::size_t default_shared_rank(const AdapterCollection& coll);

/// Throws std::invalid_argument when R exceeds min(d, m*N) on some layer.
DirectionBasis build_variant_b(const AdapterCollection& coll, std::optional<std::size_t> R = std::nullopt,
                               double phi_init = kPhiInit);

DirectionBasis build_adamerging(const AdapterCollection& coll, double init = kAdaMergingInit);

/// Per-layer merged weights. Linear in phi.
std::vector<Matrix> assemble(const DirectionBasis& basis, std::span<const double> phi);

/// Probability vector on the simplex.
struct Preference {
  std::vector<double> rho;

  static Preference uniform(std::size_t n);
  static Preference one_hot(std::size_t n, std::size_t i);
  /// Throws std::invalid_argument unless entries are nonnegative and sum to 1 within 1e-9.
  void validate() const;
};

/// Mean Shannon entropy (natural log) of probability rows. Each row must be
/// nonnegative and sum to 1 within 1e-6.
double entropy_loss(const Matrix& probs);

/// z_i: mean entropy on task i's adaptation pool with only adapter i applied.
std::vector<double> compute_anchors(const AdapterCollection& coll, const TaskSuite& suite);

/// alpha * log sum_i exp(rho_i |f_i - z_i| / alpha), evaluated with max subtraction.
double stch_objective(std::span<const double> f, std::span<const double> z, std::span<const double> rho,
                      double alpha);

/// Residuals with |f_i - z_i| below this get subgradient 0.
inline constexpr double kResidualKink = 1e-8;

/// d psi / d f_i of stch_objective.
std::vector<double> stch_gradient(std::span<const double> f, std::span<const double> z,
                                  std::span<const double> rho, double alpha);

enum class Scalarization { stch, weighted_sum };

struct ObjectiveConfig {
  Scalarization kind = Scalarization::stch;
  double alpha = 1.0;
  std::vector<double> anchors;  // required for stch
};

/// Row indices into each task's adaptation pool; an empty list means the whole pool.
using TaskBatches = std::vector<std::vector<std::size_t>>;

struct ObjectiveValue {
  double psi = 0.0;
  std::vector<double> f;     // per-task entropy
  std::vector<double> grad;  // d psi / d phi, empty when not requested
};

/// psi and its exact gradient with respect to phi through
/// phi -> W(phi) -> logits -> softmax -> entropy -> psi.
ObjectiveValue evaluate_objective(const DirectionBasis& basis, std::span<const double> phi,
                                  const TaskSuite& suite, const Preference& pref, const ObjectiveConfig& obj,
                                  const TaskBatches& batches, bool want_grad = true);

std::vector<double> gradient_phi(const DirectionBasis& basis, std::span<const double> phi,
                                 const TaskSuite& suite, const Preference& pref, const ObjectiveConfig& obj,
                                 const TaskBatches& batches);

struct OptimConfig {
  AdamWParams adam{};
  std::size_t batch_size = 16;
  std::size_t max_iters = 500;
  std::uint64_t seed = 0;
  double divergence_factor = 10.0;
};

struct TraceRow {
  std::size_t step = 0;
  double psi = 0.0;
  std::vector<double> f;
};

struct OptimResult {
  std::vector<double> phi;
  std::vector<TraceRow> trace;
};

class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Samples batch_size rows per task (with replacement) for a given step.
TaskBatches sample_batches(const TaskSuite& suite, const std::vector<std::string>& task_ids,
                           std::size_t batch_size, std::uint64_t seed, std::size_t step);

/// AdamW on phi from basis.phi for max_iters steps. Throws DivergenceError
/// when psi leaves the finite range or exceeds divergence_factor times its
/// first value (floored at 0.1).
OptimResult optimize(const DirectionBasis& basis, const TaskSuite& suite, const Preference& pref,
                     const ObjectiveConfig& obj, const OptimConfig& cfg);

struct MergeRun {
  DirectionBasis basis;
  OptimResult result;
  std::vector<Matrix> weights;
};

/// Variant A or B end to end: build basis, compute anchors, optimize, assemble.
MergeRun run_tara(const AdapterCollection& coll, const TaskSuite& suite, BasisKind variant,
                  const Preference& pref, double alpha, const OptimConfig& cfg,
                  std::optional<std::size_t> R = std::nullopt);

/// Layer-wise per-task coefficients from 0.3, preference-weighted entropy sum.
MergeRun adamerging_baseline(const AdapterCollection& coll, const TaskSuite& suite, const OptimConfig& cfg,
                             std::optional<Preference> pref = std::nullopt);

}  // namespace lmk
