// Copyright 2026 The lmk Authors
// SPDX-License-Identifier: Apache-2.0

// Baseline mergers. Each returns the merged weight of every layer (in
// collection layer order); the LoRA-structured ones also expose the merged
// adapters they build.

#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "lmk/adapters.hpp"

namespace lmk {

enum class MergeMethod { ta, ties, dare_ties, linear, svd, knots_ties, knots_dare_ties, lora_lego };
enum class LegoReweight { parameter, output };

const char* to_string(MergeMethod m) noexcept;
const char* to_string(LegoReweight r) noexcept;
std::optional<MergeMethod> parse_merge_method(const std::string& s);

inline constexpr double kTaskArithmeticLambda = 0.3;

struct MergeConfig {
  MergeMethod method = MergeMethod::ta;
  double lambda = kTaskArithmeticLambda;
  double trim_fraction = 0.8;  // share of entries zeroed per task before sign election
  double drop_prob = 0.5;
  std::size_t k_clusters = 16;
  LegoReweight lego_reweight = LegoReweight::output;
  std::uint64_t rng_seed = 0;
  std::size_t target_rank = 16;

  void validate() const;
  /// Only the keys relevant to `method` are emitted.
  nlohmann::json to_json() const;
  /// Rejects unknown keys and keys irrelevant to the chosen method.
  static MergeConfig from_json(const nlohmann::json& j);
};

std::vector<Matrix> merge_ta(const AdapterCollection& coll, double lambda);

/// Zeroes all but the ceil((1 - trim_fraction) * size) largest-magnitude
/// entries (stable: lower index wins equal magnitudes).
Matrix trim_top_magnitude(const Matrix& delta, double trim_fraction);

/// Trim, elect a sign per entry by summed magnitude (ties positive), and
/// average the surviving entries that agree with it. No lambda applied.
Matrix ties_combine(std::span<const Matrix> deltas, double trim_fraction);

std::vector<Matrix> merge_ties(const AdapterCollection& coll, double lambda, double trim_fraction);

/// Drops each entry with probability p and rescales survivors by 1/(1-p).
/// The draw for entry i depends only on (seed, task, layer, i).
Matrix dare_sparsify(const Matrix& delta, double p, std::uint64_t seed, std::size_t task, std::size_t layer);

std::vector<Matrix> merge_dare_ties(const AdapterCollection& coll, double lambda, double trim_fraction, double p,
                                    std::uint64_t seed);

/// B = lambda * sum_i s_i B_i, A = sum_i A_i with s_i the adapter scales;
/// the result carries scale 1. Requires uniform rank.
std::vector<LoraAdapter> merge_linear(const AdapterCollection& coll, double lambda);

/// Truncated SVD of lambda * sum_i delta_i: B = U_r Sigma_r, A = V_r, scale 1.
std::vector<LoraAdapter> merge_svd(const AdapterCollection& coll, double lambda, std::size_t target_rank);

enum class KnotsInner { ties, dare_ties };

/// Thin SVD of the row-stacked updates [delta_1; ...; delta_N] = U Sigma V^T,
/// truncated to its numerical rank; the
/// per-task row blocks U_i are combined by the inner merger into M, and the
/// merged update is lambda * M Sigma V^T.
std::vector<Matrix> merge_knots(const AdapterCollection& coll, double lambda, KnotsInner inner,
                                double trim_fraction, double p, std::uint64_t seed);

struct KMeansResult {
  Matrix centroids;                     // k x dim
  std::vector<std::size_t> assignment;  // per point
  double inertia = 0.0;
  std::size_t iterations = 0;
};

/// Lloyd iterations from k-means++ seeding drawn from KeyedRng(seed, stream).
/// Stops after max_iter iterations or when the relative inertia change drops
/// below rel_tol. An empty cluster is re-seeded at the point farthest from
/// its centroid (lowest index on ties).
KMeansResult kmeans(const Matrix& points, std::size_t k, std::uint64_t seed, std::uint64_t stream,
                    std::size_t max_iter = 100, double rel_tol = 1e-8);

/// Rows [a_j ; s * b_j] for every column j of every adapter on the layer.
Matrix lego_units(const LayerAdapters& layer);

std::vector<LoraAdapter> merge_lora_lego(const AdapterCollection& coll, std::size_t k_clusters,
                                         LegoReweight reweight, std::uint64_t seed);

/// W0 + delta(merged adapter), per layer.
std::vector<Matrix> apply_adapters(const AdapterCollection& coll, std::span<const LoraAdapter> merged);

std::vector<Matrix> merge(const AdapterCollection& coll, const MergeConfig& cfg);

/// Value lists for a grid search; empty lists keep the base config's value.
struct GridSpec {
  std::vector<double> lambdas;
  std::vector<double> trim_fractions;
  std::vector<double> drop_probs;
  std::vector<std::size_t> k_clusters;

  /// lambda in 0.1..1.0
  static GridSpec task_arithmetic();
  /// lambda in 0.8..1.8, trim in 0.1..0.9
  static GridSpec ties();
  /// k in {8, 16, 32, 64, 128}
  static GridSpec lora_lego();
};

struct GridResult {
  MergeConfig best;
  double best_score = 0.0;
  std::vector<std::pair<MergeConfig, double>> evaluated;
};

/// Scores every grid point (higher is better); first best wins ties.
GridResult grid_search(const AdapterCollection& coll, const MergeConfig& base, const GridSpec& grid,
                       const std::function<double(const std::vector<Matrix>&)>& score);

}  // namespace lmk
