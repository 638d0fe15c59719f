// Copyright 2026 The lmk Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "lmk/matrix.hpp"

namespace lmk {

/// Low-rank update for one (task, layer): delta = (lora_alpha / rank) * B * A^T,
/// with B of shape d x r and A of shape m x r.
struct LoraAdapter {
  std::string task_id;
  std::string layer_id;
  Matrix b;
  Matrix a;
  double lora_alpha = 16.0;
  double dropout = 0.0;  // metadata only

  std::size_t rank() const noexcept { return b.cols(); }
  std::size_t out_dim() const noexcept { return b.rows(); }
  std::size_t in_dim() const noexcept { return a.rows(); }
  double scale() const noexcept { return lora_alpha / static_cast<double>(rank()); }

  /// Throws std::invalid_argument when the factor shapes disagree.
  void validate() const;

  friend bool operator==(const LoraAdapter&, const LoraAdapter&) = default;
};

/// One rank-1 component sigma * left * right^T.
struct Rank1Direction {
  std::size_t owner_task = 0;
  std::size_t owner_index = 0;  // column j of the adapter, or singular index k
  std::vector<double> left;
  std::vector<double> right;
  double sigma = 1.0;

  Matrix outer() const;
};

struct LayerAdapters {
  std::string layer_id;
  Matrix base;                        // W0, d x m
  std::vector<LoraAdapter> adapters;  // one per task, in collection task order
};

/// Adapters for N tasks over an ordered list of layers.
struct AdapterCollection {
  std::vector<std::string> task_ids;
  std::vector<LayerAdapters> layers;

  std::size_t n_tasks() const noexcept { return task_ids.size(); }
  std::size_t n_layers() const noexcept { return layers.size(); }
  std::vector<std::string> layer_ids() const;
  std::vector<Matrix> base_weights() const;

  /// Index of a layer id, throws std::out_of_range when unknown.
  std::size_t layer_index(const std::string& layer_id) const;

  /// Keeps only the listed tasks (in the given order).
  AdapterCollection subset(const std::vector<std::size_t>& tasks) const;

  /// Task order identical on every layer, shapes consistent per layer.
  void validate() const;
};

/// scale * B * A^T
Matrix delta_weight(const LoraAdapter& ad);

/// Columns (b_j, a_j) as unit-sigma directions; scale * sum_j b_j a_j^T == delta_weight(ad).
std::vector<Rank1Direction> rank1_directions(const LoraAdapter& ad, std::size_t owner_task = 0);

/// Rounds every stored value through IEEE-754 binary32, matching what the
/// LMK1 container persists.
void round_to_f32(Matrix& m);
void round_to_f32(AdapterCollection& coll);

}  // namespace lmk
