// Copyright 2026 The lmk Authors
// SPDX-License-Identifier: Apache-2.0

#include "lmk/adapters.hpp"

#include <algorithm>
#include <stdexcept>

namespace lmk {

void LoraAdapter::validate() const {
  const std::string who = "adapter " + task_id + "/" + layer_id;
  if (b.cols() == 0) throw std::invalid_argument(who + ": rank must be positive");
  if (b.cols() != a.cols())
    throw std::invalid_argument(who + ": B is " + shape_str(b) + " but A is " + shape_str(a));
  if (rank() > std::min(out_dim(), in_dim()))
    throw std::invalid_argument(who + ": rank exceeds min(d, m)");
  if (!(lora_alpha > 0.0)) throw std::invalid_argument(who + ": lora_alpha must be positive");
}

Matrix Rank1Direction::outer() const {
  Matrix m(left.size(), right.size());
  add_outer(m, sigma, left, right);
  return m;
}

std::vector<std::string> AdapterCollection::layer_ids() const {
  std::vector<std::string> ids;
  ids.reserve(layers.size());
  for (const auto& l : layers) ids.push_back(l.layer_id);
  return ids;
}

std::vector<Matrix> AdapterCollection::base_weights() const {
  std::vector<Matrix> w;
  w.reserve(layers.size());
  for (const auto& l : layers) w.push_back(l.base);
  return w;
}

std::size_t AdapterCollection::layer_index(const std::string& layer_id) const {
  for (std::size_t i = 0; i < layers.size(); ++i)
    if (layers[i].layer_id == layer_id) return i;
  throw std::out_of_range("unknown layer '" + layer_id + "'");
}

AdapterCollection AdapterCollection::subset(const std::vector<std::size_t>& tasks) const {
  AdapterCollection out;
  for (std::size_t t : tasks) {
    if (t >= n_tasks()) throw std::out_of_range("task index out of range");
    out.task_ids.push_back(task_ids[t]);
  }
  for (const auto& l : layers) {
    LayerAdapters nl{l.layer_id, l.base, {}};
    for (std::size_t t : tasks) nl.adapters.push_back(l.adapters[t]);
    out.layers.push_back(std::move(nl));
  }
  return out;
}

void AdapterCollection::validate() const {
  if (layers.empty()) throw std::invalid_argument("collection has no layers");
  for (std::size_t i = 0; i < task_ids.size(); ++i)
    for (std::size_t j = i + 1; j < task_ids.size(); ++j)
      if (task_ids[i] == task_ids[j])
        throw std::invalid_argument("duplicate task id '" + task_ids[i] + "'");
  for (const auto& l : layers) {
    if (l.base.empty()) throw std::invalid_argument("layer " + l.layer_id + " has no base weight");
    if (l.adapters.size() != task_ids.size())
      throw std::invalid_argument("layer " + l.layer_id + " has " +
                                  std::to_string(l.adapters.size()) + " adapters for " +
                                  std::to_string(task_ids.size()) + " tasks");
    for (std::size_t t = 0; t < l.adapters.size(); ++t) {
      const auto& ad = l.adapters[t];
      if (ad.task_id != task_ids[t] || ad.layer_id != l.layer_id)
        throw std::invalid_argument("layer " + l.layer_id + ": task order differs at position " +
                                    std::to_string(t));
      ad.validate();
      if (ad.out_dim() != l.base.rows() || ad.in_dim() != l.base.cols())
        throw std::invalid_argument("adapter " + ad.task_id + "/" + l.layer_id +
                                    " does not match base " + shape_str(l.base));
    }
  }
}

Matrix delta_weight(const LoraAdapter& ad) {
  ad.validate();
  Matrix d = matmul_nt(ad.b, ad.a);
  d *= ad.scale();
  return d;
}

std::vector<Rank1Direction> rank1_directions(const LoraAdapter& ad, std::size_t owner_task) {
  ad.validate();
  std::vector<Rank1Direction> dirs;
  dirs.reserve(ad.rank());
  for (std::size_t j = 0; j < ad.rank(); ++j)
    dirs.push_back(Rank1Direction{owner_task, j, ad.b.col(j), ad.a.col(j), 1.0});
  return dirs;
}

void round_to_f32(Matrix& m) {
  for (double& v : m.data()) v = static_cast<double>(static_cast<float>(v));
}

void round_to_f32(AdapterCollection& coll) {
  for (auto& l : coll.layers) {
    round_to_f32(l.base);
    for (auto& ad : l.adapters) {
      round_to_f32(ad.b);
      round_to_f32(ad.a);
    }
  }
}

}  // namespace lmk
