// Copyright 2026 The lmk Authors
// SPDX-License-Identifier: Apache-2.0

#include "lmk/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <stdexcept>

#include "lmk/linalg.hpp"
#include "lmk/model.hpp"
#include "lmk/mergers.hpp"
#include "lmk/tara.hpp"

namespace lmk {

using nlohmann::json;

namespace {

constexpr double kMinProfileNorm = 1e-12;

StackRank rank_of(const Matrix& gram) {
  StackRank s;
  s.sigma = stack_singular_values(gram);
  if (!s.sigma.empty() && s.sigma.front() > 0.0) s.erank = effective_rank(s.sigma);
  return s;
}

std::size_t task_index(const TaskSuite& suite, const std::string& id) {
  for (std::size_t i = 0; i < suite.tasks.size(); ++i)
    if (suite.tasks[i].id == id) return i;
  throw std::invalid_argument("suite has no task '" + id + "'");
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

json opt_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

}  // namespace

std::vector<double> stack_singular_values(const Matrix& gram) {
  if (gram.rows() != gram.cols()) throw std::invalid_argument("Gram matrix must be square");
  if (gram.rows() == 0) return {};
  // The Gram matrix is symmetric PSD, so its singular values are its eigenvalues.
  std::vector<double> ev = singular_values(gram);
  for (double& e : ev) e = std::sqrt(std::max(e, 0.0));
  return ev;
}

Matrix direction_gram(std::span<const Rank1Direction> dirs) {
  const std::size_t k = dirs.size();
  Matrix g(k, k);
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = i; j < k; ++j) {
      const double v = dirs[i].sigma * dirs[j].sigma * dot(dirs[i].left, dirs[j].left) *
                       dot(dirs[i].right, dirs[j].right);
      g(i, j) = v;
      g(j, i) = v;
    }
  return g;
}

Matrix delta_gram(std::span<const LoraAdapter> adapters) {
  const std::size_t n = adapters.size();
  Matrix g(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i; j < n; ++j) {
      // <B A^T, B' A'^T>_F = sum((B^T B') o (A^T A'))
      const Matrix bb = matmul_tn(adapters[i].b, adapters[j].b);
      const Matrix aa = matmul_tn(adapters[i].a, adapters[j].a);
      double s = 0.0;
      for (std::size_t e = 0; e < bb.size(); ++e) s += bb.data()[e] * aa.data()[e];
      s *= adapters[i].scale() * adapters[j].scale();
      g(i, j) = s;
      g(j, i) = s;
    }
  return g;
}

bool LayerCoverage::ordered(double slack) const {
  if (!aware.erank || !agnostic.erank) return false;
  return per_task_sum + slack >= *aware.erank && *aware.erank + slack >= *agnostic.erank;
}

LayerCoverage coverage_stacks(const std::string& layer_id, std::span<const LoraAdapter> adapters) {
  if (adapters.empty()) throw std::invalid_argument("coverage_stacks: no adapters");
  LayerCoverage out;
  out.layer_id = layer_id;
  std::vector<Rank1Direction> all;
  for (std::size_t t = 0; t < adapters.size(); ++t) {
    auto dirs = rank1_directions(adapters[t], t);
    for (auto& d : dirs) d.sigma = adapters[t].scale();
    StackRank s = rank_of(direction_gram(dirs));
    if (s.erank)
      out.per_task_sum += *s.erank;
    else
      out.warnings.push_back("task " + adapters[t].task_id + ": zero stack");
    out.per_task.push_back(std::move(s));
    all.insert(all.end(), dirs.begin(), dirs.end());
  }
  out.agnostic = rank_of(delta_gram(adapters));
  if (!out.agnostic.erank) out.warnings.push_back("agnostic stack is zero");
  out.aware = rank_of(direction_gram(all));
  if (!out.aware.erank) out.warnings.push_back("aware stack is zero");
  return out;
}

CoverageReport coverage_report(const AdapterCollection& coll) {
  coll.validate();
  CoverageReport r;
  std::size_t n_ag = 0;
  std::size_t n_aw = 0;
  for (const auto& layer : coll.layers) {
    LayerCoverage lc = coverage_stacks(layer.layer_id, layer.adapters);
    r.per_task_sum += lc.per_task_sum;
    if (lc.agnostic.erank) {
      r.agnostic_erank += *lc.agnostic.erank;
      ++n_ag;
    }
    if (lc.aware.erank) {
      r.aware_erank += *lc.aware.erank;
      ++n_aw;
    }
    r.layers.push_back(std::move(lc));
  }
  if (!r.layers.empty()) r.per_task_sum /= static_cast<double>(r.layers.size());
  if (n_ag) r.agnostic_erank /= static_cast<double>(n_ag);
  if (n_aw) r.aware_erank /= static_cast<double>(n_aw);
  return r;
}

Jacobian jacobian(std::span<const Rank1Direction> directions, std::span<const Matrix> grads) {
  Jacobian j;
  j.entries = Matrix(grads.size(), directions.size());
  for (std::size_t i = 0; i < grads.size(); ++i) {
    for (std::size_t k = 0; k < directions.size(); ++k) {
      const auto& d = directions[k];
      if (d.left.size() != grads[i].rows() || d.right.size() != grads[i].cols())
        throw std::invalid_argument("jacobian: direction " + std::to_string(k) + " does not match gradient shape " +
                                    shape_str(grads[i]));
      j.entries(i, k) = d.sigma * bilinear(d.left, grads[i], d.right);
    }
  }
  for (const auto& d : directions) j.direction_ids.emplace_back(d.owner_task, d.owner_index);
  return j;
}

Anisotropy anisotropy(const Jacobian& j) {
  if (j.entries.empty()) throw std::invalid_argument("anisotropy: empty Jacobian");
  const SvdResult s = svd(j.entries);
  if (s.sigma.empty() || s.sigma.front() <= 0.0) throw std::invalid_argument("anisotropy: Jacobian is zero");
  Anisotropy a;
  a.sigma = s.sigma;
  a.rank = s.rank();
  a.kappa = s.sigma.front() / s.sigma[a.rank - 1];
  a.v = Matrix(s.v.rows(), a.rank);
  for (std::size_t r = 0; r < s.v.rows(); ++r)
    for (std::size_t c = 0; c < a.rank; ++c) a.v(r, c) = s.v(r, c);
  return a;
}

SensitivityProfile sensitivity_profile(const Jacobian& j, std::span<const double> rho) {
  Preference p{std::vector<double>(rho.begin(), rho.end())};
  p.validate();
  if (rho.size() != j.entries.rows()) throw std::invalid_argument("sensitivity_profile: preference length mismatch");
  SensitivityProfile out;
  out.rho = p.rho;
  out.h.assign(j.entries.cols(), 0.0);
  for (std::size_t i = 0; i < j.entries.rows(); ++i)
    for (std::size_t k = 0; k < j.entries.cols(); ++k) out.h[k] += rho[i] * j.entries(i, k);
  return out;
}

SensitivityProfile sensitivity_profile(std::span<const Rank1Direction> directions, std::span<const Matrix> grads,
                                       std::span<const double> rho) {
  return sensitivity_profile(jacobian(directions, grads), rho);
}

double misalignment_xi(std::span<const double> h1, std::span<const double> h2) {
  if (h1.size() != h2.size()) throw std::invalid_argument("misalignment_xi: length mismatch");
  const double s11 = dot(h1, h1);
  const double s22 = dot(h2, h2);
  if (std::sqrt(s11) < kMinProfileNorm || std::sqrt(s22) < kMinProfileNorm)
    throw std::domain_error("undefined misalignment");
  // sqrt(s * s) == s exactly, so identical or negated profiles give 0.
  const double c = std::abs(dot(h1, h2)) / std::sqrt(s11 * s22);
  return std::clamp(1.0 - c, 0.0, 1.0);
}

double misalignment_xi(const SensitivityProfile& a, const SensitivityProfile& b) {
  return misalignment_xi(a.h, b.h);
}

std::vector<std::vector<Matrix>> task_gradients(std::span<const Matrix> weights, const TaskSuite& suite,
                                                const std::vector<std::string>& task_ids) {
  std::vector<std::vector<Matrix>> out;
  for (const auto& id : task_ids) {
    const Task& task = suite.tasks[task_index(suite, id)];
    const ForwardCache cache = forward(weights, task.head, task.adapt.x);
    const LossGrad lg = entropy_loss_grad(cache.logits);
    out.push_back(backward(cache, weights, task.head, lg.dlogits, false).weight_grads);
  }
  return out;
}

std::vector<Rank1Direction> raw_directions(const LayerAdapters& layer) {
  std::vector<Rank1Direction> dirs;
  for (std::size_t t = 0; t < layer.adapters.size(); ++t) {
    for (auto& d : rank1_directions(layer.adapters[t], t)) {
      d.sigma = layer.adapters[t].scale();
      dirs.push_back(std::move(d));
    }
  }
  return dirs;
}

namespace {

std::vector<Matrix> layer_grads(const std::vector<std::vector<Matrix>>& g, std::size_t layer) {
  std::vector<Matrix> out;
  for (const auto& per_task : g) out.push_back(per_task[layer]);
  return out;
}

}  // namespace

double xi_protocol(const AdapterCollection& coll, const TaskSuite& suite, const std::string& layer_id,
                   std::size_t onehot_task) {
  coll.validate();
  const std::size_t n = coll.n_tasks();
  if (onehot_task >= n) throw std::invalid_argument("xi_protocol: one-hot task out of range");
  const std::size_t l = coll.layer_index(layer_id);
  const auto weights = merge_ta(coll, kXiMergeLambda);
  const auto grads = task_gradients(weights, suite, coll.task_ids);
  const Jacobian j = jacobian(raw_directions(coll.layers[l]), layer_grads(grads, l));
  const auto uni = sensitivity_profile(j, Preference::uniform(n).rho);
  const auto one = sensitivity_profile(j, Preference::one_hot(n, onehot_task).rho);
  return misalignment_xi(uni, one);
}

std::vector<XiResult> xi_all(const AdapterCollection& coll, const TaskSuite& suite) {
  coll.validate();
  const std::size_t n = coll.n_tasks();
  const auto weights = merge_ta(coll, kXiMergeLambda);
  const auto grads = task_gradients(weights, suite, coll.task_ids);
  std::vector<XiResult> out;
  for (std::size_t l = 0; l < coll.n_layers(); ++l) {
    const Jacobian j = jacobian(raw_directions(coll.layers[l]), layer_grads(grads, l));
    const auto uni = sensitivity_profile(j, Preference::uniform(n).rho);
    for (std::size_t t = 0; t < n; ++t) {
      const auto one = sensitivity_profile(j, Preference::one_hot(n, t).rho);
      out.push_back(XiResult{coll.layers[l].layer_id, t, misalignment_xi(uni, one)});
    }
  }
  return out;
}

std::vector<KappaResult> kappa_profile(const AdapterCollection& coll, const TaskSuite& suite) {
  coll.validate();
  const auto weights = merge_ta(coll, kXiMergeLambda);
  const auto grads = task_gradients(weights, suite, coll.task_ids);
  const DirectionBasis shared = build_variant_b(coll);
  std::vector<KappaResult> out;
  for (std::size_t l = 0; l < coll.n_layers(); ++l) {
    const auto g = layer_grads(grads, l);
    out.push_back(KappaResult{coll.layers[l].layer_id, DirectionSet::raw,
                              anisotropy(jacobian(raw_directions(coll.layers[l]), g))});
    out.push_back(KappaResult{coll.layers[l].layer_id, DirectionSet::shared,
                              anisotropy(jacobian(shared.layers[l].directions, g))});
  }
  return out;
}

json to_json(const CoverageReport& r) {
  json layers = json::array();
  for (const auto& lc : r.layers) {
    json per_task = json::array();
    for (const auto& s : lc.per_task) per_task.push_back(opt_json(s.erank));
    layers.push_back({{"layer", lc.layer_id},
                      {"per_task", per_task},
                      {"per_task_sum", lc.per_task_sum},
                      {"agnostic_erank", opt_json(lc.agnostic.erank)},
                      {"aware_erank", opt_json(lc.aware.erank)},
                      {"agnostic_energy", energy_fractions(lc.agnostic.sigma)},
                      {"aware_energy", energy_fractions(lc.aware.sigma)},
                      {"ordered", lc.ordered()},
                      {"warnings", lc.warnings}});
  }
  return {{"per_task_sum", r.per_task_sum},
          {"agnostic_erank", r.agnostic_erank},
          {"aware_erank", r.aware_erank},
          {"layers", layers}};
}

json to_json(const std::vector<XiResult>& xs) {
  json arr = json::array();
  for (const auto& x : xs) arr.push_back({{"layer", x.layer_id}, {"onehot_task", x.onehot_task}, {"xi", x.xi}});
  return arr;
}

json to_json(const std::vector<KappaResult>& ks) {
  json arr = json::array();
  for (const auto& k : ks)
    arr.push_back({{"layer", k.layer_id},
                   {"directions", k.set == DirectionSet::raw ? "raw" : "shared"},
                   {"kappa", k.anis.kappa},
                   {"rank", k.anis.rank},
                   {"sigma", k.anis.sigma},
                   {"energy", energy_fractions(k.anis.sigma)}});
  return arr;
}

std::string coverage_csv(const CoverageReport& r) {
  std::ostringstream os;
  os << "section,layer,key,value\n";
  auto row = [&](const std::string& layer, const std::string& key, const std::optional<double>& v) {
    os << "coverage," << layer << ',' << key << ',' << (v ? fmt(*v) : std::string()) << '\n';
  };
  for (const auto& lc : r.layers) {
    for (std::size_t t = 0; t < lc.per_task.size(); ++t) row(lc.layer_id, "task" + std::to_string(t), lc.per_task[t].erank);
    row(lc.layer_id, "per_task_sum", lc.per_task_sum);
    row(lc.layer_id, "agnostic", lc.agnostic.erank);
    row(lc.layer_id, "aware", lc.aware.erank);
    const auto e = energy_fractions(lc.aware.sigma);
    for (std::size_t k = 0; k < e.size(); ++k) row(lc.layer_id, "aware_energy_" + std::to_string(k), e[k]);
  }
  return os.str();
}

std::string xi_csv(const std::vector<XiResult>& xs) {
  std::ostringstream os;
  os << "layer,onehot_task,xi\n";
  for (const auto& x : xs) os << x.layer_id << ',' << x.onehot_task << ',' << fmt(x.xi) << '\n';
  return os.str();
}

std::string kappa_csv(const std::vector<KappaResult>& ks) {
  std::ostringstream os;
  os << "layer,directions,kappa,index,sigma,energy\n";
  for (const auto& k : ks) {
    const auto e = energy_fractions(k.anis.sigma);
    for (std::size_t i = 0; i < k.anis.sigma.size(); ++i)
      os << k.layer_id << ',' << (k.set == DirectionSet::raw ? "raw" : "shared") << ',' << fmt(k.anis.kappa) << ',' << i << ','
         << fmt(k.anis.sigma[i]) << ',' << fmt(e[i]) << '\n';
  }
  return os.str();
}

}  // namespace lmk
