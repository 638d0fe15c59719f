// Copyright 2026 The lmk Authors
// SPDX-License-Identifier: Apache-2.0

#include "lmk/tara.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "lmk/linalg.hpp"
#include "lmk/model.hpp"
#include "lmk/rng.hpp"

namespace lmk {
namespace {

std::size_t suite_task(const TaskSuite& suite, const std::string& id) {
  for (std::size_t i = 0; i < suite.tasks.size(); ++i)
    if (suite.tasks[i].id == id) return i;
  throw std::invalid_argument("suite has no task '" + id + "'");
}

void finish_layer(LayerBasis& lb, std::size_t& offset) {
  lb.param_offset = offset;
  offset += lb.n_params;
}

}  // namespace

const char* to_string(BasisKind k) noexcept {
  switch (k) {
    case BasisKind::variant_a: return "tara-a";
    case BasisKind::variant_b: return "tara-b";
    case BasisKind::adamerging: return "adamerging";
  }
  return "?";
}

DirectionBasis build_variant_a(const AdapterCollection& coll, double phi_init) {
  coll.validate();
  DirectionBasis basis;
  basis.kind = BasisKind::variant_a;
  basis.task_ids = coll.task_ids;
  std::size_t offset = 0;
  for (const auto& layer : coll.layers) {
    LayerBasis lb{layer.layer_id, layer.base, {}, {}, 0, 0, {}};
    for (std::size_t t = 0; t < layer.adapters.size(); ++t) {
      const auto& ad = layer.adapters[t];
      for (auto& dir : rank1_directions(ad, t)) {
        dir.sigma = ad.scale();
        lb.param_of.push_back(offset + lb.directions.size());
        lb.directions.push_back(std::move(dir));
      }
    }
    lb.n_params = lb.directions.size();
    finish_layer(lb, offset);
    basis.layers.push_back(std::move(lb));
  }
  basis.phi.assign(offset, phi_init);
  return basis;
}

std::size_t default_shared_rank(const AdapterCollection& coll) {
  coll.validate();
  std::size_t total = 0;
  for (const auto& ad : coll.layers.front().adapters) total += ad.rank();
  for (const auto& layer : coll.layers)
    total = std::min(total, std::min(layer.base.rows(), layer.base.cols() * coll.n_tasks()));
  return total;
}

DirectionBasis build_variant_b(const AdapterCollection& coll, std::optional<std::size_t> R, double phi_init) {
  coll.validate();
  if (coll.n_tasks() == 0) throw std::invalid_argument("build_variant_b: collection has no tasks");
  const std::size_t rank = R.value_or(default_shared_rank(coll));
  if (rank == 0) throw std::invalid_argument("build_variant_b: R must be positive");
  DirectionBasis basis;
  basis.kind = BasisKind::variant_b;
  basis.task_ids = coll.task_ids;
  basis.R = rank;
  const std::size_t n = coll.n_tasks();
  std::size_t offset = 0;
  for (const auto& layer : coll.layers) {
    const std::size_t d = layer.base.rows();
    const std::size_t m = layer.base.cols();
    if (rank > std::min(d, m * n))
      throw std::invalid_argument("build_variant_b: R=" + std::to_string(rank) + " exceeds the " +
                                  std::to_string(std::min(d, m * n)) + " available singular values on layer " +
                                  layer.layer_id);
    Matrix x(d, m * n);
    for (std::size_t t = 0; t < n; ++t) {
      const Matrix dw = delta_weight(layer.adapters[t]);
      for (std::size_t r = 0; r < d; ++r)
        for (std::size_t c = 0; c < m; ++c) x(r, t * m + c) = dw(r, c);
    }
    const SvdResult s = svd(x);
    LayerBasis lb{layer.layer_id, layer.base, {}, {}, 0, 0, {}};
    lb.singular_values.assign(s.sigma.begin(), s.sigma.begin() + static_cast<std::ptrdiff_t>(rank));
    for (std::size_t t = 0; t < n; ++t) {
      for (std::size_t k = 0; k < rank; ++k) {
        Rank1Direction dir;
        dir.owner_task = t;
        dir.owner_index = k;
        dir.left = s.u.col(k);
        dir.right.resize(m);
        for (std::size_t c = 0; c < m; ++c) dir.right[c] = s.v(t * m + c, k);
        dir.sigma = s.sigma[k];
        lb.param_of.push_back(offset + lb.directions.size());
        lb.directions.push_back(std::move(dir));
      }
    }
    lb.n_params = lb.directions.size();
    finish_layer(lb, offset);
    basis.layers.push_back(std::move(lb));
  }
  basis.phi.assign(offset, phi_init);
  return basis;
}

DirectionBasis build_adamerging(const AdapterCollection& coll, double init) {
  coll.validate();
  DirectionBasis basis;
  basis.kind = BasisKind::adamerging;
  basis.task_ids = coll.task_ids;
  std::size_t offset = 0;
  for (const auto& layer : coll.layers) {
    LayerBasis lb{layer.layer_id, layer.base, {}, {}, 0, layer.adapters.size(), {}};
    lb.param_offset = offset;
    for (std::size_t t = 0; t < layer.adapters.size(); ++t) {
      const auto& ad = layer.adapters[t];
      for (auto& dir : rank1_directions(ad, t)) {
        dir.sigma = ad.scale();
        lb.param_of.push_back(offset + t);
        lb.directions.push_back(std::move(dir));
      }
    }
    offset += lb.n_params;
    basis.layers.push_back(std::move(lb));
  }
  basis.phi.assign(offset, init);
  return basis;
}

std::vector<Matrix> assemble(const DirectionBasis& basis, std::span<const double> phi) {
  if (phi.size() != basis.n_params())
    throw std::invalid_argument("assemble: phi has " + std::to_string(phi.size()) + " entries, basis needs " +
                                std::to_string(basis.n_params()));
  std::vector<Matrix> out;
  out.reserve(basis.layers.size());
  for (const auto& lb : basis.layers) {
    Matrix w = lb.base;
    for (std::size_t k = 0; k < lb.directions.size(); ++k) {
      const auto& dir = lb.directions[k];
      add_outer(w, phi[lb.param_of[k]] * dir.sigma, dir.left, dir.right);
    }
    out.push_back(std::move(w));
  }
  return out;
}

Preference Preference::uniform(std::size_t n) {
  if (n == 0) throw std::invalid_argument("preference over zero tasks");
  return Preference{std::vector<double>(n, 1.0 / static_cast<double>(n))};
}

Preference Preference::one_hot(std::size_t n, std::size_t i) {
  if (i >= n) throw std::invalid_argument("one_hot index out of range");
  Preference p{std::vector<double>(n, 0.0)};
  p.rho[i] = 1.0;
  return p;
}

void Preference::validate() const {
  if (rho.empty()) throw std::invalid_argument("preference is empty");
  double sum = 0.0;
  for (double r : rho) {
    if (!std::isfinite(r) || r < 0.0) throw std::invalid_argument("preference entries must be nonnegative");
    sum += r;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw std::invalid_argument("preference must sum to 1 (got " + std::to_string(sum) + ")");
}

double entropy_loss(const Matrix& probs) {
  if (probs.rows() == 0) throw std::invalid_argument("entropy_loss: empty batch");
  double total = 0.0;
  for (std::size_t i = 0; i < probs.rows(); ++i) {
    double sum = 0.0;
    double h = 0.0;
    for (double p : probs.row(i)) {
      if (!std::isfinite(p) || p < 0.0) throw std::invalid_argument("entropy_loss: row " + std::to_string(i) + " is not a distribution");
      sum += p;
      if (p > 0.0) h -= p * std::log(p);
    }
    if (std::abs(sum - 1.0) > 1e-6)
      throw std::invalid_argument("entropy_loss: row " + std::to_string(i) + " sums to " + std::to_string(sum));
    total += h;
  }
  return total / static_cast<double>(probs.rows());
}

std::vector<double> compute_anchors(const AdapterCollection& coll, const TaskSuite& suite) {
  coll.validate();
  std::vector<double> z(coll.n_tasks());
  for (std::size_t t = 0; t < coll.n_tasks(); ++t) {
    const Task& task = suite.tasks[suite_task(suite, coll.task_ids[t])];
    if (task.adapt.size() == 0) throw std::invalid_argument("task " + task.id + " has no adaptation samples");
    std::vector<Matrix> w;
    for (const auto& layer : coll.layers) w.push_back(layer.base + delta_weight(layer.adapters[t]));
    z[t] = entropy_loss_grad(predict_logits(w, task.head, task.adapt.x)).loss;
  }
  return z;
}

double stch_objective(std::span<const double> f, std::span<const double> z, std::span<const double> rho,
                      double alpha) {
  if (!(alpha > 0.0)) throw std::invalid_argument("stch_objective: alpha must be positive");
  if (f.size() != z.size() || f.size() != rho.size() || f.empty())
    throw std::invalid_argument("stch_objective: length mismatch");
  std::vector<double> a(f.size());
  for (std::size_t i = 0; i < f.size(); ++i) a[i] = rho[i] * std::abs(f[i] - z[i]) / alpha;
  const double mx = *std::max_element(a.begin(), a.end());
  double s = 0.0;
  for (double v : a) s += std::exp(v - mx);
  return alpha * (mx + std::log(s));
}

std::vector<double> stch_gradient(std::span<const double> f, std::span<const double> z,
                                  std::span<const double> rho, double alpha) {
  std::vector<double> a(f.size());
  for (std::size_t i = 0; i < f.size(); ++i) a[i] = rho[i] * std::abs(f[i] - z[i]) / alpha;
  const double mx = *std::max_element(a.begin(), a.end());
  double s = 0.0;
  for (double v : a) s += std::exp(v - mx);
  std::vector<double> g(f.size());
  for (std::size_t i = 0; i < f.size(); ++i) {
    const double r = f[i] - z[i];
    const double sgn = std::abs(r) < kResidualKink ? 0.0 : (r > 0.0 ? 1.0 : -1.0);
    g[i] = std::exp(a[i] - mx) / s * rho[i] * sgn;
  }
  return g;
}

ObjectiveValue evaluate_objective(const DirectionBasis& basis, std::span<const double> phi,
                                  const TaskSuite& suite, const Preference& pref, const ObjectiveConfig& obj,
                                  const TaskBatches& batches, bool want_grad) {
  const std::size_t n = basis.task_ids.size();
  pref.validate();
  if (pref.rho.size() != n) throw std::invalid_argument("preference length does not match task count");
  if (batches.size() != n) throw std::invalid_argument("need one batch per task");
  if (obj.kind == Scalarization::stch && obj.anchors.size() != n)
    throw std::invalid_argument("stch objective needs one anchor per task");

  const std::vector<Matrix> weights = assemble(basis, phi);
  ObjectiveValue out;
  out.f.resize(n);
  std::vector<std::vector<Matrix>> grads(n);
  for (std::size_t t = 0; t < n; ++t) {
    const Task& task = suite.tasks[suite_task(suite, basis.task_ids[t])];
    Matrix x;
    if (batches[t].empty()) {
      x = task.adapt.x;
    } else {
      x = Matrix(batches[t].size(), task.adapt.x.cols());
      for (std::size_t r = 0; r < batches[t].size(); ++r) {
        auto src = task.adapt.x.row(batches[t][r]);
        std::copy(src.begin(), src.end(), x.row(r).begin());
      }
    }
    const ForwardCache cache = forward(weights, task.head, x);
    LossGrad lg = entropy_loss_grad(cache.logits);
    if (!std::isfinite(lg.loss)) throw std::runtime_error("non-finite entropy for task " + task.id);
    out.f[t] = lg.loss;
    if (want_grad) grads[t] = backward(cache, weights, task.head, lg.dlogits, false).weight_grads;
  }

  std::vector<double> dpsi_df(n);
  if (obj.kind == Scalarization::stch) {
    out.psi = stch_objective(out.f, obj.anchors, pref.rho, obj.alpha);
    dpsi_df = stch_gradient(out.f, obj.anchors, pref.rho, obj.alpha);
  } else {
    out.psi = 0.0;
    for (std::size_t t = 0; t < n; ++t) {
      out.psi += pref.rho[t] * out.f[t];
      dpsi_df[t] = pref.rho[t];
    }
  }
  if (!want_grad) return out;

  out.grad.assign(basis.n_params(), 0.0);
  for (std::size_t l = 0; l < basis.layers.size(); ++l) {
    const auto& lb = basis.layers[l];
    Matrix g(lb.base.rows(), lb.base.cols());
    for (std::size_t t = 0; t < n; ++t)
      if (dpsi_df[t] != 0.0) g.axpy(dpsi_df[t], grads[t][l]);
    for (std::size_t k = 0; k < lb.directions.size(); ++k) {
      const auto& dir = lb.directions[k];
      out.grad[lb.param_of[k]] += dir.sigma * bilinear(dir.left, g, dir.right);
    }
  }
  for (double v : out.grad)
    if (!std::isfinite(v)) throw std::runtime_error("non-finite gradient");
  return out;
}

std::vector<double> gradient_phi(const DirectionBasis& basis, std::span<const double> phi,
                                 const TaskSuite& suite, const Preference& pref, const ObjectiveConfig& obj,
                                 const TaskBatches& batches) {
  return evaluate_objective(basis, phi, suite, pref, obj, batches, true).grad;
}

TaskBatches sample_batches(const TaskSuite& suite, const std::vector<std::string>& task_ids,
                           std::size_t batch_size, std::uint64_t seed, std::size_t step) {
  TaskBatches out(task_ids.size());
  for (std::size_t t = 0; t < task_ids.size(); ++t) {
    const std::size_t si = suite_task(suite, task_ids[t]);
    const std::size_t pool = suite.tasks[si].adapt.size();
    if (pool == 0) throw std::invalid_argument("task " + task_ids[t] + " has no adaptation samples");
    KeyedRng rng(seed, {0xBA7C4ULL, step, si});
    out[t].resize(batch_size);
    for (auto& idx : out[t]) idx = rng.below(pool);
  }
  return out;
}

OptimResult optimize(const DirectionBasis& basis, const TaskSuite& suite, const Preference& pref,
                     const ObjectiveConfig& obj, const OptimConfig& cfg) {
  if (cfg.batch_size == 0) throw std::invalid_argument("optimize: batch_size must be positive");
  pref.validate();
  OptimResult res;
  res.phi = basis.phi;
  res.trace.reserve(cfg.max_iters);
  AdamW opt(res.phi.size(), cfg.adam);
  double limit = 0.0;
  for (std::size_t step = 0; step < cfg.max_iters; ++step) {
    const TaskBatches batches = sample_batches(suite, basis.task_ids, cfg.batch_size, cfg.seed, step);
    ObjectiveValue v = evaluate_objective(basis, res.phi, suite, pref, obj, batches, true);
    if (step == 0) limit = cfg.divergence_factor * std::max(std::abs(v.psi), 0.1);
    if (!std::isfinite(v.psi) || v.psi > limit)
      throw DivergenceError("optimization diverged at step " + std::to_string(step) + ": psi=" +
                            std::to_string(v.psi) + " exceeds limit " + std::to_string(limit));
    res.trace.push_back(TraceRow{step, v.psi, v.f});
    opt.step(res.phi, v.grad);
  }
  return res;
}

MergeRun run_tara(const AdapterCollection& coll, const TaskSuite& suite, BasisKind variant,
                  const Preference& pref, double alpha, const OptimConfig& cfg, std::optional<std::size_t> R) {
  MergeRun run;
  switch (variant) {
    case BasisKind::variant_a: run.basis = build_variant_a(coll); break;
    case BasisKind::variant_b: run.basis = build_variant_b(coll, R); break;
    case BasisKind::adamerging: throw std::invalid_argument("run_tara: use adamerging_baseline");
  }
  ObjectiveConfig obj{Scalarization::stch, alpha, compute_anchors(coll, suite)};
  run.result = optimize(run.basis, suite, pref, obj, cfg);
  run.weights = assemble(run.basis, run.result.phi);
  return run;
}

MergeRun adamerging_baseline(const AdapterCollection& coll, const TaskSuite& suite, const OptimConfig& cfg,
                             std::optional<Preference> pref) {
  MergeRun run;
  run.basis = build_adamerging(coll);
  const Preference p = pref.value_or(Preference::uniform(coll.n_tasks()));
  ObjectiveConfig obj{Scalarization::weighted_sum, 1.0, {}};
  run.result = optimize(run.basis, suite, p, obj, cfg);
  run.weights = assemble(run.basis, run.result.phi);
  return run;
}

}  // namespace lmk
