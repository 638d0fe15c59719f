// Copyright 2026 The lmk Authors
// SPDX-License-Identifier: Apache-2.0

#include "lmk/mergers.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>
#include <stdexcept>

#include "lmk/linalg.hpp"
#include "lmk/rng.hpp"

namespace lmk {

using nlohmann::json;

namespace {

constexpr std::uint64_t kDareStream = 0xDA4EULL;
constexpr std::uint64_t kLegoStream = 0x1E60ULL;

std::size_t keep_count(std::size_t n, double trim_fraction) {
  const double want = (1.0 - trim_fraction) * static_cast<double>(n);
  const double nearest = std::round(want);
  if (std::abs(want - nearest) < 1e-9) return static_cast<std::size_t>(nearest);
  return static_cast<std::size_t>(std::ceil(want));
}

void check_fraction(double v, const char* name) {
  if (!(v >= 0.0 && v < 1.0)) throw std::invalid_argument(std::string(name) + " must lie in [0, 1)");
}

std::size_t uniform_rank(const AdapterCollection& coll, const char* who) {
  std::size_t r = 0;
  for (const auto& l : coll.layers)
    for (const auto& ad : l.adapters) {
      if (r == 0) r = ad.rank();
      if (ad.rank() != r) throw std::invalid_argument(std::string(who) + ": adapters have mixed ranks");
    }
  return r;
}

double sqdist(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

}  // namespace

const char* to_string(MergeMethod m) noexcept {
  switch (m) {
    case MergeMethod::ta: return "ta";
    case MergeMethod::ties: return "ties";
    case MergeMethod::dare_ties: return "dare_ties";
    case MergeMethod::linear: return "linear";
    case MergeMethod::svd: return "svd";
    case MergeMethod::knots_ties: return "knots_ties";
    case MergeMethod::knots_dare_ties: return "knots_dare_ties";
    case MergeMethod::lora_lego: return "lora_lego";
  }
  return "?";
}

const char* to_string(LegoReweight r) noexcept {
  return r == LegoReweight::parameter ? "parameter" : "output";
}

std::optional<MergeMethod> parse_merge_method(const std::string& s) {
  for (auto m : {MergeMethod::ta, MergeMethod::ties, MergeMethod::dare_ties, MergeMethod::linear, MergeMethod::svd,
                 MergeMethod::knots_ties, MergeMethod::knots_dare_ties, MergeMethod::lora_lego})
    if (s == to_string(m)) return m;
  return std::nullopt;
}

namespace {
std::vector<std::string> relevant_keys(MergeMethod m) {
  switch (m) {
    case MergeMethod::ta:
    case MergeMethod::linear: return {"lambda"};
    case MergeMethod::ties:
    case MergeMethod::knots_ties: return {"lambda", "trim_fraction"};
    case MergeMethod::dare_ties:
    case MergeMethod::knots_dare_ties: return {"lambda", "trim_fraction", "drop_prob", "rng_seed"};
    case MergeMethod::svd: return {"lambda", "target_rank"};
    case MergeMethod::lora_lego: return {"k_clusters", "lego_reweight", "rng_seed"};
  }
  return {};
}
}  // namespace

void MergeConfig::validate() const {
  if (!std::isfinite(lambda)) throw std::invalid_argument("lambda must be finite");
  check_fraction(trim_fraction, "trim_fraction");
  check_fraction(drop_prob, "drop_prob");
  if (k_clusters == 0) throw std::invalid_argument("k_clusters must be positive");
  if (target_rank == 0) throw std::invalid_argument("target_rank must be positive");
}

json MergeConfig::to_json() const {
  json j{{"method", to_string(method)}};
  for (const auto& k : relevant_keys(method)) {
    if (k == "lambda") j[k] = lambda;
    if (k == "trim_fraction") j[k] = trim_fraction;
    if (k == "drop_prob") j[k] = drop_prob;
    if (k == "rng_seed") j[k] = rng_seed;
    if (k == "target_rank") j[k] = target_rank;
    if (k == "k_clusters") j[k] = k_clusters;
    if (k == "lego_reweight") j[k] = to_string(lego_reweight);
  }
  return j;
}

MergeConfig MergeConfig::from_json(const json& j) {
  if (!j.is_object()) throw std::invalid_argument("merge config must be a JSON object");
  MergeConfig cfg;
  const auto method = parse_merge_method(j.at("method").get<std::string>());
  if (!method) throw std::invalid_argument("unknown merge method '" + j.at("method").get<std::string>() + "'");
  cfg.method = *method;
  const auto keys = relevant_keys(cfg.method);
  for (const auto& [k, v] : j.items()) {
    if (k == "method") continue;
    if (std::find(keys.begin(), keys.end(), k) == keys.end())
      throw std::invalid_argument("key '" + k + "' is not a parameter of " + to_string(cfg.method));
    if (k == "lambda") cfg.lambda = v.get<double>();
    if (k == "trim_fraction") cfg.trim_fraction = v.get<double>();
    if (k == "drop_prob") cfg.drop_prob = v.get<double>();
    if (k == "rng_seed") cfg.rng_seed = v.get<std::uint64_t>();
    if (k == "target_rank") cfg.target_rank = v.get<std::size_t>();
    if (k == "k_clusters") cfg.k_clusters = v.get<std::size_t>();
    if (k == "lego_reweight") {
      const auto s = v.get<std::string>();
      if (s == "parameter")
        cfg.lego_reweight = LegoReweight::parameter;
      else if (s == "output")
        cfg.lego_reweight = LegoReweight::output;
      else
        throw std::invalid_argument("lego_reweight must be 'parameter' or 'output'");
    }
  }
  cfg.validate();
  return cfg;
}

std::vector<Matrix> merge_ta(const AdapterCollection& coll, double lambda) {
  coll.validate();
  std::vector<Matrix> out;
  for (const auto& layer : coll.layers) {
    Matrix sum(layer.base.rows(), layer.base.cols());
    for (const auto& ad : layer.adapters) sum += delta_weight(ad);
    Matrix w = layer.base;
    w.axpy(lambda, sum);
    out.push_back(std::move(w));
  }
  return out;
}

Matrix trim_top_magnitude(const Matrix& delta, double trim_fraction) {
  check_fraction(trim_fraction, "trim_fraction");
  const std::size_t n = delta.size();
  const std::size_t keep = keep_count(n, trim_fraction);
  if (keep >= n) return delta;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  const auto v = delta.data();
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return std::abs(v[a]) > std::abs(v[b]); });
  Matrix out(delta.rows(), delta.cols());
  for (std::size_t i = 0; i < keep; ++i) out.data()[order[i]] = v[order[i]];
  return out;
}

Matrix ties_combine(std::span<const Matrix> deltas, double trim_fraction) {
  if (deltas.empty()) throw std::invalid_argument("ties_combine: no task vectors");
  std::vector<Matrix> trimmed;
  trimmed.reserve(deltas.size());
  for (const auto& d : deltas) {
    if (!d.same_shape(deltas.front())) throw_shape_mismatch("ties_combine", d, deltas.front());
    trimmed.push_back(trim_top_magnitude(d, trim_fraction));
  }
  Matrix out(deltas.front().rows(), deltas.front().cols());
  for (std::size_t i = 0; i < out.size(); ++i) {
    double pos = 0.0;
    double neg = 0.0;
    for (const auto& t : trimmed) {
      const double x = t.data()[i];
      if (x > 0.0) pos += x;
      if (x < 0.0) neg -= x;
    }
    const bool positive = pos >= neg;
    double sum = 0.0;
    std::size_t count = 0;
    for (const auto& t : trimmed) {
      const double x = t.data()[i];
      if ((positive && x > 0.0) || (!positive && x < 0.0)) {
        sum += x;
        ++count;
      }
    }
    out.data()[i] = count ? sum / static_cast<double>(count) : 0.0;
  }
  return out;
}

std::vector<Matrix> merge_ties(const AdapterCollection& coll, double lambda, double trim_fraction) {
  coll.validate();
  std::vector<Matrix> out;
  for (const auto& layer : coll.layers) {
    if (layer.adapters.empty()) {
      out.push_back(layer.base);
      continue;
    }
    std::vector<Matrix> deltas;
    for (const auto& ad : layer.adapters) deltas.push_back(delta_weight(ad));
    Matrix w = layer.base;
    w.axpy(lambda, ties_combine(deltas, trim_fraction));
    out.push_back(std::move(w));
  }
  return out;
}

Matrix dare_sparsify(const Matrix& delta, double p, std::uint64_t seed, std::size_t task, std::size_t layer) {
  check_fraction(p, "drop_prob");
  Matrix out = delta;
  const double rescale = 1.0 / (1.0 - p);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double u = keyed_uniform(seed, {kDareStream, task, layer, i});
    out.data()[i] = u < p ? 0.0 : out.data()[i] * rescale;
  }
  return out;
}

std::vector<Matrix> merge_dare_ties(const AdapterCollection& coll, double lambda, double trim_fraction, double p,
                                    std::uint64_t seed) {
  coll.validate();
  std::vector<Matrix> out;
  for (std::size_t l = 0; l < coll.layers.size(); ++l) {
    const auto& layer = coll.layers[l];
    if (layer.adapters.empty()) {
      out.push_back(layer.base);
      continue;
    }
    std::vector<Matrix> deltas;
    for (std::size_t t = 0; t < layer.adapters.size(); ++t)
      deltas.push_back(dare_sparsify(delta_weight(layer.adapters[t]), p, seed, t, l));
    Matrix w = layer.base;
    w.axpy(lambda, ties_combine(deltas, trim_fraction));
    out.push_back(std::move(w));
  }
  return out;
}

std::vector<LoraAdapter> merge_linear(const AdapterCollection& coll, double lambda) {
  coll.validate();
  if (coll.n_tasks() == 0) throw std::invalid_argument("merge_linear: no adapters");
  const std::size_t r = uniform_rank(coll, "merge_linear");
  std::vector<LoraAdapter> out;
  for (const auto& layer : coll.layers) {
    LoraAdapter m{"merged", layer.layer_id, Matrix(layer.base.rows(), r), Matrix(layer.base.cols(), r),
                  static_cast<double>(r), 0.0};
    for (const auto& ad : layer.adapters) {
      m.b.axpy(lambda * ad.scale(), ad.b);
      m.a += ad.a;
    }
    out.push_back(std::move(m));
  }
  return out;
}

std::vector<LoraAdapter> merge_svd(const AdapterCollection& coll, double lambda, std::size_t target_rank) {
  coll.validate();
  std::vector<LoraAdapter> out;
  for (const auto& layer : coll.layers) {
    const std::size_t d = layer.base.rows();
    const std::size_t m = layer.base.cols();
    if (target_rank == 0 || target_rank > std::min(d, m))
      throw std::invalid_argument("merge_svd: target_rank must lie in [1, min(d, m)]");
    Matrix sum(d, m);
    for (const auto& ad : layer.adapters) sum += delta_weight(ad);
    sum *= lambda;
    const SvdResult s = svd(sum);
    LoraAdapter ad{"merged", layer.layer_id, Matrix(d, target_rank), Matrix(m, target_rank),
                   static_cast<double>(target_rank), 0.0};
    for (std::size_t k = 0; k < target_rank; ++k) {
      for (std::size_t i = 0; i < d; ++i) ad.b(i, k) = s.u(i, k) * s.sigma[k];
      for (std::size_t i = 0; i < m; ++i) ad.a(i, k) = s.v(i, k);
    }
    out.push_back(std::move(ad));
  }
  return out;
}

std::vector<Matrix> merge_knots(const AdapterCollection& coll, double lambda, KnotsInner inner,
                                double trim_fraction, double p, std::uint64_t seed) {
  coll.validate();
  const std::size_t n = coll.n_tasks();
  std::vector<Matrix> out;
  for (std::size_t l = 0; l < coll.layers.size(); ++l) {
    const auto& layer = coll.layers[l];
    if (n == 0) {
      out.push_back(layer.base);
      continue;
    }
    const std::size_t d = layer.base.rows();
    const std::size_t m = layer.base.cols();
    Matrix stacked(n * d, m);
    for (std::size_t t = 0; t < n; ++t) {
      const Matrix dw = delta_weight(layer.adapters[t]);
      for (std::size_t r = 0; r < d; ++r)
        std::copy(dw.row(r).begin(), dw.row(r).end(), stacked.row(t * d + r).begin());
    }
    const SvdResult s = svd(stacked);
    // columns past the numerical rank are arbitrary and would compete in the trim
    const std::size_t q = s.rank();
    std::vector<Matrix> blocks;
    for (std::size_t t = 0; t < n; ++t) {
      Matrix ut(d, q);
      for (std::size_t r = 0; r < d; ++r)
        for (std::size_t k = 0; k < q; ++k) ut(r, k) = s.u(t * d + r, k);
      if (inner == KnotsInner::dare_ties) ut = dare_sparsify(ut, p, seed, t, l);
      blocks.push_back(std::move(ut));
    }
    Matrix merged = ties_combine(blocks, trim_fraction);
    for (std::size_t r = 0; r < d; ++r)
      for (std::size_t k = 0; k < q; ++k) merged(r, k) *= s.sigma[k];
    Matrix vq(m, q);
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t k = 0; k < q; ++k) vq(r, k) = s.v(r, k);
    Matrix w = layer.base;
    w.axpy(lambda, matmul_nt(merged, vq));
    out.push_back(std::move(w));
  }
  return out;
}

KMeansResult kmeans(const Matrix& points, std::size_t k, std::uint64_t seed, std::uint64_t stream,
                    std::size_t max_iter, double rel_tol) {
  const std::size_t n = points.rows();
  const std::size_t dim = points.cols();
  if (k == 0 || k > n)
    throw std::invalid_argument("kmeans: k=" + std::to_string(k) + " must lie in [1, " + std::to_string(n) + "]");
  KeyedRng rng(seed, {kLegoStream, stream});

  KMeansResult res;
  res.centroids = Matrix(k, dim);
  std::vector<std::size_t> chosen;
  chosen.push_back(rng.below(n));
  std::vector<double> d2(n, std::numeric_limits<double>::infinity());
  while (chosen.size() < k) {
    const auto last = points.row(chosen.back());
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      d2[i] = std::min(d2[i], sqdist(points.row(i), last));
      total += d2[i];
    }
    std::size_t pick = n;
    if (total > 0.0) {
      const double target = rng.uniform() * total;
      double acc = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        if (d2[i] <= 0.0) continue;
        acc += d2[i];
        pick = i;
        if (acc > target) break;
      }
    } else {
      for (std::size_t i = 0; i < n && pick == n; ++i)
        if (std::find(chosen.begin(), chosen.end(), i) == chosen.end()) pick = i;
    }
    chosen.push_back(pick);
  }
  for (std::size_t c = 0; c < k; ++c)
    std::copy(points.row(chosen[c]).begin(), points.row(chosen[c]).end(), res.centroids.row(c).begin());

  res.assignment.assign(n, 0);
  std::vector<double> dist(n);
  double prev = 0.0;
  for (std::size_t it = 0; it < max_iter; ++it) {
    res.iterations = it + 1;
    res.inertia = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t best = 0;
      double bd = sqdist(points.row(i), res.centroids.row(0));
      for (std::size_t c = 1; c < k; ++c) {
        const double dd = sqdist(points.row(i), res.centroids.row(c));
        if (dd < bd) {
          bd = dd;
          best = c;
        }
      }
      res.assignment[i] = best;
      dist[i] = bd;
      res.inertia += bd;
    }
    if (res.inertia == 0.0) break;
    if (it > 0 && std::abs(prev - res.inertia) < rel_tol * prev) break;
    prev = res.inertia;

    Matrix sums(k, dim);
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      auto row = sums.row(res.assignment[i]);
      auto pt = points.row(i);
      for (std::size_t j = 0; j < dim; ++j) row[j] += pt[j];
      ++counts[res.assignment[i]];
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] == 0) {
        std::size_t far = 0;
        for (std::size_t i = 1; i < n; ++i)
          if (dist[i] > dist[far]) far = i;
        std::copy(points.row(far).begin(), points.row(far).end(), res.centroids.row(c).begin());
        dist[far] = 0.0;
        continue;
      }
      auto row = res.centroids.row(c);
      auto s = sums.row(c);
      for (std::size_t j = 0; j < dim; ++j) row[j] = s[j] / static_cast<double>(counts[c]);
    }
  }
  return res;
}

Matrix lego_units(const LayerAdapters& layer) {
  std::size_t total = 0;
  for (const auto& ad : layer.adapters) total += ad.rank();
  const std::size_t m = layer.base.cols();
  const std::size_t d = layer.base.rows();
  Matrix units(total, m + d);
  std::size_t row = 0;
  for (const auto& ad : layer.adapters) {
    for (std::size_t j = 0; j < ad.rank(); ++j, ++row) {
      auto u = units.row(row);
      for (std::size_t i = 0; i < m; ++i) u[i] = ad.a(i, j);
      for (std::size_t i = 0; i < d; ++i) u[m + i] = ad.scale() * ad.b(i, j);
    }
  }
  return units;
}

std::vector<LoraAdapter> merge_lora_lego(const AdapterCollection& coll, std::size_t k_clusters,
                                         LegoReweight reweight, std::uint64_t seed) {
  coll.validate();
  std::vector<LoraAdapter> out;
  for (std::size_t l = 0; l < coll.layers.size(); ++l) {
    const auto& layer = coll.layers[l];
    const Matrix units = lego_units(layer);
    if (k_clusters > units.rows())
      throw std::invalid_argument("merge_lora_lego: k=" + std::to_string(k_clusters) + " exceeds the " +
                                  std::to_string(units.rows()) + " available units");
    KMeansResult km = kmeans(units, k_clusters, seed, l);
    const std::size_t m = layer.base.cols();
    const std::size_t d = layer.base.rows();
    double out_scale = 1.0;
    if (reweight == LegoReweight::parameter) {
      std::vector<double> norm_sum(k_clusters, 0.0);
      std::vector<std::size_t> counts(k_clusters, 0);
      for (std::size_t i = 0; i < units.rows(); ++i) {
        norm_sum[km.assignment[i]] += norm2(units.row(i));
        ++counts[km.assignment[i]];
      }
      for (std::size_t c = 0; c < k_clusters; ++c) {
        const double cn = norm2(km.centroids.row(c));
        if (counts[c] == 0 || cn == 0.0) continue;
        const double f = (norm_sum[c] / static_cast<double>(counts[c])) / cn;
        for (double& v : km.centroids.row(c)) v *= f;
      }
    } else {
      const std::size_t r = uniform_rank(coll, "merge_lora_lego");
      out_scale = std::sqrt(static_cast<double>(r)) / std::sqrt(static_cast<double>(k_clusters));
    }
    LoraAdapter ad{"merged", layer.layer_id, Matrix(d, k_clusters), Matrix(m, k_clusters),
                   static_cast<double>(k_clusters), 0.0};
    for (std::size_t c = 0; c < k_clusters; ++c) {
      auto row = km.centroids.row(c);
      for (std::size_t i = 0; i < m; ++i) ad.a(i, c) = row[i];
      for (std::size_t i = 0; i < d; ++i) ad.b(i, c) = out_scale * row[m + i];
    }
    out.push_back(std::move(ad));
  }
  return out;
}

std::vector<Matrix> apply_adapters(const AdapterCollection& coll, std::span<const LoraAdapter> merged) {
  if (merged.size() != coll.layers.size()) throw std::invalid_argument("apply_adapters: one adapter per layer");
  std::vector<Matrix> out;
  for (std::size_t l = 0; l < merged.size(); ++l) out.push_back(coll.layers[l].base + delta_weight(merged[l]));
  return out;
}

std::vector<Matrix> merge(const AdapterCollection& coll, const MergeConfig& cfg) {
  cfg.validate();
  switch (cfg.method) {
    case MergeMethod::ta: return merge_ta(coll, cfg.lambda);
    case MergeMethod::ties: return merge_ties(coll, cfg.lambda, cfg.trim_fraction);
    case MergeMethod::dare_ties: return merge_dare_ties(coll, cfg.lambda, cfg.trim_fraction, cfg.drop_prob, cfg.rng_seed);
    case MergeMethod::linear: return apply_adapters(coll, merge_linear(coll, cfg.lambda));
    case MergeMethod::svd: return apply_adapters(coll, merge_svd(coll, cfg.lambda, cfg.target_rank));
    case MergeMethod::knots_ties:
      return merge_knots(coll, cfg.lambda, KnotsInner::ties, cfg.trim_fraction, cfg.drop_prob, cfg.rng_seed);
    case MergeMethod::knots_dare_ties:
      return merge_knots(coll, cfg.lambda, KnotsInner::dare_ties, cfg.trim_fraction, cfg.drop_prob, cfg.rng_seed);
    case MergeMethod::lora_lego:
      return apply_adapters(coll, merge_lora_lego(coll, cfg.k_clusters, cfg.lego_reweight, cfg.rng_seed));
  }
  throw std::logic_error("unhandled merge method");
}

namespace {
std::vector<double> steps(double lo, double hi, double step) {
  std::vector<double> v;
  const int n = static_cast<int>(std::lround((hi - lo) / step));
  for (int i = 0; i <= n; ++i) v.push_back(std::round((lo + i * step) * 1e10) / 1e10);
  return v;
}
}  // namespace

GridSpec GridSpec::task_arithmetic() { return GridSpec{steps(0.1, 1.0, 0.1), {}, {}, {}}; }
GridSpec GridSpec::ties() { return GridSpec{steps(0.8, 1.8, 0.1), steps(0.1, 0.9, 0.1), {}, {}}; }
GridSpec GridSpec::lora_lego() { return GridSpec{{}, {}, {}, {8, 16, 32, 64, 128}}; }

GridResult grid_search(const AdapterCollection& coll, const MergeConfig& base, const GridSpec& grid,
                       const std::function<double(const std::vector<Matrix>&)>& score) {
  auto or_base = [](auto values, auto fallback) {
    if (values.empty()) values.push_back(fallback);
    return values;
  };
  const auto lambdas = or_base(grid.lambdas, base.lambda);
  const auto trims = or_base(grid.trim_fractions, base.trim_fraction);
  const auto drops = or_base(grid.drop_probs, base.drop_prob);
  const auto ks = or_base(grid.k_clusters, base.k_clusters);
  GridResult res;
  bool first = true;
  for (double lam : lambdas)
    for (double tr : trims)
      for (double dp : drops)
        for (std::size_t k : ks) {
          MergeConfig cfg = base;
          cfg.lambda = lam;
          cfg.trim_fraction = tr;
          cfg.drop_prob = dp;
          cfg.k_clusters = k;
          const double s = score(merge(coll, cfg));
          res.evaluated.emplace_back(cfg, s);
          if (first || s > res.best_score) {
            res.best = cfg;
            res.best_score = s;
            first = false;
          }
        }
  return res;
}

}  // namespace lmk
