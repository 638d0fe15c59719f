// Copyright 2026 The lmk Authors
// SPDX-License-Identifier: Apache-2.0

#include "lmk/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <limits>
#include <mutex>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "lmk/linalg.hpp"
#include "lmk/model.hpp"
#include "lmk/optim.hpp"
#include "lmk/rng.hpp"

namespace lmk {

using nlohmann::json;

namespace {

constexpr std::uint64_t kBasisStream = 0xB451ULL;
constexpr std::uint64_t kBaseStream = 0xBA5EULL;
constexpr std::uint64_t kMeanStream = 0x3EA2ULL;
constexpr std::uint64_t kHeadStream = 0x4EADULL;
constexpr std::uint64_t kDataStream = 0xDA7AULL;
constexpr std::uint64_t kTwinStream = 0x7713ULL;
constexpr std::uint64_t kLoraStream = 0x10AAULL;
constexpr std::uint64_t kBatchStream = 0xF17EULL;
constexpr std::uint64_t kSimplexStream = 0x5117ULL;

Matrix gaussian(std::size_t rows, std::size_t cols, double std, KeyedRng& rng) {
  Matrix m(rows, cols);
  for (double& v : m.data()) v = std * rng.normal();
  return m;
}

Dataset sample_dataset(const Matrix& means, std::size_t n, double noise, KeyedRng& rng) {
  Dataset ds{Matrix(n, means.cols()), std::vector<int>(n)};
  const std::size_t classes = means.rows();
  for (std::size_t i = 0; i < n; ++i) {
    const auto c = i % classes;
    ds.y[i] = static_cast<int>(c);
    auto row = ds.x.row(i);
    auto mu = means.row(c);
    for (std::size_t j = 0; j < row.size(); ++j) row[j] = mu[j] + noise * rng.normal();
  }
  return ds;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

json matrix_json(const Matrix& m) {
  return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", std::vector<double>(m.data().begin(), m.data().end())}};
}

Matrix matrix_from_json(const json& j) {
  auto data = j.at("data").get<std::vector<double>>();
  const auto r = j.at("rows").get<std::size_t>();
  const auto c = j.at("cols").get<std::size_t>();
  if (data.size() != r * c) throw std::invalid_argument("matrix entry count does not match its shape");
  return Matrix(r, c, std::move(data));
}

void reject_unknown(const json& j, std::initializer_list<const char*> known, const char* what) {
  if (!j.is_object()) throw std::invalid_argument(std::string(what) + " must be a JSON object");
  for (const auto& [k, v] : j.items()) {
    bool ok = false;
    for (const char* name : known) ok = ok || k == name;
    if (!ok) throw std::invalid_argument(std::string("unknown key '") + k + "' in " + what);
  }
}

std::vector<std::size_t> all_tasks(const TaskSuite& suite, const std::vector<std::size_t>& subset) {
  if (!subset.empty()) {
    for (std::size_t t : subset)
      if (t >= suite.n_tasks()) throw std::out_of_range("task index out of range");
    return subset;
  }
  std::vector<std::size_t> out(suite.n_tasks());
  std::iota(out.begin(), out.end(), 0);
  return out;
}

}  // namespace

void SuiteParams::validate() const {
  if (n_tasks == 0 || d == 0 || m == 0 || n_layers == 0)
    throw std::invalid_argument("suite dimensions must be positive");
  if (classes < 2) throw std::invalid_argument("need at least 2 classes per task");
  if (signal_dim == 0) throw std::invalid_argument("signal_dim must be positive");
  if (n_tasks * signal_dim >= m)
    throw std::invalid_argument("n_tasks * signal_dim must be smaller than m (got " +
                                std::to_string(n_tasks * signal_dim) + " >= " + std::to_string(m) + ")");
  if (n_train == 0 || n_eval == 0 || n_adapt == 0) throw std::invalid_argument("sample counts must be positive");
  if (!(class_sep > 0.0) || !(noise_std >= 0.0) || !std::isfinite(class_sep) || !std::isfinite(noise_std))
    throw std::invalid_argument("class_sep must be positive and noise_std nonnegative");
  if (shared_labels > classes) throw std::invalid_argument("shared_labels exceeds classes");
}

std::vector<int> TaskSuite::label_union() const {
  std::set<int> s;
  for (const auto& t : tasks) s.insert(t.label_ids.begin(), t.label_ids.end());
  return {s.begin(), s.end()};
}

TaskSuite generate_suite(const SuiteParams& p) {
  p.validate();
  TaskSuite suite;
  suite.params = p;

  KeyedRng basis_rng(p.seed, {kBasisStream});
  const Matrix q = svd(gaussian(p.m, p.m, 1.0, basis_rng)).u;
  const std::size_t used = p.n_tasks * p.signal_dim;

  // Layer 0 sees nothing of the signal subspaces: W0 = G (I - U U^T).
  for (std::size_t l = 0; l < p.n_layers; ++l) {
    suite.layer_ids.push_back("layer" + std::to_string(l));
    KeyedRng rng(p.seed, {kBaseStream, l});
    const std::size_t in = l == 0 ? p.m : p.d;
    Matrix w = gaussian(p.d, in, 1.0 / std::sqrt(static_cast<double>(in)), rng);
    if (l == 0) {
      Matrix proj = Matrix::identity(p.m);
      for (std::size_t k = 0; k < used; ++k) {
        const auto u = q.col(k);
        add_outer(proj, -1.0, u, u);
      }
      w = matmul(w, proj);
    }
    round_to_f32(w);
    suite.base.push_back(std::move(w));
  }

  for (std::size_t t = 0; t < p.n_tasks; ++t) {
    Task task;
    task.id = "task" + std::to_string(t);
    for (std::size_t c = 0; c < p.classes; ++c) {
      const std::size_t own = p.classes - p.shared_labels;
      task.label_ids.push_back(static_cast<int>(c < p.shared_labels ? c : p.shared_labels + t * own + (c - p.shared_labels)));
    }
    KeyedRng mean_rng(p.seed, {kMeanStream, t});
    task.class_means = Matrix(p.classes, p.m);
    for (std::size_t c = 0; c < p.classes; ++c)
      for (std::size_t k = 0; k < p.signal_dim; ++k) {
        const double coef = p.class_sep * mean_rng.normal();
        const auto u = q.col(t * p.signal_dim + k);
        for (std::size_t j = 0; j < p.m; ++j) task.class_means(c, j) += coef * u[j];
      }
    KeyedRng train_rng(p.seed, {kDataStream, t, 0});
    KeyedRng eval_rng(p.seed, {kDataStream, t, 1});
    KeyedRng adapt_rng(p.seed, {kDataStream, t, 2});
    task.train = sample_dataset(task.class_means, p.n_train, p.noise_std, train_rng);
    task.eval = sample_dataset(task.class_means, p.n_eval, p.noise_std, eval_rng);
    task.adapt = sample_dataset(task.class_means, p.n_adapt, p.noise_std, adapt_rng);
    KeyedRng head_rng(p.seed, {kHeadStream, t});
    task.head = gaussian(p.classes, p.d, 1.0 / std::sqrt(static_cast<double>(p.d)), head_rng);
    suite.tasks.push_back(std::move(task));
  }
  suite.preference.assign(p.n_tasks, 1.0 / static_cast<double>(p.n_tasks));
  return suite;
}

void add_twin_task(TaskSuite& suite, std::size_t source, const std::string& id, std::uint64_t seed) {
  if (source >= suite.n_tasks()) throw std::out_of_range("twin source out of range");
  for (const auto& t : suite.tasks)
    if (t.id == id) throw std::invalid_argument("task id '" + id + "' already exists");
  Task twin = suite.tasks[source];
  twin.id = id;
  const auto& p = suite.params;
  KeyedRng train_rng(seed, {kTwinStream, source, 0});
  KeyedRng eval_rng(seed, {kTwinStream, source, 1});
  KeyedRng adapt_rng(seed, {kTwinStream, source, 2});
  twin.train = sample_dataset(twin.class_means, p.n_train, p.noise_std, train_rng);
  twin.eval = sample_dataset(twin.class_means, p.n_eval, p.noise_std, eval_rng);
  twin.adapt = sample_dataset(twin.class_means, p.n_adapt, p.noise_std, adapt_rng);
  suite.tasks.push_back(std::move(twin));
  suite.preference.assign(suite.n_tasks(), 1.0 / static_cast<double>(suite.n_tasks()));
}

void FinetuneConfig::validate(const SuiteParams& p) const {
  if (rank == 0) throw std::invalid_argument("rank must be positive");
  const std::size_t limit = std::min(p.d, p.m);
  if (rank > limit)
    throw std::invalid_argument("rank " + std::to_string(rank) + " exceeds min(d, m) = " + std::to_string(limit));
  if (!(lora_alpha > 0.0)) throw std::invalid_argument("lora_alpha must be positive");
  if (!(lr > 0.0)) throw std::invalid_argument("lr must be positive");
  if (batch_size == 0) throw std::invalid_argument("batch_size must be positive");
}

FinetuneResult finetune_lora(const TaskSuite& suite, std::size_t task_idx, const FinetuneConfig& cfg) {
  cfg.validate(suite.params);
  if (task_idx >= suite.n_tasks()) throw std::out_of_range("task index out of range");
  const Task& task = suite.tasks[task_idx];
  const std::size_t n_layers = suite.n_layers();
  const double scale = cfg.lora_alpha / static_cast<double>(cfg.rank);

  FinetuneResult res;
  res.head = task.head;
  for (std::size_t l = 0; l < n_layers; ++l) {
    const Matrix& w0 = suite.base[l];
    KeyedRng rng(cfg.seed, {kLoraStream, task_idx, l});
    LoraAdapter ad{task.id, suite.layer_ids[l], Matrix(w0.rows(), cfg.rank),
                   gaussian(w0.cols(), cfg.rank, 1.0 / std::sqrt(static_cast<double>(w0.cols())), rng),
                   cfg.lora_alpha, cfg.dropout};
    res.adapters.push_back(std::move(ad));
  }

  // Flat parameter vector: per layer B then A, then the head.
  std::size_t n_params = 0;
  for (const auto& ad : res.adapters) n_params += ad.b.size() + ad.a.size();
  if (cfg.train_head) n_params += res.head.size();
  std::vector<double> params(n_params);
  auto pack = [&] {
    auto it = params.begin();
    for (const auto& ad : res.adapters) {
      it = std::copy(ad.b.data().begin(), ad.b.data().end(), it);
      it = std::copy(ad.a.data().begin(), ad.a.data().end(), it);
    }
    if (cfg.train_head) std::copy(res.head.data().begin(), res.head.data().end(), it);
  };
  auto unpack = [&] {
    auto it = params.begin();
    for (auto& ad : res.adapters) {
      std::copy(it, it + static_cast<std::ptrdiff_t>(ad.b.size()), ad.b.data().begin());
      it += static_cast<std::ptrdiff_t>(ad.b.size());
      std::copy(it, it + static_cast<std::ptrdiff_t>(ad.a.size()), ad.a.data().begin());
      it += static_cast<std::ptrdiff_t>(ad.a.size());
    }
    if (cfg.train_head) std::copy(it, it + static_cast<std::ptrdiff_t>(res.head.size()), res.head.data().begin());
  };
  auto merged = [&] {
    std::vector<Matrix> w;
    for (std::size_t l = 0; l < n_layers; ++l) w.push_back(suite.base[l] + delta_weight(res.adapters[l]));
    return w;
  };

  pack();
  AdamW opt(n_params, AdamWParams{cfg.lr, 0.9, 0.999, 1e-8, 0.0});
  std::vector<double> grad(n_params);
  double limit = 0.0;
  const std::size_t pool = task.train.size();
  Matrix xb(cfg.batch_size, task.train.x.cols());
  std::vector<int> yb(cfg.batch_size);
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    KeyedRng rng(cfg.seed, {kBatchStream, task_idx, step});
    for (std::size_t r = 0; r < cfg.batch_size; ++r) {
      const std::size_t idx = rng.below(pool);
      auto src = task.train.x.row(idx);
      std::copy(src.begin(), src.end(), xb.row(r).begin());
      yb[r] = task.train.y[idx];
    }
    const auto w = merged();
    const ForwardCache cache = forward(w, res.head, xb);
    const LossGrad lg = cross_entropy_loss_grad(cache.logits, yb);
    if (step == 0) limit = cfg.divergence_factor * std::max(lg.loss, 0.1);
    if (!std::isfinite(lg.loss) || lg.loss > limit)
      throw DivergenceError("fine-tuning " + task.id + " diverged at step " + std::to_string(step));
    res.loss_trace.push_back(lg.loss);
    const BackwardResult br = backward(cache, w, res.head, lg.dlogits, cfg.train_head);
    auto it = grad.begin();
    for (std::size_t l = 0; l < n_layers; ++l) {
      const auto& ad = res.adapters[l];
      // d/dB = s G A, d/dA = s G^T B
      Matrix gb = matmul(br.weight_grads[l], ad.a);
      gb *= scale;
      Matrix ga = matmul_tn(br.weight_grads[l], ad.b);
      ga *= scale;
      it = std::copy(gb.data().begin(), gb.data().end(), it);
      it = std::copy(ga.data().begin(), ga.data().end(), it);
    }
    if (cfg.train_head) std::copy(br.head_grad.data().begin(), br.head_grad.data().end(), it);
    opt.step(params, grad);
    unpack();
  }
  res.eval_accuracy = accuracy(predict_logits(merged(), res.head, task.eval.x), task.eval.y);
  return res;
}

ToyRun train_toy(const SuiteParams& params, const FinetuneConfig& ft) {
  ft.validate(params);
  ToyRun run{generate_suite(params), {}};
  auto& suite = run.suite;
  run.coll.task_ids.reserve(suite.n_tasks());
  for (std::size_t l = 0; l < suite.n_layers(); ++l) run.coll.layers.push_back({suite.layer_ids[l], suite.base[l], {}});
  for (std::size_t t = 0; t < suite.n_tasks(); ++t) {
    FinetuneResult fr = finetune_lora(suite, t, ft);
    run.coll.task_ids.push_back(suite.tasks[t].id);
    for (std::size_t l = 0; l < suite.n_layers(); ++l) run.coll.layers[l].adapters.push_back(std::move(fr.adapters[l]));
    suite.tasks[t].head = std::move(fr.head);
  }
  round_to_f32(run.coll);
  for (std::size_t t = 0; t < suite.n_tasks(); ++t) {
    std::vector<Matrix> w;
    for (const auto& layer : run.coll.layers) w.push_back(layer.base + delta_weight(layer.adapters[t]));
    Task& task = suite.tasks[t];
    task.reference_accuracy = accuracy(predict_logits(w, task.head, task.eval.x), task.eval.y);
  }
  return run;
}

const TaskScore& EvalReport::score(const std::string& task_id) const {
  for (const auto& s : tasks)
    if (s.task_id == task_id) return s;
  throw std::out_of_range("report has no task '" + task_id + "'");
}

EvalReport evaluate(std::span<const Matrix> weights, const TaskSuite& suite, const std::vector<std::size_t>& subset) {
  EvalReport r;
  for (std::size_t t : all_tasks(suite, subset)) {
    const Task& task = suite.tasks[t];
    if (!task.has_reference() || !(task.reference_accuracy > 0.0))
      throw std::invalid_argument("task " + task.id + " has no fine-tuned reference accuracy");
    const double acc = accuracy(predict_logits(weights, task.head, task.eval.x), task.eval.y);
    r.tasks.push_back(TaskScore{task.id, acc, 100.0 * acc / task.reference_accuracy});
  }
  for (const auto& s : r.tasks) {
    r.avg_accuracy += s.accuracy;
    r.avg_normalized += s.normalized;
  }
  if (!r.tasks.empty()) {
    r.avg_accuracy /= static_cast<double>(r.tasks.size());
    r.avg_normalized /= static_cast<double>(r.tasks.size());
  }
  return r;
}

Matrix joint_scores(std::span<const Matrix> weights, const TaskSuite& suite, const Matrix& x) {
  if (suite.tasks.empty()) throw std::invalid_argument("joint_scores: empty suite");
  const std::vector<int> labels = suite.label_union();
  const Matrix features = forward(weights, suite.tasks.front().head, x).features;
  Matrix out(x.rows(), labels.size(), -std::numeric_limits<double>::infinity());
  for (const auto& task : suite.tasks) {
    const Matrix logits = matmul_nt(features, task.head);
    for (std::size_t c = 0; c < task.n_classes(); ++c) {
      const auto u = static_cast<std::size_t>(std::lower_bound(labels.begin(), labels.end(), task.label_ids[c]) -
                                              labels.begin());
      for (std::size_t i = 0; i < x.rows(); ++i) out(i, u) = std::max(out(i, u), logits(i, c));
    }
  }
  return out;
}

std::vector<std::pair<std::size_t, double>> evaluate_joint(std::span<const Matrix> weights, const TaskSuite& suite,
                                                           std::vector<std::size_t> ks,
                                                           const std::vector<std::size_t>& subset) {
  const std::vector<int> labels = suite.label_union();
  for (std::size_t k : ks)
    if (k == 0 || k > labels.size())
      throw std::invalid_argument("Hits@" + std::to_string(k) + " needs 1 <= k <= " + std::to_string(labels.size()));
  std::vector<std::size_t> hits(ks.size(), 0);
  std::size_t total = 0;
  for (std::size_t t : all_tasks(suite, subset)) {
    const Task& task = suite.tasks[t];
    const Matrix s = joint_scores(weights, suite, task.eval.x);
    for (std::size_t i = 0; i < task.eval.size(); ++i) {
      const int label = task.label_ids[static_cast<std::size_t>(task.eval.y[i])];
      const auto u = static_cast<std::size_t>(std::lower_bound(labels.begin(), labels.end(), label) - labels.begin());
      const double su = s(i, u);
      std::size_t rank = 0;
      for (std::size_t j = 0; j < labels.size(); ++j)
        if (s(i, j) > su || (s(i, j) == su && j < u)) ++rank;
      for (std::size_t q = 0; q < ks.size(); ++q) hits[q] += rank < ks[q];
      ++total;
    }
  }
  std::vector<std::pair<std::size_t, double>> out;
  for (std::size_t q = 0; q < ks.size(); ++q)
    out.emplace_back(ks[q], total ? static_cast<double>(hits[q]) / static_cast<double>(total) : 0.0);
  return out;
}

const std::vector<std::string>& method_names() {
  static const std::vector<std::string> names{"ta",        "ties",       "dare_ties", "linear",
                                              "svd",       "knots_ties", "knots_dare_ties",
                                              "lora_lego", "tara-a",     "tara-b",    "adamerging"};
  return names;
}

bool MethodSpec::is_optimized() const { return name == "tara-a" || name == "tara-b" || name == "adamerging"; }

void MethodSpec::validate() const {
  const auto& names = method_names();
  if (std::find(names.begin(), names.end(), name) == names.end())
    throw std::invalid_argument("unknown method '" + name + "'");
  if (!(alpha > 0.0)) throw std::invalid_argument("alpha must be positive");
  if (pref) pref->validate();
  if (is_optimized()) {
    if (optim.batch_size == 0) throw std::invalid_argument("batch_size must be positive");
    if (!(optim.adam.lr > 0.0)) throw std::invalid_argument("lr must be positive");
  } else {
    merge.validate();
  }
}

MethodOutcome run_method(const AdapterCollection& coll, const TaskSuite& suite, const MethodSpec& spec) {
  spec.validate();
  const Preference pref = spec.pref.value_or(Preference::uniform(coll.n_tasks()));
  if (pref.rho.size() != coll.n_tasks())
    throw std::invalid_argument("preference has " + std::to_string(pref.rho.size()) + " entries for " +
                                std::to_string(coll.n_tasks()) + " tasks");
  MethodOutcome out;
  if (spec.name == "tara-a" || spec.name == "tara-b") {
    const auto kind = spec.name == "tara-a" ? BasisKind::variant_a : BasisKind::variant_b;
    MergeRun run = run_tara(coll, suite, kind, pref, spec.alpha, spec.optim, spec.shared_rank);
    out.weights = run.weights;
    out.run = std::move(run);
  } else if (spec.name == "adamerging") {
    MergeRun run = adamerging_baseline(coll, suite, spec.optim, pref);
    out.weights = run.weights;
    out.run = std::move(run);
  } else {
    MergeConfig cfg = spec.merge;
    cfg.method = *parse_merge_method(spec.name);
    out.weights = merge(coll, cfg);
  }
  return out;
}

std::vector<SweepPoint> sweep_preferences(const AdapterCollection& coll, const TaskSuite& suite,
                                          const std::vector<Preference>& prefs, const MethodSpec& spec,
                                          std::size_t threads) {
  if (prefs.empty()) throw std::invalid_argument("preference list is empty");
  for (const auto& p : prefs) {
    p.validate();
    if (p.rho.size() != coll.n_tasks()) throw std::invalid_argument("preference length does not match task count");
  }
  std::vector<std::size_t> subset;
  for (const auto& id : coll.task_ids)
    for (std::size_t t = 0; t < suite.n_tasks(); ++t)
      if (suite.tasks[t].id == id) subset.push_back(t);

  std::vector<std::optional<SweepPoint>> slots(prefs.size());
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mu;
  auto worker = [&] {
    for (std::size_t i = next++; i < prefs.size(); i = next++) {
      try {
        MethodSpec s = spec;
        s.pref = prefs[i];
        const MethodOutcome o = run_method(coll, suite, s);
        slots[i] = SweepPoint{prefs[i], evaluate(o.weights, suite, subset)};
      } catch (...) {
        std::lock_guard lock(failure_mu);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  threads = std::min(threads, prefs.size());
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t i = 0; i < threads; ++i) pool.emplace_back(worker);
  }
  if (failure) std::rethrow_exception(failure);
  std::vector<SweepPoint> out;
  for (auto& s : slots) out.push_back(std::move(*s));
  return out;
}

std::vector<Preference> two_task_grid(std::size_t points, double lo, double hi) {
  if (points < 2) throw std::invalid_argument("two_task_grid needs at least 2 points");
  if (!(lo >= 0.0 && hi <= 1.0 && lo < hi)) throw std::invalid_argument("two_task_grid needs 0 <= lo < hi <= 1");
  std::vector<Preference> out;
  for (std::size_t i = 0; i < points; ++i) {
    const double t = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(points - 1);
    out.push_back(Preference{{t, 1.0 - t}});
  }
  return out;
}

std::vector<Preference> random_completions(std::size_t n_tasks, const std::map<std::size_t, double>& fixed,
                                           std::size_t k, std::uint64_t seed) {
  if (k == 0) throw std::invalid_argument("random_completions: k must be positive");
  double fixed_sum = 0.0;
  for (const auto& [i, v] : fixed) {
    if (i >= n_tasks) throw std::invalid_argument("fixed preference index " + std::to_string(i) + " out of range");
    if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument("fixed preference values must lie in [0, 1]");
    fixed_sum += v;
  }
  if (fixed_sum > 1.0 + 1e-12) throw std::invalid_argument("fixed preferences sum above 1");
  std::vector<std::size_t> free;
  for (std::size_t i = 0; i < n_tasks; ++i)
    if (!fixed.count(i)) free.push_back(i);
  const double remaining = std::max(0.0, 1.0 - fixed_sum);
  if (free.empty() && remaining > 1e-12) throw std::invalid_argument("fixed preferences must sum to 1 when all are fixed");

  std::vector<Preference> out;
  for (std::size_t s = 0; s < k; ++s) {
    KeyedRng rng(seed, {kSimplexStream, s});
    Preference p{std::vector<double>(n_tasks, 0.0)};
    for (const auto& [i, v] : fixed) p.rho[i] = v;
    // Normalized exponentials are uniform on the simplex.
    std::vector<double> e(free.size());
    double total = 0.0;
    for (double& v : e) {
      double u = 0.0;
      do {
        u = rng.uniform();
      } while (u <= 0.0);
      v = -std::log(u);
      total += v;
    }
    double assigned = 0.0;
    for (std::size_t j = 0; j + 1 < free.size(); ++j) {
      p.rho[free[j]] = remaining * e[j] / total;
      assigned += p.rho[free[j]];
    }
    if (!free.empty()) p.rho[free.back()] = std::max(0.0, remaining - assigned);
    out.push_back(std::move(p));
  }
  return out;
}

double focal_covariance(const std::vector<SweepPoint>& pts, const std::string& a, const std::string& b) {
  if (pts.size() < 2) throw std::invalid_argument("focal_covariance needs at least 2 points");
  double ma = 0.0;
  double mb = 0.0;
  for (const auto& p : pts) {
    ma += p.report.score(a).accuracy;
    mb += p.report.score(b).accuracy;
  }
  ma /= static_cast<double>(pts.size());
  mb /= static_cast<double>(pts.size());
  double c = 0.0;
  for (const auto& p : pts) c += (p.report.score(a).accuracy - ma) * (p.report.score(b).accuracy - mb);
  return c / static_cast<double>(pts.size() - 1);
}

EvalReport unseen_split_eval(const AdapterCollection& coll, const TaskSuite& suite,
                             const std::vector<std::size_t>& seen, const MethodSpec& spec) {
  if (seen.empty()) throw std::invalid_argument("unseen_split_eval: no seen tasks to merge");
  const AdapterCollection sub = coll.subset(seen);
  MethodSpec s = spec;
  if (s.pref && s.pref->rho.size() != sub.n_tasks()) s.pref.reset();
  const MethodOutcome o = run_method(sub, suite, s);
  EvalReport r = evaluate(o.weights, suite);
  SplitSummary split;
  split.seen = sub.task_ids;
  double seen_sum = 0.0;
  double unseen_sum = 0.0;
  for (const auto& score : r.tasks) {
    if (std::find(split.seen.begin(), split.seen.end(), score.task_id) != split.seen.end()) {
      seen_sum += score.normalized;
    } else {
      split.unseen.push_back(score.task_id);
      unseen_sum += score.normalized;
    }
  }
  split.seen_avg = seen_sum / static_cast<double>(split.seen.size());
  if (!split.unseen.empty()) split.unseen_avg = unseen_sum / static_cast<double>(split.unseen.size());
  split.combined_avg = r.avg_normalized;
  r.split = std::move(split);
  return r;
}

std::vector<double> isotonic_increasing(std::span<const double> y) {
  std::vector<double> level;
  std::vector<std::size_t> width;
  for (double v : y) {
    level.push_back(v);
    width.push_back(1);
    while (level.size() > 1 && level[level.size() - 2] > level.back()) {
      const std::size_t w = width[width.size() - 2] + width.back();
      const double merged = (level[level.size() - 2] * static_cast<double>(width[width.size() - 2]) +
                             level.back() * static_cast<double>(width.back())) /
                            static_cast<double>(w);
      level.pop_back();
      width.pop_back();
      level.back() = merged;
      width.back() = w;
    }
  }
  std::vector<double> out;
  for (std::size_t b = 0; b < level.size(); ++b) out.insert(out.end(), width[b], level[b]);
  return out;
}

namespace {
std::vector<double> average_ranks(std::span<const double> v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t q = i; q <= j; ++q) ranks[order[q]] = r;
    i = j + 1;
  }
  return ranks;
}
}  // namespace

double spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) throw std::invalid_argument("spearman needs two equal samples of size >= 2");
  const auto rx = average_ranks(x);
  const auto ry = average_ranks(y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0.0;
  double sxx = 0.0;
  double syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

json to_json(const SuiteParams& p) {
  return {{"n_tasks", p.n_tasks},     {"d", p.d},
          {"m", p.m},                 {"classes", p.classes},
          {"n_layers", p.n_layers},   {"n_train", p.n_train},
          {"n_eval", p.n_eval},       {"n_adapt", p.n_adapt},
          {"signal_dim", p.signal_dim}, {"class_sep", p.class_sep},
          {"noise_std", p.noise_std}, {"shared_labels", p.shared_labels},
          {"seed", p.seed}};
}

SuiteParams suite_params_from_json(const json& j) {
  reject_unknown(j,
                 {"n_tasks", "d", "m", "classes", "n_layers", "n_train", "n_eval", "n_adapt", "signal_dim",
                  "class_sep", "noise_std", "shared_labels", "seed"},
                 "suite parameters");
  SuiteParams p;
  auto get = [&](const char* k, auto& field) {
    if (j.contains(k)) field = j.at(k).get<std::remove_reference_t<decltype(field)>>();
  };
  get("n_tasks", p.n_tasks);
  get("d", p.d);
  get("m", p.m);
  get("classes", p.classes);
  get("n_layers", p.n_layers);
  get("n_train", p.n_train);
  get("n_eval", p.n_eval);
  get("n_adapt", p.n_adapt);
  get("signal_dim", p.signal_dim);
  get("class_sep", p.class_sep);
  get("noise_std", p.noise_std);
  get("shared_labels", p.shared_labels);
  get("seed", p.seed);
  return p;
}

json to_json(const FinetuneConfig& c) {
  return {{"rank", c.rank},         {"lora_alpha", c.lora_alpha}, {"dropout", c.dropout},
          {"steps", c.steps},       {"lr", c.lr},                 {"batch_size", c.batch_size},
          {"train_head", c.train_head}, {"seed", c.seed},         {"divergence_factor", c.divergence_factor}};
}

FinetuneConfig finetune_config_from_json(const json& j) {
  reject_unknown(j, {"rank", "lora_alpha", "dropout", "steps", "lr", "batch_size", "train_head", "seed",
                     "divergence_factor"},
                 "fine-tuning config");
  FinetuneConfig c;
  auto get = [&](const char* k, auto& field) {
    if (j.contains(k)) field = j.at(k).get<std::remove_reference_t<decltype(field)>>();
  };
  get("rank", c.rank);
  get("lora_alpha", c.lora_alpha);
  get("dropout", c.dropout);
  get("steps", c.steps);
  get("lr", c.lr);
  get("batch_size", c.batch_size);
  get("train_head", c.train_head);
  get("seed", c.seed);
  get("divergence_factor", c.divergence_factor);
  return c;
}

json suite_sidecar(const TaskSuite& suite) {
  json tasks = json::array();
  for (const auto& t : suite.tasks)
    tasks.push_back({{"id", t.id},
                     {"label_ids", t.label_ids},
                     {"head", matrix_json(t.head)},
                     {"reference_accuracy", t.has_reference() ? json(t.reference_accuracy) : json(nullptr)}});
  return {{"format", "lmk-suite"}, {"version", 1}, {"params", to_json(suite.params)},
          {"layer_ids", suite.layer_ids}, {"tasks", tasks}};
}

TaskSuite suite_from_sidecar(const json& j) {
  if (j.value("format", "") != "lmk-suite") throw std::invalid_argument("not an lmk suite sidecar");
  TaskSuite suite = generate_suite(suite_params_from_json(j.at("params")));
  if (j.at("layer_ids").get<std::vector<std::string>>() != suite.layer_ids)
    throw std::invalid_argument("sidecar layer ids do not match the generator");
  const auto& tasks = j.at("tasks");
  if (tasks.size() != suite.n_tasks()) throw std::invalid_argument("sidecar task count does not match the generator");
  for (std::size_t t = 0; t < suite.n_tasks(); ++t) {
    const auto& jt = tasks[t];
    Task& task = suite.tasks[t];
    if (jt.at("id").get<std::string>() != task.id) throw std::invalid_argument("sidecar task order mismatch");
    if (jt.at("label_ids").get<std::vector<int>>() != task.label_ids)
      throw std::invalid_argument("sidecar label ids mismatch for " + task.id);
    Matrix head = matrix_from_json(jt.at("head"));
    if (!head.same_shape(task.head)) throw std::invalid_argument("sidecar head shape mismatch for " + task.id);
    task.head = std::move(head);
    if (!jt.at("reference_accuracy").is_null()) task.reference_accuracy = jt.at("reference_accuracy").get<double>();
  }
  return suite;
}

json to_json(const EvalReport& r) {
  json tasks = json::array();
  for (const auto& s : r.tasks)
    tasks.push_back({{"task", s.task_id}, {"accuracy", s.accuracy}, {"normalized", s.normalized}});
  json j{{"tasks", tasks}, {"avg_accuracy", r.avg_accuracy}, {"avg_normalized", r.avg_normalized}};
  if (!r.hits.empty()) {
    json h = json::object();
    for (const auto& [k, v] : r.hits) h["hits@" + std::to_string(k)] = v;
    j["joint"] = h;
  }
  if (r.split) {
    j["split"] = {{"seen", r.split->seen},
                  {"unseen", r.split->unseen},
                  {"seen_avg", r.split->seen_avg},
                  {"unseen_avg", r.split->unseen_avg ? json(*r.split->unseen_avg) : json(nullptr)},
                  {"combined_avg", r.split->combined_avg}};
  }
  return j;
}

std::string to_csv(const EvalReport& r) {
  std::ostringstream os;
  os << "task,accuracy,normalized\n";
  for (const auto& s : r.tasks) os << s.task_id << ',' << fmt(s.accuracy) << ',' << fmt(s.normalized) << '\n';
  os << "average," << fmt(r.avg_accuracy) << ',' << fmt(r.avg_normalized) << '\n';
  return os.str();
}

std::string sweep_csv(const std::vector<SweepPoint>& pts) {
  std::ostringstream os;
  if (pts.empty()) return os.str();
  for (std::size_t i = 0; i < pts.front().pref.rho.size(); ++i) os << "rho" << i << ',';
  for (std::size_t t = 0; t < pts.front().report.tasks.size(); ++t) os << "acc_" << pts.front().report.tasks[t].task_id << ',';
  os << "avg_normalized\n";
  for (const auto& p : pts) {
    for (double v : p.pref.rho) os << fmt(v) << ',';
    for (const auto& s : p.report.tasks) os << fmt(s.accuracy) << ',';
    os << fmt(p.report.avg_normalized) << '\n';
  }
  return os.str();
}

}  // namespace lmk
