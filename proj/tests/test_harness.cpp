// Copyright 2026 The lmk Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "lmk/harness.hpp"
#include "lmk/model.hpp"
#include "test_util.hpp"

using namespace lmk;
using namespace lmk::testing;

namespace {

SuiteParams small_params(std::uint64_t seed = 3) {
  SuiteParams p;
  p.n_tasks = 3;
  p.d = 8;
  p.m = 10;
  p.classes = 3;
  p.signal_dim = 2;
  p.n_train = 80;
  p.n_eval = 40;
  p.n_adapt = 40;
  p.seed = seed;
  return p;
}

FinetuneConfig small_finetune() {
  FinetuneConfig c;
  c.rank = 3;
  c.lora_alpha = 3.0;
  c.steps = 60;
  c.batch_size = 16;
  return c;
}

const ToyRun& small_toy() {
  static const ToyRun run = train_toy(small_params(), small_finetune());
  return run;
}

std::vector<Matrix> task_weights(const AdapterCollection& c, std::size_t t) {
  std::vector<Matrix> w;
  for (const auto& layer : c.layers) w.push_back(layer.base + delta_weight(layer.adapters[t]));
  return w;
}

std::vector<Matrix> base_weights(const TaskSuite& s) { return s.base; }

/// Isotonic fit from the min-max formula: max over j <= i of min over k >= i of mean(y[j..k]).
std::vector<double> isotonic_minmax(const std::vector<double>& y) {
  const std::size_t n = y.size();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    double best = -1e300;
    for (std::size_t j = 0; j <= i; ++j) {
      double lo = 1e300;
      for (std::size_t k = i; k < n; ++k) {
        double s = 0.0;
        for (std::size_t q = j; q <= k; ++q) s += y[q];
        lo = std::min(lo, s / static_cast<double>(k - j + 1));
      }
      best = std::max(best, lo);
    }
    out[i] = best;
  }
  return out;
}

}  // namespace

TEST_CASE("suite generation is a pure function of its parameters") {
  const TaskSuite a = generate_suite(small_params(11));
  const TaskSuite b = generate_suite(small_params(11));
  const TaskSuite c = generate_suite(small_params(12));
  REQUIRE(a.n_tasks() == 3);
  REQUIRE(a.n_layers() == 2);
  for (std::size_t l = 0; l < 2; ++l) CHECK(a.base[l] == b.base[l]);
  for (std::size_t t = 0; t < 3; ++t) {
    CHECK(a.tasks[t].train.x == b.tasks[t].train.x);
    CHECK(a.tasks[t].train.y == b.tasks[t].train.y);
    CHECK(a.tasks[t].head == b.tasks[t].head);
  }
  CHECK_FALSE(a.base[0] == c.base[0]);
  CHECK(a.base[0].rows() == 8);
  CHECK(a.base[0].cols() == 10);
  CHECK(a.base[1].rows() == 8);
  CHECK(a.base[1].cols() == 8);
  CHECK(a.preference == std::vector<double>(3, 1.0 / 3.0));
}

TEST_CASE("the base layer is blind to every task's signal") {
  const TaskSuite s = generate_suite(small_params(4));
  for (const auto& task : s.tasks) {
    // W0 mu for each class mean mu; base weights are binary32-rounded so only approximately zero
    const Matrix proj = matmul_nt(s.base[0], task.class_means);
    CHECK(naive_fro(proj) <= 1e-5 * naive_fro(task.class_means));
  }
}

TEST_CASE("label ids are disjoint unless shared") {
  SuiteParams p = small_params();
  const TaskSuite s = generate_suite(p);
  CHECK(s.label_union().size() == 9);
  p.shared_labels = 1;
  const TaskSuite shared = generate_suite(p);
  CHECK(shared.label_union().size() == 7);
  for (const auto& t : shared.tasks) CHECK(t.label_ids[0] == 0);
}

TEST_CASE("suite parameter validation") {
  SuiteParams p = small_params();
  p.classes = 1;
  CHECK_THROWS_AS(generate_suite(p), std::invalid_argument);
  p = small_params();
  p.signal_dim = 4;  // 3 * 4 >= m
  CHECK_THROWS_AS(generate_suite(p), std::invalid_argument);
  p = small_params();
  p.shared_labels = 4;
  CHECK_THROWS_AS(generate_suite(p), std::invalid_argument);
  FinetuneConfig f = small_finetune();
  f.rank = 9;
  CHECK_THROWS_AS(f.validate(small_params()), std::invalid_argument);
}

TEST_CASE("twin tasks share means and head but not samples") {
  TaskSuite s = generate_suite(small_params());
  add_twin_task(s, 1, "twin", 99);
  REQUIRE(s.n_tasks() == 4);
  const Task& twin = s.tasks[3];
  CHECK(twin.class_means == s.tasks[1].class_means);
  CHECK(twin.head == s.tasks[1].head);
  CHECK(twin.label_ids == s.tasks[1].label_ids);
  CHECK_FALSE(twin.train.x == s.tasks[1].train.x);
  CHECK(s.preference.size() == 4);
  CHECK_THROWS_AS(add_twin_task(s, 0, "twin", 1), std::invalid_argument);
  CHECK_THROWS_AS(add_twin_task(s, 7, "other", 1), std::out_of_range);
}

TEST_CASE("zero fine-tuning steps leave the base untouched") {
  const TaskSuite s = generate_suite(small_params());
  FinetuneConfig f = small_finetune();
  f.steps = 0;
  const FinetuneResult r = finetune_lora(s, 0, f);
  REQUIRE(r.adapters.size() == 2);
  for (const auto& ad : r.adapters) CHECK(naive_fro(delta_weight(ad)) == 0.0);
  CHECK(r.head == s.tasks[0].head);
  CHECK(r.loss_trace.empty());
}

TEST_CASE("fine-tuning learns and is deterministic") {
  const TaskSuite s = generate_suite(small_params());
  const FinetuneResult a = finetune_lora(s, 0, small_finetune());
  const FinetuneResult b = finetune_lora(s, 0, small_finetune());
  CHECK(a.head == b.head);
  for (std::size_t l = 0; l < 2; ++l) CHECK(a.adapters[l] == b.adapters[l]);
  CHECK(a.loss_trace.back() < a.loss_trace.front());
  const double chance = 1.0 / 3.0;
  CHECK(a.eval_accuracy > chance + 0.2);
  // the base network alone cannot see the task
  const double base_acc = accuracy(predict_logits(s.base, s.tasks[0].head, s.tasks[0].eval.x), s.tasks[0].eval.y);
  CHECK(a.eval_accuracy > base_acc);
}

TEST_CASE("train_toy rounds to binary32 and records references") {
  const ToyRun& run = small_toy();
  CHECK(run.coll.task_ids == std::vector<std::string>{"task0", "task1", "task2"});
  for (const auto& layer : run.coll.layers) {
    for (double v : layer.base.data()) CHECK(static_cast<double>(static_cast<float>(v)) == v);
    for (const auto& ad : layer.adapters) {
      for (double v : ad.a.data()) CHECK(static_cast<double>(static_cast<float>(v)) == v);
      for (double v : ad.b.data()) CHECK(static_cast<double>(static_cast<float>(v)) == v);
    }
  }
  for (std::size_t t = 0; t < 3; ++t) {
    const Task& task = run.suite.tasks[t];
    REQUIRE(task.has_reference());
    const double acc = accuracy(predict_logits(task_weights(run.coll, t), task.head, task.eval.x), task.eval.y);
    CHECK(acc == task.reference_accuracy);
  }
}

TEST_CASE("each task's own weights score 100 normalized") {
  const ToyRun& run = small_toy();
  for (std::size_t t = 0; t < 3; ++t) {
    const EvalReport r = evaluate(task_weights(run.coll, t), run.suite, {t});
    REQUIRE(r.tasks.size() == 1);
    CHECK(r.tasks[0].normalized == doctest::Approx(100.0).epsilon(1e-12));
    CHECK(r.avg_normalized == doctest::Approx(100.0).epsilon(1e-12));
  }
  const EvalReport all = evaluate(base_weights(run.suite), run.suite);
  double mean = 0.0;
  for (const auto& s : all.tasks) mean += s.normalized;
  CHECK(all.avg_normalized == doctest::Approx(mean / 3.0));
  CHECK_THROWS_AS(all.score("nope"), std::out_of_range);
  TaskSuite fresh = generate_suite(small_params());
  CHECK_THROWS_AS(evaluate(fresh.base, fresh), std::invalid_argument);
}

TEST_CASE("joint scoring takes the max over shared labels and breaks ties by union index") {
  // one identity layer, two tasks with two classes each, label 0 shared
  TaskSuite s;
  s.params.n_tasks = 2;
  s.layer_ids = {"layer0"};
  s.base = {Matrix::identity(2)};
  for (int t = 0; t < 2; ++t) {
    Task task;
    task.id = "t" + std::to_string(t);
    task.label_ids = {0, 1 + t};
    task.head = Matrix(2, 2);
    task.reference_accuracy = 1.0;
    task.eval.x = Matrix(1, 2);
    task.eval.y = {t == 0 ? 0 : 1};
    s.tasks.push_back(std::move(task));
  }
  // t0: label0 <- x0, label1 <- x1; t1: label0 <- 2 x0, label2 <- x1
  s.tasks[0].head(0, 0) = 1.0;
  s.tasks[0].head(1, 1) = 1.0;
  s.tasks[1].head(0, 0) = 2.0;
  s.tasks[1].head(1, 1) = 1.0;
  Matrix x(1, 2);
  x(0, 0) = 1.0;
  x(0, 1) = 3.0;
  const Matrix js = joint_scores(s.base, s, x);
  REQUIRE(js.cols() == 3);
  CHECK(js(0, 0) == 2.0);
  CHECK(js(0, 1) == 3.0);
  CHECK(js(0, 2) == 3.0);

  // all-equal scores: the rank of a label is its union index
  const auto hits = evaluate_joint(s.base, s, {1, 2, 3});
  // t0 sample has label 0 (rank 0), t1 sample has label 2 (rank 2)
  REQUIRE(hits.size() == 3);
  CHECK(hits[0].second == 0.5);
  CHECK(hits[1].second == 0.5);
  CHECK(hits[2].second == 1.0);

  // label 2 scores 1 but label 1 also scores 1 through the other task's head and sits earlier
  s.tasks[1].eval.x(0, 1) = 1.0;
  const auto hits2 = evaluate_joint(s.base, s, {1, 2}, {1});
  CHECK(hits2[0].second == 0.0);
  CHECK(hits2[1].second == 1.0);
  s.tasks[1].head(1, 1) = 1.5;
  CHECK(evaluate_joint(s.base, s, {1}, {1})[0].second == 1.0);
  CHECK_THROWS_AS(evaluate_joint(s.base, s, {4}), std::invalid_argument);
  CHECK_THROWS_AS(evaluate_joint(s.base, s, {0}), std::invalid_argument);
}

TEST_CASE("Hits@k is monotone in k and reaches 1 at the label count") {
  const ToyRun& run = small_toy();
  const auto hits = evaluate_joint(task_weights(run.coll, 0), run.suite, {1, 2, 5, 9});
  for (std::size_t i = 1; i < hits.size(); ++i) CHECK(hits[i].second >= hits[i - 1].second);
  CHECK(hits.back().second == 1.0);
}

TEST_CASE("random completions respect the fixed entries") {
  const auto prefs = random_completions(4, {{1, 0.3}, {3, 0.1}}, 25, 8);
  REQUIRE(prefs.size() == 25);
  for (const auto& p : prefs) {
    CHECK(p.rho[1] == 0.3);
    CHECK(p.rho[3] == 0.1);
    CHECK(p.rho[0] >= 0.0);
    CHECK(p.rho[2] >= 0.0);
    CHECK(std::accumulate(p.rho.begin(), p.rho.end(), 0.0) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK_NOTHROW(p.validate());
  }
  CHECK(prefs[0].rho != prefs[1].rho);
  const auto again = random_completions(4, {{1, 0.3}, {3, 0.1}}, 25, 8);
  for (std::size_t i = 0; i < 25; ++i) CHECK(again[i].rho == prefs[i].rho);
  CHECK_THROWS_AS(random_completions(3, {{0, 0.7}, {1, 0.6}}, 2, 0), std::invalid_argument);
  CHECK_THROWS_AS(random_completions(3, {{5, 0.1}}, 2, 0), std::invalid_argument);
  CHECK_THROWS_AS(random_completions(2, {{0, 0.4}, {1, 0.4}}, 2, 0), std::invalid_argument);
  CHECK_THROWS_AS(random_completions(2, {}, 0, 0), std::invalid_argument);
}

TEST_CASE("random completions are roughly uniform on the free simplex") {
  // for 3 free entries each marginal has mean remaining / 3
  const auto prefs = random_completions(4, {{0, 0.4}}, 4000, 21);
  double m1 = 0.0;
  for (const auto& p : prefs) m1 += p.rho[1];
  m1 /= 4000.0;
  // Beta(1, 2) scaled by 0.6: sd = 0.6 * sqrt(1/18) / sqrt(4000)
  CHECK(std::abs(m1 - 0.2) <= 4.0 * 0.6 * std::sqrt(1.0 / 18.0) / std::sqrt(4000.0));
}

TEST_CASE("two-task grid") {
  const auto g = two_task_grid(5, 0.0, 1.0);
  REQUIRE(g.size() == 5);
  CHECK(g[0].rho == std::vector<double>{0.0, 1.0});
  CHECK(g[2].rho[0] == doctest::Approx(0.5));
  CHECK(g[4].rho == std::vector<double>{1.0, 0.0});
  CHECK_THROWS_AS(two_task_grid(1), std::invalid_argument);
  CHECK_THROWS_AS(two_task_grid(3, 0.5, 0.2), std::invalid_argument);
}

TEST_CASE("isotonic fit matches the min-max formula") {
  CHECK(isotonic_increasing(std::vector<double>{1, 3, 2, 4}) == std::vector<double>{1, 2.5, 2.5, 4});
  CHECK(isotonic_increasing(std::vector<double>{}).empty());
  KeyedRng rng(5, {0x150});
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + rng.below(12);
    std::vector<double> y(n);
    for (double& v : y) v = rng.below(4) == 0 ? 1.0 : rng.normal();  // some ties
    const auto fit = isotonic_increasing(y);
    const auto want = isotonic_minmax(y);
    REQUIRE(fit.size() == n);
    for (std::size_t i = 0; i < n; ++i) CHECK(fit[i] == doctest::Approx(want[i]).epsilon(1e-12).scale(1.0));
    for (std::size_t i = 1; i < n; ++i) CHECK(fit[i] >= fit[i - 1]);
    CHECK(std::accumulate(fit.begin(), fit.end(), 0.0) ==
          doctest::Approx(std::accumulate(y.begin(), y.end(), 0.0)).scale(1.0));
  }
}

TEST_CASE("spearman") {
  const std::vector<double> x{1, 2, 3, 4, 5};
  CHECK(spearman(x, std::vector<double>{2, 4, 6, 8, 100}) == doctest::Approx(1.0));
  CHECK(spearman(x, std::vector<double>{5, 4, 3, 2, 1}) == doctest::Approx(-1.0));
  CHECK(spearman(x, std::vector<double>{7, 7, 7, 7, 7}) == 0.0);
  // no ties: 1 - 6 sum d^2 / (n (n^2 - 1)); ranks of y are 2 1 4 3 5
  CHECK(spearman(x, std::vector<double>{0.2, 0.1, 0.4, 0.3, 0.5}) == doctest::Approx(1.0 - 6.0 * 4.0 / 120.0));
  // ties get average ranks: y ranks 1.5 1.5 3 4 5
  const double rx[] = {1, 2, 3, 4, 5};
  const double ry[] = {1.5, 1.5, 3, 4, 5};
  double sxy = 0, sxx = 0, syy = 0;
  for (int i = 0; i < 5; ++i) {
    sxy += (rx[i] - 3) * (ry[i] - 3);
    sxx += (rx[i] - 3) * (rx[i] - 3);
    syy += (ry[i] - 3) * (ry[i] - 3);
  }
  CHECK(spearman(x, std::vector<double>{1, 1, 2, 3, 4}) == doctest::Approx(sxy / std::sqrt(sxx * syy)));
  CHECK_THROWS_AS(spearman(x, std::vector<double>{1, 2}), std::invalid_argument);
}

TEST_CASE("configuration JSON round trips and rejects unknown keys") {
  SuiteParams p = small_params(42);
  p.class_sep = 3.5;
  const SuiteParams q = suite_params_from_json(to_json(p));
  CHECK(to_json(q) == to_json(p));
  CHECK(suite_params_from_json(nlohmann::json::object()).n_tasks == SuiteParams{}.n_tasks);
  CHECK_THROWS_AS(suite_params_from_json(nlohmann::json{{"n_task", 3}}), std::invalid_argument);
  CHECK_THROWS_AS(suite_params_from_json(nlohmann::json::array()), std::invalid_argument);

  FinetuneConfig f = small_finetune();
  f.train_head = false;
  CHECK(to_json(finetune_config_from_json(to_json(f))) == to_json(f));
  CHECK_THROWS_AS(finetune_config_from_json(nlohmann::json{{"learning_rate", 0.1}}), std::invalid_argument);
}

TEST_CASE("suite sidecar restores heads and references") {
  const ToyRun& run = small_toy();
  const nlohmann::json side = nlohmann::json::parse(suite_sidecar(run.suite).dump());
  const TaskSuite back = suite_from_sidecar(side);
  for (std::size_t t = 0; t < 3; ++t) {
    CHECK(back.tasks[t].head == run.suite.tasks[t].head);
    CHECK(back.tasks[t].reference_accuracy == run.suite.tasks[t].reference_accuracy);
    CHECK(back.tasks[t].eval.x == run.suite.tasks[t].eval.x);
  }
  nlohmann::json bad = side;
  bad["format"] = "other";
  CHECK_THROWS_AS(suite_from_sidecar(bad), std::invalid_argument);
  bad = side;
  bad["tasks"][1]["id"] = "renamed";
  CHECK_THROWS_AS(suite_from_sidecar(bad), std::invalid_argument);
  bad = side;
  bad["tasks"].erase(2);
  CHECK_THROWS_AS(suite_from_sidecar(bad), std::invalid_argument);
  bad = side;
  bad["tasks"][0]["head"]["rows"] = 2;
  CHECK_THROWS(suite_from_sidecar(bad));
}

TEST_CASE("method specs") {
  MethodSpec s;
  s.name = "nope";
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);
  s.name = "tara-b";
  CHECK(s.is_optimized());
  s.alpha = 0.0;
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);
  CHECK(method_names().size() == 11);
  const ToyRun& run = small_toy();
  MethodSpec ta;
  ta.pref = Preference::uniform(2);
  CHECK_THROWS_AS(run_method(run.coll, run.suite, ta), std::invalid_argument);
}

TEST_CASE("every method runs on the toy and returns one matrix per layer") {
  const ToyRun& run = small_toy();
  for (const auto& name : method_names()) {
    MethodSpec s;
    s.name = name;
    s.merge.rng_seed = 1;
    s.merge.k_clusters = 4;
    s.merge.target_rank = 3;
    s.optim.max_iters = 5;
    const MethodOutcome o = run_method(run.coll, run.suite, s);
    REQUIRE(o.weights.size() == 2);
    for (std::size_t l = 0; l < 2; ++l) CHECK(o.weights[l].same_shape(run.coll.layers[l].base));
    CHECK(o.run.has_value() == s.is_optimized());
    if (o.run) CHECK(o.run->result.trace.size() >= 1);
  }
}

TEST_CASE("sweeps return points in input order regardless of threads") {
  const ToyRun& run = small_toy();
  MethodSpec s;
  s.name = "tara-a";
  s.optim.max_iters = 8;
  const auto prefs = random_completions(3, {}, 4, 2);
  const auto serial = sweep_preferences(run.coll, run.suite, prefs, s, 1);
  const auto pooled = sweep_preferences(run.coll, run.suite, prefs, s, 3);
  REQUIRE(serial.size() == 4);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(serial[i].pref.rho == prefs[i].rho);
    CHECK(pooled[i].pref.rho == prefs[i].rho);
    CHECK(to_json(serial[i].report) == to_json(pooled[i].report));
    MethodSpec one = s;
    one.pref = prefs[i];
    CHECK(to_json(evaluate(run_method(run.coll, run.suite, one).weights, run.suite)) == to_json(serial[i].report));
  }
  CHECK(sweep_csv(serial) == sweep_csv(pooled));
  CHECK_THROWS_AS(sweep_preferences(run.coll, run.suite, {}, s), std::invalid_argument);
  CHECK_THROWS_AS(sweep_preferences(run.coll, run.suite, {Preference::uniform(2)}, s), std::invalid_argument);
}

TEST_CASE("focal covariance is the sample covariance") {
  std::vector<SweepPoint> pts;
  const double a[] = {0.5, 0.7, 0.9};
  const double b[] = {0.9, 0.6, 0.6};
  for (int i = 0; i < 3; ++i) {
    SweepPoint p;
    p.report.tasks = {TaskScore{"x", a[i], 0.0}, TaskScore{"y", b[i], 0.0}};
    pts.push_back(p);
  }
  // means 0.7 and 0.7; deviations (-0.2, 0, 0.2) and (0.2, -0.1, -0.1)
  CHECK(focal_covariance(pts, "x", "y") == doctest::Approx((-0.04 + 0.0 - 0.02) / 2.0));
  CHECK(focal_covariance(pts, "x", "x") == doctest::Approx(0.08 / 2.0));
  pts.resize(1);
  CHECK_THROWS_AS(focal_covariance(pts, "x", "y"), std::invalid_argument);
}

TEST_CASE("unseen split merges the seen tasks and reports both groups") {
  const ToyRun& run = small_toy();
  MethodSpec s;
  s.name = "ta";
  const EvalReport r = unseen_split_eval(run.coll, run.suite, {0, 2}, s);
  REQUIRE(r.split.has_value());
  CHECK(r.split->seen == std::vector<std::string>{"task0", "task2"});
  CHECK(r.split->unseen == std::vector<std::string>{"task1"});
  CHECK(r.split->seen_avg == doctest::Approx((r.score("task0").normalized + r.score("task2").normalized) / 2.0));
  CHECK(*r.split->unseen_avg == doctest::Approx(r.score("task1").normalized));
  CHECK(r.split->combined_avg == doctest::Approx(r.avg_normalized));
  // adapter of task1 takes no part: same weights as merging the subset directly
  MergeConfig cfg;
  const auto w = merge(run.coll.subset({0, 2}), cfg);
  CHECK(to_json(evaluate(w, run.suite)).at("tasks") == to_json(r).at("tasks"));
  CHECK_THROWS_AS(unseen_split_eval(run.coll, run.suite, {}, s), std::invalid_argument);
}

TEST_CASE("report serialization") {
  EvalReport r;
  r.tasks = {TaskScore{"a", 0.5, 50.0}, TaskScore{"b", 1.0, 100.0}};
  r.avg_accuracy = 0.75;
  r.avg_normalized = 75.0;
  r.hits = {{1, 0.25}};
  const auto j = to_json(r);
  CHECK(j.at("joint").at("hits@1") == 0.25);
  CHECK(j.at("tasks").size() == 2);
  CHECK_FALSE(j.contains("split"));
  const std::string csv = to_csv(r);
  CHECK(csv.rfind("task,accuracy,normalized\n", 0) == 0);
  CHECK(csv.find("\nb,") != std::string::npos);
  CHECK(csv.find("\naverage,") != std::string::npos);
}
