// Copyright 2026 The lmk Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <numeric>

#include "gradcheck.hpp"
#include "lmk/linalg.hpp"
#include "lmk/mergers.hpp"
#include "lmk/model.hpp"
#include "lmk/tara.hpp"
#include "test_util.hpp"

using namespace lmk;
using namespace lmk::testing;

namespace {

Matrix update(const std::vector<Matrix>& w, const AdapterCollection& c, std::size_t l) {
  return w[l] - c.layers[l].base;
}

Matrix task_sum(const AdapterCollection& c, std::size_t l) {
  Matrix s(c.layers[l].base.rows(), c.layers[l].base.cols());
  for (const auto& ad : c.layers[l].adapters) s += delta_weight(ad);
  return s;
}

}  // namespace

TEST_CASE("variant A basis") {
  const AdapterCollection c = random_collection(2, {{20, 18}, {18, 18}}, 16, 61);
  const DirectionBasis b = build_variant_a(c);
  CHECK(b.layers[0].directions.size() == 32);
  CHECK(b.n_params() == 64);
  for (double p : b.phi) CHECK(p == 0.4);
  CHECK(kPhiInit == 0.4);

  // phi = lambda reduces to task arithmetic
  const std::vector<double> lam(b.n_params(), 0.3);
  const auto wa = assemble(b, lam);
  const auto ta = merge_ta(c, 0.3);
  for (std::size_t l = 0; l < 2; ++l) CHECK(rel_diff(wa[l], ta[l]) <= 1e-12);

  // one-hot over task 1's directions
  std::vector<double> onehot(b.n_params(), 0.0);
  for (const auto& lb : b.layers)
    for (std::size_t k = 0; k < lb.directions.size(); ++k)
      if (lb.directions[k].owner_task == 1) onehot[lb.param_of[k]] = 1.0;
  const auto w1 = assemble(b, onehot);
  for (std::size_t l = 0; l < 2; ++l)
    CHECK(rel_diff(update(w1, c, l), delta_weight(c.layers[l].adapters[1])) <= 1e-12);
}

TEST_CASE("variant B reconstructs the task sum at full rank") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const AdapterCollection c = random_collection(3, {{7, 5}, {8, 9}}, 2, 62 + seed);
    const std::size_t full = 6;  // rank of the concatenation
    const DirectionBasis b = build_variant_b(c, full);
    CHECK(b.layers[0].directions.size() == 3 * full);
    const std::vector<double> ones(b.n_params(), 1.0);
    const auto w = assemble(b, ones);
    for (std::size_t l = 0; l < 2; ++l) {
      CHECK(rel_diff(update(w, c, l), task_sum(c, l)) <= 1e-10);
      // left vectors of one task block orthonormal
      const auto& dirs = b.layers[l].directions;
      for (std::size_t k = 0; k < full; ++k)
        for (std::size_t j = 0; j < full; ++j)
          CHECK(dot(dirs[k].left, dirs[j].left) == doctest::Approx(k == j ? 1.0 : 0.0).epsilon(1e-12).scale(1.0));
    }
    const auto w0 = assemble(b, std::vector<double>(b.n_params(), 0.0));
    for (std::size_t l = 0; l < 2; ++l) CHECK(w0[l] == c.layers[l].base);
  }
}

TEST_CASE("variant B with one singular direction projects onto the top left vector") {
  const AdapterCollection c = random_collection(3, {{6, 5}}, 2, 67);
  const DirectionBasis b = build_variant_b(c, 1);
  REQUIRE(b.n_params() == 3);
  Matrix concat(6, 15);
  for (std::size_t t = 0; t < 3; ++t) {
    const Matrix dw = delta_weight(c.layers[0].adapters[t]);
    for (std::size_t r = 0; r < 6; ++r)
      for (std::size_t s = 0; s < 5; ++s) concat(r, 5 * t + s) = dw(r, s);
  }
  const SymmetricEigen e = symmetric_eigen(naive_matmul(concat, naive_transpose(concat)));
  Matrix proj(6, 6);
  for (std::size_t r = 0; r < 6; ++r)
    for (std::size_t s = 0; s < 6; ++s) proj(r, s) = e.vectors(r, 0) * e.vectors(s, 0);
  for (std::size_t t = 0; t < 3; ++t) {
    std::vector<double> phi(3, 0.0);
    phi[t] = 1.0;
    const auto w = assemble(b, phi);
    CHECK(rel_diff(update(w, c, 0), naive_matmul(proj, delta_weight(c.layers[0].adapters[t]))) <= 1e-9);
  }
  CHECK(b.layers[0].singular_values[0] == doctest::Approx(std::sqrt(e.values[0])).epsilon(1e-10));
}

TEST_CASE("variant B rank limits and default") {
  const AdapterCollection c = random_collection(2, {{4, 3}}, 2, 68);
  CHECK(default_shared_rank(c) == 4);
  CHECK_NOTHROW(build_variant_b(c, 4));
  CHECK_THROWS_AS(build_variant_b(c, 5), std::invalid_argument);
  CHECK(build_variant_b(c).R == 4);
}

TEST_CASE("assemble is linear in phi") {
  const AdapterCollection c = random_collection(3, {{6, 5}, {5, 5}}, 2, 69);
  KeyedRng rng(69, {});
  for (auto b : {build_variant_a(c), build_variant_b(c), build_adamerging(c)}) {
    std::vector<double> phi(b.n_params());
    for (double& v : phi) v = rng.normal();
    std::vector<double> twice = phi;
    for (double& v : twice) v *= 2.0;
    const auto w1 = assemble(b, phi);
    const auto w2 = assemble(b, twice);
    for (std::size_t l = 0; l < 2; ++l) {
      Matrix u = update(w1, c, l);
      u *= 2.0;
      CHECK(rel_diff(update(w2, c, l), u) <= 1e-13);
    }
    CHECK_THROWS_AS(assemble(b, std::vector<double>(b.n_params() + 1)), std::invalid_argument);
  }
}

TEST_CASE("adamerging coefficients are per task and layer") {
  const AdapterCollection c = random_collection(3, {{6, 5}, {5, 5}}, 2, 70);
  const DirectionBasis b = build_adamerging(c);
  CHECK(b.n_params() == 6);
  for (double p : b.phi) CHECK(p == 0.3);
  const auto w = assemble(b, b.phi);
  for (std::size_t l = 0; l < 2; ++l) CHECK(rel_diff(w[l], merge_ta(c, 0.3)[l]) <= 1e-12);
}

TEST_CASE("entropy loss examples") {
  CHECK(entropy_loss(Matrix(1, 4, 0.25)) == doctest::Approx(std::log(4.0)).epsilon(1e-15));
  CHECK(entropy_loss(Matrix(1, 4, 0.25)) == doctest::Approx(1.3863).epsilon(1e-4));
  CHECK(entropy_loss(Matrix(2, 3, {1, 0, 0, 0, 0, 1})) == 0.0);
  CHECK(entropy_loss(Matrix(1, 2, 0.5)) == doctest::Approx(0.6931).epsilon(1e-4));
  CHECK_THROWS_AS(entropy_loss(Matrix(1, 2, {0.7, 0.7})), std::invalid_argument);
  CHECK_THROWS_AS(entropy_loss(Matrix(1, 2, {1.5, -0.5})), std::invalid_argument);
  // the logits path agrees with the probability path
  KeyedRng rng(71, {});
  const Matrix logits = random_matrix(5, 4, rng);
  CHECK(entropy_loss_grad(logits).loss == doctest::Approx(entropy_loss(softmax_rows(logits))).epsilon(1e-14));
}

TEST_CASE("preferences") {
  CHECK(Preference::uniform(4).rho == std::vector<double>(4, 0.25));
  CHECK(Preference::one_hot(3, 2).rho == std::vector<double>{0, 0, 1});
  CHECK_NOTHROW((Preference{{0.3, 0.7 + 5e-10}}.validate()));
  CHECK_THROWS_AS((Preference{{0.3, 0.71}}.validate()), std::invalid_argument);
  CHECK_THROWS_AS((Preference{{-0.1, 1.1}}.validate()), std::invalid_argument);
}

TEST_CASE("STCH closed forms") {
  const std::vector<double> z{0.0, 0.0};
  CHECK(stch_objective(std::vector<double>{1.0, 1.0}, z, std::vector<double>{0.5, 0.5}, 1.0) ==
        doctest::Approx(0.5 + std::log(2.0)).epsilon(1e-12));
  CHECK(0.5 + std::log(2.0) == doctest::Approx(1.1931).epsilon(1e-4));
  for (double alpha : {0.1, 1.0, 3.0})
    for (std::size_t n : {2u, 3u, 5u}) {
      const double t = 0.37;
      // rho_i |f_i - z_i| / alpha = t for every i
      std::vector<double> rho(n, 1.0 / static_cast<double>(n));
      std::vector<double> f(n);
      std::vector<double> zz(n, 0.2);
      for (std::size_t i = 0; i < n; ++i) f[i] = 0.2 + (i % 2 ? 1.0 : -1.0) * alpha * t * static_cast<double>(n);
      CHECK(stch_objective(f, zz, rho, alpha) ==
            doctest::Approx(alpha * t + alpha * std::log(static_cast<double>(n))).epsilon(1e-12));
    }
  const std::vector<double> f{0.9, 0.3, 1.4};
  const std::vector<double> zz{0.1, 0.5, 0.2};
  const std::vector<double> rho{0.2, 0.5, 0.3};
  double mx = 0.0;
  for (std::size_t i = 0; i < 3; ++i) mx = std::max(mx, rho[i] * std::abs(f[i] - zz[i]));
  CHECK(std::abs(stch_objective(f, zz, rho, 1e-4) - mx) <= 1e-3);

  // one-hot rho
  const double r0 = std::abs(f[0] - zz[0]);
  const double v = stch_objective(f, zz, std::vector<double>{1, 0, 0}, 0.7);
  CHECK(v == doctest::Approx(0.7 * std::log(std::exp(r0 / 0.7) + 2.0)).epsilon(1e-12));
  CHECK(v >= r0);
  CHECK_THROWS_AS(stch_objective(f, zz, rho, 0.0), std::invalid_argument);
}

TEST_CASE("STCH monotonicity and permutation invariance") {
  KeyedRng rng(72, {});
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> f(4);
    std::vector<double> z(4);
    Preference p{{}};
    double tot = 0.0;
    for (std::size_t i = 0; i < 4; ++i) {
      f[i] = rng.normal();
      z[i] = rng.normal();
      p.rho.push_back(rng.uniform());
      tot += p.rho.back();
    }
    for (double& r : p.rho) r /= tot;
    const double alpha = 0.1 + rng.uniform();
    const double base = stch_objective(f, z, p.rho, alpha);
    auto g = f;
    const std::size_t i = rng.below(4);
    g[i] += (f[i] >= z[i] ? 1.0 : -1.0) * 0.1;  // larger residual
    CHECK(stch_objective(g, z, p.rho, alpha) >= base);
    std::vector<std::size_t> perm{2, 0, 3, 1};
    std::vector<double> pf, pz, pr;
    for (std::size_t k : perm) {
      pf.push_back(f[k]);
      pz.push_back(z[k]);
      pr.push_back(p.rho[k]);
    }
    CHECK(stch_objective(pf, pz, pr, alpha) == doctest::Approx(base).epsilon(1e-14));
  }
}

TEST_CASE("STCH gradient matches finite differences and is zero at the kink") {
  const std::vector<double> f{0.9, 0.3, 1.4};
  const std::vector<double> z{0.1, 0.5, 1.4};
  const std::vector<double> rho{0.2, 0.5, 0.3};
  const auto g = stch_gradient(f, z, rho, 0.6);
  CHECK(g[2] == 0.0);
  for (std::size_t i = 0; i < 2; ++i) {
    auto up = f;
    auto dn = f;
    up[i] += 1e-6;
    dn[i] -= 1e-6;
    const double fd = (stch_objective(up, z, rho, 0.6) - stch_objective(dn, z, rho, 0.6)) / 2e-6;
    CHECK(g[i] == doctest::Approx(fd).epsilon(1e-7));
  }
}

TEST_CASE("gradient matches the hand-derived chain rule on one direction") {
  // one layer, one sample, two classes
  TaskSuite suite;
  suite.layer_ids = {"l0"};
  suite.base = {Matrix(2, 3, {0.2, -0.1, 0.4, 0.3, 0.5, -0.2})};
  Task task;
  task.id = "t";
  task.label_ids = {0, 1};
  task.head = Matrix(2, 2, {1.0, -0.5, 0.3, 0.8});
  task.adapt.x = Matrix(1, 3, {0.7, -1.2, 0.4});
  task.adapt.y = {0};
  suite.tasks = {task};

  AdapterCollection coll;
  coll.task_ids = {"t"};
  coll.layers = {LayerAdapters{"l0", suite.base[0],
                               {LoraAdapter{"t", "l0", Matrix(2, 1, {0.6, -0.9}), Matrix(3, 1, {0.5, 0.1, -0.3}),
                                            2.0, 0.0}}}};
  const DirectionBasis b = build_variant_a(coll);
  const double phi = 0.8;
  const Rank1Direction& dir = b.layers[0].directions[0];

  // logits = a + phi * bvec
  const Matrix& w0 = suite.base[0];
  const auto x = task.adapt.x.row(0);
  std::vector<double> w0x(2, 0.0);
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t s = 0; s < 3; ++s) w0x[r] += w0(r, s) * x[s];
  const double rx = dir.right[0] * x[0] + dir.right[1] * x[1] + dir.right[2] * x[2];
  std::vector<double> a(2), bv(2);
  for (std::size_t c = 0; c < 2; ++c) {
    a[c] = task.head(c, 0) * w0x[0] + task.head(c, 1) * w0x[1];
    bv[c] = dir.sigma * rx * (task.head(c, 0) * dir.left[0] + task.head(c, 1) * dir.left[1]);
  }
  const double l0 = a[0] + phi * bv[0];
  const double l1 = a[1] + phi * bv[1];
  const double p0 = 1.0 / (1.0 + std::exp(l1 - l0));
  const double p1 = 1.0 - p0;
  const double h = -(p0 * std::log(p0) + p1 * std::log(p1));
  // dH/dl_c = -p_c (log p_c + H)
  const double expect = -p0 * (std::log(p0) + h) * bv[0] - p1 * (std::log(p1) + h) * bv[1];

  const ObjectiveConfig obj{Scalarization::weighted_sum, 1.0, {}};
  const auto v = evaluate_objective(b, std::vector<double>{phi}, suite, Preference{{1.0}}, obj, TaskBatches{{}});
  CHECK(v.psi == doctest::Approx(h).epsilon(1e-13));
  CHECK(v.grad[0] == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("gradient is zero when every prediction is one-hot") {
  const TaskSuite base = generate_suite(gradcheck_suite(3));
  TaskSuite suite = base;
  for (auto& t : suite.tasks) t.head *= 1e6;
  const AdapterCollection coll = collection_for_suite(suite, 2, 3);
  const DirectionBasis b = build_variant_a(coll);
  const ObjectiveConfig obj{Scalarization::weighted_sum, 1.0, {}};
  const auto v = evaluate_objective(b, b.phi, suite, Preference::uniform(3), obj, TaskBatches(3));
  for (double fi : v.f) CHECK(fi == doctest::Approx(0.0).scale(1e-300));
  for (double g : v.grad) CHECK(std::abs(g) <= 1e-300);
}

TEST_CASE("gradient matches central finite differences") {
  for (auto kind : {BasisKind::variant_a, BasisKind::variant_b, BasisKind::adamerging})
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      const GradcheckResult r = gradcheck_config(kind, 1000 + seed);
      CHECK(r.n_params > 0);
      CHECK(r.max_rel_error <= 1e-4);
    }
}

TEST_CASE("anchors") {
  TaskSuite suite = generate_suite(gradcheck_suite(4));
  AdapterCollection zero = collection_for_suite(suite, 2, 4, 0.0);
  for (auto& t : suite.tasks) t.head = Matrix(t.head.rows(), t.head.cols());
  for (double z : compute_anchors(zero, suite)) CHECK(z == doctest::Approx(std::log(3.0)).epsilon(1e-14));

  for (auto& t : suite.tasks) t.head = Matrix(t.head.rows(), t.head.cols(), 0.0);
  for (std::size_t c = 0; c < 3; ++c) suite.tasks[1].head(c, 0) = 1e6 * static_cast<double>(c);
  // class 0 or 2 wins by a huge margin unless the first feature is exactly zero
  const auto z = compute_anchors(collection_for_suite(suite, 2, 5), suite);
  CHECK(z[1] == doctest::Approx(0.0).scale(1e-12));
}

TEST_CASE("AdamW first step and zero gradients") {
  AdamWParams p;
  p.lr = 0.01;
  AdamW opt(3, p);
  std::vector<double> x{1.0, -2.0, 0.5};
  const std::vector<double> g{0.3, -4.0, 0.0};
  opt.step(x, g);
  for (std::size_t i = 0; i < 3; ++i) {
    const double expect = std::vector<double>{1.0, -2.0, 0.5}[i] - p.lr * g[i] / (std::abs(g[i]) + p.eps);
    CHECK(x[i] == doctest::Approx(expect).epsilon(1e-15));
  }
  CHECK(opt.first_moment()[1] == doctest::Approx(-0.4));
  CHECK(opt.second_moment()[1] == doctest::Approx(0.016));

  AdamWParams wd;
  wd.weight_decay = 0.1;
  AdamW dec(1, wd);
  std::vector<double> y{2.0};
  dec.step(y, std::vector<double>{0.0});
  CHECK(y[0] == doctest::Approx(2.0 - wd.lr * 0.1 * 2.0).epsilon(1e-15));
  CHECK_THROWS_AS(dec.step(y, std::vector<double>{0.0, 1.0}), std::invalid_argument);
}

TEST_CASE("optimizer leaves phi alone under zero gradients") {
  const TaskSuite suite = generate_suite(gradcheck_suite(6));
  const AdapterCollection zero = collection_for_suite(suite, 2, 6, 0.0);
  const DirectionBasis b = build_variant_a(zero);
  OptimConfig cfg;
  cfg.max_iters = 25;
  const ObjectiveConfig obj{Scalarization::stch, 1.0, compute_anchors(zero, suite)};
  const OptimResult r = optimize(b, suite, Preference::uniform(3), obj, cfg);
  CHECK(r.phi == b.phi);
  CHECK(r.trace.size() == 25);
}

TEST_CASE("optimization is deterministic and batches are keyed") {
  const TaskSuite suite = generate_suite(gradcheck_suite(7));
  const AdapterCollection coll = collection_for_suite(suite, 2, 7);
  OptimConfig cfg;
  cfg.max_iters = 30;
  cfg.seed = 3;
  const auto a = run_tara(coll, suite, BasisKind::variant_b, Preference::uniform(3), 1.0, cfg);
  const auto b = run_tara(coll, suite, BasisKind::variant_b, Preference::uniform(3), 1.0, cfg);
  CHECK(a.result.phi == b.result.phi);
  CHECK(a.weights == b.weights);
  CHECK(sample_batches(suite, coll.task_ids, 16, 3, 5) == sample_batches(suite, coll.task_ids, 16, 3, 5));
  CHECK(sample_batches(suite, coll.task_ids, 16, 3, 5) != sample_batches(suite, coll.task_ids, 16, 3, 6));
  for (const auto& batch : sample_batches(suite, coll.task_ids, 16, 3, 5))
    for (std::size_t i : batch) CHECK(i < suite.tasks[0].adapt.size());
}

TEST_CASE("divergence guard") {
  const TaskSuite suite = generate_suite(gradcheck_suite(8));
  const AdapterCollection coll = collection_for_suite(suite, 2, 8, 1.0);
  OptimConfig cfg;
  cfg.max_iters = 50;
  cfg.adam.lr = 50.0;
  cfg.divergence_factor = 1.0001;
  const ObjectiveConfig obj{Scalarization::stch, 1.0, compute_anchors(coll, suite)};
  CHECK_THROWS_AS(optimize(build_variant_a(coll), suite, Preference::uniform(3), obj, cfg), DivergenceError);
}

TEST_CASE("adamerging lowers the average entropy") {
  const TaskSuite suite = generate_suite(gradcheck_suite(9));
  const AdapterCollection coll = collection_for_suite(suite, 2, 9).subset({0, 1});
  OptimConfig cfg;
  cfg.max_iters = 200;
  cfg.adam.lr = 1e-2;
  const MergeRun run = adamerging_baseline(coll, suite, cfg);
  const ObjectiveConfig obj{Scalarization::weighted_sum, 1.0, {}};
  const Preference u = Preference::uniform(2);
  const double before = evaluate_objective(run.basis, run.basis.phi, suite, u, obj, TaskBatches(2), false).psi;
  const double after = evaluate_objective(run.basis, run.result.phi, suite, u, obj, TaskBatches(2), false).psi;
  CHECK(after <= before);

  const AdapterCollection zero = collection_for_suite(suite, 2, 9, 0.0);
  const MergeRun z = adamerging_baseline(zero, suite, cfg);
  for (std::size_t l = 0; l < zero.n_layers(); ++l) CHECK(z.weights[l] == zero.layers[l].base);
}
