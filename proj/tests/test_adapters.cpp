// Copyright 2026 The lmk Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <cstring>

#include "lmk/adapters.hpp"
#include "lmk/linalg.hpp"
#include "test_util.hpp"

using namespace lmk;
using namespace lmk::testing;

TEST_CASE("delta of a rank-1 adapter") {
  LoraAdapter ad{"t", "l", Matrix(2, 1, {1, 0}), Matrix(2, 1, {0, 2}), 1.0, 0.0};
  CHECK(delta_weight(ad) == Matrix(2, 2, {0, 2, 0, 0}));
  ad.b = Matrix(2, 1);
  CHECK(delta_weight(ad) == Matrix(2, 2));
}

TEST_CASE("delta matches the oracle product with the alpha over rank scale") {
  KeyedRng rng(11, {});
  for (int trial = 0; trial < 10; ++trial) {
    const LoraAdapter ad = random_adapter(6, 5, 3, rng, "t", "l", 8.0);
    Matrix expect = naive_matmul(ad.b, naive_transpose(ad.a));
    expect *= 8.0 / 3.0;
    CHECK(rel_diff(delta_weight(ad), expect) <= 1e-12);
  }
}

TEST_CASE("rank-1 directions reconstruct the delta") {
  KeyedRng rng(12, {});
  const LoraAdapter ad = random_adapter(7, 6, 4, rng);
  const auto dirs = rank1_directions(ad, 2);
  REQUIRE(dirs.size() == 4);
  Matrix sum(7, 6);
  for (std::size_t j = 0; j < dirs.size(); ++j) {
    CHECK(dirs[j].owner_task == 2);
    CHECK(dirs[j].owner_index == j);
    CHECK(dirs[j].sigma == 1.0);
    CHECK(singular_values(dirs[j].outer())[1] <= 1e-12 * singular_values(dirs[j].outer())[0]);
    sum.axpy(ad.scale(), dirs[j].outer());
  }
  CHECK(rel_diff(sum, delta_weight(ad)) <= 1e-12);

  LoraAdapter one = random_adapter(3, 3, 1, rng, "t", "l", 1.0);
  CHECK(rel_diff(rank1_directions(one)[0].outer(), delta_weight(one)) <= 1e-15);

  LoraAdapter zeroed = ad;
  for (std::size_t i = 0; i < zeroed.b.rows(); ++i) zeroed.b(i, 1) = 0.0;
  CHECK(rank1_directions(zeroed)[1].outer() == Matrix(7, 6));
}

TEST_CASE("adapter validation") {
  KeyedRng rng(13, {});
  LoraAdapter ad = random_adapter(4, 3, 2, rng);
  CHECK_NOTHROW(ad.validate());
  ad.a = Matrix(3, 1);
  CHECK_THROWS_AS(ad.validate(), std::invalid_argument);
  ad = random_adapter(4, 3, 4, rng);  // rank above min(d, m)
  CHECK_THROWS_AS(ad.validate(), std::invalid_argument);
  ad = random_adapter(4, 3, 2, rng);
  ad.lora_alpha = 0.0;
  CHECK_THROWS_AS(ad.validate(), std::invalid_argument);
}

TEST_CASE("collection validation and subsets") {
  AdapterCollection c = random_collection(3, {{4, 5}, {3, 4}}, 2, 14);
  CHECK_NOTHROW(c.validate());
  CHECK(c.layer_index("layer1") == 1);
  CHECK_THROWS_AS(c.layer_index("nope"), std::out_of_range);

  const AdapterCollection s = c.subset({2, 0});
  CHECK(s.task_ids == std::vector<std::string>{"task2", "task0"});
  CHECK(s.layers[1].adapters[0].b == c.layers[1].adapters[2].b);
  CHECK(s.layers[0].base == c.layers[0].base);
  CHECK_THROWS_AS(c.subset({3}), std::out_of_range);

  AdapterCollection swapped = c;
  std::swap(swapped.layers[1].adapters[0], swapped.layers[1].adapters[1]);
  CHECK_THROWS_AS(swapped.validate(), std::invalid_argument);

  AdapterCollection bad_shape = c;
  bad_shape.layers[0].adapters[1].b = Matrix(3, 2);
  CHECK_THROWS_AS(bad_shape.validate(), std::invalid_argument);

  AdapterCollection dup = c;
  dup.task_ids[1] = "task0";
  CHECK_THROWS_AS(dup.validate(), std::invalid_argument);
}

TEST_CASE("heterogeneous ranks are allowed") {
  AdapterCollection c = random_collection(2, {{5, 5}}, 2, 15);
  KeyedRng rng(15, {1});
  c.layers[0].adapters[1] = random_adapter(5, 5, 4, rng, "task1", "layer0");
  CHECK_NOTHROW(c.validate());
}

TEST_CASE("binary32 rounding is idempotent") {
  Matrix m(1, 3, {0.1, 1.0 / 3.0, 1e-50});
  round_to_f32(m);
  CHECK(m(0, 0) == static_cast<double>(0.1f));
  CHECK(m(0, 1) == static_cast<double>(static_cast<float>(1.0 / 3.0)));
  CHECK(m(0, 2) == 0.0);
  const Matrix once = m;
  round_to_f32(m);
  CHECK(m == once);
}
