#include <algorithm>
#include <cmath>
#include <limits>

#include "cil/error.hpp"
#include "cil/memory.hpp"
#include "doctest.h"
#include "suites.hpp"

using namespace cil;
using cil::testing::brute_force_herding;
using cil::testing::normalized_features;

namespace {

std::vector<Pixels> images(std::uint8_t tag, std::size_t n) {
  std::vector<Pixels> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(Pixels{tag, static_cast<std::uint8_t>(i)});
  return out;
}

}  // namespace

TEST_CASE("herding worked example") {
  Tensor f({3, 2}, {1.0, 0.0, 0.0, 1.0, 0.6, 0.8});
  CHECK(herding_select(f, 3) == std::vector<std::size_t>{2, 0, 1});
  CHECK(herding_select(f, 10) == std::vector<std::size_t>{2, 0, 1});
  CHECK(herding_select(Tensor({1, 2}, {0.0, 1.0}), 4) == std::vector<std::size_t>{0});
  CHECK_THROWS_AS(herding_select(Tensor({0, 2}), 1), ContractError);
  CHECK_THROWS_AS(herding_select(f, 0), ContractError);
}

TEST_CASE("herding matches the exhaustive greedy oracle") {
  SplitMix64 rng(1234);
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t n = 2 + rng.below(7);
    Tensor f = normalized_features(n, 5, rng);
    CHECK(herding_select(f, 3) == brute_force_herding(f, 3));
  }
}

TEST_CASE("herding determinism and prefix stability") {
  SplitMix64 rng(99);
  Tensor f = normalized_features(30, 8, rng);
  const auto full = herding_select(f, 30);
  for (std::size_t k = 1; k < 30; ++k) {
    const auto part = herding_select(f, k);
    CHECK(std::equal(part.begin(), part.end(), full.begin()));
  }
  // Duplicated rows tie; the lower index wins.
  Tensor dup({3, 2}, {0.0, 1.0, 0.0, 1.0, 1.0, 0.0});
  CHECK(herding_select(dup, 1) == std::vector<std::size_t>{0});
}

TEST_CASE("per-class budgets") {
  CHECK(per_class_budget(BudgetPolicy::total(2000), 20) == 100);
  CHECK(per_class_budget(BudgetPolicy::total(2000), 30) == 66);
  for (std::size_t n : {1, 7, 50}) CHECK(per_class_budget(BudgetPolicy::per_class(20), n) == 20);
  CHECK_THROWS_AS(per_class_budget(BudgetPolicy::total(2000), 0), ContractError);
}

TEST_CASE("add_and_trim under the total policy") {
  ExemplarStore store(BudgetPolicy::total(2000));
  std::map<std::uint16_t, std::vector<Pixels>> first;
  for (std::uint16_t c = 0; c < 10; ++c) first[c] = images(static_cast<std::uint8_t>(c), 200);
  store.add_and_trim(first, 10);
  CHECK(store.total() == 2000);
  const auto before = store.exemplars(3);

  std::map<std::uint16_t, std::vector<Pixels>> second;
  for (std::uint16_t c = 10; c < 20; ++c) second[c] = images(static_cast<std::uint8_t>(c), 100);
  store.add_and_trim(second, 20);
  for (std::uint16_t c = 0; c < 20; ++c) CHECK(store.count(c) == 100);
  CHECK(store.total() <= 2000);
  CHECK(store.balanced());
  const auto& after = store.exemplars(3);
  CHECK(std::equal(after.begin(), after.end(), before.begin()));

  std::map<std::uint16_t, std::vector<Pixels>> third;
  for (std::uint16_t c = 20; c < 30; ++c) third[c] = images(static_cast<std::uint8_t>(c), 66);
  store.add_and_trim(third, 30);
  CHECK(store.total() == 30 * 66);
  CHECK(store.total() <= 2000);

  std::map<std::uint16_t, std::vector<Pixels>> dup{{4, images(4, 1)}};
  CHECK_THROWS_AS(store.add_and_trim(dup, 31), ContractError);
  CHECK(store.count(4) == 66);
}

TEST_CASE("add_and_trim under the per-class policy") {
  ExemplarStore store(BudgetPolicy::per_class(20));
  store.add_and_trim({{0, images(0, 20)}, {1, images(1, 12)}}, 2);
  CHECK(store.count(0) == 20);
  CHECK(store.count(1) == 12);
  CHECK_FALSE(store.balanced());
  store.add_and_trim({{2, images(2, 30)}}, 3);
  CHECK(store.count(0) == 20);
  CHECK(store.count(1) == 12);
  CHECK(store.count(2) == 20);
}
