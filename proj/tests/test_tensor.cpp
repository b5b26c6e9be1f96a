#include <cmath>

#include "cil/error.hpp"
#include "cil/ops.hpp"
#include "doctest.h"
#include "suites.hpp"

using namespace cil;
using cil::testing::gradcheck;
using cil::testing::random_tensor;

using cil::testing::project;

TEST_CASE("tensor shape invariants") {
  Tensor t(Shape{2, 3});
  CHECK(t.size() == 6);
  CHECK_FALSE(t.has_grad());
  CHECK_THROWS_AS(Tensor(Shape{2, 2}, std::vector<double>{1, 2, 3}), DimensionError);
  t.ensure_grad();
  CHECK(t.grad().size() == t.size());
}

TEST_CASE("matmul values and errors") {
  Tape tape;
  auto id = tape.constant(Tensor({2, 2}, {1, 0, 0, 1}));
  auto b = tape.constant(Tensor({2, 3}, {1, 2, 3, 4, 5, 6}));
  auto c = matmul(id, b);
  CHECK(c.value().storage() == b.value().storage());

  auto r = matmul(tape.constant(Tensor({1, 2}, {1, 2})), tape.constant(Tensor({2, 1}, {3, 4})));
  CHECK(r.value()[0] == 11.0);

  try {
    matmul(b, b);
    FAIL("expected a dimension error");
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2,3]") != std::string::npos);
  }
}

TEST_CASE("matmul gradient of sum(A x B) matches finite differences") {
  SplitMix64 rng(1);
  auto fn = [](Tape&, std::vector<Var>& v) { return sum(matmul(v[0], v[1])); };
  CHECK(gradcheck(fn, {random_tensor({3, 4}, rng), random_tensor({4, 5}, rng)}) < 1e-6);
}

TEST_CASE("softmax examples") {
  Tape tape;
  auto u = softmax(tape.constant(Tensor({3}, {0, 0, 0})));
  for (double p : u.value().data()) CHECK(p == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  auto big = softmax(tape.constant(Tensor({2}, {1000, 0})));
  CHECK(std::abs(big.value()[0] - 1.0) < 1e-12);
  CHECK(std::abs(big.value()[1]) < 1e-12);
  auto two = softmax(tape.constant(Tensor({2}, {1, 2})));
  CHECK(std::abs(two.value()[0] - 0.26894) < 1e-5);
  CHECK(std::abs(two.value()[1] - 0.73106) < 1e-5);
}

TEST_CASE("softmax rows are normalized for large inputs") {
  SplitMix64 rng(5);
  Tape tape;
  for (int trial = 0; trial < 50; ++trial) {
    auto x = tape.constant(random_tensor({4, 7}, rng, -1e4, 1e4));
    auto y = softmax(x, 1);
    for (std::size_t r = 0; r < 4; ++r) {
      double s = 0.0;
      for (std::size_t k = 0; k < 7; ++k) {
        CHECK(y.value()[r * 7 + k] >= 0.0);
        s += y.value()[r * 7 + k];
      }
      CHECK(std::abs(s - 1.0) < 1e-9);
    }
  }
}

TEST_CASE("layer_norm examples") {
  Tape tape;
  auto gain = tape.constant(Tensor({4}, 1.0));
  auto bias = tape.constant(Tensor({4}, 0.0));
  auto c = layer_norm(tape.constant(Tensor({1, 4}, 2.5)), gain, bias);
  for (double v : c.value().data()) CHECK(v == 0.0);

  SplitMix64 rng(2);
  auto y = layer_norm(tape.constant(random_tensor({3, 4}, rng)), gain, bias, 0.0);
  for (std::size_t r = 0; r < 3; ++r) {
    double mu = 0.0, var = 0.0;
    for (std::size_t j = 0; j < 4; ++j) mu += y.value()[r * 4 + j] / 4.0;
    for (std::size_t j = 0; j < 4; ++j) var += std::pow(y.value()[r * 4 + j] - mu, 2) / 4.0;
    CHECK(std::abs(mu) < 1e-9);
    CHECK(std::abs(var - 1.0) < 1e-6);
  }
}

TEST_CASE("conv2d examples") {
  Tape tape;
  SplitMix64 rng(3);
  auto x = tape.constant(random_tensor({1, 2, 3, 3}, rng));
  // 1x1 kernel of ones sums the channels.
  auto ones = tape.constant(Tensor({1, 2, 1, 1}, 1.0));
  auto s = conv2d(x, ones, 1, 0);
  REQUIRE(s.shape() == Shape{1, 1, 3, 3});
  for (std::size_t i = 0; i < 9; ++i)
    CHECK(s.value()[i] == doctest::Approx(x.value()[i] + x.value()[9 + i]));

  auto k = tape.constant(random_tensor({1, 2, 3, 3}, rng));
  auto d = conv2d(x, k, 1, 0);
  REQUIRE(d.shape() == Shape{1, 1, 1, 1});
  double dot = 0.0;
  for (std::size_t i = 0; i < 18; ++i) dot += x.value()[i] * k.value()[i];
  CHECK(d.value()[0] == doctest::Approx(dot).epsilon(1e-14));

  auto strided = conv2d(tape.constant(Tensor({1, 1, 16, 16})), tape.constant(Tensor({4, 1, 3, 3})), 2, 1);
  CHECK(strided.shape() == Shape{1, 4, 8, 8});
  CHECK_THROWS_AS(conv2d(x, tape.constant(Tensor({1, 2, 5, 5})), 1, 0), DimensionError);
}

TEST_CASE("conv2d kernel and input gradients match finite differences") {
  SplitMix64 rng(4);
  auto fn = [](Tape&, std::vector<Var>& v) { return project(conv2d(v[0], v[1], 2, 1)); };
  CHECK(gradcheck(fn, {random_tensor({2, 2, 5, 5}, rng), random_tensor({3, 2, 3, 3}, rng)}) < 1e-5);
}

TEST_CASE("backward examples and contracts") {
  Tensor x({5}, {1, -2, 3, 0.5, 4});
  {
    Tape tape;
    tape.backward(sum(tape.watch(x)));
    for (double g : x.grad()) CHECK(g == 1.0);
  }
  x.clear_grad();
  {
    Tape tape;
    auto v = tape.watch(x);
    auto loss = mul_scalar(sum(mul(v, v)), 0.5);
    tape.backward(loss);
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(x.grad()[i] == x[i]);
    CHECK_THROWS_AS(tape.backward(loss), ContractError);
    // Second attempt must not have doubled anything.
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(x.grad()[i] == x[i]);
  }
  {
    Tape tape;
    auto v = tape.watch(x);
    CHECK_THROWS_AS(tape.backward(v), ContractError);
  }
}

TEST_CASE("constants never receive gradient writes") {
  Tensor p({3}, {1, 2, 3});
  Tensor c({3}, {4, 5, 6});
  Tape tape;
  auto loss = sum(mul(tape.watch(p), tape.constant(c)));
  tape.backward(loss);
  CHECK(p.has_grad());
  CHECK_FALSE(c.has_grad());
}

TEST_CASE("every differentiable op passes the finite-difference check") {
  SplitMix64 rng(11);
  for (auto& c : cil::testing::op_gradient_cases()) {
    std::vector<Tensor> inputs;
    for (auto& sh : c.shapes) inputs.push_back(random_tensor(sh, rng));
    INFO(c.name);
    CHECK(gradcheck(c.fn, inputs) < 1e-4);
  }
}

TEST_CASE("batch_norm gradients in both modes") {
  SplitMix64 rng(12);
  Tensor rm({3}, 0.1), rv({3}, 1.5);
  auto train = [&](Tape&, std::vector<Var>& v) {
    return project(batch_norm(v[0], v[1], v[2], rm, rv, BatchNormMode::train));
  };
  auto eval = [&](Tape&, std::vector<Var>& v) {
    return project(batch_norm(v[0], v[1], v[2], rm, rv, BatchNormMode::eval));
  };
  std::vector<Tensor> in{random_tensor({4, 3, 2, 2}, rng), random_tensor({3}, rng), random_tensor({3}, rng)};
  CHECK(gradcheck(train, in) < 1e-4);
  CHECK(gradcheck(eval, in) < 1e-4);
  CHECK(rm[0] == 0.1);

  Tape tape;
  auto x = tape.constant(Tensor({2, 3, 1, 1}, {1, 2, 3, 3, 4, 5}));
  BatchStats stats;
  batch_norm(x, tape.constant(Tensor({3}, 1.0)), tape.constant(Tensor({3}, 0.0)), rm, rv,
             BatchNormMode::train, &stats);
  CHECK(stats.mean[0] == doctest::Approx(2.0));
  CHECK(stats.var[0] == doctest::Approx(2.0));  // unbiased: ((1-2)^2 + (3-2)^2) / 1
  update_running_stats(rm, rv, stats);
  CHECK(rm[0] == doctest::Approx(0.9 * 0.1 + 0.1 * 2.0));
  CHECK(rv[0] == doctest::Approx(0.9 * 1.5 + 0.1 * 2.0));
}

TEST_CASE("l2_normalize guards zero rows") {
  Tape tape;
  auto y = l2_normalize(tape.constant(Tensor({2, 3}, {0, 0, 0, 3, 0, 4})));
  CHECK(tape.diagnostics().guarded_normalizations == 1);
  for (std::size_t i = 0; i < 3; ++i) CHECK(y.value()[i] == 0.0);
  CHECK(y.value()[3] == doctest::Approx(0.6));
}
