#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "adeptlab/autograd.hpp"
#include "adeptlab/gradcheck.hpp"
#include "adeptlab/numerics.hpp"
#include "test_helpers.hpp"

using namespace adeptlab;
using namespace testutil;

TEST_CASE("exact sum is order independent and exact") {
  // the classic cancellation case a plain left-to-right sum gets wrong
  CHECK(exact_sum(std::vector<double>{1e16, 1.0, -1e16}) == 1.0);
  Rng rng(7);
  std::vector<double> xs(200);
  for (double& x : xs) x = rng.uniform_real(-1e8, 1e8);
  const double forward = exact_sum(xs);
  std::vector<double> rev(xs.rbegin(), xs.rend());
  CHECK(exact_sum(rev) == forward);
  // a few deterministic shuffles
  for (int round = 0; round < 5; ++round) {
    for (std::size_t i = xs.size(); i > 1; --i)
      std::swap(xs[i - 1], xs[rng.uniform_index(i)]);
    CHECK(exact_sum(xs) == forward);
  }
}

TEST_CASE("matmul against identity and zero") {
  Graph g;
  auto a = matrix(2, 3, {1, 2, 3, 4, 5, 6});
  auto eye = matrix(3, 3, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  auto zero = matrix(3, 2, {0, 0, 0, 0, 0, 0});
  CHECK(g.matmul(a, eye)->values() == a->values());
  for (double v : g.matmul(a, zero)->values()) CHECK(v == 0.0);
}

TEST_CASE("matmul shape mismatch names both shapes") {
  Graph g;
  auto a = matrix(2, 3, {1, 2, 3, 4, 5, 6});
  auto b = matrix(2, 2, {1, 2, 3, 4});
  try {
    g.matmul(a, b);
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("2x3") != std::string::npos);
    CHECK(msg.find("2x2") != std::string::npos);
  }
}

TEST_CASE("matmul gradients match central differences") {
  Rng rng(11);
  auto a = random_matrix(rng, 3, 4, -1, 1, true);
  auto b = random_matrix(rng, 4, 2, -1, 1, true);
  const double err = grad_check(
      [&](Graph& g) { return g.sum(g.matmul(a, b)); }, {a, b}, 1e-5);
  CHECK(err < 1e-6);
}

TEST_CASE("row_softmax fixed rows") {
  Graph g;
  auto flat = g.row_softmax(matrix(1, 2, {0, 0}));
  CHECK(flat->values()[0] == 0.5);
  CHECK(flat->values()[1] == 0.5);

  auto big = g.row_softmax(matrix(1, 3, {1000, 1000, 1000}));
  for (double v : big->values()) CHECK(v == doctest::Approx(1.0 / 3).epsilon(1e-15));

  // frozen from an independent high-precision evaluation of softmax([1,2,3])
  auto probe = g.row_softmax(matrix(1, 3, {1, 2, 3}));
  CHECK(probe->values()[0] == doctest::Approx(0.09003057317038046).epsilon(1e-14));
  CHECK(probe->values()[1] == doctest::Approx(0.24472847105479764).epsilon(1e-14));
  CHECK(probe->values()[2] == doctest::Approx(0.6652409557748219).epsilon(1e-14));
}

TEST_CASE("row_softmax rows sum to one") {
  Rng rng(23);
  for (int round = 0; round < 50; ++round) {
    Graph g;
    auto x = random_matrix(rng, 1 + rng.uniform_index(6), 1 + rng.uniform_index(9),
                           -30.0, 30.0);
    auto y = g.row_softmax(x);
    for (std::size_t i = 0; i < y->rows(); ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < y->cols(); ++j) s += y->at(i, j);
      CHECK(std::fabs(s - 1.0) <= 1e-12);
    }
  }
}

TEST_CASE("relu values and dead subgradient at zero") {
  Graph g;
  auto x = matrix(1, 3, {-1, 0, 2}, true);
  auto y = g.relu(x);
  CHECK(y->values() == std::vector<double>{0, 0, 2});
  g.backward(g.sum(y));
  CHECK(x->grad() == std::vector<double>{0, 0, 1});
}

TEST_CASE("add broadcasts a bias row and rejects mismatches") {
  Graph g;
  auto a = matrix(2, 3, {1, 2, 3, 4, 5, 6}, true);
  auto b = vec({10, 20, 30}, true);
  auto y = g.add(a, b);
  CHECK(y->values() == std::vector<double>{11, 22, 33, 14, 25, 36});
  g.backward(g.sum(y));
  CHECK(a->grad() == std::vector<double>(6, 1.0));
  CHECK(b->grad() == std::vector<double>{2, 2, 2});  // one per row
  CHECK_THROWS_AS(g.add(a, vec({1, 2})), DimensionError);
}

TEST_CASE("concat_rows stacks matrices") {
  Rng rng(3);
  Graph g;
  auto a = random_matrix(rng, 2, 3, -1, 1, true);
  auto b = random_matrix(rng, 5, 3, -1, 1, true);
  auto y = g.concat_rows(a, b);
  CHECK(y->rows() == 7);
  CHECK(y->cols() == 3);
  for (std::size_t j = 0; j < 3; ++j) {
    CHECK(y->at(0, j) == a->at(0, j));
    CHECK(y->at(2, j) == b->at(0, j));
    CHECK(y->at(6, j) == b->at(4, j));
  }
  CHECK_THROWS_AS(g.concat_rows(a, matrix(1, 2, {1, 2})), DimensionError);
}

TEST_CASE("row_select routes gradient to selected rows only") {
  Graph g;
  auto x = matrix(4, 2, {1, 2, 3, 4, 5, 6, 7, 8}, true);
  auto y = g.row_select(x, {2, 0, 2});
  CHECK(y->values() == std::vector<double>{5, 6, 1, 2, 5, 6});
  g.backward(g.sum(y));
  // row 2 selected twice, row 0 once, rows 1 and 3 untouched
  CHECK(x->grad() == std::vector<double>{1, 1, 0, 0, 2, 2, 0, 0});
  CHECK_THROWS_AS(g.row_select(x, {4}), IndexError);
  CHECK_THROWS_AS(g.row_select(x, {}), LengthError);
}

TEST_CASE("cross_entropy on uniform logits is log of class count") {
  Graph g;
  auto logits = matrix(1, 4, {0, 0, 0, 0}, true);
  auto loss = g.cross_entropy(logits, {1});
  CHECK(loss->scalar() == doctest::Approx(1.3862943611198906).epsilon(1e-15));
  g.backward(loss);
  // softmax minus one-hot
  CHECK(logits->grad()[0] == doctest::Approx(0.25).epsilon(1e-14));
  CHECK(logits->grad()[1] == doctest::Approx(-0.75).epsilon(1e-14));
  CHECK(logits->grad()[2] == doctest::Approx(0.25).epsilon(1e-14));
  CHECK(logits->grad()[3] == doctest::Approx(0.25).epsilon(1e-14));
  CHECK_THROWS_AS(g.cross_entropy(logits, {4}), IndexError);
}

TEST_CASE("backward requires a scalar and seeds ones through sum") {
  Graph g;
  auto x = matrix(2, 2, {1, 2, 3, 4}, true);
  CHECK_THROWS_AS(g.backward(g.scale(x, 2.0)), ContractError);
  g.backward(g.sum(x));
  CHECK(x->grad() == std::vector<double>(4, 1.0));
}

TEST_CASE("gradients accumulate only into trainable tensors") {
  Graph g;
  auto trainable = matrix(2, 2, {1, 2, 3, 4}, true);
  auto frozen = matrix(2, 2, {5, 6, 7, 8}, false);
  auto y = g.matmul(trainable, frozen);
  g.backward(g.sum(y));
  CHECK(trainable->has_grad());
  CHECK_FALSE(frozen->has_grad());
}

TEST_CASE("backward is bit-identical across reruns") {
  auto run = [](std::vector<double>& grad_out) {
    Rng rng(99);
    auto x = random_matrix(rng, 4, 5, -2, 2, true);
    auto w = random_matrix(rng, 5, 3, -2, 2, true);
    Graph g;
    auto loss = g.cross_entropy(g.matmul(g.relu(x), w), {0, 2, 1, 0});
    g.backward(loss);
    grad_out = x->grad();
    std::vector<double> wg = w->grad();
    grad_out.insert(grad_out.end(), wg.begin(), wg.end());
  };
  std::vector<double> first, second;
  run(first);
  run(second);
  CHECK(bit_equal(first, second));
}

TEST_CASE("grad_check on a linear function is near machine precision") {
  Rng rng(5);
  auto x = random_matrix(rng, 3, 3, -1, 1, true);
  const double err =
      grad_check([&](Graph& g) { return g.sum(g.scale(x, 3.5)); }, {x}, 1e-5);
  CHECK(err < 1e-10);
}

TEST_CASE("grad_check through softmax plus cross entropy") {
  Rng rng(17);
  auto x = random_matrix(rng, 4, 6, -1, 1, true);
  auto w = random_matrix(rng, 6, 3, -1, 1, true);
  const double err = grad_check(
      [&](Graph& g) {
        return g.cross_entropy(g.matmul(g.row_softmax(x), w), {2, 0, 1, 2});
      },
      {x, w}, 1e-5);
  CHECK(err < 1e-6);
}

TEST_CASE("grad_check through relu away from the kink") {
  Rng rng(29);
  // keep every pre-activation at least 10*eps away from zero
  std::vector<double> v(12);
  for (double& x : v) {
    double u = rng.uniform_real(1e-3, 1.0);
    x = (rng.next_u64() & 1) ? u : -u;
  }
  auto x = Tensor::make({3, 4}, std::move(v), true);
  const double err =
      grad_check([&](Graph& g) { return g.sum(g.relu(x)); }, {x}, 1e-5);
  CHECK(err < 1e-6);
}

TEST_CASE("grad_check across remaining ops") {
  Rng rng(41);
  auto x = random_matrix(rng, 3, 4, -2, 2, true);
  auto w = random_matrix(rng, 4, 2, -1, 1, true);
  auto gain = vec({1.1, 0.9, 1.3, 0.7}, true);
  auto bias = vec({0.1, -0.2, 0.05, 0.0}, true);
  auto other = random_matrix(rng, 2, 4, -1, 1, true);
  auto wide = random_matrix(rng, 3, 2, -1, 1, true);

  SUBCASE("transpose") {
    const double err = grad_check(
        [&](Graph& g) { return g.sum(g.matmul(g.transpose(x), wide)); },
        {x, wide}, 1e-5);
    CHECK(err < 1e-6);
  }
  SUBCASE("layer_norm") {
    const double err = grad_check(
        [&](Graph& g) {
          return g.sum(g.matmul(g.layer_norm(x, gain, bias, 1e-5), w));
        },
        {x, gain, bias, w}, 1e-5);
    CHECK(err < 1e-6);
  }
  SUBCASE("mean_rows") {
    const double err = grad_check(
        [&](Graph& g) {
          return g.sum(g.matmul(g.mean_rows(x, {1, 0, 1}), w));
        },
        {x, w}, 1e-5);
    CHECK(err < 1e-6);
  }
  SUBCASE("concat_rows and concat_cols") {
    auto half = random_matrix(rng, 2, 2, -1, 1, true);
    const double err = grad_check(
        [&](Graph& g) {
          auto rows = g.concat_rows(x, g.concat_cols({half, half}));
          return g.sum(g.matmul(rows, w));
        },
        {x, half, w}, 1e-5);
    CHECK(err < 1e-6);
  }
  SUBCASE("row_select") {
    const double err = grad_check(
        [&](Graph& g) {
          return g.sum(g.matmul(g.row_select(x, {1, 1, 2}), w));
        },
        {x, w}, 1e-5);
    CHECK(err < 1e-6);
  }
  SUBCASE("add broadcast and scale") {
    const double err = grad_check(
        [&](Graph& g) {
          return g.sum(g.scale(g.add(x, bias), -1.75));
        },
        {x, bias}, 1e-5);
    CHECK(err < 1e-6);
  }
}
