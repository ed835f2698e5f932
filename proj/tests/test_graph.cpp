#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "mtask/graph.hpp"
#include "mtask/rng.hpp"

using namespace mtask;

namespace {

Tensor random_tensor(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t = Tensor::zeros(std::move(s));
  for (double& v : t.values) v = rng.uniform(lo, hi);
  return t;
}

}  // namespace

TEST_CASE("relu forward") {
  Graph g;
  NodeId x = g.leaf(Tensor({3}, {-1.0, 0.0, 2.0}));
  NodeId y = g.relu(x);
  CHECK(g.value(y).values == std::vector<double>{0.0, 0.0, 2.0});
}

TEST_CASE("concat along features") {
  Graph g;
  Rng rng(42);
  NodeId a = g.leaf(random_tensor({1, 512}, rng));
  NodeId b = g.leaf(random_tensor({1, 512}, rng));
  NodeId c = g.concat(a, b);
  CHECK(g.value(c).shape == Shape{1, 1024});
  CHECK(g.value(c).values[0] == g.value(a).values[0]);
  CHECK(g.value(c).values[512] == g.value(b).values[0]);
}

TEST_CASE("1x1 identity kernel convolution") {
  Graph g;
  Rng rng(7);
  NodeId x = g.leaf(random_tensor({1, 1, 6, 9}, rng));
  NodeId w = g.leaf(Tensor({1, 1, 1, 1}, {1.0}));
  NodeId b = g.leaf(Tensor({1}, {0.0}));
  NodeId y = g.conv2d(x, w, b, 1, 0);
  CHECK(g.value(y).shape == Shape{1, 1, 6, 9});
  CHECK(g.value(y).values == g.value(x).values);
}

TEST_CASE("shape mismatch errors name the op and shapes") {
  Graph g;
  NodeId a = g.leaf(Tensor::zeros({2, 3}));
  NodeId b = g.leaf(Tensor::zeros({4, 3}));
  CHECK_THROWS_WITH_AS(g.add(a, b), doctest::Contains("add"), ShapeError);
  CHECK_THROWS_WITH_AS(g.matmul(a, b), doctest::Contains("[2,3]"), ShapeError);
  CHECK_THROWS_WITH_AS(g.matmul(a, b), doctest::Contains("[4,3]"), ShapeError);
}

TEST_CASE("sum gradient is all ones") {
  Graph g;
  Rng rng(3);
  NodeId x = g.leaf(random_tensor({4, 5}, rng).with_grad());
  NodeId s = g.sum(x);
  GradMap grads = g.backward(s);
  for (double v : grads.at(x)) CHECK(v == 1.0);
}

TEST_CASE("square gradient at 3 is 6") {
  Graph g;
  NodeId x = g.leaf(Tensor({1}, {3.0}).with_grad());
  NodeId y = g.square(x);
  GradMap grads = g.backward(y);
  CHECK(grads.at(x)[0] == 6.0);
}

TEST_CASE("L1 residual gradient sign") {
  // loss = |z - f| at z=164, f=100: d/df = -1, confirmed by central differences
  Graph g;
  NodeId z = g.leaf(Tensor({1}, {164.0}));
  NodeId f = g.leaf(Tensor({1}, {100.0}).with_grad());
  NodeId loss = g.abs(g.sub(z, f));
  GradMap grads = g.backward(loss);
  CHECK(grads.at(f)[0] == -1.0);
  std::vector<double> fd = g.fd_gradient(loss, f, 1e-4);
  CHECK(std::fabs(fd[0] - (-1.0)) < 1e-9);
}

TEST_CASE("fan-out accumulates additively") {
  Graph g;
  NodeId x = g.leaf(Tensor({1}, {1.5}).with_grad());
  NodeId s = g.add(x, x);
  GradMap grads = g.backward(s);
  CHECK(grads.at(x)[0] == 2.0);
}

TEST_CASE("concat gradient routes slices unchanged") {
  Graph g;
  Rng rng(11);
  NodeId a = g.leaf(random_tensor({3, 4}, rng).with_grad());
  NodeId b = g.leaf(random_tensor({3, 2}, rng).with_grad());
  NodeId c = g.concat(a, b);
  NodeId w = g.leaf(random_tensor({3, 6}, rng));
  NodeId loss = g.sum(g.mul(c, w));
  GradMap grads = g.backward(loss);
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 4; ++j)
      CHECK(grads.at(a)[i * 4 + j] == g.value(w).values[i * 6 + j]);
    for (int j = 0; j < 2; ++j)
      CHECK(grads.at(b)[i * 2 + j] == g.value(w).values[i * 6 + 4 + j]);
  }
}

TEST_CASE("backward requires a scalar loss and a valid node") {
  Graph g;
  NodeId x = g.leaf(Tensor::zeros({2, 2}).with_grad());
  NodeId y = g.relu(x);
  CHECK_THROWS_AS(g.backward(y), ShapeError);
  CHECK_THROWS_AS(g.backward(99), ShapeError);
  Graph empty;
  CHECK_THROWS_AS(empty.backward(0), ShapeError);
}

TEST_CASE("two identical builds are bitwise identical") {
  auto build = [] {
    Graph g;
    Rng rng(99);
    NodeId x = g.leaf(random_tensor({2, 3, 8, 8}, rng).with_grad());
    NodeId w = g.leaf(random_tensor({4, 3, 3, 3}, rng, -0.3, 0.3).with_grad());
    NodeId b = g.leaf(random_tensor({4}, rng).with_grad());
    NodeId c = g.relu(g.conv2d(x, w, b, 1, 1));
    NodeId p = g.maxpool2d(c, 2);
    NodeId loss = g.mean(g.square(p));
    GradMap grads = g.backward(loss);
    return std::make_pair(g.value(loss).values[0], grads);
  };
  auto [l1, g1] = build();
  auto [l2, g2] = build();
  CHECK(l1 == l2);
  REQUIRE(g1.size() == g2.size());
  auto it1 = g1.begin();
  auto it2 = g2.begin();
  for (; it1 != g1.end(); ++it1, ++it2) CHECK(it1->second == it2->second);
}

TEST_CASE("grad_check is exact for a linear loss") {
  Graph g;
  Rng rng(5);
  NodeId w = g.leaf(random_tensor({1, 8}, rng));
  NodeId x = g.leaf(random_tensor({8, 1}, rng).with_grad());
  NodeId loss = g.matmul(w, x);
  GradCheckResult r = g.grad_check(loss, x, 1e-4);
  CHECK(r.checked == 8);
  CHECK(r.max_rel_err <= 1e-10);
}

TEST_CASE("grad_check validates epsilon and restores leaf values") {
  Graph g;
  NodeId x = g.leaf(Tensor({2}, {1.0, 2.0}).with_grad());
  NodeId loss = g.sum(g.square(x));
  CHECK_THROWS_AS(g.grad_check(loss, x, 0.0), ShapeError);
  CHECK_THROWS_AS(g.grad_check(loss, x, 0.5), ShapeError);
  g.grad_check(loss, x, 1e-4);
  CHECK(g.value(x).values == std::vector<double>{1.0, 2.0});
}

TEST_CASE("grad_check flags kink entries instead of failing them") {
  Graph g;
  // one entry sits exactly on the relu kink, others are safely away from it
  NodeId x = g.leaf(Tensor({3}, {0.0, 1.0, -1.0}).with_grad());
  NodeId loss = g.sum(g.relu(x));
  GradCheckResult r = g.grad_check(loss, x, 1e-4);
  CHECK(r.flagged == std::vector<int>{0});
  CHECK(r.checked == 2);
  CHECK(r.max_rel_err <= 1e-10);
}

TEST_CASE("corrupted gradients are detected by the numeric oracle") {
  Graph g;
  Rng rng(13);
  NodeId x = g.leaf(random_tensor({6}, rng, 0.5, 2.0).with_grad());
  NodeId loss = g.sum(g.square(x));
  GradMap grads = g.backward(loss);
  std::vector<double> corrupted = grads.at(x);
  corrupted[2] += 0.05;
  std::vector<double> fd = g.fd_gradient(loss, x, 1e-4);
  double worst = 0.0;
  for (size_t i = 0; i < fd.size(); ++i) {
    double denom = std::max({1.0, std::fabs(fd[i]), std::fabs(corrupted[i])});
    worst = std::max(worst, std::fabs(fd[i] - corrupted[i]) / denom);
  }
  CHECK(worst > 1e-4);
}

TEST_CASE("every primitive passes grad_check at random points") {
  Rng rng(2024);
  double tol = 1e-4;

  auto check = [&](Graph& g, NodeId loss, NodeId leaf) {
    GradCheckResult r = g.grad_check(loss, leaf, 1e-4);
    CHECK(r.max_rel_err <= tol);
    return r.checked;
  };

  int points = 0;

  {  // add / sub / mul, same shape and per-feature and scalar forms
    Graph g;
    NodeId a = g.leaf(random_tensor({4, 6}, rng).with_grad());
    NodeId b = g.leaf(random_tensor({4, 6}, rng).with_grad());
    NodeId f = g.leaf(random_tensor({6}, rng).with_grad());
    NodeId s = g.leaf(random_tensor({1}, rng).with_grad());
    NodeId expr = g.mul(g.add(g.sub(a, b), f), s);
    NodeId loss = g.sum(g.square(expr));
    points += check(g, loss, a);
    points += check(g, loss, b);
    points += check(g, loss, f);
    points += check(g, loss, s);
  }
  {  // matmul
    Graph g;
    NodeId a = g.leaf(random_tensor({3, 5}, rng).with_grad());
    NodeId b = g.leaf(random_tensor({5, 4}, rng).with_grad());
    NodeId loss = g.mean(g.square(g.matmul(a, b)));
    points += check(g, loss, a);
    points += check(g, loss, b);
  }
  {  // conv2d with padding + maxpool + relu
    Graph g;
    NodeId x = g.leaf(random_tensor({2, 2, 6, 6}, rng).with_grad());
    NodeId w = g.leaf(random_tensor({3, 2, 3, 3}, rng, -0.4, 0.4).with_grad());
    NodeId b = g.leaf(random_tensor({3}, rng).with_grad());
    NodeId y = g.maxpool2d(g.relu(g.conv2d(x, w, b, 1, 1)), 2);
    NodeId loss = g.mean(g.square(y));
    points += check(g, loss, x);
    points += check(g, loss, w);
    points += check(g, loss, b);
  }
  {  // exp, log, sqrt, abs on safely positive inputs
    Graph g;
    NodeId x = g.leaf(random_tensor({20}, rng, 0.2, 1.5).with_grad());
    NodeId expr = g.add(g.log(x), g.add(g.sqrt(x), g.abs(g.exp(x))));
    NodeId loss = g.sum(g.square(expr));
    points += check(g, loss, x);
  }
  {  // reductions over all three axes plus broadcast both ways
    Graph g;
    NodeId x = g.leaf(random_tensor({5, 7}, rng).with_grad());
    NodeId per_sample = g.broadcast_to(g.variance(x, 1), {5, 7}, 0);
    NodeId per_feature = g.broadcast_to(g.mean(x, 0), {5, 7}, 1);
    NodeId expr = g.mul(g.sub(x, per_feature), per_sample);
    NodeId loss = g.add(g.sum(g.square(expr)), g.variance(x, -1));
    points += check(g, loss, x);
  }
  {  // concat + reshape
    Graph g;
    NodeId a = g.leaf(random_tensor({3, 4}, rng).with_grad());
    NodeId b = g.leaf(random_tensor({3, 2}, rng).with_grad());
    NodeId c = g.reshape(g.concat(a, b), {2, 9});
    NodeId loss = g.sum(g.square(c));
    points += check(g, loss, a);
    points += check(g, loss, b);
  }

  CHECK(points >= 100);  // at least 100 random probe points across the suite
}

TEST_CASE("binary ops support both scalar and per-feature orientations") {
  Rng rng(77);
  Graph g;
  NodeId m = g.leaf(random_tensor({3, 4}, rng).with_grad());
  NodeId feat = g.leaf(random_tensor({4}, rng).with_grad());
  NodeId s = g.leaf(random_tensor({1}, rng).with_grad());
  // vector-minus-matrix and scalar-minus-matrix orientations
  NodeId expr = g.mul(g.sub(feat, m), g.sub(s, m));
  NodeId loss = g.sum(g.square(expr));
  CHECK(g.grad_check(loss, m, 1e-4).max_rel_err <= 1e-4);
  CHECK(g.grad_check(loss, feat, 1e-4).max_rel_err <= 1e-4);
  CHECK(g.grad_check(loss, s, 1e-4).max_rel_err <= 1e-4);
  CHECK(g.value(expr).shape == Shape{3, 4});
}

TEST_CASE("variance reduction matches the biased estimator") {
  Graph g;
  NodeId x = g.leaf(Tensor({2, 2}, {0.0, 2.0, 4.0, 6.0}));
  NodeId v_rows = g.variance(x, 0);   // per feature over the batch
  NodeId v_cols = g.variance(x, 1);   // per sample over features
  NodeId v_all = g.variance(x, -1);
  CHECK(g.value(v_rows).values == std::vector<double>{4.0, 4.0});
  CHECK(g.value(v_cols).values == std::vector<double>{1.0, 1.0});
  CHECK(g.value(v_all).values[0] == 5.0);
}

TEST_CASE("maxpool picks the first maximum and routes gradient to it") {
  Graph g;
  NodeId x = g.leaf(Tensor({1, 1, 2, 2}, {3.0, 3.0, 1.0, 0.0}).with_grad());
  NodeId p = g.maxpool2d(x, 2);
  CHECK(g.value(p).values[0] == 3.0);
  GradMap grads = g.backward(g.sum(p));
  CHECK(grads.at(x) == std::vector<double>{1.0, 0.0, 0.0, 0.0});
}

TEST_CASE("unreachable requires-grad leaves get zero gradients") {
  Graph g;
  NodeId x = g.leaf(Tensor({2}, {1.0, 2.0}).with_grad());
  NodeId y = g.leaf(Tensor({2}, {3.0, 4.0}).with_grad());
  NodeId loss = g.sum(g.square(x));
  GradMap grads = g.backward(loss);
  CHECK(grads.at(y) == std::vector<double>{0.0, 0.0});
}
