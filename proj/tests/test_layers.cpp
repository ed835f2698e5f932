#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "mtask/layers.hpp"

using namespace mtask;

namespace {

Tensor random_tensor(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t = Tensor::zeros(std::move(s));
  for (double& v : t.values) v = rng.uniform(lo, hi);
  return t;
}

}  // namespace

TEST_CASE("layer norm zeroes a constant vector") {
  NormLayer ln = NormLayer::layer_norm(5);
  Graph g;
  ParamBinder pb(g, false);
  NodeId x = g.leaf(Tensor::full({1, 5}, 3.7));
  NodeId y = ln.forward(g, pb, x, true);
  for (double v : g.value(y).values) CHECK(v == 0.0);
}

TEST_CASE("layer norm passes an already normalized vector through") {
  NormLayer ln = NormLayer::layer_norm(2, 0.0);
  Graph g;
  ParamBinder pb(g, false);
  NodeId x = g.leaf(Tensor({1, 2}, {1.0, -1.0}));
  NodeId y = ln.forward(g, pb, x, true);
  CHECK(g.value(y).values[0] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(g.value(y).values[1] == doctest::Approx(-1.0).epsilon(1e-12));
}

TEST_CASE("layer norm applies the affine map after normalizing") {
  NormLayer ln = NormLayer::layer_norm(2, 0.0);
  ln.gamma = Tensor::full({2}, 2.0);
  ln.beta = Tensor::full({2}, 1.0);
  Graph g;
  ParamBinder pb(g, false);
  NodeId x = g.leaf(Tensor({1, 2}, {0.0, 2.0}));
  NodeId y = ln.forward(g, pb, x, true);
  CHECK(g.value(y).values[0] == doctest::Approx(-1.0).epsilon(1e-12));
  CHECK(g.value(y).values[1] == doctest::Approx(3.0).epsilon(1e-12));
}

TEST_CASE("batch norm zeroes identical samples") {
  NormLayer bn = NormLayer::batch_norm(3);
  Graph g;
  ParamBinder pb(g, false);
  NodeId x = g.leaf(Tensor({4, 3}, std::vector<double>(12, 0.25)));
  NodeId y = bn.forward(g, pb, x, true);
  for (double v : g.value(y).values) CHECK(v == 0.0);
}

TEST_CASE("batch norm normalizes each feature by biased batch statistics") {
  NormLayer bn = NormLayer::batch_norm(1, 0.0);
  Graph g;
  ParamBinder pb(g, false);
  NodeId x = g.leaf(Tensor({2, 1}, {0.0, 2.0}));
  NodeId y = bn.forward(g, pb, x, true);
  CHECK(g.value(y).values[0] == doctest::Approx(-1.0).epsilon(1e-12));
  CHECK(g.value(y).values[1] == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("batch norm inference with unit running stats is the identity") {
  NormLayer bn = NormLayer::batch_norm(3, 0.0);
  Graph g;
  ParamBinder pb(g, false);
  Rng rng(4);
  Tensor x = random_tensor({5, 3}, rng);
  NodeId xn = g.leaf(x);
  NodeId y = bn.forward(g, pb, xn, false);
  CHECK(g.value(y).values == x.values);
}

TEST_CASE("batch norm updates running statistics with momentum") {
  NormLayer bn = NormLayer::batch_norm(1);
  Graph g;
  ParamBinder pb(g, false);
  NodeId x = g.leaf(Tensor({2, 1}, {0.0, 2.0}));  // batch mean 1, biased var 1
  bn.forward(g, pb, x, true);
  CHECK(bn.running_mean.values[0] == doctest::Approx(0.1).epsilon(1e-12));
  CHECK(bn.running_var.values[0] == doctest::Approx(0.9 * 1.0 + 0.1 * 1.0).epsilon(1e-12));
}

TEST_CASE("batch norm rejects single-sample training batches") {
  NormLayer bn = NormLayer::batch_norm(3);
  Graph g;
  ParamBinder pb(g, false);
  NodeId x = g.leaf(Tensor::zeros({1, 3}));
  CHECK_THROWS_AS(bn.forward(g, pb, x, true), ShapeError);
  CHECK_NOTHROW(bn.forward(g, pb, x, false));  // inference is fine
}

TEST_CASE("norm layers reject mismatched feature dimensions") {
  NormLayer ln = NormLayer::layer_norm(4);
  Graph g;
  ParamBinder pb(g, false);
  NodeId x = g.leaf(Tensor::zeros({2, 5}));
  CHECK_THROWS_AS(ln.forward(g, pb, x, true), ShapeError);
}

TEST_CASE("layer norm pre-affine output has zero mean and unit variance") {
  NormLayer ln = NormLayer::layer_norm(16, 1e-12);
  Rng rng(21);
  for (int trial = 0; trial < 20; ++trial) {
    Graph g;
    ParamBinder pb(g, false);
    NodeId x = g.leaf(random_tensor({4, 16}, rng, -3.0, 3.0));
    NodeId y = ln.forward(g, pb, x, true);
    for (int i = 0; i < 4; ++i) {
      double mu = 0.0, var = 0.0;
      for (int j = 0; j < 16; ++j) mu += g.value(y).values[i * 16 + j];
      mu /= 16.0;
      for (int j = 0; j < 16; ++j) {
        double d = g.value(y).values[i * 16 + j] - mu;
        var += d * d;
      }
      var /= 16.0;
      CHECK(std::fabs(mu) <= 1e-9);
      CHECK(std::fabs(var - 1.0) <= 1e-6);
    }
  }
}

TEST_CASE("batch norm inference is a pure per-feature affine map") {
  NormLayer bn = NormLayer::batch_norm(6);
  Rng rng(31);
  bn.running_mean = random_tensor({6}, rng);
  bn.running_var = random_tensor({6}, rng, 0.5, 2.0);
  bn.gamma = random_tensor({6}, rng);
  bn.beta = random_tensor({6}, rng);

  Tensor batch = random_tensor({5, 6}, rng);
  Graph g1;
  ParamBinder pb1(g1, false);
  NodeId y1 = bn.forward(g1, pb1, g1.leaf(batch), false);

  // permuting samples permutes outputs identically
  Tensor permuted = Tensor::zeros({5, 6});
  int perm[5] = {3, 0, 4, 1, 2};
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 6; ++j) permuted.values[i * 6 + j] = batch.values[perm[i] * 6 + j];
  Graph g2;
  ParamBinder pb2(g2, false);
  NodeId y2 = bn.forward(g2, pb2, g2.leaf(permuted), false);
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 6; ++j)
      CHECK(g2.value(y2).values[i * 6 + j] == g1.value(y1).values[perm[i] * 6 + j]);

  // a single sample run alone equals its row inside the batch, bitwise
  Tensor single = Tensor::zeros({1, 6});
  for (int j = 0; j < 6; ++j) single.values[j] = batch.values[2 * 6 + j];
  Graph g3;
  ParamBinder pb3(g3, false);
  NodeId y3 = bn.forward(g3, pb3, g3.leaf(single), false);
  for (int j = 0; j < 6; ++j) CHECK(g3.value(y3).values[j] == g1.value(y1).values[2 * 6 + j]);
}

TEST_CASE("layer norm gradients pass central differences") {
  NormLayer ln = NormLayer::layer_norm(16);
  Graph g;
  ParamBinder pb(g, true);
  Rng rng(8);
  NodeId x = g.leaf(random_tensor({1, 16}, rng, -2.0, 2.0).with_grad());
  NodeId y = ln.forward(g, pb, x, true);
  NodeId loss = g.sum(g.square(y));
  CHECK(g.grad_check(loss, x, 1e-4).max_rel_err <= 1e-4);
  for (const auto& [ref, id] : pb.bound())
    CHECK(g.grad_check(loss, id, 1e-4).max_rel_err <= 1e-4);
}

TEST_CASE("batch norm gradients pass central differences on an 8x16 batch") {
  NormLayer bn = NormLayer::batch_norm(16);
  Graph g;
  ParamBinder pb(g, true);
  Rng rng(9);
  NodeId x = g.leaf(random_tensor({8, 16}, rng, -2.0, 2.0).with_grad());
  NodeId y = bn.forward(g, pb, x, true);
  NodeId loss = g.sum(g.square(y));
  CHECK(g.grad_check(loss, x, 1e-4).max_rel_err <= 1e-4);
  for (const auto& [ref, id] : pb.bound())
    CHECK(g.grad_check(loss, id, 1e-4).max_rel_err <= 1e-4);
}

TEST_CASE("zero-initialized backbone maps a zero image to zero features") {
  ArchSpec spec;
  spec.image_size = 16;
  spec.conv_channels = {4, 8};
  spec.feature_dim = 10;
  Rng rng(1);
  Backbone bb(spec, rng);
  for (const ParamRef& p : bb.params("bb"))
    std::fill(p.tensor->values.begin(), p.tensor->values.end(), 0.0);
  Graph g;
  ParamBinder pb(g, false);
  NodeId out = bb.forward(g, pb, g.leaf(Tensor::zeros({2, 3, 16, 16})));
  for (double v : g.value(out).values) CHECK(v == 0.0);
}

TEST_CASE("backbone forward is deterministic for a fixed seed") {
  ArchSpec spec;
  spec.image_size = 16;
  spec.conv_channels = {4, 8};
  spec.feature_dim = 12;
  auto run = [&] {
    Rng rng(77);
    Backbone bb(spec, rng);
    Graph g;
    ParamBinder pb(g, false);
    Rng img_rng(5);
    NodeId out = bb.forward(g, pb, g.leaf(random_tensor({3, 3, 16, 16}, img_rng, 0.0, 1.0)));
    return g.value(out).values;
  };
  CHECK(run() == run());
}

TEST_CASE("two backbones from the same spec are index-aligned") {
  ArchSpec spec;
  spec.image_size = 16;
  spec.conv_channels = {4, 8};
  spec.feature_dim = 12;
  Rng rng_a(1), rng_b(2);
  Backbone a(spec, rng_a), b(spec, rng_b);
  CHECK(a.flatten_params().size() == b.flatten_params().size());

  // length is the sum of per-layer weight and bias sizes
  size_t expect = 4u * 3 * 9 + 4 + 8u * 4 * 9 + 8;
  expect += static_cast<size_t>(spec.flat_dim()) * 12 + 12;
  CHECK(a.flatten_params().size() == expect);

  Backbone copy = a;
  CHECK(copy.flatten_params() == a.flatten_params());
}

TEST_CASE("backbone rejects mismatched image sizes") {
  ArchSpec spec;
  spec.image_size = 16;
  spec.conv_channels = {4};
  Rng rng(3);
  Backbone bb(spec, rng);
  Graph g;
  ParamBinder pb(g, false);
  CHECK_THROWS_AS(bb.forward(g, pb, g.leaf(Tensor::zeros({1, 3, 8, 8}))), ShapeError);
}

TEST_CASE("backbone gradients flow to every parameter") {
  ArchSpec spec;
  spec.image_size = 8;
  spec.conv_channels = {4};
  spec.feature_dim = 6;
  Rng rng(15);
  Backbone bb(spec, rng);
  Graph g;
  ParamBinder pb(g, true);
  Rng img_rng(6);
  NodeId out = bb.forward(g, pb, g.leaf(random_tensor({2, 3, 8, 8}, img_rng, 0.1, 1.0)));
  NodeId loss = g.mean(g.square(out));
  GradMap grads = g.backward(loss);
  for (const auto& [ref, id] : pb.bound()) {
    double norm = 0.0;
    for (double v : grads.at(id)) norm += std::fabs(v);
    CHECK(norm > 0.0);
    CHECK(g.grad_check(loss, id, 1e-4).max_rel_err <= 1e-4);
  }
}
