#include "dino/errors.hpp"
#include "dino/tensor.hpp"
#include "gradcheck.hpp"
#include "primitive_cases.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <unordered_set>

namespace dino {
namespace {

using testing::grad_check;
using testing::probe;
using testing::random_tensor;

TEST(Tensor, MatmulIdentity) {
  Rng rng(1);
  const Tensor a = random_tensor({3, 3}, rng);
  const Tensor eye = Tensor::from_matrix(RowMatrix::Identity(3, 3));
  EXPECT_EQ(matmul(eye, a).data(), a.data());
}

TEST(Tensor, MatmulEmptyContraction) {
  const Tensor a = Tensor::zeros({2, 0});
  const Tensor b = Tensor::zeros({0, 3});
  const Tensor c = matmul(a, b);
  EXPECT_EQ(c.shape(), (Shape{2, 3}));
  EXPECT_TRUE(c.data().isZero(0.0));
}

TEST(Tensor, MatmulShapeErrorNamesBothShapes) {
  try {
    matmul(Tensor::zeros({2, 3}), Tensor::zeros({4, 5}));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2x3]"), std::string::npos);
    EXPECT_NE(msg.find("[4x5]"), std::string::npos);
  }
}

TEST(Tensor, MatmulGradientIsColumnSumsBroadcast) {
  Rng rng(2);
  Tensor a = random_tensor({3, 4}, rng).set_requires_grad(true);
  const Tensor b = random_tensor({4, 5}, rng);
  sum(matmul(a, b)).backward();
  const RowMatrix expected = b.mat().rowwise().sum().transpose().replicate(3, 1);
  const Buffer grad = a.grad();
  for (Index i = 0; i < 3; ++i)
    for (Index k = 0; k < 4; ++k)
      EXPECT_NEAR(grad[i * 4 + k], expected(i, k), 1e-12);

  const auto r = grad_check([&](const std::vector<Tensor>& in) { return sum(matmul(in[0], b)); },
                            {random_tensor({3, 4}, rng)});
  EXPECT_LT(r.max_rel_error, 1e-6);
}

TEST(Tensor, SigmoidAndInverse) {
  EXPECT_DOUBLE_EQ(sigmoid(Tensor::scalar(0.0)).item(), 0.5);
  EXPECT_DOUBLE_EQ(inverse_sigmoid(Tensor::scalar(0.5)).item(), 0.0);
  EXPECT_NEAR(sigmoid(inverse_sigmoid(Tensor::scalar(0.9))).item(), 0.9, 1e-9);
  // Clamping makes the inverse total.
  EXPECT_TRUE(std::isfinite(inverse_sigmoid(Tensor::scalar(0.0)).item()));
  EXPECT_TRUE(std::isfinite(inverse_sigmoid(Tensor::scalar(1.0)).item()));
  EXPECT_NEAR(inverse_sigmoid(Tensor::scalar(0.0), 1e-3).item(), std::log(1e-3 / (1 - 1e-3)), 1e-15);
}

TEST(Tensor, DetachBlocksGradient) {
  Rng rng(3);
  Tensor x = random_tensor({3, 4}, rng).set_requires_grad(true);
  Tensor w = random_tensor({3, 4}, rng).set_requires_grad(true);
  sum(detach(x) * w).backward();
  EXPECT_TRUE(x.grad().isZero(0.0));
  EXPECT_EQ(w.grad(), x.data());
  EXPECT_EQ(detach(detach(x)).data(), x.data());
  EXPECT_FALSE(detach(x).requires_grad());
}

TEST(Tensor, DetachedLeafNeverAccumulates) {
  Tensor x = Tensor::full({2}, 1.5, true);
  Tensor d = detach(x);
  sum(d * d).backward();
  EXPECT_TRUE(d.grad().isZero(0.0));
  EXPECT_TRUE(x.grad().isZero(0.0));
}

TEST(Tensor, PieceReplayFreezesDetachAndBranches) {
  PieceTrace trace;
  Tensor x = Tensor::full({2}, 1.5);
  x.mutable_data()[1] = -0.5;
  {
    PieceRecord record(trace);
    detach(x);
    relu(x);
  }
  ASSERT_EQ(trace.detached.size(), 1u);
  ASSERT_EQ(trace.branches.size(), 2u);
  x.mutable_data()[0] = -9.0;
  x.mutable_data()[1] = 0.25;
  {
    PieceReplay replay(trace);
    EXPECT_EQ(detach(x).at(0), 1.5);
    // The recorded relu mask extends each side linearly past the kink.
    const Tensor y = relu(x);
    EXPECT_EQ(y.at(0), -9.0);
    EXPECT_EQ(y.at(1), 0.0);
    EXPECT_THROW(detach(x), ShapeError);
  }
  EXPECT_EQ(detach(x).at(0), -9.0);
  EXPECT_EQ(relu(x).at(0), 0.0);
}

TEST(Tensor, SoftmaxNormalization) {
  const Tensor u = softmax(Tensor::full({2, 5}, 0.7), 1);
  for (Index i = 0; i < u.numel(); ++i) EXPECT_DOUBLE_EQ(u.at(i), 0.2);
  Rng rng(4);
  const Tensor s = softmax(random_tensor({3, 4, 5}, rng), 1);
  const Tensor total = sum(s, 1);
  for (Index i = 0; i < total.numel(); ++i) EXPECT_NEAR(total.at(i), 1.0, 1e-12);
}

TEST(Tensor, SoftmaxMaskedEntriesAreExactlyZero) {
  Buffer b(3);
  b << 0.3, -std::numeric_limits<double>::infinity(), 1.0;
  const Tensor s = softmax(Tensor::from_buffer({1, 3}, b), 1);
  EXPECT_EQ(s.at(1), 0.0);
  EXPECT_NEAR(s.at(0) + s.at(2), 1.0, 1e-15);
}

TEST(Tensor, AxisErrors) {
  const Tensor x = Tensor::zeros({2, 3});
  EXPECT_THROW(sum(x, 2), ShapeError);
  EXPECT_THROW(softmax(x, -3), ShapeError);
  EXPECT_THROW(add(x, Tensor::zeros({3, 2})), ShapeError);
  EXPECT_THROW(reshape(x, {4}), ShapeError);
  EXPECT_THROW(slice(x, 1, 2, 4), ShapeError);
  const std::vector<Index> bad{5};
  EXPECT_THROW(gather(x, bad), ShapeError);
}

TEST(Tensor, PrimitiveGradientsMatchFiniteDifferences) {
  for (const auto& c : testing::primitive_cases()) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      Rng rng(seed * 7919 + 17);
      std::vector<Tensor> inputs;
      for (const auto& s : c.shapes) inputs.push_back(random_tensor(s, rng, c.lo, c.hi));
      const auto r = grad_check(c.fn, inputs);
      EXPECT_LT(r.max_rel_error, 1e-5) << c.name << " seed " << seed;
    }
  }
}

TEST(Tensor, Conv2dGradient) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(seed + 100);
    const auto r = grad_check(
        [](const std::vector<Tensor>& in) { return probe(conv2d(in[0], in[1], in[2], 3, 2, 1)); },
        {random_tensor({5, 6, 2}, rng), random_tensor({18, 3}, rng), random_tensor({3}, rng)});
    EXPECT_LT(r.max_rel_error, 1e-5) << "seed " << seed;
  }
}

TEST(Tensor, Conv2dStrideArithmetic) {
  const Tensor y = conv2d(Tensor::zeros({64, 64, 3}), Tensor::zeros({27, 4}), Tensor::full({4}, 0.5), 3, 2, 1);
  EXPECT_EQ(y.shape(), (Shape{32, 32, 4}));
  for (Index i = 0; i < y.numel(); ++i) EXPECT_EQ(y.at(i), 0.5);
}

TEST(Tensor, BilinearSampleAtGridPointReturnsGridValue) {
  Rng rng(5);
  const Tensor map = random_tensor({4, 5, 3}, rng);
  // Pixel (x=2, y=1) has its center at ((2 + 0.5) / 5, (1 + 0.5) / 4).
  Buffer loc(2);
  loc << 2.5 / 5.0, 1.5 / 4.0;
  const Tensor s = bilinear_sample(map, Tensor::from_buffer({1, 2}, loc));
  for (Index c = 0; c < 3; ++c) EXPECT_NEAR(s.at(c), map.at((1 * 5 + 2) * 3 + c), 1e-14);
}

TEST(Tensor, BilinearSampleOutsideReadsZero) {
  const Tensor map = Tensor::full({3, 3, 2}, 4.0);
  Buffer loc(4);
  loc << -0.9, 0.5, 1.8, 2.0;
  const Tensor s = bilinear_sample(map, Tensor::from_buffer({2, 2}, loc));
  EXPECT_TRUE(s.data().isZero(0.0));
}

TEST(Tensor, BilinearSampleGradient) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(seed + 200);
    // Locations strictly inside, away from pixel-center grid lines in general.
    const auto r = grad_check([](const std::vector<Tensor>& in) { return probe(bilinear_sample(in[0], in[1])); },
                              {random_tensor({4, 5, 3}, rng), random_tensor({6, 2}, rng, 0.05, 0.95)});
    EXPECT_LT(r.max_rel_error, 1e-5) << "seed " << seed;
  }
}

TEST(Tensor, MultiScaleDeformSampleGradient) {
  const std::vector<LevelShape> levels{{4, 4}, {2, 3}};
  const Index heads = 2, points = 2, q = 3, ch = 4;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(seed + 300);
    const auto r = grad_check(
        [&](const std::vector<Tensor>& in) { return probe(ms_deform_sample(in[0], levels, in[1], in[2], heads, points)); },
        {random_tensor({22, ch}, rng), random_tensor({q, heads * 2 * points * 2}, rng, 0.05, 0.95),
         random_tensor({q, heads * 2 * points}, rng, 0.0, 1.0)});
    EXPECT_LT(r.max_rel_error, 1e-5) << "seed " << seed;
  }
}

TEST(Tensor, MultiScaleDeformSampleConstantMap) {
  const std::vector<LevelShape> levels{{3, 3}, {2, 2}};
  const Tensor value = Tensor::full({13, 4}, 2.5);
  Rng rng(6);
  // Uniform weights over levels x points sum to one per head.
  const Tensor locs = random_tensor({5, 2 * 2 * 2 * 2}, rng, 0.3, 0.7);
  const Tensor w = Tensor::full({5, 2 * 2 * 2}, 0.25);
  const Tensor out = ms_deform_sample(value, levels, locs, w, 2, 2);
  for (Index i = 0; i < out.numel(); ++i) EXPECT_NEAR(out.at(i), 2.5, 1e-12);
}

TEST(Tape, TopologicalOrder) {
  Rng rng(7);
  Tensor a = random_tensor({2, 2}, rng).set_requires_grad(true);
  Tensor b = random_tensor({2, 2}, rng).set_requires_grad(true);
  const Tensor c = a * b;
  const Tensor d = sigmoid(c) + a;
  const Tensor loss = sum(matmul(d, c));
  const Tape tape = Tape::record(loss);
  std::unordered_set<const detail::Node*> seen;
  for (const auto& node : tape.nodes()) {
    for (const auto& p : node->parents)
      if (p->requires_grad) EXPECT_TRUE(seen.count(p.get())) << "input recorded after its consumer";
    seen.insert(node.get());
  }
  EXPECT_TRUE(tape.nodes().back() == loss.node());
}

TEST(Tape, OffPathTensorsHaveZeroGrad) {
  Tensor a = Tensor::full({3}, 1.0, true);
  Tensor b = Tensor::full({3}, 2.0, true);
  const Tensor unused = exp(b);
  sum(a * a).backward();
  EXPECT_TRUE(b.grad().isZero(0.0));
  EXPECT_TRUE(unused.grad().isZero(0.0));
  EXPECT_FALSE(a.grad().isZero(0.0));
}

TEST(Tape, DeterministicForwardAndBackward) {
  auto run = [] {
    Rng rng(11);
    Tensor a = random_tensor({4, 6}, rng).set_requires_grad(true);
    Tensor b = random_tensor({6, 3}, rng).set_requires_grad(true);
    const Tensor y = softmax(matmul(a, b), 1);
    const Tensor loss = probe(y);
    loss.backward();
    return std::make_tuple(loss.item(), a.grad(), b.grad());
  };
  const auto [l1, ga1, gb1] = run();
  const auto [l2, ga2, gb2] = run();
  EXPECT_EQ(l1, l2);
  EXPECT_EQ(ga1, ga2);
  EXPECT_EQ(gb1, gb2);
}

// Random DAGs with random detached edges: a leaf's gradient must be exactly
// zero iff the leaf cannot reach the root without crossing a detached edge.
TEST(Tape, DetachZeroesExactlyTheUnreachableGradients) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Rng rng(seed + 1000);
    const int leaves = 4, ops = 8;
    std::vector<Tensor> nodes;
    // live[i][j]: node i depends on leaf j through non-detached edges.
    std::vector<std::vector<bool>> live;
    for (int j = 0; j < leaves; ++j) {
      nodes.push_back(random_tensor({3}, rng, 0.5, 2.0).set_requires_grad(true));
      std::vector<bool> l(leaves, false);
      l[j] = true;
      live.push_back(l);
    }
    for (int k = 0; k < ops; ++k) {
      const auto i = uniform_index(rng, nodes.size());
      const auto j = uniform_index(rng, nodes.size());
      const bool detach_i = bernoulli(rng, 0.3), detach_j = bernoulli(rng, 0.3);
      const Tensor a = detach_i ? detach(nodes[i]) : nodes[i];
      const Tensor b = detach_j ? detach(nodes[j]) : nodes[j];
      const int kind = static_cast<int>(uniform_index(rng, 3));
      Tensor out = kind == 0 ? a + b : kind == 1 ? a * b : sigmoid(a) * b;
      std::vector<bool> l(leaves, false);
      for (int t = 0; t < leaves; ++t) l[t] = (!detach_i && live[i][t]) || (!detach_j && live[j][t]);
      nodes.push_back(out);
      live.push_back(l);
    }
    sum(nodes.back()).backward();
    for (int t = 0; t < leaves; ++t) {
      const bool zero = nodes[t].grad().isZero(0.0);
      EXPECT_EQ(zero, !live.back()[t]) << "seed " << seed << " leaf " << t;
    }
  }
}

}  // namespace
}  // namespace dino
