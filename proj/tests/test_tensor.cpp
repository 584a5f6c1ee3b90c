#include <gtest/gtest.h>

#include <cmath>

#include "support/gradcheck.hpp"
#include "stairs/nn.hpp"
#include "stairs/tensor.hpp"

using namespace stairs;
using stairs::testing::grad_check;
using stairs::testing::op_cases;
using stairs::testing::random_tensor;

class OpGradient : public ::testing::TestWithParam<std::size_t> {};

TEST_P(OpGradient, MatchesCentralDifferences) {
  const auto cases = op_cases();
  const auto& c = cases.at(GetParam());
  Rng rng(1000 + GetParam());
  for (int point = 0; point < 20; ++point) {
    const auto r = grad_check(c.fn, c.inputs(rng), 31 * point + 5);
    ASSERT_LE(r.max_rel_error, 1e-4) << c.name << " point " << point << " " << r.worst;
  }
}

INSTANTIATE_TEST_SUITE_P(AllOps, OpGradient, ::testing::Range<std::size_t>(0, op_cases().size()),
                         [](const auto& info) { return op_cases()[info.param].name; });

// Naive triple loop as the oracle.
TEST(Tensor, MatmulMatchesLoops) {
  Rng rng(3);
  const Tensor a = random_tensor({4, 7}, rng), b = random_tensor({7, 5}, rng);
  const Tensor c = matmul(a, b);
  ASSERT_EQ(c.shape(), (Shape{4, 5}));
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 5; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < 7; ++k) s += a.at(i * 7 + k) * b.at(k * 5 + j);
      EXPECT_NEAR(c.at(i * 5 + j), s, 1e-12);
    }
}

TEST(Tensor, BmmNtEqualsBmmWithTransposedOperand) {
  Rng rng(4);
  const Tensor a = random_tensor({3, 2, 4}, rng), b = random_tensor({3, 5, 4}, rng);
  std::vector<double> bt(3 * 4 * 5);
  for (std::size_t s = 0; s < 3; ++s)
    for (std::size_t i = 0; i < 5; ++i)
      for (std::size_t k = 0; k < 4; ++k) bt[s * 20 + k * 5 + i] = b.at(s * 20 + i * 4 + k);
  const Tensor x = bmm_nt(a, b), y = bmm(a, Tensor::from({3, 4, 5}, bt));
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_NEAR(x.at(i), y.at(i), 1e-12);
}

TEST(Tensor, SoftmaxRowsAreDistributions) {
  Rng rng(5);
  const Tensor x = random_tensor({6, 9}, rng, -30.0, 30.0);
  for (double temp : {0.25, 1.0, 4.0}) {
    const Tensor p = softmax(x, temp);
    for (std::size_t r = 0; r < 6; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < 9; ++c) {
        EXPECT_GE(p.at(r * 9 + c), 0.0);
        s += p.at(r * 9 + c);
      }
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(Tensor, SoftmaxTemperatureScalesLogits) {
  const Tensor x = Tensor::from({1, 3}, {1.0, 2.0, 4.0});
  const Tensor a = softmax(x, 2.0), b = softmax(scale(x, 0.5));
  for (std::size_t i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(a.at(i), b.at(i));
}

TEST(Tensor, MaskedSoftmaxGivesExactZeros) {
  const Tensor x = Tensor::from({1, 2, 3}, {5.0, 1.0, 2.0, -1.0, 0.0, 3.0});
  const std::vector<std::uint8_t> mask{1, 0, 1};
  const Tensor p = masked_softmax(x, mask);
  EXPECT_EQ(p.at(1), 0.0);
  EXPECT_EQ(p.at(4), 0.0);
  const double e0 = std::exp(5.0), e2 = std::exp(2.0);
  EXPECT_NEAR(p.at(0), e0 / (e0 + e2), 1e-15);
  EXPECT_NEAR(p.at(5), std::exp(3.0) / (std::exp(-1.0) + std::exp(3.0)), 1e-15);
}

TEST(Tensor, LayerNormMatchesHandComputation) {
  const Tensor x = Tensor::from({1, 4}, {1.0, 2.0, 3.0, 6.0});
  const Tensor g = Tensor::from({4}, {1.0, 2.0, 1.0, 0.5});
  const Tensor b = Tensor::from({4}, {0.0, 0.0, 1.0, 0.0});
  const Tensor y = layer_norm(x, g, b, 1e-5);
  const double mu = 3.0, var = (4.0 + 1.0 + 0.0 + 9.0) / 4.0;
  const double inv = 1.0 / std::sqrt(var + 1e-5);
  const double expect[4] = {(1 - mu) * inv, 2 * (2 - mu) * inv, (3 - mu) * inv + 1.0, 0.5 * (6 - mu) * inv};
  for (int i = 0; i < 4; ++i) EXPECT_NEAR(y.at(i), expect[i], 1e-12);
}

TEST(Tensor, NoGradRecordsNothing) {
  const Tensor a = Tensor::full({2, 2}, 1.0, true);
  Tensor y;
  {
    NoGradGuard ng;
    EXPECT_FALSE(grad_enabled());
    y = matmul(a, a);
  }
  EXPECT_TRUE(grad_enabled());
  EXPECT_FALSE(y.requires_grad());
  EXPECT_TRUE(y.node()->parents.empty());
}

TEST(Tensor, BackwardRequiresScalar) {
  const Tensor a = Tensor::full({2, 2}, 1.0, true);
  EXPECT_THROW(backward(mul(a, a)), ShapeError);
}

TEST(Tensor, GradientsAccumulateAcrossUses) {
  // d/da (a*a + 3a) = 2a + 3
  const Tensor a = Tensor::from({3}, {1.0, -2.0, 0.5}, true);
  backward(sum(add(mul(a, a), scale(a, 3.0))));
  const auto g = a.grad();
  EXPECT_DOUBLE_EQ(g[0], 5.0);
  EXPECT_DOUBLE_EQ(g[1], -1.0);
  EXPECT_DOUBLE_EQ(g[2], 4.0);
}

TEST(Tensor, ShapeMismatchThrows) {
  EXPECT_THROW(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), ShapeError);
  EXPECT_THROW(add(Tensor::zeros({2, 3}), Tensor::zeros({3, 2})), ShapeError);
  EXPECT_THROW(reshape(Tensor::zeros({2, 3}), {4, 2}), ShapeError);
}

TEST(Tensor, DeepChainReleasesWithoutRecursion) {
  Tensor x = Tensor::scalar(1.0, true);
  Tensor y = x;
  for (int i = 0; i < 200000; ++i) y = affine(y, 1.0, 0.0);
  backward(y);
  EXPECT_DOUBLE_EQ(x.grad()[0], 1.0);
  y = Tensor();
}
