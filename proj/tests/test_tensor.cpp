#include <gtest/gtest.h>

#include <limits>

#include <cmath>
#include <set>

#include "common.hpp"

using namespace pden;

TEST(Tensor, ShapeAndFill) {
  Tensor t(Shape{2, 3}, 1.5);
  EXPECT_EQ(t.size(), 6u);
  EXPECT_EQ(t.rank(), 2u);
  EXPECT_DOUBLE_EQ(t.sum(), 9.0);
  EXPECT_THROW(Tensor(Shape{2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
}

TEST(Tensor, FromRowsAndAt) {
  Tensor t = Tensor::from_rows({{1, 2, 3}, {4, 5, 6}});
  EXPECT_EQ(t.shape(), (Shape{2, 3}));
  EXPECT_DOUBLE_EQ(t.at(1, 2), 6.0);
  EXPECT_THROW(Tensor::from_rows({{1, 2}, {3}}), ShapeError);
}

TEST(Tensor, ItemRequiresScalar) {
  EXPECT_DOUBLE_EQ(Tensor::scalar(4.0).item(), 4.0);
  EXPECT_ANY_THROW(Tensor(Shape{2}).item());
}

TEST(Tensor, ReshapePreservesData) {
  Tensor t = Tensor::from_rows({{1, 2}, {3, 4}});
  Tensor r = t.reshaped(Shape{4});
  EXPECT_EQ(r.values(), t.values());
  EXPECT_THROW(t.reshaped(Shape{3}), ShapeError);
}

TEST(Tensor, RowHelpers) {
  Tensor t = Tensor::from_rows({{1, 2}, {3, 4}, {5, 6}});
  EXPECT_EQ(slice_rows(t, 1, 3).values(), (std::vector<double>{3, 4, 5, 6}));
  std::vector<std::size_t> idx{2, 0};
  EXPECT_EQ(gather_rows(t, idx).values(), (std::vector<double>{5, 6, 1, 2}));
  Tensor c = concat_rows(t, t);
  EXPECT_EQ(c.dim(0), 6u);
  EXPECT_DOUBLE_EQ(c.at(3, 0), 1.0);
}

TEST(Tensor, AllFinite) {
  Tensor t(Shape{2}, 0.0);
  EXPECT_TRUE(t.all_finite());
  t[1] = NAN;
  EXPECT_FALSE(t.all_finite());
}

TEST(Rng, Deterministic) {
  Rng a(42), b(42), c(43);
  bool differs = false;
  for (int i = 0; i < 100; ++i) {
    const auto x = a.next_u64();
    EXPECT_EQ(x, b.next_u64());
    differs |= x != c.next_u64();
  }
  EXPECT_TRUE(differs);
}

TEST(Rng, UniformRangeAndMoments) {
  Rng r(1);
  double s = 0.0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const double u = r.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    s += u;
  }
  EXPECT_NEAR(s / n, 0.5, 0.01);
}

TEST(Rng, NormalMoments) {
  Rng r(2);
  double s = 0.0, s2 = 0.0;
  const int n = 40000;
  for (int i = 0; i < n; ++i) {
    const double z = r.normal();
    s += z;
    s2 += z * z;
  }
  EXPECT_NEAR(s / n, 0.0, 0.02);
  EXPECT_NEAR(s2 / n, 1.0, 0.03);
}

TEST(Rng, BelowCoversRange) {
  Rng r(3);
  std::set<std::uint64_t> seen;
  for (int i = 0; i < 1000; ++i) {
    const auto v = r.below(7);
    ASSERT_LT(v, 7u);
    seen.insert(v);
  }
  EXPECT_EQ(seen.size(), 7u);
}

TEST(Rng, DeriveSeedSeparatesStreams) {
  EXPECT_EQ(derive_seed(1, "a", 0), derive_seed(1, "a", 0));
  EXPECT_NE(derive_seed(1, "a", 0), derive_seed(1, "b", 0));
  EXPECT_NE(derive_seed(1, "a", 0), derive_seed(1, "a", 1));
  EXPECT_NE(derive_seed(1, "a", 0), derive_seed(2, "a", 0));
}

TEST(Rng, ShuffleIsPermutation) {
  Rng r(4);
  std::vector<int> v(50);
  for (int i = 0; i < 50; ++i) v[i] = i;
  r.shuffle(v.begin(), v.end());
  std::vector<int> sorted = v;
  std::sort(sorted.begin(), sorted.end());
  for (int i = 0; i < 50; ++i) EXPECT_EQ(sorted[i], i);
}

// ------------------------------------------------------------------ optimizers

TEST(Optim, SgdStep) {
  Var p = Var::parameter(Tensor::scalar(1.0));
  ParamList params{{"p", p}};
  backward(sum(p));
  Sgd(SgdOptions{0.1}).step(params);
  EXPECT_NEAR(p.value()[0], 0.9, 1e-15);
}

TEST(Optim, SgdZeroGradLeavesParams) {
  Var p = Var::parameter(Tensor(Shape{3}, 2.0));
  ParamList params{{"p", p}};
  backward(sum(p));
  zero_grad(params);
  Sgd(SgdOptions{0.5}).step(params);
  EXPECT_EQ(p.value().values(), (std::vector<double>{2, 2, 2}));
}

TEST(Optim, AdamFirstStepIsLearningRate) {
  Var p = Var::parameter(Tensor(Shape{2}, std::vector<double>{1.0, -1.0}));
  ParamList params{{"p", p}};
  backward(sum(mul_scalar(p, 3.0)));
  Adam adam(AdamOptions{0.01});
  adam.step(params);
  EXPECT_NEAR(p.value()[0], 1.0 - 0.01, 1e-8);
  EXPECT_NEAR(p.value()[1], -1.0 - 0.01, 1e-8);
}

TEST(Optim, AdamMinimizesQuadratic) {
  Var p = Var::parameter(Tensor(Shape{2}, std::vector<double>{3.0, -2.0}));
  ParamList params{{"p", p}};
  Adam adam(AdamOptions{0.1});
  for (int i = 0; i < 500; ++i) {
    zero_grad(params);
    backward(sum(mul(p, p)));
    adam.step(params);
  }
  EXPECT_NEAR(p.value()[0], 0.0, 1e-2);
  EXPECT_NEAR(p.value()[1], 0.0, 1e-2);
}

TEST(Optim, RejectsNonPositiveLearningRate) {
  EXPECT_THROW(Sgd(SgdOptions{0.0}), std::invalid_argument);
  EXPECT_THROW(Adam(AdamOptions{-1.0}), std::invalid_argument);
}

TEST(Optim, GradsFinite) {
  Var p = Var::parameter(Tensor::scalar(0.0));
  ParamList params{{"p", p}};
  backward(sum(p));
  EXPECT_TRUE(grads_finite(params));
  p.node().grad_buffer()[0] = std::numeric_limits<double>::quiet_NaN();
  EXPECT_FALSE(grads_finite(params));
}

TEST(Init, KaimingVariance) {
  Rng r(5);
  const std::size_t fan_in = 50;
  Tensor w = kaiming_normal(r, Shape{200, fan_in}, fan_in);
  double s2 = 0.0;
  for (double v : w.data()) s2 += v * v;
  const double var = s2 / static_cast<double>(w.size());
  EXPECT_NEAR(var, 2.0 / fan_in, 0.2 * 2.0 / fan_in);
}
