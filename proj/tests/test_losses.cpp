#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "common.hpp"

using namespace pden;
using pden::test::small_arch;

namespace {

Var rows(std::initializer_list<std::initializer_list<double>> r) { return Var::constant(Tensor::from_rows(r)); }

Tensor unit_rows(Rng& r, std::size_t n, std::size_t d) {
  Tensor t = r.normal_tensor(Shape{n, d});
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += t.at(i, j) * t.at(i, j);
    for (std::size_t j = 0; j < d; ++j) t.at(i, j) /= std::sqrt(s);
  }
  return t;
}

/// Brute-force InfoNCE over explicit loops.
double nce_oracle(const Tensor& z) {
  const std::size_t n = z.dim(0), d = z.dim(1);
  auto dot = [&](std::size_t a, std::size_t b) {
    double s = 0.0;
    for (std::size_t k = 0; k < d; ++k) s += z.at(a, k) * z.at(b, k);
    return s;
  };
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double den = 0.0;
    for (std::size_t j = 0; j < n; ++j)
      if (j != i) den += std::exp(dot(i, j));
    total += -std::log(std::exp(dot(i, (i + n / 2) % n)) / den);
  }
  return total / static_cast<double>(n);
}

double grad_norm(const ParamList& ps) {
  double s = 0.0;
  for (const auto& p : ps)
    for (double v : p.var.grad().data()) s += v * v;
  return std::sqrt(s);
}

struct Fixture {
  Architecture arch = small_arch(3, 12);
  Rng rng{21};
  TaskModel model{arch, rng};
  Generator gen{arch, rng};
  CycleGenerator cyc{arch, rng};
  Tensor x = rng.uniform_tensor(Shape{4, 1, 12, 12}, 0.0, 1.0);
  std::vector<std::size_t> y{0, 1, 2, 1};
};

}  // namespace

// ---------------------------------------------------------------- cross entropy

TEST(CrossEntropy, Oracles) {
  Var one_hot = rows({{0, 1, 0}});
  std::vector<std::size_t> l1{1};
  EXPECT_NEAR(cross_entropy(one_hot, l1).item(), 0.0, 1e-15);

  Var uniform = Var::constant(Tensor(Shape{2, 10}, 0.1));
  std::vector<std::size_t> l2{3, 7};
  EXPECT_NEAR(cross_entropy(uniform, l2).item(), std::log(10.0), 1e-12);
  EXPECT_NEAR(std::log(10.0), 2.302585, 1e-6);

  Var quarter = rows({{0.25, 0.75}});
  std::vector<std::size_t> l3{0};
  EXPECT_NEAR(cross_entropy(quarter, l3).item(), std::log(4.0), 1e-12);
  EXPECT_NEAR(std::log(4.0), 1.386294, 1e-6);
}

TEST(CrossEntropy, ZeroProbabilityIsClamped) {
  std::vector<std::size_t> l{0};
  EXPECT_NEAR(cross_entropy(rows({{0, 1}}), l).item(), -std::log(kProbabilityFloor), 1e-9);
}

TEST(CrossEntropy, LabelOutOfRangeThrows) {
  std::vector<std::size_t> l{2};
  EXPECT_ANY_THROW(cross_entropy(rows({{0.5, 0.5}}), l));
  std::vector<std::size_t> l2{0, 1};
  EXPECT_ANY_THROW(cross_entropy(rows({{0.5, 0.5}}), l2));
}

// -------------------------------------------------------------------- info_nce

TEST(InfoNce, SinglePairIsZero) {
  EXPECT_NEAR(info_nce(rows({{1, 0}, {0, 1}})).item(), 0.0, 1e-15);
}

TEST(InfoNce, IdenticalEmbeddings) {
  for (std::size_t n2 : {4u, 8u, 16u}) {
    Var z = Var::constant(Tensor(Shape{n2, 2}, std::vector<double>(2 * n2, std::sqrt(0.5))));
    EXPECT_NEAR(info_nce(z).item(), std::log(static_cast<double>(n2 - 1)), 1e-9) << n2;
  }
  EXPECT_NEAR(std::log(3.0), 1.098612, 1e-6);
}

TEST(InfoNce, OrthogonalNegatives) {
  Var z = rows({{1, 0}, {0, 1}, {1, 0}, {0, 1}});
  const double oracle = nce_oracle(z.value());
  EXPECT_NEAR(oracle, std::log(std::numbers::e + 2.0) - 1.0, 1e-12);
  EXPECT_NEAR(oracle, 0.552, 1e-3);
  EXPECT_NEAR(info_nce(z).item(), oracle, 1e-12);
}

TEST(InfoNce, MatchesBruteForceAndIsNonnegative) {
  Rng r(3);
  for (int t = 0; t < 50; ++t) {
    const std::size_t n = 2 * (2 + r.below(6));
    Tensor z = unit_rows(r, n, 1 + r.below(5));
    const double v = info_nce(Var::constant(z)).item();
    EXPECT_NEAR(v, nce_oracle(z), 1e-10);
    EXPECT_GE(v, 0.0);
  }
}

TEST(InfoNce, PairPermutationInvariant) {
  Rng r(4);
  Tensor z = unit_rows(r, 8, 3);
  std::vector<std::size_t> perm{2, 0, 3, 1};
  Tensor p(z.shape());
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 3; ++j) {
      p.at(i, j) = z.at(perm[i], j);
      p.at(i + 4, j) = z.at(perm[i] + 4, j);
    }
  EXPECT_NEAR(info_nce(Var::constant(z)).item(), info_nce(Var::constant(p)).item(), 1e-12);
}

TEST(InfoNce, RejectsNonUnitRows) {
  EXPECT_ANY_THROW(info_nce(rows({{1, 0}, {0, 2}})));
  EXPECT_ANY_THROW(info_nce(rows({{1, 0}, {0, 1}, {1, 0}})));
}

TEST(InfoNce2, IdenticalEmbeddings) {
  for (std::size_t n2 : {4u, 8u, 16u}) {
    const double n = static_cast<double>(n2);
    Var z = Var::constant(Tensor(Shape{n2, 2}, std::vector<double>(2 * n2, std::sqrt(0.5))));
    EXPECT_NEAR(info_nce2(z).item(), n * std::log((n - 2.0) / (n - 1.0)), 1e-9) << n2;
  }
  EXPECT_NEAR(4.0 * std::log(2.0 / 3.0), -1.621860, 1e-6);
}

TEST(InfoNce2, NeverPositiveAndFiniteAtSinglePair) {
  Rng r(5);
  for (int t = 0; t < 50; ++t) {
    const std::size_t n = 2 * (2 + r.below(6));
    EXPECT_LE(info_nce2(Var::constant(unit_rows(r, n, 3))).item(), 0.0);
  }
  EXPECT_TRUE(std::isfinite(info_nce2(rows({{1, 0}, {0, 1}})).item()));
}

TEST(InfoNce2, OppositePositiveMatchesOracle) {
  // Positives opposite, aligned negatives.
  Tensor z(Shape{8, 1});
  for (std::size_t i = 0; i < 4; ++i) {
    z[i] = 1.0;
    z[i + 4] = -1.0;
  }
  const double v = info_nce2(Var::constant(z)).item();
  const double e = std::exp(1.0);
  EXPECT_NEAR(v, 8.0 * std::log(1.0 - (1.0 / e) / (3.0 * e + 4.0 / e)), 1e-12);
  EXPECT_LT(v, 0.0);
}

// -------------------------------------------------------------------- loss_src

TEST(LossSrc, NonnegativeAndBreakdown) {
  Fixture f;
  PairedBatch b{f.x, f.rng.uniform_tensor(f.x.shape(), 0.0, 1.0), f.y};
  auto l = loss_src(b, f.model);
  EXPECT_GE(l.total.item(), 0.0);
  EXPECT_NEAR(l.total.item(), l.ce + l.nce, 1e-12);
}

// ------------------------------------------------------------------- loss_adv

TEST(LossAdv, IdenticalEmbeddingValues) {
  Fixture f;
  // Zero projection weights make every embedding the normalized bias.
  for (auto& p : f.model.projection_params()) {
    p.var.mutable_value().fill(p.name.ends_with("bias") ? 1.0 : 0.0);
  }
  Var x = Var::constant(slice_rows(f.x, 0, 2));
  Var xhat = f.gen(x, Var::constant(f.gen.sample_noise(f.rng, 2)));
  auto adv = loss_adv(x, xhat, f.model);
  EXPECT_NEAR(adv.generator_term.item(), -4.0 * std::log(2.0 / 3.0), 1e-9);
  EXPECT_NEAR(adv.generator_term.item(), 1.621860, 1e-6);
  EXPECT_NEAR(adv.task_term.item(), std::log(3.0), 1e-9);
}

TEST(LossAdv, GeneratorTermNonnegative) {
  Fixture f;
  Var x = Var::constant(f.x);
  Var xhat = f.gen(x, Var::constant(f.gen.sample_noise(f.rng, 4)));
  EXPECT_GE(loss_adv(x, xhat, f.model).generator_term.item(), 0.0);
}

TEST(LossAdv, StopGradientPartition) {
  Fixture f;
  ParamList gp = f.gen.params(), mp = f.model.params();
  Var x = Var::constant(f.x);
  Tensor n = f.gen.sample_noise(f.rng, 4);
  {
    Var xhat = f.gen(x, Var::constant(n));
    backward(loss_adv(x, xhat, f.model).task_term);
    for (const auto& p : gp)
      for (double v : p.var.grad().data()) ASSERT_EQ(v, 0.0) << p.name;
    EXPECT_GT(grad_norm(f.model.feature_params()), 0.0);
    EXPECT_GT(grad_norm(f.model.projection_params()), 0.0);
  }
  zero_grad(gp);
  zero_grad(mp);
  {
    Var xhat = f.gen(x, Var::constant(n));
    backward(loss_adv(x, xhat, f.model).generator_term);
    for (const auto& p : mp)
      for (double v : p.var.grad().data()) ASSERT_EQ(v, 0.0) << p.name;
    EXPECT_GT(grad_norm(gp), 0.0);
  }
}

TEST(LossAdv, ReferenceTermGradientGrowsAtSmallFraction) {
  // d/dz of -info_nce (reference) versus -info_nce2 (used), per anchor scale.
  auto ratio = [](Tensor raw) {
    Var a = Var::parameter(raw), b = Var::parameter(raw);
    backward(neg(info_nce(l2_normalize(a))));
    backward(neg(info_nce2(l2_normalize(b))));
    const double n = static_cast<double>(raw.dim(0));
    double ga = 0.0, gb = 0.0;
    for (double v : a.grad().data()) ga += v * v;
    for (double v : b.grad().data()) gb += v * v;
    return n * std::sqrt(ga) / std::sqrt(gb);
  };
  // Positives nearly opposite, negatives aligned: small fraction.
  const double small = ratio(Tensor::from_rows({{1, 0.1}, {1, -0.1}, {-1, 0.2}, {-1, -0.2}}));
  // Positives aligned, negatives opposite: fraction near 1.
  const double large = ratio(Tensor::from_rows({{1, 0.1}, {-1, 0.1}, {1, -0.2}, {-1, -0.2}}));
  EXPECT_GT(small, 1.0);
  EXPECT_GT(small, large);
}

// ------------------------------------------------------------- cyc, div, cls

TEST(LossCyc, NonnegativeAndShapeChecked) {
  Fixture f;
  Var x = Var::constant(f.x);
  Var xhat = f.gen(x, Var::constant(f.gen.sample_noise(f.rng, 4)));
  EXPECT_GE(loss_cyc(x, xhat, f.cyc).item(), 0.0);
  EXPECT_ANY_THROW(loss_cyc(Var::constant(slice_rows(f.x, 0, 2)), xhat, f.cyc));
}

TEST(LossCls, Nonnegative) {
  Fixture f;
  Var xhat = f.gen(Var::constant(f.x), Var::constant(f.gen.sample_noise(f.rng, 4)));
  EXPECT_GE(loss_cls(xhat, f.y, f.model).item(), 0.0);
}

TEST(LossDiv, IdenticalOutputsGiveZero) {
  Tensor a(Shape{3, 1, 4, 4}, 0.3);
  EXPECT_DOUBLE_EQ(loss_div(Var::constant(a), Var::constant(a)).item(), 0.0);
}

TEST(LossDiv, ClampBound) {
  Rng r(6);
  for (int t = 0; t < 20; ++t) {
    Tensor a = r.uniform_tensor(Shape{3, 1, 4, 4}, 0.0, 1.0);
    Tensor b = r.uniform_tensor(Shape{3, 1, 4, 4}, 0.0, 1.0);
    const double ceiling = 0.05 + 0.5 * r.uniform();
    const double v = loss_div(Var::constant(a), Var::constant(b), ceiling).item();
    EXPECT_LE(v, 0.0);
    EXPECT_LE(-v, ceiling * 4.0 + 1e-12);
    const double off = loss_div(Var::constant(a), Var::constant(b), 0.0).item();
    EXPECT_LE(off, v + 1e-12);
  }
}

TEST(LossDiv, ShapeMismatchThrows) {
  EXPECT_THROW(loss_div(Var::constant(Tensor(Shape{2, 4})), Var::constant(Tensor(Shape{3, 4}))),
               ShapeError);
}

// ----------------------------------------------------------------- loss_unseen

TEST(LossUnseen, ZeroWeightsEqualsLossCls) {
  Fixture f;
  auto noise = draw_unseen_noise(f.gen, 4, f.rng);
  auto u = loss_unseen(f.x, f.y, f.model, f.gen, f.cyc, LossWeights{0.0, 0.0, 0.0}, noise);
  Var xhat = f.gen(Var::constant(f.x), Var::constant(noise.n1));
  EXPECT_DOUBLE_EQ(u.total.item(), loss_cls(xhat, f.y, f.model).item());
}

TEST(LossUnseen, BreakdownSumsToTotal) {
  Fixture f;
  const LossWeights w{20.0, 0.7, 0.3};
  auto u = loss_unseen(f.x, f.y, f.model, f.gen, f.cyc, w, f.rng);
  const double sum = u.cls + w.w_cyc * u.cyc + w.w_adv * (u.adv_generator + u.adv_task) + w.w_div * u.div;
  EXPECT_NEAR(u.total.item(), sum, 1e-12);
  EXPECT_NE(u.cyc, 0.0);
  EXPECT_NE(u.div, 0.0);
}

TEST(LossUnseen, FiniteOverRandomConfigs) {
  Rng r(7);
  for (int t = 0; t < 100; ++t) {
    Rng init(derive_seed(7, "unseen", static_cast<std::uint64_t>(t)));
    const auto a = small_arch(2 + init.below(3), 16);
    TaskModel m(a, init);
    Generator g(a, init);
    CycleGenerator c(a, init);
    const std::size_t n = 2 + init.below(3);
    Tensor x = init.uniform_tensor(Shape{n, 1, 16, 16}, 0.0, 1.0);
    std::vector<std::size_t> y(n);
    for (auto& v : y) v = init.below(a.classes);
    const LossWeights w{init.uniform(0, 30), init.uniform(0, 2), init.uniform(0, 2)};
    auto u = loss_unseen(x, y, m, g, c, w, init);
    ASSERT_TRUE(std::isfinite(u.total.item())) << t;
    ParamList ps = g.params();
    backward(u.total);
    ASSERT_TRUE(grads_finite(ps)) << t;
  }
}

TEST(LossUnseen, NegativeWeightRejected) {
  Fixture f;
  EXPECT_ANY_THROW(loss_unseen(f.x, f.y, f.model, f.gen, f.cyc, LossWeights{-1.0, 0.0, 0.0}, f.rng));
}
