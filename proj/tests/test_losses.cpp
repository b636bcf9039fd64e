#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "moelab/losses.hpp"
#include "test_helpers.hpp"

namespace {

using moelab::AuxNormalization;
using moelab::LossWeights;
using moelab::Matrix;
using moelab::testing::single_token_outputs;
using moelab::testing::state_from_scores;

TEST(TaskLoss, Examples) {
  const Matrix y{{1.0, -2.0}, {0.5, 3.0}};
  EXPECT_EQ(moelab::task_loss(y, y), 0.0);
  EXPECT_DOUBLE_EQ(moelab::task_loss(Matrix{{0.0, 0.0}}, Matrix{{3.0, 4.0}}), 12.5);
  const Matrix t{{0.0, 1.0}, {2.0, -1.0}};
  Matrix doubled = t;
  for (std::size_t e = 0; e < t.size(); ++e)
    doubled.data()[e] = t.data()[e] + 2.0 * (y.data()[e] - t.data()[e]);
  EXPECT_NEAR(moelab::task_loss(doubled, t), 4.0 * moelab::task_loss(y, t), 1e-12);
  EXPECT_THROW(moelab::task_loss(Matrix(1, 2), Matrix(2, 1)), moelab::DimensionError);
}

TEST(AuxLoss, PerfectBalance) {
  // N=4, n=4, k=2: each expert picked by two tokens with score 1/2.
  const Matrix s{{0.5, 0.5, 0, 0}, {0, 0.5, 0.5, 0}, {0, 0, 0.5, 0.5}, {0.5, 0, 0, 0.5}};
  const auto st = state_from_scores(s);
  EXPECT_NEAR(moelab::aux_loss(st, AuxNormalization::Switch), 1.0, 1e-12);
  // kN/n = 2
  EXPECT_NEAR(moelab::aux_loss(st, AuxNormalization::Paper), 2.0, 1e-12);
}

TEST(AuxLoss, CollapseOntoOneExpert) {
  const std::size_t n = 5;
  Matrix s(6, n);
  for (std::size_t i = 0; i < 6; ++i) s(i, 2) = 1.0;
  EXPECT_NEAR(moelab::aux_loss(state_from_scores(s), AuxNormalization::Switch),
              static_cast<double>(n), 1e-12);
}

TEST(AuxLoss, SwitchFormIsAtLeastOneOverAllSupports) {
  // N=4, n=2, k=1: enumerate all 16 assignments.
  double best = 1e9;
  for (unsigned mask = 0; mask < 16; ++mask) {
    Matrix s(4, 2);
    int ones = 0;
    for (std::size_t i = 0; i < 4; ++i) {
      const bool second = (mask >> i) & 1u;
      s(i, second ? 1 : 0) = 1.0;
      ones += second ? 1 : 0;
    }
    const double v = moelab::aux_loss(state_from_scores(s), AuxNormalization::Switch);
    EXPECT_GE(v, 1.0 - 1e-12);
    if (ones == 2) EXPECT_NEAR(v, 1.0, 1e-12);
    else EXPECT_GT(v, 1.0 + 1e-9);
    best = std::min(best, v);
  }
  EXPECT_NEAR(best, 1.0, 1e-12);
}

TEST(OrthoLoss, OrthogonalOutputsGiveZero) {
  EXPECT_EQ(moelab::ortho_loss(single_token_outputs({{1, 0}, {0, 1}}), 1e-8), 0.0);
}

TEST(OrthoLoss, IdenticalOutputsGiveFullProjection) {
  const double eps = 1e-8;
  const double expected = std::pow(1.0 / (1.0 + eps), 2);
  EXPECT_NEAR(moelab::ortho_loss(single_token_outputs({{1, 0}, {1, 0}}), eps), expected, 1e-15);
}

TEST(OrthoLoss, ZeroVectorContributesNothing) {
  // terms: (j=0,k=1) projects onto the zero vector, (j=1,k=0) projects zero.
  EXPECT_EQ(moelab::ortho_loss(single_token_outputs({{0, 0}, {3, 4}}), 1e-8), 0.0);
}

TEST(OrthoLoss, InactiveOutputsAreSkipped) {
  auto out = single_token_outputs({{1, 0}, {1, 0}, {1, 1}});
  out.per_token[0][2].active = false;
  EXPECT_NEAR(moelab::ortho_loss(out, 1e-8), 1.0, 1e-7);
}

TEST(OrthoLoss, MatchesDirectSumOfProjections) {
  // Three outputs, six ordered pairs, computed by hand from the definition.
  const std::vector<std::vector<double>> v{{1, 2}, {-1, 0.5}, {3, -1}};
  const double eps = 1e-3;
  double sum = 0.0;
  for (std::size_t j = 0; j < 3; ++j)
    for (std::size_t k = 0; k < 3; ++k) {
      if (j == k) continue;
      const double inner = v[j][0] * v[k][0] + v[j][1] * v[k][1];
      const double q = v[k][0] * v[k][0] + v[k][1] * v[k][1];
      const double c = inner / (q + eps);
      sum += c * c * q;
    }
  EXPECT_NEAR(moelab::ortho_loss(single_token_outputs(v), eps), sum / 6.0, 1e-14);
}

TEST(OrthoLoss, InvariantUnderCommonRotation) {
  moelab::Rng rng(8);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<std::vector<double>> v(3, std::vector<double>(2));
    for (auto& x : v)
      for (double& c : x) c = rng.normal();
    const double angle = 2.0 * std::numbers::pi * rng.uniform();
    auto rotated = v;
    for (auto& x : rotated) {
      const double a = x[0], b = x[1];
      x[0] = std::cos(angle) * a - std::sin(angle) * b;
      x[1] = std::sin(angle) * a + std::cos(angle) * b;
    }
    EXPECT_NEAR(moelab::ortho_loss(single_token_outputs(v), 1e-8),
                moelab::ortho_loss(single_token_outputs(rotated), 1e-8), 1e-12);
  }
}

TEST(OrthoLoss, ZeroExactlyWhenPairwiseOrthogonal) {
  moelab::Rng rng(19);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> a{rng.normal(), rng.normal()};
    std::vector<double> b{-a[1], a[0]};
    const double s = rng.normal();
    for (double& x : b) x *= s;
    EXPECT_LE(moelab::ortho_loss(single_token_outputs({a, b}), 1e-8), 1e-18);
    std::vector<double> c{b[0] + 0.1 * a[0], b[1] + 0.1 * a[1]};
    EXPECT_GT(moelab::ortho_loss(single_token_outputs({a, c}), 1e-8), 1e-9);
  }
}

TEST(VarianceLoss, Examples) {
  EXPECT_EQ(moelab::variance_loss(state_from_scores(Matrix{{0.3, 0.7}, {0.3, 0.7}})), 0.0);
  const Matrix eye{{1, 0}, {0, 1}};
  EXPECT_NEAR(moelab::variance_loss(state_from_scores(eye)), -0.5, 1e-15);
  const Matrix twice{{1, 0}, {0, 1}, {1, 0}, {0, 1}};
  EXPECT_NEAR(moelab::variance_loss(state_from_scores(twice)), -1.0, 1e-15);
}

TEST(VarianceLoss, NegativeUnlessColumnsConstant) {
  moelab::Rng rng(4);
  for (int trial = 0; trial < 100; ++trial) {
    Matrix s(5, 3);
    for (std::size_t i = 0; i < 5; ++i) {
      const double a = rng.uniform();
      s(i, 0) = a;
      s(i, 1) = 1.0 - a;
    }
    EXPECT_LT(moelab::variance_loss(state_from_scores(s)), 0.0);
  }
}

TEST(Combine, AllWeightsZeroGivesTaskLoss) {
  LossWeights w;
  w.alpha = w.beta = w.gamma = 0.0;
  EXPECT_EQ(moelab::combine(1.25, 3.0, 4.0, -2.0, w).total, 1.25);
}

TEST(Combine, StaticScalesSumTerms) {
  LossWeights w;
  w.alpha = w.beta = w.gamma = 1.0;
  w.dynamic_scaling = false;
  const auto b = moelab::combine(1.0, 2.0, 3.0, -1.0, w);
  EXPECT_DOUBLE_EQ(b.total, 5.0);
  EXPECT_EQ(b.scale_o, 1.0);
  EXPECT_EQ(b.scale_v, 1.0);
}

TEST(Combine, DynamicScalingMatchesAuxMagnitude) {
  LossWeights w;
  w.alpha = w.beta = w.gamma = 0.5;
  const auto b = moelab::combine(0.0, 1.0, 0.01, -4.0, w);
  EXPECT_NEAR(b.scale_o, 100.0, 1e-6);
  EXPECT_NEAR(b.scale_v, 0.25, 1e-12);
  EXPECT_NEAR(w.beta * b.scale_o * b.l_o, w.beta, 1e-9);
}

TEST(Combine, DynamicScalesAreSmoothedAgainstPrevious) {
  LossWeights w;
  const auto b = moelab::combine(0.0, 1.0, 0.5, -0.25, w, moelab::ScalePair{10.0, 20.0});
  EXPECT_NEAR(b.scale_o, 0.9 * 10.0 + 0.1 * 2.0, 1e-9);
  EXPECT_NEAR(b.scale_v, 0.9 * 20.0 + 0.1 * 4.0, 1e-9);
}

TEST(Combine, LinearInEachTermForFixedScales) {
  LossWeights w;
  w.alpha = 0.3;
  w.beta = 0.7;
  w.gamma = 1.1;
  const moelab::ScalePair sc{2.0, 0.5};
  const auto base = moelab::combine_with_scales(1.0, 2.0, 3.0, -4.0, w, sc);
  const auto bumped = moelab::combine_with_scales(1.0, 2.0, 3.0 + 1.0, -4.0, w, sc);
  EXPECT_NEAR(bumped.total - base.total, w.beta * sc.ortho, 1e-12);
  const auto bumped_v = moelab::combine_with_scales(1.0, 2.0, 3.0, -4.0 + 2.0, w, sc);
  EXPECT_NEAR(bumped_v.total - base.total, 2.0 * w.gamma * sc.variance, 1e-12);
}

TEST(Combine, NonFiniteInputThrows) {
  EXPECT_THROW(moelab::combine(NAN, 0, 0, 0, LossWeights{}), moelab::NonFiniteError);
}

TEST(LossWeights, Validation) {
  LossWeights w;
  w.eps_norm = 0.0;
  EXPECT_THROW(w.validate(), std::invalid_argument);
  w.eps_norm = 1e-8;
  w.beta = -1.0;
  EXPECT_THROW(w.validate(), std::invalid_argument);
}

}  // namespace
