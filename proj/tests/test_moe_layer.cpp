#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "moelab/moe_layer.hpp"

namespace {

using moelab::Matrix;
using moelab::MoeParams;

/// One-feature router whose logits for x = 1 are log(probs).
MoeParams params_with_probs(std::vector<double> probs, std::size_t k) {
  MoeParams p;
  p.router = Matrix(1, probs.size());
  for (std::size_t j = 0; j < probs.size(); ++j) p.router(0, j) = std::log(probs[j]);
  for (std::size_t j = 0; j < probs.size(); ++j) p.experts.emplace_back(1, 1, 1.0);
  p.k = k;
  return p;
}

MoeParams random_params(moelab::Rng& rng, std::size_t d, std::size_t d_out, std::size_t n,
                        std::size_t k) {
  MoeParams p;
  p.router = gaussian_sample(rng, d, n, 0.0, 1.0);
  for (std::size_t j = 0; j < n; ++j) p.experts.push_back(gaussian_sample(rng, d, d_out, 0.0, 1.0));
  p.k = k;
  return p;
}

TEST(Route, RenormalizesTopTwo) {
  const auto st = route(params_with_probs({0.5, 0.3, 0.2}, 2), Matrix{{1.0}});
  EXPECT_EQ(st.selected[0], (std::vector<std::size_t>{0, 1}));
  EXPECT_NEAR(st.scores(0, 0), 0.625, 1e-12);
  EXPECT_NEAR(st.scores(0, 1), 0.375, 1e-12);
  EXPECT_EQ(st.scores(0, 2), 0.0);
}

TEST(Route, FullSelectionReproducesProbs) {
  moelab::Rng rng(5);
  const auto params = random_params(rng, 4, 2, 5, 5);
  const Matrix x = gaussian_sample(rng, 7, 4, 0.0, 1.0);
  const auto st = route(params, x);
  for (std::size_t e = 0; e < st.probs.size(); ++e)
    EXPECT_NEAR(st.scores.data()[e], st.probs.data()[e], 1e-15);
}

TEST(Route, TiesGoToLowerIndex) {
  const auto st = route(params_with_probs({0.4, 0.4, 0.2}, 1), Matrix{{1.0}});
  EXPECT_EQ(st.selected[0], (std::vector<std::size_t>{0}));
}

TEST(Route, Errors) {
  auto p = params_with_probs({0.5, 0.5}, 3);
  EXPECT_THROW(route(p, Matrix{{1.0}}), moelab::DimensionError);
  p.k = 1;
  EXPECT_THROW(route(p, Matrix{{1.0, 2.0}}), moelab::DimensionError);
}

TEST(Route, StateInvariantsOnRandomInstances) {
  moelab::Rng rng(17);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t n = 2 + rng.next_u64() % 6;
    const std::size_t k = 1 + rng.next_u64() % n;
    const std::size_t N = 1 + rng.next_u64() % 20;
    const auto params = random_params(rng, 3, 2, n, k);
    const auto st = route(params, gaussian_sample(rng, N, 3, 0.0, 2.0));
    double p_total = 0.0, f_total = 0.0;
    for (std::size_t i = 0; i < N; ++i) {
      auto pr = st.probs.row(i);
      auto sc = st.scores.row(i);
      EXPECT_NEAR(std::accumulate(pr.begin(), pr.end(), 0.0), 1.0, 1e-12);
      EXPECT_NEAR(std::accumulate(sc.begin(), sc.end(), 0.0), 1.0, 1e-12);
      std::size_t nonzero = 0;
      for (std::size_t j = 0; j < n; ++j) {
        const bool in_set = std::find(st.selected[i].begin(), st.selected[i].end(), j) !=
                            st.selected[i].end();
        EXPECT_EQ(sc[j] != 0.0, in_set);
        nonzero += sc[j] != 0.0 ? 1 : 0;
      }
      EXPECT_EQ(nonzero, k);
    }
    for (std::size_t j = 0; j < n; ++j) {
      const double count = st.loads_f[j] * static_cast<double>(N);
      EXPECT_NEAR(count, std::round(count), 1e-9);
      f_total += st.loads_f[j];
      p_total += st.loads_p[j];
    }
    EXPECT_NEAR(f_total, static_cast<double>(k), 1e-12);
    EXPECT_NEAR(p_total, static_cast<double>(N), 1e-9);
  }
}

TEST(Forward, SingleExpertIsPlainLinearMap) {
  moelab::Rng rng(9);
  auto params = random_params(rng, 3, 2, 1, 1);
  const Matrix x = gaussian_sample(rng, 4, 3, 0.0, 1.0);
  const auto st = route(params, x);
  const auto out = forward(params, x, st);
  EXPECT_EQ(out.combined, matmul(x, params.experts[0]));
}

TEST(Forward, HandEvaluatedMixture) {
  MoeParams p;
  p.router = Matrix(1, 2);  // equal logits -> scores 0.5, 0.5
  p.experts = {Matrix{{3.0}}, Matrix{{5.0}}};
  p.k = 2;
  const Matrix x{{2.0}};
  const auto out = forward(p, x, route(p, x));
  EXPECT_DOUBLE_EQ(out.combined(0, 0), 8.0);
  ASSERT_EQ(out.per_token[0].size(), 2u);
  EXPECT_DOUBLE_EQ(out.per_token[0][0].value[0], 6.0);
  EXPECT_DOUBLE_EQ(out.per_token[0][1].value[0], 10.0);
}

TEST(Forward, ZeroTokenGivesZeroOutputs) {
  moelab::Rng rng(2);
  const auto params = random_params(rng, 3, 2, 4, 2);
  const Matrix x(1, 3);
  const auto out = forward(params, x, route(params, x));
  for (const auto& so : out.per_token[0])
    for (double v : so.value) EXPECT_EQ(v, 0.0);
  for (double v : out.combined.data()) EXPECT_EQ(v, 0.0);
}

TEST(Forward, OnlySelectedExpertsAppearAndMixMatches) {
  moelab::Rng rng(21);
  const auto params = random_params(rng, 5, 3, 6, 2);
  const Matrix x = gaussian_sample(rng, 10, 5, 0.0, 1.0);
  const auto st = route(params, x);
  const auto out = forward(params, x, st);
  for (std::size_t i = 0; i < 10; ++i) {
    ASSERT_EQ(out.per_token[i].size(), 2u);
    std::vector<double> y(3, 0.0);
    for (const auto& so : out.per_token[i]) {
      EXPECT_GT(st.scores(i, so.expert), 0.0);
      for (std::size_t c = 0; c < 3; ++c) y[c] += so.score * so.value[c];
    }
    for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(out.combined(i, c), y[c], 1e-12);
  }
}

TEST(Forward, TauGateMarksInactiveOutputs) {
  const auto p = params_with_probs({0.5, 0.3, 0.2}, 2);
  const Matrix x{{1.0}};
  const auto out = forward(p, x, route(p, x), 0.5);
  EXPECT_TRUE(out.per_token[0][0].active);   // 0.625
  EXPECT_FALSE(out.per_token[0][1].active);  // 0.375
}

TEST(Forward, PermutingTokensPermutesRows) {
  moelab::Rng rng(33);
  const auto params = random_params(rng, 4, 3, 5, 2);
  const Matrix x = gaussian_sample(rng, 6, 4, 0.0, 1.0);
  const std::vector<std::size_t> perm{3, 0, 5, 1, 4, 2};
  Matrix xp(6, 4);
  for (std::size_t i = 0; i < 6; ++i)
    std::copy(x.row(perm[i]).begin(), x.row(perm[i]).end(), xp.row(i).begin());
  const auto st = route(params, x);
  const auto stp = route(params, xp);
  const auto out = forward(params, x, st);
  const auto outp = forward(params, xp, stp);
  for (std::size_t i = 0; i < 6; ++i) {
    for (std::size_t j = 0; j < 5; ++j) EXPECT_EQ(stp.scores(i, j), st.scores(perm[i], j));
    for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(outp.combined(i, c), out.combined(perm[i], c));
  }
}

}  // namespace
