#include <gtest/gtest.h>

#include <cmath>

#include "moelab/lemma_lab.hpp"

namespace {

using moelab::Matrix;
namespace lemma = moelab::lemma;

std::vector<double> column_sums(const Matrix& m) {
  std::vector<double> s(m.cols(), 0.0);
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) s[j] += m(i, j);
  return s;
}

TEST(BalancedSupport, Examples) {
  EXPECT_EQ(lemma::build_balanced_support(2, 2, 2), Matrix(2, 2, 1.0));
  const Matrix perm = lemma::build_balanced_support(4, 4, 1);
  for (double s : column_sums(perm)) EXPECT_EQ(s, 1.0);
  const auto odd = column_sums(lemma::build_balanced_support(3, 2, 1));
  EXPECT_EQ(odd, (std::vector<double>{2.0, 1.0}));
  EXPECT_THROW(lemma::build_balanced_support(3, 2, 3), std::invalid_argument);
}

TEST(BalancedSupport, MarginalsAreAsUniformAsPossible) {
  for (std::size_t N = 1; N <= 9; ++N)
    for (std::size_t n = 1; n <= 8; ++n)
      for (std::size_t k = 1; k <= n; ++k) {
        const Matrix s = lemma::build_balanced_support(N, n, k);
        for (std::size_t i = 0; i < N; ++i) {
          double row = 0.0;
          for (double v : s.row(i)) row += v;
          EXPECT_EQ(row, static_cast<double>(k));
        }
        const double lo = std::floor(static_cast<double>(N * k) / static_cast<double>(n));
        const double hi = std::ceil(static_cast<double>(N * k) / static_cast<double>(n));
        for (double c : column_sums(s)) {
          EXPECT_GE(c, lo);
          EXPECT_LE(c, hi);
        }
      }
}

TEST(FindCycle, FullTwoByTwo) {
  const auto c = lemma::find_cycle(Matrix(2, 2, 1.0));
  ASSERT_TRUE(c.has_value());
  EXPECT_EQ(c->to_string(), "r0-c0-r1-c1");
}

TEST(FindCycle, PermutationSupportIsForest) {
  EXPECT_FALSE(lemma::find_cycle(lemma::build_balanced_support(4, 4, 1)).has_value());
  // Two rows with disjoint column pairs: k = 2 and still no cycle.
  EXPECT_FALSE(lemma::find_cycle(lemma::build_balanced_support(2, 4, 2)).has_value());
}

TEST(FindCycle, FirstCycleFollowsIndexOrder) {
  const auto c = lemma::find_cycle(Matrix(3, 3, 1.0));
  ASSERT_TRUE(c.has_value());
  EXPECT_EQ(c->to_string(), "r0-c0-r1-c1");
}

TEST(FindCycle, ReturnedCycleLiesOnSupport) {
  for (std::size_t N = 2; N <= 8; ++N)
    for (std::size_t n = 2; n <= 8; ++n)
      for (std::size_t k = 2; k <= n; ++k) {
        const Matrix s = lemma::build_balanced_support(N, n, k);
        const auto c = lemma::find_cycle(s);
        if (!c) continue;
        ASSERT_GE(c->length(), 4u);
        ASSERT_EQ(c->length() % 2, 0u);
        for (std::size_t i = 0; i < c->length(); i += 2) {
          const auto& r = c->nodes[i];
          const auto& col = c->nodes[i + 1];
          const auto& next = c->nodes[(i + 2) % c->length()];
          EXPECT_EQ(s(r.index, col.index), 1.0);
          EXPECT_EQ(s(next.index, col.index), 1.0);
        }
      }
}

TEST(PerturbCycle, Examples) {
  const Matrix s0(2, 2, 0.5);
  const auto cycle = *lemma::find_cycle(s0);
  EXPECT_EQ(lemma::perturb_cycle(s0, cycle, 0.25), (Matrix{{0.75, 0.25}, {0.25, 0.75}}));
  EXPECT_EQ(lemma::perturb_cycle(s0, cycle, 0.0), s0);
  const Matrix edge = lemma::perturb_cycle(s0, cycle, 0.5);
  EXPECT_EQ(edge, (Matrix{{1.0, 0.0}, {0.0, 1.0}}));
  EXPECT_THROW(lemma::perturb_cycle(s0, cycle, 0.6), std::invalid_argument);
  EXPECT_THROW(lemma::perturb_cycle(s0, cycle, -0.1), std::invalid_argument);
}

TEST(PerturbCycle, PreservesRowAndColumnSums) {
  moelab::Rng rng(44);
  for (std::size_t N = 2; N <= 8; ++N)
    for (std::size_t n = 2; n <= 8; ++n)
      for (std::size_t k = 2; k <= n; ++k) {
        const Matrix support = lemma::build_balanced_support(N, n, k);
        const auto cycle = lemma::find_cycle(support);
        if (!cycle) continue;
        Matrix s0 = support;
        for (double& v : s0.data()) v /= static_cast<double>(k);
        const double delta = rng.uniform() / static_cast<double>(k);
        const Matrix s1 = lemma::perturb_cycle(s0, *cycle, delta);
        const auto before = column_sums(s0), after = column_sums(s1);
        for (std::size_t j = 0; j < n; ++j) EXPECT_NEAR(before[j], after[j], 1e-12);
        for (std::size_t i = 0; i < N; ++i) {
          double row = 0.0;
          for (double v : s1.row(i)) row += v;
          EXPECT_NEAR(row, 1.0, 1e-12);
        }
      }
}

TEST(CertifyLemma1, TwoByTwoInstance) {
  const auto inst = lemma::make_instance(2, 2, 2, 0.25);
  ASSERT_TRUE(inst.has_value());
  const auto cert =
      lemma::certify_lemma1(inst->base, inst->perturbed, inst->cycle, inst->delta, inst->k);
  EXPECT_TRUE(cert.passed());
  EXPECT_DOUBLE_EQ(cert.expected_variance, 0.0625);
  for (double v : cert.cycle_row_variances) EXPECT_NEAR(v, 0.0625, 1e-12);
}

TEST(CertifyLemma1, ZeroDeltaIsVacuous) {
  const auto inst = lemma::make_instance(3, 3, 2, 0.0);
  ASSERT_TRUE(inst.has_value());
  const auto cert =
      lemma::certify_lemma1(inst->base, inst->perturbed, inst->cycle, 0.0, inst->k);
  EXPECT_TRUE(cert.passed());
  for (double v : cert.cycle_row_variances) EXPECT_EQ(v, 0.0);
}

TEST(CertifyLemma1, SixByThree) {
  const auto inst = lemma::make_instance(6, 3, 2, 0.1);
  ASSERT_TRUE(inst.has_value());
  const auto cert =
      lemma::certify_lemma1(inst->base, inst->perturbed, inst->cycle, inst->delta, inst->k);
  EXPECT_TRUE(cert.passed());
  for (double v : cert.cycle_row_variances) EXPECT_NEAR(v, 0.01, 1e-12);
}

TEST(CertifyLemma1, DetectsBrokenPerturbation) {
  auto inst = *lemma::make_instance(3, 3, 2, 0.1);
  inst.perturbed(0, 0) += 0.05;  // breaks row 0 and column 0
  const auto cert =
      lemma::certify_lemma1(inst.base, inst.perturbed, inst.cycle, inst.delta, inst.k);
  EXPECT_FALSE(cert.passed());
  EXPECT_FALSE(cert.row_sums.passed);
  EXPECT_FALSE(cert.column_sums.passed);
}

TEST(CertifyLemma1, RejectsKOne) {
  EXPECT_THROW(lemma::make_instance(4, 4, 1, 0.1), std::invalid_argument);
}

TEST(CertifyLemma1, GridSweep) {
  std::size_t certified = 0, forests = 0;
  for (std::size_t N = 2; N <= 8; ++N)
    for (std::size_t n = 2; n <= 8; ++n)
      for (std::size_t k = 2; k <= n; ++k) {
        const auto inst = lemma::make_instance(N, n, k, 0.1);
        if (!inst) {
          ++forests;
          continue;
        }
        const auto cert =
            lemma::certify_lemma1(inst->base, inst->perturbed, inst->cycle, inst->delta, k);
        EXPECT_TRUE(cert.passed()) << N << "x" << n << " k=" << k;
        ++certified;
      }
  EXPECT_GT(certified, 0u);
  EXPECT_GT(forests, 0u);  // e.g. N=2, n=4, k=2
}

TEST(CertifyLemma2, Examples) {
  EXPECT_TRUE(lemma::certify_lemma2({1, 2}, {3, 4}));
  EXPECT_FALSE(lemma::certify_lemma2({1, 2}, {2, 3}));
  EXPECT_TRUE(lemma::certify_lemma2({}, {}));
  EXPECT_FALSE(lemma::certify_lemma2({1}, {2, 3}));
}

}  // namespace
