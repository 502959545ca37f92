#include "spectralrank/diagnostics.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "test_util.hpp"

namespace {

using spectralrank::CriterionReport;
using spectralrank::diag_criterion;
using spectralrank::empirical_nsr;
using spectralrank::layer_criterion;
using spectralrank::Matrix;
using spectralrank::refined_equivalence_check;
using spectralrank::Rng;
using spectralrank::spectral_summary;
using spectralrank::token_indicator_stable_rank;
using spectralrank::Vector;

TEST(LayerCriterion, TieCountsAsFavored) {
  const CriterionReport r = layer_criterion(Matrix::Identity(4, 4), Matrix::Identity(4, 4), 0.0);
  EXPECT_NEAR(r.nr_gradient, 4.0, 1e-10);
  EXPECT_NEAR(r.st_activation, 4.0, 1e-10);
  EXPECT_NEAR(r.ratio, 1.0, 1e-10);
  EXPECT_TRUE(r.spectral_favored);
}

TEST(LayerCriterion, RefinedThresholdFormula) {
  // nr = 10 (ten equal singular values), st = 5, alpha = 2
  const CriterionReport r = layer_criterion(Matrix::Identity(10, 10), Matrix::Identity(5, 5), 2.0);
  EXPECT_NEAR(r.refined_threshold, 35.0 / 6.0, 1e-10);
  EXPECT_TRUE(r.spectral_favored);
  EXPECT_NEAR(r.alpha, 2.0, 0.0);
}

TEST(LayerCriterion, RankOneGradientNotFavored) {
  Rng rng(1, "rank-one-grad");
  Vector u = rng.gaussian_vector(6);
  Vector v = rng.gaussian_vector(6);
  const CriterionReport r = layer_criterion(u * v.transpose(), Matrix::Identity(6, 6), 0.0);
  EXPECT_NEAR(r.nr_gradient, 1.0, 1e-8);
  EXPECT_FALSE(r.spectral_favored);
}

TEST(LayerCriterion, RejectsZeroInputs) {
  EXPECT_THROW(layer_criterion(Matrix::Zero(3, 3), Matrix::Identity(3, 3), 0.0),
               spectralrank::ZeroMatrixError);
  EXPECT_THROW(layer_criterion(Matrix::Identity(3, 3), Matrix::Zero(3, 3), 0.0),
               spectralrank::ZeroMatrixError);
}

TEST(RefinedEquivalence, HoldsOnTenThousandSamples) {
  Rng rng(2, "refined");
  for (int i = 0; i < 10000; ++i) {
    const double r = rng.next_uniform(1.0, 100.0);
    const double s = rng.next_uniform(1.0, 100.0);
    const double alpha = rng.next_uniform(0.0, 100.0);
    ASSERT_TRUE(refined_equivalence_check(r, s, alpha))
        << "r=" << r << " s=" << s << " alpha=" << alpha;
  }
  EXPECT_TRUE(refined_equivalence_check(3.0, 3.0, 17.0));
  EXPECT_TRUE(refined_equivalence_check(7.0, 3.0, 11.0));
  EXPECT_TRUE(refined_equivalence_check(2.0, 5.0, 0.5));
}

TEST(EmpiricalNsr, ConstantColumnsGiveOne) {
  Rng rng(3, "nsr-const");
  const Vector v = rng.gaussian_vector(5);
  Matrix z(5, 7);
  for (int j = 0; j < 7; ++j) {
    z.col(j) = v;
  }
  EXPECT_NEAR(empirical_nsr(z), 1.0, 1e-12);
}

TEST(EmpiricalNsr, ExactCancellationIsAnError) {
  Rng rng(4, "nsr-cancel");
  const Vector v = rng.gaussian_vector(5);
  Matrix z(5, 2);
  z.col(0) = v;
  z.col(1) = -v;
  EXPECT_THROW(empirical_nsr(z), spectralrank::ZeroMeanError);
}

TEST(EmpiricalNsr, ReluScalarSamplesApproachPi) {
  Rng rng(5, "nsr-relu");
  Matrix z(1, 2000);
  for (int j = 0; j < 2000; ++j) {
    z(0, j) = std::max(0.0, rng.next_gaussian());
  }
  EXPECT_NEAR(empirical_nsr(z), std::numbers::pi, 0.1 * std::numbers::pi);
}

TEST(EmpiricalNsr, UpperBoundsStableRank) {
  Rng rng(6, "nsr-vs-st");
  for (int trial = 0; trial < 20; ++trial) {
    const Eigen::Index d = 2 + static_cast<Eigen::Index>(rng.next_below(12));
    const Eigen::Index n = 5 + static_cast<Eigen::Index>(rng.next_below(40));
    Matrix z = rng.gaussian(d, n);
    z.colwise() += rng.gaussian_vector(d, 0.5);  // push the mean away from zero
    const double nsr = empirical_nsr(z);
    EXPECT_GE(nsr, 1.0 - 1e-12);
    EXPECT_GE(nsr, spectral_summary(z).stable_rank - 1e-9);
  }
}

TEST(TokenIndicator, SingleToken) {
  EXPECT_EQ(token_indicator_stable_rank({4}), 1.0);
}

TEST(TokenIndicator, UniformTokens) {
  EXPECT_EQ(token_indicator_stable_rank({1, 1, 1, 1, 1, 1, 1}), 7.0);
}

TEST(TokenIndicator, ThreeOne) {
  EXPECT_NEAR(token_indicator_stable_rank({3, 1}), 4.0 / 3.0, 0.0);
}

TEST(TokenIndicator, AllZeroCountsRejected) {
  EXPECT_THROW(token_indicator_stable_rank({0, 0, 0}), spectralrank::EmptySequenceError);
  EXPECT_THROW(token_indicator_stable_rank({}), spectralrank::EmptySequenceError);
}

TEST(TokenIndicator, MatchesExplicitIndicatorMatrix) {
  Rng rng(7, "tokens");
  for (int trial = 0; trial < 25; ++trial) {
    const Eigen::Index vocab = 2 + static_cast<Eigen::Index>(rng.next_below(9));
    std::vector<std::int64_t> counts(vocab, 0);
    Eigen::Index n = 0;
    for (Eigen::Index v = 0; v < vocab; ++v) {
      counts[v] = static_cast<std::int64_t>(rng.next_below(6));
      n += counts[v];
    }
    if (n == 0) {
      counts[0] = 1;
      n = 1;
    }
    Matrix h = Matrix::Zero(vocab, n);
    Eigen::Index col = 0;
    for (Eigen::Index v = 0; v < vocab; ++v) {
      for (std::int64_t c = 0; c < counts[v]; ++c) {
        h(v, col++) = 1.0;
      }
    }
    EXPECT_NEAR(token_indicator_stable_rank(counts), spectral_summary(h).stable_rank, 1e-12);
  }
}

TEST(DiagCriterion, OneHotGradient) {
  Vector g = Vector::Zero(5);
  g(0) = 1.0;
  const CriterionReport r = diag_criterion(g, Matrix::Identity(2, 2));
  EXPECT_NEAR(r.nr_gradient, 1.0, 1e-12);
  EXPECT_FALSE(r.spectral_favored);  // st = 2 beats l1^2/l2^2 = 1
}

TEST(DiagCriterion, AllOnesGradient) {
  const CriterionReport r = diag_criterion(Vector::Ones(8), Matrix::Identity(3, 3));
  EXPECT_NEAR(r.nr_gradient, 8.0, 1e-12);
  EXPECT_TRUE(r.spectral_favored);
}

TEST(DiagCriterion, TwoOneOne) {
  const CriterionReport r = diag_criterion(Vector{{2.0, 1.0, 1.0}}, Matrix::Identity(2, 2));
  EXPECT_NEAR(r.nr_gradient, 16.0 / 6.0, 1e-12);
}

TEST(DiagCriterion, RejectsZeroVector) {
  EXPECT_THROW(diag_criterion(Vector::Zero(4), Matrix::Identity(2, 2)),
               spectralrank::ZeroVectorError);
}

// l2^2/linf^2 <= l1^2/l2^2: the diagonal stable rank never exceeds the
// diagonal nuclear rank, mirroring st <= nr for matrices.
TEST(DiagCriterion, VectorRankSandwich) {
  Rng rng(8, "vec-sandwich");
  for (int trial = 0; trial < 500; ++trial) {
    const Eigen::Index d = 1 + static_cast<Eigen::Index>(rng.next_below(20));
    const Vector g = rng.gaussian_vector(d);
    if (g.cwiseAbs().maxCoeff() == 0.0) {
      continue;
    }
    const double st_diag = g.squaredNorm() / (g.lpNorm<Eigen::Infinity>() * g.lpNorm<Eigen::Infinity>());
    const double nr_diag = g.lpNorm<1>() * g.lpNorm<1>() / g.squaredNorm();
    EXPECT_LE(st_diag, nr_diag * (1 + 1e-12));
  }
}

}  // namespace
