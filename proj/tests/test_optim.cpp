#include "spectralrank/optim.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "spectralrank/models.hpp"
#include "test_util.hpp"

namespace {

using spectralrank::BlockRole;
using spectralrank::BlockState;
using spectralrank::diag_sign_step;
using spectralrank::diag_step_sizes;
using spectralrank::gd_step;
using spectralrank::gen_realizable;
using spectralrank::gen_teacher_student;
using spectralrank::make_partition;
using spectralrank::Matrix;
using spectralrank::matrix_step_sizes;
using spectralrank::mixed_step;
using spectralrank::Partition;
using spectralrank::PartitionScheme;
using spectralrank::PolarMode;
using spectralrank::rf_loss_grad;
using spectralrank::RFInstance;
using spectralrank::Rng;
using spectralrank::shardwise_nuclear_rank;
using spectralrank::shardwise_spec_step;
using spectralrank::spec_step;
using spectralrank::spectral_summary;
using spectralrank::spiked_instance;
using spectralrank::SpikedSpec;
using spectralrank::StepSizes;
using spectralrank::Vector;

// A small pool of RF quadratics of mixed provenance for the descent
// guarantees; dims stay modest so the whole pool evaluates in well under a
// second.
std::vector<RFInstance> descent_pool(int count) {
  std::vector<RFInstance> pool;
  pool.reserve(static_cast<size_t>(count));
  for (int i = 0; i < count; ++i) {
    const auto seed = static_cast<std::uint64_t>(100 + i);
    const Eigen::Index d = 10 + (i % 4) * 5;
    const Eigen::Index k = 8 + (i % 3) * 6;
    const Eigen::Index m = 6 + (i % 5) * 2;
    const Eigen::Index n = 30 + (i % 4) * 10;
    switch (i % 3) {
      case 0:
        pool.push_back(gen_realizable(d, k, m, n, seed));
        break;
      case 1:
        pool.push_back(gen_teacher_student(d, k, m, n, seed));
        break;
      default: {
        const SpikedSpec spec{.d = d, .k = k, .spike_rank = 1 + i % 2, .exp_lo = 0.8,
                              .exp_hi = 1.0, .bulk_lo = 0.5, .bulk_hi = 1.5};
        pool.push_back(spiked_instance(spec, m, std::max(n, k), seed));
        break;
      }
    }
  }
  return pool;
}

TEST(GdStep, ZeroGradientIsNoOp) {
  Rng rng(1, "gd-noop");
  const Matrix w = rng.gaussian(4, 6);
  const Matrix w2 = gd_step(w, Matrix::Zero(4, 6), 2.5);
  EXPECT_EQ((w2 - w).cwiseAbs().maxCoeff(), 0.0);
}

TEST(GdStep, Validation) {
  const Matrix w = Matrix::Ones(2, 2);
  EXPECT_THROW(gd_step(w, w, 0.0), spectralrank::NonPositiveConstantError);
  EXPECT_THROW(gd_step(w, w, -1.0), spectralrank::NonPositiveConstantError);
  EXPECT_THROW(gd_step(w, Matrix::Ones(2, 3), 1.0), spectralrank::ShapeMismatchError);
}

TEST(GdStep, ZeroInitClosedForm) {
  const RFInstance inst = gen_realizable(12, 16, 9, 40, 2);
  const Matrix g0 = rf_loss_grad(Matrix::Zero(9, 16), inst).grad;
  const Matrix stepped = gd_step(Matrix::Zero(9, 16), g0, inst.L_F);
  const Matrix want = (inst.W_truth * inst.B) / inst.L_F;
  EXPECT_EQ((stepped - want).cwiseAbs().maxCoeff(), 0.0);
}

TEST(Descent, GdGuaranteeOnQuadratics) {
  Rng rng(3, "gd-guarantee");
  for (const RFInstance& inst : descent_pool(50)) {
    const Matrix w = rng.gaussian(inst.W_truth.rows(), inst.W_truth.cols());
    const auto [loss, g] = rf_loss_grad(w, inst);
    const double next = rf_loss_grad(gd_step(w, g, inst.L_F), inst).loss;
    const double guarantee = g.squaredNorm() / (2.0 * inst.L_F);
    EXPECT_GE(loss - next, guarantee * (1.0 - 1e-9));
  }
}

TEST(Descent, SpecGuaranteeOnQuadratics) {
  Rng rng(4, "spec-guarantee");
  for (const RFInstance& inst : descent_pool(50)) {
    const Matrix w = rng.gaussian(inst.W_truth.rows(), inst.W_truth.cols());
    const auto [loss, g] = rf_loss_grad(w, inst);
    const double nuc = spectral_summary(g).nuclear;
    const double next = rf_loss_grad(spec_step(w, g, inst.L_op), inst).loss;
    const double guarantee = nuc * nuc / (2.0 * inst.L_op);
    EXPECT_GE(loss - next, guarantee * (1.0 - 1e-9));
  }
}

// The two guaranteed decreases are ordered exactly as nr(G) vs st(A); both
// directions checked, near-ties skipped.
TEST(Descent, CriterionOrdersGuarantees) {
  Rng rng(5, "criterion-order");
  int checked = 0;
  for (const RFInstance& inst : descent_pool(50)) {
    const Matrix w = rng.gaussian(inst.W_truth.rows(), inst.W_truth.cols());
    const Matrix g = rf_loss_grad(w, inst).grad;
    const auto gs = spectral_summary(g);
    const double nr = gs.nuclear_rank;
    const double st = inst.L_op / inst.L_F;
    if (std::abs(nr - st) < 1e-9 * st) {
      continue;
    }
    ++checked;
    const double spec_guar = gs.nuclear * gs.nuclear / (2.0 * inst.L_op);
    const double gd_guar = gs.frob * gs.frob / (2.0 * inst.L_F);
    if (nr >= st) {
      EXPECT_GE(spec_guar, gd_guar * (1.0 - 1e-12));
    } else {
      EXPECT_GE(gd_guar, spec_guar * (1.0 - 1e-12));
    }
  }
  EXPECT_GE(checked, 45);
}

TEST(SpecStep, RankOneReducesToGd) {
  Rng rng(6, "rank-one");
  Vector u = rng.gaussian_vector(7);
  Vector v = rng.gaussian_vector(5);
  u.normalize();
  v.normalize();
  const double s = 3.2;
  const Matrix g = s * u * v.transpose();
  const Matrix w = rng.gaussian(7, 5);
  const double l = 1.7;
  const Matrix spec = spec_step(w, g, l);
  const Matrix gd = gd_step(w, g, l);
  EXPECT_LT((spec - gd).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(SpecStep, ExactAndNewtonSchulzAgree) {
  Rng rng(7, "polar-modes");
  for (int trial = 0; trial < 5; ++trial) {
    const Matrix g = 3.0 * testutil::random_with_condition(rng, 9, 12, 100.0);
    const Matrix w = rng.gaussian(9, 12);
    const Matrix a = spec_step(w, g, 2.0, PolarMode::Exact);
    const Matrix b = spec_step(w, g, 2.0, PolarMode::NewtonSchulz);
    EXPECT_LT((a - b).norm(), 1e-6);
  }
}

TEST(SpecStep, InnerProductNuclearEstimateAgrees) {
  Rng rng(8, "ns-nuclear");
  const Matrix g = 2.0 * testutil::random_with_condition(rng, 10, 8, 50.0);
  const Matrix w = rng.gaussian(10, 8);
  const Matrix exact = spec_step(w, g, 1.5, PolarMode::Exact, false);
  const Matrix pure_ns = spec_step(w, g, 1.5, PolarMode::NewtonSchulz, true);
  EXPECT_LT((exact - pure_ns).norm(), 1e-6);
}

TEST(SpecStep, Validation) {
  const Matrix w = Matrix::Ones(3, 3);
  EXPECT_THROW(spec_step(w, Matrix::Zero(3, 3), 1.0), spectralrank::ZeroGradientError);
  EXPECT_THROW(spec_step(w, w, 0.0), spectralrank::NonPositiveConstantError);
  EXPECT_THROW(spec_step(w, Matrix::Ones(2, 3), 1.0), spectralrank::ShapeMismatchError);
}

TEST(DiagSignStep, Examples) {
  Vector gamma(2);
  gamma << 5.0, -1.0;
  const Vector unchanged = diag_sign_step(gamma, Vector::Zero(2), 1.0);
  EXPECT_EQ((unchanged - gamma).cwiseAbs().maxCoeff(), 0.0);

  Vector e1 = Vector::Zero(2);
  e1(0) = 1.0;
  const Vector stepped = diag_sign_step(gamma, e1, 1.0);
  EXPECT_EQ(stepped(0), 4.0);
  EXPECT_EQ(stepped(1), -1.0);

  Vector g(2);
  g << 2.0, -1.0;
  const Vector two = diag_sign_step(gamma, g, 3.0);
  EXPECT_NEAR(two(0), 4.0, 1e-15);  // gamma - (3/3) * (1, -1)
  EXPECT_NEAR(two(1), 0.0, 1e-15);
}

TEST(DiagSignStep, DeadCoordinatesStayPut) {
  Vector gamma(3);
  gamma << 1.0, 2.0, 3.0;
  Vector g(3);
  g << 0.5, 0.0, -2.0;
  const Vector next = diag_sign_step(gamma, g, 5.0);
  EXPECT_NEAR(next(0), 1.0 - 0.5, 1e-15);
  EXPECT_EQ(next(1), 2.0);
  EXPECT_NEAR(next(2), 3.0 + 0.5, 1e-15);
  EXPECT_THROW(diag_sign_step(gamma, g, 0.0), spectralrank::NonPositiveConstantError);
}

TEST(StepSizes, MatrixFormulas) {
  Matrix a = Matrix::Zero(2, 3);
  a(0, 0) = 2.0;
  a(1, 1) = 1.0;  // op^2 = 4, frob^2 = 5
  const Matrix g_rank_one = Vector::Ones(2) * Vector::Ones(4).transpose();
  const StepSizes plain = matrix_step_sizes(g_rank_one, a, 0.5, 0.0);
  EXPECT_NEAR(plain.a_gd, 2.0, 1e-12);
  EXPECT_NEAR(plain.a_spec, 2.5, 1e-12);
  const StepSizes damped = matrix_step_sizes(g_rank_one, a, 0.5, 3.0);
  EXPECT_NEAR(damped.a_gd, 5.0, 1e-9);  // st of a rank-one gradient is 1
  EXPECT_NEAR(damped.a_spec, 5.5, 1e-12);
  EXPECT_THROW(matrix_step_sizes(g_rank_one, a, 0.0, 1.0), spectralrank::NonPositiveConstantError);
  EXPECT_THROW(matrix_step_sizes(g_rank_one, a, 1.0, -1.0), spectralrank::NonPositiveConstantError);
  EXPECT_THROW(matrix_step_sizes(Matrix::Zero(2, 4), a, 1.0, 1.0), spectralrank::ZeroGradientError);
}

TEST(StepSizes, DiagFormulas) {
  Matrix a = Matrix::Zero(3, 3);
  a.diagonal() << 3.0, 1.0, 1.0;  // op^2 = 9, frob^2 = 11
  Vector g(3);
  g << 2.0, 1.0, 1.0;  // squared norm 6, max abs 2, st_diag = 1.5
  const StepSizes sizes = diag_step_sizes(g, a, 1.0, 3.0);
  EXPECT_NEAR(sizes.a_spec, 14.0, 1e-12);
  EXPECT_NEAR(sizes.a_gd, 9.0 + 3.0 / 1.5, 1e-12);
}

TEST(MixedStep, EmptySpectralSetIsBlockwiseGd) {
  Rng rng(9, "mixed-gd");
  const Matrix a0 = rng.gaussian(6, 20);
  const Matrix a1 = rng.gaussian(8, 20);
  std::vector<BlockState> blocks(2);
  blocks[0].W = rng.gaussian(8, 6);
  blocks[1].W = rng.gaussian(5, 8);
  const std::vector<Matrix> grads = {rng.gaussian(8, 6), rng.gaussian(5, 8)};
  const auto out = mixed_step(blocks, grads, {a0, a1}, 0.05, 0.0);
  for (int i = 0; i < 2; ++i) {
    const Matrix& feats = i == 0 ? a0 : a1;
    const StepSizes s = matrix_step_sizes(grads[i], feats, 0.05, 0.0);
    const Matrix want = gd_step(blocks[i].W, grads[i], s.a_gd);
    EXPECT_EQ((out[i].W - want).cwiseAbs().maxCoeff(), 0.0) << "block " << i;
  }
}

TEST(MixedStep, SpectralMemberTakesSpecStep) {
  Rng rng(10, "mixed-spec");
  const Matrix a0 = rng.gaussian(6, 20);
  std::vector<BlockState> blocks(1);
  blocks[0].W = rng.gaussian(8, 6);
  blocks[0].spectral_set_member = true;
  const std::vector<Matrix> grads = {rng.gaussian(8, 6)};
  const auto out = mixed_step(blocks, grads, {a0}, 0.05, 0.0);
  const StepSizes s = matrix_step_sizes(grads[0], a0, 0.05, 0.0);
  const Matrix want = spec_step(blocks[0].W, grads[0], s.a_spec);
  EXPECT_EQ((out[0].W - want).cwiseAbs().maxCoeff(), 0.0);
}

TEST(MixedStep, DiagonalBlocksUseCoordinateSteps) {
  Rng rng(11, "mixed-diag");
  const Matrix feats = rng.gaussian(5, 30);
  Vector gamma = rng.gaussian_vector(5);
  Vector gd = rng.gaussian_vector(5);
  std::vector<BlockState> blocks(2);
  blocks[0].W = gamma.asDiagonal();
  blocks[0].role = BlockRole::Diagonal;
  blocks[0].spectral_set_member = true;
  blocks[1].W = gamma.asDiagonal();
  blocks[1].role = BlockRole::Diagonal;
  const Matrix gmat = Matrix(gd.asDiagonal());
  const auto out = mixed_step(blocks, {gmat, gmat}, {feats, feats}, 0.1, 0.5);

  const StepSizes s = diag_step_sizes(gd, feats, 0.1, 0.5);
  const Vector want_sign = diag_sign_step(gamma, gd, s.a_spec);
  const Vector want_gd = gamma - gd / s.a_gd;
  EXPECT_LT((out[0].W.diagonal() - want_sign).cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_LT((out[1].W.diagonal() - want_gd).cwiseAbs().maxCoeff(), 1e-15);
  const Matrix off_diag = out[0].W - Matrix(out[0].W.diagonal().asDiagonal());
  EXPECT_EQ(off_diag.cwiseAbs().maxCoeff(), 0.0);  // stays diagonal
}

TEST(MixedStep, SkipsZeroGradientBlocks) {
  Rng rng(12, "mixed-skip");
  const Matrix feats = rng.gaussian(4, 10);
  std::vector<BlockState> blocks(1);
  blocks[0].W = rng.gaussian(3, 4);
  blocks[0].spectral_set_member = true;
  const auto out = mixed_step(blocks, {Matrix::Zero(3, 4)}, {feats}, 1.0, 2.0);
  EXPECT_EQ((out[0].W - blocks[0].W).cwiseAbs().maxCoeff(), 0.0);
}

TEST(MixedStep, Validation) {
  Rng rng(13, "mixed-validate");
  std::vector<BlockState> blocks(1);
  blocks[0].W = rng.gaussian(3, 4);
  const Matrix feats = rng.gaussian(4, 10);
  const Matrix g = rng.gaussian(3, 4);
  EXPECT_THROW(mixed_step(blocks, {g, g}, {feats}, 1.0, 0.0), spectralrank::ShapeMismatchError);
  EXPECT_THROW(mixed_step(blocks, {rng.gaussian(3, 5)}, {feats}, 1.0, 0.0),
               spectralrank::ShapeMismatchError);
  EXPECT_THROW(mixed_step(blocks, {g}, {rng.gaussian(5, 10)}, 1.0, 0.0),
               spectralrank::ShapeMismatchError);
  blocks[0].role = BlockRole::Diagonal;
  EXPECT_THROW(mixed_step(blocks, {g}, {feats}, 1.0, 0.0), spectralrank::ShapeMismatchError);
}

// With the bare per-block criterion nr(G) >= st(A) satisfied everywhere, the
// all-spectral predicted decrease dominates the all-GD one, for damped and
// undamped step sizes alike.
TEST(MixedStep, SpectralPredictionDominatesUnderCriterion) {
  Rng rng(14, "mixed-dominance");
  int qualified = 0;
  for (int trial = 0; trial < 12; ++trial) {
    const SpikedSpec spec{.d = 40, .k = 20, .spike_rank = 1, .exp_lo = 1.0, .exp_hi = 1.0,
                          .bulk_lo = 0.8, .bulk_hi = 1.2};
    const RFInstance inst = spiked_instance(spec, 15, 25, 700 + static_cast<std::uint64_t>(trial));
    const Matrix w = rng.gaussian(15, 20);
    const Matrix g = rf_loss_grad(w, inst).grad;
    const auto gs = spectral_summary(g);
    const double st = spectral_summary(inst.A).stable_rank;
    if (gs.nuclear_rank < st) {
      continue;
    }
    ++qualified;
    for (const double c_op : {0.0, 0.7}) {
      const StepSizes s = matrix_step_sizes(g, inst.A, 1.0 / static_cast<double>(inst.n), c_op);
      const double spec_pred = gs.nuclear * gs.nuclear / (2.0 * s.a_spec);
      const double gd_pred = gs.frob * gs.frob / (2.0 * s.a_gd);
      EXPECT_GE(spec_pred, gd_pred * (1.0 - 1e-12)) << "trial " << trial << " c_op " << c_op;
    }
  }
  EXPECT_GE(qualified, 6);
}

// End-to-end energy check on a quadratic: splitting W into row blocks (which
// share the features) and mixing spectral and GD blocks, the realized decrease
// covers the summed per-block guarantees.
TEST(MixedStep, RealizedDecreaseCoversPredicted) {
  Rng rng(15, "mixed-energy");
  for (const double c_op : {0.0, 0.4}) {
    const RFInstance inst = gen_realizable(16, 24, 10, 60, 31);
    const double c_f = 1.0 / static_cast<double>(inst.n);
    const Matrix w = rng.gaussian(10, 24);
    const auto [loss0, g] = rf_loss_grad(w, inst);

    std::vector<BlockState> blocks(2);
    blocks[0].W = w.topRows(4);
    blocks[0].spectral_set_member = true;
    blocks[1].W = w.bottomRows(6);
    const std::vector<Matrix> grads = {g.topRows(4), g.bottomRows(6)};
    const auto out = mixed_step(blocks, grads, {inst.A, inst.A}, c_f, c_op);

    Matrix w_next(10, 24);
    w_next.topRows(4) = out[0].W;
    w_next.bottomRows(6) = out[1].W;
    const double loss1 = rf_loss_grad(w_next, inst).loss;

    const StepSizes s0 = matrix_step_sizes(grads[0], inst.A, c_f, c_op);
    const StepSizes s1 = matrix_step_sizes(grads[1], inst.A, c_f, c_op);
    const double nuc0 = spectral_summary(grads[0]).nuclear;
    const double predicted =
        nuc0 * nuc0 / (2.0 * s0.a_spec) + grads[1].squaredNorm() / (2.0 * s1.a_gd);
    EXPECT_GE(loss0 - loss1, predicted * (1.0 - 1e-9));
  }
}

TEST(MakePartition, RowShardsExample) {
  const Partition p = make_partition(8, 6, PartitionScheme::row_shards(4));
  EXPECT_EQ(p.blocks.size(), 4u);
  EXPECT_EQ(p.nu, 1);
  EXPECT_EQ(p.mu, 4);
  EXPECT_EQ(p.kappa, 1);
}

TEST(MakePartition, SingletonsExample) {
  const Partition p = make_partition(5, 3, PartitionScheme::singletons());
  EXPECT_EQ(p.blocks.size(), 15u);
  EXPECT_EQ(p.nu, 3);
  EXPECT_EQ(p.mu, 5);
  EXPECT_EQ(p.kappa, 3);
}

TEST(MakePartition, WholeMatrixExample) {
  const Partition p = make_partition(9, 4, PartitionScheme::row_shards(1));
  EXPECT_EQ(p.blocks.size(), 1u);
  EXPECT_EQ(p.nu, 1);
  EXPECT_EQ(p.mu, 1);
  EXPECT_EQ(p.kappa, 1);
}

TEST(MakePartition, GridMultiplicities) {
  const Partition p = make_partition(6, 9, PartitionScheme::grid(2, 3));
  EXPECT_EQ(p.blocks.size(), 6u);
  EXPECT_EQ(p.nu, 3);  // each row crosses all three column groups
  EXPECT_EQ(p.mu, 2);
  EXPECT_EQ(p.kappa, 2);
}

TEST(MakePartition, LastShardAbsorbsRemainder) {
  const Partition p = make_partition(10, 4, PartitionScheme::row_shards(3));
  ASSERT_EQ(p.blocks.size(), 3u);
  EXPECT_EQ(p.blocks[0].nrows, 3);
  EXPECT_EQ(p.blocks[1].nrows, 3);
  EXPECT_EQ(p.blocks[2].nrows, 4);
}

TEST(MakePartition, DisjointCover) {
  Rng rng(16, "partition-cover");
  const std::vector<PartitionScheme> schemes = {
      PartitionScheme::row_shards(3), PartitionScheme::col_shards(5),
      PartitionScheme::grid(2, 4), PartitionScheme::singletons()};
  for (const auto& scheme : schemes) {
    const Eigen::Index rows = 7 + static_cast<Eigen::Index>(rng.next_below(10));
    const Eigen::Index cols = 8 + static_cast<Eigen::Index>(rng.next_below(10));
    const Partition p = make_partition(rows, cols, scheme);
    Matrix cover = Matrix::Zero(rows, cols);
    for (const auto& blk : p.blocks) {
      cover.block(blk.row0, blk.col0, blk.nrows, blk.ncols).array() += 1.0;
    }
    EXPECT_EQ(cover.minCoeff(), 1.0);
    EXPECT_EQ(cover.maxCoeff(), 1.0);
    ASSERT_EQ(p.row_footprints.size(), p.blocks.size());
    ASSERT_EQ(p.col_footprints.size(), p.blocks.size());
  }
}

TEST(MakePartition, RejectsBadSchemes) {
  EXPECT_THROW(make_partition(4, 4, PartitionScheme::row_shards(0)),
               spectralrank::InvalidSchemeError);
  EXPECT_THROW(make_partition(4, 4, PartitionScheme::row_shards(5)),
               spectralrank::InvalidSchemeError);
  EXPECT_THROW(make_partition(4, 4, PartitionScheme::grid(2, 6)),
               spectralrank::InvalidSchemeError);
  EXPECT_THROW(make_partition(0, 4, PartitionScheme::row_shards(1)),
               spectralrank::InvalidSchemeError);
}

TEST(Shardwise, OneBlockMatchesSpecStep) {
  Rng rng(17, "shard-one");
  const RFInstance inst = gen_realizable(12, 16, 9, 40, 41);
  const Matrix w = rng.gaussian(9, 16);
  const Matrix g = rf_loss_grad(w, inst).grad;
  const Partition p = make_partition(9, 16, PartitionScheme::row_shards(1));
  const auto [w_next, guar] = shardwise_spec_step(w, g, p, inst.A, inst.n);
  const Matrix want = spec_step(w, g, inst.L_op);
  EXPECT_LT((w_next - want).cwiseAbs().maxCoeff(), 1e-12);
  const double nuc = spectral_summary(g).nuclear;
  EXPECT_NEAR(guar, nuc * nuc / (2.0 * inst.L_op), 1e-9 * guar);
}

TEST(Shardwise, GuaranteeHoldsAcrossPartitions) {
  Rng rng(18, "shard-guarantee");
  const std::vector<PartitionScheme> schemes = {
      PartitionScheme::row_shards(2), PartitionScheme::row_shards(3),
      PartitionScheme::col_shards(2), PartitionScheme::col_shards(4),
      PartitionScheme::grid(2, 2),    PartitionScheme::grid(3, 2)};
  for (int trial = 0; trial < 10; ++trial) {
    const RFInstance inst =
        gen_realizable(14, 20, 12, 50, 500 + static_cast<std::uint64_t>(trial));
    const Matrix w = rng.gaussian(12, 20);
    const auto [loss0, g] = rf_loss_grad(w, inst);
    for (const auto& scheme : schemes) {
      const Partition p = make_partition(12, 20, scheme);
      const auto [w_next, guar] = shardwise_spec_step(w, g, p, inst.A, inst.n);
      const double loss1 = rf_loss_grad(w_next, inst).loss;
      EXPECT_GE(loss0 - loss1, guar * (1.0 - 1e-9));
      EXPECT_GT(guar, 0.0);
    }
  }
}

TEST(Shardwise, PureRowAndColumnPartitionsHaveUnitKappa) {
  for (Eigen::Index s : {2, 3, 5}) {
    EXPECT_EQ(make_partition(15, 10, PartitionScheme::row_shards(s)).kappa, 1);
    EXPECT_EQ(make_partition(15, 10, PartitionScheme::col_shards(s)).kappa, 1);
  }
}

TEST(Shardwise, ZeroShardsSkippedAllZeroRejected) {
  Rng rng(19, "shard-zero");
  const RFInstance inst = gen_realizable(10, 12, 8, 30, 43);
  const Matrix w = rng.gaussian(8, 12);
  Matrix g = rf_loss_grad(w, inst).grad;
  g.topRows(4).setZero();
  const Partition p = make_partition(8, 12, PartitionScheme::row_shards(2));
  const auto [w_next, guar] = shardwise_spec_step(w, g, p, inst.A, inst.n);
  EXPECT_EQ((w_next.topRows(4) - w.topRows(4)).cwiseAbs().maxCoeff(), 0.0);
  EXPECT_GT((w_next.bottomRows(4) - w.bottomRows(4)).cwiseAbs().maxCoeff(), 0.0);
  EXPECT_GT(guar, 0.0);
  EXPECT_THROW(shardwise_spec_step(w, Matrix::Zero(8, 12), p, inst.A, inst.n),
               spectralrank::ZeroGradientError);
}

TEST(Shardwise, NuclearRankProxyAtLeastOne) {
  Rng rng(20, "shard-proxy");
  const std::vector<PartitionScheme> schemes = {
      PartitionScheme::row_shards(4), PartitionScheme::col_shards(3),
      PartitionScheme::grid(2, 3), PartitionScheme::singletons()};
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix g = rng.gaussian(9, 12);
    const auto& scheme = schemes[static_cast<size_t>(trial) % schemes.size()];
    const Partition p = make_partition(9, 12, scheme);
    const double proxy = shardwise_nuclear_rank(g, p);
    EXPECT_GE(proxy, 1.0 - 1e-12);
  }
}

// Partitioned majorization: the loss at W + U is bounded by the linearization
// plus (L_P / 2) sum_p ||U_p||_op^2, exactly on the quadratic.
TEST(Shardwise, PartitionedMajorization) {
  Rng rng(21, "shard-major");
  const std::vector<PartitionScheme> schemes = {
      PartitionScheme::row_shards(3), PartitionScheme::col_shards(4),
      PartitionScheme::grid(2, 2)};
  for (int trial = 0; trial < 30; ++trial) {
    const RFInstance inst =
        gen_realizable(12, 18, 10, 40, 800 + static_cast<std::uint64_t>(trial));
    const Matrix w = rng.gaussian(10, 18);
    const Matrix u = rng.gaussian(10, 18, 0.3);
    const auto [loss0, g] = rf_loss_grad(w, inst);
    const double loss1 = rf_loss_grad(w + u, inst).loss;
    const auto& scheme = schemes[static_cast<size_t>(trial) % schemes.size()];
    const Partition part = make_partition(10, 18, scheme);
    const double l_part = static_cast<double>(part.kappa) * inst.A.squaredNorm() /
                          static_cast<double>(inst.n);
    double quad = 0.0;
    for (const auto& blk : part.blocks) {
      const double op = spectral_summary(u.block(blk.row0, blk.col0, blk.nrows, blk.ncols)).op_norm;
      quad += op * op;
    }
    const double bound = loss0 + g.cwiseProduct(u).sum() + 0.5 * l_part * quad;
    EXPECT_LE(loss1, bound * (1.0 + 1e-9) + 1e-12);
  }
}

// One-step dominance both ways: the shardwise guarantee beats the GD guarantee
// exactly when the shardwise nuclear-rank proxy clears kappa * st(A).
TEST(Shardwise, DominanceMatchesPartitionCriterion) {
  Rng rng(22, "shard-dominance");
  const std::vector<PartitionScheme> schemes = {
      PartitionScheme::row_shards(2), PartitionScheme::col_shards(3),
      PartitionScheme::grid(2, 2)};
  int checked = 0;
  for (int trial = 0; trial < 30; ++trial) {
    const RFInstance inst =
        gen_realizable(12, 16, 10, 40, 900 + static_cast<std::uint64_t>(trial));
    const Matrix w = rng.gaussian(10, 16);
    const Matrix g = rf_loss_grad(w, inst).grad;
    const auto& scheme = schemes[static_cast<size_t>(trial) % schemes.size()];
    const Partition part = make_partition(10, 16, scheme);
    const double guar = shardwise_spec_step(w, g, part, inst.A, inst.n).guaranteed_decrease;
    const double gd_guar = g.squaredNorm() / (2.0 * inst.L_F);
    const double proxy = shardwise_nuclear_rank(g, part);
    const double threshold = static_cast<double>(part.kappa) * (inst.L_op / inst.L_F);
    if (std::abs(proxy - threshold) < 1e-9 * threshold) {
      continue;
    }
    ++checked;
    if (proxy >= threshold) {
      EXPECT_GE(guar, gd_guar * (1.0 - 1e-12));
    } else {
      EXPECT_GE(gd_guar, guar * (1.0 - 1e-12));
    }
  }
  EXPECT_GE(checked, 25);
}

}  // namespace
