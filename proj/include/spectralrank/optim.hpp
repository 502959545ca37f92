#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "spectralrank/diagnostics.hpp"
#include "spectralrank/linalg.hpp"
#include "spectralrank/matrix.hpp"

namespace spectralrank {

enum class BlockRole { Input, Internal, Output, Diagonal };

/// One trainable block. Diagonal blocks store a vector parameter gamma as the
/// diagonal of a square W; everything else is a dense matrix.
struct BlockState {
  Matrix W;
  BlockRole role = BlockRole::Internal;
  bool spectral_set_member = false;
};

enum class PolarMode { Exact, NewtonSchulz };

/// Euclidean descent step W - G / L_F.
inline Matrix gd_step(const Matrix& w, const Matrix& g, double l_f) {
  if (!(l_f > 0.0)) {
    throw NonPositiveConstantError("gd_step: L_F must be positive");
  }
  require_same_shape(w, g, "gd_step");
  return w - g / l_f;
}

/// Spectral descent step W - (||G||_* / L_op) polar(G). The direction is the
/// support-restricted polar (exact SVD or Newton-Schulz), so a rank-deficient
/// gradient moves W only inside its own row/column space; the nuclear norm is
/// read off the SVD either way unless ns_nuclear asks for the inner-product
/// estimate <G, polar(G)>, which is what a large-scale deployment would use.
inline Matrix spec_step(const Matrix& w, const Matrix& g, double l_op,
                        PolarMode polar_mode = PolarMode::Exact, bool ns_nuclear = false) {
  if (!(l_op > 0.0)) {
    throw NonPositiveConstantError("spec_step: L_op must be positive");
  }
  require_same_shape(w, g, "spec_step");
  require_finite(g, "spec_step");
  if (is_zero(g)) {
    throw ZeroGradientError("spec_step: zero gradient has no polar direction");
  }
  const Matrix p =
      polar_mode == PolarMode::Exact ? polar_support(g) : polar_newton_schulz(g).polar;
  const double nuclear =
      ns_nuclear ? g.cwiseProduct(p).sum() : spectral_summary(g).nuclear;
  return w - (nuclear / l_op) * p;
}

/// Sign step on a diagonal parameter: gamma - (||g||_1 / a) sign(g), with
/// sign(0) = 0 so dead coordinates stay put.
inline Vector diag_sign_step(const Vector& gamma, const Vector& g, double a) {
  if (!(a > 0.0)) {
    throw NonPositiveConstantError("diag_sign_step: step constant must be positive");
  }
  require_same_shape(gamma, g, "diag_sign_step");
  require_finite(g, "diag_sign_step");
  const double scale = g.lpNorm<1>() / a;
  return gamma - scale * g.array().sign().matrix();
}

/// Blockwise step constants a_GD = L^F + C_op / st(G) and a_Spec = L^op + C_op
/// with L^F = C_F ||A||_op^2 and L^op = C_F ||A||_F^2 taken from the block's
/// input activations A.
struct StepSizes {
  double a_gd = 0.0;
  double a_spec = 0.0;
};

namespace detail {

inline void require_constants(double c_f, double c_op, const char* where) {
  if (!(c_f > 0.0)) {
    throw NonPositiveConstantError(std::string(where) + ": C_F must be positive");
  }
  if (c_op < 0.0) {
    throw NonPositiveConstantError(std::string(where) + ": C_op must be nonnegative");
  }
}

}  // namespace detail

inline StepSizes matrix_step_sizes(const Matrix& g, const Matrix& feats, double c_f, double c_op) {
  detail::require_constants(c_f, c_op, "matrix_step_sizes");
  const SpectralSummary fs = spectral_summary(feats);
  StepSizes out;
  out.a_spec = c_f * fs.frob * fs.frob + c_op;
  out.a_gd = c_f * fs.op_norm * fs.op_norm;
  if (c_op > 0.0) {
    if (is_zero(g)) {
      throw ZeroGradientError("matrix_step_sizes: st(G) undefined for a zero gradient");
    }
    out.a_gd += c_op / spectral_summary(g).stable_rank;
  }
  return out;
}

inline StepSizes diag_step_sizes(const Vector& g, const Matrix& feats, double c_f, double c_op) {
  detail::require_constants(c_f, c_op, "diag_step_sizes");
  const SpectralSummary fs = spectral_summary(feats);
  StepSizes out;
  out.a_spec = c_f * fs.frob * fs.frob + c_op;
  out.a_gd = c_f * fs.op_norm * fs.op_norm;
  if (c_op > 0.0) {
    if (g.isZero(0.0)) {
      throw ZeroGradientError("diag_step_sizes: st undefined for a zero gradient");
    }
    const double g_max = g.cwiseAbs().maxCoeff();
    out.a_gd += c_op * g_max * g_max / g.squaredNorm();
  }
  return out;
}

/// Layered mixed update: blocks in the spectral set take the spectral step with
/// 1/a_Spec scaling, the rest take GD with 1/a_GD, and diagonal blocks take the
/// corresponding sign/coordinate analogue. Zero-gradient blocks are left
/// untouched. Pure: returns the updated blocks.
inline std::vector<BlockState> mixed_step(const std::vector<BlockState>& blocks,
                                          const std::vector<Matrix>& grads,
                                          const std::vector<Matrix>& feats, double c_f, double c_op,
                                          PolarMode polar_mode = PolarMode::Exact) {
  detail::require_constants(c_f, c_op, "mixed_step");
  if (blocks.size() != grads.size() || blocks.size() != feats.size()) {
    throw ShapeMismatchError("mixed_step: blocks, grads, feats must have equal length");
  }
  std::vector<BlockState> out = blocks;
  for (size_t i = 0; i < out.size(); ++i) {
    BlockState& blk = out[i];
    const Matrix& g = grads[i];
    require_same_shape(blk.W, g, "mixed_step");
    if (blk.W.cols() != feats[i].rows()) {
      throw ShapeMismatchError("mixed_step: block " + std::to_string(i) +
                               " expects activations with " + std::to_string(blk.W.cols()) +
                               " rows");
    }
    require_finite(g, "mixed_step");
    if (is_zero(g)) {
      continue;
    }
    if (blk.role == BlockRole::Diagonal) {
      if (blk.W.rows() != blk.W.cols()) {
        throw ShapeMismatchError("mixed_step: diagonal block must be square");
      }
      const Vector gamma = blk.W.diagonal();
      const Vector gd = g.diagonal();
      if (gd.isZero(0.0)) {
        continue;
      }
      const StepSizes a = diag_step_sizes(gd, feats[i], c_f, c_op);
      const Vector next = blk.spectral_set_member ? diag_sign_step(gamma, gd, a.a_spec)
                                                  : Vector(gamma - gd / a.a_gd);
      blk.W = next.asDiagonal();
      continue;
    }
    const StepSizes a = matrix_step_sizes(g, feats[i], c_f, c_op);
    blk.W = blk.spectral_set_member ? spec_step(blk.W, g, a.a_spec, polar_mode)
                                    : gd_step(blk.W, g, a.a_gd);
  }
  return out;
}

/// Rectangular partition of an m x k index grid. All supported schemes produce
/// axis-aligned rectangles, so footprints are stored as index lists derived
/// from the rectangles and the overlap multiplicities are counted exactly.
struct Partition {
  struct Block {
    Eigen::Index row0 = 0;
    Eigen::Index col0 = 0;
    Eigen::Index nrows = 0;
    Eigen::Index ncols = 0;
  };
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;
  std::vector<Block> blocks;
  std::vector<std::vector<Eigen::Index>> row_footprints;  // R_p
  std::vector<std::vector<Eigen::Index>> col_footprints;  // C_p
  Eigen::Index nu = 1;     // max over rows of how many blocks touch it
  Eigen::Index mu = 1;     // max over columns of how many blocks touch it
  Eigen::Index kappa = 1;  // min(nu, mu)
};

struct PartitionScheme {
  enum class Kind { RowShards, ColShards, Grid, Singletons };
  Kind kind = Kind::RowShards;
  Eigen::Index s1 = 1;  // shard count, or grid row count
  Eigen::Index s2 = 1;  // grid column count

  static PartitionScheme row_shards(Eigen::Index s) { return {Kind::RowShards, s, 1}; }
  static PartitionScheme col_shards(Eigen::Index s) { return {Kind::ColShards, 1, s}; }
  static PartitionScheme grid(Eigen::Index p, Eigen::Index q) { return {Kind::Grid, p, q}; }
  static PartitionScheme singletons() { return {Kind::Singletons, 0, 0}; }
};

namespace detail {

/// Shard boundaries for splitting dim into s contiguous pieces; the last piece
/// absorbs any remainder.
inline std::vector<std::pair<Eigen::Index, Eigen::Index>> shard_ranges(Eigen::Index dim,
                                                                       Eigen::Index s) {
  const Eigen::Index base = dim / s;
  std::vector<std::pair<Eigen::Index, Eigen::Index>> ranges;
  ranges.reserve(static_cast<size_t>(s));
  for (Eigen::Index i = 0; i < s; ++i) {
    const Eigen::Index start = i * base;
    const Eigen::Index len = i == s - 1 ? dim - start : base;
    ranges.emplace_back(start, len);
  }
  return ranges;
}

}  // namespace detail

inline Partition make_partition(Eigen::Index rows, Eigen::Index cols,
                                const PartitionScheme& scheme) {
  if (rows < 1 || cols < 1) {
    throw InvalidSchemeError("make_partition: dimensions must be positive");
  }
  using Kind = PartitionScheme::Kind;
  Eigen::Index row_cuts = 1;
  Eigen::Index col_cuts = 1;
  switch (scheme.kind) {
    case Kind::RowShards:
      row_cuts = scheme.s1;
      break;
    case Kind::ColShards:
      col_cuts = scheme.s2;
      break;
    case Kind::Grid:
      row_cuts = scheme.s1;
      col_cuts = scheme.s2;
      break;
    case Kind::Singletons:
      row_cuts = rows;
      col_cuts = cols;
      break;
  }
  if (row_cuts < 1 || row_cuts > rows || col_cuts < 1 || col_cuts > cols) {
    throw InvalidSchemeError("make_partition: shard counts must fit the dimensions");
  }

  Partition part;
  part.rows = rows;
  part.cols = cols;
  const auto rranges = detail::shard_ranges(rows, row_cuts);
  const auto cranges = detail::shard_ranges(cols, col_cuts);
  std::vector<Eigen::Index> row_count(static_cast<size_t>(rows), 0);
  std::vector<Eigen::Index> col_count(static_cast<size_t>(cols), 0);
  for (const auto& [r0, nr] : rranges) {
    for (const auto& [c0, nc] : cranges) {
      part.blocks.push_back({r0, c0, nr, nc});
      std::vector<Eigen::Index> rf(static_cast<size_t>(nr));
      std::vector<Eigen::Index> cf(static_cast<size_t>(nc));
      for (Eigen::Index i = 0; i < nr; ++i) {
        rf[static_cast<size_t>(i)] = r0 + i;
        ++row_count[static_cast<size_t>(r0 + i)];
      }
      for (Eigen::Index j = 0; j < nc; ++j) {
        cf[static_cast<size_t>(j)] = c0 + j;
        ++col_count[static_cast<size_t>(c0 + j)];
      }
      part.row_footprints.push_back(std::move(rf));
      part.col_footprints.push_back(std::move(cf));
    }
  }
  part.nu = *std::max_element(row_count.begin(), row_count.end());
  part.mu = *std::max_element(col_count.begin(), col_count.end());
  part.kappa = std::min(part.nu, part.mu);
  return part;
}

struct ShardwiseResult {
  Matrix W_next;
  double guaranteed_decrease = 0.0;
};

/// Partitioned spectral step: each shard of the gradient takes its own polar
/// step, all sharing the constant L = kappa ||A||_F^2 / n, and the guaranteed
/// one-step decrease (1 / 2L) sum_p ||G_p||_*^2 is returned alongside.
/// Zero shards are skipped; only an all-zero gradient is an error.
inline ShardwiseResult shardwise_spec_step(const Matrix& w, const Matrix& g, const Partition& part,
                                           const Matrix& a, Eigen::Index n) {
  require_same_shape(w, g, "shardwise_spec_step");
  if (w.rows() != part.rows || w.cols() != part.cols) {
    throw ShapeMismatchError("shardwise_spec_step: partition does not match W");
  }
  if (n < 1) {
    throw NonPositiveConstantError("shardwise_spec_step: n must be positive");
  }
  require_finite(g, "shardwise_spec_step");
  const double l_part =
      static_cast<double>(part.kappa) * a.squaredNorm() / static_cast<double>(n);
  if (!(l_part > 0.0)) {
    throw NonPositiveConstantError("shardwise_spec_step: L must be positive (A is zero?)");
  }
  ShardwiseResult out;
  out.W_next = w;
  bool any_nonzero = false;
  for (const auto& blk : part.blocks) {
    const Matrix gp = g.block(blk.row0, blk.col0, blk.nrows, blk.ncols);
    if (gp.isZero(0.0)) {
      continue;
    }
    any_nonzero = true;
    const double nuc = spectral_summary(gp).nuclear;
    out.W_next.block(blk.row0, blk.col0, blk.nrows, blk.ncols) -= (nuc / l_part) * polar_support(gp);
    out.guaranteed_decrease += nuc * nuc;
  }
  if (!any_nonzero) {
    throw ZeroGradientError("shardwise_spec_step: all shards are zero");
  }
  out.guaranteed_decrease /= 2.0 * l_part;
  return out;
}

/// Shardwise analogue of the nuclear rank: sum_p ||G_p||_*^2 / ||G||_F^2.
/// Always >= 1; the partitioned step beats plain GD when this exceeds
/// kappa * st(A).
inline double shardwise_nuclear_rank(const Matrix& g, const Partition& part) {
  require_nonzero(g, "shardwise_nuclear_rank");
  if (g.rows() != part.rows || g.cols() != part.cols) {
    throw ShapeMismatchError("shardwise_nuclear_rank: partition does not match G");
  }
  double acc = 0.0;
  for (const auto& blk : part.blocks) {
    const Matrix gp = g.block(blk.row0, blk.col0, blk.nrows, blk.ncols);
    if (gp.isZero(0.0)) {
      continue;
    }
    const double nuc = spectral_summary(gp).nuclear;
    acc += nuc * nuc;
  }
  return acc / g.squaredNorm();
}

}  // namespace spectralrank
