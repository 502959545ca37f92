#pragma once

#include <Eigen/Dense>
#include <Eigen/SVD>
#include <cassert>
#include <cmath>
#include <vector>

#include "spectralrank/errors.hpp"
#include "spectralrank/matrix.hpp"

namespace spectralrank {

/// Every norm/rank diagnostic of one matrix, all derived from a single SVD.
struct SpectralSummary {
  double frob = 0.0;
  double op_norm = 0.0;
  double nuclear = 0.0;
  double stable_rank = 0.0;     // frob^2 / op_norm^2
  double nuclear_rank = 0.0;    // nuclear^2 / frob^2
  double effective_rank = 0.0;  // nuclear / op_norm
  std::vector<double> singular_values;  // descending
};

namespace detail {

// Divide-and-conquer SVD for anything sizable, Jacobi for tiny inputs where
// BDCSVD just forwards anyway. Values-only when factors are not needed.
// Wide inputs are transposed first so M and M^T go through the identical
// computation: transpose invariance of the summary then holds bitwise, not
// merely up to rounding.
inline Eigen::VectorXd values_oriented(const Matrix& tall) {
  if (tall.rows() < 16) {
    return Eigen::JacobiSVD<Matrix>(tall).singularValues();
  }
  return Eigen::BDCSVD<Matrix>(tall).singularValues();
}

inline Eigen::VectorXd singular_values_of(const Matrix& m) {
  if (m.rows() >= m.cols()) {
    return values_oriented(m);
  }
  return values_oriented(m.transpose());
}

}  // namespace detail

inline SpectralSummary spectral_summary(const Matrix& m) {
  require_nonzero(m, "spectral_summary");
  const Eigen::VectorXd sv = detail::singular_values_of(m);
  SpectralSummary s;
  s.singular_values.assign(sv.data(), sv.data() + sv.size());
  s.op_norm = sv(0);
  s.frob = std::sqrt(sv.squaredNorm());
  s.nuclear = sv.sum();
  s.stable_rank = (s.frob * s.frob) / (s.op_norm * s.op_norm);
  s.nuclear_rank = (s.nuclear * s.nuclear) / (s.frob * s.frob);
  s.effective_rank = s.nuclear / s.op_norm;
  return s;
}

/// Polar factor UV^T from the thin SVD. Zero singular values are not
/// special-cased: the returned factor is then one valid member of the
/// subdifferential of the nuclear norm, which is all the descent bounds use
/// (they only need <M, P> = nuclear norm of M).
inline Matrix polar_exact(const Matrix& m) {
  require_nonzero(m, "polar_exact");
  if (std::max(m.rows(), m.cols()) < 16) {
    Eigen::JacobiSVD<Matrix> svd(m, Eigen::ComputeThinU | Eigen::ComputeThinV);
    return svd.matrixU() * svd.matrixV().transpose();
  }
  Eigen::BDCSVD<Matrix> svd(m, Eigen::ComputeThinU | Eigen::ComputeThinV);
  return svd.matrixU() * svd.matrixV().transpose();
}

/// Polar direction restricted to the numerical rank of M: only singular
/// directions with sigma above max(rows, cols) * eps * sigma_max contribute.
/// Coincides with polar_exact on full-rank inputs. On rank-deficient ones the
/// null directions carry no motion, which is also where Newton-Schulz lands
/// (zero singular values are fixed points of its cubic map); the update rules
/// step along this direction, so a rank-one gradient moves the weights only
/// inside its own rank-one plane.
inline Matrix polar_support(const Matrix& m) {
  require_nonzero(m, "polar_support");
  const auto finish = [&m](const auto& svd) {
    const auto& sv = svd.singularValues();
    const double cut = static_cast<double>(std::max(m.rows(), m.cols())) *
                       std::numeric_limits<double>::epsilon() * sv(0);
    Eigen::Index r = 0;
    while (r < sv.size() && sv(r) > cut) {
      ++r;
    }
    return Matrix(svd.matrixU().leftCols(r) * svd.matrixV().leftCols(r).transpose());
  };
  if (std::max(m.rows(), m.cols()) < 16) {
    return finish(Eigen::JacobiSVD<Matrix>(m, Eigen::ComputeThinU | Eigen::ComputeThinV));
  }
  return finish(Eigen::BDCSVD<Matrix>(m, Eigen::ComputeThinU | Eigen::ComputeThinV));
}

struct NewtonSchulzResult {
  Matrix polar;
  int iters_used = 0;
};

/// Cubic Newton-Schulz toward the polar factor. Frobenius pre-normalization
/// puts every singular value in (0, 1], where the cubic map x -> 1.5x - 0.5x^3
/// is monotone toward 1, so the iteration is contractive without any spectral
/// norm estimate. The orthogonality residual is measured on the smaller Gram
/// side. Three consecutive residual increases raise DivergedError; callers
/// fall back to polar_exact.
inline NewtonSchulzResult polar_newton_schulz(const Matrix& m, int max_iters = 60,
                                              double tol = 1e-9) {
  require_nonzero(m, "polar_newton_schulz");
  assert(max_iters >= 1);
  assert(tol > 0.0);

  Matrix x = m / m.norm();
  const bool tall = x.rows() >= x.cols();
  const Eigen::Index side = tall ? x.cols() : x.rows();
  const Matrix eye = Matrix::Identity(side, side);

  double prev_residual = std::numeric_limits<double>::infinity();
  int rising = 0;
  int iters = 0;
  for (;;) {
    const Matrix gram = tall ? Matrix(x.transpose() * x) : Matrix(x * x.transpose());
    const double residual = (gram - eye).norm();
    if (residual <= tol || iters >= max_iters) {
      return {x, iters};
    }
    if (residual > prev_residual * (1.0 + 1e-12)) {
      if (++rising >= 3) {
        throw DivergedError("polar_newton_schulz: residual rose 3 iterations in a row");
      }
    } else {
      rising = 0;
    }
    prev_residual = residual;
    if (tall) {
      x = 1.5 * x - 0.5 * (x * gram);
    } else {
      x = 1.5 * x - 0.5 * (gram * x);
    }
    ++iters;
  }
}

}  // namespace spectralrank
