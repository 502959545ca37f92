#pragma once

#include <Eigen/Dense>
#include <string>

#include "spectralrank/errors.hpp"

namespace spectralrank {

// Dense double-precision matrices are the universal value type; Eigen supplies
// storage and arithmetic. Column-vs-row major is an implementation detail here
// since every consumer goes through (i,j) indexing or whole-matrix ops.
using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

inline void require_finite(const Matrix& m, const std::string& what) {
  if (!m.allFinite()) {
    throw NonFiniteError(what + ": non-finite entry");
  }
}

inline bool is_zero(const Matrix& m) { return m.size() == 0 || m.cwiseAbs().maxCoeff() == 0.0; }

inline void require_nonzero(const Matrix& m, const std::string& what) {
  require_finite(m, what);
  if (is_zero(m)) {
    throw ZeroMatrixError(what + ": all entries are zero");
  }
}

inline void require_same_shape(const Matrix& a, const Matrix& b, const std::string& what) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeMismatchError(what + ": " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                             " vs " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
  }
}

}  // namespace spectralrank
