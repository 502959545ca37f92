#pragma once

#include <cassert>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <vector>

#include "spectralrank/linalg.hpp"
#include "spectralrank/matrix.hpp"
#include "spectralrank/rng.hpp"

namespace spectralrank {

enum class RFVariant { Realizable, TeacherStudent };

/// One random-feature regression problem. Everything downstream (steps,
/// recursions, traces) reads from here, so the Gram matrices and smoothness
/// constants are precomputed once at generation time.
struct RFInstance {
  RFVariant variant = RFVariant::Realizable;
  Matrix A;                      // k x n features
  std::optional<Matrix> A_bar;   // teacher features (teacher-student only)
  Matrix Y;                      // m x n targets
  Matrix W_truth;                // m x k: planted solution or teacher head
  Matrix B;                      // (1/n) A A^T
  std::optional<Matrix> B_bar;   // (1/n) A_bar A^T
  double L_F = 0.0;              // ||A||_op^2 / n: smoothness in Frobenius geometry
  double L_op = 0.0;             // ||A||_F^2  / n: smoothness in operator geometry
  Eigen::Index n = 0;
  std::uint64_t seed = 0;
};

/// Parameters of a spiked Gram matrix B = S + bulk: rank-r signal with
/// eigenvalues on the scale d^exp_lo .. d^exp_hi over a well-conditioned bulk.
struct SpikedSpec {
  Eigen::Index d = 0;
  Eigen::Index k = 0;
  Eigen::Index spike_rank = 1;
  double exp_lo = 1.0;  // in (0, 1]
  double exp_hi = 1.0;  // in [exp_lo, 1]
  double bulk_lo = 1.0;
  double bulk_hi = 1.0;
};

/// Kernel profile of the ReLU arc-cosine covariance. Increasing on [-1,1],
/// phi(0)=0, phi(1)=pi-1, phi(-1)=-1.
inline double phi(double t) {
  if (std::abs(t) > 1.0 + 1e-12 || !std::isfinite(t)) {
    throw DomainError("phi: argument outside [-1, 1]");
  }
  t = std::clamp(t, -1.0, 1.0);
  return std::sqrt(1.0 - t * t) + (std::numbers::pi - std::acos(t)) * t - 1.0;
}

struct ReluKernel {
  Vector mu;     // E[sigma(Vx)] for x ~ N(0, I)
  Matrix sigma;  // Cov(sigma(Vx))
};

/// Mean and covariance of ReLU features a = sigma(Vx) over standard Gaussian
/// inputs, in closed form: mu_i = |v_i| / sqrt(2*pi) and
/// Sigma_ij = (|v_i||v_j| / 2*pi) * phi(cos angle(v_i, v_j)).
/// The normalization of mu is pinned by E[sigma(g)] = s/sqrt(2*pi) for
/// g ~ N(0, s^2) together with mu_i^2 + Sigma_ii = E[sigma(g)^2] = s^2/2;
/// the Monte-Carlo tests hold it to three standard errors.
inline ReluKernel relu_kernel(const Matrix& v) {
  require_finite(v, "relu_kernel");
  const Eigen::Index k = v.rows();
  Vector norms(k);
  for (Eigen::Index i = 0; i < k; ++i) {
    norms(i) = v.row(i).norm();
    if (norms(i) == 0.0) {
      throw ZeroRowError("relu_kernel: row " + std::to_string(i) + " of V is zero");
    }
  }
  ReluKernel out;
  out.mu = norms / std::sqrt(2.0 * std::numbers::pi);
  out.sigma = Matrix(k, k);
  const double inv_two_pi = 1.0 / (2.0 * std::numbers::pi);
  for (Eigen::Index i = 0; i < k; ++i) {
    for (Eigen::Index j = 0; j <= i; ++j) {
      const double cosine = std::clamp(v.row(i).dot(v.row(j)) / (norms(i) * norms(j)), -1.0, 1.0);
      const double val = norms(i) * norms(j) * inv_two_pi * phi(cosine);
      out.sigma(i, j) = val;
      out.sigma(j, i) = val;
    }
  }
  return out;
}

struct ReluCrossKernel {
  Vector nu;     // E[sigma(V_bar x)]
  Vector mu;     // E[sigma(V x)]
  Matrix sigma;  // Cov(sigma(V_bar x), sigma(V x)), rows(V_bar) x rows(V)
};

/// Cross-moment version of relu_kernel for two feature banks sharing the same
/// Gaussian input; the teacher-student Gram (1/n) A_bar A^T concentrates
/// around nu mu^T + sigma.
inline ReluCrossKernel relu_cross_kernel(const Matrix& v_bar, const Matrix& v) {
  require_finite(v_bar, "relu_cross_kernel");
  require_finite(v, "relu_cross_kernel");
  if (v_bar.cols() != v.cols()) {
    throw ShapeMismatchError("relu_cross_kernel: input dims differ");
  }
  const Eigen::Index kb = v_bar.rows();
  const Eigen::Index k = v.rows();
  Vector norms_b(kb), norms(k);
  for (Eigen::Index i = 0; i < kb; ++i) {
    norms_b(i) = v_bar.row(i).norm();
    if (norms_b(i) == 0.0) {
      throw ZeroRowError("relu_cross_kernel: zero row in V_bar");
    }
  }
  for (Eigen::Index j = 0; j < k; ++j) {
    norms(j) = v.row(j).norm();
    if (norms(j) == 0.0) {
      throw ZeroRowError("relu_cross_kernel: zero row in V");
    }
  }
  ReluCrossKernel out;
  const double root_two_pi = std::sqrt(2.0 * std::numbers::pi);
  out.nu = norms_b / root_two_pi;
  out.mu = norms / root_two_pi;
  out.sigma = Matrix(kb, k);
  const double inv_two_pi = 1.0 / (2.0 * std::numbers::pi);
  for (Eigen::Index i = 0; i < kb; ++i) {
    for (Eigen::Index j = 0; j < k; ++j) {
      const double cosine =
          std::clamp(v_bar.row(i).dot(v.row(j)) / (norms_b(i) * norms(j)), -1.0, 1.0);
      out.sigma(i, j) = norms_b(i) * norms(j) * inv_two_pi * phi(cosine);
    }
  }
  return out;
}

namespace detail {

inline Matrix relu_of(const Matrix& m) { return m.cwiseMax(0.0); }

/// Exactly symmetric (1/n) A A^T via a rank update on the lower triangle.
inline Matrix gram_of(const Matrix& a, Eigen::Index n) {
  Matrix b = Matrix::Zero(a.rows(), a.rows());
  b.selfadjointView<Eigen::Lower>().rankUpdate(a, 1.0 / static_cast<double>(n));
  return b.selfadjointView<Eigen::Lower>();
}

inline void finalize_constants(RFInstance& inst) {
  const SpectralSummary s = spectral_summary(inst.A);
  inst.L_F = s.op_norm * s.op_norm / static_cast<double>(inst.n);
  inst.L_op = s.frob * s.frob / static_cast<double>(inst.n);
}

inline Matrix orthonormal_columns(Rng& rng, Eigen::Index rows, Eigen::Index cols) {
  const Matrix g = rng.gaussian(rows, cols);
  Eigen::HouseholderQR<Matrix> qr(g);
  Matrix q = qr.householderQ() * Matrix::Identity(rows, cols);
  const Matrix r = qr.matrixQR().topRows(cols).triangularView<Eigen::Upper>();
  for (Eigen::Index j = 0; j < cols; ++j) {
    if (r(j, j) < 0) {
      q.col(j) *= -1.0;
    }
  }
  return q;
}

}  // namespace detail

struct RealizableOptions {
  bool unit_truth_variance = false;  // W_truth ~ N(0,1) instead of N(0,1/m)
};

/// Planted regression on ReLU random features: A = relu(V X) with
/// V ~ N(0, 1/d) rows, X standard Gaussian, Y = W_truth A.
inline RFInstance gen_realizable(Eigen::Index d, Eigen::Index k, Eigen::Index m, Eigen::Index n,
                                 std::uint64_t seed, RealizableOptions opts = {}) {
  assert(d >= 1 && k >= 1 && m >= 1 && n >= 1);
  Rng rv(seed, "realizable.features.v");
  Rng rx(seed, "realizable.data.x");
  Rng rw(seed, "realizable.truth.w");
  RFInstance inst;
  inst.variant = RFVariant::Realizable;
  inst.n = n;
  inst.seed = seed;
  const Matrix v = rv.gaussian(k, d, 1.0 / std::sqrt(static_cast<double>(d)));
  const Matrix x = rx.gaussian(d, n);
  inst.A = detail::relu_of(v * x);
  inst.W_truth = rw.gaussian(m, k, opts.unit_truth_variance ? 1.0 : 1.0 / std::sqrt(static_cast<double>(m)));
  inst.Y = inst.W_truth * inst.A;
  inst.B = detail::gram_of(inst.A, n);
  detail::finalize_constants(inst);
  return inst;
}

struct TeacherStudentOptions {
  bool shared_features = false;  // force V_bar = V (degenerates to realizable)
  bool unit_truth_variance = false;
};

/// Teacher-student variant: targets come from an independent feature bank
/// A_bar = relu(V_bar X) through the teacher head W_truth; the student fits
/// with its own features A = relu(V X) over the same data X.
inline RFInstance gen_teacher_student(Eigen::Index d, Eigen::Index k, Eigen::Index m,
                                      Eigen::Index n, std::uint64_t seed,
                                      TeacherStudentOptions opts = {}) {
  assert(d >= 1 && k >= 1 && m >= 1 && n >= 1);
  Rng rv(seed, "ts.features.v");
  Rng rvb(seed, "ts.features.vbar");
  Rng rx(seed, "ts.data.x");
  Rng rw(seed, "ts.truth.w");
  RFInstance inst;
  inst.variant = RFVariant::TeacherStudent;
  inst.n = n;
  inst.seed = seed;
  const double vstd = 1.0 / std::sqrt(static_cast<double>(d));
  const Matrix v = rv.gaussian(k, d, vstd);
  const Matrix v_bar = opts.shared_features ? v : rvb.gaussian(k, d, vstd);
  const Matrix x = rx.gaussian(d, n);
  inst.A = detail::relu_of(v * x);
  inst.A_bar = detail::relu_of(v_bar * x);
  inst.W_truth = rw.gaussian(m, k, opts.unit_truth_variance ? 1.0 : 1.0 / std::sqrt(static_cast<double>(m)));
  inst.Y = inst.W_truth * *inst.A_bar;
  inst.B = detail::gram_of(inst.A, n);
  inst.B_bar = (*inst.A_bar * inst.A.transpose()) / static_cast<double>(n);
  detail::finalize_constants(inst);
  return inst;
}

/// B = U Q U^T + Sigma: a rank-r spike with log-uniform magnitudes in
/// [c1 d^l, c2 d^u] over a rotated well-conditioned diagonal bulk in [c1, c2].
inline Matrix gen_spiked_gram(const SpikedSpec& spec, std::uint64_t seed) {
  if (spec.d < 1 || spec.k < 1 || spec.spike_rank < 1 || spec.spike_rank > spec.k ||
      spec.exp_lo <= 0.0 || spec.exp_lo > 1.0 || spec.exp_hi < spec.exp_lo || spec.exp_hi > 1.0 ||
      spec.bulk_lo <= 0.0 || spec.bulk_hi < spec.bulk_lo) {
    throw InvalidSpecError("gen_spiked_gram: invalid SpikedSpec");
  }
  Rng rframe(seed, "spiked.frame");
  Rng rspike(seed, "spiked.magnitudes");
  Rng rbulk(seed, "spiked.bulk");
  Rng rrot(seed, "spiked.rotation");

  const Eigen::Index k = spec.k;
  const Eigen::Index r = spec.spike_rank;
  const double dreal = static_cast<double>(spec.d);
  const Matrix u = detail::orthonormal_columns(rframe, k, r);
  Vector q(r);
  const double log_lo = std::log(spec.bulk_lo * std::pow(dreal, spec.exp_lo));
  const double log_hi = std::log(spec.bulk_hi * std::pow(dreal, spec.exp_hi));
  for (Eigen::Index i = 0; i < r; ++i) {
    q(i) = std::exp(rspike.next_uniform(std::min(log_lo, log_hi), std::max(log_lo, log_hi)));
  }
  Vector bulk(k);
  for (Eigen::Index i = 0; i < k; ++i) {
    bulk(i) = rbulk.next_uniform(spec.bulk_lo, spec.bulk_hi);
  }
  const Matrix rot = detail::orthonormal_columns(rrot, k, k);
  Matrix b = u * q.asDiagonal() * u.transpose() + rot * bulk.asDiagonal() * rot.transpose();
  b = 0.5 * (b + b.transpose()).eval();
  return b;
}

/// Wraps a spiked Gram matrix into a full RFInstance by planting features
/// A = sqrt(n) [B^{1/2}, 0] so that (1/n) A A^T reproduces B to rounding.
/// Requires n >= k so the square root fits.
inline RFInstance spiked_instance(const SpikedSpec& spec, Eigen::Index m, Eigen::Index n,
                                  std::uint64_t seed) {
  if (n < spec.k) {
    throw InvalidSpecError("spiked_instance: need n >= k to embed the Gram matrix");
  }
  const Matrix b_target = gen_spiked_gram(spec, seed);
  Eigen::SelfAdjointEigenSolver<Matrix> es(b_target);
  const Vector lam = es.eigenvalues().cwiseMax(0.0);
  const Matrix root = es.eigenvectors() * lam.cwiseSqrt().asDiagonal() * es.eigenvectors().transpose();

  Rng rw(seed, "spiked.truth");
  RFInstance inst;
  inst.variant = RFVariant::Realizable;
  inst.n = n;
  inst.seed = seed;
  inst.A = Matrix::Zero(spec.k, n);
  inst.A.leftCols(spec.k) = std::sqrt(static_cast<double>(n)) * root;
  inst.W_truth = rw.gaussian(m, spec.k, 1.0 / std::sqrt(static_cast<double>(m)));
  inst.Y = inst.W_truth * inst.A;
  inst.B = detail::gram_of(inst.A, n);
  detail::finalize_constants(inst);
  return inst;
}

struct LossGrad {
  double loss = 0.0;
  Matrix grad;
};

/// Half mean-squared loss and its gradient in Gram form:
/// G = W B - W_truth B (realizable) or W B - W_truth B_bar (teacher-student).
/// The Gram form equals (1/n)(W A - Y) A^T; tests hold the two routes to
/// 1e-10 of each other.
inline LossGrad rf_loss_grad(const Matrix& w, const RFInstance& inst) {
  if (w.cols() != inst.A.rows() || w.rows() != inst.Y.rows()) {
    throw ShapeMismatchError("rf_loss_grad: W is " + std::to_string(w.rows()) + "x" +
                             std::to_string(w.cols()));
  }
  LossGrad out;
  const Matrix residual = w * inst.A - inst.Y;
  out.loss = 0.5 * residual.squaredNorm() / static_cast<double>(inst.n);
  if (inst.variant == RFVariant::TeacherStudent) {
    out.grad = w * inst.B - inst.W_truth * *inst.B_bar;
  } else {
    out.grad = w * inst.B - inst.W_truth * inst.B;
  }
  return out;
}

namespace detail {

inline Matrix initial_gradient(const RFInstance& inst) {
  if (inst.variant == RFVariant::TeacherStudent) {
    return -inst.W_truth * *inst.B_bar;
  }
  return -inst.W_truth * inst.B;
}

}  // namespace detail

/// Gradient after t full-batch GD steps from W_0 = 0, without running GD:
/// G_t = G_0 (I - eta B)^t, applied as t right-multiplications so the result
/// does not depend on an eigensolver. The eigendecomposition fast path exists
/// for long horizons and is validated against the product form.
inline Matrix gradient_recursion(const RFInstance& inst, double eta, int t,
                                 bool eigen_fast_path = false) {
  assert(eta > 0.0);
  assert(t >= 0);
  const Matrix g0 = detail::initial_gradient(inst);
  if (t == 0) {
    return g0;
  }
  if (eigen_fast_path) {
    Eigen::SelfAdjointEigenSolver<Matrix> es(inst.B);
    Vector decay(inst.B.rows());
    for (Eigen::Index i = 0; i < decay.size(); ++i) {
      decay(i) = std::pow(1.0 - eta * es.eigenvalues()(i), static_cast<double>(t));
    }
    return g0 * es.eigenvectors() * decay.asDiagonal() * es.eigenvectors().transpose();
  }
  Matrix g = g0;
  for (int step = 0; step < t; ++step) {
    g -= eta * (g * inst.B);
  }
  return g;
}

/// Step-size rules tied to the top of B's spectrum.
struct EtaRule {
  enum class Kind { MaxPlusC, Fraction };
  Kind kind = Kind::MaxPlusC;
  double value = 1.0;

  static EtaRule max_plus_c(double c) { return {Kind::MaxPlusC, c}; }
  static EtaRule fraction(double f) { return {Kind::Fraction, f}; }

  double eta_for(double b_op) const {
    if (kind == Kind::MaxPlusC) {
      return 1.0 / (value + b_op);
    }
    return value / b_op;
  }
};

struct TracePoint {
  int t = 0;
  double nr = 0.0;
  double loss = 0.0;
};

/// Nuclear rank and loss along the GD trajectory from W_0 = 0. The gradient is
/// advanced by the recursion (incremental right-multiplication by I - eta B);
/// the weights are advanced alongside only to price the loss.
inline std::vector<TracePoint> nuclear_rank_trace(const RFInstance& inst, const EtaRule& rule,
                                                  int t_max) {
  assert(t_max >= 1);
  const double b_op = spectral_summary(inst.B).op_norm;
  const double eta = rule.eta_for(b_op);
  Matrix w = Matrix::Zero(inst.W_truth.rows(), inst.W_truth.cols());
  Matrix g = detail::initial_gradient(inst);
  std::vector<TracePoint> trace;
  trace.reserve(static_cast<size_t>(t_max) + 1);
  for (int t = 0; t <= t_max; ++t) {
    TracePoint p;
    p.t = t;
    p.loss = 0.5 * (w * inst.A - inst.Y).squaredNorm() / static_cast<double>(inst.n);
    // a vanished gradient means the quadratic is solved; record the floor value
    p.nr = is_zero(g) ? 1.0 : spectral_summary(g).nuclear_rank;
    trace.push_back(p);
    w -= eta * g;
    g -= eta * (g * inst.B);
  }
  return trace;
}

}  // namespace spectralrank
