#pragma once

#include <cassert>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "spectralrank/diagnostics.hpp"
#include "spectralrank/matrix.hpp"
#include "spectralrank/models.hpp"
#include "spectralrank/optim.hpp"
#include "spectralrank/propagation.hpp"
#include "spectralrank/rng.hpp"

namespace spectralrank {

enum class LossKind { HalfMSE };

/// An L-layer MLP, widths d_0..d_L. Hidden layers apply the activation; the
/// last layer is linear so a one-hidden-layer linear net reduces exactly to
/// the random-features quadratic.
struct MLPSpec {
  std::vector<Eigen::Index> widths;
  ActivationSpec activation = ActivationSpec::relu();
  LossKind loss = LossKind::HalfMSE;

  Eigen::Index depth() const { return static_cast<Eigen::Index>(widths.size()) - 1; }

  void validate() const {
    if (widths.size() < 3) {
      throw ShapeMismatchError("MLPSpec: need at least two layers (widths d0..dL, L >= 2)");
    }
    for (const auto w : widths) {
      if (w < 1) {
        throw ShapeMismatchError("MLPSpec: every width must be positive");
      }
    }
  }
};

/// Everything a forward (and, for the MLP, backward) pass touches. MLP runs
/// fill the per-layer vectors; the attention block fills the named fields.
struct BlockCapture {
  std::vector<Matrix> preact;   // X_l = W_l A_{l-1}
  std::vector<Matrix> postact;  // A_l (A_L has no activation)
  std::vector<Matrix> grad;     // G_l = dLoss/dW_l

  Matrix a_rms;                  // RMSNorm(X)
  std::vector<Matrix> p_heads;   // column-stochastic attention weights
  Matrix h;                      // head outputs, row-concatenated
  Matrix x_att;                  // X + W_O H
  Matrix a_rms_mlp;              // RMSNorm(X_att)
  Matrix b;                      // sigma(W_1 A_rms_mlp)
  Matrix x_plus;                 // X_att + W_2 B
};

inline std::vector<Matrix> mlp_init(const MLPSpec& spec, std::uint64_t seed) {
  spec.validate();
  std::vector<Matrix> weights;
  weights.reserve(static_cast<size_t>(spec.depth()));
  for (size_t l = 1; l < spec.widths.size(); ++l) {
    Rng rng(seed, "mlp.init." + std::to_string(l));
    weights.push_back(rng.gaussian(spec.widths[l], spec.widths[l - 1],
                                   1.0 / std::sqrt(static_cast<double>(spec.widths[l - 1]))));
  }
  return weights;
}

/// Full-batch forward and reverse-mode backward. Loss is (1/2n)||A_L - Y||_F^2.
inline std::pair<double, BlockCapture> mlp_forward_backward(const MLPSpec& spec,
                                                            const std::vector<Matrix>& weights,
                                                            const Matrix& x, const Matrix& y) {
  spec.validate();
  const auto layers = static_cast<size_t>(spec.depth());
  if (weights.size() != layers) {
    throw ShapeMismatchError("mlp_forward_backward: weight count does not match widths");
  }
  if (x.rows() != spec.widths[0]) {
    throw ShapeMismatchError("mlp_forward_backward: X rows must equal widths[0]");
  }
  if (y.rows() != spec.widths.back() || y.cols() != x.cols()) {
    throw ShapeMismatchError("mlp_forward_backward: Y must be widths[L] x n");
  }
  for (size_t l = 0; l < layers; ++l) {
    if (weights[l].rows() != spec.widths[l + 1] || weights[l].cols() != spec.widths[l]) {
      throw ShapeMismatchError("mlp_forward_backward: weight " + std::to_string(l + 1) +
                               " has the wrong shape");
    }
  }
  const auto n = static_cast<double>(x.cols());

  BlockCapture cap;
  cap.preact.reserve(layers);
  cap.postact.reserve(layers);
  Matrix a = x;
  for (size_t l = 0; l < layers; ++l) {
    Matrix z = weights[l] * a;
    a = (l + 1 < layers) ? spec.activation.apply(z) : z;
    cap.preact.push_back(std::move(z));
    cap.postact.push_back(a);
  }
  const Matrix resid = cap.postact.back() - y;
  const double loss = resid.squaredNorm() / (2.0 * n);

  cap.grad.assign(layers, Matrix());
  Matrix delta = resid / n;
  for (size_t l = layers; l-- > 0;) {
    const Matrix& below = l == 0 ? x : cap.postact[l - 1];
    cap.grad[l] = delta * below.transpose();
    if (l > 0) {
      delta = (weights[l].transpose() * delta)
                  .cwiseProduct(spec.activation.apply_derivative(cap.preact[l - 1]));
    }
  }
  return {loss, std::move(cap)};
}

struct AttentionBlockParams {
  Matrix w_q, w_k, w_v, w_o;  // d_model x d_model
  Matrix w1;                  // k_mlp x d_model
  Matrix w2;                  // d_model x k_mlp
  ActivationSpec act = ActivationSpec::gelu();
  int n_head = 1;
  bool causal = false;
};

inline AttentionBlockParams attention_block_init(Eigen::Index d_model, Eigen::Index k_mlp,
                                                 const ActivationSpec& act, int n_head,
                                                 std::uint64_t seed) {
  AttentionBlockParams p;
  const double s_d = 1.0 / std::sqrt(static_cast<double>(d_model));
  const double s_k = 1.0 / std::sqrt(static_cast<double>(k_mlp));
  p.w_q = Rng(seed, "attn.wq").gaussian(d_model, d_model, s_d);
  p.w_k = Rng(seed, "attn.wk").gaussian(d_model, d_model, s_d);
  p.w_v = Rng(seed, "attn.wv").gaussian(d_model, d_model, s_d);
  p.w_o = Rng(seed, "attn.wo").gaussian(d_model, d_model, s_d);
  p.w1 = Rng(seed, "attn.w1").gaussian(k_mlp, d_model, s_d);
  p.w2 = Rng(seed, "attn.w2").gaussian(d_model, k_mlp, s_k);
  p.act = act;
  p.n_head = n_head;
  return p;
}

/// One decoder-style block: RMSNorm, multi-head attention with softmax over
/// d_model^{-1/2} K^T Q scores, residual add, RMSNorm, MLP expansion, residual
/// add. All intermediates captured.
inline BlockCapture attention_block_forward(const AttentionBlockParams& params, const Matrix& x) {
  const Eigen::Index d = x.rows();
  const Eigen::Index n = x.cols();
  if (params.w_q.rows() != d || params.w_q.cols() != d || params.w_k.rows() != d ||
      params.w_k.cols() != d || params.w_v.rows() != d || params.w_v.cols() != d ||
      params.w_o.rows() != d || params.w_o.cols() != d) {
    throw ShapeMismatchError("attention_block_forward: projection shapes must be d_model^2");
  }
  if (params.w1.cols() != d || params.w2.rows() != d ||
      params.w2.cols() != params.w1.rows()) {
    throw ShapeMismatchError("attention_block_forward: MLP shapes inconsistent with d_model");
  }
  if (params.n_head < 1 || d % params.n_head != 0) {
    throw ShapeMismatchError("attention_block_forward: d_model must split evenly across heads");
  }
  BlockCapture cap;
  cap.a_rms = rms_normalize(x);
  const Matrix q = params.w_q * cap.a_rms;
  const Matrix k = params.w_k * cap.a_rms;
  const Matrix v = params.w_v * cap.a_rms;
  const Eigen::Index d_h = d / params.n_head;
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  cap.h = Matrix(d, n);
  for (int head = 0; head < params.n_head; ++head) {
    const Eigen::Index r0 = head * d_h;
    const Matrix scores = scale * (k.middleRows(r0, d_h).transpose() * q.middleRows(r0, d_h));
    Matrix p = Matrix::Zero(n, n);
    for (Eigen::Index t = 0; t < n; ++t) {
      const Eigen::Index support = params.causal ? t + 1 : n;
      const Vector col = scores.col(t).head(support);
      const Vector shifted = (col.array() - col.maxCoeff()).exp();
      p.col(t).head(support) = shifted / shifted.sum();
    }
    cap.h.middleRows(r0, d_h) = v.middleRows(r0, d_h) * p;
    cap.p_heads.push_back(std::move(p));
  }
  cap.x_att = x + params.w_o * cap.h;
  cap.a_rms_mlp = rms_normalize(cap.x_att);
  cap.b = params.act.apply(params.w1 * cap.a_rms_mlp);
  cap.x_plus = cap.x_att + params.w2 * cap.b;
  return cap;
}

enum class OptimizerKind { GD, SpecGD, Mixed };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::GD;
  PolarMode polar_mode = PolarMode::Exact;
  double c_op = 0.0;   // operator-norm perturbation constant in the step sizes
  double alpha = 0.0;  // shift fed to the recorded criterion, not to the steps
  // Mixed only: 1-based layer indices taking spectral steps; unset means the
  // internal layers 2..L-1, keeping the first and last on Euclidean steps.
  std::optional<std::vector<int>> spectral_set;
};

/// One step's worth of diagnostics: the loss before the step, the per-block
/// criterion quantities, and the decrease the majorization promises for the
/// step actually taken.
struct TraceRecord {
  int step = 0;
  double loss = 0.0;
  std::vector<double> nr;        // nuclear rank of each block gradient
  std::vector<double> st;        // stable rank of each block's input features
  std::vector<double> ratio;     // nr / st
  std::vector<int> favored;      // 1 where the spectral step wins the bound race
  std::vector<double> grad_frob;
  double predicted_decrease = 0.0;
};

/// Full-batch training on the random-features quadratic: plain gradient
/// descent with 1/L_F or the spectral step with ||G||_*/L_op, from a given W0.
/// Records the criterion trace and the guaranteed one-step decrease.
inline std::vector<TraceRecord> train_rf(const RFInstance& inst, const Matrix& w0,
                                         const OptimizerConfig& cfg, int steps) {
  assert(steps >= 1);
  if (cfg.kind == OptimizerKind::Mixed) {
    throw InvalidSpecError("train_rf: the quadratic has one block; use GD or SpecGD");
  }
  const double st_a = inst.L_op / inst.L_F;  // st(A) exactly, by construction
  Matrix w = w0;
  std::vector<TraceRecord> trace;
  trace.reserve(static_cast<size_t>(steps));
  for (int t = 0; t < steps; ++t) {
    const LossGrad lg = rf_loss_grad(w, inst);
    TraceRecord rec;
    rec.step = t;
    rec.loss = lg.loss;
    rec.st = {st_a};
    if (is_zero(lg.grad)) {
      rec.nr = {0.0};
      rec.ratio = {0.0};
      rec.favored = {0};
      rec.grad_frob = {0.0};
      rec.predicted_decrease = 0.0;
      trace.push_back(std::move(rec));
      continue;  // stationary: nothing to step
    }
    const SpectralSummary gs = spectral_summary(lg.grad);
    rec.nr = {gs.nuclear_rank};
    rec.ratio = {gs.nuclear_rank / st_a};
    rec.favored = {gs.nuclear_rank >= st_a ? 1 : 0};
    rec.grad_frob = {gs.frob};
    if (cfg.kind == OptimizerKind::GD) {
      rec.predicted_decrease = gs.frob * gs.frob / (2.0 * inst.L_F);
      w = gd_step(w, lg.grad, inst.L_F);
    } else {
      rec.predicted_decrease = gs.nuclear * gs.nuclear / (2.0 * inst.L_op);
      w = spec_step(w, lg.grad, inst.L_op, cfg.polar_mode);
    }
    trace.push_back(std::move(rec));
  }
  return trace;
}

/// Full-batch training of the MLP through the blockwise mixed step. GD and
/// SpecGD are the empty and full spectral sets; Mixed defaults to the internal
/// layers. Step sizes come from the same helpers the optimizer uses, so the
/// recorded predicted decreases match the steps exactly.
inline std::vector<TraceRecord> train_mlp(const MLPSpec& spec, std::vector<Matrix> weights,
                                          const Matrix& x, const Matrix& y,
                                          const OptimizerConfig& cfg, int steps) {
  assert(steps >= 1);
  spec.validate();
  const auto layers = static_cast<size_t>(spec.depth());
  std::vector<bool> spectral(layers, false);
  switch (cfg.kind) {
    case OptimizerKind::GD:
      break;
    case OptimizerKind::SpecGD:
      spectral.assign(layers, true);
      break;
    case OptimizerKind::Mixed:
      if (cfg.spectral_set) {
        for (const int l : *cfg.spectral_set) {
          if (l < 1 || static_cast<size_t>(l) > layers) {
            throw InvalidSpecError("train_mlp: spectral_set entry " + std::to_string(l) +
                                   " is not a layer index");
          }
          spectral[static_cast<size_t>(l - 1)] = true;
        }
      } else {
        for (size_t l = 1; l + 1 < layers; ++l) {
          spectral[l] = true;
        }
      }
      break;
  }
  const double c_f = 1.0 / static_cast<double>(x.cols());

  std::vector<TraceRecord> trace;
  trace.reserve(static_cast<size_t>(steps));
  for (int t = 0; t < steps; ++t) {
    auto [loss, cap] = mlp_forward_backward(spec, weights, x, y);
    TraceRecord rec;
    rec.step = t;
    rec.loss = loss;

    std::vector<BlockState> blocks(layers);
    std::vector<Matrix> feats(layers);
    for (size_t l = 0; l < layers; ++l) {
      blocks[l].W = weights[l];
      blocks[l].spectral_set_member = spectral[l];
      feats[l] = l == 0 ? x : cap.postact[l - 1];
      if (is_zero(cap.grad[l])) {
        // A dead block: record the feature rank if there is one, make the
        // criterion quantities explicit zeros, and take no step here.
        rec.nr.push_back(0.0);
        rec.st.push_back(is_zero(feats[l]) ? 0.0 : spectral_summary(feats[l]).stable_rank);
        rec.ratio.push_back(0.0);
        rec.favored.push_back(0);
        rec.grad_frob.push_back(0.0);
        continue;
      }
      const CriterionReport crit = layer_criterion(cap.grad[l], feats[l], cfg.alpha);
      rec.nr.push_back(crit.nr_gradient);
      rec.st.push_back(crit.st_activation);
      rec.ratio.push_back(crit.ratio);
      rec.favored.push_back(crit.spectral_favored ? 1 : 0);
      rec.grad_frob.push_back(cap.grad[l].norm());
      const StepSizes sizes = matrix_step_sizes(cap.grad[l], feats[l], c_f, cfg.c_op);
      if (spectral[l]) {
        const double nuc = spectral_summary(cap.grad[l]).nuclear;
        rec.predicted_decrease += nuc * nuc / (2.0 * sizes.a_spec);
      } else {
        const double frob = cap.grad[l].norm();
        rec.predicted_decrease += frob * frob / (2.0 * sizes.a_gd);
      }
    }
    const std::vector<BlockState> next =
        mixed_step(blocks, cap.grad, feats, c_f, cfg.c_op, cfg.polar_mode);
    for (size_t l = 0; l < layers; ++l) {
      weights[l] = next[l].W;
    }
    trace.push_back(std::move(rec));
  }
  return trace;
}

}  // namespace spectralrank
