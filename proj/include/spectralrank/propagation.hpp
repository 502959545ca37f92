#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "spectralrank/linalg.hpp"
#include "spectralrank/matrix.hpp"
#include "spectralrank/rng.hpp"

namespace spectralrank {

enum class ActKind {
  ReLU,
  Abs,
  LeakyReLU,
  SquaredReLU,
  Quadratic,
  GELU,
  SiLU,
  Tanh,
  HardTanh,
  Softsign,
  Linear
};

/// One scalar activation plus whatever is known about it in closed form:
/// the Gaussian moments m1 = E[sigma(gamma)], m2 = E[sigma(gamma)^2] at unit
/// scale, and the normalized first Hermite coefficient s -> sigma_hat_1(s)/s.
/// Absent closed forms fall back to Monte-Carlo estimation.
struct ActivationSpec {
  ActKind kind = ActKind::ReLU;
  double alpha = 1.0;  // LeakyReLU positive slope
  double beta = 0.0;   // LeakyReLU negative slope

  static ActivationSpec relu() { return {ActKind::ReLU}; }
  static ActivationSpec abs() { return {ActKind::Abs}; }
  static ActivationSpec leaky_relu(double a, double b) { return {ActKind::LeakyReLU, a, b}; }
  static ActivationSpec squared_relu() { return {ActKind::SquaredReLU}; }
  static ActivationSpec quadratic() { return {ActKind::Quadratic}; }
  static ActivationSpec gelu() { return {ActKind::GELU}; }
  static ActivationSpec silu() { return {ActKind::SiLU}; }
  static ActivationSpec tanh() { return {ActKind::Tanh}; }
  static ActivationSpec hardtanh() { return {ActKind::HardTanh}; }
  static ActivationSpec softsign() { return {ActKind::Softsign}; }
  static ActivationSpec linear() { return {ActKind::Linear}; }

  double scalar(double x) const {
    switch (kind) {
      case ActKind::ReLU:
        return x > 0.0 ? x : 0.0;
      case ActKind::Abs:
        return std::abs(x);
      case ActKind::LeakyReLU:
        return x > 0.0 ? alpha * x : beta * x;
      case ActKind::SquaredReLU:
        return x > 0.0 ? x * x : 0.0;
      case ActKind::Quadratic:
        return x * x;
      case ActKind::GELU:
        return x * 0.5 * std::erfc(-x * std::numbers::sqrt2 / 2.0);
      case ActKind::SiLU:
        return x / (1.0 + std::exp(-x));
      case ActKind::Tanh:
        return std::tanh(x);
      case ActKind::HardTanh:
        return std::clamp(x, -1.0, 1.0);
      case ActKind::Softsign:
        return x / (1.0 + std::abs(x));
      case ActKind::Linear:
        return x;
    }
    return x;
  }

  Matrix apply(const Matrix& m) const {
    return m.unaryExpr([this](double x) { return scalar(x); });
  }

  /// Pointwise derivative; at kinks the subgradient 0 is chosen for ReLU and
  /// Abs, the negative-side slope for LeakyReLU, the inner slope for HardTanh.
  double derivative(double x) const {
    switch (kind) {
      case ActKind::ReLU:
        return x > 0.0 ? 1.0 : 0.0;
      case ActKind::Abs:
        return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0);
      case ActKind::LeakyReLU:
        return x > 0.0 ? alpha : beta;
      case ActKind::SquaredReLU:
        return x > 0.0 ? 2.0 * x : 0.0;
      case ActKind::Quadratic:
        return 2.0 * x;
      case ActKind::GELU: {
        const double phi = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
        return 0.5 * std::erfc(-x * std::numbers::sqrt2 / 2.0) + x * phi;
      }
      case ActKind::SiLU: {
        const double sig = 1.0 / (1.0 + std::exp(-x));
        return sig * (1.0 + x * (1.0 - sig));
      }
      case ActKind::Tanh: {
        const double t = std::tanh(x);
        return 1.0 - t * t;
      }
      case ActKind::HardTanh:
        return std::abs(x) <= 1.0 ? 1.0 : 0.0;
      case ActKind::Softsign: {
        const double denom = 1.0 + std::abs(x);
        return 1.0 / (denom * denom);
      }
      case ActKind::Linear:
        return 1.0;
    }
    return 1.0;
  }

  Matrix apply_derivative(const Matrix& m) const {
    return m.unaryExpr([this](double x) { return derivative(x); });
  }

  /// Odd activations have m1 = 0 identically; decided by kind, not estimated.
  bool centered() const {
    return kind == ActKind::Linear || kind == ActKind::Tanh || kind == ActKind::HardTanh ||
           kind == ActKind::Softsign;
  }

  std::optional<std::pair<double, double>> closed_form_m1m2() const {
    const double inv_root_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
    switch (kind) {
      case ActKind::ReLU:
        return {{inv_root_2pi, 0.5}};
      case ActKind::Abs:
        return {{2.0 * inv_root_2pi, 1.0}};
      case ActKind::LeakyReLU:
        return {{(alpha - beta) * inv_root_2pi, 0.5 * (alpha * alpha + beta * beta)}};
      case ActKind::SquaredReLU:
        return {{0.5, 1.5}};
      case ActKind::Quadratic:
        return {{1.0, 3.0}};
      case ActKind::Linear:
        return {{0.0, 1.0}};
      default:
        return std::nullopt;
    }
  }

  /// sigma_hat_1(s)/s where sigma_hat_1(s) = E[sigma(s gamma) gamma]. GELU and
  /// SiLU give exactly 1/2 for every s: their even part is gamma/2 plus an odd
  /// perturbation whose product with gamma^2 integrates to zero.
  std::optional<double> closed_form_h1(double s) const {
    switch (kind) {
      case ActKind::ReLU:
        return 0.5;
      case ActKind::Linear:
        return 1.0;
      case ActKind::LeakyReLU:
        return 0.5 * (alpha + beta);
      case ActKind::GELU:
      case ActKind::SiLU:
        return 0.5;
      case ActKind::HardTanh:
        // Stein: E[sigma'(s gamma)] = P(|s gamma| < 1) = 2 Phi(1/s) - 1
        return std::erf(1.0 / (s * std::numbers::sqrt2));
      case ActKind::Abs:
      case ActKind::Quadratic:
        return 0.0;  // even functions are Hermite-orthogonal to gamma
      case ActKind::SquaredReLU:
        return s * std::sqrt(2.0 / std::numbers::pi);
      default:
        return std::nullopt;  // Tanh, Softsign: no closed form
    }
  }

  std::string name() const {
    switch (kind) {
      case ActKind::ReLU:
        return "relu";
      case ActKind::Abs:
        return "abs";
      case ActKind::LeakyReLU:
        return "leaky_relu";
      case ActKind::SquaredReLU:
        return "squared_relu";
      case ActKind::Quadratic:
        return "quadratic";
      case ActKind::GELU:
        return "gelu";
      case ActKind::SiLU:
        return "silu";
      case ActKind::Tanh:
        return "tanh";
      case ActKind::HardTanh:
        return "hardtanh";
      case ActKind::Softsign:
        return "softsign";
      case ActKind::Linear:
        return "linear";
    }
    return "unknown";
  }
};

struct ActivationStats {
  double m1_hat = 0.0;
  double m2_hat = 0.0;
  double h1_hat = 0.0;  // estimates sigma_hat_1(s) = E[sigma(s gamma) gamma]
  double m1_se = 0.0;
  double m2_se = 0.0;
  double h1_se = 0.0;
};

/// Monte-Carlo Gaussian statistics of sigma at input scale s. The Hermite
/// coefficient uses E[sigma(s gamma) gamma] rather than E[sigma'(s gamma)] so
/// nondifferentiable activations need no special treatment; Stein's lemma
/// makes the two equal for smooth sigma.
inline ActivationStats gaussian_activation_stats(const ActivationSpec& act, double s, int n_mc,
                                                 std::uint64_t seed) {
  assert(s > 0.0);
  assert(n_mc >= 10000);
  Rng rng(seed, "activation.stats");
  double a1 = 0.0, a2 = 0.0, a4 = 0.0, h = 0.0, h2 = 0.0;
  for (int i = 0; i < n_mc; ++i) {
    const double g = rng.next_gaussian();
    const double v = act.scalar(s * g);
    a1 += v;
    a2 += v * v;
    a4 += v * v * v * v;
    h += v * g;
    h2 += v * g * v * g;
  }
  const double inv_n = 1.0 / n_mc;
  ActivationStats out;
  out.m1_hat = a1 * inv_n;
  out.m2_hat = a2 * inv_n;
  out.h1_hat = h * inv_n;
  out.m1_se = std::sqrt(std::max(0.0, a2 * inv_n - out.m1_hat * out.m1_hat) * inv_n);
  const double var_m2 = a4 * inv_n - out.m2_hat * out.m2_hat;
  out.m2_se = std::sqrt(std::max(0.0, var_m2) * inv_n);
  out.h1_se = std::sqrt(std::max(0.0, h2 * inv_n - out.h1_hat * out.h1_hat) * inv_n);
  return out;
}

/// Mean-spike intensity m2 / m1^2: closed form when both moments are known,
/// Monte-Carlo at unit scale otherwise. Centered activations have no spike to
/// measure.
inline double msi_ratio(const ActivationSpec& act, int n_mc = 200000,
                        std::uint64_t seed = 0x5eed5) {
  if (act.centered()) {
    throw CenteredActivationError("msi_ratio: " + act.name() + " has m1 = 0");
  }
  if (const auto closed = act.closed_form_m1m2()) {
    return closed->second / (closed->first * closed->first);
  }
  const ActivationStats stats = gaussian_activation_stats(act, 1.0, n_mc, seed);
  return stats.m2_hat / (stats.m1_hat * stats.m1_hat);
}

/// Scale every column to squared norm d (the row count), RMSNorm applied
/// across a whole matrix of columns.
inline Matrix rms_normalize(const Matrix& x) {
  require_finite(x, "rms_normalize");
  const double root_d = std::sqrt(static_cast<double>(x.rows()));
  Matrix out(x.rows(), x.cols());
  for (Eigen::Index t = 0; t < x.cols(); ++t) {
    const double norm = x.col(t).norm();
    if (norm == 0.0) {
      throw ZeroColumnError("rms_normalize: column " + std::to_string(t) + " is zero");
    }
    out.col(t) = x.col(t) * (root_d / norm);
  }
  return out;
}

/// Gated block Q = sigma(V Z) .* (W X) with fresh Gaussian projections on the
/// 1/sqrt(d) scale, the SwiGLU-style compound that breaks the mean-spike
/// structure of plain post-activations.
inline Matrix gated_block(const Matrix& z, const Matrix& x, const ActivationSpec& act,
                          Eigen::Index k, std::uint64_t seed) {
  if (z.cols() != x.cols()) {
    throw ShapeMismatchError("gated_block: Z and X must share a column count");
  }
  assert(k >= 1);
  Rng rv(seed, "gated.v");
  Rng rw(seed, "gated.w");
  const Matrix v = rv.gaussian(k, z.rows(), 1.0 / std::sqrt(static_cast<double>(z.rows())));
  const Matrix w = rw.gaussian(k, x.rows(), 1.0 / std::sqrt(static_cast<double>(x.rows())));
  return act.apply(v * z).cwiseProduct(w * x);
}

/// Column-stochastic mixing of an (already normalized) activation matrix, one
/// mixed copy per head: softmax over columns of a fresh Gaussian score matrix.
/// Each output column is a convex combination of input columns, so its squared
/// norm never exceeds the largest input column's. Causal restricts column t to
/// source positions s <= t.
inline std::vector<Matrix> attention_mix(const Matrix& a, int heads, Rng& rng,
                                         bool causal = false) {
  assert(heads >= 1);
  std::vector<Matrix> mixed;
  mixed.reserve(static_cast<size_t>(heads));
  const Eigen::Index n = a.cols();
  for (int h = 0; h < heads; ++h) {
    Matrix scores = rng.gaussian(n, n);
    Matrix p = Matrix::Zero(n, n);
    for (Eigen::Index t = 0; t < n; ++t) {
      const Eigen::Index support = causal ? t + 1 : n;
      const Vector col = scores.col(t).head(support);
      const Vector shifted = (col.array() - col.maxCoeff()).exp();
      p.col(t).head(support) = shifted / shifted.sum();
    }
    mixed.push_back(a * p);
  }
  return mixed;
}

/// Columns drawn from a Gaussian embedding table with controlled token
/// frequencies: exactly floor(n * p_max) positions go to the heavy token
/// (p_max = 0 round-robins everything), the rest rotate through the remaining
/// vocabulary, and positions are shuffled. Realized counts, not sampled ones,
/// so the planted top frequency is exact.
inline Matrix token_embedding(Eigen::Index vocab, Eigen::Index dim, Eigen::Index n,
                              double p_max, Rng& rng) {
  if (vocab < 1 || dim < 1 || n < 1) {
    throw ShapeMismatchError("token_embedding: vocab, dim, and n must be positive");
  }
  const Matrix embed = rng.gaussian(dim, vocab);
  std::vector<Eigen::Index> tokens(static_cast<size_t>(n));
  Eigen::Index heavy =
      p_max > 0.0 ? static_cast<Eigen::Index>(p_max * static_cast<double>(n)) : 0;
  const Eigen::Index rest_vocab = p_max > 0.0 ? vocab - 1 : vocab;
  if (rest_vocab < 1) {
    heavy = n;
  }
  for (Eigen::Index t = 0; t < n; ++t) {
    tokens[static_cast<size_t>(t)] =
        t < heavy ? 0 : (p_max > 0.0 ? 1 : 0) + (t - heavy) % rest_vocab;
  }
  for (Eigen::Index t = n - 1; t > 0; --t) {
    std::swap(tokens[static_cast<size_t>(t)],
              tokens[rng.next_below(static_cast<std::uint64_t>(t + 1))]);
  }
  Matrix out(dim, n);
  for (Eigen::Index t = 0; t < n; ++t) {
    out.col(t) = embed.col(tokens[static_cast<size_t>(t)]);
  }
  return out;
}

/// One stage of a forward chain. `width` is the stage's output (or hidden)
/// dimension where that makes sense; 0 picks the conventional default.
struct ChainStage {
  enum class Kind {
    Linear,
    Pointwise,
    Residual,
    RMSNorm,
    Gating,
    TokenEmbed,
    AttentionSublayer,
    MLPSublayer,
    MoESublayer
  };
  Kind kind = Kind::Linear;
  Eigen::Index width = 0;
  ActivationSpec act = ActivationSpec::relu();
  Eigen::Index vocab = 0;
  double p_max = 0.0;  // TokenEmbed: 0 means uniform token frequencies
  int heads = 1;
  Eigen::Index experts = 0;
  bool soft_routing = false;
  bool causal = false;  // AttentionSublayer

  static ChainStage linear(Eigen::Index k_out) { return {Kind::Linear, k_out}; }
  static ChainStage pointwise(const ActivationSpec& a, Eigen::Index k_out) {
    return {Kind::Pointwise, k_out, a};
  }
  static ChainStage residual(Eigen::Index k_hidden) { return {Kind::Residual, k_hidden}; }
  static ChainStage rms_norm() { return {Kind::RMSNorm}; }
  static ChainStage gating(const ActivationSpec& a, Eigen::Index k_out) {
    return {Kind::Gating, k_out, a};
  }
  static ChainStage token_embed(Eigen::Index vocab, Eigen::Index dim, double p_max = 0.0) {
    ChainStage s{Kind::TokenEmbed, dim};
    s.vocab = vocab;
    s.p_max = p_max;
    return s;
  }
  static ChainStage attention(int heads, bool causal = false) {
    ChainStage s{Kind::AttentionSublayer};
    s.heads = heads;
    s.causal = causal;
    return s;
  }
  static ChainStage mlp(const ActivationSpec& a, Eigen::Index hidden = 0) {
    return {Kind::MLPSublayer, hidden, a};
  }
  static ChainStage moe(Eigen::Index experts, const ActivationSpec& a, bool soft = false) {
    ChainStage s{Kind::MoESublayer, 0, a};
    s.experts = experts;
    s.soft_routing = soft;
    return s;
  }

  std::string name() const {
    switch (kind) {
      case Kind::Linear:
        return "linear";
      case Kind::Pointwise:
        return "pointwise_" + act.name();
      case Kind::Residual:
        return "residual";
      case Kind::RMSNorm:
        return "rms_norm";
      case Kind::Gating:
        return "gating_" + act.name();
      case Kind::TokenEmbed:
        return "token_embed";
      case Kind::AttentionSublayer:
        return "attention";
      case Kind::MLPSublayer:
        return "mlp_" + act.name();
      case Kind::MoESublayer:
        return "moe_" + act.name();
    }
    return "unknown";
  }
};

struct ColumnEnvelope {
  double min_sq = 0.0;
  double max_sq = 0.0;
};

inline ColumnEnvelope column_envelope(const Matrix& x) {
  ColumnEnvelope env;
  env.min_sq = std::numeric_limits<double>::infinity();
  for (Eigen::Index t = 0; t < x.cols(); ++t) {
    const double sq = x.col(t).squaredNorm();
    env.min_sq = std::min(env.min_sq, sq);
    env.max_sq = std::max(env.max_sq, sq);
  }
  return env;
}

struct StageReport {
  std::string name;
  SpectralSummary summary;
  ColumnEnvelope envelope;
};

namespace detail {

inline Matrix apply_chain_stage(const ChainStage& stage, const Matrix& x, Rng& rng,
                                std::uint64_t seed, size_t index) {
  using Kind = ChainStage::Kind;
  const Eigen::Index d = x.rows();
  const Eigen::Index n = x.cols();
  const auto proj_std = [](Eigen::Index fan_in) {
    return 1.0 / std::sqrt(static_cast<double>(fan_in));
  };
  switch (stage.kind) {
    case Kind::Linear: {
      const Eigen::Index k = stage.width > 0 ? stage.width : d;
      return rng.gaussian(k, d, proj_std(d)) * x;
    }
    case Kind::Pointwise: {
      const Eigen::Index k = stage.width > 0 ? stage.width : d;
      return stage.act.apply(rng.gaussian(k, d, proj_std(d)) * x);
    }
    case Kind::Residual: {
      const Eigen::Index k = stage.width > 0 ? stage.width : d;
      const Matrix h = rng.gaussian(k, n);
      return x + rng.gaussian(d, k, proj_std(k)) * h;
    }
    case Kind::RMSNorm:
      return rms_normalize(x);
    case Kind::Gating: {
      const Eigen::Index k = stage.width > 0 ? stage.width : d;
      // gated_block draws its own streams; derive a per-stage seed
      const std::uint64_t sub_seed = seed ^ (0x9e3779b97f4a7c15ULL * (index + 1));
      return gated_block(x, x, stage.act, k, sub_seed);
    }
    case Kind::TokenEmbed: {
      if (stage.vocab < 1) {
        throw ShapeMismatchError("propagate_chain: token_embed needs a positive vocab");
      }
      const Eigen::Index k = stage.width > 0 ? stage.width : d;
      return token_embedding(stage.vocab, k, n, stage.p_max, rng);
    }
    case Kind::AttentionSublayer: {
      const Matrix a = rms_normalize(x);
      const auto mixed = attention_mix(a, stage.heads, rng, stage.causal);
      Matrix acc = Matrix::Zero(d, n);
      for (const Matrix& y : mixed) {
        acc += rng.gaussian(d, d, proj_std(d)) * y;
      }
      return x + acc / static_cast<double>(stage.heads);
    }
    case Kind::MLPSublayer: {
      const Eigen::Index k = stage.width > 0 ? stage.width : 4 * d;
      const Matrix a = rms_normalize(x);
      const Matrix h = stage.act.apply(rng.gaussian(k, d, proj_std(d)) * a);
      return x + rng.gaussian(d, k, proj_std(k)) * h;
    }
    case Kind::MoESublayer: {
      if (stage.experts < 1) {
        throw ShapeMismatchError("propagate_chain: moe needs a positive expert count");
      }
      const Eigen::Index k = stage.width > 0 ? stage.width : 4 * d;
      const Matrix a = rms_normalize(x);
      std::vector<Matrix> w1, w2;
      for (Eigen::Index e = 0; e < stage.experts; ++e) {
        w1.push_back(rng.gaussian(k, d, proj_std(d)));
        w2.push_back(rng.gaussian(d, k, proj_std(k)));
      }
      Matrix out = x;
      for (Eigen::Index t = 0; t < n; ++t) {
        Vector weights = Vector::Zero(stage.experts);
        if (stage.soft_routing) {
          // softmax of Gaussian router scores: a point in the simplex
          Vector scores(stage.experts);
          for (Eigen::Index e = 0; e < stage.experts; ++e) {
            scores(e) = rng.next_gaussian();
          }
          const Vector shifted = (scores.array() - scores.maxCoeff()).exp();
          weights = shifted / shifted.sum();
        } else {
          weights(static_cast<Eigen::Index>(
              rng.next_below(static_cast<std::uint64_t>(stage.experts)))) = 1.0;
        }
        for (Eigen::Index e = 0; e < stage.experts; ++e) {
          if (weights(e) > 0.0) {
            out.col(t) += weights(e) * (w2[static_cast<size_t>(e)] *
                                        stage.act.apply(w1[static_cast<size_t>(e)] * a.col(t)));
          }
        }
      }
      return out;
    }
  }
  return x;
}

}  // namespace detail

/// Push X0 through the stages, drawing fresh Gaussian weights per stage from
/// (seed, stage index), and record each stage's spectral summary and column
/// norm envelope. Deterministic given the seed.
inline std::vector<StageReport> propagate_chain(const std::vector<ChainStage>& stages,
                                                const Matrix& x0, std::uint64_t seed) {
  if (x0.rows() < 1 || x0.cols() < 1) {
    throw ShapeMismatchError("propagate_chain: X0 must be nonempty");
  }
  require_finite(x0, "propagate_chain");
  Matrix x = x0;
  std::vector<StageReport> reports;
  reports.reserve(stages.size());
  for (size_t i = 0; i < stages.size(); ++i) {
    Rng rng(seed, "chain." + std::to_string(i) + "." + stages[i].name());
    x = detail::apply_chain_stage(stages[i], x, rng, seed, i);
    StageReport rep;
    rep.name = stages[i].name();
    rep.summary = spectral_summary(x);
    rep.envelope = column_envelope(x);
    reports.push_back(std::move(rep));
  }
  return reports;
}

/// Stable rank of repeated squared features Z_{l} = (W_l Z_{l-1})^{.2}:
/// returns st at depth 0 (raw Gaussian data) through depth L. The widths
/// vector supplies the input dimension followed by each layer's width.
inline std::vector<double> quadratic_depth_experiment(int levels,
                                                      const std::vector<Eigen::Index>& widths,
                                                      Eigen::Index n, std::uint64_t seed) {
  assert(levels >= 0);
  if (widths.size() != static_cast<size_t>(levels) + 1) {
    throw ShapeMismatchError("quadratic_depth_experiment: need one width per depth plus input");
  }
  Rng rdata(seed, "qdepth.data");
  Matrix z = rdata.gaussian(widths[0], n);
  std::vector<double> st;
  st.reserve(static_cast<size_t>(levels) + 1);
  st.push_back(spectral_summary(z).stable_rank);
  const ActivationSpec square = ActivationSpec::quadratic();
  for (int l = 1; l <= levels; ++l) {
    Rng rw(seed, "qdepth.w." + std::to_string(l));
    const Eigen::Index k = widths[static_cast<size_t>(l)];
    const Eigen::Index d_in = widths[static_cast<size_t>(l) - 1];
    z = square.apply(rw.gaussian(k, d_in, 1.0 / std::sqrt(static_cast<double>(d_in))) * z);
    st.push_back(spectral_summary(z).stable_rank);
  }
  return st;
}

}  // namespace spectralrank
