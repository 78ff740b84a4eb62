#ifndef STYLEEQ_SEQMODEL_HPP
#define STYLEEQ_SEQMODEL_HPP

// Building blocks of the autoregressive backbone: the diagonal Gaussian
// latent, the bivariate mixture density head with its pen/stop Bernoullis,
// and the monotone Gaussian-window content attention.
//
// Each block comes twice: as a plain Eigen function on a single time step
// (reference semantics, used by tests and documentation) and as a fused
// graph op over a batch used by the trainer and the sampler.

#include "styleeq/autodiff.hpp"
#include "styleeq/core.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numbers>
#include <vector>

namespace styleeq {

struct ModelConfig {
  int bottom_dim = 64;
  int top_dim = 64;
  int z_dim = 32;
  int num_windows = 10;
  int num_mixtures = 10;
  int alphabet_size = 10;
  std::vector<int> conv_channels{16, 32, 32, 64};
  int style_subspace_dim = 16;
  int attention_heads = 4;
  int head_dim = 16;
  int prior_hidden = 64;
  double dropout = 0.1;

  int feature_dim() const { return conv_channels.back(); }
  int attention_dim() const { return attention_heads * head_dim; }
  int output_width() const { return 6 * num_mixtures + 2; }

  void validate() const {
    if (bottom_dim <= 0 || top_dim <= 0 || z_dim <= 0 || num_windows <= 0 || num_mixtures <= 0 ||
        alphabet_size <= 0 || style_subspace_dim <= 0 || attention_heads <= 0 || head_dim <= 0 ||
        prior_hidden <= 0)
      throw InvalidInput("ModelConfig: all dimensions must be positive");
    if (conv_channels.size() != 4) throw InvalidInput("ModelConfig: conv stack has four blocks");
    for (int c : conv_channels)
      if (c <= 0) throw InvalidInput("ModelConfig: conv channels must be positive");
    if (style_subspace_dim > feature_dim())
      throw InvalidInput("ModelConfig: style subspace dim exceeds feature dim");
    if (dropout < 0.0 || dropout >= 1.0) throw InvalidInput("ModelConfig: dropout in [0,1)");
  }
};

// ---------------------------------------------------------------------------
// Diagonal Gaussian.

template <typename Scalar>
struct GaussianDiag {
  VectorX<Scalar> mean;
  VectorX<Scalar> log_std;

  static GaussianDiag from_raw(const Eigen::Ref<const VectorX<Scalar>>& raw) {
    const Eigen::Index d = raw.size() / 2;
    return {raw.head(d), raw.tail(d)};
  }
};

/// KL(q ‖ p) for diagonal Gaussians, summed over dimensions.
template <typename Scalar>
Scalar kl_diag_gaussians(const GaussianDiag<Scalar>& q, const GaussianDiag<Scalar>& p) {
  const auto vq = (Scalar(2) * q.log_std.array()).exp();
  const auto vp = (Scalar(2) * p.log_std.array()).exp();
  const auto dm = (q.mean - p.mean).array();
  return (p.log_std.array() - q.log_std.array() + (vq + dm * dm) / (Scalar(2) * vp) - Scalar(0.5))
      .sum();
}

template <typename Scalar>
VectorX<Scalar> reparam_sample(const GaussianDiag<Scalar>& g,
                               const Eigen::Ref<const VectorX<Scalar>>& noise) {
  if (noise.size() != g.mean.size()) throw InvalidInput("reparam_sample: noise dimension mismatch");
  return g.mean + (g.log_std.array().exp() * noise.array()).matrix();
}

template <typename Scalar>
Scalar log_normal_diag(const GaussianDiag<Scalar>& g, const Eigen::Ref<const VectorX<Scalar>>& x) {
  const auto z = ((x - g.mean).array() / g.log_std.array().exp());
  const Scalar log2pi = std::log(Scalar(2) * std::numbers::pi_v<Scalar>);
  return (-Scalar(0.5) * z * z - g.log_std.array() - Scalar(0.5) * log2pi).sum();
}

// ---------------------------------------------------------------------------
// Mixture density head.

/// One output frame: pen offset plus pen-down bit.
template <typename Scalar>
struct Frame {
  Scalar dx = 0;
  Scalar dy = 0;
  Scalar pen = 0;
};

template <typename Scalar>
struct OutputDistParams {
  VectorX<Scalar> weights;  // π, on the simplex
  MatrixX<Scalar> means;    // M×2
  MatrixX<Scalar> stds;     // M×2, positive
  VectorX<Scalar> corr;     // in (−1, 1)
  Scalar pen_prob = 0.5;
  Scalar stop_prob = 0.5;

  int num_mixtures() const { return static_cast<int>(weights.size()); }
};

/// Raw head layout (6M+2): [logits | μx | μy | log σx | log σy | ρ̂ | pen | stop].
template <typename Scalar>
OutputDistParams<Scalar> output_dist_from_raw(const Eigen::Ref<const VectorX<Scalar>>& raw) {
  const Eigen::Index M = (raw.size() - 2) / 6;
  if (raw.size() != 6 * M + 2 || M < 1) throw InvalidInput("output head width must be 6M+2");
  OutputDistParams<Scalar> d;
  const VectorX<Scalar> logits = raw.head(M);
  const VectorX<Scalar> e = (logits.array() - logits.maxCoeff()).exp();
  d.weights = e / e.sum();
  d.means.resize(M, 2);
  d.means.col(0) = raw.segment(M, M);
  d.means.col(1) = raw.segment(2 * M, M);
  d.stds.resize(M, 2);
  d.stds.col(0) = raw.segment(3 * M, M).array().exp();
  d.stds.col(1) = raw.segment(4 * M, M).array().exp();
  d.corr = raw.segment(5 * M, M).array().tanh();
  d.pen_prob = Scalar(1) / (Scalar(1) + std::exp(-raw(6 * M)));
  d.stop_prob = Scalar(1) / (Scalar(1) + std::exp(-raw(6 * M + 1)));
  return d;
}

template <typename Scalar>
Scalar log_bivariate_normal(Scalar x, Scalar y, Scalar mx, Scalar my, Scalar sx, Scalar sy,
                            Scalar rho) {
  const Scalar zx = (x - mx) / sx;
  const Scalar zy = (y - my) / sy;
  const Scalar one_m = Scalar(1) - rho * rho;
  const Scalar quad = zx * zx + zy * zy - Scalar(2) * rho * zx * zy;
  return -std::log(Scalar(2) * std::numbers::pi_v<Scalar>) - std::log(sx) - std::log(sy) -
         Scalar(0.5) * std::log(one_m) - quad / (Scalar(2) * one_m);
}

/// log p(dx, dy) under the mixture alone.
template <typename Scalar>
Scalar mixture_log_density(const OutputDistParams<Scalar>& d, Scalar dx, Scalar dy) {
  const int M = d.num_mixtures();
  Scalar best = -std::numeric_limits<Scalar>::infinity();
  VectorX<Scalar> terms(M);
  for (int j = 0; j < M; ++j) {
    if (d.weights(j) <= Scalar(0)) {
      terms(j) = -std::numeric_limits<Scalar>::infinity();
      continue;
    }
    terms(j) = std::log(d.weights(j)) + log_bivariate_normal(dx, dy, d.means(j, 0), d.means(j, 1),
                                                             d.stds(j, 0), d.stds(j, 1), d.corr(j));
    best = std::max(best, terms(j));
  }
  return best + std::log((terms.array() - best).exp().sum());
}

template <typename Scalar>
void check_output_dist(const OutputDistParams<Scalar>& d) {
  if ((d.stds.array() <= Scalar(0)).any()) throw InvalidInput("output dist: σ must be positive");
  if ((d.corr.array().abs() >= Scalar(1)).any()) throw InvalidInput("output dist: |ρ| must be < 1");
}

/// log p(x) = log Σ π N₂(dx,dy) + log Bern(pen; e) + log Bern(is_last; q).
template <typename Scalar>
Scalar output_log_prob(const OutputDistParams<Scalar>& d, const Frame<Scalar>& x, bool is_last) {
  check_output_dist(d);
  const Scalar pen_term = x.pen > Scalar(0.5) ? std::log(d.pen_prob) : std::log1p(-d.pen_prob);
  const Scalar stop_term = is_last ? std::log(d.stop_prob) : std::log1p(-d.stop_prob);
  return mixture_log_density(d, x.dx, x.dy) + pen_term + stop_term;
}

// ---------------------------------------------------------------------------
// Gaussian-window content attention.

template <typename Scalar>
struct WindowRead {
  VectorX<Scalar> attended;  // a_t, V
  VectorX<Scalar> kappa;     // K
  VectorX<Scalar> weights;   // N
};

/// weight(u) = Σ_k α_k exp(−β_k (κ_k − u)²), u = 1..N; a = Σ_u weight(u) c_u.
/// `content` is V×N with one column per symbol.
template <typename Scalar>
WindowRead<Scalar> gaussian_window(const Eigen::Ref<const VectorX<Scalar>>& alpha,
                                   const Eigen::Ref<const VectorX<Scalar>>& beta,
                                   const Eigen::Ref<const VectorX<Scalar>>& kappa,
                                   const Eigen::Ref<const MatrixX<Scalar>>& content) {
  const Eigen::Index N = content.cols();
  WindowRead<Scalar> r;
  r.kappa = kappa;
  r.weights.setZero(N);
  for (Eigen::Index u = 0; u < N; ++u) {
    const Scalar pos = static_cast<Scalar>(u + 1);
    r.weights(u) = (alpha.array() * (-beta.array() * (kappa.array() - pos).square()).exp()).sum();
  }
  r.attended = content * r.weights;
  return r;
}

/// Full content-attention read from raw window parameters (3K: α̂, β̂, κ̂).
template <typename Scalar>
WindowRead<Scalar> content_attention(const Eigen::Ref<const VectorX<Scalar>>& raw,
                                     const Eigen::Ref<const VectorX<Scalar>>& kappa_prev,
                                     const Eigen::Ref<const MatrixX<Scalar>>& content) {
  const Eigen::Index K = kappa_prev.size();
  const VectorX<Scalar> alpha = raw.head(K).array().exp();
  const VectorX<Scalar> beta = raw.segment(K, K).array().exp();
  const VectorX<Scalar> kappa = kappa_prev + VectorX<Scalar>(raw.tail(K).array().exp());
  return gaussian_window<Scalar>(alpha, beta, kappa, content);
}

namespace ad {

/// One-hot content per batch column (V×N_b), shared between graph nodes.
template <typename Scalar>
using ContentBatch = std::shared_ptr<const std::vector<MatrixX<Scalar>>>;

/// Batched content attention. `raw` is 3K×B, `kappa_prev` K×B. Returns the
/// stacked [a (V×B); κ (K×B)]. Window weights are written to `weights_out`
/// (one vector per column) when provided.
template <typename S>
Var window_attention(Graph<S>& g, Var raw, Var kappa_prev, const ContentBatch<S>& content,
                     std::vector<VectorX<S>>* weights_out = nullptr) {
  const auto& R = g.value(raw);
  const auto& KP = g.value(kappa_prev);
  const Eigen::Index K = KP.rows();
  const Eigen::Index B = KP.cols();
  const Eigen::Index V = (*content)[0].rows();
  MatrixX<S> alpha = R.topRows(K).array().exp().matrix();
  MatrixX<S> beta = R.middleRows(K, K).array().exp().matrix();
  MatrixX<S> step = R.bottomRows(K).array().exp().matrix();
  MatrixX<S> out(V + K, B);
  out.bottomRows(K) = KP + step;
  if (weights_out) weights_out->resize(B);
  for (Eigen::Index b = 0; b < B; ++b) {
    const auto& C = (*content)[b];
    VectorX<S> w(C.cols());
    for (Eigen::Index u = 0; u < C.cols(); ++u) {
      const S pos = static_cast<S>(u + 1);
      w(u) = (alpha.col(b).array() *
              (-beta.col(b).array() * (out.col(b).tail(K).array() - pos).square()).exp())
                 .sum();
    }
    out.col(b).head(V) = C * w;
    if (weights_out) (*weights_out)[b] = std::move(w);
  }
  return g.emplace(
      std::move(out), {raw, kappa_prev},
      [raw, kappa_prev, content, alpha = std::move(alpha), beta = std::move(beta),
       step = std::move(step), K, V](Graph<S>& g, int self) {
        const auto& go = g.grad(self);
        const auto& kappa = g.value(self).bottomRows(K);
        const Eigen::Index B = go.cols();
        MatrixX<S> dkappa = go.bottomRows(K);
        MatrixX<S> draw = MatrixX<S>::Zero(3 * K, B);
        for (Eigen::Index b = 0; b < B; ++b) {
          const auto& C = (*content)[b];
          const VectorX<S> dw = C.transpose() * go.col(b).head(V);
          for (Eigen::Index u = 0; u < C.cols(); ++u) {
            if (dw(u) == S(0)) continue;
            const S pos = static_cast<S>(u + 1);
            for (Eigen::Index k = 0; k < K; ++k) {
              const S diff = kappa(k, b) - pos;
              const S e = std::exp(-beta(k, b) * diff * diff);
              const S term = dw(u) * alpha(k, b) * e;
              draw(k, b) += term;                                   // d/dα̂ = α ∂/∂α
              draw(K + k, b) += term * (-beta(k, b) * diff * diff);  // d/dβ̂
              dkappa(k, b) += term * (S(-2) * beta(k, b) * diff);
            }
          }
        }
        draw.bottomRows(K) = (dkappa.array() * step.array()).matrix();
        if (g.requires_grad(raw)) g.grad(raw) += draw;
        if (g.requires_grad(kappa_prev)) g.grad(kappa_prev) += dkappa;
      });
}

/// Σ over masked columns of −log p(x_t) under the mixture head.
/// `targets` is 3×B (dx, dy, pen), `is_last` and `mask` are 1×B.
/// Per-column NLL values are written to `nll_out` when provided.
template <typename S>
Var mdn_nll(Graph<S>& g, Var raw, const MatrixX<S>& targets, const MatrixX<S>& is_last,
            const MatrixX<S>& mask, MatrixX<S>* nll_out = nullptr) {
  const auto& R = g.value(raw);
  const Eigen::Index M = (R.rows() - 2) / 6;
  const Eigen::Index B = R.cols();
  MatrixX<S> draw = MatrixX<S>::Zero(R.rows(), B);
  S total = 0;
  if (nll_out) nll_out->setZero(1, B);
  const S log2pi = std::log(S(2) * std::numbers::pi_v<S>);
  VectorX<S> logpi(M), logn(M), gamma(M);
  for (Eigen::Index b = 0; b < B; ++b) {
    if (mask(0, b) == S(0)) continue;
    const S m = mask(0, b);
    const auto r = R.col(b);
    const S lmax = r.head(M).maxCoeff();
    const S lse = lmax + std::log((r.head(M).array() - lmax).exp().sum());
    logpi = r.head(M).array() - lse;
    const S dx = targets(0, b), dy = targets(1, b), pen = targets(2, b);
    for (Eigen::Index j = 0; j < M; ++j) {
      const S sx = std::exp(r(3 * M + j)), sy = std::exp(r(4 * M + j));
      const S rho = std::tanh(r(5 * M + j));
      const S zx = (dx - r(M + j)) / sx, zy = (dy - r(2 * M + j)) / sy;
      const S om = S(1) - rho * rho;
      const S quad = zx * zx + zy * zy - S(2) * rho * zx * zy;
      logn(j) = -log2pi - r(3 * M + j) - r(4 * M + j) - S(0.5) * std::log(om) - quad / (S(2) * om);
    }
    const VectorX<S> joint = logpi + logn;
    const S jmax = joint.maxCoeff();
    const S logmix = jmax + std::log((joint.array() - jmax).exp().sum());
    gamma = (joint.array() - logmix).exp();

    const S pen_logit = r(6 * M), stop_logit = r(6 * M + 1);
    const S e = S(1) / (S(1) + std::exp(-pen_logit));
    const S q = S(1) / (S(1) + std::exp(-stop_logit));
    // log σ(l) = −softplus(−l), log(1−σ(l)) = −softplus(l)
    auto softplus = [](S v) { return v > S(0) ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v)); };
    const S pen_nll = pen * softplus(-pen_logit) + (S(1) - pen) * softplus(pen_logit);
    const S last = is_last(0, b);
    const S stop_nll = last * softplus(-stop_logit) + (S(1) - last) * softplus(stop_logit);
    const S nll = -logmix + pen_nll + stop_nll;
    total += m * nll;
    if (nll_out) (*nll_out)(0, b) = nll;

    auto d = draw.col(b);
    for (Eigen::Index j = 0; j < M; ++j) {
      const S sx = std::exp(r(3 * M + j)), sy = std::exp(r(4 * M + j));
      const S rho = std::tanh(r(5 * M + j));
      const S zx = (dx - r(M + j)) / sx, zy = (dy - r(2 * M + j)) / sy;
      const S om = S(1) - rho * rho;
      const S quad = zx * zx + zy * zy - S(2) * rho * zx * zy;
      const S gj = gamma(j);
      d(j) = m * (std::exp(logpi(j)) - gj);
      d(M + j) = -m * gj * (zx - rho * zy) / (om * sx);
      d(2 * M + j) = -m * gj * (zy - rho * zx) / (om * sy);
      d(3 * M + j) = -m * gj * (S(-1) + zx * (zx - rho * zy) / om);
      d(4 * M + j) = -m * gj * (S(-1) + zy * (zy - rho * zx) / om);
      d(5 * M + j) = -m * gj * (rho + zx * zy - rho * quad / om);
    }
    d(6 * M) = m * (e - pen);
    d(6 * M + 1) = m * (q - last);
  }
  if (!std::isfinite(total)) throw NumericalError("mixture head produced a non-finite NLL");
  MatrixX<S> out(1, 1);
  out(0, 0) = total;
  return g.emplace(std::move(out), {raw}, [raw, draw = std::move(draw)](Graph<S>& g, int self) {
    g.grad(raw) += g.grad(self)(0, 0) * draw;
  });
}

/// Σ over masked columns of KL(q ‖ p); both raw inputs are 2Z×B [mean; log σ].
template <typename S>
Var kl_diag(Graph<S>& g, Var q_raw, Var p_raw, const MatrixX<S>& mask,
            MatrixX<S>* kl_out = nullptr) {
  const auto& Q = g.value(q_raw);
  const auto& P = g.value(p_raw);
  const Eigen::Index Z = Q.rows() / 2;
  const auto mq = Q.topRows(Z).array(), lq = Q.bottomRows(Z).array();
  const auto mp = P.topRows(Z).array(), lp = P.bottomRows(Z).array();
  const MatrixX<S> vq = (S(2) * lq).exp().matrix();
  const MatrixX<S> vp = (S(2) * lp).exp().matrix();
  const MatrixX<S> inv_vp = vp.array().inverse().matrix();
  const MatrixX<S> dm = (mq - mp).matrix();
  const MatrixX<S> per =
      (lp - lq + (vq.array() + dm.array().square()) / vp.array() * S(0.5) - S(0.5)).matrix();
  const MatrixX<S> per_col = per.colwise().sum();
  if (kl_out) *kl_out = per_col;
  MatrixX<S> out(1, 1);
  out(0, 0) = (per_col.array() * mask.array()).sum();
  return g.emplace(std::move(out), {q_raw, p_raw},
                   [q_raw, p_raw, mask, vq, inv_vp, dm, Z](Graph<S>& g, int self) {
                     const S go = g.grad(self)(0, 0);
                     const auto m = mask.row(0).array();
                     MatrixX<S> dmq = (dm.array() * inv_vp.array()).matrix();
                     dmq.array().rowwise() *= m * go;
                     if (g.requires_grad(q_raw)) {
                       auto& gq = g.grad(q_raw);
                       gq.topRows(Z) += dmq;
                       MatrixX<S> dlq = (vq.array() * inv_vp.array() - S(1)).matrix();
                       dlq.array().rowwise() *= m * go;
                       gq.bottomRows(Z) += dlq;
                     }
                     if (g.requires_grad(p_raw)) {
                       auto& gp = g.grad(p_raw);
                       gp.topRows(Z) -= dmq;
                       MatrixX<S> dlp =
                           (S(1) - (vq.array() + dm.array().square()) * inv_vp.array()).matrix();
                       dlp.array().rowwise() *= m * go;
                       gp.bottomRows(Z) += dlp;
                     }
                   });
}

}  // namespace ad
}  // namespace styleeq

#endif  // STYLEEQ_SEQMODEL_HPP
