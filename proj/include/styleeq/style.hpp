#ifndef STYLEEQ_STYLE_HPP
#define STYLEEQ_STYLE_HPP

// Style encoder pieces and the style-equalization pair.
//
// Feature sequences are stored channels × frames (one column per frame).
// The basis A is k×s; φ measures a style difference inside the row space of
// A and M adds it back to every frame:
//
//   φ(f_source, f_target) = mean_t(A f_target) − mean_t(A f_source)
//   M(f_source, δ)        = f_source + Aᵀ δ

#include "styleeq/autodiff.hpp"
#include "styleeq/core.hpp"

#include <cmath>
#include <vector>

namespace styleeq::style {

template <typename Scalar>
struct FeatureSequence {
  MatrixX<Scalar> frames;  // s × T'
  int source_length = 0;

  Eigen::Index num_frames() const { return frames.cols(); }
  Eigen::Index dim() const { return frames.rows(); }
};

template <typename Scalar>
struct StyleBasis {
  MatrixX<Scalar> A;  // k × s

  void normalize_columns() { A.colwise().normalize(); }
  Scalar max_column_norm_error() const {
    return (A.colwise().norm().array() - Scalar(1)).abs().maxCoeff();
  }
};

/// δ = mean_t(A f_target) − mean_t(A f_source).
template <typename Scalar>
VectorX<Scalar> phi(const FeatureSequence<Scalar>& f_target, const FeatureSequence<Scalar>& f_source,
                    const StyleBasis<Scalar>& basis) {
  if (f_target.num_frames() == 0 || f_source.num_frames() == 0)
    throw InvalidInput("phi: feature sequences must be non-empty");
  const VectorX<Scalar> target = (basis.A * f_target.frames).rowwise().mean();
  const VectorX<Scalar> source = (basis.A * f_source.frames).rowwise().mean();
  return target - source;
}

/// f_source + Aᵀ δ added to every frame.
template <typename Scalar>
FeatureSequence<Scalar> transform_M(const FeatureSequence<Scalar>& f_source,
                                    const Eigen::Ref<const VectorX<Scalar>>& delta,
                                    const StyleBasis<Scalar>& basis) {
  if (delta.size() != basis.A.rows() || f_source.dim() != basis.A.cols())
    throw InvalidInput("transform_M: dimension mismatch");
  const VectorX<Scalar> shift = basis.A.transpose() * delta;
  FeatureSequence<Scalar> out = f_source;
  out.frames.colwise() += shift;
  return out;
}

/// Exact tr((AᵀA)²) = ‖AᵀA‖²_F.
template <typename Scalar>
Scalar trace_gram_squared(const MatrixX<Scalar>& A) {
  return (A.transpose() * A).squaredNorm();
}

/// Hutchinson estimate (1/N) Σ ‖Aᵀ A z_i‖² with z_i ~ N(0, I_s).
template <typename Scalar>
Scalar trace_regularizer(const MatrixX<Scalar>& A, int num_probes, Rng& rng) {
  if (num_probes < 1) throw InvalidInput("trace_regularizer: need at least one probe");
  const MatrixX<Scalar> Z = standard_normal<Scalar>(A.cols(), num_probes, rng);
  return (A.transpose() * (A * Z)).squaredNorm() / static_cast<Scalar>(num_probes);
}

// ---------------------------------------------------------------------------
// Convolution chain geometry.

struct ConvLayerShape {
  int blur_kernel = 4;  // 0 disables the blur
  int kernel = 3;
  int stride = 2;
};

inline std::vector<ConvLayerShape> default_conv_chain() {
  return std::vector<ConvLayerShape>(4, ConvLayerShape{});
}

/// Receptive field in input samples of one output frame.
inline int receptive_field(const std::vector<ConvLayerShape>& chain) {
  int field = 1;
  for (auto it = chain.rbegin(); it != chain.rend(); ++it) {
    field = (field - 1) * it->stride + it->kernel;
    if (it->blur_kernel > 0) field += it->blur_kernel - 1;
  }
  return field;
}

/// Output length of the unpadded chain for an input of `length` samples;
/// zero when the input is too short.
inline int output_length(const std::vector<ConvLayerShape>& chain, int length) {
  for (const auto& layer : chain) {
    if (layer.blur_kernel > 0) length -= layer.blur_kernel - 1;
    if (length < layer.kernel) return 0;
    length = (length - layer.kernel) / layer.stride + 1;
  }
  return length;
}

/// Smallest input length producing at least one output frame.
inline int minimum_input_length(const std::vector<ConvLayerShape>& chain) {
  int need = 1;
  for (auto it = chain.rbegin(); it != chain.rend(); ++it) {
    need = (need - 1) * it->stride + it->kernel;
    if (it->blur_kernel > 0) need += it->blur_kernel - 1;
  }
  return need;
}

}  // namespace styleeq::style

namespace styleeq::ad {

/// Layout of per-sequence style memories packed side by side: column block
/// b spans [offsets[b], offsets[b+1]).
using FrameOffsets = std::shared_ptr<const std::vector<Eigen::Index>>;

/// Multi-head scaled dot-product read. `query` is (H·d)×B; `keys` and
/// `values` are (H·d)×ΣT'. Each batch column attends only to its own block
/// of frames. Per-head weights are written to `weights_out[b]` (H×T'_b).
template <typename S>
Var style_attention(Graph<S>& g, Var query, Var keys, Var values, const FrameOffsets& offsets,
                    int heads, std::vector<MatrixX<S>>* weights_out = nullptr) {
  const auto& Q = g.value(query);
  const auto& Kv = g.value(keys);
  const auto& Vv = g.value(values);
  const Eigen::Index D = Q.rows() / heads;
  const Eigen::Index B = Q.cols();
  const S inv_sqrt = S(1) / std::sqrt(static_cast<S>(D));
  auto weights = std::make_shared<std::vector<MatrixX<S>>>(B);
  MatrixX<S> out(Q.rows(), B);
  for (Eigen::Index b = 0; b < B; ++b) {
    const Eigen::Index start = (*offsets)[b];
    const Eigen::Index T = (*offsets)[b + 1] - start;
    MatrixX<S>& W = (*weights)[b];
    W.resize(heads, T);
    for (int h = 0; h < heads; ++h) {
      VectorX<S> s = Kv.block(h * D, start, D, T).transpose() * Q.col(b).segment(h * D, D);
      s *= inv_sqrt;
      s.array() -= s.maxCoeff();
      s = s.array().exp();
      s /= s.sum();
      W.row(h) = s.transpose();
      out.col(b).segment(h * D, D) = Vv.block(h * D, start, D, T) * s;
    }
  }
  if (weights_out) *weights_out = *weights;
  return g.emplace(
      std::move(out), {query, keys, values},
      [query, keys, values, offsets, heads, D, inv_sqrt, weights](Graph<S>& g, int self) {
        const auto& go = g.grad(self);
        const auto& Q = g.value(query);
        const auto& Kv = g.value(keys);
        const auto& Vv = g.value(values);
        const bool gq = g.requires_grad(query), gk = g.requires_grad(keys),
                   gv = g.requires_grad(values);
        for (Eigen::Index b = 0; b < go.cols(); ++b) {
          const Eigen::Index start = (*offsets)[b];
          const Eigen::Index T = (*offsets)[b + 1] - start;
          const MatrixX<S>& W = (*weights)[b];
          for (int h = 0; h < heads; ++h) {
            const auto dout = go.col(b).segment(h * D, D);
            const VectorX<S> w = W.row(h).transpose();
            if (gv) g.grad(values).block(h * D, start, D, T).noalias() += dout * w.transpose();
            const VectorX<S> dw = Vv.block(h * D, start, D, T).transpose() * dout;
            const VectorX<S> ds = (w.array() * (dw.array() - w.dot(dw))).matrix() * inv_sqrt;
            if (gq)
              g.grad(query).col(b).segment(h * D, D).noalias() +=
                  Kv.block(h * D, start, D, T) * ds;
            if (gk)
              g.grad(keys).block(h * D, start, D, T).noalias() +=
                  Q.col(b).segment(h * D, D) * ds.transpose();
          }
        }
      });
}

}  // namespace styleeq::ad

#endif  // STYLEEQ_STYLE_HPP
