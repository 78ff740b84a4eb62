#ifndef STYLEEQ_MODEL_HPP
#define STYLEEQ_MODEL_HPP

// Parameters and per-step wiring of the variational recurrent generator.
//
//   bottom LSTM   [x_{t−1}; a_{t−1}]            → h_t
//   content attn  h_t, κ_{t−1}, c               → a_t, κ_t
//   prior         [h_t; a_t] → FF(Swish) → FF   → (μ, log σ) of p(z_t)
//   posterior     query([h_t; a_t]) · style memory → proj → linear → q(z_t)
//   top LSTM ×2   [h_t; z_t; a_t]               → decoder state
//   head          linear                        → 6M+2 mixture parameters
//
// The style memory is built once per sequence from the conv features of the
// (possibly equalized) reference. Every function here builds graph nodes, so
// the same code drives training (recording graph, B columns) and sampling
// (non-recording graph, one column).

#include "styleeq/autodiff.hpp"
#include "styleeq/seqmodel.hpp"
#include "styleeq/style.hpp"

#include <array>
#include <cmath>
#include <memory>
#include <random>
#include <string>
#include <vector>

namespace styleeq {

template <typename Scalar>
struct ModelParams {
  using Param = ad::Parameter<Scalar>;

  ModelConfig config;
  Param bottom_w, bottom_b;
  Param window_w, window_b;
  Param prior1_w, prior1_b, prior2_w, prior2_b;
  std::array<Param, 4> conv_w, conv_b;
  Param basis;
  Param query_w, query_b, key_w, key_b, value_w, value_b, proj_w, proj_b;
  Param post_w, post_b;
  Param top1_w, top1_b, top2_w, top2_b;
  Param out_w, out_b;

  /// Visits every parameter in canonical (checkpoint) order.
  template <typename F>
  void visit(F&& f) {
    visit_all(*this, f);
  }
  template <typename F>
  void visit(F&& f) const {
    visit_all(*this, f);
  }

  void zero_grad() {
    visit([](Param& p) { p.zero_grad(); });
  }

  Eigen::Index num_values() const {
    Eigen::Index n = 0;
    visit([&n](const Param& p) { n += p.value.size(); });
    return n;
  }

  static ModelParams init(const ModelConfig& cfg, std::uint64_t seed);

 private:
  template <typename Self, typename F>
  static void visit_all(Self& m, F& f) {
    f(m.bottom_w), f(m.bottom_b), f(m.window_w), f(m.window_b);
    f(m.prior1_w), f(m.prior1_b), f(m.prior2_w), f(m.prior2_b);
    for (int i = 0; i < 4; ++i) f(m.conv_w[i]), f(m.conv_b[i]);
    f(m.basis);
    f(m.query_w), f(m.query_b), f(m.key_w), f(m.key_b), f(m.value_w), f(m.value_b);
    f(m.proj_w), f(m.proj_b), f(m.post_w), f(m.post_b);
    f(m.top1_w), f(m.top1_b), f(m.top2_w), f(m.top2_b), f(m.out_w), f(m.out_b);
  }
};

template <typename Scalar>
ModelParams<Scalar> ModelParams<Scalar>::init(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ModelParams m;
  m.config = cfg;
  Rng rng = make_rng(seed, "init");
  auto uniform = [&rng](Param& p, const std::string& name, Eigen::Index rows, Eigen::Index cols,
                        double bound) {
    std::uniform_real_distribution<double> u(-bound, bound);
    p.name = name;
    p.value.resize(rows, cols);
    for (Eigen::Index j = 0; j < cols; ++j)
      for (Eigen::Index i = 0; i < rows; ++i) p.value(i, j) = static_cast<Scalar>(u(rng));
    p.zero_grad();
  };
  auto zeros = [](Param& p, const std::string& name, Eigen::Index rows) {
    p.name = name;
    p.value.setZero(rows, 1);
    p.zero_grad();
  };
  auto dense = [&](Param& w, Param& b, const std::string& name, Eigen::Index out, Eigen::Index in) {
    uniform(w, name + ".weight", out, in, 1.0 / std::sqrt(static_cast<double>(in)));
    zeros(b, name + ".bias", out);
  };

  const int H = cfg.bottom_dim, T = cfg.top_dim, V = cfg.alphabet_size, K = cfg.num_windows;
  const int Z = cfg.z_dim, D = cfg.attention_dim(), S = cfg.feature_dim();

  auto lstm = [&](Param& w, Param& b, const std::string& name, int hidden, int in) {
    uniform(w, name + ".weight", 4 * hidden, in + hidden, 1.0 / std::sqrt(static_cast<double>(hidden)));
    zeros(b, name + ".bias", 4 * hidden);
    b.value.middleRows(hidden, hidden).setOnes();  // forget gate
  };

  lstm(m.bottom_w, m.bottom_b, "backbone.bottom_lstm", H, 3 + V);
  uniform(m.window_w, "backbone.content_window.weight", 3 * K, H, 0.1 / std::sqrt(static_cast<double>(H)));
  zeros(m.window_b, "backbone.content_window.bias", 3 * K);
  m.window_b.value.bottomRows(K).setConstant(static_cast<Scalar>(-3.0));  // slow initial advance
  dense(m.prior1_w, m.prior1_b, "prior.fc1", cfg.prior_hidden, H + V);
  dense(m.prior2_w, m.prior2_b, "prior.fc2", 2 * Z, cfg.prior_hidden);
  // He-uniform for the conv stack; the smaller bound shrinks features ~6x per block
  int in_ch = 3;
  for (int i = 0; i < 4; ++i) {
    const std::string name = "style.conv" + std::to_string(i + 1);
    uniform(m.conv_w[i], name + ".weight", cfg.conv_channels[i], 3 * in_ch,
            std::sqrt(6.0 / static_cast<double>(3 * in_ch)));
    zeros(m.conv_b[i], name + ".bias", cfg.conv_channels[i]);
    in_ch = cfg.conv_channels[i];
  }
  m.basis.name = "style.basis";
  m.basis.value = standard_normal<Scalar>(cfg.style_subspace_dim, S, rng);
  m.basis.value.colwise().normalize();
  m.basis.zero_grad();
  dense(m.query_w, m.query_b, "style.attention.query", D, H + V);
  dense(m.key_w, m.key_b, "style.attention.key", D, S);
  dense(m.value_w, m.value_b, "style.attention.value", D, S);
  dense(m.proj_w, m.proj_b, "style.attention.proj", D, D);
  dense(m.post_w, m.post_b, "posterior.fc", 2 * Z, D);
  lstm(m.top1_w, m.top1_b, "decoder.lstm1", T, H + Z + V);
  lstm(m.top2_w, m.top2_b, "decoder.lstm2", T, T);
  dense(m.out_w, m.out_b, "decoder.head", cfg.output_width(), T);
  return m;
}

namespace model {

using ad::Graph;
using ad::Var;

template <typename S>
struct Bound {
  Var bottom_w, bottom_b, window_w, window_b;
  Var prior1_w, prior1_b, prior2_w, prior2_b;
  std::array<Var, 4> conv_w, conv_b;
  Var basis, query_w, query_b, key_w, key_b, value_w, value_b, proj_w, proj_b;
  Var post_w, post_b, top1_w, top1_b, top2_w, top2_b, out_w, out_b;
};

/// Binds every parameter into `g`. Mutable params receive gradients when the
/// graph records; const params never do.
template <typename S, typename Params>
Bound<S> bind(Graph<S>& g, Params& p) {
  Bound<S> b;
  b.bottom_w = g.param(p.bottom_w);
  b.bottom_b = g.param(p.bottom_b);
  b.window_w = g.param(p.window_w);
  b.window_b = g.param(p.window_b);
  b.prior1_w = g.param(p.prior1_w);
  b.prior1_b = g.param(p.prior1_b);
  b.prior2_w = g.param(p.prior2_w);
  b.prior2_b = g.param(p.prior2_b);
  for (int i = 0; i < 4; ++i) {
    b.conv_w[i] = g.param(p.conv_w[i]);
    b.conv_b[i] = g.param(p.conv_b[i]);
  }
  b.basis = g.param(p.basis);
  b.query_w = g.param(p.query_w);
  b.query_b = g.param(p.query_b);
  b.key_w = g.param(p.key_w);
  b.key_b = g.param(p.key_b);
  b.value_w = g.param(p.value_w);
  b.value_b = g.param(p.value_b);
  b.proj_w = g.param(p.proj_w);
  b.proj_b = g.param(p.proj_b);
  b.post_w = g.param(p.post_w);
  b.post_b = g.param(p.post_b);
  b.top1_w = g.param(p.top1_w);
  b.top1_b = g.param(p.top1_b);
  b.top2_w = g.param(p.top2_w);
  b.top2_b = g.param(p.top2_b);
  b.out_w = g.param(p.out_w);
  b.out_b = g.param(p.out_b);
  return b;
}

/// Four blocks of blur → conv(3, f, 2, 0) → Swish → dropout over a 3×L frame
/// matrix. Dropout is applied only when `dropout_rng` is given.
template <typename S>
Var conv_encode(Graph<S>& g, const Bound<S>& p, Var frames, double dropout, Rng* dropout_rng) {
  static const int min_len = style::minimum_input_length(style::default_conv_chain());
  if (g.value(frames).cols() < min_len)
    throw InvalidInput("conv_encode: input has " + std::to_string(g.value(frames).cols()) +
                       " samples, the encoder needs at least " + std::to_string(min_len));
  Var x = frames;
  for (int i = 0; i < 4; ++i) {
    x = ad::blur(g, x);
    x = ad::conv_stride2(g, p.conv_w[i], p.conv_b[i], x);
    x = ad::swish(g, x);
    if (dropout_rng && dropout > 0.0) {
      const auto& v = g.value(x);
      std::bernoulli_distribution keep(1.0 - dropout);
      MatrixX<S> mask(v.rows(), v.cols());
      const S inv = static_cast<S>(1.0 / (1.0 - dropout));
      for (Eigen::Index j = 0; j < mask.cols(); ++j)
        for (Eigen::Index r = 0; r < mask.rows(); ++r) mask(r, j) = keep(*dropout_rng) ? inv : S(0);
      x = ad::cwise_mul(g, x, g.constant(std::move(mask)));
    }
  }
  return x;
}

/// φ: mean_t(A f_target) − mean_t(A f_source), as a k×1 node.
template <typename S>
Var phi(Graph<S>& g, Var basis, Var f_target, Var f_source) {
  return ad::sub(g, ad::mean_cols(g, ad::matmul(g, basis, f_target)),
                 ad::mean_cols(g, ad::matmul(g, basis, f_source)));
}

/// M: f_source + Aᵀ δ on every frame.
template <typename S>
Var transform_M(Graph<S>& g, Var basis, Var f_source, Var delta) {
  return ad::add_colwise(g, f_source, ad::matmul_tn(g, basis, delta));
}

/// Hutchinson estimate of tr((AᵀA)²) from fixed s×N probes: (1/N) Σ ‖Aᵀ A v‖².
template <typename S>
Var trace_penalty(Graph<S>& g, Var basis, const MatrixX<S>& probes) {
  Var av = ad::matmul(g, basis, g.constant(probes));
  return ad::scale(g, ad::sum_sq(g, ad::matmul_tn(g, basis, av)), S(1) / static_cast<S>(probes.cols()));
}

/// Per-batch style memory: keys and values packed column-wise.
struct StyleMemory {
  Var keys;
  Var values;
  ad::FrameOffsets offsets;
};

template <typename S>
StyleMemory build_memory(Graph<S>& g, const Bound<S>& p, const std::vector<Var>& features) {
  auto offsets = std::make_shared<std::vector<Eigen::Index>>(1, 0);
  for (Var f : features) offsets->push_back(offsets->back() + g.value(f).cols());
  Var packed = features.size() == 1 ? features[0] : ad::concat_cols(g, features);
  return {ad::linear(g, p.key_w, p.key_b, packed), ad::linear(g, p.value_w, p.value_b, packed),
          std::move(offsets)};
}

/// Recurrent state carried between steps. `bottom`, `top1`, `top2` hold the
/// stacked [h; c] of each LSTM.
struct State {
  Var bottom, top1, top2, kappa, attended;
};

template <typename S>
State initial_state(Graph<S>& g, const ModelConfig& cfg, Eigen::Index batch) {
  auto z = [&](Eigen::Index rows) { return g.constant(MatrixX<S>::Zero(rows, batch)); };
  return {z(2 * cfg.bottom_dim), z(2 * cfg.top_dim), z(2 * cfg.top_dim), z(cfg.num_windows),
          z(cfg.alphabet_size)};
}

struct BottomOut {
  Var bottom;  // [h; c]
  Var h;
  Var attended;  // a_t
  Var kappa;
};

/// Bottom LSTM over [x_{t−1}; a_{t−1}] followed by the content window read.
template <typename S>
BottomOut bottom_step(Graph<S>& g, const Bound<S>& p, const ModelConfig& cfg, const State& state,
                      Var x_prev, const ad::ContentBatch<S>& content,
                      std::vector<VectorX<S>>* window_weights = nullptr) {
  const int H = cfg.bottom_dim, V = cfg.alphabet_size, K = cfg.num_windows;
  Var in = ad::concat_rows(g, {x_prev, state.attended});
  Var hc = ad::lstm_cell(g, p.bottom_w, p.bottom_b, in, state.bottom);
  Var h = ad::slice_rows(g, hc, 0, H);
  Var raw = ad::linear(g, p.window_w, p.window_b, h);
  Var read = ad::window_attention(g, raw, state.kappa, content, window_weights);
  return {hc, h, ad::slice_rows(g, read, 0, V), ad::slice_rows(g, read, V, K)};
}

/// Prior network: 2Z×B raw [mean; log σ].
template <typename S>
Var prior_raw(Graph<S>& g, const Bound<S>& p, Var h, Var attended) {
  Var in = ad::concat_rows(g, {h, attended});
  Var hidden = ad::swish(g, ad::linear(g, p.prior1_w, p.prior1_b, in));
  return ad::linear(g, p.prior2_w, p.prior2_b, hidden);
}

/// Style attention output (projected), (H·d)×B.
template <typename S>
Var style_attend(Graph<S>& g, const Bound<S>& p, const ModelConfig& cfg, Var h, Var attended,
                 const StyleMemory& memory, std::vector<MatrixX<S>>* weights = nullptr) {
  Var q = ad::linear(g, p.query_w, p.query_b, ad::concat_rows(g, {h, attended}));
  Var read = ad::style_attention(g, q, memory.keys, memory.values, memory.offsets,
                                 cfg.attention_heads, weights);
  return ad::linear(g, p.proj_w, p.proj_b, read);
}

/// Posterior head: 2Z×B raw [mean; log σ] from the attended style.
template <typename S>
Var posterior_raw(Graph<S>& g, const Bound<S>& p, Var style_read) {
  return ad::linear(g, p.post_w, p.post_b, style_read);
}

/// z = mean + exp(log σ) ⊙ noise.
template <typename S>
Var reparam(Graph<S>& g, Var raw, MatrixX<S> noise) {
  const Eigen::Index Z = g.value(raw).rows() / 2;
  Var mean = ad::slice_rows(g, raw, 0, Z);
  Var sd = ad::exp(g, ad::slice_rows(g, raw, Z, Z));
  return ad::add(g, mean, ad::cwise_mul(g, sd, g.constant(std::move(noise))));
}

struct TopOut {
  Var top1, top2;
  Var out_raw;  // (6M+2)×B
};

template <typename S>
TopOut top_step(Graph<S>& g, const Bound<S>& p, const ModelConfig& cfg, const State& state, Var h,
                Var z, Var attended) {
  Var in1 = ad::concat_rows(g, {h, z, attended});
  Var s1 = ad::lstm_cell(g, p.top1_w, p.top1_b, in1, state.top1);
  Var s2 = ad::lstm_cell(g, p.top2_w, p.top2_b, ad::slice_rows(g, s1, 0, cfg.top_dim), state.top2);
  Var out = ad::linear(g, p.out_w, p.out_b, ad::slice_rows(g, s2, 0, cfg.top_dim));
  return {s1, s2, out};
}

}  // namespace model
}  // namespace styleeq

#endif  // STYLEEQ_MODEL_HPP
