#include "styleeq/inference.hpp"

#include "styleeq/data.hpp"
#include "styleeq/training.hpp"

#include <algorithm>
#include <cmath>
#include <utility>

namespace styleeq {

using ad::Graph;
using ad::Var;

void GenerationConfig::validate() const {
  if (!(std_scale > 0 && std_scale <= 1.5)) throw InvalidInput("std_scale must lie in (0, 1.5]");
  if (max_frames < 0) throw InvalidInput("max_frames must be >= 1 (or 0 for the default cap)");
  if (!(temperature > 0)) throw InvalidInput("temperature must be positive");
}

int frame_cap(const glyph::ContentSequence& content) {
  int base = 0;
  for (const auto& t : glyph::templates()) base = std::max(base, t.base_sample_count());
  return 8 * static_cast<int>(content.size()) * base;
}

SampledFrame sample_output(const Vector& raw, double std_scale, double temperature, Rng& rng) {
  const auto M = (raw.size() - 2) / 6;
  if (raw.size() != 6 * M + 2 || M < 1) throw InvalidInput("output head width must be 6M+2");
  const Vector logits = raw.head(M) / temperature;
  Vector w = (logits.array() - logits.maxCoeff()).exp();
  w /= w.sum();
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  double u = unit(rng);
  Eigen::Index j = 0;
  for (; j < M - 1; ++j) {
    if (u < w(j)) break;
    u -= w(j);
  }
  const double mx = raw(M + j), my = raw(2 * M + j);
  const double sx = std::exp(raw(3 * M + j)) * std_scale, sy = std::exp(raw(4 * M + j)) * std_scale;
  const double rho = std::tanh(raw(5 * M + j));
  std::normal_distribution<double> normal(0.0, 1.0);
  const double n1 = normal(rng), n2 = normal(rng);
  SampledFrame f;
  f.dx = mx + sx * n1;
  f.dy = my + sy * (rho * n1 + std::sqrt(1 - rho * rho) * n2);
  const double pen_p = 1 / (1 + std::exp(-raw(6 * M)));
  const double stop_p = 1 / (1 + std::exp(-raw(6 * M + 1)));
  f.pen = unit(rng) < pen_p ? 1 : 0;
  f.stop = unit(rng) < stop_p;
  return f;
}

Generator::Generator(ModelParams<Real> params, double offset_scale)
    : params_(std::move(params)), offset_scale_(offset_scale) {
  if (!(offset_scale_ > 0)) throw InvalidInput("offset scale must be positive");
}

Matrix Generator::encode(const glyph::StrokeSequence& reference) const {
  if (reference.empty()) throw InvalidInput("reference is empty");
  return encode_reference(params_, to_frames(reference, offset_scale_));
}

Matrix Generator::interpolation_features(const Matrix& f_source, const Matrix& f_target,
                                         double alpha) const {
  const style::StyleBasis<Real> basis{params_.basis.value};
  const style::FeatureSequence<Real> fs{f_source, 0}, ft{f_target, 0};
  const Vector delta = alpha * style::phi(ft, fs, basis);
  return style::transform_M<Real>(fs, delta, basis).frames;
}

Generator::RunResult Generator::run(const glyph::ContentSequence& content, const Matrix* features,
                                    const Matrix* preroll, const GenerationConfig& gcfg,
                                    bool record_attention, bool stop_after_preroll,
                                    std::size_t generated_glyphs) const {
  gcfg.validate();
  const ModelConfig& cfg = params_.config;
  if (content.symbols.empty()) throw InvalidInput("content is empty");
  glyph::ContentSequence c = content;
  c.alphabet_size = cfg.alphabet_size;

  Graph<Real> g(false);
  const auto p = model::bind(g, params_);
  const ad::ContentBatch<Real> contents = std::make_shared<std::vector<Matrix>>(1, c.one_hot());
  std::optional<model::StyleMemory> memory;
  if (features) memory = model::build_memory(g, p, {g.constant(*features)});

  model::State state = model::initial_state(g, cfg, 1);
  Matrix prev = Matrix::Zero(3, 1);
  Rng preroll_rng = make_rng(gcfg.seed, "preroll");
  Rng rng = make_rng(gcfg.seed, "generate");

  auto advance = [&](Rng& r, std::vector<Matrix>* weights) {
    auto bottom = model::bottom_step(g, p, cfg, state, g.constant(prev), contents);
    Var raw;
    if (memory) {
      Var read = model::style_attend(g, p, cfg, bottom.h, bottom.attended, *memory, weights);
      raw = model::posterior_raw(g, p, read);
    } else {
      raw = model::prior_raw(g, p, bottom.h, bottom.attended);
    }
    Var z = model::reparam(g, raw, standard_normal<Real>(cfg.z_dim, 1, r));
    auto top = model::top_step(g, p, cfg, state, bottom.h, z, bottom.attended);
    state = {bottom.bottom, top.top1, top.top2, bottom.kappa, bottom.attended};
    return top.out_raw;
  };

  if (preroll) {
    for (Eigen::Index t = 0; t < preroll->cols(); ++t) {
      advance(preroll_rng, nullptr);
      prev = preroll->col(t);
    }
  }

  RunResult res;
  auto stacked_state = [&] {
    std::vector<Var> parts{state.bottom, state.top1, state.top2, state.kappa, state.attended};
    Vector v(0);
    for (Var part : parts) {
      const Matrix& m = g.value(part);
      Vector next(v.size() + m.size());
      next << v, Eigen::Map<const Vector>(m.data(), m.size());
      v = std::move(next);
    }
    return v;
  };
  if (stop_after_preroll) {
    res.state = stacked_state();
    return res;
  }

  glyph::ContentSequence generated;
  generated.symbols.resize(generated_glyphs);
  int cap = frame_cap(generated);
  if (gcfg.max_frames > 0) cap = std::min(cap, gcfg.max_frames);
  std::vector<SampledFrame> out;
  bool stopped = false;
  while (static_cast<int>(out.size()) < cap) {
    std::vector<Matrix> weights;
    Var raw = advance(rng, record_attention && memory ? &weights : nullptr);
    if (record_attention && memory) res.gen.attention.push_back(std::move(weights.front()));
    const SampledFrame f = sample_output(g.value(raw).col(0), gcfg.std_scale, gcfg.temperature, rng);
    out.push_back(f);
    if (f.stop) {
      stopped = true;
      break;
    }
    prev << f.dx, f.dy, static_cast<double>(f.pen);
  }
  Matrix frames(3, static_cast<Eigen::Index>(out.size()));
  for (std::size_t t = 0; t < out.size(); ++t)
    frames.col(static_cast<Eigen::Index>(t)) << out[t].dx, out[t].dy, static_cast<double>(out[t].pen);
  if (frames.cols() > 0) frames(2, frames.cols() - 1) = 0;
  res.gen.frames = frames;
  res.gen.strokes = from_frames(frames, offset_scale_);
  res.gen.truncated = !stopped;
  if (features) res.gen.style_features = *features;
  return res;
}

Generation Generator::from_features(const glyph::ContentSequence& content, const Matrix& features,
                                    const GenerationConfig& gcfg, bool record_attention) const {
  if (features.rows() != params_.config.feature_dim() || features.cols() < 1)
    throw InvalidInput("style features have the wrong shape");
  return run(content, &features, nullptr, gcfg, record_attention, false, content.size()).gen;
}

Generation Generator::replicate(const glyph::ContentSequence& content,
                                const glyph::StrokeSequence& reference, const GenerationConfig& gcfg,
                                bool record_attention) const {
  if (content.symbols.empty()) throw InvalidInput("content is empty");
  return from_features(content, encode(reference), gcfg, record_attention);
}

Generation Generator::interpolate(const glyph::ContentSequence& content,
                                  const glyph::StrokeSequence& ref_source,
                                  const glyph::StrokeSequence& ref_target, double alpha,
                                  const GenerationConfig& gcfg) const {
  if (content.symbols.empty()) throw InvalidInput("content is empty");
  if (!std::isfinite(alpha)) throw InvalidInput("alpha must be finite");
  return from_features(content, interpolation_features(encode(ref_source), encode(ref_target), alpha),
                       gcfg);
}

Generation Generator::from_prior(const glyph::ContentSequence& content,
                                 const GenerationConfig& gcfg) const {
  return run(content, nullptr, nullptr, gcfg, false, false, content.size()).gen;
}

namespace {

glyph::ContentSequence joined(const glyph::ContentSequence& a, const glyph::ContentSequence& b) {
  glyph::ContentSequence c = b;
  c.symbols.insert(c.symbols.begin(), a.symbols.begin(), a.symbols.end());
  return c;
}

}  // namespace

Generation Generator::primed(const glyph::ContentSequence& content,
                             const glyph::StrokeSequence& reference,
                             const glyph::ContentSequence& reference_content,
                             const GenerationConfig& gcfg) const {
  if (content.symbols.empty()) throw InvalidInput("content is empty");
  if (reference.empty() != reference_content.symbols.empty())
    throw InvalidInput("reference and reference content must both be empty or both be given");
  if (reference.empty()) return from_prior(content, gcfg);
  const Matrix frames = to_frames(reference, offset_scale_);
  return run(joined(reference_content, content), nullptr, &frames, gcfg, false, false, content.size())
      .gen;
}

Vector Generator::preroll_state(const glyph::StrokeSequence& reference,
                                const glyph::ContentSequence& reference_content,
                                const glyph::ContentSequence& content, std::uint64_t seed) const {
  GenerationConfig g;
  g.seed = seed;
  const Matrix frames = to_frames(reference, offset_scale_);
  return run(joined(reference_content, content), nullptr, reference.empty() ? nullptr : &frames, g,
             false, true, content.size())
      .state;
}

}  // namespace styleeq
