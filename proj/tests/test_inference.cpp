#include "doctest.h"

#include "styleeq/data.hpp"
#include "styleeq/inference.hpp"

#include <cmath>

using namespace styleeq;

namespace {

ModelConfig tiny_model() {
  ModelConfig c;
  c.bottom_dim = 8;
  c.top_dim = 8;
  c.z_dim = 3;
  c.num_windows = 2;
  c.num_mixtures = 2;
  c.conv_channels = {4, 4, 6, 8};
  c.style_subspace_dim = 3;
  c.attention_heads = 2;
  c.head_dim = 2;
  c.prior_hidden = 6;
  return c;
}

Generator tiny_generator(double stop_bias = 0.0) {
  auto params = ModelParams<Real>::init(tiny_model(), 21);
  params.out_b.value(params.out_b.value.size() - 1) += stop_bias;
  return Generator(std::move(params), 0.05);
}

glyph::ContentSequence content(std::vector<int> symbols) { return {std::move(symbols), 10}; }

glyph::StrokeSequence reference(int seed, double slant = 0.1) {
  glyph::StyleParams s;
  s.slant = slant;
  s.jitter = 0.01;
  return glyph::render_sample(content({1, 4, 7}), s, static_cast<std::uint64_t>(seed));
}

bool same(const Generation& a, const Generation& b) {
  return a.strokes.samples == b.strokes.samples && a.frames == b.frames && a.truncated == b.truncated;
}

}  // namespace

TEST_CASE("std_scale shrinks offset spread") {
  // single component: μ = 0, σ = 2 on both axes, ρ = 0
  Vector raw = Vector::Zero(8);
  raw(3) = raw(4) = std::log(2.0);
  Rng rng = make_rng(1, "mc");
  const int n = 10000;
  double sx = 0, sy = 0, mx = 0, my = 0;
  for (int i = 0; i < n; ++i) {
    const SampledFrame f = sample_output(raw, 0.9, 1.0, rng);
    mx += f.dx;
    my += f.dy;
    sx += f.dx * f.dx;
    sy += f.dy * f.dy;
  }
  mx /= n;
  my /= n;
  const double stdx = std::sqrt(sx / n - mx * mx), stdy = std::sqrt(sy / n - my * my);
  // the standard error of a sample std is σ/sqrt(2n) ≈ 0.7%
  CHECK(std::abs(stdx - 1.8) < 0.04 * 1.8);
  CHECK(std::abs(stdy - 1.8) < 0.04 * 1.8);

  // the Bernoullis ignore std_scale
  raw(6) = 0;
  Rng a = make_rng(2, "mc"), b = make_rng(2, "mc");
  for (int i = 0; i < 200; ++i) {
    const SampledFrame fa = sample_output(raw, 0.9, 1.0, a), fb = sample_output(raw, 0.3, 1.0, b);
    CHECK(fa.pen == fb.pen);
    CHECK(fa.stop == fb.stop);
  }
}

TEST_CASE("generation config validation") {
  GenerationConfig g;
  CHECK_NOTHROW(g.validate());
  g.std_scale = 0;
  CHECK_THROWS_AS(g.validate(), InvalidInput);
  g.std_scale = 1.6;
  CHECK_THROWS_AS(g.validate(), InvalidInput);
  g = {};
  g.max_frames = -1;
  CHECK_THROWS_AS(g.validate(), InvalidInput);
  g = {};
  g.temperature = 0;
  CHECK_THROWS_AS(g.validate(), InvalidInput);
}

TEST_CASE("generation is deterministic and rejects empty content") {
  const Generator gen = tiny_generator();
  GenerationConfig g;
  g.seed = 5;
  const auto ref = reference(1);
  CHECK(same(gen.replicate(content({2, 3}), ref, g), gen.replicate(content({2, 3}), ref, g)));
  CHECK(same(gen.from_prior(content({2, 3}), g), gen.from_prior(content({2, 3}), g)));
  CHECK(same(gen.primed(content({2}), ref, content({1, 4, 7}), g),
             gen.primed(content({2}), ref, content({1, 4, 7}), g)));
  GenerationConfig other = g;
  other.seed = 6;
  CHECK_FALSE(same(gen.from_prior(content({2, 3}), g), gen.from_prior(content({2, 3}), other)));

  CHECK_THROWS_AS(gen.replicate(content({}), ref, g), InvalidInput);
  CHECK_THROWS_AS(gen.from_prior(content({}), g), InvalidInput);
  CHECK_THROWS_AS(gen.replicate(content({11}), ref, g), InvalidInput);
}

TEST_CASE("replication feeds the reference features unchanged") {
  const Generator gen = tiny_generator();
  const auto ref = reference(2);
  const Generation out = gen.replicate(content({5}), ref, GenerationConfig{}, true);
  CHECK(out.style_features == gen.encode(ref));
  CHECK(out.attention.size() == static_cast<std::size_t>(out.frames.cols()));
  for (const auto& w : out.attention) CHECK((w.rowwise().sum().array() - 1).abs().maxCoeff() < 1e-12);
}

TEST_CASE("interpolation endpoints") {
  const Generator gen = tiny_generator();
  const auto rs = reference(3, -0.2), rt = reference(4, 0.3);
  const Matrix fs = gen.encode(rs), ft = gen.encode(rt);
  CHECK(gen.interpolation_features(fs, ft, 0.0) == fs);

  const Matrix& A = gen.params().basis.value;
  const Vector shift = A.transpose() * Vector((A * ft).rowwise().mean() - (A * fs).rowwise().mean());
  const Matrix direct = fs.colwise() + shift;
  CHECK(gen.interpolation_features(fs, ft, 1.0) == direct);

  GenerationConfig g;
  g.seed = 9;
  CHECK(same(gen.interpolate(content({0, 8}), rs, rt, 0.0, g), gen.replicate(content({0, 8}), rs, g)));
  CHECK(same(gen.interpolate(content({0, 8}), rs, rt, 1.0, g),
             gen.from_features(content({0, 8}), direct, g)));
  // extrapolation is permitted
  CHECK_NOTHROW(gen.interpolate(content({0}), rs, rt, 1.5, g));
}

TEST_CASE("priming") {
  const Generator gen = tiny_generator();
  GenerationConfig g;
  g.seed = 10;
  CHECK(same(gen.primed(content({6}), glyph::StrokeSequence{}, content({}), g), gen.from_prior(content({6}), g)));

  const auto ref = reference(5);
  const Vector fresh = gen.preroll_state(glyph::StrokeSequence{}, content({}), content({6}), 10);
  const Vector warmed = gen.preroll_state(ref, content({1, 4, 7}), content({6}), 10);
  CHECK(fresh.size() == warmed.size());
  CHECK((fresh - warmed).norm() > 0);
}

TEST_CASE("generations terminate pen-up") {
  GenerationConfig g;
  g.seed = 12;
  SUBCASE("stop bit") {
    const Generator gen = tiny_generator(4.0);
    const Generation out = gen.from_prior(content({1, 2}), g);
    CHECK_FALSE(out.truncated);
    CHECK(out.strokes.samples.back().pen == 0);
    CHECK(out.frames.cols() < frame_cap(content({1, 2})));
  }
  SUBCASE("frame cap") {
    const Generator gen = tiny_generator(-40.0);
    const Generation out = gen.from_prior(content({1, 2}), g);
    CHECK(out.truncated);
    CHECK(out.frames.cols() == frame_cap(content({1, 2})));
    CHECK(out.strokes.samples.back().pen == 0);
    g.max_frames = 17;
    const Generation shorter = gen.from_prior(content({1, 2}), g);
    CHECK(shorter.truncated);
    CHECK(shorter.frames.cols() == 17);
    CHECK(shorter.strokes.samples.back().pen == 0);
  }
}

TEST_CASE("strokes accumulate the scaled offsets") {
  const Generator gen = tiny_generator();
  GenerationConfig g;
  g.seed = 13;
  const Generation out = gen.from_prior(content({3}), g);
  const glyph::StrokeSequence back = from_frames(out.frames, gen.offset_scale());
  REQUIRE(back.size() == out.strokes.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    CHECK(back.samples[i].x == doctest::Approx(out.strokes.samples[i].x).epsilon(1e-12));
    CHECK(back.samples[i].y == doctest::Approx(out.strokes.samples[i].y).epsilon(1e-12));
  }
}
