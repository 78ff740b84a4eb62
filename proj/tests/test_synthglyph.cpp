#include "doctest.h"

#include "styleeq/synthglyph.hpp"

#include <cmath>
#include <cstdio>
#include <random>

using namespace styleeq;
using namespace styleeq::glyph;

namespace {

ContentSequence content_of(std::vector<int> symbols) { return ContentSequence{std::move(symbols), kNumTemplates}; }

StyleParams identity_style() { return StyleParams{0.0, 1.0, 1.0, 0.0, 0.0}; }

// 5×5 grid spanning the interior of the style box, on oracle grid points.
std::vector<StyleParams> style_grid_5x5() {
  std::vector<StyleParams> out;
  for (double slant : {-0.4, -0.2, 0.0, 0.2, 0.4})
    for (double scale : {0.6, 0.9, 1.2, 1.5, 1.8}) out.push_back({slant, scale, 1.0, 0.0, 0.0});
  return out;
}

}  // namespace

TEST_CASE("templates satisfy their invariants") {
  const auto& tpl = templates();
  REQUIRE(tpl.size() == kNumTemplates);
  for (const auto& t : tpl) {
    CHECK(t.polyline.size() >= 4);
    CHECK(t.pen_lift_after);
    for (const auto& p : t.polyline) {
      CHECK(p.x >= 0.0);
      CHECK(p.x <= 1.0);
      CHECK(p.y >= 0.0);
      CHECK(p.y <= 1.0);
    }
  }
  double closest = 1e9;
  for (std::size_t i = 0; i < tpl.size(); ++i)
    for (std::size_t j = i + 1; j < tpl.size(); ++j) {
      const auto a = normalize_points(resample_polyline(tpl[i].polyline, kOracleResolution), true);
      const auto b = normalize_points(resample_polyline(tpl[j].polyline, kOracleResolution), true);
      closest = std::min(closest, dtw_distance(a, b));
    }
  MESSAGE("closest template pair, normalized DTW: " << closest);
  CHECK(closest > 0.1);
}

TEST_CASE("render_sample with identity style reproduces the resampled template") {
  const auto s = render_sample(content_of({0}), identity_style(), 0);
  const auto& t = templates()[0];
  const auto expected = resample_polyline(t.polyline, t.base_sample_count());
  REQUIRE(s.size() == expected.size() + 1);
  for (std::size_t i = 0; i < expected.size(); ++i) {
    CHECK(s.samples[i].x == expected[i].x);
    CHECK(s.samples[i].y == expected[i].y);
    CHECK(s.samples[i].pen == 1);
  }
  CHECK(s.samples.back().pen == 0);
  CHECK_NOTHROW(s.validate());
}

TEST_CASE("scale multiplies every coordinate") {
  StyleParams one{0.2, 1.0, 1.1, 0.0, 0.03};
  StyleParams two = one;
  two.scale = 2.0;
  const auto c = content_of({3, 7, 1});
  const auto a = render_sample(c, one, 5);
  const auto b = render_sample(c, two, 5);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(b.samples[i].x == 2.0 * a.samples[i].x);
    CHECK(b.samples[i].y == 2.0 * a.samples[i].y);
  }
}

TEST_CASE("one pen-down run per glyph") {
  StyleParams s{0.1, 1.3, 0.9, 0.0, 0.0};
  CHECK(render_sample(content_of({0, 1}), s, 1).pen_down_runs().size() == 2);
  CHECK(render_sample(content_of({4, 4, 9, 2, 8}), s, 2).pen_down_runs().size() == 5);
}

TEST_CASE("render_sample rejects bad input") {
  CHECK_THROWS_AS(render_sample(content_of({11}), identity_style(), 0), InvalidInput);
  CHECK_THROWS_AS(render_sample(content_of({}), identity_style(), 0), InvalidInput);
  StyleParams bad = identity_style();
  bad.slant = 0.7;
  CHECK_THROWS_AS(render_sample(content_of({1}), bad, 0), InvalidInput);
}

TEST_CASE("speed controls samples per glyph") {
  StyleParams fast = identity_style(), slow = identity_style();
  fast.speed = 2.0;
  slow.speed = 0.5;
  const auto& t = templates()[5];
  CHECK(render_sample(content_of({5}), fast, 0).size() ==
        static_cast<std::size_t>(std::max(4L, std::lround(t.base_sample_count() / 2.0)) + 1));
  CHECK(render_sample(content_of({5}), slow, 0).size() ==
        static_cast<std::size_t>(std::lround(t.base_sample_count() / 0.5) + 1));
}

TEST_CASE("make_dataset") {
  DatasetSpec spec;
  spec.num_samples = 0;
  CHECK(make_dataset(spec).empty());

  spec.num_samples = 100;
  spec.seed = 7;
  const auto a = make_dataset(spec);
  const auto b = make_dataset(spec);
  REQUIRE(a.size() == 100);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(sample_to_json_line(a[i]) == sample_to_json_line(b[i]));

  // regenerating from (content, style, seed) is bit-exact
  for (const auto& s : a) CHECK(render_sample(s.content, s.style, s.seed) == s.strokes);

  spec.min_len = spec.max_len = 3;
  spec.style_sampler.jitter = {0.0, 0.0};
  for (const auto& s : make_dataset(spec)) {
    CHECK(s.content.size() == 3);
    CHECK(s.strokes.pen_down_runs().size() == 3);
  }

  spec.min_len = 4;
  spec.max_len = 2;
  CHECK_THROWS_AS(make_dataset(spec), InvalidInput);
}

TEST_CASE("holdout cells partition the style box") {
  StyleSampler train;
  train.holdout_cells = {{0, 2}, {2, 0}};
  StyleSampler held = train;
  held.holdout_mode = "only";
  Rng rng(3);
  for (int i = 0; i < 200; ++i) {
    const auto s = train.draw(rng);
    CHECK_FALSE(held.accepts(s));
    const auto h = held.draw(rng);
    CHECK_FALSE(train.accepts(h));
  }
}

TEST_CASE("dataset records round-trip bit-exactly") {
  DatasetSpec spec;
  spec.num_samples = 20;
  spec.seed = 11;
  for (const auto& s : make_dataset(spec)) {
    const auto back = sample_from_json_line(sample_to_json_line(s));
    CHECK(back.strokes == s.strokes);
    CHECK(back.content.symbols == s.content.symbols);
    CHECK(back.style.slant == s.style.slant);
    CHECK(back.style.drift == s.style.drift);
    CHECK(back.seed == s.seed);
  }
}

TEST_CASE("dtw distance basics") {
  std::vector<Point> a{{0, 0}, {1, 0}, {2, 0}};
  CHECK(dtw_distance(a, a) == 0.0);
  std::vector<Point> b{{0, 1}, {1, 1}, {2, 1}};
  CHECK(dtw_distance(a, b) == doctest::Approx(3.0 / 6.0));
  CHECK(edit_distance({1, 2, 3}, {1, 3}) == 1);
  CHECK(edit_distance({}, {4, 4}) == 2);
  CHECK(edit_distance({1, 2}, {2, 1}) == 2);
}

TEST_CASE("decode_content_oracle is exact on noiseless renders") {
  StyleParams s{0.14, 1.35, 1.1, 0.0, 0.02};
  CHECK(decode_content_oracle(render_sample(content_of({2, 0, 1}), s, 0)) == std::vector<int>{2, 0, 1});

  // exhaustive: alphabet × 5×5 style grid, single glyph
  for (const auto& st : style_grid_5x5())
    for (int g = 0; g < kNumTemplates; ++g)
      CHECK(decode_content_oracle(render_sample(content_of({g}), st, 0)) == std::vector<int>{g});

  // random contents up to length 5 over grid styles and random in-range speeds
  Rng rng(99);
  const auto grid = style_grid_5x5();
  for (int trial = 0; trial < 60; ++trial) {
    const int len = std::uniform_int_distribution<int>(1, 5)(rng);
    std::vector<int> sym;
    for (int k = 0; k < len; ++k) sym.push_back(std::uniform_int_distribution<int>(0, 9)(rng));
    StyleParams st = grid[std::uniform_int_distribution<std::size_t>(0, grid.size() - 1)(rng)];
    st.speed = std::uniform_real_distribution<double>(0.5, 2.0)(rng);
    st.drift = std::uniform_real_distribution<double>(-0.05, 0.05)(rng);
    CHECK(decode_content_oracle(render_sample(content_of(sym), st, 0)) == sym);
  }
  CHECK_THROWS_AS(decode_content_oracle(StrokeSequence{{{0, 0, 0}, {1, 1, 0}}}), InvalidInput);
}

TEST_CASE("decode_content_oracle accuracy under jitter 0.02") {
  DatasetSpec spec;
  spec.num_samples = 200;
  spec.seed = 2024;
  spec.style_sampler.jitter = {0.02, 0.02};
  spec.style_sampler.slant = {-0.5, 0.5};
  spec.style_sampler.scale = {0.5, 2.0};
  spec.style_sampler.speed = {0.5, 2.0};
  int total = 0, correct = 0;
  for (const auto& s : make_dataset(spec)) {
    const auto d = decode_content_oracle(s.strokes);
    REQUIRE(d.size() == s.content.size());
    for (std::size_t i = 0; i < d.size(); ++i) correct += d[i] == s.content.symbols[i];
    total += static_cast<int>(d.size());
  }
  const double acc = static_cast<double>(correct) / total;
  MESSAGE("glyph accuracy at jitter 0.02: " << acc << " (" << correct << "/" << total << ")");
  CHECK(acc >= 0.95);
}

TEST_CASE("fit_style_oracle recovers slant and scale on noiseless renders") {
  const OracleGrid grid;
  for (const auto& st : style_grid_5x5()) {
    const auto fit = fit_style_oracle(render_sample(content_of({3, 8}), st, 0), grid);
    CHECK(std::abs(fit.estimate.slant - st.slant) <= grid.slant_step + 1e-9);
    CHECK(std::abs(fit.estimate.scale - st.scale) <= grid.scale_step + 1e-9);
    CHECK(fit.glyphs == std::vector<int>{3, 8});
  }
  // off-grid styles
  Rng rng(5);
  for (int i = 0; i < 10; ++i) {
    StyleParams st{std::uniform_real_distribution<double>(-0.5, 0.5)(rng),
                   std::uniform_real_distribution<double>(0.5, 2.0)(rng),
                   std::uniform_real_distribution<double>(0.7, 1.4)(rng), 0.0,
                   std::uniform_real_distribution<double>(-0.05, 0.05)(rng)};
    const auto fit = fit_style_oracle(render_sample(content_of({i % 10, (i + 3) % 10}), st, 0), grid);
    CHECK(std::abs(fit.estimate.slant - st.slant) <= grid.slant_step + 1e-9);
    CHECK(std::abs(fit.estimate.scale - st.scale) <= grid.scale_step + 1e-9);
    CHECK(std::abs(fit.estimate.speed - st.speed) < 0.1);
    CHECK(std::abs(fit.estimate.drift - st.drift) < 0.02);
  }
}

TEST_CASE("fit_style_oracle residual separates non-glyph strokes") {
  // threshold = 3 × the worst residual over 100 noiseless renders
  DatasetSpec spec;
  spec.num_samples = 100;
  spec.seed = 31;
  spec.min_len = spec.max_len = 1;
  spec.style_sampler.jitter = {0.0, 0.0};
  double worst = 0;
  for (const auto& s : make_dataset(spec)) worst = std::max(worst, fit_style_oracle(s.strokes).residual);
  const double threshold = 3.0 * worst;
  MESSAGE("worst noiseless residual " << worst << ", threshold " << threshold);

  StrokeSequence line;
  for (int i = 0; i < 20; ++i) line.samples.push_back({0.06 * i, 0.3, 1});
  line.samples.push_back({1.14, 0.3, 0});
  const auto fit = fit_style_oracle(line);
  MESSAGE("straight line residual " << fit.residual);
  CHECK(fit.residual > threshold);
}

TEST_CASE("fit_style_oracle is stable across jitter seeds") {
  const OracleGrid grid;
  Rng rng(17);
  for (int pair = 0; pair < 20; ++pair) {
    StyleParams st{std::uniform_real_distribution<double>(-0.4, 0.4)(rng),
                   std::uniform_real_distribution<double>(0.7, 1.6)(rng), 1.0, 0.01, 0.0};
    const auto c = content_of({pair % 10, (pair * 7 + 1) % 10});
    const auto a = fit_style_oracle(render_sample(c, st, 1000 + pair), grid);
    const auto b = fit_style_oracle(render_sample(c, st, 2000 + pair), grid);
    CHECK(std::abs(a.estimate.slant - b.estimate.slant) <= 2 * grid.slant_step + 1e-9);
    CHECK(std::abs(a.estimate.scale - b.estimate.scale) <= 2 * grid.scale_step + 1e-9);
  }
}

TEST_CASE("svg has one path per pen-down run") {
  const auto s = render_sample(content_of({1, 2, 3}), identity_style(), 0);
  const auto svg = render_svg(s);
  std::size_t count = 0, pos = 0;
  while ((pos = svg.find("<path", pos)) != std::string::npos) {
    ++count;
    ++pos;
  }
  CHECK(count == 3);
  CHECK(svg.find("viewBox=\"-0.5 -3.5 16 5\"") != std::string::npos);
}
