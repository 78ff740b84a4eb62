#include "styleeq/synthglyph.hpp"

#include "styleeq/io.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>

namespace styleeq::glyph {

namespace {

using json = nlohmann::json;

std::vector<GlyphTemplate> build_templates() {
  const std::vector<std::vector<Point>> shapes = {
      // 0: closed oval
      {{0.5, 1.0}, {0.2, 0.85}, {0.1, 0.5}, {0.2, 0.15}, {0.5, 0.0}, {0.8, 0.15}, {0.9, 0.5},
       {0.8, 0.85}, {0.5, 1.0}},
      // 1: flag and stem
      {{0.25, 0.75}, {0.5, 1.0}, {0.5, 0.5}, {0.5, 0.0}},
      // 2
      {{0.15, 0.8}, {0.4, 1.0}, {0.75, 0.9}, {0.8, 0.65}, {0.15, 0.0}, {0.9, 0.0}},
      // 3
      {{0.15, 0.9}, {0.7, 1.0}, {0.8, 0.75}, {0.4, 0.55}, {0.8, 0.35}, {0.7, 0.05}, {0.15, 0.1}},
      // 4
      {{0.7, 0.0}, {0.7, 1.0}, {0.1, 0.35}, {0.9, 0.35}},
      // 5
      {{0.85, 1.0}, {0.2, 1.0}, {0.15, 0.55}, {0.6, 0.6}, {0.85, 0.3}, {0.6, 0.0}, {0.15, 0.05}},
      // 6
      {{0.75, 1.0}, {0.3, 0.7}, {0.15, 0.3}, {0.4, 0.0}, {0.75, 0.15}, {0.7, 0.45}, {0.2, 0.4}},
      // 7
      {{0.1, 1.0}, {0.9, 1.0}, {0.5, 0.5}, {0.35, 0.0}},
      // 8: figure eight through the waist
      {{0.5, 0.5}, {0.2, 0.75}, {0.5, 1.0}, {0.8, 0.75}, {0.5, 0.5}, {0.15, 0.25}, {0.5, 0.0},
       {0.85, 0.25}, {0.5, 0.5}},
      // 9
      {{0.8, 0.6}, {0.4, 0.5}, {0.2, 0.75}, {0.45, 1.0}, {0.8, 0.85}, {0.8, 0.5}, {0.7, 0.0}},
  };
  std::vector<GlyphTemplate> out;
  for (std::size_t i = 0; i < shapes.size(); ++i) out.push_back({static_cast<int>(i), shapes[i], true});
  return out;
}

void check_range(double v, double lo, double hi, const char* name) {
  if (!(v >= lo && v <= hi)) {
    std::ostringstream os;
    os << "style parameter " << name << "=" << v << " outside [" << lo << ", " << hi << "]";
    throw InvalidInput(os.str());
  }
}

std::vector<double> grid_values(double lo, double hi, double step) {
  std::vector<double> v;
  const int n = static_cast<int>(std::floor((hi - lo) / step + 1e-9));
  for (int i = 0; i <= n; ++i) v.push_back(lo + step * i);
  return v;
}

std::vector<Point> run_points(const StrokeSequence& s, std::pair<std::size_t, std::size_t> run) {
  std::vector<Point> pts;
  for (std::size_t i = run.first; i < run.second; ++i) pts.push_back({s.samples[i].x, s.samples[i].y});
  return pts;
}

Point centroid(const std::vector<Point>& pts) {
  Point c;
  for (const auto& p : pts) {
    c.x += p.x;
    c.y += p.y;
  }
  c.x /= static_cast<double>(pts.size());
  c.y /= static_cast<double>(pts.size());
  return c;
}

}  // namespace

// ---------------------------------------------------------------------------

double GlyphTemplate::arc_length() const {
  double len = 0;
  for (std::size_t i = 1; i < polyline.size(); ++i)
    len += std::hypot(polyline[i].x - polyline[i - 1].x, polyline[i].y - polyline[i - 1].y);
  return len;
}

int GlyphTemplate::base_sample_count() const {
  return std::max(4, static_cast<int>(std::lround(kSamplesPerUnitLength * arc_length())));
}

const std::vector<GlyphTemplate>& templates() {
  static const std::vector<GlyphTemplate> t = build_templates();
  return t;
}

std::string template_hash() {
  std::ostringstream os;
  os << std::setprecision(17);
  for (const auto& t : templates()) {
    os << t.symbol << ':';
    for (const auto& p : t.polyline) os << p.x << ',' << p.y << ';';
    os << '|';
  }
  return sha256_hex(os.str());
}

void StyleParams::validate() const {
  check_range(slant, -0.5, 0.5, "slant");
  check_range(scale, 0.5, 2.0, "scale");
  check_range(speed, 0.5, 2.0, "speed");
  check_range(jitter, 0.0, 0.05, "jitter");
  check_range(drift, -0.05, 0.05, "drift");
}

std::vector<std::pair<std::size_t, std::size_t>> StrokeSequence::pen_down_runs() const {
  std::vector<std::pair<std::size_t, std::size_t>> runs;
  std::size_t i = 0;
  while (i < samples.size()) {
    if (samples[i].pen == 1) {
      std::size_t j = i;
      while (j < samples.size() && samples[j].pen == 1) ++j;
      runs.emplace_back(i, j);
      i = j;
    } else {
      ++i;
    }
  }
  return runs;
}

void StrokeSequence::validate() const {
  if (samples.size() < 2) throw InvalidInput("stroke sequence needs at least two samples");
  for (const auto& s : samples) {
    if (!std::isfinite(s.x) || !std::isfinite(s.y)) throw InvalidInput("non-finite stroke coordinate");
    if (s.pen != 0 && s.pen != 1) throw InvalidInput("pen state must be 0 or 1");
  }
  if (samples.back().pen != 0) throw InvalidInput("stroke sequence must end pen-up");
}

Matrix ContentSequence::one_hot() const {
  Matrix m = Matrix::Zero(alphabet_size, static_cast<Eigen::Index>(symbols.size()));
  for (std::size_t i = 0; i < symbols.size(); ++i) {
    if (symbols[i] < 0 || symbols[i] >= alphabet_size) throw InvalidInput("glyph id outside alphabet");
    m(symbols[i], static_cast<Eigen::Index>(i)) = 1.0;
  }
  return m;
}

std::vector<Point> resample_polyline(const std::vector<Point>& polyline, int count) {
  if (polyline.empty() || count < 1) throw InvalidInput("resample_polyline: empty input");
  if (count == 1) return {polyline.front()};
  std::vector<double> cum(polyline.size(), 0.0);
  for (std::size_t i = 1; i < polyline.size(); ++i)
    cum[i] = cum[i - 1] + std::hypot(polyline[i].x - polyline[i - 1].x, polyline[i].y - polyline[i - 1].y);
  const double total = cum.back();
  std::vector<Point> out;
  out.reserve(count);
  if (total <= 0.0) return std::vector<Point>(count, polyline.front());
  std::size_t seg = 1;
  for (int k = 0; k < count; ++k) {
    const double target = total * k / (count - 1);
    while (seg < polyline.size() - 1 && cum[seg] < target) ++seg;
    const double span = cum[seg] - cum[seg - 1];
    const double t = span > 0 ? std::clamp((target - cum[seg - 1]) / span, 0.0, 1.0) : 0.0;
    out.push_back({polyline[seg - 1].x + t * (polyline[seg].x - polyline[seg - 1].x),
                   polyline[seg - 1].y + t * (polyline[seg].y - polyline[seg - 1].y)});
  }
  out.back() = polyline.back();
  out.front() = polyline.front();
  return out;
}

StrokeSequence render_sample(const ContentSequence& content, const StyleParams& style,
                             std::uint64_t seed) {
  if (content.symbols.empty()) throw InvalidInput("render_sample: empty content");
  style.validate();
  const auto& tpl = templates();
  for (int s : content.symbols)
    if (s < 0 || s >= static_cast<int>(tpl.size())) throw InvalidInput("render_sample: unknown glyph id");

  Rng rng = make_rng(seed, "jitter");
  std::normal_distribution<double> noise(0.0, 1.0);
  const double shear = std::tan(style.slant);
  StrokeSequence out;
  for (std::size_t i = 0; i < content.symbols.size(); ++i) {
    const auto& t = tpl[content.symbols[i]];
    const int n = std::max(4, static_cast<int>(std::lround(t.base_sample_count() / style.speed)));
    const auto pts = resample_polyline(t.polyline, n);
    const double ox = static_cast<double>(i) * kGlyphAdvance;
    const double oy = static_cast<double>(i) * style.drift;
    double lx = 0, ly = 0;
    for (const auto& p : pts) {
      lx = (p.x + shear * p.y + ox) * style.scale;
      ly = (p.y + oy) * style.scale;
      double x = lx, y = ly;
      if (style.jitter > 0) {
        x += style.jitter * noise(rng);
        y += style.jitter * noise(rng);
      }
      out.samples.push_back({x, y, 1});
    }
    double x = lx, y = ly;
    if (style.jitter > 0) {
      x += style.jitter * noise(rng);
      y += style.jitter * noise(rng);
    }
    out.samples.push_back({x, y, 0});
  }
  return out;
}

// ---------------------------------------------------------------------------

void StyleSampler::validate() const {
  auto within = [](Range r, double lo, double hi, const char* name) {
    if (!(r.lo <= r.hi) || r.lo < lo || r.hi > hi) {
      std::ostringstream os;
      os << "style sampler range for " << name << " must lie in [" << lo << ", " << hi << "]";
      throw InvalidInput(os.str());
    }
  };
  within(slant, -0.5, 0.5, "slant");
  within(scale, 0.5, 2.0, "scale");
  within(speed, 0.5, 2.0, "speed");
  within(jitter, 0.0, 0.05, "jitter");
  within(drift, -0.05, 0.05, "drift");
  if (slant_cells < 1 || scale_cells < 1) throw InvalidInput("style sampler: grid needs ≥1 cell per axis");
  if (holdout_mode != "exclude" && holdout_mode != "only")
    throw InvalidInput("style sampler: holdout_mode must be 'exclude' or 'only'");
  for (const auto& c : holdout_cells)
    if (c[0] < 0 || c[0] >= slant_cells || c[1] < 0 || c[1] >= scale_cells)
      throw InvalidInput("style sampler: holdout cell outside the grid");
}

std::array<int, 2> StyleSampler::cell_of(const StyleParams& s) const {
  auto bin = [](double v, Range r, int n) {
    if (r.hi <= r.lo) return 0;
    const int b = static_cast<int>(std::floor((v - r.lo) / (r.hi - r.lo) * n));
    return std::clamp(b, 0, n - 1);
  };
  return {bin(s.slant, slant, slant_cells), bin(s.scale, scale, scale_cells)};
}

bool StyleSampler::accepts(const StyleParams& s) const {
  if (holdout_cells.empty()) return true;
  const auto cell = cell_of(s);
  const bool listed = std::find(holdout_cells.begin(), holdout_cells.end(), cell) != holdout_cells.end();
  return holdout_mode == "exclude" ? !listed : listed;
}

StyleParams StyleSampler::draw(Rng& rng) const {
  auto uni = [&rng](Range r) { return std::uniform_real_distribution<double>(r.lo, r.hi)(rng); };
  for (int attempt = 0; attempt < 100000; ++attempt) {
    StyleParams s{uni(slant), uni(scale), uni(speed), uni(jitter), uni(drift)};
    if (accepts(s)) return s;
  }
  throw InvalidInput("style sampler: holdout configuration rejects every style");
}

void DatasetSpec::validate() const {
  if (num_samples < 0) throw InvalidInput("num_samples must be non-negative");
  if (min_len < 1 || min_len > max_len) throw InvalidInput("need 1 <= min_len <= max_len");
  if (alphabet_size < 1 || alphabet_size > kNumTemplates)
    throw InvalidInput("alphabet_size must be in [1, number of templates]");
  style_sampler.validate();
}

std::vector<LabeledSample> make_dataset(const DatasetSpec& spec) {
  spec.validate();
  std::vector<LabeledSample> out;
  out.reserve(spec.num_samples);
  for (int i = 0; i < spec.num_samples; ++i) {
    Rng rng = make_rng(spec.seed, "sample", static_cast<std::uint64_t>(i));
    LabeledSample s;
    const int len = std::uniform_int_distribution<int>(spec.min_len, spec.max_len)(rng);
    std::uniform_int_distribution<int> sym(0, spec.alphabet_size - 1);
    s.content.alphabet_size = spec.alphabet_size;
    for (int k = 0; k < len; ++k) s.content.symbols.push_back(sym(rng));
    s.style = spec.style_sampler.draw(rng);
    s.seed = derive_seed(spec.seed, "render", static_cast<std::uint64_t>(i));
    s.strokes = render_sample(s.content, s.style, s.seed);
    out.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Oracles.

double dtw_distance(const std::vector<Point>& a, const std::vector<Point>& b) {
  return dtw_distance_bounded(a, b, std::numeric_limits<double>::infinity());
}

double dtw_distance_bounded(const std::vector<Point>& a, const std::vector<Point>& b, double bound) {
  const std::size_t n = a.size(), m = b.size();
  if (n == 0 || m == 0) throw InvalidInput("dtw_distance: empty sequence");
  constexpr double inf = std::numeric_limits<double>::infinity();
  // Costs are non-negative, so once a whole row exceeds the bound the final
  // value must too.
  const double raw_bound = bound * static_cast<double>(n + m);
  std::vector<double> prev(m + 1, inf), cur(m + 1, inf);
  prev[0] = 0.0;
  for (std::size_t i = 1; i <= n; ++i) {
    cur[0] = inf;
    double row_min = inf;
    const double ax = a[i - 1].x, ay = a[i - 1].y;
    for (std::size_t j = 1; j <= m; ++j) {
      const double dx = ax - b[j - 1].x, dy = ay - b[j - 1].y;
      const double c = std::sqrt(dx * dx + dy * dy);
      cur[j] = c + std::min({prev[j], cur[j - 1], prev[j - 1]});
      row_min = std::min(row_min, cur[j]);
    }
    if (row_min > raw_bound) return inf;
    std::swap(prev, cur);
  }
  return prev[m] / static_cast<double>(n + m);
}

std::vector<Point> normalize_points(std::vector<Point> pts, bool unit_rms) {
  const Point c = centroid(pts);
  double ss = 0;
  for (auto& p : pts) {
    p.x -= c.x;
    p.y -= c.y;
    ss += p.x * p.x + p.y * p.y;
  }
  if (unit_rms) {
    const double rms = std::sqrt(ss / static_cast<double>(pts.size()));
    if (rms > 1e-12)
      for (auto& p : pts) {
        p.x /= rms;
        p.y /= rms;
      }
  }
  return pts;
}

std::vector<Point> transform_points(const std::vector<Point>& pts, double slant, double scale) {
  const double shear = std::tan(slant);
  std::vector<Point> out;
  out.reserve(pts.size());
  for (const auto& p : pts) out.push_back({(p.x + shear * p.y) * scale, p.y * scale});
  return out;
}

std::vector<double> OracleGrid::slants() const { return grid_values(slant_lo, slant_hi, slant_step); }
std::vector<double> OracleGrid::scales() const { return grid_values(scale_lo, scale_hi, scale_step); }

StyleFit fit_style_oracle(const StrokeSequence& strokes, const OracleGrid& grid) {
  const auto runs = strokes.pen_down_runs();
  if (runs.empty()) throw InvalidInput("fit_style_oracle: no pen-down segments");
  std::vector<std::vector<Point>> segs;
  std::vector<Point> seg_centroids;
  for (const auto& r : runs) {
    auto pts = resample_polyline(run_points(strokes, r), kOracleResolution);
    seg_centroids.push_back(centroid(pts));
    segs.push_back(normalize_points(std::move(pts), false));
  }
  const auto& tpl = templates();
  const auto slants = grid.slants();
  const auto scales = grid.scales();

  StyleFit best;
  best.residual = std::numeric_limits<double>::infinity();
  std::vector<int> choice(segs.size());
  for (double slant : slants) {
    for (double scale : scales) {
      std::vector<std::vector<Point>> shapes;
      shapes.reserve(tpl.size());
      for (const auto& t : tpl)
        shapes.push_back(normalize_points(
            resample_polyline(transform_points(t.polyline, slant, scale), kOracleResolution), false));
      double total = 0;
      for (std::size_t g = 0; g < segs.size(); ++g) {
        double bd = std::numeric_limits<double>::infinity();
        for (std::size_t k = 0; k < shapes.size(); ++k) {
          const double d = dtw_distance_bounded(segs[g], shapes[k], bd);
          if (d < bd) {
            bd = d;
            choice[g] = static_cast<int>(k);
          }
        }
        total += bd;
      }
      const double mean = total / static_cast<double>(segs.size());
      if (mean < best.residual) {
        best.residual = mean;
        best.estimate.slant = slant;
        best.estimate.scale = scale;
        best.glyphs = choice;
      }
    }
  }

  double speed = 0;
  for (std::size_t g = 0; g < runs.size(); ++g) {
    const double n = static_cast<double>(runs[g].second - runs[g].first);
    speed += tpl[best.glyphs[g]].base_sample_count() / n;
  }
  best.estimate.speed = speed / static_cast<double>(runs.size());

  // Vertical origin of each glyph relative to its matched template gives drift.
  if (runs.size() > 1) {
    std::vector<double> origin_y;
    for (std::size_t g = 0; g < runs.size(); ++g) {
      const auto shape = resample_polyline(
          transform_points(tpl[best.glyphs[g]].polyline, best.estimate.slant, best.estimate.scale),
          kOracleResolution);
      origin_y.push_back(seg_centroids[g].y - centroid(shape).y);
    }
    best.estimate.drift =
        (origin_y.back() - origin_y.front()) / (static_cast<double>(runs.size() - 1) * best.estimate.scale);
  }
  // Jitter is not recovered by this oracle.
  best.estimate.jitter = 0.0;
  return best;
}

std::vector<int> decode_content_oracle(const StrokeSequence& strokes, const OracleGrid& grid) {
  const auto runs = strokes.pen_down_runs();
  if (runs.empty()) throw InvalidInput("decode_content_oracle: no pen-down segments");
  const auto& tpl = templates();
  // RMS normalization removes scale, so only the slant axis of the grid matters.
  std::vector<std::vector<Point>> shapes;
  for (double slant : grid.slants())
    for (const auto& t : tpl)
      shapes.push_back(normalize_points(
          resample_polyline(transform_points(t.polyline, slant, 1.0), kOracleResolution), true));
  std::vector<int> out;
  for (const auto& r : runs) {
    const auto seg = normalize_points(resample_polyline(run_points(strokes, r), kOracleResolution), true);
    double bd = std::numeric_limits<double>::infinity();
    int best = 0;
    for (std::size_t k = 0; k < shapes.size(); ++k) {
      const double d = dtw_distance_bounded(seg, shapes[k], bd);
      if (d < bd) {
        bd = d;
        best = static_cast<int>(k % tpl.size());
      }
    }
    out.push_back(best);
  }
  return out;
}

int edit_distance(const std::vector<int>& a, const std::vector<int>& b) {
  std::vector<int> prev(b.size() + 1), cur(b.size() + 1);
  std::iota(prev.begin(), prev.end(), 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = static_cast<int>(i);
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

// ---------------------------------------------------------------------------
// Files.

std::string sample_to_json_line(const LabeledSample& s) {
  json strokes = json::array();
  for (const auto& p : s.strokes.samples) strokes.push_back({p.x, p.y, p.pen});
  json j = {{"symbols", s.content.symbols},
            {"style",
             {{"slant", s.style.slant},
              {"scale", s.style.scale},
              {"speed", s.style.speed},
              {"jitter", s.style.jitter},
              {"drift", s.style.drift}}},
            {"seed", s.seed},
            {"strokes", std::move(strokes)}};
  return j.dump();
}

LabeledSample sample_from_json_line(const std::string& line) {
  const json j = json::parse(line);
  LabeledSample s;
  s.content.symbols = j.at("symbols").get<std::vector<int>>();
  const auto& st = j.at("style");
  s.style = {st.at("slant").get<double>(), st.at("scale").get<double>(), st.at("speed").get<double>(),
             st.at("jitter").get<double>(), st.at("drift").get<double>()};
  s.seed = j.at("seed").get<std::uint64_t>();
  for (const auto& p : j.at("strokes"))
    s.strokes.samples.push_back({p.at(0).get<double>(), p.at(1).get<double>(), p.at(2).get<int>()});
  return s;
}

void write_records(const std::filesystem::path& path, const std::vector<LabeledSample>& samples) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  for (const auto& s : samples) os << sample_to_json_line(s) << '\n';
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

std::vector<LabeledSample> read_records(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  std::vector<LabeledSample> out;
  std::string line;
  while (std::getline(is, line))
    if (!line.empty()) out.push_back(sample_from_json_line(line));
  return out;
}

std::string render_svg(const StrokeSequence& strokes) {
  std::ostringstream os;
  os << std::setprecision(6);
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"-0.5 -3.5 16 5\" width=\"640\" "
        "height=\"200\">\n<g transform=\"scale(1,-1)\" fill=\"none\" stroke=\"black\" "
        "stroke-width=\"0.03\" stroke-linecap=\"round\" stroke-linejoin=\"round\">\n";
  for (const auto& [b, e] : strokes.pen_down_runs()) {
    os << "<path d=\"";
    for (std::size_t i = b; i < e; ++i)
      os << (i == b ? "M" : " L") << strokes.samples[i].x << ' ' << strokes.samples[i].y;
    os << "\"/>\n";
  }
  os << "</g>\n</svg>\n";
  return os.str();
}

}  // namespace styleeq::glyph
