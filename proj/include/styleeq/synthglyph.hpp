#ifndef STYLEEQ_SYNTHGLYPH_HPP
#define STYLEEQ_SYNTHGLYPH_HPP

// Synthetic online handwriting with a known, parametric style.
//
// Ten digit-like polyline templates are sheared, scaled, resampled, drifted
// and jittered into pen trajectories. Every glyph is one pen-down run
// followed by exactly one pen-up sample placed at the glyph's last point, so
// sequences always end pen-up and segmentation at pen-ups is unambiguous.
//
// The oracles recover content and style from raw strokes by brute-force DTW
// matching against the templates.

#include "styleeq/core.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace styleeq::glyph {

inline constexpr int kNumTemplates = 10;
inline constexpr double kGlyphAdvance = 1.3;       // horizontal origin spacing, unscaled
inline constexpr double kSamplesPerUnitLength = 9.0;  // resampling base rate at speed 1
inline constexpr int kOracleResolution = 32;       // points per segment inside the oracles
inline constexpr const char* kGeneratorVersion = "synthglyph-1";

struct Point {
  double x = 0;
  double y = 0;
};

struct GlyphTemplate {
  int symbol = 0;
  std::vector<Point> polyline;
  bool pen_lift_after = true;

  double arc_length() const;
  /// Samples used for this glyph at speed 1.
  int base_sample_count() const;
};

const std::vector<GlyphTemplate>& templates();
std::string template_hash();

struct StyleParams {
  double slant = 0;   // shear angle, radians
  double scale = 1;
  double speed = 1;
  double jitter = 0;  // per-sample noise std
  double drift = 0;   // vertical drift per glyph

  void validate() const;
};

struct StrokeSample {
  double x = 0;
  double y = 0;
  int pen = 0;  // 1 = pen down

  bool operator==(const StrokeSample&) const = default;
};

struct StrokeSequence {
  std::vector<StrokeSample> samples;

  std::size_t size() const { return samples.size(); }
  bool empty() const { return samples.empty(); }
  /// Maximal runs of pen-down samples, as [begin, end) index pairs.
  std::vector<std::pair<std::size_t, std::size_t>> pen_down_runs() const;
  void validate() const;

  bool operator==(const StrokeSequence&) const = default;
};

struct ContentSequence {
  std::vector<int> symbols;
  int alphabet_size = kNumTemplates;

  std::size_t size() const { return symbols.size(); }
  /// V×N one-hot matrix, one column per symbol.
  Matrix one_hot() const;
  /// N×V one-hot matrix, one row per symbol.
  Matrix one_hot_rows() const { return one_hot().transpose(); }
};

struct LabeledSample {
  StrokeSequence strokes;
  ContentSequence content;
  StyleParams style;
  std::uint64_t seed = 0;
};

/// Uniformly spaced (by arc length) resampling to `count` points, both ends
/// included.
std::vector<Point> resample_polyline(const std::vector<Point>& polyline, int count);

StrokeSequence render_sample(const ContentSequence& content, const StyleParams& style,
                             std::uint64_t seed);

struct Range {
  double lo = 0;
  double hi = 0;
};

/// Independent uniform ranges per style parameter. When `holdout_cells` is
/// non-empty the (slant, scale) box is split into a grid of
/// `slant_cells × scale_cells` cells; `holdout_mode` "exclude" rejects styles
/// falling in the listed cells, "only" keeps only those.
struct StyleSampler {
  Range slant{-0.3, 0.3};
  Range scale{0.7, 1.4};
  Range speed{0.8, 1.25};
  Range jitter{0.005, 0.015};
  Range drift{-0.03, 0.03};
  int slant_cells = 3;
  int scale_cells = 3;
  std::vector<std::array<int, 2>> holdout_cells;
  std::string holdout_mode = "exclude";

  void validate() const;
  std::array<int, 2> cell_of(const StyleParams& s) const;
  bool accepts(const StyleParams& s) const;
  StyleParams draw(Rng& rng) const;
};

struct DatasetSpec {
  int num_samples = 0;
  int alphabet_size = kNumTemplates;
  int min_len = 1;
  int max_len = 3;
  StyleSampler style_sampler;
  std::uint64_t seed = 0;

  void validate() const;
};

std::vector<LabeledSample> make_dataset(const DatasetSpec& spec);

// ---------------------------------------------------------------------------
// Oracles.

/// DTW with Euclidean point cost and (↑, →, ↗) moves, divided by n + m.
double dtw_distance(const std::vector<Point>& a, const std::vector<Point>& b);
/// As dtw_distance, but returns +inf as soon as the result is known to exceed
/// `bound`.
double dtw_distance_bounded(const std::vector<Point>& a, const std::vector<Point>& b, double bound);

/// Subtract the centroid; optionally divide by the RMS radius.
std::vector<Point> normalize_points(std::vector<Point> pts, bool unit_rms);

/// Shear by tan(slant), then scale.
std::vector<Point> transform_points(const std::vector<Point>& pts, double slant, double scale);

struct OracleGrid {
  double slant_lo = -0.5, slant_hi = 0.5, slant_step = 0.02;
  double scale_lo = 0.5, scale_hi = 2.0, scale_step = 0.05;

  std::vector<double> slants() const;
  std::vector<double> scales() const;
};

struct StyleFit {
  StyleParams estimate;
  double residual = 0;
  std::vector<int> glyphs;  // best template per segment
};

StyleFit fit_style_oracle(const StrokeSequence& strokes, const OracleGrid& grid = {});

std::vector<int> decode_content_oracle(const StrokeSequence& strokes, const OracleGrid& grid = {});

/// Levenshtein distance between glyph-id sequences.
int edit_distance(const std::vector<int>& a, const std::vector<int>& b);

// ---------------------------------------------------------------------------
// Files.

/// Line-delimited records {symbols, style, seed, strokes}.
std::string sample_to_json_line(const LabeledSample& s);
LabeledSample sample_from_json_line(const std::string& line);
void write_records(const std::filesystem::path& path, const std::vector<LabeledSample>& samples);
std::vector<LabeledSample> read_records(const std::filesystem::path& path);

/// One path per pen-down run with a fixed view box.
std::string render_svg(const StrokeSequence& strokes);

}  // namespace styleeq::glyph

#endif  // STYLEEQ_SYNTHGLYPH_HPP
