#ifndef STYLEEQ_INFERENCE_HPP
#define STYLEEQ_INFERENCE_HPP

// Autoregressive sampling: replication from a reference, interpolation
// between two references, generation from the prior, and the priming
// baseline that teacher-forces a reference before continuing.

#include "styleeq/model.hpp"
#include "styleeq/synthglyph.hpp"

#include <optional>
#include <vector>

namespace styleeq {

struct GenerationConfig {
  double std_scale = 0.9;
  int max_frames = 0;  // 0: use the content-length cap only
  double temperature = 1.0;
  std::uint64_t seed = 0;

  void validate() const;
};

/// 8 × N × (largest per-glyph base sample count).
int frame_cap(const glyph::ContentSequence& content);

struct SampledFrame {
  double dx = 0;
  double dy = 0;
  int pen = 0;
  bool stop = false;
};

/// Draws one frame: component ~ softmax(logits / temperature), offsets from
/// the chosen bivariate normal with both stds multiplied by std_scale, pen
/// and stop from their Bernoullis.
SampledFrame sample_output(const Vector& raw, double std_scale, double temperature, Rng& rng);

struct Generation {
  glyph::StrokeSequence strokes;
  Matrix frames;  // 3×T in model units
  bool truncated = false;
  Matrix style_features;          // s×T′ fed to style attention; empty without a reference
  std::vector<Matrix> attention;  // H×T′ per step when recorded
};

class Generator {
 public:
  Generator(ModelParams<Real> params, double offset_scale);

  const ModelParams<Real>& params() const { return params_; }
  double offset_scale() const { return offset_scale_; }

  /// Conv features of a reference, dropout off.
  Matrix encode(const glyph::StrokeSequence& reference) const;
  /// M(f_s, α·φ(f_t, f_s)).
  Matrix interpolation_features(const Matrix& f_source, const Matrix& f_target, double alpha) const;

  Generation replicate(const glyph::ContentSequence& content, const glyph::StrokeSequence& reference,
                       const GenerationConfig& gcfg, bool record_attention = false) const;
  Generation interpolate(const glyph::ContentSequence& content, const glyph::StrokeSequence& ref_source,
                         const glyph::StrokeSequence& ref_target, double alpha,
                         const GenerationConfig& gcfg) const;
  Generation from_prior(const glyph::ContentSequence& content, const GenerationConfig& gcfg) const;
  Generation primed(const glyph::ContentSequence& content, const glyph::StrokeSequence& reference,
                    const glyph::ContentSequence& reference_content, const GenerationConfig& gcfg) const;
  /// Posterior-branch generation from an explicit style feature matrix.
  Generation from_features(const glyph::ContentSequence& content, const Matrix& features,
                           const GenerationConfig& gcfg, bool record_attention = false) const;

  /// Stacked recurrent state [bottom; top1; top2; κ; a] after teacher-forcing
  /// the reference, before the first generated frame.
  Vector preroll_state(const glyph::StrokeSequence& reference,
                       const glyph::ContentSequence& reference_content,
                       const glyph::ContentSequence& content, std::uint64_t seed) const;

 private:
  struct RunResult {
    Generation gen;
    Vector state;
  };
  RunResult run(const glyph::ContentSequence& content, const Matrix* features, const Matrix* preroll,
                const GenerationConfig& gcfg, bool record_attention, bool stop_after_preroll,
                std::size_t generated_glyphs) const;

  ModelParams<Real> params_;
  double offset_scale_;
};

}  // namespace styleeq

#endif  // STYLEEQ_INFERENCE_HPP
