#ifndef STYLEEQ_DATA_HPP
#define STYLEEQ_DATA_HPP

// Conversion between absolute stroke samples and the model's frame matrix.
//
// A frame matrix is 3×T: column t holds (dx_t, dy_t) / offset_scale and the
// pen bit of sample t, with offsets taken from the previous sample (the
// first from the origin).

#include "styleeq/core.hpp"
#include "styleeq/synthglyph.hpp"

#include <vector>

namespace styleeq {

/// RMS of all raw offsets in the set; 1 for an empty set.
double estimate_offset_scale(const std::vector<glyph::LabeledSample>& samples);

Matrix to_frames(const glyph::StrokeSequence& strokes, double offset_scale);

/// Inverse of to_frames; pen values are thresholded at 0.5.
glyph::StrokeSequence from_frames(const Matrix& frames, double offset_scale);

/// Appends zero frames (no motion, pen up) until the matrix has at least
/// `min_length` columns.
Matrix pad_frames(const Matrix& frames, int min_length);

/// A sample prepared for training: frames plus one-hot content.
struct SequenceExample {
  Matrix frames;   // 3×T
  Matrix content;  // V×N
  std::vector<int> symbols;
};

std::vector<SequenceExample> prepare_examples(const std::vector<glyph::LabeledSample>& samples,
                                              double offset_scale, int alphabet_size);

}  // namespace styleeq

#endif  // STYLEEQ_DATA_HPP
