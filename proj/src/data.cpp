#include "styleeq/data.hpp"

#include <cmath>

namespace styleeq {

double estimate_offset_scale(const std::vector<glyph::LabeledSample>& samples) {
  double sum = 0;
  std::size_t count = 0;
  for (const auto& s : samples) {
    double px = 0, py = 0;
    for (const auto& p : s.strokes.samples) {
      sum += (p.x - px) * (p.x - px) + (p.y - py) * (p.y - py);
      count += 2;
      px = p.x;
      py = p.y;
    }
  }
  if (count == 0 || sum <= 0) return 1.0;
  return std::sqrt(sum / static_cast<double>(count));
}

Matrix to_frames(const glyph::StrokeSequence& strokes, double offset_scale) {
  if (!(offset_scale > 0)) throw InvalidInput("offset scale must be positive");
  Matrix f(3, static_cast<Eigen::Index>(strokes.size()));
  double px = 0, py = 0;
  for (std::size_t t = 0; t < strokes.size(); ++t) {
    const auto& p = strokes.samples[t];
    const auto c = static_cast<Eigen::Index>(t);
    f(0, c) = (p.x - px) / offset_scale;
    f(1, c) = (p.y - py) / offset_scale;
    f(2, c) = p.pen;
    px = p.x;
    py = p.y;
  }
  return f;
}

glyph::StrokeSequence from_frames(const Matrix& frames, double offset_scale) {
  if (frames.rows() != 3) throw InvalidInput("frames must have three rows");
  glyph::StrokeSequence out;
  out.samples.reserve(static_cast<std::size_t>(frames.cols()));
  double x = 0, y = 0;
  for (Eigen::Index t = 0; t < frames.cols(); ++t) {
    x += frames(0, t) * offset_scale;
    y += frames(1, t) * offset_scale;
    out.samples.push_back({x, y, frames(2, t) > 0.5 ? 1 : 0});
  }
  return out;
}

Matrix pad_frames(const Matrix& frames, int min_length) {
  if (frames.cols() >= min_length) return frames;
  Matrix out = Matrix::Zero(frames.rows(), min_length);
  out.leftCols(frames.cols()) = frames;
  return out;
}

std::vector<SequenceExample> prepare_examples(const std::vector<glyph::LabeledSample>& samples,
                                              double offset_scale, int alphabet_size) {
  std::vector<SequenceExample> out;
  out.reserve(samples.size());
  for (const auto& s : samples) {
    for (int sym : s.content.symbols)
      if (sym < 0 || sym >= alphabet_size) throw InvalidInput("glyph id outside the model alphabet");
    glyph::ContentSequence c = s.content;
    c.alphabet_size = alphabet_size;
    out.push_back({to_frames(s.strokes, offset_scale), c.one_hot(), s.content.symbols});
  }
  return out;
}

}  // namespace styleeq
