#include "styleeq/evaluation.hpp"

#include "styleeq/io.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <iomanip>
#include <limits>
#include <mutex>
#include <optional>
#include <sstream>
#include <thread>

namespace styleeq {

using json = nlohmann::json;

std::string to_string(EvalSetting s) { return s == EvalSetting::parallel ? "parallel" : "nonparallel"; }

EvalSetting parse_eval_setting(const std::string& name) {
  if (name == "parallel") return EvalSetting::parallel;
  if (name == "nonparallel") return EvalSetting::nonparallel;
  throw InvalidInput("setting must be 'parallel' or 'nonparallel', got '" + name + "'");
}

SummaryStats summarize(std::vector<double> values) {
  SummaryStats s;
  s.count = static_cast<int>(values.size());
  if (values.empty()) return s;
  double sum = 0;
  for (double v : values) sum += v;
  s.mean = sum / static_cast<double>(values.size());
  double sq = 0;
  for (double v : values) sq += (v - s.mean) * (v - s.mean);
  s.std = std::sqrt(sq / static_cast<double>(values.size()));
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  s.median = n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
  return s;
}

AttentionSummary summarize_attention(const std::vector<Matrix>& weights) {
  AttentionSummary s;
  if (weights.empty()) return s;
  const Eigen::Index H = weights.front().rows(), T = weights.front().cols();
  s.steps = static_cast<int>(weights.size());
  s.frames = static_cast<int>(T);
  double entropy = 0;
  Matrix mean = Matrix::Zero(H, T), sq = Matrix::Zero(H, T);
  for (const Matrix& w : weights) {
    for (Eigen::Index h = 0; h < H; ++h)
      for (Eigen::Index u = 0; u < T; ++u)
        if (w(h, u) > 0) entropy -= w(h, u) * std::log(w(h, u));
    mean += w;
    sq += w.cwiseAbs2();
  }
  const double n = static_cast<double>(weights.size());
  s.mean_entropy = entropy / (n * static_cast<double>(H));
  mean /= n;
  s.temporal_variance = ((sq / n) - mean.cwiseAbs2()).cwiseMax(0.0).mean();
  return s;
}

namespace {

json stats_json(const SummaryStats& s) {
  return {{"mean", s.mean}, {"std", s.std}, {"median", s.median}, {"count", s.count}};
}

json style_json(const glyph::StyleParams& s) {
  return {{"slant", s.slant}, {"scale", s.scale}, {"speed", s.speed}, {"jitter", s.jitter}, {"drift", s.drift}};
}

json attention_json(const AttentionSummary& a) {
  return {{"mean_entropy", a.mean_entropy},
          {"temporal_variance", a.temporal_variance},
          {"steps", a.steps},
          {"frames", a.frames}};
}

/// First pen-down run with its closing pen-up sample.
glyph::StrokeSequence first_glyph(const glyph::StrokeSequence& s) {
  const auto runs = s.pen_down_runs();
  glyph::StrokeSequence out;
  if (runs.empty()) return out;
  const auto [b, e] = runs.front();
  out.samples.assign(s.samples.begin() + static_cast<std::ptrdiff_t>(b),
                     s.samples.begin() + static_cast<std::ptrdiff_t>(std::min(e + 1, s.size())));
  out.samples.back().pen = 0;
  return out;
}

}  // namespace

json to_json(const EvalReport& r) {
  json records = json::array();
  for (const auto& p : r.records)
    records.push_back({{"pair", p.pair},
                       {"reference_index", p.reference_index},
                       {"content_index", p.content_index},
                       {"content", p.content},
                       {"decoded", p.decoded},
                       {"glyph_error", p.glyph_error},
                       {"failed", p.failed},
                       {"truncated", p.truncated},
                       {"frames", p.frames},
                       {"truth", style_json(p.truth)},
                       {"estimate", style_json(p.estimate)},
                       {"slant_error", p.slant_error},
                       {"scale_error", p.scale_error},
                       {"speed_error", p.speed_error},
                       {"first_glyph_residual", p.first_glyph_residual}});
  return {{"setting", to_string(r.setting)},
          {"num_pairs", r.num_pairs},
          {"glyph_error_rate", r.glyph_error_rate},
          {"glyph_error_std", r.glyph_error_std},
          {"failures", r.failures},
          {"style_errors",
           {{"slant", stats_json(r.slant_error)},
            {"scale", stats_json(r.scale_error)},
            {"speed", stats_json(r.speed_error)}}},
          {"first_glyph_residual", stats_json(r.first_glyph_residual)},
          {"attention_summaries", attention_json(r.attention)},
          {"records", records}};
}

namespace {

struct PairOutcome {
  PairRecord rec;
  std::optional<AttentionSummary> attention;
};

PairOutcome evaluate_pair(const Generator& gen, const glyph::LabeledSample& ref,
                          const glyph::ContentSequence& content, std::uint64_t gen_seed,
                          const EvalOptions& options, PairRecord rec) {
  PairOutcome o;
  rec.content = content.symbols;
  rec.truth = ref.style;
  GenerationConfig g = options.generation;
  g.seed = gen_seed;
  Generation out;
  switch (options.mode) {
    case EvalMode::replicate:
      if (options.zero_style) {
        const Matrix f = gen.encode(ref.strokes);
        out = gen.from_features(content, Matrix::Zero(f.rows(), f.cols()), g, options.record_attention);
      } else {
        out = gen.replicate(content, ref.strokes, g, options.record_attention);
      }
      break;
    case EvalMode::primed: out = gen.primed(content, ref.strokes, ref.content, g); break;
    case EvalMode::prior: out = gen.from_prior(content, g); break;
  }
  rec.truncated = out.truncated;
  rec.frames = static_cast<int>(out.frames.cols());
  if (!out.attention.empty()) o.attention = summarize_attention(out.attention);

  try {
    rec.decoded = glyph::decode_content_oracle(out.strokes);
    rec.glyph_error = static_cast<double>(glyph::edit_distance(rec.decoded, rec.content)) /
                      static_cast<double>(rec.content.size());
    const glyph::StyleFit fit = glyph::fit_style_oracle(out.strokes);
    rec.estimate = fit.estimate;
    rec.slant_error = std::abs(fit.estimate.slant - ref.style.slant);
    rec.scale_error = std::abs(fit.estimate.scale - ref.style.scale);
    rec.speed_error = std::abs(fit.estimate.speed - ref.style.speed);
    rec.first_glyph_residual = glyph::fit_style_oracle(first_glyph(out.strokes)).residual;
  } catch (const InvalidInput&) {
    rec.failed = true;
    rec.glyph_error = 1.0;
    rec.decoded.clear();
    rec.slant_error = rec.scale_error = rec.speed_error = std::numeric_limits<double>::quiet_NaN();
    rec.first_glyph_residual = std::numeric_limits<double>::quiet_NaN();
  }
  o.rec = std::move(rec);
  return o;
}

}  // namespace

EvalReport eval_pairs(const Generator& gen, const std::vector<glyph::LabeledSample>& eval_set,
                      EvalSetting setting, int num_pairs, std::uint64_t seed,
                      const EvalOptions& options) {
  if (num_pairs < 1) throw InvalidInput("num_pairs must be >= 1");
  if (eval_set.empty()) throw InvalidInput("evaluation set is empty");
  if (options.threads < 1) throw InvalidInput("threads must be >= 1");
  const int n = static_cast<int>(eval_set.size());
  Rng rng = make_rng(seed, "pairs");
  std::uniform_int_distribution<int> pick(0, n - 1);

  // Pairing is drawn serially so the report does not depend on the thread count.
  std::vector<PairRecord> pairs(static_cast<std::size_t>(num_pairs));
  for (int i = 0; i < num_pairs; ++i) {
    PairRecord& rec = pairs[static_cast<std::size_t>(i)];
    rec.pair = i;
    rec.reference_index = pick(rng);
    const auto& ref = eval_set[static_cast<std::size_t>(rec.reference_index)];
    rec.content_index = rec.reference_index;
    if (setting == EvalSetting::nonparallel) {
      int tries = 0;
      do {
        rec.content_index = pick(rng);
        if (++tries > 100 * n) throw InvalidInput("no nonparallel content available in the evaluation set");
      } while (eval_set[static_cast<std::size_t>(rec.content_index)].content.symbols == ref.content.symbols);
    }
  }

  std::vector<PairOutcome> outcomes(pairs.size());
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto worker = [&] {
    for (std::size_t i = next++; i < pairs.size(); i = next++) {
      try {
        const PairRecord& p = pairs[i];
        outcomes[i] = evaluate_pair(gen, eval_set[static_cast<std::size_t>(p.reference_index)],
                                    eval_set[static_cast<std::size_t>(p.content_index)].content,
                                    derive_seed(seed, "generate", i), options, p);
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!error) error = std::current_exception();
      }
    }
  };
  {
    std::vector<std::jthread> pool;
    const int extra = std::min(options.threads, num_pairs) - 1;
    for (int t = 0; t < extra; ++t) pool.emplace_back(worker);
    worker();
  }
  if (error) std::rethrow_exception(error);

  EvalReport report;
  report.setting = setting;
  report.num_pairs = num_pairs;
  std::vector<double> ger, slant, scale, speed, first;
  double entropy = 0, variance = 0;
  int attention_pairs = 0;
  for (auto& o : outcomes) {
    if (o.attention) {
      entropy += o.attention->mean_entropy;
      variance += o.attention->temporal_variance;
      report.attention.steps += o.attention->steps;
      report.attention.frames = std::max(report.attention.frames, o.attention->frames);
      ++attention_pairs;
    }
    if (o.rec.failed) {
      ++report.failures;
    } else {
      slant.push_back(o.rec.slant_error);
      scale.push_back(o.rec.scale_error);
      speed.push_back(o.rec.speed_error);
      first.push_back(o.rec.first_glyph_residual);
    }
    ger.push_back(o.rec.glyph_error);
    report.records.push_back(std::move(o.rec));
  }
  const SummaryStats g = summarize(ger);
  report.glyph_error_rate = g.mean;
  report.glyph_error_std = g.std;
  report.slant_error = summarize(slant);
  report.scale_error = summarize(scale);
  report.speed_error = summarize(speed);
  report.first_glyph_residual = summarize(first);
  if (attention_pairs > 0) {
    report.attention.mean_entropy = entropy / attention_pairs;
    report.attention.temporal_variance = variance / attention_pairs;
  }
  return report;
}

// ---------------------------------------------------------------------------
// Attention dumps.

AttentionDump dump_style_attention(const Generator& gen, const glyph::ContentSequence& content,
                                   const glyph::StrokeSequence& reference,
                                   const GenerationConfig& gcfg) {
  AttentionDump d;
  d.generation = gen.replicate(content, reference, gcfg, true);
  d.weights = d.generation.attention;
  d.entropy.resize(static_cast<Eigen::Index>(d.weights.size()));
  for (std::size_t t = 0; t < d.weights.size(); ++t)
    d.entropy(static_cast<Eigen::Index>(t)) = summarize_attention({d.weights[t]}).mean_entropy;
  d.summary = summarize_attention(d.weights);
  return d;
}

std::string attention_heatmap_svg(const std::vector<Matrix>& weights) {
  const int steps = static_cast<int>(weights.size());
  const int H = steps ? static_cast<int>(weights.front().rows()) : 0;
  const int T = steps ? static_cast<int>(weights.front().cols()) : 0;
  const int cell_w = 4, cell_h = 12, gap = 6;
  const int width = std::max(1, steps * cell_w);
  const int height = std::max(1, H * (T * cell_h + gap));
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
     << "\" viewBox=\"0 0 " << width << ' ' << height << "\">\n";
  for (int h = 0; h < H; ++h)
    for (int u = 0; u < T; ++u)
      for (int t = 0; t < steps; ++t) {
        const double w = std::clamp(weights[static_cast<std::size_t>(t)](h, u), 0.0, 1.0);
        const int shade = static_cast<int>(std::lround(255 * (1 - w)));
        os << "<rect x=\"" << t * cell_w << "\" y=\"" << h * (T * cell_h + gap) + u * cell_h
           << "\" width=\"" << cell_w << "\" height=\"" << cell_h << "\" fill=\"rgb(" << shade << ','
           << shade << ",255)\"/>\n";
      }
  os << "</svg>\n";
  return os.str();
}

void write_attention_dump(const AttentionDump& dump, const std::filesystem::path& stem,
                          const std::string& setting) {
  json steps = json::array();
  for (const Matrix& w : dump.weights) {
    json rows = json::array();
    for (Eigen::Index h = 0; h < w.rows(); ++h) {
      json row = json::array();
      for (Eigen::Index u = 0; u < w.cols(); ++u) row.push_back(w(h, u));
      rows.push_back(row);
    }
    steps.push_back(rows);
  }
  std::vector<double> entropy(dump.entropy.data(), dump.entropy.data() + dump.entropy.size());
  const json doc = {{"setting", setting},
                    {"shape", {dump.weights.size(), dump.summary.steps ? dump.weights.front().rows() : 0,
                               dump.summary.frames}},
                    {"weights", steps},
                    {"entropy_per_step", entropy},
                    {"summary", attention_json(dump.summary)}};
  write_text_file(stem.string() + ".json", doc.dump(1) + "\n");
  write_text_file(stem.string() + ".svg", attention_heatmap_svg(dump.weights));
}

// ---------------------------------------------------------------------------
// Ablation.

bool AblationResult::all_passed() const {
  for (const auto& r : rows)
    if (r.failed) return false;
  for (const auto& c : checks)
    if (!c.passed) return false;
  return true;
}

namespace {

std::string fmt(double v, int prec = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(prec) << v;
  return os.str();
}

std::vector<std::vector<std::string>> table_cells(const std::vector<AblationRow>& rows) {
  std::vector<std::vector<std::string>> cells{{"variant", "x_prime_mode", "p_eq", "ger_parallel",
                                               "ger_nonparallel", "gap", "slant_err_median",
                                               "scale_err_median", "speed_err_median", "status"}};
  for (const auto& r : rows) {
    if (r.failed) {
      cells.push_back({r.name, to_string(r.mode), fmt(r.equalize_fraction, 2), "-", "-", "-", "-", "-", "-",
                       "failed"});
      continue;
    }
    cells.push_back({r.name, to_string(r.mode), fmt(r.equalize_fraction, 2),
                     fmt(r.parallel.glyph_error_rate), fmt(r.nonparallel.glyph_error_rate),
                     fmt(r.nonparallel.glyph_error_rate - r.parallel.glyph_error_rate),
                     fmt(r.nonparallel.slant_error.median), fmt(r.nonparallel.scale_error.median),
                     fmt(r.nonparallel.speed_error.median), "ok"});
  }
  return cells;
}

}  // namespace

std::string AblationResult::table_text() const {
  const auto cells = table_cells(rows);
  std::vector<std::size_t> width(cells.front().size(), 0);
  for (const auto& row : cells)
    for (std::size_t c = 0; c < row.size(); ++c) width[c] = std::max(width[c], row[c].size());
  std::ostringstream os;
  for (const auto& row : cells) {
    for (std::size_t c = 0; c < row.size(); ++c) {
      if (c) os << "  ";
      os << std::left << std::setw(static_cast<int>(width[c])) << row[c];
    }
    os << '\n';
  }
  if (!checks.empty()) {
    os << '\n';
    for (const auto& c : checks) os << (c.passed ? "PASS " : "FAIL ") << c.name << ": " << c.detail << '\n';
  }
  return os.str();
}

std::string AblationResult::table_csv() const {
  std::ostringstream os;
  for (const auto& row : table_cells(rows)) {
    for (std::size_t c = 0; c < row.size(); ++c) os << (c ? "," : "") << row[c];
    os << '\n';
  }
  return os.str();
}

std::vector<OrderingCheck> check_orderings(const std::vector<AblationRow>& rows) {
  std::vector<OrderingCheck> checks;
  const AblationRow* self = nullptr;
  const AblationRow* eq = nullptr;
  for (const auto& r : rows) {
    if (r.failed) continue;
    if (!self && r.mode == XPrimeMode::always_self) self = &r;
    if (!eq && r.mode == XPrimeMode::real_sample && std::abs(r.equalize_fraction - 0.5) < 1e-12) eq = &r;
  }
  if (self) {
    const double par = self->parallel.glyph_error_rate, np = self->nonparallel.glyph_error_rate;
    checks.push_back({"leakage without equalization", np >= 2 * par,
                      "nonparallel " + fmt(np) + " >= 2 x parallel " + fmt(par)});
  }
  if (self && eq) {
    const double np_eq = eq->nonparallel.glyph_error_rate, np_self = self->nonparallel.glyph_error_rate;
    checks.push_back({"equalized nonparallel error halves", np_eq <= 0.5 * np_self,
                      fmt(np_eq) + " <= 0.5 x " + fmt(np_self)});
    const double gap_eq = np_eq - eq->parallel.glyph_error_rate;
    const double gap_self = np_self - self->parallel.glyph_error_rate;
    checks.push_back({"equalized gap smaller", gap_eq < gap_self, fmt(gap_eq) + " < " + fmt(gap_self)});
  }
  if (eq) {
    const double par = eq->parallel.glyph_error_rate, np = eq->nonparallel.glyph_error_rate;
    checks.push_back({"equalized settings agree", np <= 2 * par,
                      "nonparallel " + fmt(np) + " <= 2 x parallel " + fmt(par)});
  }
  return checks;
}

AblationRow evaluate_variant(const AblationVariant& variant, const Generator& gen,
                             const std::vector<glyph::LabeledSample>& eval_set, int num_pairs,
                             std::uint64_t seed, const EvalOptions& options) {
  AblationRow row;
  row.name = variant.name;
  row.mode = variant.config.x_prime_mode;
  row.equalize_fraction = variant.config.equalize_fraction;
  row.parallel = eval_pairs(gen, eval_set, EvalSetting::parallel, num_pairs, seed, options);
  row.nonparallel = eval_pairs(gen, eval_set, EvalSetting::nonparallel, num_pairs, seed, options);
  return row;
}

AblationResult ablation_suite(const AblationData& data, const std::vector<AblationVariant>& variants,
                              int num_pairs, std::uint64_t seed, const EvalOptions& options,
                              const AblationHooks& hooks) {
  if (variants.empty()) throw InvalidInput("ablation needs at least one variant");
  for (const auto& v : variants) {
    v.config.validate();
    if (to_json(v.config.model) != to_json(variants.front().config.model) ||
        v.config.max_steps != variants.front().config.max_steps)
      throw InvalidInput("ablation variants must share model size and step budget");
  }
  const double scale = estimate_offset_scale(data.train);
  const int V = variants.front().config.model.alphabet_size;
  const auto train_ex = prepare_examples(data.train, scale, V);
  const auto val_ex = prepare_examples(data.validation, scale, V);

  AblationResult result;
  for (const auto& v : variants) {
    AblationRow row;
    row.name = v.name;
    row.mode = v.config.x_prime_mode;
    row.equalize_fraction = v.config.equalize_fraction;
    try {
      Trainer trainer(v.config, train_ex, val_ex, scale);
      TrainCallbacks cb;
      if (hooks.on_step) cb.on_step = [&](const StepMetrics& m) { hooks.on_step(v, m); };
      const TrainOutcome outcome = train(trainer, cb);
      if (hooks.trained) hooks.trained(v, trainer);
      if (outcome.diverged) {
        row.failed = true;
        row.message = outcome.message;
      } else {
        const Generator gen(trainer.params(), trainer.offset_scale());
        row = evaluate_variant(v, gen, data.eval, num_pairs, seed, options);
      }
    } catch (const NumericalError& e) {
      row.failed = true;
      row.message = e.what();
    }
    result.rows.push_back(std::move(row));
  }
  result.checks = check_orderings(result.rows);
  return result;
}

}  // namespace styleeq
