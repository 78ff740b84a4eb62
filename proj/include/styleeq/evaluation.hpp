#ifndef STYLEEQ_EVALUATION_HPP
#define STYLEEQ_EVALUATION_HPP

// Content leakage and style replication measured with the template oracles,
// style-attention dumps, and the x′ ablation table.

#include "styleeq/inference.hpp"
#include "styleeq/training.hpp"

#include "json.hpp"

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

namespace styleeq {

enum class EvalSetting { parallel, nonparallel };

std::string to_string(EvalSetting s);
EvalSetting parse_eval_setting(const std::string& name);

enum class EvalMode { replicate, primed, prior };

struct SummaryStats {
  double mean = 0;
  double std = 0;  // population
  double median = 0;
  int count = 0;
};

SummaryStats summarize(std::vector<double> values);

struct PairRecord {
  int pair = 0;
  int reference_index = 0;
  int content_index = 0;
  std::vector<int> content;
  std::vector<int> decoded;
  double glyph_error = 0;
  bool failed = false;
  bool truncated = false;
  int frames = 0;
  glyph::StyleParams truth;
  glyph::StyleParams estimate;
  double slant_error = 0;
  double scale_error = 0;
  double speed_error = 0;
  double first_glyph_residual = 0;
};

struct AttentionSummary {
  double mean_entropy = 0;       // per-step entropy, averaged over heads and steps
  double temporal_variance = 0;  // variance across steps, averaged over heads and frames
  int steps = 0;
  int frames = 0;  // T′
};

/// Statistics of a sequence of H×T′ weight matrices.
AttentionSummary summarize_attention(const std::vector<Matrix>& weights);

struct EvalReport {
  EvalSetting setting = EvalSetting::parallel;
  int num_pairs = 0;
  double glyph_error_rate = 0;
  double glyph_error_std = 0;
  int failures = 0;
  SummaryStats slant_error, scale_error, speed_error, first_glyph_residual;
  std::vector<PairRecord> records;
  AttentionSummary attention;  // averaged over pairs when recorded
};

nlohmann::json to_json(const EvalReport& r);

struct EvalOptions {
  GenerationConfig generation;
  EvalMode mode = EvalMode::replicate;
  bool zero_style = false;  // feed all-zero style features of the reference's shape
  bool record_attention = false;
  int threads = 1;  // pair evaluations run concurrently; results do not depend on it
};

/// Pairs are drawn with make_rng(seed, "pairs"): a uniform reference, and for
/// the nonparallel setting a content sample whose glyphs differ from it.
EvalReport eval_pairs(const Generator& gen, const std::vector<glyph::LabeledSample>& eval_set,
                      EvalSetting setting, int num_pairs, std::uint64_t seed,
                      const EvalOptions& options = {});

struct AttentionDump {
  std::vector<Matrix> weights;  // per generated step, H×T′
  Vector entropy;               // per step, averaged over heads
  AttentionSummary summary;
  Generation generation;
};

AttentionDump dump_style_attention(const Generator& gen, const glyph::ContentSequence& content,
                                   const glyph::StrokeSequence& reference,
                                   const GenerationConfig& gcfg);

/// Writes `<stem>.json` (weights and statistics) and `<stem>.svg` (heatmap).
void write_attention_dump(const AttentionDump& dump, const std::filesystem::path& stem,
                          const std::string& setting);

std::string attention_heatmap_svg(const std::vector<Matrix>& weights);

// ---------------------------------------------------------------------------
// Ablation.

struct AblationVariant {
  std::string name;
  TrainConfig config;
};

struct AblationRow {
  std::string name;
  XPrimeMode mode = XPrimeMode::real_sample;
  double equalize_fraction = 0;
  bool failed = false;
  std::string message;
  EvalReport parallel;
  EvalReport nonparallel;
};

struct OrderingCheck {
  std::string name;
  bool passed = false;
  std::string detail;
};

struct AblationResult {
  std::vector<AblationRow> rows;
  std::vector<OrderingCheck> checks;

  bool all_passed() const;
  std::string table_text() const;
  std::string table_csv() const;
};

/// Checks on a completed table: leakage of the no-equalization variant and
/// the gap reduction of the equalized variant.
std::vector<OrderingCheck> check_orderings(const std::vector<AblationRow>& rows);

struct AblationData {
  std::vector<glyph::LabeledSample> train;
  std::vector<glyph::LabeledSample> validation;
  std::vector<glyph::LabeledSample> eval;
};

/// Trains every variant and evaluates it in both settings. `trained` is
/// called with each finished trainer (checkpoint hooks); `make_trainer` may
/// be supplied to reuse cached training.
struct AblationHooks {
  std::function<void(const AblationVariant&, const Trainer&)> trained;
  std::function<void(const AblationVariant&, const StepMetrics&)> on_step;
};

AblationResult ablation_suite(const AblationData& data, const std::vector<AblationVariant>& variants,
                              int num_pairs, std::uint64_t seed, const EvalOptions& options = {},
                              const AblationHooks& hooks = {});

/// Evaluates an already trained variant in both settings.
AblationRow evaluate_variant(const AblationVariant& variant, const Generator& gen,
                             const std::vector<glyph::LabeledSample>& eval_set, int num_pairs,
                             std::uint64_t seed, const EvalOptions& options = {});

}  // namespace styleeq

#endif  // STYLEEQ_EVALUATION_HPP
