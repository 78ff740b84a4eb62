#ifndef STYLEEQ_TRAINING_HPP
#define STYLEEQ_TRAINING_HPP

// Sequence ELBO with style-equalized posterior input, Adam with the warmup /
// inverse-sqrt schedule, and the checkpoint container.
//
// All per-step randomness comes from derive_seed(seed, purpose, step), so a
// resumed run needs only parameters, Adam moments and the step counter.

#include "styleeq/data.hpp"
#include "styleeq/model.hpp"

#include "json.hpp"

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace styleeq {

enum class XPrimeMode { real_sample, fixed_vector, random_noise, always_self };

std::string to_string(XPrimeMode mode);
XPrimeMode parse_x_prime_mode(const std::string& name);

struct TrainConfig {
  int batch_size = 16;
  double equalize_fraction = 0.5;  // p_eq
  bool alternate_equalization = false;
  double teacher_noise_std = 0.1;
  int warmup_steps = 400;
  double peak_lr = 1e-4;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.98;
  double adam_epsilon = 1e-8;
  int trace_probes = 100;
  double trace_weight = 1.0;
  double grad_clip = 5.0;
  XPrimeMode x_prime_mode = XPrimeMode::real_sample;
  long max_steps = 10000;
  long eval_every = 500;
  long checkpoint_every = 1000;
  int validation_samples = 32;
  double overfit_kl_threshold = 0.02;
  std::uint64_t seed = 0;
  ModelConfig model;

  void validate() const;
};

nlohmann::json to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const TrainConfig& cfg);
/// Strict: unknown keys and wrong types are rejected.
TrainConfig train_config_from_json(const nlohmann::json& j);

struct StepMetrics {
  long step = 0;
  double loss = 0;
  double nll_per_frame = 0;
  double kl_per_frame = 0;
  double trace_reg = 0;
  double grad_norm = 0;
  double lr = 0;
  bool equalized = false;
  bool clipped = false;
};

nlohmann::json to_json(const StepMetrics& m);

struct ValidationMetrics {
  long step = 0;
  double nll_per_frame = 0;
  double kl_per_frame = 0;
  double nonparallel_nll_per_frame = 0;
  bool overfit_flag = false;
};

nlohmann::json to_json(const ValidationMetrics& m);

/// peak_lr · min(step / warmup, sqrt(warmup / step)); step starts at 1.
double lr_schedule(long step, int warmup, double peak_lr);

// ---------------------------------------------------------------------------
// Objective.

/// Style reference of one batch element.
struct StyleSource {
  enum class Kind { self, frames, features };
  Kind kind = Kind::self;
  const Matrix* data = nullptr;  // 3×T frames or s×T' features
};

struct ElboItem {
  const Matrix* frames = nullptr;   // 3×T target
  const Matrix* content = nullptr;  // V×N
  StyleSource x_prime;
};

struct ElboOptions {
  double teacher_noise_std = 0.1;
  bool dropout = true;
  int trace_probes = 100;
  double trace_weight = 1.0;
  /// Feed f′ straight into style attention, skipping φ and M.
  bool bypass_equalization = false;
};

struct ElboResult {
  ad::Var loss;
  double nll_sum = 0;
  double kl_sum = 0;
  double trace_reg = 0;
  long frames = 0;
  std::vector<Vector> deltas;        // δ per element
  std::vector<Matrix> style_inputs;  // features entering style attention
};

/// loss = (1/B) Σ_b Σ_t [−log p(x_t | ·) + KL(q_t ‖ p_t)] + w · trace_reg(A).
ElboResult elbo_loss(ad::Graph<Real>& g, const model::Bound<Real>& p, const ModelConfig& cfg,
                     const std::vector<ElboItem>& batch, const ElboOptions& opt,
                     std::uint64_t noise_seed);

/// Encoder features of a frame matrix with dropout off.
Matrix encode_reference(const ModelParams<Real>& params, const Matrix& frames);

// ---------------------------------------------------------------------------
// Optimizer and checkpoints.

struct AdamState {
  std::vector<Matrix> m;
  std::vector<Matrix> v;
};

inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  ModelParams<Real> params;
  double offset_scale = 1.0;
  long step = 0;
  std::optional<AdamState> adam;
  nlohmann::json train_config;  // null when absent
  nlohmann::json metadata = nlohmann::json::object();
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Trainer.

class Trainer {
 public:
  Trainer(TrainConfig cfg, std::vector<SequenceExample> train, std::vector<SequenceExample> val,
          double offset_scale);
  /// Resumes from a checkpoint carrying Adam state.
  Trainer(TrainConfig cfg, std::vector<SequenceExample> train, std::vector<SequenceExample> val,
          const Checkpoint& ckpt);

  /// One optimizer step. Throws NumericalError without touching parameters
  /// when the loss or gradient is non-finite.
  StepMetrics step();
  ValidationMetrics validate();

  long current_step() const { return step_; }
  const TrainConfig& config() const { return cfg_; }
  const ModelParams<Real>& params() const { return params_; }
  ModelParams<Real>& params() { return params_; }
  double offset_scale() const { return offset_scale_; }
  Checkpoint checkpoint() const;

  /// Batch composition of a given step, exposed for tests.
  struct BatchPlan {
    std::vector<int> targets;
    std::vector<int> references;  // −1 when the element uses itself or a synthetic x′
    bool equalized = false;
  };
  BatchPlan plan(long step) const;

 private:
  TrainConfig cfg_;
  std::vector<SequenceExample> train_;
  std::vector<SequenceExample> val_;
  double offset_scale_;
  ModelParams<Real> params_;
  AdamState adam_;
  long step_ = 0;
  Matrix fixed_vector_;
  std::optional<double> best_nonparallel_nll_;
};

struct TrainOutcome {
  bool diverged = false;
  std::string message;
};

struct TrainCallbacks {
  std::function<void(const StepMetrics&)> on_step;
  std::function<void(const ValidationMetrics&)> on_validation;
  std::function<void(const Trainer&)> on_checkpoint;
};

/// Runs until max_steps. Validation every eval_every steps, checkpoints every
/// checkpoint_every steps and at the end. On divergence the parameters stay
/// at the last good step and on_checkpoint fires once more.
TrainOutcome train(Trainer& trainer, const TrainCallbacks& callbacks = {});

}  // namespace styleeq

#endif  // STYLEEQ_TRAINING_HPP
