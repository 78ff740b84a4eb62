#include "styleeq/training.hpp"

#include "styleeq/config.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <utility>

namespace styleeq {

using json = nlohmann::json;
using ad::Graph;
using ad::Var;

std::string to_string(XPrimeMode mode) {
  switch (mode) {
    case XPrimeMode::real_sample: return "real_sample";
    case XPrimeMode::fixed_vector: return "fixed_vector";
    case XPrimeMode::random_noise: return "random_noise";
    case XPrimeMode::always_self: return "always_self";
  }
  return "?";
}

XPrimeMode parse_x_prime_mode(const std::string& name) {
  for (auto m : {XPrimeMode::real_sample, XPrimeMode::fixed_vector, XPrimeMode::random_noise,
                 XPrimeMode::always_self})
    if (to_string(m) == name) return m;
  throw InvalidInput("unknown x_prime_mode '" + name + "'");
}

void TrainConfig::validate() const {
  model.validate();
  if (batch_size < 1) throw InvalidInput("batch_size must be >= 1");
  if (!(equalize_fraction >= 0 && equalize_fraction <= 1))
    throw InvalidInput("equalize_fraction must lie in [0, 1]");
  if (!(teacher_noise_std >= 0)) throw InvalidInput("teacher_noise_std must be >= 0");
  if (warmup_steps < 1) throw InvalidInput("warmup_steps must be >= 1");
  if (!(peak_lr > 0)) throw InvalidInput("peak_lr must be positive");
  if (!(adam_beta1 >= 0 && adam_beta1 < 1 && adam_beta2 >= 0 && adam_beta2 < 1))
    throw InvalidInput("adam betas must lie in [0, 1)");
  if (!(adam_epsilon > 0)) throw InvalidInput("adam_epsilon must be positive");
  if (trace_probes < 1) throw InvalidInput("trace_probes must be >= 1");
  if (!(trace_weight >= 0)) throw InvalidInput("trace_weight must be >= 0");
  if (!(grad_clip > 0)) throw InvalidInput("grad_clip must be positive");
  if (max_steps < 0) throw InvalidInput("max_steps must be >= 0");
  if (eval_every < 0 || checkpoint_every < 0) throw InvalidInput("intervals must be >= 0");
  if (validation_samples < 0) throw InvalidInput("validation_samples must be >= 0");
}

// ---------------------------------------------------------------------------
// Config files.

using config::bool_field;
using config::int_field;
using config::real_field;
using config::Setter;

namespace {

struct FieldReader {
  const json& j;
  std::string where;

  void each(const std::map<std::string, Setter>& setters) const { config::read_object(j, where, setters); }
};

}  // namespace

json to_json(const ModelConfig& c) {
  return {{"bottom_dim", c.bottom_dim},
          {"top_dim", c.top_dim},
          {"z_dim", c.z_dim},
          {"num_windows", c.num_windows},
          {"num_mixtures", c.num_mixtures},
          {"alphabet_size", c.alphabet_size},
          {"conv_channels", c.conv_channels},
          {"style_subspace_dim", c.style_subspace_dim},
          {"attention_heads", c.attention_heads},
          {"head_dim", c.head_dim},
          {"prior_hidden", c.prior_hidden},
          {"dropout", c.dropout}};
}

ModelConfig model_config_from_json(const json& j) {
  ModelConfig c;
  const std::map<std::string, Setter> setters{
      {"bottom_dim", int_field(c.bottom_dim)},
      {"top_dim", int_field(c.top_dim)},
      {"z_dim", int_field(c.z_dim)},
      {"num_windows", int_field(c.num_windows)},
      {"num_mixtures", int_field(c.num_mixtures)},
      {"alphabet_size", int_field(c.alphabet_size)},
      {"conv_channels",
       [&c](const json& v, const std::string& path) {
         if (!v.is_array()) throw InvalidInput(path + ": expected an array of integers");
         c.conv_channels.clear();
         for (const auto& e : v) {
           if (!e.is_number_integer()) throw InvalidInput(path + ": expected integers");
           c.conv_channels.push_back(e.get<int>());
         }
       }},
      {"style_subspace_dim", int_field(c.style_subspace_dim)},
      {"attention_heads", int_field(c.attention_heads)},
      {"head_dim", int_field(c.head_dim)},
      {"prior_hidden", int_field(c.prior_hidden)},
      {"dropout", real_field(c.dropout)},
  };
  FieldReader{j, "model"}.each(setters);
  c.validate();
  return c;
}

json to_json(const TrainConfig& c) {
  return {{"batch_size", c.batch_size},
          {"equalize_fraction", c.equalize_fraction},
          {"alternate_equalization", c.alternate_equalization},
          {"teacher_noise_std", c.teacher_noise_std},
          {"warmup_steps", c.warmup_steps},
          {"peak_lr", c.peak_lr},
          {"adam_beta1", c.adam_beta1},
          {"adam_beta2", c.adam_beta2},
          {"adam_epsilon", c.adam_epsilon},
          {"trace_probes", c.trace_probes},
          {"trace_weight", c.trace_weight},
          {"grad_clip", c.grad_clip},
          {"x_prime_mode", to_string(c.x_prime_mode)},
          {"max_steps", c.max_steps},
          {"eval_every", c.eval_every},
          {"checkpoint_every", c.checkpoint_every},
          {"validation_samples", c.validation_samples},
          {"overfit_kl_threshold", c.overfit_kl_threshold},
          {"seed", c.seed},
          {"model", to_json(c.model)}};
}

TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  const std::map<std::string, Setter> setters{
      {"batch_size", int_field(c.batch_size)},
      {"equalize_fraction", real_field(c.equalize_fraction)},
      {"alternate_equalization", bool_field(c.alternate_equalization)},
      {"teacher_noise_std", real_field(c.teacher_noise_std)},
      {"warmup_steps", int_field(c.warmup_steps)},
      {"peak_lr", real_field(c.peak_lr)},
      {"adam_beta1", real_field(c.adam_beta1)},
      {"adam_beta2", real_field(c.adam_beta2)},
      {"adam_epsilon", real_field(c.adam_epsilon)},
      {"trace_probes", int_field(c.trace_probes)},
      {"trace_weight", real_field(c.trace_weight)},
      {"grad_clip", real_field(c.grad_clip)},
      {"x_prime_mode",
       [&c](const json& v, const std::string& path) {
         if (!v.is_string()) throw InvalidInput(path + ": expected a string");
         c.x_prime_mode = parse_x_prime_mode(v.get<std::string>());
       }},
      {"max_steps", int_field(c.max_steps)},
      {"eval_every", int_field(c.eval_every)},
      {"checkpoint_every", int_field(c.checkpoint_every)},
      {"validation_samples", int_field(c.validation_samples)},
      {"overfit_kl_threshold", real_field(c.overfit_kl_threshold)},
      {"seed", config::seed_field(c.seed)},
      {"model", [&c](const json& v, const std::string&) { c.model = model_config_from_json(v); }},
  };
  FieldReader{j, "train"}.each(setters);
  c.validate();
  return c;
}

json to_json(const StepMetrics& m) {
  return {{"step", m.step},
          {"loss", m.loss},
          {"nll_per_frame", m.nll_per_frame},
          {"kl_per_frame", m.kl_per_frame},
          {"trace_reg", m.trace_reg},
          {"grad_norm", m.grad_norm},
          {"lr", m.lr},
          {"equalized", m.equalized},
          {"clipped", m.clipped}};
}

json to_json(const ValidationMetrics& m) {
  return {{"step", m.step},
          {"validation", true},
          {"nll_per_frame", m.nll_per_frame},
          {"kl_per_frame", m.kl_per_frame},
          {"nonparallel_nll_per_frame", m.nonparallel_nll_per_frame},
          {"overfit_flag", m.overfit_flag}};
}

double lr_schedule(long step, int warmup, double peak_lr) {
  if (step < 1) throw InvalidInput("lr_schedule: step must be >= 1");
  if (warmup < 1) throw InvalidInput("lr_schedule: warmup must be >= 1");
  const double s = static_cast<double>(step), w = static_cast<double>(warmup);
  return peak_lr * std::min(s / w, std::sqrt(w / s));
}

// ---------------------------------------------------------------------------
// Objective.

namespace {

int encoder_min_length() {
  static const int n = style::minimum_input_length(style::default_conv_chain());
  return n;
}

}  // namespace

ElboResult elbo_loss(Graph<Real>& g, const model::Bound<Real>& p, const ModelConfig& cfg,
                     const std::vector<ElboItem>& batch, const ElboOptions& opt,
                     std::uint64_t noise_seed) {
  if (batch.empty()) throw InvalidInput("elbo_loss: empty batch");
  const auto B = static_cast<Eigen::Index>(batch.size());
  Rng dropout_rng = make_rng(noise_seed, "dropout");
  Rng teacher_rng = make_rng(noise_seed, "teacher");
  Rng reparam_rng = make_rng(noise_seed, "reparam");
  Rng probe_rng = make_rng(noise_seed, "probes");
  Rng* drop = opt.dropout ? &dropout_rng : nullptr;
  const int min_len = encoder_min_length();

  ElboResult res;
  std::vector<Var> style_in;
  auto contents = std::make_shared<std::vector<Matrix>>();
  Eigen::Index t_max = 0;
  for (const auto& item : batch) {
    if (!item.frames || !item.content || item.frames->rows() != 3 || item.frames->cols() < 1)
      throw InvalidInput("elbo_loss: malformed batch element");
    if (item.content->rows() != cfg.alphabet_size || item.content->cols() < 1)
      throw InvalidInput("elbo_loss: content does not match the model alphabet");
    t_max = std::max(t_max, item.frames->cols());
    contents->push_back(*item.content);

    Var f = model::conv_encode(g, p, g.constant(pad_frames(*item.frames, min_len)), cfg.dropout, drop);
    Var f_prime = f;
    switch (item.x_prime.kind) {
      case StyleSource::Kind::self: break;
      case StyleSource::Kind::frames:
        f_prime = model::conv_encode(g, p, g.constant(pad_frames(*item.x_prime.data, min_len)),
                                     cfg.dropout, drop);
        break;
      case StyleSource::Kind::features:
        if (item.x_prime.data->rows() != cfg.feature_dim())
          throw InvalidInput("elbo_loss: x' features have the wrong width");
        f_prime = g.constant(*item.x_prime.data);
        break;
    }
    Var input = f_prime;
    if (opt.bypass_equalization) {
      res.deltas.emplace_back();
    } else {
      Var delta = model::phi(g, p.basis, f, f_prime);
      input = model::transform_M(g, p.basis, f_prime, delta);
      res.deltas.push_back(g.value(delta));
    }
    res.style_inputs.push_back(g.value(input));
    style_in.push_back(input);
  }
  const model::StyleMemory memory = model::build_memory(g, p, style_in);
  const ad::ContentBatch<Real> content = contents;

  model::State state = model::initial_state(g, cfg, B);
  Matrix prev = Matrix::Zero(3, B);
  std::vector<Var> terms;
  terms.reserve(static_cast<std::size_t>(2 * t_max));
  for (Eigen::Index t = 0; t < t_max; ++t) {
    Matrix input = prev;
    if (opt.teacher_noise_std > 0)
      input += opt.teacher_noise_std * standard_normal<Real>(3, B, teacher_rng);
    Matrix target = Matrix::Zero(3, B), is_last = Matrix::Zero(1, B), mask = Matrix::Zero(1, B);
    for (Eigen::Index b = 0; b < B; ++b) {
      const Matrix& x = *batch[static_cast<std::size_t>(b)].frames;
      if (t >= x.cols()) continue;
      target.col(b) = x.col(t);
      mask(0, b) = 1;
      is_last(0, b) = t + 1 == x.cols() ? 1 : 0;
      ++res.frames;
    }
    auto bottom = model::bottom_step(g, p, cfg, state, g.constant(std::move(input)), content);
    Var prior = model::prior_raw(g, p, bottom.h, bottom.attended);
    Var read = model::style_attend(g, p, cfg, bottom.h, bottom.attended, memory);
    Var post = model::posterior_raw(g, p, read);
    Var z = model::reparam(g, post, standard_normal<Real>(cfg.z_dim, B, reparam_rng));
    auto top = model::top_step(g, p, cfg, state, bottom.h, z, bottom.attended);
    Var nll = ad::mdn_nll(g, top.out_raw, target, is_last, mask);
    Var kl = ad::kl_diag(g, post, prior, mask);
    res.nll_sum += g.value(nll)(0, 0);
    res.kl_sum += g.value(kl)(0, 0);
    terms.push_back(nll);
    terms.push_back(kl);
    state = {bottom.bottom, top.top1, top.top2, bottom.kappa, bottom.attended};
    prev = std::move(target);
  }

  const Matrix probes = standard_normal<Real>(g.value(p.basis).cols(), opt.trace_probes, probe_rng);
  Var trace = model::trace_penalty(g, p.basis, probes);
  res.trace_reg = g.value(trace)(0, 0);

  Var data_term = ad::scale(g, ad::add_n(g, terms), Real(1) / static_cast<Real>(B));
  res.loss = ad::add(g, data_term, ad::scale(g, trace, static_cast<Real>(opt.trace_weight)));
  return res;
}

Matrix encode_reference(const ModelParams<Real>& params, const Matrix& frames) {
  Graph<Real> g(false);
  const auto p = model::bind(g, params);
  Var f = model::conv_encode(g, p, g.constant(pad_frames(frames, encoder_min_length())),
                             params.config.dropout, nullptr);
  return g.value(f);
}

// ---------------------------------------------------------------------------
// Checkpoints.

namespace {

constexpr char kMagic[8] = {'S', 'T', 'Y', 'L', 'E', 'Q', 'C', 'K'};

void write_matrix(std::ostream& os, const Matrix& m) {
  os.write(reinterpret_cast<const char*>(m.data()),
           static_cast<std::streamsize>(m.size() * static_cast<Eigen::Index>(sizeof(double))));
}

void read_matrix(std::istream& is, Matrix& m, Eigen::Index rows, Eigen::Index cols) {
  m.resize(rows, cols);
  is.read(reinterpret_cast<char*>(m.data()),
          static_cast<std::streamsize>(m.size() * static_cast<Eigen::Index>(sizeof(double))));
  if (!is) throw InvalidInput("checkpoint: truncated tensor data");
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  json params = json::array();
  ckpt.params.visit([&params](const ad::Parameter<Real>& p) {
    params.push_back({{"name", p.name}, {"rows", p.value.rows()}, {"cols", p.value.cols()}});
  });
  const json header = {{"format", "styleeq-checkpoint"},
                       {"version", kCheckpointVersion},
                       {"model", to_json(ckpt.params.config)},
                       {"offset_scale", ckpt.offset_scale},
                       {"step", ckpt.step},
                       {"adam", ckpt.adam.has_value()},
                       {"train_config", ckpt.train_config},
                       {"metadata", ckpt.metadata},
                       {"parameters", params}};
  const std::string text = header.dump();
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write " + tmp.string());
    os.write(kMagic, sizeof(kMagic));
    const std::uint32_t version = kCheckpointVersion;
    const std::uint64_t len = text.size();
    os.write(reinterpret_cast<const char*>(&version), sizeof(version));
    os.write(reinterpret_cast<const char*>(&len), sizeof(len));
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    ckpt.params.visit([&os](const ad::Parameter<Real>& p) { write_matrix(os, p.value); });
    if (ckpt.adam) {
      for (const auto& m : ckpt.adam->m) write_matrix(os, m);
      for (const auto& v : ckpt.adam->v) write_matrix(os, v);
    }
    if (!os) throw std::runtime_error("failed writing " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint " + path.string());
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kMagic, sizeof(magic)) != 0)
    throw InvalidInput("not a checkpoint file: " + path.string());
  std::uint32_t version = 0;
  std::uint64_t len = 0;
  is.read(reinterpret_cast<char*>(&version), sizeof(version));
  is.read(reinterpret_cast<char*>(&len), sizeof(len));
  if (!is || version != kCheckpointVersion)
    throw InvalidInput("unsupported checkpoint version " + std::to_string(version));
  if (len > (1u << 26)) throw InvalidInput("checkpoint header too large");
  std::string text(len, '\0');
  is.read(text.data(), static_cast<std::streamsize>(len));
  if (!is) throw InvalidInput("checkpoint: truncated header");
  const json header = json::parse(text);

  Checkpoint ckpt;
  ckpt.params = ModelParams<Real>::init(model_config_from_json(header.at("model")), 0);
  ckpt.offset_scale = header.at("offset_scale").get<double>();
  ckpt.step = header.at("step").get<long>();
  ckpt.train_config = header.at("train_config");
  ckpt.metadata = header.at("metadata");
  const json& registry = header.at("parameters");
  std::size_t i = 0;
  bool mismatch = false;
  ckpt.params.visit([&](ad::Parameter<Real>& p) {
    if (i >= registry.size()) {
      mismatch = true;
      return;
    }
    const json& e = registry[i++];
    if (e.at("name").get<std::string>() != p.name || e.at("rows").get<Eigen::Index>() != p.value.rows() ||
        e.at("cols").get<Eigen::Index>() != p.value.cols())
      mismatch = true;
  });
  if (mismatch || i != registry.size()) throw InvalidInput("checkpoint: parameter registry mismatch");
  ckpt.params.visit([&is](ad::Parameter<Real>& p) {
    read_matrix(is, p.value, p.value.rows(), p.value.cols());
    p.zero_grad();
  });
  if (header.at("adam").get<bool>()) {
    AdamState adam;
    ckpt.params.visit([&](const ad::Parameter<Real>& p) {
      adam.m.emplace_back();
      read_matrix(is, adam.m.back(), p.value.rows(), p.value.cols());
    });
    ckpt.params.visit([&](const ad::Parameter<Real>& p) {
      adam.v.emplace_back();
      read_matrix(is, adam.v.back(), p.value.rows(), p.value.cols());
    });
    ckpt.adam = std::move(adam);
  }
  is.peek();
  if (!is.eof()) throw InvalidInput("checkpoint: trailing bytes");
  return ckpt;
}

// ---------------------------------------------------------------------------
// Trainer.

Trainer::Trainer(TrainConfig cfg, std::vector<SequenceExample> train,
                 std::vector<SequenceExample> val, double offset_scale)
    : cfg_(std::move(cfg)), train_(std::move(train)), val_(std::move(val)), offset_scale_(offset_scale) {
  cfg_.validate();
  if (train_.empty()) throw InvalidInput("training set is empty");
  params_ = ModelParams<Real>::init(cfg_.model, derive_seed(cfg_.seed, "init"));
  params_.visit([this](const ad::Parameter<Real>& p) {
    adam_.m.push_back(Matrix::Zero(p.value.rows(), p.value.cols()));
    adam_.v.push_back(Matrix::Zero(p.value.rows(), p.value.cols()));
  });
  Rng rng = make_rng(cfg_.seed, "fixed_vector");
  fixed_vector_ = standard_normal<Real>(cfg_.model.feature_dim(), 1, rng);
}

Trainer::Trainer(TrainConfig cfg, std::vector<SequenceExample> train,
                 std::vector<SequenceExample> val, const Checkpoint& ckpt)
    : Trainer(std::move(cfg), std::move(train), std::move(val), ckpt.offset_scale) {
  if (to_json(cfg_.model) != to_json(ckpt.params.config))
    throw InvalidInput("resume: model config differs from the checkpoint");
  if (!ckpt.adam) throw InvalidInput("resume: checkpoint has no optimizer state");
  params_ = ckpt.params;
  adam_ = *ckpt.adam;
  step_ = ckpt.step;
  if (ckpt.metadata.contains("best_nonparallel_nll"))
    best_nonparallel_nll_ = ckpt.metadata.at("best_nonparallel_nll").get<double>();
}

Checkpoint Trainer::checkpoint() const {
  Checkpoint c;
  c.params = params_;
  c.offset_scale = offset_scale_;
  c.step = step_;
  c.adam = adam_;
  c.train_config = to_json(cfg_);
  if (best_nonparallel_nll_) c.metadata["best_nonparallel_nll"] = *best_nonparallel_nll_;
  return c;
}

Trainer::BatchPlan Trainer::plan(long step) const {
  BatchPlan bp;
  const int n = static_cast<int>(train_.size());
  std::uniform_int_distribution<int> pick(0, n - 1);
  Rng rng = make_rng(cfg_.seed, "batch", static_cast<std::uint64_t>(step));
  for (int i = 0; i < cfg_.batch_size; ++i) bp.targets.push_back(pick(rng));

  const double p = cfg_.equalize_fraction;
  if (cfg_.x_prime_mode == XPrimeMode::always_self) {
    bp.equalized = false;
  } else if (cfg_.alternate_equalization) {
    bp.equalized = std::floor(static_cast<double>(step) * p) > std::floor(static_cast<double>(step - 1) * p);
  } else {
    Rng coin = make_rng(cfg_.seed, "equalize", static_cast<std::uint64_t>(step));
    bp.equalized = std::bernoulli_distribution(p)(coin);
  }
  Rng ref = make_rng(cfg_.seed, "x_prime", static_cast<std::uint64_t>(step));
  for (int i = 0; i < cfg_.batch_size; ++i)
    bp.references.push_back(bp.equalized && cfg_.x_prime_mode == XPrimeMode::real_sample ? pick(ref) : -1);
  return bp;
}

StepMetrics Trainer::step() {
  const long s = step_ + 1;
  const BatchPlan bp = plan(s);
  std::vector<Matrix> noise_refs(bp.targets.size());
  std::vector<ElboItem> items;
  Rng noise_rng = make_rng(cfg_.seed, "x_prime_noise", static_cast<std::uint64_t>(s));
  for (std::size_t i = 0; i < bp.targets.size(); ++i) {
    const SequenceExample& ex = train_[static_cast<std::size_t>(bp.targets[i])];
    ElboItem item{&ex.frames, &ex.content, {}};
    if (bp.equalized) {
      switch (cfg_.x_prime_mode) {
        case XPrimeMode::real_sample:
          item.x_prime = {StyleSource::Kind::frames,
                          &train_[static_cast<std::size_t>(bp.references[i])].frames};
          break;
        case XPrimeMode::fixed_vector:
          item.x_prime = {StyleSource::Kind::features, &fixed_vector_};
          break;
        case XPrimeMode::random_noise:
          noise_refs[i] = standard_normal<Real>(3, ex.frames.cols(), noise_rng);
          item.x_prime = {StyleSource::Kind::frames, &noise_refs[i]};
          break;
        case XPrimeMode::always_self: break;
      }
    }
    items.push_back(item);
  }

  params_.zero_grad();
  Graph<Real> g(true);
  const auto bound = model::bind(g, params_);
  ElboOptions opt;
  opt.teacher_noise_std = cfg_.teacher_noise_std;
  opt.trace_probes = cfg_.trace_probes;
  opt.trace_weight = cfg_.trace_weight;
  ElboResult res = elbo_loss(g, bound, cfg_.model, items, opt,
                             derive_seed(cfg_.seed, "step", static_cast<std::uint64_t>(s)));
  const double loss = g.value(res.loss)(0, 0);
  if (!std::isfinite(loss)) {
    std::ostringstream msg;
    msg << "non-finite loss at step " << s << " (nll " << res.nll_sum << ", kl " << res.kl_sum
        << ", trace " << res.trace_reg << ")";
    throw NumericalError(msg.str());
  }
  g.backward(res.loss);
  g.flush_parameter_grads();

  double sq = 0;
  params_.visit([&sq](const ad::Parameter<Real>& p) { sq += p.grad.squaredNorm(); });
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) throw NumericalError("non-finite gradient at step " + std::to_string(s));
  const bool clipped = norm > cfg_.grad_clip;
  const double factor = clipped ? cfg_.grad_clip / norm : 1.0;

  const double lr = lr_schedule(s, cfg_.warmup_steps, cfg_.peak_lr);
  const double b1 = cfg_.adam_beta1, b2 = cfg_.adam_beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(s));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(s));
  std::size_t i = 0;
  params_.visit([&](ad::Parameter<Real>& p) {
    Matrix& m = adam_.m[i];
    Matrix& v = adam_.v[i];
    ++i;
    const Matrix grad = p.grad * factor;
    m = b1 * m + (1 - b1) * grad;
    v = b2 * v + (1 - b2) * grad.cwiseAbs2();
    p.value.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + cfg_.adam_epsilon);
  });
  params_.basis.value.colwise().normalize();
  step_ = s;

  StepMetrics m;
  m.step = s;
  m.loss = loss;
  m.nll_per_frame = res.nll_sum / static_cast<double>(res.frames);
  m.kl_per_frame = res.kl_sum / static_cast<double>(res.frames);
  m.trace_reg = res.trace_reg;
  m.grad_norm = norm;
  m.lr = lr;
  m.equalized = bp.equalized;
  m.clipped = clipped;
  return m;
}

ValidationMetrics Trainer::validate() {
  const std::vector<SequenceExample>& set = val_.empty() ? train_ : val_;
  const std::size_t n = val_.empty() ? std::min<std::size_t>(train_.size(), 32) : val_.size();
  ElboOptions opt;
  opt.teacher_noise_std = 0;
  opt.dropout = false;
  opt.trace_probes = 1;
  const std::uint64_t seed = derive_seed(cfg_.seed, "validation");
  double nll = 0, kl = 0, np_nll = 0;
  long frames = 0;
  const std::size_t chunk = static_cast<std::size_t>(cfg_.batch_size);
  for (std::size_t start = 0; start < n; start += chunk) {
    std::vector<ElboItem> self_items, other_items;
    for (std::size_t i = start; i < std::min(n, start + chunk); ++i) {
      self_items.push_back({&set[i].frames, &set[i].content, {}});
      other_items.push_back(
          {&set[i].frames, &set[i].content, {StyleSource::Kind::frames, &set[(i + 1) % n].frames}});
    }
    {
      Graph<Real> g(false);
      const auto p = model::bind(g, std::as_const(params_));
      const ElboResult r = elbo_loss(g, p, cfg_.model, self_items, opt, seed);
      nll += r.nll_sum;
      kl += r.kl_sum;
      frames += r.frames;
    }
    {
      Graph<Real> g(false);
      const auto p = model::bind(g, std::as_const(params_));
      ElboOptions o = opt;
      o.bypass_equalization = true;
      np_nll += elbo_loss(g, p, cfg_.model, other_items, o, seed).nll_sum;
    }
  }
  ValidationMetrics v;
  v.step = step_;
  v.nll_per_frame = nll / static_cast<double>(frames);
  v.kl_per_frame = kl / static_cast<double>(frames);
  v.nonparallel_nll_per_frame = np_nll / static_cast<double>(frames);
  if (best_nonparallel_nll_) {
    const double best = *best_nonparallel_nll_;
    v.overfit_flag = v.kl_per_frame < cfg_.overfit_kl_threshold &&
                     v.nonparallel_nll_per_frame > best + 0.05 * std::abs(best);
  }
  if (!best_nonparallel_nll_ || v.nonparallel_nll_per_frame < *best_nonparallel_nll_)
    best_nonparallel_nll_ = v.nonparallel_nll_per_frame;
  return v;
}

TrainOutcome train(Trainer& trainer, const TrainCallbacks& cb) {
  TrainOutcome out;
  const TrainConfig& cfg = trainer.config();
  while (trainer.current_step() < cfg.max_steps) {
    StepMetrics m;
    try {
      m = trainer.step();
    } catch (const NumericalError& e) {
      out.diverged = true;
      out.message = e.what();
      if (cb.on_checkpoint) cb.on_checkpoint(trainer);
      return out;
    }
    if (cb.on_step) cb.on_step(m);
    const long s = trainer.current_step();
    if (cfg.eval_every > 0 && s % cfg.eval_every == 0) {
      const ValidationMetrics v = trainer.validate();
      if (cb.on_validation) cb.on_validation(v);
    }
    if (cfg.checkpoint_every > 0 && s % cfg.checkpoint_every == 0 && s != cfg.max_steps &&
        cb.on_checkpoint)
      cb.on_checkpoint(trainer);
  }
  if (cb.on_checkpoint) cb.on_checkpoint(trainer);
  return out;
}

}  // namespace styleeq
