#include "cli.hpp"

#include "styleeq/config.hpp"
#include "styleeq/evaluation.hpp"
#include "styleeq/io.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <algorithm>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <optional>
#include <ostream>
#include <regex>
#include <sstream>

namespace styleeq::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;

#ifndef STYLEEQ_VERSION
#define STYLEEQ_VERSION "0.0.0"
#endif

namespace {

constexpr const char* kToolVersion = "styleeq " STYLEEQ_VERSION;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct MissingInput : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Files and manifests.

std::string utc_now() {
  const std::time_t t = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void require_file(const fs::path& path, const std::string& what) {
  if (!fs::is_regular_file(path)) throw MissingInput(what + " not found: " + path.string());
}

json load_json_file(const fs::path& path, const std::string& what) {
  require_file(path, what);
  try {
    return json::parse(read_text_file(path));
  } catch (const json::parse_error& e) {
    throw InvalidInput(path.string() + ": malformed JSON: " + e.what());
  }
}

/// Canonical text of a config, used for hashing.
std::string canonical(const json& j) { return j.dump(); }

class Manifest {
 public:
  Manifest(std::string command, fs::path out) : out_(std::move(out)) {
    j_["command"] = std::move(command);
    j_["tool_version"] = kToolVersion;
    j_["started_at"] = utc_now();
    j_["outputs"] = json::object();
  }
  json& operator[](const std::string& key) { return j_[key]; }
  void config(const json& cfg) {
    j_["config"] = cfg;
    j_["config_sha256"] = sha256_hex(canonical(cfg));
  }
  void output(const fs::path& path) {
    j_["outputs"][fs::relative(path, out_).generic_string()] = sha256_file(path);
  }
  void write() {
    j_["finished_at"] = utc_now();
    write_text_file(out_ / "manifest.json", j_.dump(2) + "\n");
  }

 private:
  fs::path out_;
  json j_ = json::object();
};

/// Stroke records from any of the JSONL files the tools write.
struct StrokeRecord {
  std::vector<int> symbols;
  glyph::StrokeSequence strokes;
};

std::vector<StrokeRecord> read_stroke_records(const fs::path& path) {
  require_file(path, "stroke record file");
  std::istringstream is(read_text_file(path));
  std::vector<StrokeRecord> out;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const json j = json::parse(line);
      StrokeRecord r;
      if (j.contains("symbols")) r.symbols = j.at("symbols").get<std::vector<int>>();
      for (const auto& p : j.at("strokes"))
        r.strokes.samples.push_back({p.at(0).get<double>(), p.at(1).get<double>(), p.at(2).get<int>()});
      out.push_back(std::move(r));
    } catch (const json::exception& e) {
      throw InvalidInput(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

StrokeRecord pick_record(const fs::path& path, int index, const std::string& flag) {
  const auto records = read_stroke_records(path);
  if (index < 0 || index >= static_cast<int>(records.size()))
    throw InvalidInput(flag + ": index " + std::to_string(index) + " outside " + path.string() + " (" +
                       std::to_string(records.size()) + " records)");
  return records[static_cast<std::size_t>(index)];
}

glyph::ContentSequence parse_content(const std::string& text) {
  glyph::ContentSequence c;
  for (char ch : text) {
    if (ch < '0' || ch > '9') throw InvalidInput("content '" + text + "' must consist of digits 0-9");
    c.symbols.push_back(ch - '0');
  }
  if (c.symbols.empty()) throw InvalidInput("content must not be empty");
  return c;
}

// ---------------------------------------------------------------------------
// Datasets.

struct DatasetDir {
  fs::path dir;
  json manifest;
  std::string manifest_sha256;

  bool has(const std::string& split) const { return manifest.at("splits").contains(split); }

  /// Reads a split after checking its hash against the manifest.
  std::vector<glyph::LabeledSample> load(const std::string& split) const {
    if (!has(split)) throw InvalidInput("dataset " + dir.string() + " has no split '" + split + "'");
    const json& entry = manifest.at("splits").at(split);
    const fs::path path = dir / entry.at("file").get<std::string>();
    require_file(path, "dataset file");
    const std::string actual = sha256_file(path);
    if (actual != entry.at("sha256").get<std::string>())
      throw InvalidInput("dataset file " + path.string() + " does not match its manifest hash; refusing to run");
    try {
      return glyph::read_records(path);
    } catch (const json::exception& e) {
      throw InvalidInput(path.string() + ": " + e.what());
    }
  }

  json split_hashes(const std::vector<std::string>& splits) const {
    json h = json::object();
    for (const auto& s : splits)
      if (has(s)) h[s] = manifest.at("splits").at(s).at("sha256");
    return h;
  }
};

DatasetDir open_dataset(const fs::path& dir) {
  DatasetDir d;
  d.dir = dir;
  const fs::path m = dir / "manifest.json";
  d.manifest = load_json_file(m, "dataset manifest");
  if (!d.manifest.contains("splits") || !d.manifest.at("splits").is_object())
    throw InvalidInput(m.string() + ": not a dataset manifest");
  d.manifest_sha256 = sha256_file(m);
  return d;
}

// ---------------------------------------------------------------------------
// Checkpoints.

Checkpoint open_checkpoint(const fs::path& path) {
  require_file(path, "checkpoint");
  return load_checkpoint(path);
}

Generator generator_from(const Checkpoint& ckpt) { return Generator(ckpt.params, ckpt.offset_scale); }

/// Lineage recorded next to a checkpoint by the train command, if any.
json checkpoint_lineage(const fs::path& ckpt_path) {
  const fs::path dir = ckpt_path.parent_path();
  for (const fs::path& m : {dir / "manifest.json", dir.parent_path() / "manifest.json"}) {
    if (!fs::is_regular_file(m)) continue;
    try {
      const json j = json::parse(read_text_file(m));
      if (j.value("command", "") == "train" && j.contains("lineage")) return j.at("lineage");
    } catch (const json::exception&) {
    }
  }
  return json::array();
}

// ---------------------------------------------------------------------------
// Shared flags.

struct Common {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  int threads = 1;
};

int default_threads() {
  if (const char* env = std::getenv("STYLEEQ_THREADS")) {
    try {
      const int n = std::stoi(env);
      if (n >= 1) return n;
    } catch (const std::exception&) {
    }
  }
  return 1;
}

void add_out(CLI::App* app, Common& c) { app->add_option("--out", c.out, "Output directory")->required(); }
void add_config(CLI::App* app, Common& c, bool required) {
  auto* o = app->add_option("--config", c.config, "JSON config file");
  if (required) o->required();
}
void add_seed(CLI::App* app, Common& c) {
  app->add_option("--seed", c.seed, "Root seed; overrides the config");
}
void add_threads(CLI::App* app, Common& c) {
  app->add_option("--threads", c.threads, "Worker threads (default: STYLEEQ_THREADS or 1)")
      ->check(CLI::PositiveNumber);
}

// ---------------------------------------------------------------------------
// synth

int cmd_synth(const Common& c, std::ostream& out) {
  const json cfg = load_json_file(c.config, "config file");
  std::uint64_t root = 0;
  std::map<std::string, glyph::DatasetSpec> splits;
  config::read_object(cfg, "synth",
                      {{"seed", config::seed_field(root)},
                       {"splits", [&](const json& v, const std::string& path) {
                          if (!v.is_object() || v.empty()) throw InvalidInput(path + ": expected a non-empty object");
                          static const std::regex name_re("[A-Za-z0-9_-]+");
                          for (const auto& [name, spec] : v.items()) {
                            if (!std::regex_match(name, name_re))
                              throw InvalidInput(path + ": split name '" + name + "' must match [A-Za-z0-9_-]+");
                            splits[name] = config::dataset_spec_from_json(spec);
                          }
                        }}});
  if (splits.empty()) throw InvalidInput("synth: config needs 'splits'");
  if (c.seed) root = *c.seed;
  // Splits without their own seed derive one from the root seed and their name.
  for (const auto& [name, spec] : cfg.at("splits").items())
    if (!spec.contains("seed")) splits[name].seed = derive_seed(root, name);

  const fs::path dir = c.out;
  DirectoryLock lock(dir);
  Manifest m("synth", dir);
  m.config(cfg);
  m["seed"] = root;
  m["generator_version"] = glyph::kGeneratorVersion;
  m["template_sha256"] = glyph::template_hash();
  json entries = json::object();
  for (const auto& [name, spec] : splits) {
    const auto samples = glyph::make_dataset(spec);
    const fs::path file = dir / (name + ".jsonl");
    glyph::write_records(file, samples);
    entries[name] = {{"file", name + ".jsonl"},
                     {"sha256", sha256_file(file)},
                     {"num_samples", samples.size()},
                     {"spec", config::to_json(spec)}};
    m.output(file);
    out << "synth: " << name << " " << samples.size() << " samples -> " << file.string() << "\n";
  }
  m["splits"] = entries;
  m.write();
  return kOk;
}

// ---------------------------------------------------------------------------
// train

/// Settings that may change when resuming without changing the trajectory.
json trajectory_config(json cfg) {
  for (const char* k : {"max_steps", "eval_every", "checkpoint_every"}) cfg.erase(k);
  return cfg;
}

int cmd_train(const Common& c, const std::string& data_dir, const std::string& resume, std::ostream& out) {
  json raw = load_json_file(c.config, "config file");
  TrainConfig cfg = train_config_from_json(raw);
  if (c.seed) cfg.seed = *c.seed;
  const json cfg_json = to_json(cfg);

  const DatasetDir data = open_dataset(data_dir);
  const auto train_samples = data.load("train");
  std::vector<glyph::LabeledSample> val_samples;
  if (data.has("validation")) val_samples = data.load("validation");

  std::optional<Checkpoint> parent;
  json lineage = json::array();
  if (!resume.empty()) {
    parent = open_checkpoint(resume);
    if (parent->train_config.is_null())
      throw InvalidInput("resume: checkpoint " + resume + " carries no training config");
    if (trajectory_config(parent->train_config) != trajectory_config(cfg_json))
      throw InvalidInput("resume: training config differs from the checkpoint's beyond max_steps and intervals");
    if (parent->metadata.contains("dataset") &&
        parent->metadata.at("dataset") != data.split_hashes({"train", "validation"}))
      throw InvalidInput("resume: checkpoint was trained on a different dataset");
    if (parent->step > cfg.max_steps)
      throw InvalidInput("resume: checkpoint is at step " + std::to_string(parent->step) + ", beyond max_steps");
    lineage = checkpoint_lineage(resume);
    lineage.push_back({{"path", fs::absolute(resume).string()}, {"sha256", sha256_file(resume)}, {"step", parent->step}});
  }

  const double scale = parent ? parent->offset_scale : estimate_offset_scale(train_samples);
  const int V = cfg.model.alphabet_size;
  std::optional<Trainer> trainer;
  if (parent)
    trainer.emplace(cfg, prepare_examples(train_samples, scale, V), prepare_examples(val_samples, scale, V), *parent);
  else
    trainer.emplace(cfg, prepare_examples(train_samples, scale, V), prepare_examples(val_samples, scale, V), scale);

  const fs::path dir = c.out;
  DirectoryLock lock(dir);
  fs::create_directories(dir / "checkpoints");
  const fs::path metrics_path = dir / "metrics.jsonl";

  // Resuming in place keeps the metrics written up to the checkpoint's step.
  std::string kept;
  if (parent && fs::is_regular_file(metrics_path)) {
    std::istringstream is(read_text_file(metrics_path));
    std::string line;
    while (std::getline(is, line)) {
      if (line.empty()) continue;
      const json j = json::parse(line, nullptr, false);
      if (!j.is_discarded() && j.value("step", 0L) <= parent->step) kept += line + "\n";
    }
  }
  std::ofstream metrics(metrics_path, std::ios::binary | std::ios::trunc);
  if (!metrics) throw std::runtime_error("cannot write " + metrics_path.string());
  metrics << kept;

  Manifest m("train", dir);
  m.config(cfg_json);
  m["seed"] = cfg.seed;
  m["dataset"] = {{"dir", fs::absolute(data.dir).string()},
                  {"manifest_sha256", data.manifest_sha256},
                  {"splits", data.split_hashes({"train", "validation"})}};
  m["offset_scale"] = scale;
  m["lineage"] = lineage;
  json checkpoints = json::array();

  const json ckpt_meta = {{"config_sha256", sha256_hex(canonical(cfg_json))},
                          {"dataset", data.split_hashes({"train", "validation"})}};
  auto save = [&](const Trainer& t) {
    Checkpoint ck = t.checkpoint();
    for (const auto& [k, v] : ckpt_meta.items()) ck.metadata[k] = v;
    std::ostringstream name;
    name << "step_" << std::setw(8) << std::setfill('0') << ck.step << ".ckpt";
    const fs::path path = dir / "checkpoints" / name.str();
    save_checkpoint(path, ck);
    save_checkpoint(dir / "checkpoint.ckpt", ck);
    checkpoints.push_back({{"step", ck.step}, {"path", fs::relative(path, dir).generic_string()},
                           {"sha256", sha256_file(path)}});
  };

  TrainCallbacks cb;
  cb.on_step = [&](const StepMetrics& s) {
    json j = to_json(s);
    j["kind"] = "step";
    metrics << j.dump() << "\n";
  };
  cb.on_validation = [&](const ValidationMetrics& v) {
    json j = to_json(v);
    j["kind"] = "validation";
    metrics << j.dump() << "\n";
    metrics.flush();
    out << "train: step " << v.step << " val nll/frame " << v.nll_per_frame << " kl/frame " << v.kl_per_frame
        << (v.overfit_flag ? " (overfit flag)" : "") << "\n";
  };
  cb.on_checkpoint = save;
  const TrainOutcome outcome = train(*trainer, cb);
  metrics.close();

  m["checkpoints"] = checkpoints;
  m["final_step"] = trainer->current_step();
  m["diverged"] = outcome.diverged;
  m.output(metrics_path);
  m.output(dir / "checkpoint.ckpt");
  m.write();
  if (outcome.diverged) {
    out << "train: diverged at step " << trainer->current_step() + 1 << ": " << outcome.message
        << "; last good checkpoint kept at " << (dir / "checkpoint.ckpt").string() << "\n";
    throw NumericalError("training diverged: " + outcome.message);
  }
  out << "train: finished at step " << trainer->current_step() << " -> " << (dir / "checkpoint.ckpt").string()
      << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------
// generate

struct GenerateArgs {
  std::string checkpoint;
  std::string mode = "replicate";
  std::vector<std::string> contents;
  std::string contents_file;
  std::string reference;
  int reference_index = 0;
  std::string target;
  int target_index = 0;
  std::optional<double> alpha;
};

GenerationConfig load_generation_config(const Common& c) {
  GenerationConfig g;
  if (!c.config.empty()) g = config::generation_config_from_json(load_json_file(c.config, "config file"));
  if (c.seed) g.seed = *c.seed;
  return g;
}

std::vector<glyph::ContentSequence> collect_contents(const GenerateArgs& a) {
  std::vector<std::string> texts = a.contents;
  if (!a.contents_file.empty()) {
    require_file(a.contents_file, "contents file");
    std::istringstream is(read_text_file(a.contents_file));
    std::string line;
    while (std::getline(is, line)) {
      line.erase(std::remove_if(line.begin(), line.end(), [](char ch) { return std::isspace(static_cast<unsigned char>(ch)); }),
                 line.end());
      if (!line.empty()) texts.push_back(line);
    }
  }
  if (texts.empty()) throw UsageError("--content or --contents-file is required");
  std::vector<glyph::ContentSequence> out;
  for (const auto& t : texts) out.push_back(parse_content(t));
  return out;
}

int cmd_generate(const Common& c, const GenerateArgs& a, std::ostream& out) {
  const bool needs_ref = a.mode != "prior";
  const bool interp = a.mode == "interpolate";
  if (needs_ref && a.reference.empty()) throw UsageError("--reference is required for mode " + a.mode);
  if (!needs_ref && !a.reference.empty()) throw UsageError("--reference is not used by mode prior");
  if (interp && a.target.empty()) throw UsageError("--target is required for mode interpolate");
  if (interp && !a.alpha) throw UsageError("--alpha is required for mode interpolate");
  if (!interp && (a.alpha || !a.target.empty()))
    throw UsageError("--alpha and --target need mode interpolate (two references)");

  const GenerationConfig gcfg = load_generation_config(c);
  const auto contents = collect_contents(a);
  const Checkpoint ckpt = open_checkpoint(a.checkpoint);
  const Generator gen = generator_from(ckpt);
  std::optional<StrokeRecord> ref, target;
  if (needs_ref) ref = pick_record(a.reference, a.reference_index, "--reference-index");
  if (interp) target = pick_record(a.target, a.target_index, "--target-index");
  if (a.mode == "primed" && ref->symbols.empty())
    throw InvalidInput("--reference record has no symbols, which mode primed needs");

  const fs::path dir = c.out;
  DirectoryLock lock(dir);
  fs::create_directories(dir / "svg");
  Manifest m("generate", dir);
  m.config(config::to_json(gcfg));
  m["seed"] = gcfg.seed;
  m["mode"] = a.mode;
  m["checkpoint"] = {{"path", fs::absolute(a.checkpoint).string()}, {"sha256", sha256_file(a.checkpoint)},
                     {"step", ckpt.step}};
  if (ref) m["reference"] = {{"path", fs::absolute(a.reference).string()}, {"index", a.reference_index},
                             {"sha256", sha256_file(a.reference)}};
  if (target) m["target"] = {{"path", fs::absolute(a.target).string()}, {"index", a.target_index},
                             {"sha256", sha256_file(a.target)}};
  if (a.alpha) m["alpha"] = *a.alpha;

  std::ostringstream records;
  for (std::size_t i = 0; i < contents.size(); ++i) {
    GenerationConfig g = gcfg;
    g.seed = derive_seed(gcfg.seed, "item", i);
    Generation r;
    if (a.mode == "replicate") r = gen.replicate(contents[i], ref->strokes, g);
    else if (a.mode == "interpolate") r = gen.interpolate(contents[i], ref->strokes, target->strokes, *a.alpha, g);
    else if (a.mode == "prior") r = gen.from_prior(contents[i], g);
    else r = gen.primed(contents[i], ref->strokes, {ref->symbols, glyph::kNumTemplates}, g);
    json j = {{"index", i}, {"symbols", contents[i].symbols}, {"truncated", r.truncated},
              {"frames", r.frames.cols()}, {"strokes", json::array()}};
    for (const auto& p : r.strokes.samples) j["strokes"].push_back({p.x, p.y, p.pen});
    records << j.dump() << "\n";
    std::ostringstream name;
    name << "gen_" << std::setw(4) << std::setfill('0') << i << ".svg";
    write_text_file(dir / "svg" / name.str(), glyph::render_svg(r.strokes));
    m.output(dir / "svg" / name.str());
  }
  write_text_file(dir / "generations.jsonl", records.str());
  m.output(dir / "generations.jsonl");
  m.write();
  out << "generate: " << contents.size() << " sequences (" << a.mode << ") -> " << dir.string() << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------
// eval and ablation

struct Thresholds {
  std::optional<double> max_glyph_error_rate, max_slant_error_median, max_scale_error_median;
  std::optional<int> max_failures;
};

struct EvalSettings {
  int num_pairs = 100;
  std::uint64_t seed = 0;
  std::string split = "eval";
  EvalOptions options;
  Thresholds thresholds;
};

std::map<std::string, config::Setter> eval_option_setters(EvalSettings& s) {
  return {
      {"split", config::string_field(s.split)},
      {"mode",
       [&s](const json& v, const std::string& path) {
         const std::string m = v.is_string() ? v.get<std::string>() : "";
         if (m == "replicate") s.options.mode = EvalMode::replicate;
         else if (m == "primed") s.options.mode = EvalMode::primed;
         else if (m == "prior") s.options.mode = EvalMode::prior;
         else throw InvalidInput(path + ": expected one of replicate, primed, prior");
       }},
      {"zero_style", config::bool_field(s.options.zero_style)},
      {"record_attention", config::bool_field(s.options.record_attention)},
      {"generation",
       [&s](const json& v, const std::string&) { s.options.generation = config::generation_config_from_json(v); }},
  };
}

EvalSettings eval_settings_from_json(const json& j) {
  EvalSettings s;
  auto setters = eval_option_setters(s);
  setters["num_pairs"] = config::int_field(s.num_pairs);
  setters["seed"] = config::seed_field(s.seed);
  setters["thresholds"] = [&s](const json& v, const std::string& path) {
    auto opt_real = [](std::optional<double>& o) -> config::Setter {
      return [&o](const json& x, const std::string& p) {
        double d = 0;
        config::real_field(d)(x, p);
        o = d;
      };
    };
    config::read_object(v, path,
                        {{"max_glyph_error_rate", opt_real(s.thresholds.max_glyph_error_rate)},
                         {"max_slant_error_median", opt_real(s.thresholds.max_slant_error_median)},
                         {"max_scale_error_median", opt_real(s.thresholds.max_scale_error_median)},
                         {"max_failures", [&s](const json& x, const std::string& p) {
                            int n = 0;
                            config::int_field(n)(x, p);
                            s.thresholds.max_failures = n;
                          }}});
  };
  config::read_object(j, "eval", setters);
  if (s.num_pairs < 1) throw InvalidInput("eval.num_pairs must be >= 1");
  return s;
}

std::vector<std::string> threshold_failures(const EvalReport& r, const Thresholds& t) {
  std::vector<std::string> f;
  auto check = [&f](const char* name, double value, std::optional<double> limit) {
    if (limit && !(value <= *limit)) {
      std::ostringstream os;
      os << name << " " << value << " > " << *limit;
      f.push_back(os.str());
    }
  };
  check("glyph_error_rate", r.glyph_error_rate, t.max_glyph_error_rate);
  if ((t.max_slant_error_median || t.max_scale_error_median) && r.slant_error.count == 0) {
    f.push_back("style errors undefined: no generation could be decoded");
  } else {
    check("slant_error_median", r.slant_error.median, t.max_slant_error_median);
    check("scale_error_median", r.scale_error.median, t.max_scale_error_median);
  }
  if (t.max_failures) check("failures", r.failures, static_cast<double>(*t.max_failures));
  return f;
}

int cmd_eval(const Common& c, const std::string& checkpoint, const std::string& data_dir,
             const std::string& setting_name, std::ostream& out) {
  const EvalSetting setting = parse_eval_setting(setting_name);
  EvalSettings s;
  json cfg = json::object();
  if (!c.config.empty()) cfg = load_json_file(c.config, "config file");
  s = eval_settings_from_json(cfg);
  if (c.seed) s.seed = *c.seed;
  s.options.threads = c.threads;

  const Checkpoint ckpt = open_checkpoint(checkpoint);
  const DatasetDir data = open_dataset(data_dir);
  const auto eval_set = data.load(s.split);
  const Generator gen = generator_from(ckpt);

  const fs::path dir = c.out;
  DirectoryLock lock(dir);
  const EvalReport report = eval_pairs(gen, eval_set, setting, s.num_pairs, s.seed, s.options);
  const auto failures = threshold_failures(report, s.thresholds);

  json rj = to_json(report);
  rj["manifest"] = "manifest.json";
  const fs::path report_path = dir / ("report_" + to_string(setting) + ".json");
  write_text_file(report_path, rj.dump(2) + "\n");

  Manifest m("eval", dir);
  m.config(cfg);
  m["seed"] = s.seed;
  m["setting"] = to_string(setting);
  m["checkpoint"] = {{"path", fs::absolute(checkpoint).string()}, {"sha256", sha256_file(checkpoint)},
                     {"step", ckpt.step}};
  m["dataset"] = {{"dir", fs::absolute(data.dir).string()}, {"manifest_sha256", data.manifest_sha256},
                  {"splits", data.split_hashes({s.split})}};
  m["threshold_failures"] = failures;
  m.output(report_path);
  m.write();

  out << "eval: " << to_string(setting) << " pairs " << report.num_pairs << " glyph error rate "
      << report.glyph_error_rate << " slant err median " << report.slant_error.median << " scale err median "
      << report.scale_error.median << " failures " << report.failures << "\n";
  for (const auto& f : failures) out << "eval: threshold failed: " << f << "\n";
  return failures.empty() ? kOk : kThresholdFailure;
}

json ablation_row_json(const AblationRow& r) {
  return {{"name", r.name},
          {"x_prime_mode", to_string(r.mode)},
          {"p_eq", r.equalize_fraction},
          {"failed", r.failed},
          {"message", r.message},
          {"parallel", to_json(r.parallel)},
          {"nonparallel", to_json(r.nonparallel)}};
}

int cmd_ablation(const Common& c, const std::string& data_dir, std::ostream& out) {
  const json cfg = load_json_file(c.config, "config file");
  std::vector<AblationVariant> variants;
  EvalSettings s;
  bool require_orderings = true;
  config::read_object(
      cfg, "ablation",
      {{"variants",
        [&variants](const json& v, const std::string& path) {
          if (!v.is_array() || v.empty()) throw InvalidInput(path + ": expected a non-empty list");
          static const std::regex name_re("[A-Za-z0-9_.-]+");
          for (std::size_t i = 0; i < v.size(); ++i) {
            AblationVariant var;
            bool have_train = false;
            config::read_object(v[i], path + "[" + std::to_string(i) + "]",
                                {{"name", config::string_field(var.name)},
                                 {"train", [&](const json& t, const std::string&) {
                                    var.config = train_config_from_json(t);
                                    have_train = true;
                                  }}});
            if (!std::regex_match(var.name, name_re) || var.name == "." || var.name == "..")
              throw InvalidInput(path + ": variant name '" + var.name + "' must match [A-Za-z0-9_.-]+");
            if (!have_train) throw InvalidInput(path + ": variant '" + var.name + "' needs 'train'");
            for (const auto& other : variants)
              if (other.name == var.name) throw InvalidInput(path + ": duplicate variant '" + var.name + "'");
            variants.push_back(std::move(var));
          }
        }},
       {"num_pairs", config::int_field(s.num_pairs)},
       {"seed", config::seed_field(s.seed)},
       {"require_orderings", config::bool_field(require_orderings)},
       {"evaluation",
        [&s](const json& v, const std::string& path) { config::read_object(v, path, eval_option_setters(s)); }}});
  if (variants.empty()) throw InvalidInput("ablation: config needs 'variants'");
  if (s.num_pairs < 1) throw InvalidInput("ablation.num_pairs must be >= 1");
  if (c.seed) {
    s.seed = *c.seed;
    for (auto& v : variants) v.config.seed = derive_seed(*c.seed, v.name);
  }
  s.options.threads = c.threads;

  const DatasetDir data = open_dataset(data_dir);
  AblationData ad{data.load("train"), {}, data.load(s.split)};
  if (data.has("validation")) ad.validation = data.load("validation");

  const fs::path dir = c.out;
  DirectoryLock lock(dir);
  std::map<std::string, std::ofstream> metric_files;
  for (const auto& v : variants) {
    fs::create_directories(dir / v.name);
    metric_files[v.name].open(dir / v.name / "metrics.jsonl", std::ios::binary | std::ios::trunc);
  }
  AblationHooks hooks;
  hooks.on_step = [&](const AblationVariant& v, const StepMetrics& st) {
    json j = to_json(st);
    j["kind"] = "step";
    metric_files[v.name] << j.dump() << "\n";
    if (v.config.eval_every > 0 && st.step % v.config.eval_every == 0)
      out << "ablation: " << v.name << " step " << st.step << " nll/frame " << st.nll_per_frame << " kl/frame "
          << st.kl_per_frame << "\n";
  };
  hooks.trained = [&](const AblationVariant& v, const Trainer& t) {
    Checkpoint ck = t.checkpoint();
    save_checkpoint(dir / v.name / "checkpoint.ckpt", ck);
  };
  const AblationResult result = ablation_suite(ad, variants, s.num_pairs, s.seed, s.options, hooks);
  for (auto& [name, f] : metric_files) f.close();

  write_text_file(dir / "table.txt", result.table_text());
  write_text_file(dir / "table.csv", result.table_csv());
  json rows = json::array();
  for (const auto& r : result.rows) rows.push_back(ablation_row_json(r));
  json checks = json::array();
  for (const auto& ch : result.checks) checks.push_back({{"name", ch.name}, {"passed", ch.passed}, {"detail", ch.detail}});
  write_text_file(dir / "ablation.json",
                  json{{"rows", rows}, {"checks", checks}, {"manifest", "manifest.json"}}.dump(2) + "\n");

  Manifest m("ablation", dir);
  m.config(cfg);
  m["seed"] = s.seed;
  m["dataset"] = {{"dir", fs::absolute(data.dir).string()}, {"manifest_sha256", data.manifest_sha256},
                  {"splits", data.split_hashes({"train", "validation", s.split})}};
  for (const char* f : {"table.txt", "table.csv", "ablation.json"}) m.output(dir / f);
  for (const auto& v : variants) {
    m.output(dir / v.name / "metrics.jsonl");
    if (fs::exists(dir / v.name / "checkpoint.ckpt")) m.output(dir / v.name / "checkpoint.ckpt");
  }
  m.write();

  out << result.table_text();
  for (const auto& ch : result.checks)
    out << "ablation: check " << (ch.passed ? "PASS " : "FAIL ") << ch.name << ": " << ch.detail << "\n";
  return require_orderings && !result.all_passed() ? kThresholdFailure : kOk;
}

// ---------------------------------------------------------------------------
// dump-attention and render

int cmd_dump_attention(const Common& c, const GenerateArgs& a, const std::string& label, std::ostream& out) {
  if (a.reference.empty()) throw UsageError("--reference is required");
  if (a.contents.size() != 1) throw UsageError("exactly one --content is required");
  const GenerationConfig gcfg = load_generation_config(c);
  const auto content = parse_content(a.contents.front());
  const Checkpoint ckpt = open_checkpoint(a.checkpoint);
  const StrokeRecord ref = pick_record(a.reference, a.reference_index, "--reference-index");
  const Generator gen = generator_from(ckpt);

  const fs::path dir = c.out;
  DirectoryLock lock(dir);
  const AttentionDump dump = dump_style_attention(gen, content, ref.strokes, gcfg);
  write_attention_dump(dump, dir / "attention", label);
  Manifest m("dump-attention", dir);
  m.config(config::to_json(gcfg));
  m["seed"] = gcfg.seed;
  m["checkpoint"] = {{"path", fs::absolute(a.checkpoint).string()}, {"sha256", sha256_file(a.checkpoint)},
                     {"step", ckpt.step}};
  m["reference"] = {{"path", fs::absolute(a.reference).string()}, {"index", a.reference_index},
                    {"sha256", sha256_file(a.reference)}};
  m["content"] = content.symbols;
  m.output(dir / "attention.json");
  m.output(dir / "attention.svg");
  m.write();
  out << "dump-attention: " << dump.summary.steps << " steps over " << dump.summary.frames
      << " feature frames, mean entropy " << dump.summary.mean_entropy << ", temporal variance "
      << dump.summary.temporal_variance << "\n";
  return kOk;
}

int cmd_render(const Common& c, const std::string& input, std::optional<int> index, std::ostream& out) {
  const auto records = read_stroke_records(input);
  if (index && (*index < 0 || *index >= static_cast<int>(records.size())))
    throw InvalidInput("--index " + std::to_string(*index) + " outside " + input);
  const fs::path dir = c.out;
  DirectoryLock lock(dir);
  Manifest m("render", dir);
  m["input"] = {{"path", fs::absolute(input).string()}, {"sha256", sha256_file(input)}};
  const std::string stem = fs::path(input).stem().string();
  int written = 0;
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (index && static_cast<int>(i) != *index) continue;
    std::ostringstream name;
    name << stem << "_" << std::setw(4) << std::setfill('0') << i << ".svg";
    write_text_file(dir / name.str(), glyph::render_svg(records[i].strokes));
    m.output(dir / name.str());
    ++written;
  }
  m.write();
  out << "render: " << written << " SVGs -> " << dir.string() << "\n";
  return kOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Style-equalized handwriting synthesis on synthetic glyph data", "styleeq"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kToolVersion);

  Common common;
  common.threads = default_threads();
  GenerateArgs gen_args;
  std::string data_dir, resume, checkpoint, setting, input, label = "replicate";
  std::optional<int> render_index;

  auto* synth = app.add_subcommand("synth", "Generate a synthetic dataset");
  add_config(synth, common, true);
  add_out(synth, common);
  add_seed(synth, common);

  auto* train_cmd = app.add_subcommand("train", "Train a model");
  add_config(train_cmd, common, true);
  add_out(train_cmd, common);
  add_seed(train_cmd, common);
  train_cmd->add_option("--data", data_dir, "Dataset directory written by synth")->required();
  train_cmd->add_option("--resume", resume, "Checkpoint to resume from");

  auto* generate = app.add_subcommand("generate", "Sample handwriting from a checkpoint");
  add_config(generate, common, false);
  add_out(generate, common);
  add_seed(generate, common);
  generate->add_option("--checkpoint", gen_args.checkpoint, "Checkpoint file")->required();
  generate->add_option("--mode", gen_args.mode, "replicate, interpolate, prior or primed")
      ->check(CLI::IsMember({"replicate", "interpolate", "prior", "primed"}));
  generate->add_option("--content", gen_args.contents, "Glyph ids as a digit string, e.g. 0429 (repeatable)");
  generate->add_option("--contents-file", gen_args.contents_file, "File with one digit string per line");
  generate->add_option("--reference", gen_args.reference, "JSONL stroke records holding the style reference");
  generate->add_option("--reference-index", gen_args.reference_index, "Record index in --reference");
  generate->add_option("--target", gen_args.target, "JSONL stroke records holding the interpolation target");
  generate->add_option("--target-index", gen_args.target_index, "Record index in --target");
  generate->add_option("--alpha", gen_args.alpha, "Interpolation weight");

  auto* eval = app.add_subcommand("eval", "Evaluate content and style on reference/content pairs");
  add_config(eval, common, false);
  add_out(eval, common);
  add_seed(eval, common);
  add_threads(eval, common);
  eval->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  eval->add_option("--data", data_dir, "Dataset directory written by synth")->required();
  eval->add_option("--setting", setting, "parallel or nonparallel")
      ->required()
      ->check(CLI::IsMember({"parallel", "nonparallel"}));

  auto* ablation = app.add_subcommand("ablation", "Train and compare x' variants");
  add_config(ablation, common, true);
  add_out(ablation, common);
  add_seed(ablation, common);
  add_threads(ablation, common);
  ablation->add_option("--data", data_dir, "Dataset directory written by synth")->required();

  auto* dump = app.add_subcommand("dump-attention", "Record style-attention weights of one replication");
  add_config(dump, common, false);
  add_out(dump, common);
  add_seed(dump, common);
  dump->add_option("--checkpoint", gen_args.checkpoint, "Checkpoint file")->required();
  dump->add_option("--reference", gen_args.reference, "JSONL stroke records holding the style reference")->required();
  dump->add_option("--reference-index", gen_args.reference_index, "Record index in --reference");
  dump->add_option("--content", gen_args.contents, "Glyph ids as a digit string")->required();
  dump->add_option("--label", label, "Setting label stored in the dump");

  auto* render = app.add_subcommand("render", "Render stroke records to SVG");
  add_out(render, common);
  render->add_option("--input", input, "JSONL stroke records")->required();
  render->add_option("--index", render_index, "Render only this record");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return kUsageError;
  }

  try {
    if (*synth) return cmd_synth(common, out);
    if (*train_cmd) return cmd_train(common, data_dir, resume, out);
    if (*generate) return cmd_generate(common, gen_args, out);
    if (*eval) return cmd_eval(common, checkpoint, data_dir, setting, out);
    if (*ablation) return cmd_ablation(common, data_dir, out);
    if (*dump) return cmd_dump_attention(common, gen_args, label, out);
    if (*render) return cmd_render(common, input, render_index, out);
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return kUsageError;
  } catch (const MissingInput& e) {
    err << "error: " << e.what() << "\n";
    return kMissingInput;
  } catch (const InvalidInput& e) {
    err << "invalid input: " << e.what() << "\n";
    return kValidationError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kRuntimeFailure;
  }
  return kUsageError;
}

}  // namespace styleeq::cli
