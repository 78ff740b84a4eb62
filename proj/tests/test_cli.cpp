#include "doctest.h"

#include "cli.hpp"
#include "styleeq/io.hpp"
#include "styleeq/training.hpp"

#include "json.hpp"

#include <filesystem>
#include <sstream>

namespace fs = std::filesystem;
using namespace styleeq;
using nlohmann::json;

namespace {

struct Result {
  int code = 0;
  std::string out;
  std::string err;
};

Result run_cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

class Workdir {
 public:
  explicit Workdir(const std::string& name) : path_(fs::temp_directory_path() / ("styleeq_cli_" + name)) {
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~Workdir() { fs::remove_all(path_); }
  std::string operator/(const std::string& p) const { return (path_ / p).string(); }

 private:
  fs::path path_;
};

const json kSynth = json::parse(R"({
  "seed": 7,
  "splits": {
    "train": {"num_samples": 16, "min_len": 1, "max_len": 2},
    "validation": {"num_samples": 4, "min_len": 1, "max_len": 2},
    "eval": {"num_samples": 8, "min_len": 1, "max_len": 2}
  }
})");

json train_config(long steps) {
  return json{{"batch_size", 3},
              {"warmup_steps", 3},
              {"peak_lr", 1e-3},
              {"trace_probes", 4},
              {"max_steps", steps},
              {"eval_every", 2},
              {"checkpoint_every", 2},
              {"validation_samples", 4},
              {"seed", 5},
              {"model",
               {{"bottom_dim", 8},
                {"top_dim", 8},
                {"z_dim", 3},
                {"num_windows", 2},
                {"num_mixtures", 2},
                {"conv_channels", {4, 4, 6, 8}},
                {"style_subspace_dim", 3},
                {"attention_heads", 2},
                {"head_dim", 2},
                {"prior_hidden", 6}}}};
}

void write_json(const std::string& path, const json& j) { write_text_file(path, j.dump()); }

/// Dataset plus a short training run under `w`.
void prepare(const Workdir& w, long steps = 4) {
  write_json(w / "synth.json", kSynth);
  write_json(w / "train.json", train_config(steps));
  REQUIRE(run_cli({"synth", "--config", w / "synth.json", "--out", w / "data"}).code == 0);
  REQUIRE(run_cli({"train", "--config", w / "train.json", "--data", w / "data", "--out", w / "run"}).code == 0);
}

}  // namespace

TEST_CASE("synth") {
  Workdir w("synth");
  SUBCASE("missing config names the path") {
    const Result r = run_cli({"synth", "--config", w / "absent.json", "--out", w / "data"});
    CHECK(r.code == cli::kMissingInput);
    CHECK(r.err.find(w / "absent.json") != std::string::npos);
  }
  SUBCASE("same config and seed give identical files") {
    write_json(w / "synth.json", kSynth);
    REQUIRE(run_cli({"synth", "--config", w / "synth.json", "--out", w / "a"}).code == 0);
    REQUIRE(run_cli({"synth", "--config", w / "synth.json", "--out", w / "b"}).code == 0);
    for (const char* f : {"train.jsonl", "validation.jsonl", "eval.jsonl"})
      CHECK(read_text_file(w / ("a/" + std::string(f))) == read_text_file(w / ("b/" + std::string(f))));
    REQUIRE(run_cli({"synth", "--config", w / "synth.json", "--out", w / "c", "--seed", "8"}).code == 0);
    CHECK(read_text_file(w / "a/train.jsonl") != read_text_file(w / "c/train.jsonl"));
  }
  SUBCASE("validation errors come before any output") {
    json bad = kSynth;
    bad["splits"]["train"]["min_len"] = 3;
    write_json(w / "bad.json", bad);
    CHECK(run_cli({"synth", "--config", w / "bad.json", "--out", w / "data"}).code == cli::kValidationError);
    CHECK_FALSE(fs::exists(w / "data"));
    json unknown = kSynth;
    unknown["splits"]["train"]["num_sample"] = 3;
    write_json(w / "unknown.json", unknown);
    const Result r = run_cli({"synth", "--config", w / "unknown.json", "--out", w / "data"});
    CHECK(r.code == cli::kValidationError);
    CHECK(r.err.find("num_sample") != std::string::npos);
    write_text_file(w / "broken.json", "{\"splits\": ");
    CHECK(run_cli({"synth", "--config", w / "broken.json", "--out", w / "data"}).code == cli::kValidationError);
  }
}

TEST_CASE("train") {
  Workdir w("train");
  write_json(w / "synth.json", kSynth);
  REQUIRE(run_cli({"synth", "--config", w / "synth.json", "--out", w / "data"}).code == 0);

  SUBCASE("resume equals a single run byte for byte") {
    write_json(w / "t6.json", train_config(6));
    write_json(w / "t4.json", train_config(4));
    REQUIRE(run_cli({"train", "--config", w / "t6.json", "--data", w / "data", "--out", w / "full"}).code == 0);
    REQUIRE(run_cli({"train", "--config", w / "t4.json", "--data", w / "data", "--out", w / "part"}).code == 0);
    REQUIRE(run_cli({"train", "--config", w / "t6.json", "--data", w / "data", "--out", w / "part", "--resume",
                 w / "part/checkpoints/step_00000004.ckpt"})
                .code == 0);
    CHECK(read_text_file(w / "full/checkpoint.ckpt") == read_text_file(w / "part/checkpoint.ckpt"));
    CHECK(read_text_file(w / "full/metrics.jsonl") == read_text_file(w / "part/metrics.jsonl"));
    const json m = json::parse(read_text_file(w / "part/manifest.json"));
    CHECK(m.at("lineage").size() == 1);
    CHECK(m.at("lineage")[0].at("step") == 4);

    // a changed trajectory setting is refused
    json other = train_config(6);
    other["peak_lr"] = 2e-3;
    write_json(w / "other.json", other);
    CHECK(run_cli({"train", "--config", w / "other.json", "--data", w / "data", "--out", w / "x", "--resume",
               w / "part/checkpoints/step_00000004.ckpt"})
              .code == cli::kValidationError);
  }
  SUBCASE("max_steps 0 writes the initial checkpoint only") {
    write_json(w / "t0.json", train_config(0));
    REQUIRE(run_cli({"train", "--config", w / "t0.json", "--data", w / "data", "--out", w / "run"}).code == 0);
    CHECK(fs::exists(w / "run/checkpoint.ckpt"));
    CHECK(read_text_file(w / "run/metrics.jsonl").empty());
    int n = 0;
    for ([[maybe_unused]] const auto& e : fs::directory_iterator(w / "run/checkpoints")) ++n;
    CHECK(n == 1);
    CHECK(load_checkpoint(w / "run/checkpoint.ckpt").step == 0);
  }
  SUBCASE("tampered dataset is refused") {
    std::string text = read_text_file(w / "data/train.jsonl");
    text[text.find("\"seed\"") + 7] ^= 1;
    write_text_file(w / "data/train.jsonl", text);
    write_json(w / "t.json", train_config(2));
    const Result r = run_cli({"train", "--config", w / "t.json", "--data", w / "data", "--out", w / "run"});
    CHECK(r.code == cli::kValidationError);
    CHECK(r.err.find("hash") != std::string::npos);
    CHECK_FALSE(fs::exists(w / "run/checkpoint.ckpt"));
  }
  SUBCASE("locked output directory") {
    write_json(w / "t.json", train_config(2));
    fs::create_directories(w / "run");
    write_text_file(w / "run/.lock", "1\n");
    CHECK(run_cli({"train", "--config", w / "t.json", "--data", w / "data", "--out", w / "run"}).code ==
          cli::kRuntimeFailure);
  }
}

TEST_CASE("generate") {
  Workdir w("generate");
  prepare(w);
  const std::string ckpt = w / "run/checkpoint.ckpt", ref = w / "data/eval.jsonl";

  SUBCASE("replicate without a reference names the flag") {
    const Result r = run_cli({"generate", "--checkpoint", ckpt, "--content", "12", "--out", w / "g"});
    CHECK(r.code == cli::kUsageError);
    CHECK(r.err.find("--reference") != std::string::npos);
    CHECK(run_cli({"generate", "--checkpoint", ckpt, "--mode", "interpolate", "--reference", ref, "--content", "1",
               "--out", w / "g"})
              .code == cli::kUsageError);
    CHECK(run_cli({"generate", "--checkpoint", ckpt, "--mode", "sideways", "--content", "1", "--out", w / "g"}).code ==
          cli::kUsageError);
  }
  SUBCASE("interpolation at alpha 0 reproduces replication") {
    REQUIRE(run_cli({"generate", "--checkpoint", ckpt, "--reference", ref, "--content", "12", "--content", "7",
                 "--seed", "3", "--out", w / "rep"})
                .code == 0);
    REQUIRE(run_cli({"generate", "--checkpoint", ckpt, "--mode", "interpolate", "--reference", ref, "--target", ref,
                 "--target-index", "3", "--alpha", "0", "--content", "12", "--content", "7", "--seed", "3", "--out",
                 w / "int"})
                .code == 0);
    CHECK(read_text_file(w / "rep/generations.jsonl") == read_text_file(w / "int/generations.jsonl"));
    for (const char* f : {"svg/gen_0000.svg", "svg/gen_0001.svg"})
      CHECK(read_text_file(w / ("rep/" + std::string(f))) == read_text_file(w / ("int/" + std::string(f))));
  }
  SUBCASE("batch of ten contents") {
    std::string contents;
    for (int i = 0; i < 10; ++i) contents += std::to_string(i) + std::to_string(9 - i) + "\n";
    write_text_file(w / "contents.txt", contents);
    REQUIRE(run_cli({"generate", "--checkpoint", ckpt, "--mode", "prior", "--contents-file", w / "contents.txt",
                 "--out", w / "batch"})
                .code == 0);
    std::istringstream lines(read_text_file(w / "batch/generations.jsonl"));
    std::string line;
    int records = 0;
    while (std::getline(lines, line)) records += !line.empty();
    CHECK(records == 10);
    int svgs = 0;
    for ([[maybe_unused]] const auto& e : fs::directory_iterator(w / "batch/svg")) ++svgs;
    CHECK(svgs == 10);
    CHECK(fs::exists(w / "batch/manifest.json"));
    CHECK(json::parse(read_text_file(w / "batch/manifest.json")).at("outputs").size() == 11);
  }
  SUBCASE("primed and render") {
    REQUIRE(run_cli({"generate", "--checkpoint", ckpt, "--mode", "primed", "--reference", ref, "--content", "4",
                 "--out", w / "primed"})
                .code == 0);
    REQUIRE(run_cli({"render", "--input", w / "primed/generations.jsonl", "--out", w / "svg"}).code == 0);
    CHECK(fs::exists(w / "svg/generations_0000.svg"));
    REQUIRE(run_cli({"render", "--input", ref, "--index", "2", "--out", w / "refsvg"}).code == 0);
    CHECK(fs::exists(w / "refsvg/eval_0002.svg"));
    CHECK_FALSE(fs::exists(w / "refsvg/eval_0000.svg"));
  }
}

TEST_CASE("eval and dump-attention") {
  Workdir w("eval");
  prepare(w);
  const std::string ckpt = w / "run/checkpoint.ckpt";
  write_json(w / "eval.json", {{"num_pairs", 3}, {"generation", {{"max_frames", 40}}}});

  REQUIRE(run_cli({"eval", "--checkpoint", ckpt, "--data", w / "data", "--setting", "nonparallel", "--config",
               w / "eval.json", "--out", w / "e1"})
              .code == 0);
  REQUIRE(run_cli({"eval", "--checkpoint", ckpt, "--data", w / "data", "--setting", "nonparallel", "--config",
               w / "eval.json", "--out", w / "e2", "--threads", "2"})
              .code == 0);
  CHECK(read_text_file(w / "e1/report_nonparallel.json") == read_text_file(w / "e2/report_nonparallel.json"));

  CHECK(run_cli({"eval", "--checkpoint", ckpt, "--data", w / "data", "--setting", "crosswise", "--out", w / "e3"})
            .code == cli::kUsageError);
  CHECK(run_cli({"eval", "--checkpoint", w / "none.ckpt", "--data", w / "data", "--setting", "parallel", "--out",
             w / "e3"})
            .code == cli::kMissingInput);

  write_json(w / "strict.json",
             {{"num_pairs", 3}, {"generation", {{"max_frames", 40}}}, {"thresholds", {{"max_glyph_error_rate", -1}}}});
  const Result t = run_cli({"eval", "--checkpoint", ckpt, "--data", w / "data", "--setting", "parallel", "--config",
                        w / "strict.json", "--out", w / "e4"});
  CHECK(t.code == cli::kThresholdFailure);
  CHECK(t.code != cli::kRuntimeFailure);
  CHECK(fs::exists(w / "e4/report_parallel.json"));

  write_text_file(w / "not_a_checkpoint.ckpt", "hello");
  CHECK(run_cli({"eval", "--checkpoint", w / "not_a_checkpoint.ckpt", "--data", w / "data", "--setting", "parallel",
             "--out", w / "e5"})
            .code == cli::kValidationError);

  REQUIRE(run_cli({"dump-attention", "--checkpoint", ckpt, "--reference", w / "data/eval.jsonl", "--content", "31",
               "--out", w / "att"})
              .code == 0);
  const json a = json::parse(read_text_file(w / "att/attention.json"));
  CHECK(a.at("setting") == "replicate");
  CHECK(fs::exists(w / "att/attention.svg"));
}

TEST_CASE("ablation") {
  Workdir w("ablation");
  write_json(w / "synth.json", kSynth);
  REQUIRE(run_cli({"synth", "--config", w / "synth.json", "--out", w / "data"}).code == 0);
  json self = train_config(2), eq = train_config(2);
  self["x_prime_mode"] = "always_self";
  json cfg = {{"variants", {{{"name", "always_self"}, {"train", self}}, {{"name", "equalized"}, {"train", eq}}}},
              {"num_pairs", 2},
              {"evaluation", {{"generation", {{"max_frames", 30}}}}}};
  write_json(w / "ablation.json", cfg);
  const Result r = run_cli({"ablation", "--config", w / "ablation.json", "--data", w / "data", "--out", w / "abl"});
  CHECK((r.code == 0 || r.code == cli::kThresholdFailure));
  for (const char* f : {"table.txt", "table.csv", "ablation.json", "manifest.json", "always_self/checkpoint.ckpt",
                        "equalized/metrics.jsonl"})
    CHECK_MESSAGE(fs::exists(w / ("abl/" + std::string(f))), f);
  const json j = json::parse(read_text_file(w / "abl/ablation.json"));
  CHECK(j.at("rows").size() == 2);

  cfg["require_orderings"] = false;
  write_json(w / "lenient.json", cfg);
  CHECK(run_cli({"ablation", "--config", w / "lenient.json", "--data", w / "data", "--out", w / "abl2"}).code == 0);
  CHECK(read_text_file(w / "abl/table.csv") == read_text_file(w / "abl2/table.csv"));

  cfg["variants"][1]["name"] = "../escape";
  write_json(w / "bad.json", cfg);
  CHECK(run_cli({"ablation", "--config", w / "bad.json", "--data", w / "data", "--out", w / "abl3"}).code ==
        cli::kValidationError);
}
