#include <filesystem>
#include <sstream>

#include "doctest.h"
#include "qgate/cli.hpp"
#include "qgate/errors.hpp"
#include "qgate/harness.hpp"
#include "qgate/serialize.hpp"

using namespace qgate;
namespace fs = std::filesystem;

namespace {

const std::string kTinyConfig = std::string(QGATE_SOURCE_DIR) + "/configs/tiny.json";

fs::path fresh_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("qgate_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

int cli(std::vector<std::string> args) {
  args.insert(args.begin(), "qgate");
  args.insert(args.begin() + 1, {"--log-level", "off"});
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  return run_cli(static_cast<int>(argv.size()), argv.data());
}

std::size_t line_count(const std::string& text) { return static_cast<std::size_t>(std::count(text.begin(), text.end(), '\n')); }

nlohmann::json tiny_json() { return nlohmann::json::parse(io::read_file(kTinyConfig)); }

}  // namespace

TEST_CASE("config parsing") {
  const nlohmann::json base = tiny_json();
  const ExperimentConfig c = ExperimentConfig::from_json(base);
  CHECK(c.teacher_model.enc_layers == 4);
  CHECK(c.teacher_model.max_target_len == default_experiment().teacher_model.max_target_len);
  CHECK(c.teacher_train.beta1 == default_experiment().teacher_train.beta1);
  CHECK(c.distill.alpha_kl == default_experiment().distill.alpha_kl);
  CHECK(c.ood_task.vocab_size == 11);

  // The effective config reloads to itself, skip list included.
  const nlohmann::json eff = c.to_json();
  CHECK(eff.at("quant").at("skip_activation_sites") ==
        nlohmann::json::array({"encoder.layers.3.ffn.output", "encoder.final_norm.output"}));
  CHECK(ExperimentConfig::from_json(eff).to_json() == eff);
  CHECK(ExperimentConfig::from_json(default_experiment().to_json()).to_json() == default_experiment().to_json());

  auto expect_config_error = [](nlohmann::json j) { CHECK_THROWS_AS(ExperimentConfig::from_json(j), ConfigError); };
  nlohmann::json j = base;
  j["colour"] = "blue";
  expect_config_error(j);
  j = base;
  j["teacher"]["model"]["depth"] = 3;
  expect_config_error(j);
  j = base;
  j.erase("schema_version");
  expect_config_error(j);
  j = base;
  j["schema_version"] = 2;
  expect_config_error(j);
  j = base;
  j["quant"]["skip_activation_sites"] = nlohmann::json::array({"encoder.final_norm.output"});
  expect_config_error(j);
  j = base;
  j["students"][0]["enc_layers"] = 3;  // 4 -> 3 has no copy plan without spread_copy
  j["spread_copy"] = false;
  expect_config_error(j);
  j = base;
  j["seeds"] = "one";
  expect_config_error(j);

  const fs::path dir = fresh_dir("config");
  io::write_file_atomic((dir / "bad.json").string(), "{\"schema_version\": 1,");
  CHECK_THROWS_AS(ExperimentConfig::load((dir / "bad.json").string()), ConfigError);
  CHECK_THROWS_AS(ExperimentConfig::load((dir / "missing.json").string()), ConfigError);
}

TEST_CASE("shipped toy config is the built-in default") {
  const ExperimentConfig c = ExperimentConfig::load(std::string(QGATE_SOURCE_DIR) + "/configs/toy.json");
  CHECK(c.to_json() == default_experiment().to_json());
}

TEST_CASE("default calibration uses sixteen batches") {
  ExperimentConfig cfg = ExperimentConfig::load(kTinyConfig);
  cfg.quant = QuantSettings{};
  const ExperimentData data = build_data(cfg);
  const EncoderDecoder m(cfg.teacher_model, 1);
  CalibrationSummary s;
  calibrate_model(cfg, data, m, &s);
  CHECK(s.batches == 16);
}

TEST_CASE("cli exit codes") {
  const fs::path dir = fresh_dir("cli");
  CHECK(cli({"grid", "--no-such-flag"}) == 2);
  CHECK(cli({"grid", "--config", (dir / "missing.json").string()}) == 2);
  CHECK(cli({"frobnicate"}) == 2);

  io::write_file_atomic((dir / "bad_key.json").string(), "{\"schema_version\": 1, \"colour\": 1}");
  CHECK(cli({"gen-data", "--config", (dir / "bad_key.json").string()}) == 2);

  const std::string ckpt = (dir / "model.ckpt").string();
  const ExperimentConfig cfg = ExperimentConfig::load(kTinyConfig);
  save_checkpoint(EncoderDecoder(cfg.teacher_model, 1), ckpt);
  CHECK(cli({"distill", "--config", kTinyConfig, "--teacher", ckpt, "--student", "enc99"}) == 2);
  CHECK(cli({"inspect", "--config", kTinyConfig, "--checkpoint", ckpt, "--index", "100000"}) == 2);
  CHECK(cli({"inspect", "--config", kTinyConfig, "--checkpoint", ckpt, "--stack", "middle"}) == 2);

  // A corrupt checkpoint is a data error.
  const std::string bad = (dir / "bad.ckpt").string();
  io::write_file_atomic(bad, io::read_file(ckpt).substr(0, 100));
  CHECK(cli({"eval", "--config", kTinyConfig, "--checkpoint", bad}) == 3);

  CHECK(cli({"inspect", "--config", kTinyConfig, "--checkpoint", ckpt, "--out", (dir / "dump").string()}) == 0);
  CHECK(fs::exists(dir / "dump" / "decoder_layer0_head0.bin"));
}

TEST_CASE("tiny grid end to end, resume and determinism") {
  const fs::path root = fresh_dir("grid");
  const std::string a = (root / "a").string(), b = (root / "b").string();
  REQUIRE(cli({"grid", "--config", kTinyConfig, "--out", a}) == 0);

  const std::string csv = io::read_file(a + "/report.csv");
  std::istringstream lines(csv);
  std::string header;
  std::getline(lines, header);
  CHECK(header ==
        "student,enc_layers,dec_layers,gated,precision,seed,split,status,ter,average_kurtosis,max_inf_norm,"
        "outlier_count,diagnostic");
  CHECK(line_count(csv) == 1 + 24);
  CHECK(csv.find(",failed,") == std::string::npos);
  for (const char* f : {"report.json", "table1.csv", "table2.csv", "effective_config.json", "teacher/teacher.ckpt"})
    CHECK(fs::exists(fs::path(a) / f));

  const fs::path cell = fs::path(a) / "cells" / "s2-gated-s1";
  CHECK(line_count(io::read_file((cell / "train_log.csv").string())) == 1 + 20);
  CHECK(line_count(io::read_file((fs::path(a) / "teacher" / "teacher_log.csv").string())) == 1 + 40);
  CHECK(fs::exists(cell / "outliers_fp32_test_id.json"));
  CHECK(fs::exists(cell / "outliers_int8_test_id.json"));
  const auto timings = nlohmann::json::parse(io::read_file(a + "/timings.json"));
  CHECK(timings.size() == 1 + 12);
  CHECK(timings.contains("teacher"));

  // Resume: nothing is recomputed and finished results stay byte-identical.
  const std::string result_before = io::read_file((cell / "result.json").string());
  REQUIRE(cli({"grid", "--config", kTinyConfig, "--out", a}) == 0);
  CHECK(nlohmann::json::parse(io::read_file(a + "/timings.json")).empty());
  CHECK(io::read_file((cell / "result.json").string()) == result_before);
  CHECK(io::read_file(a + "/report.csv") == csv);

  // A second run from scratch reproduces every artifact byte for byte.
  REQUIRE(cli({"grid", "--config", kTinyConfig, "--out", b}) == 0);
  for (const std::string f : {"report.csv", "report.json", "table1.csv", "table2.csv", "teacher/teacher.ckpt",
                              "cells/s2-gated-s1/student.ckpt", "cells/s2-gated-s1/calibration.json",
                              "cells/s1-ungated-s2/train_log.csv", "cells/s4-gated-s2/result.json"})
    CHECK_MESSAGE(io::read_file(a + "/" + f) == io::read_file(b + "/" + f), f);
}
