#include "qgate/cli.hpp"

#include <filesystem>
#include <iostream>
#include <optional>

#include <spdlog/spdlog.h>

#include "CLI11.hpp"
#include "qgate/errors.hpp"
#include "qgate/harness.hpp"
#include "qgate/hashing.hpp"
#include "qgate/serialize.hpp"

namespace fs = std::filesystem;

namespace qgate {
namespace {

struct CommonOptions {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::size_t jobs = 1;
  std::string out;
  bool trace = false;
};

void add_common(CLI::App* cmd, CommonOptions& o) {
  cmd->add_option("--config", o.config, "experiment config (JSON)")->check(CLI::ExistingFile);
  cmd->add_option("--seed", o.seed, "seed override");
  cmd->add_option("--out", o.out, "output path");
}

ExperimentConfig load_config(const CommonOptions& o) {
  return o.config.empty() ? default_experiment() : ExperimentConfig::load(o.config);
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  io::write_file_atomic(path.string(), j.dump(2) + "\n");
}

std::string default_teacher(const ExperimentConfig& cfg) {
  if (!cfg.teacher_checkpoint.empty()) return cfg.teacher_checkpoint;
  return (fs::path(cfg.output_dir) / "teacher" / "teacher.ckpt").string();
}

int cmd_gen_data(const CommonOptions& o) {
  ExperimentConfig cfg = load_config(o);
  if (o.seed) {
    cfg.task.seed = *o.seed;
    cfg.ood_task.seed = *o.seed;
  }
  const std::string dir = o.out.empty() ? (fs::path(cfg.output_dir) / "data").string() : o.out;
  const ExperimentData data = build_data(cfg);
  for (const auto& p : write_data(cfg, data, dir)) std::cout << p << '\n';
  write_json(fs::path(dir) / "effective_config.json", cfg.to_json());
  return kExitOk;
}

int cmd_train_teacher(const CommonOptions& o) {
  ExperimentConfig cfg = load_config(o);
  if (o.seed) {
    cfg.teacher_seed = *o.seed;
    cfg.teacher_train.seed = *o.seed;
  }
  const std::string dir = o.out.empty() ? (fs::path(cfg.output_dir) / "teacher").string() : o.out;
  write_json(fs::path(dir) / "effective_config.json", cfg.to_json());
  const TrainedModel t = train_teacher(cfg, build_data(cfg), dir);
  std::cout << t.checkpoint << " val_ter=" << t.val_ter << " best_step=" << t.best_step << '\n';
  return kExitOk;
}

int cmd_distill(const CommonOptions& o, const std::string& teacher_path, const std::string& student, bool gated) {
  const ExperimentConfig cfg = load_config(o);
  const std::uint64_t seed = o.seed.value_or(cfg.seeds.front());
  const StudentSpec& spec = cfg.student(student);
  const std::string tpath = teacher_path.empty() ? default_teacher(cfg) : teacher_path;
  EncoderDecoder teacher(cfg.teacher_model, 0);
  load_checkpoint(teacher, tpath);
  const std::string dir =
      o.out.empty() ? (fs::path(cfg.output_dir) / (spec.name + (gated ? "-gated" : "-ungated") + "-s" + std::to_string(seed)))
                          .string()
                    : o.out;
  write_json(fs::path(dir) / "effective_config.json", cfg.to_json());
  const TrainedModel s = distill_student(cfg, build_data(cfg), teacher, spec, gated, seed, dir);
  std::cout << s.checkpoint << " val_ter=" << s.val_ter << " best_step=" << s.best_step << '\n';
  return kExitOk;
}

int cmd_calibrate(const CommonOptions& o, const std::string& checkpoint, std::optional<std::size_t> batches) {
  ExperimentConfig cfg = load_config(o);
  if (batches) cfg.quant.calibration_batches = *batches;
  cfg.validate();
  const LoadedCheckpoint ck = load_checkpoint(checkpoint);
  CalibrationSummary summary;
  const InstrumentedModel qm = calibrate_model(cfg, build_data(cfg), ck.model, &summary);
  const std::string out = o.out.empty() ? (fs::path(checkpoint).parent_path() / "calibration.json").string() : o.out;
  write_json(out, sites_to_json(qm.all_sites(), cfg.quant.bits));
  std::cout << out << " batches=" << summary.batches << " sites=" << summary.sites_parameterized << '\n';
  return kExitOk;
}

int cmd_eval(const CommonOptions& o, const std::string& checkpoint, const std::string& calibration, bool quantize,
             std::vector<std::string> splits) {
  const ExperimentConfig cfg = load_config(o);
  if (splits.empty()) splits = cfg.splits;
  const LoadedCheckpoint ck = load_checkpoint(checkpoint);
  const ExperimentData data = build_data(cfg);
  std::optional<InstrumentedModel> qm;
  if (quantize) {
    if (!calibration.empty()) {
      qm = apply_policy(ck.model, default_policy(ck.model, cfg.quant.bits, cfg.quant.ema_decay));
      load_calibration(*qm, sites_from_json(nlohmann::json::parse(io::read_file(calibration))));
    } else {
      qm = calibrate_model(cfg, data, ck.model);
    }
  }
  const bool trace = o.trace;
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& split : splits) {
    const auto& examples = data.split(split);
    const EvalMetrics m = qm ? evaluate_model(qm->model, &qm->runtime, examples, cfg.eval_batch_size, trace)
                             : evaluate_model(ck.model, nullptr, examples, cfg.eval_batch_size, trace);
    nlohmann::json row{{"split", split}, {"ter", m.ter}};
    if (m.outliers) {
      row["average_kurtosis"] = m.outliers->average_kurtosis;
      row["max_inf_norm"] = m.outliers->max_inf_norm;
      row["outlier_count"] = m.outliers->total_outlier_count;
      row["outliers"] = m.outliers->to_json();
    }
    std::cout << split << " ter=" << m.ter << '\n';
    rows.push_back(row);
  }
  const nlohmann::json doc{{"format", "qgate-eval"},
                           {"version", 1},
                           {"checkpoint_sha256", sha256_file(checkpoint)},
                           {"precision", quantize ? "int8" : "fp32"},
                           {"rows", rows}};
  const std::string out = o.out.empty() ? (fs::path(checkpoint).parent_path() /
                                           (std::string("eval_") + (quantize ? "int8" : "fp32") + ".json"))
                                              .string()
                                        : o.out;
  write_json(out, doc);
  return kExitOk;
}

int cmd_grid(const CommonOptions& o) {
  ExperimentConfig cfg = load_config(o);
  if (o.seed) cfg.seeds = {*o.seed};
  if (!o.out.empty()) cfg.output_dir = o.out;
  const ExperimentReport report = run_grid(cfg, GridOptions{o.jobs});
  std::size_t failed = 0;
  for (const auto& r : report.rows) failed += r.status != "ok";
  std::cout << report.rows.size() << " rows (" << failed << " failed) in " << cfg.output_dir << '\n';
  for (const auto& c : report.checks)
    std::cout << (c.agrees ? "PASS" : "INFO") << ' ' << c.name << ": gated " << c.gated << " vs ungated " << c.ungated
              << '\n';
  return failed ? kExitFailure : kExitOk;
}

int cmd_inspect(const CommonOptions& o, const std::string& checkpoint, const std::string& split, std::size_t index,
                const std::string& stack, std::size_t layer, std::size_t head) {
  const ExperimentConfig cfg = load_config(o);
  const LoadedCheckpoint ck = load_checkpoint(checkpoint);
  const ExperimentData data = build_data(cfg);
  const auto& examples = data.split(split);
  if (index >= examples.size()) throw IndexError("example index " + std::to_string(index) + " out of range");
  const AttentionDump dump = attention_dump(ck.model, examples[index], stack, layer, head);
  const std::string dir = o.out.empty() ? (fs::path(checkpoint).parent_path() / "inspect").string() : o.out;
  std::cout << write_attention_dump(dump, dir) << '\n';
  return kExitOk;
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"Gated attention, distillation and INT8 quantization experiments"};
  app.require_subcommand(1);
  std::string log_level = "info";
  app.add_option("--log-level", log_level, "trace, debug, info, warn, error or off");

  CommonOptions o;
  std::string teacher, student, checkpoint, calibration, split = "test_id", stack = "decoder";
  bool gated = false, quantize = false;
  std::optional<std::size_t> batches;
  std::vector<std::string> splits;
  std::size_t index = 0, layer = 0, head = 0;

  auto* gen = app.add_subcommand("gen-data", "write the task's dataset files");
  add_common(gen, o);
  auto* tt = app.add_subcommand("train-teacher", "train the teacher model");
  add_common(tt, o);
  auto* ds = app.add_subcommand("distill", "distill one student from the teacher");
  add_common(ds, o);
  ds->add_option("--teacher", teacher, "teacher checkpoint");
  ds->add_option("--student", student, "student name from the config")->required();
  ds->add_flag("--gated", gated, "use gated self-attention");
  auto* cal = app.add_subcommand("calibrate", "calibrate activation ranges of a checkpoint");
  add_common(cal, o);
  cal->add_option("--checkpoint", checkpoint)->required()->check(CLI::ExistingFile);
  cal->add_option("--batches", batches, "number of calibration batches");
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  add_common(ev, o);
  ev->add_option("--checkpoint", checkpoint)->required()->check(CLI::ExistingFile);
  ev->add_option("--calibration", calibration, "calibration file (used with --quantize)");
  ev->add_flag("--quantize", quantize, "evaluate with INT8 fake quantization");
  ev->add_option("--splits", splits, "splits to evaluate")->delimiter(',');
  ev->add_flag("--trace", o.trace, "collect attention-output outlier statistics");
  auto* grid = app.add_subcommand("grid", "run the full experiment grid");
  add_common(grid, o);
  grid->add_option("--jobs", o.jobs, "parallel grid cells")->check(CLI::PositiveNumber);
  auto* ins = app.add_subcommand("inspect", "dump P, V and PV of one attention head");
  add_common(ins, o);
  ins->add_option("--checkpoint", checkpoint)->required()->check(CLI::ExistingFile);
  ins->add_option("--split", split);
  ins->add_option("--index", index);
  ins->add_option("--stack", stack)->check(CLI::IsMember({"encoder", "decoder"}));
  ins->add_option("--layer", layer);
  ins->add_option("--head", head);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitConfig;
  }
  spdlog::set_level(spdlog::level::from_str(log_level));

  try {
    if (gen->parsed()) return cmd_gen_data(o);
    if (tt->parsed()) return cmd_train_teacher(o);
    if (ds->parsed()) return cmd_distill(o, teacher, student, gated);
    if (cal->parsed()) return cmd_calibrate(o, checkpoint, batches);
    if (ev->parsed()) return cmd_eval(o, checkpoint, calibration, quantize, splits);
    if (grid->parsed()) return cmd_grid(o);
    if (ins->parsed()) return cmd_inspect(o, checkpoint, split, index, stack, layer, head);
  } catch (const ConfigError& e) {
    spdlog::error("configuration error: {}", e.what());
    return kExitConfig;
  } catch (const IndexError& e) {
    spdlog::error("configuration error: {}", e.what());
    return kExitConfig;
  } catch (const DataError& e) {
    spdlog::error("data error: {}", e.what());
    return kExitData;
  } catch (const NumericalError& e) {
    spdlog::error("numerical failure: {}", e.what());
    return kExitNumerical;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return kExitFailure;
  }
  return kExitFailure;
}

}  // namespace qgate
