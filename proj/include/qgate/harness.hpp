#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "qgate/analytics.hpp"
#include "qgate/distill.hpp"
#include "qgate/model.hpp"
#include "qgate/task.hpp"

namespace qgate {

inline constexpr int kConfigSchemaVersion = 1;

struct StudentSpec {
  std::string name;
  std::size_t enc_layers = 2;
  std::size_t dec_layers = 2;
};

struct QuantSettings {
  int bits = 8;
  double ema_decay = 0.9;
  std::size_t calibration_batches = 16;
  std::size_t calibration_batch_size = 16;
};

struct ExperimentConfig {
  TaskSpec task;
  TaskSpec ood_task;  // same prototypes, shifted noise and durations
  std::size_t n_train = 8000;
  std::size_t n_validation = 256;
  std::size_t n_test = 256;

  ModelConfig teacher_model;
  DistillConfig teacher_train;
  std::uint64_t teacher_seed = 1;
  double teacher_max_val_ter = 0.05;
  std::string teacher_checkpoint;  // reuse instead of training when set

  std::vector<StudentSpec> students;
  std::vector<bool> gating{false, true};
  DistillConfig distill;
  bool spread_copy = true;  // allow evenly spread layer copies when depths do not divide
  QuantSettings quant;
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::vector<std::string> splits{"test_id", "test_ood"};
  std::size_t eval_batch_size = 64;
  bool trace = true;
  std::string output_dir = "runs/default";

  /// Reads a config document. Unknown top-level keys and a wrong
  /// schema_version are ConfigErrors; missing keys take defaults.
  static ExperimentConfig from_json(const nlohmann::json& j);
  static ExperimentConfig load(const std::string& path);
  /// Effective config with every default spelled out.
  nlohmann::json to_json() const;
  void validate() const;

  ModelConfig student_model(const StudentSpec& s, bool gated) const;
  const StudentSpec& student(const std::string& name) const;
};

/// Built-in toy experiment (also shipped as configs/toy.json).
ExperimentConfig default_experiment();

struct ExperimentData {
  std::vector<Example> train;
  std::vector<Example> validation;
  std::vector<Example> test_id;
  std::vector<Example> test_ood;

  const std::vector<Example>& split(const std::string& name) const;
};

ExperimentData build_data(const ExperimentConfig& cfg);

/// Writes every split as a dataset file under dir; returns the paths.
std::vector<std::string> write_data(const ExperimentConfig& cfg, const ExperimentData& data, const std::string& dir);

struct TrainedModel {
  std::string checkpoint;
  double val_ter = 0.0;
  std::size_t best_step = 0;
};

/// Trains the teacher from scratch into dir/teacher.ckpt (+ teacher_log.csv).
/// Throws Error when the best validation TER misses teacher_max_val_ter.
TrainedModel train_teacher(const ExperimentConfig& cfg, const ExperimentData& data, const std::string& dir);

/// Distills one student into dir/student.ckpt (+ train_log.csv).
TrainedModel distill_student(const ExperimentConfig& cfg, const ExperimentData& data, const EncoderDecoder& teacher,
                             const StudentSpec& spec, bool gated, std::uint64_t seed, const std::string& dir);

/// The default policy for `model`, calibrated on validation batches.
InstrumentedModel calibrate_model(const ExperimentConfig& cfg, const ExperimentData& data, const EncoderDecoder& model,
                                  CalibrationSummary* summary = nullptr);

struct EvalMetrics {
  double ter = 0.0;
  std::optional<OutlierReport> outliers;
};

/// Greedy-decoding TER on examples; with `trace`, outlier statistics of every
/// attention output over teacher-forced passes of the same examples.
EvalMetrics evaluate_model(const EncoderDecoder& model, SiteHook<float>* quant_hook, std::span<const Example> examples,
                           std::size_t batch_size, bool trace);

struct ReportRow {
  std::string student;
  std::size_t enc_layers = 0;
  std::size_t dec_layers = 0;
  bool gated = false;
  std::string precision;  // "fp32" or "int8"
  std::uint64_t seed = 0;
  std::string split;
  std::string status = "ok";  // or "failed"
  std::string diagnostic;
  double ter = 0.0;
  double average_kurtosis = 0.0;
  double max_inf_norm = 0.0;
  std::size_t outlier_count = 0;
  std::vector<std::pair<std::size_t, double>> top_dimensions;
};

nlohmann::json row_to_json(const ReportRow& r);
ReportRow row_from_json(const nlohmann::json& j);

struct DirectionalCheck {
  std::string name;
  double gated = 0.0;
  double ungated = 0.0;
  bool agrees = false;  // gated <= ungated
};

struct ExperimentReport {
  std::vector<ReportRow> rows;
  std::vector<DirectionalCheck> checks;

  static const char* csv_header();
  std::string rows_csv() const;
  /// Mean over seeds of FP32 outlier metrics on the ID test split, per (layers, gated).
  std::string table1_csv() const;
  /// Mean TER over seeds, per (student, precision, gated) and split.
  std::string table2_csv() const;
  nlohmann::json to_json() const;
};

std::vector<DirectionalCheck> directional_checks(const std::vector<ReportRow>& rows);

struct GridOptions {
  std::size_t jobs = 1;
};

/// Runs every (student, gating, seed) cell; each cell yields rows for both
/// precisions and every split. Cells whose content hash matches a finished
/// result under out_dir are loaded instead of recomputed. A failing cell is
/// recorded with diagnostics and the run continues.
ExperimentReport run_grid(const ExperimentConfig& cfg, const GridOptions& options);

}  // namespace qgate
