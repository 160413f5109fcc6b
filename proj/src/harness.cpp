#include "qgate/harness.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <map>
#include <mutex>
#include <set>
#include <thread>

#include <spdlog/spdlog.h>

#include "qgate/errors.hpp"
#include "qgate/hashing.hpp"
#include "qgate/serialize.hpp"

namespace fs = std::filesystem;

namespace qgate {
namespace {

std::string num(double x) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, res.ptr);
}

void reject_unknown(const nlohmann::json& j, std::initializer_list<const char*> known, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  std::set<std::string> ok(known.begin(), known.end());
  for (const auto& [key, _] : j.items())
    if (!ok.count(key)) throw ConfigError("unknown key '" + key + "' in " + where);
}

// Applies the keys of `given` over the effective values in `base`.
nlohmann::json overlay(nlohmann::json base, const nlohmann::json& given, const std::string& where) {
  if (!given.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& [key, value] : given.items()) {
    if (!base.contains(key)) throw ConfigError("unknown key '" + key + "' in " + where);
    base[key] = value;
  }
  return base;
}

double median(std::vector<double> v) {
  if (v.empty()) return std::nan("");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  io::write_file_atomic(path.string(), text);
}

}  // namespace

// ---------------------------------------------------------------- config

ExperimentConfig default_experiment() {
  ExperimentConfig c;
  c.task.vocab_size = 32;
  c.task.feature_dim = 64;
  c.ood_task = c.task;
  c.ood_task.noise_sigma = 0.25;
  c.ood_task.min_frames = 2;
  c.ood_task.max_frames = 4;

  c.teacher_model.enc_layers = 8;
  c.teacher_model.dec_layers = 4;
  c.teacher_model.model_dim = 64;
  c.teacher_model.n_heads = 4;
  c.teacher_model.ffn_dim = 256;
  c.teacher_model.vocab_size = 32;
  c.teacher_model.feature_dim = 64;

  c.teacher_train.alpha_kl = 0.0;
  c.teacher_train.learning_rate = 2e-3;
  c.teacher_train.beta1 = 0.9;
  c.teacher_train.total_steps = 4000;
  c.teacher_train.eval_interval = 200;
  c.teacher_train.seed = 1;

  c.students = {{"enc2", 2, 2}, {"enc4", 4, 2}, {"enc6", 6, 2}};
  c.distill.learning_rate = 1e-3;
  c.distill.total_steps = 2000;
  c.distill.eval_interval = 200;
  return c;
}

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
  try {
    reject_unknown(j,
                   {"schema_version", "task", "ood", "data", "teacher", "students", "gating", "distill", "spread_copy",
                    "quant", "seeds", "splits", "eval", "output_dir"},
                   "experiment config");
    if (j.value("schema_version", -1) != kConfigSchemaVersion)
      throw ConfigError("experiment config must declare schema_version " + std::to_string(kConfigSchemaVersion));
    ExperimentConfig c = default_experiment();
    if (j.contains("task")) c.task = TaskSpec::from_json(overlay(c.task.to_json(), j.at("task"), "task"));
    c.ood_task = c.task;
    c.ood_task.noise_sigma = 0.25;
    c.ood_task.min_frames = 2;
    c.ood_task.max_frames = 4;
    if (j.contains("ood")) {
      const auto& o = j.at("ood");
      reject_unknown(o, {"noise_sigma", "min_frames", "max_frames"}, "ood");
      c.ood_task.noise_sigma = o.value("noise_sigma", c.ood_task.noise_sigma);
      c.ood_task.min_frames = o.value("min_frames", c.ood_task.min_frames);
      c.ood_task.max_frames = o.value("max_frames", c.ood_task.max_frames);
      c.ood_task.validate();
    }
    if (j.contains("data")) {
      const auto& d = j.at("data");
      reject_unknown(d, {"train", "validation", "test"}, "data");
      c.n_train = d.value("train", c.n_train);
      c.n_validation = d.value("validation", c.n_validation);
      c.n_test = d.value("test", c.n_test);
    }
    if (j.contains("teacher")) {
      const auto& t = j.at("teacher");
      reject_unknown(t, {"model", "train", "seed", "max_val_ter", "checkpoint"}, "teacher");
      if (t.contains("model"))
        c.teacher_model = ModelConfig::from_json(overlay(c.teacher_model.to_json(), t.at("model"), "teacher.model"));
      if (t.contains("train"))
        c.teacher_train = DistillConfig::from_json(overlay(c.teacher_train.to_json(), t.at("train"), "teacher.train"));
      c.teacher_seed = t.value("seed", c.teacher_seed);
      c.teacher_max_val_ter = t.value("max_val_ter", c.teacher_max_val_ter);
      c.teacher_checkpoint = t.value("checkpoint", c.teacher_checkpoint);
    }
    if (j.contains("students")) {
      c.students.clear();
      for (const auto& s : j.at("students")) {
        reject_unknown(s, {"name", "enc_layers", "dec_layers"}, "student");
        c.students.push_back({s.at("name").get<std::string>(), s.at("enc_layers").get<std::size_t>(),
                              s.value("dec_layers", std::size_t{2})});
      }
    }
    if (j.contains("gating")) c.gating = j.at("gating").get<std::vector<bool>>();
    if (j.contains("distill")) c.distill = DistillConfig::from_json(overlay(c.distill.to_json(), j.at("distill"), "distill"));
    c.spread_copy = j.value("spread_copy", c.spread_copy);
    if (j.contains("quant")) {
      const auto& q = j.at("quant");
      reject_unknown(q, {"bits", "ema_decay", "calibration_batches", "calibration_batch_size", "skip_activation_sites"},
                     "quant");
      c.quant.bits = q.value("bits", c.quant.bits);
      c.quant.ema_decay = q.value("ema_decay", c.quant.ema_decay);
      c.quant.calibration_batches = q.value("calibration_batches", c.quant.calibration_batches);
      c.quant.calibration_batch_size = q.value("calibration_batch_size", c.quant.calibration_batch_size);
      // The skip list is derived from the teacher depth; it may be echoed back but not changed.
      if (q.contains("skip_activation_sites") &&
          q.at("skip_activation_sites") != c.to_json().at("quant").at("skip_activation_sites"))
        throw ConfigError("quant.skip_activation_sites does not match the fixed skip rule for this teacher");
    }
    if (j.contains("seeds")) c.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    if (j.contains("splits")) c.splits = j.at("splits").get<std::vector<std::string>>();
    if (j.contains("eval")) {
      const auto& e = j.at("eval");
      reject_unknown(e, {"batch_size", "trace"}, "eval");
      c.eval_batch_size = e.value("batch_size", c.eval_batch_size);
      c.trace = e.value("trace", c.trace);
    }
    c.output_dir = j.value("output_dir", c.output_dir);
    c.validate();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed experiment config: ") + e.what());
  }
}

ExperimentConfig ExperimentConfig::load(const std::string& path) {
  std::string text;
  try {
    text = io::read_file(path);
  } catch (const Error& e) {
    throw ConfigError("cannot read config '" + path + "': " + e.what());
  }
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config '" + path + "' is not valid JSON: " + e.what());
  }
  return from_json(j);
}

nlohmann::json ExperimentConfig::to_json() const {
  nlohmann::json students_json = nlohmann::json::array();
  for (const auto& s : students)
    students_json.push_back({{"name", s.name}, {"enc_layers", s.enc_layers}, {"dec_layers", s.dec_layers}});
  return {{"schema_version", kConfigSchemaVersion},
          {"task", task.to_json()},
          {"ood",
           {{"noise_sigma", ood_task.noise_sigma},
            {"min_frames", ood_task.min_frames},
            {"max_frames", ood_task.max_frames}}},
          {"data", {{"train", n_train}, {"validation", n_validation}, {"test", n_test}}},
          {"teacher",
           {{"model", teacher_model.to_json()},
            {"train", teacher_train.to_json()},
            {"seed", teacher_seed},
            {"max_val_ter", teacher_max_val_ter},
            {"checkpoint", teacher_checkpoint}}},
          {"students", students_json},
          {"gating", gating},
          {"distill", distill.to_json()},
          {"spread_copy", spread_copy},
          {"quant",
           {{"bits", quant.bits},
            {"ema_decay", quant.ema_decay},
            {"calibration_batches", quant.calibration_batches},
            {"calibration_batch_size", quant.calibration_batch_size},
            {"skip_activation_sites",
             {"encoder.layers." + std::to_string(teacher_model.enc_layers - 1) + ".ffn.output",
              "encoder.final_norm.output"}}}},
          {"seeds", seeds},
          {"splits", splits},
          {"eval", {{"batch_size", eval_batch_size}, {"trace", trace}}},
          {"output_dir", output_dir}};
}

void ExperimentConfig::validate() const {
  task.validate();
  ood_task.validate();
  teacher_model.validate();
  teacher_train.validate();
  distill.validate();
  if (ood_task.seed != task.seed || ood_task.vocab_size != task.vocab_size || ood_task.feature_dim != task.feature_dim)
    throw ConfigError("OOD task must share the ID task's seed, vocabulary and feature_dim");
  if (teacher_model.vocab_size != task.vocab_size || teacher_model.feature_dim != task.feature_dim)
    throw ConfigError("teacher vocab_size/feature_dim must match the task");
  if (std::max(task.max_source_len(), ood_task.max_source_len()) > teacher_model.max_source_len)
    throw ConfigError("task utterances can exceed the model's max_source_len");
  if (task.max_symbols + 1 > teacher_model.max_target_len) throw ConfigError("max_target_len too small for the task");
  if (n_train == 0 || n_validation == 0 || n_test == 0) throw ConfigError("every split needs at least one example");
  if (students.empty()) throw ConfigError("no students configured");
  std::set<std::string> names;
  for (const auto& s : students) {
    if (s.name.empty() || !names.insert(s.name).second) throw ConfigError("student names must be unique and non-empty");
    plan_for(teacher_model, student_model(s, false), spread_copy);
  }
  if (gating.empty() || seeds.empty() || splits.empty()) throw ConfigError("gating, seeds and splits must be non-empty");
  for (const auto& s : splits)
    if (s != "test_id" && s != "test_ood" && s != "validation")
      throw ConfigError("unknown split '" + s + "' (expected test_id, test_ood or validation)");
  if (quant.bits < 2 || quant.bits > 16) throw ConfigError("quant.bits must lie in [2, 16]");
  if (quant.calibration_batches == 0 || quant.calibration_batch_size == 0)
    throw ConfigError("calibration needs at least one non-empty batch");
  if (!(quant.ema_decay >= 0.0 && quant.ema_decay < 1.0)) throw ConfigError("quant.ema_decay must lie in [0, 1)");
  if (eval_batch_size == 0) throw ConfigError("eval.batch_size must be positive");
}

ModelConfig ExperimentConfig::student_model(const StudentSpec& s, bool gated) const {
  ModelConfig m = teacher_model;
  m.enc_layers = s.enc_layers;
  m.dec_layers = s.dec_layers;
  m.gated = gated;
  return m;
}

const StudentSpec& ExperimentConfig::student(const std::string& name) const {
  for (const auto& s : students)
    if (s.name == name) return s;
  throw ConfigError("no student named '" + name + "'");
}

// ---------------------------------------------------------------- data

const std::vector<Example>& ExperimentData::split(const std::string& name) const {
  if (name == "train") return train;
  if (name == "validation") return validation;
  if (name == "test_id") return test_id;
  if (name == "test_ood") return test_ood;
  throw ConfigError("unknown split '" + name + "'");
}

ExperimentData build_data(const ExperimentConfig& cfg) {
  ExperimentData d;
  d.train = generate_split(cfg.task, "train", cfg.n_train);
  d.validation = generate_split(cfg.task, "validation", cfg.n_validation);
  d.test_id = generate_split(cfg.task, "test", cfg.n_test);
  d.test_ood = generate_split(cfg.ood_task, "test_ood", cfg.n_test);
  return d;
}

std::vector<std::string> write_data(const ExperimentConfig& cfg, const ExperimentData& data, const std::string& dir) {
  fs::create_directories(dir);
  std::vector<std::string> paths;
  for (const char* name : {"train", "validation", "test_id", "test_ood"}) {
    const std::string path = (fs::path(dir) / (std::string(name) + ".qgds")).string();
    save_dataset(path, std::string(name) == "test_ood" ? cfg.ood_task : cfg.task, name, data.split(name));
    paths.push_back(path);
  }
  return paths;
}

// ---------------------------------------------------------------- training

TrainedModel train_teacher(const ExperimentConfig& cfg, const ExperimentData& data, const std::string& dir) {
  fs::create_directories(dir);
  EncoderDecoder teacher(cfg.teacher_model, cfg.teacher_seed);
  spdlog::info("training teacher ({} enc / {} dec layers, {} steps)", cfg.teacher_model.enc_layers,
               cfg.teacher_model.dec_layers, cfg.teacher_train.total_steps);
  const DistillResult r = distill(nullptr, teacher, data.train, data.validation, cfg.teacher_train,
                                  (fs::path(dir) / "checkpoints").string());
  write_text(fs::path(dir) / "teacher_log.csv", training_log_csv(r.log));
  TrainedModel out{(fs::path(dir) / "teacher.ckpt").string(), r.best_val_ter, r.best_step};
  save_checkpoint(teacher, out.checkpoint,
                  {{"role", "teacher"}, {"best_step", r.best_step}, {"val_ter", r.best_val_ter}, {"seed", cfg.teacher_seed}});
  spdlog::info("teacher best validation TER {:.4f} at step {}", r.best_val_ter, r.best_step);
  if (r.best_val_ter > cfg.teacher_max_val_ter)
    throw Error("teacher validation TER " + num(r.best_val_ter) + " misses the threshold " +
                num(cfg.teacher_max_val_ter));
  return out;
}

TrainedModel distill_student(const ExperimentConfig& cfg, const ExperimentData& data, const EncoderDecoder& teacher,
                             const StudentSpec& spec, bool gated, std::uint64_t seed, const std::string& dir) {
  fs::create_directories(dir);
  const ModelConfig sc = cfg.student_model(spec, gated);
  const CopyPlan plan = plan_for(teacher.config(), sc, cfg.spread_copy);
  EncoderDecoder student = init_student(teacher, sc, plan, seed);
  DistillConfig dc = cfg.distill;
  dc.seed = seed;
  const DistillResult r =
      distill(&teacher, student, data.train, data.validation, dc, (fs::path(dir) / "checkpoints").string());
  write_text(fs::path(dir) / "train_log.csv", training_log_csv(r.log));
  TrainedModel out{(fs::path(dir) / "student.ckpt").string(), r.best_val_ter, r.best_step};
  save_checkpoint(student, out.checkpoint,
                  {{"role", "student"},
                   {"student", spec.name},
                   {"gated", gated},
                   {"seed", seed},
                   {"encoder_plan", plan.encoder},
                   {"decoder_plan", plan.decoder},
                   {"best_step", r.best_step},
                   {"val_ter", r.best_val_ter}});
  return out;
}

InstrumentedModel calibrate_model(const ExperimentConfig& cfg, const ExperimentData& data, const EncoderDecoder& model,
                                  CalibrationSummary* summary) {
  InstrumentedModel qm = apply_policy(model, default_policy(model, cfg.quant.bits, cfg.quant.ema_decay));
  const auto& val = data.validation;
  std::vector<Batch> batches;
  for (std::size_t b = 0; b < cfg.quant.calibration_batches; ++b) {
    std::vector<Example> ex;
    for (std::size_t i = 0; i < cfg.quant.calibration_batch_size; ++i)
      ex.push_back(val[(b * cfg.quant.calibration_batch_size + i) % val.size()]);
    batches.push_back(make_batch(ex));
  }
  const CalibrationSummary s = calibrate(qm, batches);
  if (summary) *summary = s;
  return qm;
}

EvalMetrics evaluate_model(const EncoderDecoder& model, SiteHook<float>* quant_hook, std::span<const Example> examples,
                           std::size_t batch_size, bool trace) {
  EvalMetrics m;
  m.ter = evaluate_ter(model, examples, batch_size, quant_hook);
  if (trace) {
    OutlierTracer tracer(model.attention_output_sites());
    HookChain<float> chain({quant_hook, &tracer});
    NoGradScope no_grad;
    for (std::size_t start = 0; start < examples.size(); start += batch_size) {
      const auto chunk = examples.subspan(start, std::min(batch_size, examples.size() - start));
      (void)model.forward(make_batch(chunk), &chain);
    }
    const auto traces = tracer.traces();
    m.outliers = aggregate(traces);
  }
  return m;
}

// ---------------------------------------------------------------- report

nlohmann::json row_to_json(const ReportRow& r) {
  nlohmann::json top = nlohmann::json::array();
  for (const auto& [d, s] : r.top_dimensions) top.push_back({{"dimension", d}, {"share", s}});
  return {{"student", r.student},
          {"enc_layers", r.enc_layers},
          {"dec_layers", r.dec_layers},
          {"gated", r.gated},
          {"precision", r.precision},
          {"seed", r.seed},
          {"split", r.split},
          {"status", r.status},
          {"diagnostic", r.diagnostic},
          {"ter", r.ter},
          {"average_kurtosis", r.average_kurtosis},
          {"max_inf_norm", r.max_inf_norm},
          {"outlier_count", r.outlier_count},
          {"top_dimensions", top}};
}

ReportRow row_from_json(const nlohmann::json& j) {
  ReportRow r;
  r.student = j.at("student").get<std::string>();
  r.enc_layers = j.at("enc_layers").get<std::size_t>();
  r.dec_layers = j.at("dec_layers").get<std::size_t>();
  r.gated = j.at("gated").get<bool>();
  r.precision = j.at("precision").get<std::string>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.split = j.at("split").get<std::string>();
  r.status = j.at("status").get<std::string>();
  r.diagnostic = j.at("diagnostic").get<std::string>();
  r.ter = j.at("ter").get<double>();
  r.average_kurtosis = j.at("average_kurtosis").get<double>();
  r.max_inf_norm = j.at("max_inf_norm").get<double>();
  r.outlier_count = j.at("outlier_count").get<std::size_t>();
  for (const auto& t : j.at("top_dimensions"))
    r.top_dimensions.emplace_back(t.at("dimension").get<std::size_t>(), t.at("share").get<double>());
  return r;
}

const char* ExperimentReport::csv_header() {
  return "student,enc_layers,dec_layers,gated,precision,seed,split,status,ter,average_kurtosis,max_inf_norm,"
         "outlier_count,diagnostic";
}

namespace {

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c == '\n' ? ' ' : c;
  }
  return out + '"';
}

}  // namespace

std::string ExperimentReport::rows_csv() const {
  std::string out = std::string(csv_header()) + '\n';
  for (const auto& r : rows) {
    out += r.student + ',' + std::to_string(r.enc_layers) + ',' + std::to_string(r.dec_layers) + ',' +
           (r.gated ? "true" : "false") + ',' + r.precision + ',' + std::to_string(r.seed) + ',' + r.split + ',' +
           r.status + ',' + num(r.ter) + ',' + num(r.average_kurtosis) + ',' + num(r.max_inf_norm) + ',' +
           std::to_string(r.outlier_count) + ',' + csv_field(r.diagnostic) + '\n';
  }
  return out;
}

std::string ExperimentReport::table1_csv() const {
  struct Acc {
    double kurt = 0.0, inf = 0.0, outliers = 0.0;
    std::size_t n = 0;
  };
  std::map<std::pair<std::size_t, bool>, Acc> groups;
  for (const auto& r : rows) {
    if (r.status != "ok" || r.precision != "fp32" || r.split != "test_id") continue;
    auto& a = groups[{r.enc_layers, r.gated}];
    a.kurt += r.average_kurtosis;
    a.inf += r.max_inf_norm;
    a.outliers += static_cast<double>(r.outlier_count);
    ++a.n;
  }
  std::string out = "enc_layers,gated,average_kurtosis,max_inf_norm,outlier_count,seeds\n";
  for (const auto& [key, a] : groups) {
    const double n = static_cast<double>(a.n);
    out += std::to_string(key.first) + ',' + (key.second ? "true" : "false") + ',' + num(a.kurt / n) + ',' +
           num(a.inf / n) + ',' + num(a.outliers / n) + ',' + std::to_string(a.n) + '\n';
  }
  return out;
}

std::string ExperimentReport::table2_csv() const {
  std::vector<std::string> splits;
  for (const auto& r : rows)
    if (std::find(splits.begin(), splits.end(), r.split) == splits.end()) splits.push_back(r.split);
  struct Key {
    std::size_t enc_layers;
    std::string student, precision;
    bool gated;
    bool operator<(const Key& o) const {
      return std::tie(enc_layers, student, precision, gated) < std::tie(o.enc_layers, o.student, o.precision, o.gated);
    }
  };
  std::map<Key, std::map<std::string, std::pair<double, std::size_t>>> groups;
  for (const auto& r : rows) {
    if (r.status != "ok") continue;
    auto& cell = groups[{r.enc_layers, r.student, r.precision, r.gated}][r.split];
    cell.first += r.ter;
    ++cell.second;
  }
  std::string out = "student,enc_layers,int8_quant,gated_attention";
  for (const auto& s : splits) out += ",ter_" + s;
  out += '\n';
  for (const auto& [k, per_split] : groups) {
    out += k.student + ',' + std::to_string(k.enc_layers) + ',' + (k.precision == "int8" ? "true" : "false") + ',' +
           (k.gated ? "true" : "false");
    for (const auto& s : splits) {
      auto it = per_split.find(s);
      out += ',';
      if (it != per_split.end() && it->second.second > 0)
        out += num(it->second.first / static_cast<double>(it->second.second));
    }
    out += '\n';
  }
  return out;
}

nlohmann::json ExperimentReport::to_json() const {
  nlohmann::json rows_json = nlohmann::json::array();
  for (const auto& r : rows) rows_json.push_back(row_to_json(r));
  nlohmann::json checks_json = nlohmann::json::array();
  for (const auto& c : checks)
    checks_json.push_back({{"name", c.name},
                           {"gated_median", c.gated},
                           {"ungated_median", c.ungated},
                           {"delta", c.gated - c.ungated},
                           {"status", c.agrees ? "PASS" : "INFO"}});
  return {{"format", "qgate-experiment-report"}, {"version", 1}, {"rows", rows_json}, {"directional_checks", checks_json}};
}

std::vector<DirectionalCheck> directional_checks(const std::vector<ReportRow>& rows) {
  std::map<std::tuple<std::string, bool, std::uint64_t, std::string>, std::map<std::string, double>> ter;
  std::vector<double> kurt_gated, kurt_ungated;
  for (const auto& r : rows) {
    if (r.status != "ok") continue;
    ter[{r.student, r.gated, r.seed, r.split}][r.precision] = r.ter;
    if (r.precision == "fp32" && r.split == "test_id") (r.gated ? kurt_gated : kurt_ungated).push_back(r.average_kurtosis);
  }
  std::vector<double> deg_gated, deg_ungated;
  for (const auto& [key, by_precision] : ter) {
    auto fp = by_precision.find("fp32"), q = by_precision.find("int8");
    if (fp == by_precision.end() || q == by_precision.end()) continue;
    (std::get<1>(key) ? deg_gated : deg_ungated).push_back(q->second - fp->second);
  }
  std::vector<DirectionalCheck> out;
  DirectionalCheck a{"int8_ter_degradation", median(deg_gated), median(deg_ungated), false};
  a.agrees = a.gated <= a.ungated;
  DirectionalCheck b{"average_kurtosis", median(kurt_gated), median(kurt_ungated), false};
  b.agrees = b.gated <= b.ungated;
  out.push_back(a);
  out.push_back(b);
  return out;
}

// ---------------------------------------------------------------- grid

namespace {

struct Cell {
  StudentSpec student;
  bool gated = false;
  std::uint64_t seed = 0;

  std::string name() const { return student.name + (gated ? "-gated" : "-ungated") + "-s" + std::to_string(seed); }
};

std::vector<ReportRow> failed_rows(const ExperimentConfig& cfg, const Cell& cell, const std::string& why) {
  std::vector<ReportRow> rows;
  for (const char* precision : {"fp32", "int8"})
    for (const auto& split : cfg.splits) {
      ReportRow r;
      r.student = cell.student.name;
      r.enc_layers = cell.student.enc_layers;
      r.dec_layers = cell.student.dec_layers;
      r.gated = cell.gated;
      r.precision = precision;
      r.seed = cell.seed;
      r.split = split;
      r.status = "failed";
      r.diagnostic = why;
      rows.push_back(r);
    }
  return rows;
}

std::vector<ReportRow> run_cell(const ExperimentConfig& cfg, const ExperimentData& data, const EncoderDecoder& teacher,
                                const Cell& cell, const fs::path& dir) {
  const TrainedModel trained = distill_student(cfg, data, teacher, cell.student, cell.gated, cell.seed, dir.string());
  EncoderDecoder student(cfg.student_model(cell.student, cell.gated), 0);
  load_checkpoint(student, trained.checkpoint);

  CalibrationSummary summary;
  InstrumentedModel qm = calibrate_model(cfg, data, student, &summary);
  write_text(dir / "calibration.json", sites_to_json(qm.all_sites(), cfg.quant.bits).dump(2) + "\n");

  std::vector<ReportRow> rows;
  for (const char* precision : {"fp32", "int8"}) {
    const bool q = std::string(precision) == "int8";
    for (const auto& split : cfg.splits) {
      const auto& examples = data.split(split);
      const EvalMetrics m = q ? evaluate_model(qm.model, &qm.runtime, examples, cfg.eval_batch_size, cfg.trace)
                              : evaluate_model(student, nullptr, examples, cfg.eval_batch_size, cfg.trace);
      ReportRow r;
      r.student = cell.student.name;
      r.enc_layers = cell.student.enc_layers;
      r.dec_layers = cell.student.dec_layers;
      r.gated = cell.gated;
      r.precision = precision;
      r.seed = cell.seed;
      r.split = split;
      r.ter = m.ter;
      if (m.outliers) {
        r.average_kurtosis = m.outliers->average_kurtosis;
        r.max_inf_norm = m.outliers->max_inf_norm;
        r.outlier_count = m.outliers->total_outlier_count;
        r.top_dimensions = m.outliers->top_dimensions();
        write_text(dir / ("outliers_" + std::string(precision) + "_" + split + ".json"),
                   m.outliers->to_json().dump(2) + "\n");
      }
      rows.push_back(r);
    }
  }
  return rows;
}

std::string teacher_key(const ExperimentConfig& cfg) {
  const nlohmann::json j{{"task", cfg.task.to_json()},
                         {"n_train", cfg.n_train},
                         {"n_validation", cfg.n_validation},
                         {"model", cfg.teacher_model.to_json()},
                         {"train", cfg.teacher_train.to_json()},
                         {"seed", cfg.teacher_seed},
                         {"max_val_ter", cfg.teacher_max_val_ter}};
  return sha256_hex(j.dump());
}

std::string cell_key(const ExperimentConfig& cfg, const Cell& cell, const std::string& teacher_hash) {
  const nlohmann::json j{{"student", {{"name", cell.student.name},
                                      {"enc_layers", cell.student.enc_layers},
                                      {"dec_layers", cell.student.dec_layers}}},
                         {"gated", cell.gated},
                         {"seed", cell.seed},
                         {"task", cfg.task.to_json()},
                         {"ood", {cfg.ood_task.noise_sigma, cfg.ood_task.min_frames, cfg.ood_task.max_frames}},
                         {"data", {cfg.n_train, cfg.n_validation, cfg.n_test}},
                         {"model", cfg.student_model(cell.student, cell.gated).to_json()},
                         {"distill", cfg.distill.to_json()},
                         {"spread_copy", cfg.spread_copy},
                         {"quant",
                          {cfg.quant.bits, cfg.quant.ema_decay, cfg.quant.calibration_batches,
                           cfg.quant.calibration_batch_size}},
                         {"splits", cfg.splits},
                         {"eval", {cfg.eval_batch_size, cfg.trace}},
                         {"teacher_checkpoint_sha256", teacher_hash}};
  return sha256_hex(j.dump());
}

}  // namespace

ExperimentReport run_grid(const ExperimentConfig& cfg, const GridOptions& options) {
  cfg.validate();
  const fs::path out(cfg.output_dir);
  fs::create_directories(out);
  write_text(out / "effective_config.json", cfg.to_json().dump(2) + "\n");
  nlohmann::json timings = nlohmann::json::object();
  using clock = std::chrono::steady_clock;

  const ExperimentData data = build_data(cfg);

  // Teacher: given checkpoint, finished earlier run, or train now.
  std::string teacher_path = cfg.teacher_checkpoint;
  if (teacher_path.empty()) {
    const fs::path tdir = out / "teacher";
    const std::string key = teacher_key(cfg);
    const fs::path done = tdir / "done.json";
    bool reuse = false;
    if (fs::exists(done)) {
      const auto j = nlohmann::json::parse(io::read_file(done.string()));
      reuse = j.value("key", std::string()) == key && fs::exists(tdir / "teacher.ckpt");
    }
    teacher_path = (tdir / "teacher.ckpt").string();
    if (reuse) {
      spdlog::info("reusing teacher {}", teacher_path);
    } else {
      const auto t0 = clock::now();
      const TrainedModel t = train_teacher(cfg, data, tdir.string());
      timings["teacher"] = std::chrono::duration<double>(clock::now() - t0).count();
      write_text(done, nlohmann::json{{"key", key}, {"val_ter", t.val_ter}, {"best_step", t.best_step}}.dump(2) + "\n");
    }
  }
  EncoderDecoder teacher(cfg.teacher_model, 0);
  load_checkpoint(teacher, teacher_path);
  const std::string teacher_hash = sha256_file(teacher_path);

  std::vector<Cell> cells;
  for (const auto& s : cfg.students)
    for (bool g : cfg.gating)
      for (auto seed : cfg.seeds) cells.push_back({s, g, seed});

  std::vector<std::vector<ReportRow>> results(cells.size());
  std::vector<double> cell_seconds(cells.size(), -1.0);
  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    for (std::size_t i = next++; i < cells.size(); i = next++) {
      const Cell& cell = cells[i];
      const fs::path dir = out / "cells" / cell.name();
      const fs::path result_file = dir / "result.json";
      const std::string key = cell_key(cfg, cell, teacher_hash);
      if (fs::exists(result_file)) {
        try {
          const auto j = nlohmann::json::parse(io::read_file(result_file.string()));
          if (j.value("key", std::string()) == key) {
            for (const auto& r : j.at("rows")) results[i].push_back(row_from_json(r));
            spdlog::info("cell {} already complete, skipped", cell.name());
            continue;
          }
        } catch (const std::exception& e) {
          spdlog::warn("ignoring unreadable result for {}: {}", cell.name(), e.what());
        }
      }
      spdlog::info("cell {} started", cell.name());
      const auto t0 = clock::now();
      try {
        results[i] = run_cell(cfg, data, teacher, cell, dir);
        nlohmann::json rows_json = nlohmann::json::array();
        for (const auto& r : results[i]) rows_json.push_back(row_to_json(r));
        write_text(result_file, nlohmann::json{{"key", key}, {"rows", rows_json}}.dump(2) + "\n");
      } catch (const std::exception& e) {
        spdlog::error("cell {} failed: {}", cell.name(), e.what());
        results[i] = failed_rows(cfg, cell, e.what());
      }
      cell_seconds[i] = std::chrono::duration<double>(clock::now() - t0).count();
      spdlog::info("cell {} finished in {:.1f}s", cell.name(), cell_seconds[i]);
    }
  };
  const std::size_t jobs = std::max<std::size_t>(1, std::min(options.jobs, cells.size()));
  std::vector<std::thread> pool;
  for (std::size_t j = 1; j < jobs; ++j) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();

  ExperimentReport report;
  for (auto& rows : results)
    for (auto& r : rows) report.rows.push_back(std::move(r));
  report.checks = directional_checks(report.rows);

  write_text(out / "report.csv", report.rows_csv());
  write_text(out / "report.json", report.to_json().dump(2) + "\n");
  write_text(out / "table1.csv", report.table1_csv());
  write_text(out / "table2.csv", report.table2_csv());
  for (std::size_t i = 0; i < cells.size(); ++i)
    if (cell_seconds[i] >= 0.0) timings[cells[i].name()] = cell_seconds[i];
  write_text(out / "timings.json", timings.dump(2) + "\n");

  for (const auto& c : report.checks)
    spdlog::info("{} directional {}: gated median {:.6g} vs ungated median {:.6g}", c.agrees ? "PASS" : "INFO", c.name,
                 c.gated, c.ungated);
  return report;
}

}  // namespace qgate
