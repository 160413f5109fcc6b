#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "qgate/model.hpp"
#include "qgate/ops.hpp"
#include "qgate/task.hpp"

namespace qgate {

struct DistillConfig {
  double alpha_ce = 1.0;
  double alpha_kl = 0.8;
  double learning_rate = 1e-4;
  double weight_decay = 1e-4;
  double beta1 = 0.99;
  double beta2 = 0.999;
  double eps = 1e-8;
  // Warmup length is warmup_fraction · total_steps unless warmup_steps is set.
  double warmup_fraction = 0.05;
  std::size_t warmup_steps = 0;
  std::size_t total_steps = 1000;
  std::size_t batch_size = 16;
  std::size_t eval_interval = 100;  // validation TER every N steps and at the end
  std::size_t eval_examples = 0;    // 0 = the whole validation set
  std::uint64_t seed = 1;
  ops::KlDirection kl_direction = ops::KlDirection::TeacherStudent;

  std::size_t resolved_warmup() const;
  void validate() const;
  nlohmann::json to_json() const;
  static DistillConfig from_json(const nlohmann::json& j);
};

struct CopyPlan {
  std::vector<std::size_t> encoder;
  std::vector<std::size_t> decoder;
};

/// Every k-th teacher layer starting with the first, k = teacher / student.
/// Throws ConfigError unless teacher_depth is a multiple of student_depth.
std::vector<std::size_t> make_copy_plan(std::size_t teacher_depth, std::size_t student_depth);

/// First and last teacher layer, for a two-layer student decoder.
std::vector<std::size_t> make_decoder_plan(std::size_t teacher_depth);

/// Evenly spread indices floor(i · teacher / student); equals make_copy_plan
/// whenever the depths divide.
std::vector<std::size_t> make_spread_plan(std::size_t teacher_depth, std::size_t student_depth);

/// Encoder rule by stride (or spread, when `allow_spread` and the depths do
/// not divide); decoder copies first/last layers for a two-layer student,
/// identity for equal depths.
CopyPlan plan_for(const ModelConfig& teacher, const ModelConfig& student, bool allow_spread = false);

/// Fresh student whose frontend, embedding, final norms and planned layers are
/// copied from the teacher. Gates keep their fresh initialization.
EncoderDecoder init_student(const EncoderDecoder& teacher, const ModelConfig& student_config, const CopyPlan& plan,
                            std::uint64_t seed);

template <typename T>
struct KdLoss {
  BasicTensor<T> total;
  BasicTensor<T> ce;
  BasicTensor<T> kl;
};

/// alpha_ce · CE(student, targets) + alpha_kl · KL, averaged over non-pad
/// positions. With no teacher logits (or alpha_kl = 0) the KL term is 0.
template <typename T>
KdLoss<T> kd_loss(const BasicTensor<T>& student_logits, const BasicTensor<T>& teacher_logits,
                  std::span<const int> targets, const DistillConfig& cfg);

/// Linear ramp 0 → 1 over warmup, then linear decay to 0 at total.
double lr_schedule(std::size_t step, std::size_t warmup, std::size_t total);

struct AdamWHyper {
  double beta1 = 0.99;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
};

/// One AdamW update of a flat parameter. `t` is the 1-based step count used
/// for bias correction; moments are kept in double.
void adamw_update(std::span<float> param, std::span<const float> grad, std::span<double> m, std::span<double> v,
                  const AdamWHyper& hyper, std::size_t t, double lr, bool decay);

class AdamW {
 public:
  AdamW(ParamList<float> params, const AdamWHyper& hyper);
  /// Applies the accumulated gradients at learning rate `lr`, then clears them.
  void step(double lr);
  std::size_t steps_taken() const { return t_; }

 private:
  ParamList<float> params_;
  AdamWHyper hyper_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

struct TrainLogRow {
  std::size_t step = 0;  // 1-based
  double lr = 0.0;
  double loss = 0.0;
  double ce = 0.0;
  double kl = 0.0;
  double val_ter = -1.0;  // negative when not evaluated at this step
  std::string checkpoint_path;
};

struct DistillResult {
  std::vector<TrainLogRow> log;
  std::size_t best_step = 0;
  double best_val_ter = 0.0;
  std::string best_checkpoint;  // empty when no checkpoint directory was given
};

/// Corpus token error rate of greedy transcripts.
double evaluate_ter(const EncoderDecoder& model, std::span<const Example> examples, std::size_t batch_size = 64,
                    SiteHook<float>* hook = nullptr);

/// Trains `student` against targets (and the frozen teacher's distribution
/// when `teacher` is given). Validation TER is checked every eval_interval
/// steps; on return the student holds the weights with the lowest TER
/// (earliest step on ties). Checkpoints go to checkpoint_dir when non-empty.
/// Throws NumericalError on a non-finite loss.
DistillResult distill(const EncoderDecoder* teacher, EncoderDecoder& student, std::span<const Example> train,
                      std::span<const Example> validation, const DistillConfig& cfg,
                      const std::string& checkpoint_dir = "");

std::string training_log_csv(const std::vector<TrainLogRow>& log);

}  // namespace qgate
