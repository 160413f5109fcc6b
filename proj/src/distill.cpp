#include "qgate/distill.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <random>

#include <spdlog/spdlog.h>

#include "qgate/errors.hpp"

namespace qgate {

std::size_t DistillConfig::resolved_warmup() const {
  if (warmup_steps > 0) return warmup_steps;
  return static_cast<std::size_t>(std::floor(warmup_fraction * static_cast<double>(total_steps)));
}

void DistillConfig::validate() const {
  if (alpha_ce < 0.0 || alpha_kl < 0.0) throw ConfigError("loss weights must be non-negative");
  if (total_steps == 0) throw ConfigError("total_steps must be positive");
  if (resolved_warmup() >= total_steps) throw ConfigError("warmup must be shorter than total_steps");
  if (warmup_fraction < 0.0 || warmup_fraction >= 1.0) throw ConfigError("warmup_fraction must lie in [0, 1)");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (eval_interval == 0) throw ConfigError("eval_interval must be positive");
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0) throw ConfigError("betas must lie in [0, 1)");
  if (!(eps > 0.0) || weight_decay < 0.0) throw ConfigError("invalid eps or weight_decay");
}

nlohmann::json DistillConfig::to_json() const {
  return {{"alpha_ce", alpha_ce},
          {"alpha_kl", alpha_kl},
          {"learning_rate", learning_rate},
          {"weight_decay", weight_decay},
          {"beta1", beta1},
          {"beta2", beta2},
          {"eps", eps},
          {"warmup_fraction", warmup_fraction},
          {"warmup_steps", warmup_steps},
          {"total_steps", total_steps},
          {"batch_size", batch_size},
          {"eval_interval", eval_interval},
          {"eval_examples", eval_examples},
          {"seed", seed},
          {"kl_direction", kl_direction == ops::KlDirection::TeacherStudent ? "teacher_student" : "student_teacher"}};
}

DistillConfig DistillConfig::from_json(const nlohmann::json& j) {
  DistillConfig c;
  c.alpha_ce = j.value("alpha_ce", c.alpha_ce);
  c.alpha_kl = j.value("alpha_kl", c.alpha_kl);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.eps = j.value("eps", c.eps);
  c.warmup_fraction = j.value("warmup_fraction", c.warmup_fraction);
  c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
  c.total_steps = j.value("total_steps", c.total_steps);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.eval_interval = j.value("eval_interval", c.eval_interval);
  c.eval_examples = j.value("eval_examples", c.eval_examples);
  c.seed = j.value("seed", c.seed);
  const std::string dir = j.value("kl_direction", std::string("teacher_student"));
  if (dir == "teacher_student")
    c.kl_direction = ops::KlDirection::TeacherStudent;
  else if (dir == "student_teacher")
    c.kl_direction = ops::KlDirection::StudentTeacher;
  else
    throw ConfigError("kl_direction must be teacher_student or student_teacher, got '" + dir + "'");
  c.validate();
  return c;
}

std::vector<std::size_t> make_copy_plan(std::size_t teacher_depth, std::size_t student_depth) {
  if (student_depth == 0 || teacher_depth == 0) throw ConfigError("copy plan: depths must be positive");
  if (teacher_depth % student_depth != 0)
    throw ConfigError("copy plan: teacher depth " + std::to_string(teacher_depth) + " is not a multiple of student depth " +
                      std::to_string(student_depth));
  const std::size_t stride = teacher_depth / student_depth;
  std::vector<std::size_t> idx(student_depth);
  for (std::size_t i = 0; i < student_depth; ++i) idx[i] = i * stride;
  return idx;
}

std::vector<std::size_t> make_decoder_plan(std::size_t teacher_depth) {
  if (teacher_depth < 2) throw ConfigError("decoder plan: teacher needs at least two layers");
  return {0, teacher_depth - 1};
}

std::vector<std::size_t> make_spread_plan(std::size_t teacher_depth, std::size_t student_depth) {
  if (student_depth == 0 || student_depth > teacher_depth)
    throw ConfigError("copy plan: student depth must lie in [1, teacher depth]");
  std::vector<std::size_t> idx(student_depth);
  for (std::size_t i = 0; i < student_depth; ++i) idx[i] = i * teacher_depth / student_depth;
  return idx;
}

CopyPlan plan_for(const ModelConfig& teacher, const ModelConfig& student, bool allow_spread) {
  CopyPlan plan;
  if (allow_spread && teacher.enc_layers % student.enc_layers != 0)
    plan.encoder = make_spread_plan(teacher.enc_layers, student.enc_layers);
  else
    plan.encoder = make_copy_plan(teacher.enc_layers, student.enc_layers);
  if (student.dec_layers == teacher.dec_layers) {
    plan.decoder.resize(teacher.dec_layers);
    std::iota(plan.decoder.begin(), plan.decoder.end(), std::size_t{0});
  } else if (student.dec_layers == 2) {
    plan.decoder = make_decoder_plan(teacher.dec_layers);
  } else {
    throw ConfigError("decoder plan: student decoder must have 2 layers or match the teacher");
  }
  return plan;
}

namespace {

void copy_tensor(Tensor& dst, const Tensor& src) {
  if (dst.shape() != src.shape())
    throw DimensionError("init_student: shape " + shape_str(dst.shape()) + " vs " + shape_str(src.shape()));
  std::copy(src.data().begin(), src.data().end(), dst.data().begin());
}

void copy_linear(Linear<float>& dst, const Linear<float>& src) {
  copy_tensor(dst.weight, src.weight);
  copy_tensor(dst.bias, src.bias);
}

void copy_norm(LayerNorm<float>& dst, const LayerNorm<float>& src) {
  copy_tensor(dst.gamma, src.gamma);
  copy_tensor(dst.beta, src.beta);
}

void copy_attention(AttentionBlock<float>& dst, const AttentionBlock<float>& src) {
  copy_linear(dst.q_proj, src.q_proj);
  copy_linear(dst.k_proj, src.k_proj);
  copy_linear(dst.v_proj, src.v_proj);
  copy_linear(dst.out_proj, src.out_proj);
  if (dst.gate && src.gate) copy_linear(*dst.gate, *src.gate);
}

void copy_ffn(FeedForward<float>& dst, const FeedForward<float>& src) {
  copy_linear(dst.fc1, src.fc1);
  copy_linear(dst.fc2, src.fc2);
}

void check_plan(const std::vector<std::size_t>& idx, std::size_t teacher_depth, std::size_t student_depth,
                const char* what) {
  if (idx.size() != student_depth)
    throw ConfigError(std::string(what) + " plan has " + std::to_string(idx.size()) + " entries for " +
                      std::to_string(student_depth) + " student layers");
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= teacher_depth) throw ConfigError(std::string(what) + " plan index out of range");
    if (i > 0 && idx[i] <= idx[i - 1]) throw ConfigError(std::string(what) + " plan must be strictly increasing");
  }
}

}  // namespace

EncoderDecoder init_student(const EncoderDecoder& teacher, const ModelConfig& student_config, const CopyPlan& plan,
                            std::uint64_t seed) {
  const ModelConfig& tc = teacher.config();
  if (tc.model_dim != student_config.model_dim || tc.n_heads != student_config.n_heads ||
      tc.ffn_dim != student_config.ffn_dim || tc.vocab_size != student_config.vocab_size ||
      tc.feature_dim != student_config.feature_dim)
    throw DimensionError("init_student: student widths must match the teacher");
  check_plan(plan.encoder, tc.enc_layers, student_config.enc_layers, "encoder");
  check_plan(plan.decoder, tc.dec_layers, student_config.dec_layers, "decoder");

  EncoderDecoder student(student_config, seed);
  copy_linear(student.frontend, teacher.frontend);
  copy_norm(student.encoder_norm, teacher.encoder_norm);
  copy_tensor(student.embed_tokens, teacher.embed_tokens);
  copy_norm(student.decoder_norm, teacher.decoder_norm);
  for (std::size_t i = 0; i < plan.encoder.size(); ++i) {
    auto& d = student.encoder_layers[i];
    const auto& s = teacher.encoder_layers[plan.encoder[i]];
    copy_norm(d.attn_norm, s.attn_norm);
    copy_attention(d.self_attn, s.self_attn);
    copy_norm(d.ffn_norm, s.ffn_norm);
    copy_ffn(d.ffn, s.ffn);
  }
  for (std::size_t i = 0; i < plan.decoder.size(); ++i) {
    auto& d = student.decoder_layers[i];
    const auto& s = teacher.decoder_layers[plan.decoder[i]];
    copy_norm(d.self_attn_norm, s.self_attn_norm);
    copy_attention(d.self_attn, s.self_attn);
    copy_norm(d.cross_attn_norm, s.cross_attn_norm);
    copy_attention(d.cross_attn, s.cross_attn);
    copy_norm(d.ffn_norm, s.ffn_norm);
    copy_ffn(d.ffn, s.ffn);
  }
  return student;
}

template <typename T>
KdLoss<T> kd_loss(const BasicTensor<T>& student_logits, const BasicTensor<T>& teacher_logits,
                  std::span<const int> targets, const DistillConfig& cfg) {
  if (student_logits.rank() != 2 || student_logits.dim(0) != targets.size())
    throw DimensionError("kd_loss: logits " + shape_str(student_logits.shape()) + " vs " +
                         std::to_string(targets.size()) + " targets");
  KdLoss<T> out;
  out.ce = ops::cross_entropy(student_logits, targets, kPadId);
  BasicTensor<T> total = ops::scale(out.ce, static_cast<T>(cfg.alpha_ce));
  if (teacher_logits.defined() && cfg.alpha_kl > 0.0) {
    if (teacher_logits.shape() != student_logits.shape())
      throw DimensionError("kd_loss: teacher logits " + shape_str(teacher_logits.shape()) + " vs student " +
                           shape_str(student_logits.shape()));
    std::unique_ptr<bool[]> mask(new bool[targets.size()]);
    for (std::size_t i = 0; i < targets.size(); ++i) mask[i] = targets[i] != kPadId;
    out.kl = ops::kl_divergence(student_logits, teacher_logits, cfg.kl_direction,
                                std::span<const bool>(mask.get(), targets.size()));
    total = ops::add(total, ops::scale(out.kl, static_cast<T>(cfg.alpha_kl)));
  } else {
    out.kl = BasicTensor<T>::scalar(T(0));
  }
  out.total = total;
  return out;
}

template KdLoss<float> kd_loss(const Tensor&, const Tensor&, std::span<const int>, const DistillConfig&);
template KdLoss<double> kd_loss(const TensorD&, const TensorD&, std::span<const int>, const DistillConfig&);

double lr_schedule(std::size_t step, std::size_t warmup, std::size_t total) {
  if (total == 0 || step >= total) return 0.0;
  if (step < warmup) return static_cast<double>(step) / static_cast<double>(warmup);
  return static_cast<double>(total - step) / static_cast<double>(total - warmup);
}

void adamw_update(std::span<float> param, std::span<const float> grad, std::span<double> m, std::span<double> v,
                  const AdamWHyper& h, std::size_t t, double lr, bool decay) {
  const double bc1 = 1.0 - std::pow(h.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(h.beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < param.size(); ++i) {
    double p = param[i];
    if (decay) p -= lr * h.weight_decay * p;
    const double g = grad[i];
    m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g;
    v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g * g;
    const double m_hat = m[i] / bc1, v_hat = v[i] / bc2;
    p -= lr * m_hat / (std::sqrt(v_hat) + h.eps);
    param[i] = static_cast<float>(p);
  }
}

AdamW::AdamW(ParamList<float> params, const AdamWHyper& hyper) : params_(std::move(params)), hyper_(hyper) {
  for (const auto& p : params_) {
    m_.emplace_back(p.tensor.numel(), 0.0);
    v_.emplace_back(p.tensor.numel(), 0.0);
  }
}

void AdamW::step(double lr) {
  ++t_;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    if (!p.tensor.has_grad()) continue;
    adamw_update(p.tensor.data(), p.tensor.grad(), m_[i], v_[i], hyper_, t_, lr, p.weight_decay);
    p.tensor.zero_grad();
  }
}

double evaluate_ter(const EncoderDecoder& model, std::span<const Example> examples, std::size_t batch_size,
                    SiteHook<float>* hook) {
  std::vector<std::vector<int>> refs, hyps;
  for (std::size_t start = 0; start < examples.size(); start += batch_size) {
    const std::size_t end = std::min(examples.size(), start + batch_size);
    std::vector<Tensor> feats;
    for (std::size_t i = start; i < end; ++i) {
      feats.push_back(examples[i].features);
      refs.push_back(transcript(examples[i]));
    }
    auto out = model.greedy_decode_batch(feats, model.config().max_target_len, kEosId, hook);
    for (auto& h : out) hyps.push_back(std::move(h));
  }
  return corpus_wer(refs, hyps);
}

namespace {

std::string fmt_double(double x) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, res.ptr);
}

}  // namespace

DistillResult distill(const EncoderDecoder* teacher, EncoderDecoder& student, std::span<const Example> train,
                      std::span<const Example> validation, const DistillConfig& cfg, const std::string& checkpoint_dir) {
  cfg.validate();
  if (train.empty()) throw DataError("distill: empty training set");
  if (validation.empty()) throw DataError("distill: empty validation set");
  const std::span<const Example> val =
      cfg.eval_examples > 0 ? validation.first(std::min(cfg.eval_examples, validation.size())) : validation;
  if (!checkpoint_dir.empty()) std::filesystem::create_directories(checkpoint_dir);

  const std::size_t warmup = cfg.resolved_warmup();
  AdamW optimizer(student.parameters(), AdamWHyper{cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay});
  Rng rng(cfg.seed);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  std::size_t cursor = 0;

  DistillResult result;
  result.best_val_ter = std::numeric_limits<double>::infinity();
  EncoderDecoder best = student.clone();
  std::vector<Example> batch_examples;

  for (std::size_t step = 0; step < cfg.total_steps; ++step) {
    batch_examples.clear();
    while (batch_examples.size() < cfg.batch_size) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      batch_examples.push_back(train[order[cursor++]]);
    }
    const Batch batch = make_batch(batch_examples);
    const double lr = cfg.learning_rate * lr_schedule(step, warmup, cfg.total_steps);

    Tensor teacher_logits;
    if (teacher && cfg.alpha_kl > 0.0) {
      NoGradScope no_grad;
      teacher_logits = teacher->forward(batch);
    }
    Tape tape;
    TrainLogRow row;
    {
      TapeScope scope(tape);
      const Tensor logits = student.forward(batch);
      const KdLoss<float> loss = kd_loss(logits, teacher_logits, batch.decoder_target, cfg);
      row.loss = loss.total.item();
      row.ce = loss.ce.item();
      row.kl = loss.kl.item();
      if (!std::isfinite(row.loss))
        throw NumericalError("non-finite training loss at step " + std::to_string(step + 1) + " (ce " +
                             fmt_double(row.ce) + ", kl " + fmt_double(row.kl) + ")");
      tape.backward(loss.total);
    }
    optimizer.step(lr);
    row.step = step + 1;
    row.lr = lr;

    if (row.step % cfg.eval_interval == 0 || row.step == cfg.total_steps) {
      row.val_ter = evaluate_ter(student, val);
      spdlog::debug("step {} loss {:.4f} val_ter {:.4f}", row.step, row.loss, row.val_ter);
      if (row.val_ter < result.best_val_ter) {
        result.best_val_ter = row.val_ter;
        result.best_step = row.step;
        best = student.clone();
        if (!checkpoint_dir.empty()) {
          char name[32];
          std::snprintf(name, sizeof name, "step-%07zu.ckpt", row.step);
          row.checkpoint_path = (std::filesystem::path(checkpoint_dir) / name).string();
          save_checkpoint(student, row.checkpoint_path,
                          {{"step", row.step}, {"val_ter", row.val_ter}, {"distill", cfg.to_json()}});
          result.best_checkpoint = row.checkpoint_path;
        }
      }
    }
    result.log.push_back(std::move(row));
  }
  student = std::move(best);
  return result;
}

std::string training_log_csv(const std::vector<TrainLogRow>& log) {
  std::string out = "step,lr,loss,ce_term,kl_term,val_ter,checkpoint_path\n";
  for (const auto& r : log) {
    // Relative to the log's directory, so logs do not depend on where a run was placed.
    const std::filesystem::path ckpt(r.checkpoint_path);
    const std::string rel = ckpt.empty() ? std::string() : (ckpt.parent_path().filename() / ckpt.filename()).string();
    out += std::to_string(r.step) + ',' + fmt_double(r.lr) + ',' + fmt_double(r.loss) + ',' + fmt_double(r.ce) + ',' +
           fmt_double(r.kl) + ',' + (r.val_ter < 0.0 ? std::string() : fmt_double(r.val_ter)) + ',' +
           rel + '\n';
  }
  return out;
}

}  // namespace qgate
