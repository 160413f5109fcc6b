#pragma once

// Finite-difference cases for every differentiable op, the gated attention
// path and the distillation loss. Each case builds random small shapes from
// its seed and returns the worst relative gradient error.

#include <functional>
#include <random>
#include <string>
#include <vector>

#include "qgate/attention.hpp"
#include "qgate/distill.hpp"
#include "qgate/layers.hpp"
#include "qgate/ops.hpp"
#include "support.hpp"

namespace qgate::testing {

struct GradCase {
  std::string name;
  std::function<GradCheckResult(std::uint64_t seed)> run;
};

inline std::size_t pick(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

inline std::vector<double> random_weights(std::size_t n, std::mt19937_64& rng) {
  std::normal_distribution<double> d(0.0, 1.0);
  std::vector<double> w(n);
  for (auto& v : w) v = d(rng);
  return w;
}

inline SequenceLayout random_layout(std::mt19937_64& rng, std::size_t segments, std::size_t max_len) {
  std::vector<std::size_t> lengths;
  for (std::size_t s = 0; s < segments; ++s) lengths.push_back(pick(rng, 1, max_len));
  return SequenceLayout(lengths);
}

/// Checks d(project(f(inputs)))/d(inputs) for a tensor-valued f.
inline GradCheckResult check_projected(std::mt19937_64& rng, const std::vector<TensorD>& inputs,
                                       const std::function<TensorD()>& f) {
  TensorD probe;
  {
    NoGradScope ng;
    probe = f();
  }
  const auto w = random_weights(probe.numel(), rng);
  return grad_check([&] { return project(f(), w); }, inputs);
}

inline std::vector<GradCase> gradient_cases() {
  std::vector<GradCase> cases;
  auto add_case = [&](std::string name, std::function<GradCheckResult(std::mt19937_64&)> body) {
    cases.push_back({std::move(name), [body](std::uint64_t seed) {
                       std::mt19937_64 rng(seed * 7919 + 17);
                       return body(rng);
                     }});
  };

  add_case("matmul", [](std::mt19937_64& rng) {
    const std::size_t m = pick(rng, 1, 5), k = pick(rng, 1, 5), n = pick(rng, 1, 5);
    auto a = random_tensor({m, k}, rng), b = random_tensor({k, n}, rng);
    return check_projected(rng, {a, b}, [&] { return ops::matmul(a, b); });
  });
  add_case("linear", [](std::mt19937_64& rng) {
    const std::size_t m = pick(rng, 1, 5), in = pick(rng, 1, 5), out = pick(rng, 1, 5);
    auto x = random_tensor({m, in}, rng), w = random_tensor({out, in}, rng), b = random_tensor({out}, rng);
    return check_projected(rng, {x, w, b}, [&] { return ops::linear(x, w, b); });
  });
  add_case("linear_no_bias", [](std::mt19937_64& rng) {
    const std::size_t m = pick(rng, 1, 5), in = pick(rng, 1, 5), out = pick(rng, 1, 5);
    auto x = random_tensor({m, in}, rng), w = random_tensor({out, in}, rng);
    return check_projected(rng, {x, w}, [&] { return ops::linear(x, w, TensorD()); });
  });
  add_case("add", [](std::mt19937_64& rng) {
    const Shape s{pick(rng, 1, 4), pick(rng, 1, 4)};
    auto a = random_tensor(s, rng), b = random_tensor(s, rng);
    return check_projected(rng, {a, b}, [&] { return ops::add(a, b); });
  });
  add_case("mul", [](std::mt19937_64& rng) {
    const Shape s{pick(rng, 1, 4), pick(rng, 1, 4)};
    auto a = random_tensor(s, rng), b = random_tensor(s, rng);
    return check_projected(rng, {a, b}, [&] { return ops::mul(a, b); });
  });
  add_case("scale", [](std::mt19937_64& rng) {
    auto a = random_tensor({pick(rng, 1, 4), pick(rng, 1, 4)}, rng);
    const double f = std::normal_distribution<double>(0.0, 2.0)(rng);
    return check_projected(rng, {a}, [&] { return ops::scale(a, f); });
  });
  add_case("sigmoid", [](std::mt19937_64& rng) {
    auto a = random_tensor({pick(rng, 1, 4), pick(rng, 1, 6)}, rng, 3.0);
    return check_projected(rng, {a}, [&] { return ops::sigmoid(a); });
  });
  add_case("gelu", [](std::mt19937_64& rng) {
    auto a = random_tensor({pick(rng, 1, 4), pick(rng, 1, 6)}, rng, 2.0);
    return check_projected(rng, {a}, [&] { return ops::gelu(a); });
  });
  add_case("softmax", [](std::mt19937_64& rng) {
    const std::size_t rank = pick(rng, 1, 3);
    Shape s;
    for (std::size_t r = 0; r < rank; ++r) s.push_back(pick(rng, 1, 4));
    const std::size_t axis = pick(rng, 0, rank - 1);
    auto a = random_tensor(s, rng, 2.0);
    return check_projected(rng, {a}, [&] { return ops::softmax(a, axis); });
  });
  add_case("layer_norm", [](std::mt19937_64& rng) {
    const std::size_t m = pick(rng, 1, 4), d = pick(rng, 2, 6);
    auto x = random_tensor({m, d}, rng), g = random_tensor({d}, rng), b = random_tensor({d}, rng);
    return check_projected(rng, {x, g, b}, [&] { return ops::layer_norm(x, g, b, 1e-5); });
  });
  add_case("embedding_lookup", [](std::mt19937_64& rng) {
    const std::size_t v = pick(rng, 2, 6), d = pick(rng, 1, 4), n = pick(rng, 1, 6);
    auto table = random_tensor({v, d}, rng);
    std::vector<int> ids(n);
    for (auto& id : ids) id = static_cast<int>(pick(rng, 0, v - 1));
    return check_projected(rng, {table}, [&] { return ops::embedding_lookup(table, ids); });
  });
  add_case("cross_entropy", [](std::mt19937_64& rng) {
    const std::size_t n = pick(rng, 2, 6), v = pick(rng, 2, 6);
    auto logits = random_tensor({n, v}, rng, 2.0);
    std::vector<int> targets(n);
    for (auto& t : targets) t = static_cast<int>(pick(rng, 0, v - 1));
    targets[0] = static_cast<int>(v - 1);  // keep at least one scored row
    if (n > 2) targets[1] = -1;            // and one ignored row
    return grad_check([&] { return ops::cross_entropy(logits, targets, -1); }, {logits});
  });
  for (auto dir : {ops::KlDirection::TeacherStudent, ops::KlDirection::StudentTeacher}) {
    add_case(dir == ops::KlDirection::TeacherStudent ? "kl_teacher_student" : "kl_student_teacher",
             [dir](std::mt19937_64& rng) {
               const std::size_t n = pick(rng, 1, 5), v = pick(rng, 2, 6);
               auto s = random_tensor({n, v}, rng, 2.0);
               auto t = random_tensor({n, v}, rng, 2.0, false);
               std::unique_ptr<bool[]> mask(new bool[n]);
               for (std::size_t i = 0; i < n; ++i) mask[i] = i == 0 || pick(rng, 0, 3) > 0;
               const std::span<const bool> m(mask.get(), n);
               return grad_check([&] { return ops::kl_divergence(s, t, dir, m); }, {s});
             });
  }
  add_case("attention_probs_context", [](std::mt19937_64& rng) {
    const std::size_t heads = pick(rng, 1, 2), hd = pick(rng, 1, 3), d = heads * hd;
    const std::size_t segs = pick(rng, 1, 2);
    const bool causal = pick(rng, 0, 1) == 1;
    const SequenceLayout ql = random_layout(rng, segs, 3);
    const SequenceLayout kl = causal ? ql : random_layout(rng, segs, 3);
    auto q = random_tensor({ql.total, d}, rng), k = random_tensor({kl.total, d}, rng),
         v = random_tensor({kl.total, d}, rng);
    return check_projected(rng, {q, k, v}, [&] {
      auto p = ops::attention_probs(q, k, heads, ql, kl, causal);
      return ops::attention_context(p, v, heads, ql, kl);
    });
  });
  add_case("gated_self_attention", [](std::mt19937_64& rng) {
    AttentionConfig cfg{pick(rng, 1, 2), pick(rng, 1, 3), true, pick(rng, 0, 1) == 1};
    Rng init(rng());
    // A small gate bias keeps σ away from saturation so the gate path carries gradient.
    AttentionBlock<double> block("blk", cfg, init, 0.5);
    const SequenceLayout layout = random_layout(rng, pick(rng, 1, 2), 3);
    auto x = random_tensor({layout.total, cfg.model_dim()}, rng);
    ParamList<double> params;
    block.collect(params);
    std::vector<TensorD> inputs{x};
    // The key bias shifts every score of a query equally, so its exact gradient is zero
    // and a relative error is undefined; a separate test covers it.
    for (auto& p : params)
      if (!p.name.ends_with("k_proj.bias")) inputs.push_back(p.tensor);
    return check_projected(rng, inputs, [&] { return block.gated_attention(x, layout); });
  });
  add_case("gated_cross_attention", [](std::mt19937_64& rng) {
    AttentionConfig cfg{pick(rng, 1, 2), pick(rng, 1, 3), true, false};
    Rng init(rng());
    AttentionBlock<double> block("blk", cfg, init, -0.5);
    const SequenceLayout xl = random_layout(rng, 2, 3), ml = random_layout(rng, 2, 3);
    auto x = random_tensor({xl.total, cfg.model_dim()}, rng), mem = random_tensor({ml.total, cfg.model_dim()}, rng);
    ParamList<double> params;
    block.collect(params);
    std::vector<TensorD> inputs{x, mem};
    for (auto& p : params)
      if (!p.name.ends_with("k_proj.bias")) inputs.push_back(p.tensor);
    return check_projected(rng, inputs, [&] { return block.cross_attention(x, xl, mem, ml); });
  });
  add_case("feed_forward", [](std::mt19937_64& rng) {
    const std::size_t d = pick(rng, 1, 4), f = pick(rng, 1, 6);
    Rng init(rng());
    FeedForward<double> ffn("ffn", d, f, init);
    auto x = random_tensor({pick(rng, 1, 3), d}, rng);
    ParamList<double> params;
    ffn.collect(params);
    std::vector<TensorD> inputs{x};
    for (auto& p : params) inputs.push_back(p.tensor);
    return check_projected(rng, inputs, [&] { return ffn.forward(x); });
  });
  add_case("kd_loss", [](std::mt19937_64& rng) {
    const std::size_t n = pick(rng, 2, 6), v = pick(rng, 2, 6);
    auto s = random_tensor({n, v}, rng, 2.0);
    auto t = random_tensor({n, v}, rng, 2.0, false);
    std::vector<int> targets(n);
    for (auto& id : targets) id = static_cast<int>(pick(rng, 0, v - 1));
    targets[0] = static_cast<int>(v - 1);
    DistillConfig cfg;
    cfg.alpha_kl = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    return grad_check([&] { return kd_loss(s, t, targets, cfg).total; }, {s});
  });
  return cases;
}

}  // namespace qgate::testing
