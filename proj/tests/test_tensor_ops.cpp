#include <cmath>
#include <random>

#include "doctest.h"
#include "grad_suite.hpp"
#include "qgate/attention.hpp"
#include "qgate/errors.hpp"
#include "qgate/ops.hpp"
#include "support.hpp"

using namespace qgate;
using namespace qgate::testing;

TEST_CASE("every differentiable op matches central differences over 100 seeds") {
  for (const auto& c : gradient_cases()) {
    double worst = 0.0;
    std::uint64_t worst_seed = 0;
    std::string worst_input;
    for (std::uint64_t seed = 1; seed <= 100; ++seed) {
      const GradCheckResult r = c.run(seed);
      if (r.max_rel_error > worst) {
        worst = r.max_rel_error;
        worst_seed = seed;
        worst_input = r.worst;
      }
    }
    INFO(c.name << " worst seed " << worst_seed << " at " << worst_input);
    CHECK(worst < 1e-4);
  }
}

namespace {

// Direct triple-loop reference for one segment pair and one head.
std::vector<double> naive_attention(const TensorD& q, const TensorD& k, const TensorD& v, std::size_t heads,
                                    std::size_t q0, std::size_t tq, std::size_t k0, std::size_t tk, std::size_t h,
                                    bool causal) {
  const std::size_t d = q.dim(1), hd = d / heads;
  std::vector<double> out(tq * hd, 0.0);
  for (std::size_t i = 0; i < tq; ++i) {
    std::vector<double> s(tk);
    double mx = -1e300;
    for (std::size_t j = 0; j < tk; ++j) {
      double dot = 0.0;
      for (std::size_t c = 0; c < hd; ++c) dot += q.data()[(q0 + i) * d + h * hd + c] * k.data()[(k0 + j) * d + h * hd + c];
      s[j] = dot / std::sqrt(static_cast<double>(hd));
      if (causal && j > i) s[j] = -INFINITY;
      mx = std::max(mx, s[j]);
    }
    double z = 0.0;
    for (auto& x : s) z += (x = std::exp(x - mx));
    for (std::size_t j = 0; j < tk; ++j)
      for (std::size_t c = 0; c < hd; ++c) out[i * hd + c] += s[j] / z * v.data()[(k0 + j) * d + h * hd + c];
  }
  return out;
}

}  // namespace

TEST_CASE("packed attention matches a per-segment loop reference") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t heads = 1 + trial % 3, hd = 2 + trial % 2, d = heads * hd;
    const bool causal = trial % 2 == 0;
    const SequenceLayout ql({3, 1, 4});
    const SequenceLayout kl = causal ? ql : SequenceLayout({2, 5, 1});
    auto q = random_tensor({ql.total, d}, rng, 1.0, false), k = random_tensor({kl.total, d}, rng, 1.0, false),
         v = random_tensor({kl.total, d}, rng, 1.0, false);
    const TensorD probs = ops::attention_probs(q, k, heads, ql, kl, causal);
    const TensorD ctx = ops::attention_context(probs, v, heads, ql, kl);
    for (std::size_t s = 0; s < ql.size(); ++s) {
      for (std::size_t h = 0; h < heads; ++h) {
        const auto ref = naive_attention(q, k, v, heads, ql.offsets[s], ql.lengths[s], kl.offsets[s], kl.lengths[s],
                                         h, causal);
        for (std::size_t i = 0; i < ql.lengths[s]; ++i)
          for (std::size_t c = 0; c < hd; ++c)
            CHECK(ctx.data()[(ql.offsets[s] + i) * d + h * hd + c] == doctest::Approx(ref[i * hd + c]).epsilon(1e-12));
        const std::size_t off = ops::attention_block_offset(ql, kl, heads, s, h);
        for (std::size_t i = 0; i < ql.lengths[s]; ++i) {
          double row = 0.0;
          for (std::size_t j = 0; j < kl.lengths[s]; ++j) {
            const double p = probs.data()[off + i * kl.lengths[s] + j];
            if (causal && j > i) CHECK(p == 0.0);
            row += p;
          }
          CHECK(row == doctest::Approx(1.0).epsilon(1e-12));
        }
      }
    }
  }
}

TEST_CASE("tape accumulates gradients of reused tensors and replays in reverse") {
  TensorD x({2}, {3.0, -2.0}, true);
  Tape tape;
  {
    TapeScope scope(tape);
    // y = sum(x*x + x) with x used three times.
    auto y = ops::add(ops::mul(x, x), x);
    tape.backward(project(y, {1.0, 1.0}));
  }
  CHECK(x.grad()[0] == doctest::Approx(7.0));
  CHECK(x.grad()[1] == doctest::Approx(-3.0));
}

TEST_CASE("no tape, no recording") {
  TensorD x({2}, {1.0, 2.0}, true);
  auto y = ops::sigmoid(x);
  CHECK(active_tape() == nullptr);
  Tape tape;
  {
    TapeScope scope(tape);
    {
      NoGradScope ng;
      CHECK(active_tape() == nullptr);
      ops::sigmoid(x);
    }
    CHECK(active_tape() == &tape);
    CHECK(tape.size() == 0);
    ops::sigmoid(x);
    CHECK(tape.size() == 1);
  }
  CHECK(y.numel() == 2);
}

TEST_CASE("backward requires a scalar root") {
  Tape tape;
  TensorD x({3}, true);
  CHECK_THROWS_AS(tape.backward(x), std::invalid_argument);
}

TEST_CASE("tensor handles alias storage and clone copies") {
  Tensor a({2, 2}, {1, 2, 3, 4});
  Tensor b = a;
  b.data()[0] = 9;
  CHECK(a.data()[0] == 9);
  Tensor c = a.clone();
  c.data()[1] = -1;
  CHECK(a.data()[1] == 2);
  CHECK_FALSE(c.same_storage(a));
}

TEST_CASE("shape mismatches are rejected") {
  Tensor a({2, 3}), b({2, 2});
  CHECK_THROWS_AS(ops::matmul(a, a), DimensionError);
  CHECK_THROWS_AS(ops::add(a, b), DimensionError);
  CHECK_THROWS_AS(Tensor({2, 2}, std::vector<float>{1, 2, 3}), DimensionError);
}

TEST_CASE("float and double ops agree") {
  std::mt19937_64 rng(9);
  auto xd = random_tensor({4, 6}, rng, 1.0, false);
  Tensor xf({4, 6});
  for (std::size_t i = 0; i < xd.numel(); ++i) xf.data()[i] = static_cast<float>(xd.data()[i]);
  const auto yd = ops::softmax(ops::gelu(xd), 1);
  const auto yf = ops::softmax(ops::gelu(xf), 1);
  for (std::size_t i = 0; i < yd.numel(); ++i) CHECK(yf.data()[i] == doctest::Approx(yd.data()[i]).epsilon(1e-5));
}

TEST_CASE("op hand cases") {
  SUBCASE("matmul identities") {
    const Tensor i2({2, 2}, {1, 0, 0, 1});
    const Tensor a({2, 2}, {1, 2, 3, 4});
    const Tensor ii = ops::matmul(i2, i2);
    CHECK(std::vector<float>(ii.data().begin(), ii.data().end()) == std::vector<float>{1, 0, 0, 1});
    const Tensor ai = ops::matmul(a, i2);
    CHECK(std::vector<float>(ai.data().begin(), ai.data().end()) == std::vector<float>{1, 2, 3, 4});
  }
  SUBCASE("softmax") {
    const Tensor u = ops::softmax(Tensor({3}, {0, 0, 0}), 0);
    for (float v : u.data()) CHECK(v == doctest::Approx(1.0 / 3));
    const Tensor big = ops::softmax(Tensor({2}, {1000, 0}), 0);
    CHECK(std::isfinite(big.data()[0]));
    CHECK(big.data()[0] == doctest::Approx(1.0));
    CHECK(big.data()[1] == doctest::Approx(0.0));
  }
  SUBCASE("layer norm") {
    const Tensor g = Tensor::full({3}, 1.0f), b({3});
    const Tensor c = ops::layer_norm(Tensor({1, 3}, {5, 5, 5}), g, b, 1e-5);
    for (float v : c.data()) CHECK(v == 0.0f);
    const TensorD y = ops::layer_norm(TensorD({1, 3}, {1, 2, 3}), TensorD::full({3}, 1.0), TensorD({3}), 0.0);
    CHECK(y.data()[0] == doctest::Approx(-std::sqrt(1.5)).epsilon(1e-12));
    CHECK(y.data()[1] == doctest::Approx(0.0).scale(1.0));
    CHECK(y.data()[2] == doctest::Approx(std::sqrt(1.5)).epsilon(1e-12));
  }
  SUBCASE("activations") {
    const TensorD s = ops::sigmoid(TensorD({2}, {0.0, 20.0}));
    CHECK(s.data()[0] == 0.5);
    CHECK(1.0 - s.data()[1] == doctest::Approx(std::exp(-20.0) / (1.0 + std::exp(-20.0))).epsilon(1e-6));
    CHECK(ops::gelu(Tensor({1}, std::vector<float>{0.0f})).item() == 0.0f);
  }
  SUBCASE("cross entropy") {
    const Tensor uniform({3, 4});
    const std::vector<int> t{0, 1, 3};
    CHECK(ops::cross_entropy(uniform, t).item() == doctest::Approx(std::log(4.0)).epsilon(1e-6));
    const Tensor peaked({2, 3}, {30, 0, 0, 0, 0, 30});
    const std::vector<int> t2{0, 2};
    CHECK(ops::cross_entropy(peaked, t2).item() < 1e-9);
  }
  SUBCASE("cross entropy matches a direct log-softmax") {
    std::mt19937_64 rng(3);
    auto x = random_tensor({5, 7}, rng, 3.0, false);
    const std::vector<int> t{0, 6, 3, 3, 1};
    double ref = 0.0;
    for (std::size_t i = 0; i < 5; ++i) {
      double z = 0.0;
      for (std::size_t j = 0; j < 7; ++j) z += std::exp(x.data()[i * 7 + j]);
      ref += std::log(z) - x.data()[i * 7 + static_cast<std::size_t>(t[i])];
    }
    CHECK(std::abs(ops::cross_entropy(x, t).item() - ref / 5) < 1e-6);
  }
  SUBCASE("KL divergence") {
    const TensorD same({2, 3}, {1, 2, 3, -1, 0, 4});
    CHECK(std::abs(ops::kl_divergence(same, same).item()) < 1e-12);
    // T = [1, 0] as the limit of a very peaked logit pair, S uniform.
    const TensorD t({1, 2}, {60.0, 0.0}), s({1, 2});
    CHECK(ops::kl_divergence(s, t).item() == doctest::Approx(std::log(2.0)).epsilon(1e-9));
    std::mt19937_64 rng(4);
    for (int i = 0; i < 1000; ++i) {
      auto a = random_tensor({1, 5}, rng, 2.0, false), b = random_tensor({1, 5}, rng, 2.0, false);
      CHECK(ops::kl_divergence(a, b).item() >= 0.0);
      CHECK(ops::kl_divergence(a, b, ops::KlDirection::StudentTeacher).item() >= 0.0);
    }
  }
}

TEST_CASE("key bias receives no gradient") {
  std::mt19937_64 rng(21);
  Rng init(4);
  AttentionBlock<double> block("blk", AttentionConfig{2, 3, true, false}, init, 0.5);
  const SequenceLayout layout({4, 2});
  const TensorD x = random_tensor({layout.total, 6}, rng);
  const std::vector<double> w = [&] {
    std::vector<double> v(layout.total * 6);
    for (auto& e : v) e = std::normal_distribution<double>()(rng);
    return v;
  }();
  Tape tape;
  {
    TapeScope scope(tape);
    tape.backward(project(block.gated_attention(x, layout), w));
  }
  double kb = 0.0, qb = 0.0;
  for (double g : block.k_proj.bias.grad()) kb = std::max(kb, std::abs(g));
  for (double g : block.q_proj.bias.grad()) qb = std::max(qb, std::abs(g));
  CHECK(kb < 1e-12);
  CHECK(qb > 1e-6);
}

TEST_CASE("attention hand cases") {
  std::mt19937_64 rng(6);
  Rng init(2);
  AttentionBlock<double> blk("a", AttentionConfig{2, 3, false, false}, init);
  SUBCASE("single token reduces to the value path") {
    const TensorD x = random_tensor({1, 6}, rng, 1.0, false);
    const TensorD y = blk.self_attention(x, SequenceLayout::single(1));
    const TensorD ref = blk.out_proj(blk.v_proj(x));
    for (std::size_t i = 0; i < 6; ++i) CHECK(y.data()[i] == doctest::Approx(ref.data()[i]).epsilon(1e-12));
  }
  SUBCASE("zero values leave only the output bias") {
    std::fill(blk.v_proj.weight.data().begin(), blk.v_proj.weight.data().end(), 0.0);
    std::fill(blk.out_proj.bias.data().begin(), blk.out_proj.bias.data().end(), 0.25);
    const TensorD y = blk.self_attention(random_tensor({4, 6}, rng, 1.0, false), SequenceLayout::single(4));
    for (double v : y.data()) CHECK(v == doctest::Approx(0.25).epsilon(1e-12));
  }
  SUBCASE("memory of length one and identical memory tokens") {
    const TensorD x = random_tensor({3, 6}, rng, 1.0, false);
    const TensorD k1 = random_tensor({1, 6}, rng, 1.0, false);
    const TensorD p1 = ops::attention_probs(x, k1, 2, SequenceLayout::single(3), SequenceLayout::single(1), false);
    for (double p : p1.data()) CHECK(p == 1.0);
    TensorD same({4, 6});
    for (std::size_t r = 0; r < 4; ++r)
      for (std::size_t c = 0; c < 6; ++c) same.data()[r * 6 + c] = k1.data()[c];
    const TensorD p4 = ops::attention_probs(x, same, 2, SequenceLayout::single(3), SequenceLayout::single(4), false);
    for (double p : p4.data()) CHECK(p == doctest::Approx(0.25).epsilon(1e-12));
  }
  SUBCASE("inspection matches matmul per head") {
    AttentionBlock<double> causal("c", AttentionConfig{2, 3, false, true}, init);
    const auto ins = causal.inspect(random_tensor({5, 6}, rng, 1.0, false));
    for (std::size_t h = 0; h < 2; ++h) {
      TensorD ph({5, 5}), vh({5, 3});
      std::copy_n(ins.probs.data().begin() + h * 25, 25, ph.data().begin());
      std::copy_n(ins.values.data().begin() + h * 15, 15, vh.data().begin());
      const TensorD pv = ops::matmul(ph, vh);
      CHECK(std::equal(pv.data().begin(), pv.data().end(), ins.product.data().begin() + h * 15));
      for (std::size_t i = 0; i < 5; ++i) {
        double row = 0.0;
        for (std::size_t j = 0; j < 5; ++j) {
          row += ph.data()[i * 5 + j];
          if (j > i) CHECK(ph.data()[i * 5 + j] == 0.0);
        }
        CHECK(row == doctest::Approx(1.0).epsilon(1e-6));
      }
    }
  }
}
