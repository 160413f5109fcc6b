#pragma once

// Shared helpers for unit and acceptance tests: random tensors, a projection
// loss for Jacobian checks, and central finite differences in double.

#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "qgate/tensor.hpp"

namespace qgate::testing {

inline TensorD random_tensor(Shape shape, std::mt19937_64& rng, double scale = 1.0, bool requires_grad = true) {
  std::normal_distribution<double> n(0.0, scale);
  TensorD t(std::move(shape), requires_grad);
  for (auto& v : t.data()) v = n(rng);
  return t;
}

inline Tensor random_tensor_f(Shape shape, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<float>(n(rng));
  return t;
}

/// sum_i x_i * w_i as a recorded op, so any tensor output becomes a scalar loss.
inline TensorD project(const TensorD& x, const std::vector<double>& w) {
  double s = 0.0;
  for (std::size_t i = 0; i < x.numel(); ++i) s += x.data()[i] * w[i];
  TensorD out = TensorD::scalar(s);
  if (active_tape() && x.requires_grad()) {
    out.set_requires_grad(true);
    active_tape()->record([x, w, out]() {
      if (!out.has_grad()) return;
      const double g = out.grad()[0];
      auto gx = x.grad();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g * w[i];
    });
  }
  return out;
}

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst;
};

/// Compares tape gradients of `loss` w.r.t. every tensor in `inputs` with
/// central differences. Relative error per tensor is
/// ||analytic - numeric||₂ / max(||analytic||₂ + ||numeric||₂, 1e-12).
inline GradCheckResult grad_check(const std::function<TensorD()>& loss, const std::vector<TensorD>& inputs,
                                  double h = 1e-6) {
  for (const auto& t : inputs) t.clear_grad();
  {
    Tape tape;
    TapeScope scope(tape);
    const TensorD l = loss();
    tape.backward(l);
  }
  GradCheckResult result;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const auto& t = inputs[k];
    std::vector<double> analytic(t.numel(), 0.0);
    if (t.has_grad()) analytic.assign(t.grad().begin(), t.grad().end());
    double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
    for (std::size_t i = 0; i < t.numel(); ++i) {
      const double orig = t.data()[i];
      double lp, lm;
      {
        NoGradScope ng;
        t.data()[i] = orig + h;
        lp = loss().item();
        t.data()[i] = orig - h;
        lm = loss().item();
        t.data()[i] = orig;
      }
      const double numeric = (lp - lm) / (2.0 * h);
      diff2 += (analytic[i] - numeric) * (analytic[i] - numeric);
      a2 += analytic[i] * analytic[i];
      n2 += numeric * numeric;
    }
    const double rel = std::sqrt(diff2) / std::max(std::sqrt(a2) + std::sqrt(n2), 1e-12);
    if (rel > result.max_rel_error) {
      result.max_rel_error = rel;
      result.worst = "input " + std::to_string(k);
    }
  }
  return result;
}

}  // namespace qgate::testing
