#include "qgate/ops.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "qgate/errors.hpp"

namespace qgate::ops {
namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using VecMap = Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>;

template <typename T>
MatMap<T> as_mat(std::span<T> s, std::size_t rows, std::size_t cols, std::size_t stride, std::size_t offset = 0) {
  return MatMap<T>(s.data() + offset, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols),
                   Eigen::OuterStride<>(static_cast<Eigen::Index>(stride)));
}

template <typename S>
ConstMatMap<std::remove_const_t<S>> as_cmat(std::span<S> s, std::size_t rows, std::size_t cols, std::size_t stride,
                                            std::size_t offset = 0) {
  return ConstMatMap<std::remove_const_t<S>>(s.data() + offset, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols),
                        Eigen::OuterStride<>(static_cast<Eigen::Index>(stride)));
}

template <typename T>
bool recording(const BasicTensor<T>& a) {
  return active_tape() != nullptr && a.requires_grad();
}

template <typename T>
bool recording(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return active_tape() != nullptr && (a.requires_grad() || (b.defined() && b.requires_grad()));
}

template <typename T>
bool recording(const BasicTensor<T>& a, const BasicTensor<T>& b, const BasicTensor<T>& c) {
  return active_tape() != nullptr &&
         (a.requires_grad() || (b.defined() && b.requires_grad()) || (c.defined() && c.requires_grad()));
}

void require(bool ok, const char* op, const std::string& what) {
  if (!ok) throw DimensionError(std::string(op) + ": " + what);
}

template <typename T>
void require_rank2(const BasicTensor<T>& t, const char* op) {
  require(t.rank() == 2, op, "expected a rank-2 tensor, got " + shape_str(t.shape()));
}

template <typename T>
void require_same_shape(const BasicTensor<T>& a, const BasicTensor<T>& b, const char* op) {
  require(a.shape() == b.shape(), op, "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

// Row-wise stable log-sum-exp helpers used by the losses.
template <typename T>
double row_max(const T* row, std::size_t n) {
  double m = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < n; ++j) m = std::max(m, static_cast<double>(row[j]));
  return m;
}

template <typename T>
void log_softmax_row(const T* row, std::size_t n, std::vector<double>& out) {
  out.resize(n);
  const double m = row_max(row, n);
  double sum = 0.0;
  for (std::size_t j = 0; j < n; ++j) sum += std::exp(static_cast<double>(row[j]) - m);
  const double lse = m + std::log(sum);
  for (std::size_t j = 0; j < n; ++j) out[j] = static_cast<double>(row[j]) - lse;
}

}  // namespace

template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  require(b.dim(0) == k, "matmul", "inner dimensions differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const bool rec = recording(a, b);
  BasicTensor<T> out(Shape{m, n}, rec);
  as_mat(out.data(), m, n, n).noalias() = as_cmat(a.data(), m, k, k) * as_cmat(b.data(), k, n, n);
  if (rec) {
    active_tape()->record([a, b, out, m, k, n]() mutable {
      if (!out.has_grad()) return;
      auto dy = as_cmat(std::span<const T>(out.grad()), m, n, n);
      if (a.requires_grad()) as_mat(a.grad(), m, k, k).noalias() += dy * as_cmat(b.data(), k, n, n).transpose();
      if (b.requires_grad()) as_mat(b.grad(), k, n, n).noalias() += as_cmat(a.data(), m, k, k).transpose() * dy;
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& weight, const BasicTensor<T>& bias) {
  require_rank2(x, "linear");
  require_rank2(weight, "linear");
  const std::size_t rows = x.dim(0), in = x.dim(1), outf = weight.dim(0);
  require(weight.dim(1) == in, "linear",
          "input " + shape_str(x.shape()) + " does not match weight " + shape_str(weight.shape()));
  if (bias.defined()) require(bias.numel() == outf, "linear", "bias size mismatch");
  const bool rec = recording(x, weight, bias);
  BasicTensor<T> out(Shape{rows, outf}, rec);
  auto y = as_mat(out.data(), rows, outf, outf);
  y.noalias() = as_cmat(x.data(), rows, in, in) * as_cmat(weight.data(), outf, in, in).transpose();
  if (bias.defined()) {
    Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> bv(bias.data().data(), static_cast<Eigen::Index>(outf));
    y.rowwise() += bv;
  }
  if (rec) {
    active_tape()->record([x, weight, bias, out, rows, in, outf]() mutable {
      if (!out.has_grad()) return;
      auto dy = as_cmat(std::span<const T>(out.grad()), rows, outf, outf);
      if (x.requires_grad()) as_mat(x.grad(), rows, in, in).noalias() += dy * as_cmat(weight.data(), outf, in, in);
      if (weight.requires_grad())
        as_mat(weight.grad(), outf, in, in).noalias() += dy.transpose() * as_cmat(x.data(), rows, in, in);
      if (bias.defined() && bias.requires_grad()) {
        VecMap<T> db(bias.grad().data(), static_cast<Eigen::Index>(outf));
        db += dy.colwise().sum();
      }
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_same_shape(a, b, "add");
  const bool rec = recording(a, b);
  BasicTensor<T> out(a.shape(), rec);
  auto o = out.data();
  auto av = a.data();
  auto bv = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[i] + bv[i];
  if (rec) {
    active_tape()->record([a, b, out]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      if (a.requires_grad()) {
        auto ga = a.grad();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
      }
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_same_shape(a, b, "mul");
  const bool rec = recording(a, b);
  BasicTensor<T> out(a.shape(), rec);
  auto o = out.data();
  auto av = a.data();
  auto bv = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[i] * bv[i];
  if (rec) {
    active_tape()->record([a, b, out]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      if (a.requires_grad()) {
        auto ga = a.grad();
        auto bv = b.data();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad();
        auto av = a.data();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
      }
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& x, T factor) {
  const bool rec = recording(x);
  BasicTensor<T> out(x.shape(), rec);
  auto o = out.data();
  auto xv = x.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = xv[i] * factor;
  if (rec) {
    active_tape()->record([x, out, factor]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto gx = x.grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * factor;
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> sigmoid(const BasicTensor<T>& x) {
  const bool rec = recording(x);
  BasicTensor<T> out(x.shape(), rec);
  auto o = out.data();
  auto xv = x.data();
  for (std::size_t i = 0; i < o.size(); ++i) {
    const T v = xv[i];
    if (v >= T(0)) {
      o[i] = T(1) / (T(1) + std::exp(-v));
    } else {
      const T e = std::exp(v);
      o[i] = e / (T(1) + e);
    }
  }
  if (rec) {
    active_tape()->record([x, out]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto y = out.data();
      auto gx = x.grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * y[i] * (T(1) - y[i]);
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> gelu(const BasicTensor<T>& x) {
  const bool rec = recording(x);
  BasicTensor<T> out(x.shape(), rec);
  auto o = out.data();
  auto xv = x.data();
  const T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = T(0.5) * xv[i] * (T(1) + std::erf(xv[i] * inv_sqrt2));
  if (rec) {
    active_tape()->record([x, out, inv_sqrt2]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto xv = x.data();
      auto gx = x.grad();
      const T inv_sqrt_2pi = inv_sqrt2 * std::numbers::inv_sqrtpi_v<T>;
      for (std::size_t i = 0; i < g.size(); ++i) {
        const T v = xv[i];
        const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
        const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * v * v);
        gx[i] += g[i] * (cdf + v * pdf);
      }
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& x, std::size_t axis) {
  const Shape& shape = x.shape();
  require(axis < shape.size(), "softmax", "axis " + std::to_string(axis) + " out of range for " + shape_str(shape));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
  const std::size_t n = shape[axis];

  const bool rec = recording(x);
  BasicTensor<T> out(shape, rec);
  auto xv = x.data();
  auto o = out.data();
  for (std::size_t a = 0; a < outer; ++a) {
    for (std::size_t c = 0; c < inner; ++c) {
      const std::size_t base = a * n * inner + c;
      double m = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < n; ++j) m = std::max(m, static_cast<double>(xv[base + j * inner]));
      double sum = 0.0;
      for (std::size_t j = 0; j < n; ++j) sum += std::exp(static_cast<double>(xv[base + j * inner]) - m);
      for (std::size_t j = 0; j < n; ++j)
        o[base + j * inner] = static_cast<T>(std::exp(static_cast<double>(xv[base + j * inner]) - m) / sum);
    }
  }
  if (rec) {
    active_tape()->record([x, out, outer, inner, n]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto y = out.data();
      auto gx = x.grad();
      for (std::size_t a = 0; a < outer; ++a) {
        for (std::size_t c = 0; c < inner; ++c) {
          const std::size_t base = a * n * inner + c;
          double dot = 0.0;
          for (std::size_t j = 0; j < n; ++j) dot += static_cast<double>(g[base + j * inner]) * y[base + j * inner];
          for (std::size_t j = 0; j < n; ++j) {
            const std::size_t idx = base + j * inner;
            gx[idx] += static_cast<T>(y[idx] * (g[idx] - dot));
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, const BasicTensor<T>& gamma, const BasicTensor<T>& beta,
                          double eps) {
  require(x.rank() >= 1, "layer_norm", "rank-0 input");
  if (eps < 0.0) throw std::invalid_argument("layer_norm: eps must be non-negative");
  const std::size_t d = x.shape().back();
  const std::size_t rows = x.numel() / d;
  require(gamma.numel() == d && beta.numel() == d, "layer_norm", "gamma/beta size must equal last axis");

  const bool rec = recording(x, gamma, beta);
  BasicTensor<T> out(x.shape(), rec);
  std::vector<T> xhat(x.numel());
  std::vector<T> inv_std(rows);
  auto xv = x.data();
  auto gv = gamma.data();
  auto bv = beta.data();
  auto o = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xv.data() + r * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += row[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double c = row[j] - mean;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = static_cast<T>(is);
    for (std::size_t j = 0; j < d; ++j) {
      const T h = static_cast<T>((row[j] - mean) * is);
      xhat[r * d + j] = h;
      o[r * d + j] = gv[j] * h + bv[j];
    }
  }
  if (rec) {
    active_tape()->record([x, gamma, beta, out, xhat = std::move(xhat), inv_std = std::move(inv_std), rows,
                           d]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto gv = gamma.data();
      if (gamma.requires_grad() || beta.requires_grad()) {
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t j = 0; j < d; ++j) {
            if (gamma.requires_grad()) gamma.grad()[j] += g[r * d + j] * xhat[r * d + j];
            if (beta.requires_grad()) beta.grad()[j] += g[r * d + j];
          }
        }
      }
      if (!x.requires_grad()) return;
      auto gx = x.grad();
      for (std::size_t r = 0; r < rows; ++r) {
        double mean_dh = 0.0, mean_dh_h = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
          const double dh = static_cast<double>(g[r * d + j]) * gv[j];
          mean_dh += dh;
          mean_dh_h += dh * xhat[r * d + j];
        }
        mean_dh /= static_cast<double>(d);
        mean_dh_h /= static_cast<double>(d);
        for (std::size_t j = 0; j < d; ++j) {
          const double dh = static_cast<double>(g[r * d + j]) * gv[j];
          gx[r * d + j] += static_cast<T>(inv_std[r] * (dh - mean_dh - xhat[r * d + j] * mean_dh_h));
        }
      }
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> embedding_lookup(const BasicTensor<T>& table, std::span<const int> ids) {
  require_rank2(table, "embedding_lookup");
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab)
      throw IndexError("embedding_lookup: token id " + std::to_string(id) + " outside vocabulary of " +
                       std::to_string(vocab));
  }
  const bool rec = recording(table);
  BasicTensor<T> out(Shape{ids.size(), d}, rec);
  auto tv = table.data();
  auto o = out.data();
  for (std::size_t i = 0; i < ids.size(); ++i)
    std::copy_n(tv.begin() + static_cast<std::ptrdiff_t>(ids[i] * d), d, o.begin() + static_cast<std::ptrdiff_t>(i * d));
  if (rec) {
    std::vector<int> idv(ids.begin(), ids.end());
    active_tape()->record([table, out, idv = std::move(idv), d]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto gt = table.grad();
      for (std::size_t i = 0; i < idv.size(); ++i)
        for (std::size_t j = 0; j < d; ++j) gt[static_cast<std::size_t>(idv[i]) * d + j] += g[i * d + j];
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> cross_entropy(const BasicTensor<T>& logits, std::span<const int> targets, int ignore_index) {
  require_rank2(logits, "cross_entropy");
  const std::size_t n = logits.dim(0), v = logits.dim(1);
  require(targets.size() == n, "cross_entropy", "expected " + std::to_string(n) + " targets");
  std::size_t valid = 0;
  for (int t : targets) {
    if (t == ignore_index) continue;
    if (t < 0 || static_cast<std::size_t>(t) >= v)
      throw IndexError("cross_entropy: target id " + std::to_string(t) + " outside vocabulary of " + std::to_string(v));
    ++valid;
  }
  const bool rec = recording(logits);
  BasicTensor<T> out(Shape{1}, rec);
  if (valid == 0) return out;

  auto lv = logits.data();
  std::vector<double> lsm;
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (targets[i] == ignore_index) continue;
    log_softmax_row(lv.data() + i * v, v, lsm);
    total -= lsm[static_cast<std::size_t>(targets[i])];
  }
  out.data()[0] = static_cast<T>(total / static_cast<double>(valid));
  if (rec) {
    std::vector<int> tv(targets.begin(), targets.end());
    active_tape()->record([logits, out, tv = std::move(tv), n, v, valid, ignore_index]() mutable {
      if (!out.has_grad()) return;
      const double g = out.grad()[0] / static_cast<double>(valid);
      auto lv = logits.data();
      auto gl = logits.grad();
      std::vector<double> lsm;
      for (std::size_t i = 0; i < n; ++i) {
        if (tv[i] == ignore_index) continue;
        log_softmax_row(lv.data() + i * v, v, lsm);
        for (std::size_t j = 0; j < v; ++j) {
          const double p = std::exp(lsm[j]);
          gl[i * v + j] += static_cast<T>(g * (p - (static_cast<int>(j) == tv[i] ? 1.0 : 0.0)));
        }
      }
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> kl_divergence(const BasicTensor<T>& student_logits, const BasicTensor<T>& teacher_logits,
                             KlDirection direction, std::span<const bool> mask) {
  require_rank2(student_logits, "kl_divergence");
  require_same_shape(student_logits, teacher_logits, "kl_divergence");
  const std::size_t n = student_logits.dim(0), v = student_logits.dim(1);
  require(mask.empty() || mask.size() == n, "kl_divergence", "mask length mismatch");
  std::vector<bool> valid(n, true);
  if (!mask.empty()) std::copy(mask.begin(), mask.end(), valid.begin());
  const std::size_t count = static_cast<std::size_t>(std::count(valid.begin(), valid.end(), true));

  const bool rec = recording(student_logits);
  BasicTensor<T> out(Shape{1}, rec);
  if (count == 0) return out;

  auto sv = student_logits.data();
  auto tv = teacher_logits.data();
  std::vector<double> ls, lt;
  std::vector<double> row_kl(n, 0.0);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!valid[i]) continue;
    log_softmax_row(sv.data() + i * v, v, ls);
    log_softmax_row(tv.data() + i * v, v, lt);
    double kl = 0.0;
    for (std::size_t j = 0; j < v; ++j) {
      if (direction == KlDirection::TeacherStudent) {
        const double pt = std::exp(lt[j]);
        if (pt > 0.0) kl += pt * (lt[j] - ls[j]);
      } else {
        const double ps = std::exp(ls[j]);
        if (ps > 0.0) kl += ps * (ls[j] - lt[j]);
      }
    }
    row_kl[i] = std::max(kl, 0.0);
    total += row_kl[i];
  }
  out.data()[0] = static_cast<T>(total / static_cast<double>(count));
  if (rec) {
    active_tape()->record([student_logits, teacher_logits, out, valid = std::move(valid), n, v, count,
                           direction]() mutable {
      if (!out.has_grad()) return;
      const double g = out.grad()[0] / static_cast<double>(count);
      auto sv = student_logits.data();
      auto tv = teacher_logits.data();
      auto gs = student_logits.grad();
      std::vector<double> ls, lt;
      for (std::size_t i = 0; i < n; ++i) {
        if (!valid[i]) continue;
        log_softmax_row(sv.data() + i * v, v, ls);
        log_softmax_row(tv.data() + i * v, v, lt);
        // Unclamped row value keeps the gradient exact near KL = 0.
        double kl = 0.0;
        if (direction == KlDirection::StudentTeacher) {
          for (std::size_t j = 0; j < v; ++j) {
            const double ps = std::exp(ls[j]);
            if (ps > 0.0) kl += ps * (ls[j] - lt[j]);
          }
        }
        for (std::size_t j = 0; j < v; ++j) {
          const double ps = std::exp(ls[j]);
          double d;
          if (direction == KlDirection::TeacherStudent) {
            d = ps - std::exp(lt[j]);
          } else {
            d = ps * (ls[j] - lt[j] - kl);
          }
          gs[i * v + j] += static_cast<T>(g * d);
        }
      }
    });
  }
  return out;
}

std::size_t attention_block_offset(const SequenceLayout& q_layout, const SequenceLayout& k_layout,
                                   std::size_t n_heads, std::size_t segment, std::size_t head) {
  std::size_t off = 0;
  for (std::size_t s = 0; s < segment; ++s) off += n_heads * q_layout.lengths[s] * k_layout.lengths[s];
  return off + head * q_layout.lengths[segment] * k_layout.lengths[segment];
}

namespace {

void check_attention_layouts(const SequenceLayout& ql, const SequenceLayout& kl, std::size_t tq, std::size_t tk,
                             const char* op) {
  require(ql.size() == kl.size(), op, "query and key layouts have different segment counts");
  require(ql.total == tq, op, "query layout does not cover the query rows");
  require(kl.total == tk, op, "key layout does not cover the key rows");
}

std::size_t probs_size(const SequenceLayout& ql, const SequenceLayout& kl, std::size_t heads) {
  std::size_t n = 0;
  for (std::size_t s = 0; s < ql.size(); ++s) n += heads * ql.lengths[s] * kl.lengths[s];
  return n;
}

}  // namespace

template <typename T>
BasicTensor<T> attention_probs(const BasicTensor<T>& q, const BasicTensor<T>& k, std::size_t n_heads,
                               const SequenceLayout& q_layout, const SequenceLayout& k_layout, bool causal) {
  require_rank2(q, "attention_probs");
  require_rank2(k, "attention_probs");
  const std::size_t dm = q.dim(1);
  require(k.dim(1) == dm, "attention_probs", "query/key feature sizes differ");
  require(n_heads > 0 && dm % n_heads == 0, "attention_probs", "model dim not divisible by head count");
  check_attention_layouts(q_layout, k_layout, q.dim(0), k.dim(0), "attention_probs");
  if (causal) {
    for (std::size_t s = 0; s < q_layout.size(); ++s)
      require(q_layout.lengths[s] == k_layout.lengths[s], "attention_probs", "causal mask needs square segments");
  }
  const std::size_t hd = dm / n_heads;
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(hd));

  const bool rec = recording(q, k);
  BasicTensor<T> out(Shape{probs_size(q_layout, k_layout, n_heads)}, rec);
  auto o = out.data();
  RowMat<T> scores;
  std::size_t off = 0;
  for (std::size_t s = 0; s < q_layout.size(); ++s) {
    const std::size_t tq = q_layout.lengths[s], tk = k_layout.lengths[s];
    for (std::size_t h = 0; h < n_heads; ++h) {
      auto qh = as_cmat(q.data(), tq, hd, dm, q_layout.offsets[s] * dm + h * hd);
      auto kh = as_cmat(k.data(), tk, hd, dm, k_layout.offsets[s] * dm + h * hd);
      scores.noalias() = qh * kh.transpose();
      auto p = as_mat(o, tq, tk, tk, off);
      for (std::size_t i = 0; i < tq; ++i) {
        const std::size_t visible = causal ? i + 1 : tk;
        double m = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < visible; ++j) m = std::max(m, scores(i, j) * inv_sqrt_d);
        double sum = 0.0;
        for (std::size_t j = 0; j < visible; ++j) sum += std::exp(scores(i, j) * inv_sqrt_d - m);
        for (std::size_t j = 0; j < tk; ++j)
          p(i, j) = j < visible ? static_cast<T>(std::exp(scores(i, j) * inv_sqrt_d - m) / sum) : T(0);
      }
      off += tq * tk;
    }
  }
  if (rec) {
    active_tape()->record([q, k, out, n_heads, q_layout, k_layout, dm, hd, inv_sqrt_d]() mutable {
      if (!out.has_grad()) return;
      auto g = std::span<const T>(out.grad());
      auto pv = std::span<const T>(out.data());
      RowMat<T> ds;
      std::size_t off = 0;
      for (std::size_t s = 0; s < q_layout.size(); ++s) {
        const std::size_t tq = q_layout.lengths[s], tk = k_layout.lengths[s];
        for (std::size_t h = 0; h < n_heads; ++h) {
          auto p = as_cmat(pv, tq, tk, tk, off);
          auto dp = as_cmat(g, tq, tk, tk, off);
          ds.resize(static_cast<Eigen::Index>(tq), static_cast<Eigen::Index>(tk));
          for (std::size_t i = 0; i < tq; ++i) {
            double dot = 0.0;
            for (std::size_t j = 0; j < tk; ++j) dot += static_cast<double>(dp(i, j)) * p(i, j);
            for (std::size_t j = 0; j < tk; ++j) ds(i, j) = static_cast<T>(p(i, j) * (dp(i, j) - dot) * inv_sqrt_d);
          }
          if (q.requires_grad()) {
            as_mat(q.grad(), tq, hd, dm, q_layout.offsets[s] * dm + h * hd).noalias() +=
                ds * as_cmat(k.data(), tk, hd, dm, k_layout.offsets[s] * dm + h * hd);
          }
          if (k.requires_grad()) {
            as_mat(k.grad(), tk, hd, dm, k_layout.offsets[s] * dm + h * hd).noalias() +=
                ds.transpose() * as_cmat(q.data(), tq, hd, dm, q_layout.offsets[s] * dm + h * hd);
          }
          off += tq * tk;
        }
      }
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> attention_context(const BasicTensor<T>& probs, const BasicTensor<T>& v, std::size_t n_heads,
                                 const SequenceLayout& q_layout, const SequenceLayout& k_layout) {
  require_rank2(v, "attention_context");
  const std::size_t dm = v.dim(1);
  require(n_heads > 0 && dm % n_heads == 0, "attention_context", "model dim not divisible by head count");
  require(q_layout.size() == k_layout.size(), "attention_context", "layout segment counts differ");
  require(k_layout.total == v.dim(0), "attention_context", "key layout does not cover the value rows");
  require(probs.numel() == probs_size(q_layout, k_layout, n_heads), "attention_context",
          "probability buffer size does not match layouts");
  const std::size_t hd = dm / n_heads;

  const bool rec = recording(probs, v);
  BasicTensor<T> out(Shape{q_layout.total, dm}, rec);
  std::size_t off = 0;
  for (std::size_t s = 0; s < q_layout.size(); ++s) {
    const std::size_t tq = q_layout.lengths[s], tk = k_layout.lengths[s];
    for (std::size_t h = 0; h < n_heads; ++h) {
      as_mat(out.data(), tq, hd, dm, q_layout.offsets[s] * dm + h * hd).noalias() =
          as_cmat(probs.data(), tq, tk, tk, off) * as_cmat(v.data(), tk, hd, dm, k_layout.offsets[s] * dm + h * hd);
      off += tq * tk;
    }
  }
  if (rec) {
    active_tape()->record([probs, v, out, n_heads, q_layout, k_layout, dm, hd]() mutable {
      if (!out.has_grad()) return;
      auto g = std::span<const T>(out.grad());
      std::size_t off = 0;
      for (std::size_t s = 0; s < q_layout.size(); ++s) {
        const std::size_t tq = q_layout.lengths[s], tk = k_layout.lengths[s];
        for (std::size_t h = 0; h < n_heads; ++h) {
          auto dy = as_cmat(g, tq, hd, dm, q_layout.offsets[s] * dm + h * hd);
          if (probs.requires_grad()) {
            as_mat(probs.grad(), tq, tk, tk, off).noalias() +=
                dy * as_cmat(v.data(), tk, hd, dm, k_layout.offsets[s] * dm + h * hd).transpose();
          }
          if (v.requires_grad()) {
            as_mat(v.grad(), tk, hd, dm, k_layout.offsets[s] * dm + h * hd).noalias() +=
                as_cmat(probs.data(), tq, tk, tk, off).transpose() * dy;
          }
          off += tq * tk;
        }
      }
    });
  }
  return out;
}

#define QGATE_INSTANTIATE_OPS(T)                                                                                    \
  template BasicTensor<T> matmul(const BasicTensor<T>&, const BasicTensor<T>&);                                    \
  template BasicTensor<T> linear(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&);             \
  template BasicTensor<T> add(const BasicTensor<T>&, const BasicTensor<T>&);                                       \
  template BasicTensor<T> mul(const BasicTensor<T>&, const BasicTensor<T>&);                                       \
  template BasicTensor<T> scale(const BasicTensor<T>&, T);                                                         \
  template BasicTensor<T> sigmoid(const BasicTensor<T>&);                                                          \
  template BasicTensor<T> gelu(const BasicTensor<T>&);                                                             \
  template BasicTensor<T> softmax(const BasicTensor<T>&, std::size_t);                                             \
  template BasicTensor<T> layer_norm(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&, double); \
  template BasicTensor<T> embedding_lookup(const BasicTensor<T>&, std::span<const int>);                           \
  template BasicTensor<T> cross_entropy(const BasicTensor<T>&, std::span<const int>, int);                         \
  template BasicTensor<T> kl_divergence(const BasicTensor<T>&, const BasicTensor<T>&, KlDirection,                 \
                                        std::span<const bool>);                                                    \
  template BasicTensor<T> attention_probs(const BasicTensor<T>&, const BasicTensor<T>&, std::size_t,               \
                                          const SequenceLayout&, const SequenceLayout&, bool);                     \
  template BasicTensor<T> attention_context(const BasicTensor<T>&, const BasicTensor<T>&, std::size_t,             \
                                            const SequenceLayout&, const SequenceLayout&);

QGATE_INSTANTIATE_OPS(float)
QGATE_INSTANTIATE_OPS(double)

#undef QGATE_INSTANTIATE_OPS

}  // namespace qgate::ops
