#pragma once

#include <cstddef>
#include <span>

#include "qgate/tensor.hpp"

// Differentiable primitives. Every op records a backward closure on the
// thread's active tape when one is installed and any input requires grad.
// Internal reductions accumulate in double regardless of T.
namespace qgate::ops {

template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b);

/// y = x · Wᵀ + bias, with W stored [out, in]. bias may be undefined.
template <typename T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& weight, const BasicTensor<T>& bias);

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b);

/// Elementwise (Hadamard) product.
template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b);

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& x, T factor);

template <typename T>
BasicTensor<T> sigmoid(const BasicTensor<T>& x);

/// Exact (erf-based) GELU.
template <typename T>
BasicTensor<T> gelu(const BasicTensor<T>& x);

template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& x, std::size_t axis);

/// Normalizes over the last axis; gamma and beta have the size of that axis.
template <typename T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, const BasicTensor<T>& gamma, const BasicTensor<T>& beta,
                          double eps);

/// Gathers rows of a [V, D] table. Returns [ids.size(), D].
template <typename T>
BasicTensor<T> embedding_lookup(const BasicTensor<T>& table, std::span<const int> ids);

/// Mean negative log-likelihood over positions whose target != ignore_index.
template <typename T>
BasicTensor<T> cross_entropy(const BasicTensor<T>& logits, std::span<const int> targets, int ignore_index = -1);

enum class KlDirection {
  TeacherStudent,  // KL(T || S), the usual forward distillation divergence
  StudentTeacher,  // KL(S || T)
};

/// KL divergence between the softmax distributions of two [N, V] logit
/// tensors, summed over V and averaged over positions with mask true (all
/// positions when mask is empty). Gradient flows to the student only.
template <typename T>
BasicTensor<T> kl_divergence(const BasicTensor<T>& student_logits, const BasicTensor<T>& teacher_logits,
                             KlDirection direction = KlDirection::TeacherStudent, std::span<const bool> mask = {});

/// Multi-head attention probabilities softmax(q_h k_hᵀ / √d) per segment and
/// head. q is [Tq, D], k is [Tk, D]; segments of the two layouts pair up.
/// The result is flat: for each segment, for each head, a row-major
/// [tq, tk] block. Masked (future) positions are exactly zero when causal.
template <typename T>
BasicTensor<T> attention_probs(const BasicTensor<T>& q, const BasicTensor<T>& k, std::size_t n_heads,
                               const SequenceLayout& q_layout, const SequenceLayout& k_layout, bool causal);

/// Per-head P·V with heads concatenated along the feature axis. Returns [Tq, D].
template <typename T>
BasicTensor<T> attention_context(const BasicTensor<T>& probs, const BasicTensor<T>& v, std::size_t n_heads,
                                 const SequenceLayout& q_layout, const SequenceLayout& k_layout);

/// Offset of the (segment, head) block inside an attention_probs result.
std::size_t attention_block_offset(const SequenceLayout& q_layout, const SequenceLayout& k_layout,
                                   std::size_t n_heads, std::size_t segment, std::size_t head);

}  // namespace qgate::ops
