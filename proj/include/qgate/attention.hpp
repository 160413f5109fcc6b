#pragma once

#include <optional>
#include <string>
#include <vector>

#include "qgate/instrument.hpp"
#include "qgate/layers.hpp"
#include "qgate/tensor.hpp"

namespace qgate {

struct AttentionConfig {
  std::size_t n_heads = 4;
  std::size_t head_dim = 32;
  bool gated = false;
  bool causal = false;

  std::size_t model_dim() const { return n_heads * head_dim; }
};

/// Per-head matrices of one attention call on a single sequence:
/// probs [n, T, S], values [n, S, d], product = probs · values [n, T, d].
template <typename T>
struct AttentionInspection {
  BasicTensor<T> probs;
  BasicTensor<T> values;
  BasicTensor<T> product;
};

/// Multi-head attention with an optional shared output gate.
///
/// The gate is a single linear layer G over the block input; σ(G(x)) scales
/// the concatenated head outputs elementwise before the output projection,
/// so one gate serves all heads while still varying per token.
///
/// Activation sites: <prefix>.input (block input feeding Q/K/V and the gate),
/// .probs (softmax output), .context (gated concatenated heads, the input of
/// W_O) and .output.
template <typename T>
class AttentionBlock {
 public:
  AttentionBlock() = default;
  AttentionBlock(std::string prefix, AttentionConfig config, Rng& rng, double gate_bias_init = 4.0);

  /// softmax(QKᵀ/√d)V followed by W_O, ignoring any gate.
  BasicTensor<T> self_attention(const BasicTensor<T>& x, const SequenceLayout& layout,
                                SiteHook<T>* hook = nullptr) const;

  /// σ(G(x)) ⊙ A(x) followed by W_O. Throws ConfigError when the block has no gate.
  BasicTensor<T> gated_attention(const BasicTensor<T>& x, const SequenceLayout& layout,
                                 SiteHook<T>* hook = nullptr) const;

  /// Dispatches on config().gated.
  BasicTensor<T> forward(const BasicTensor<T>& x, const SequenceLayout& layout, SiteHook<T>* hook = nullptr) const;

  /// Queries from x, keys and values from memory. Gated iff config().gated.
  BasicTensor<T> cross_attention(const BasicTensor<T>& x, const SequenceLayout& x_layout, const BasicTensor<T>& memory,
                                 const SequenceLayout& memory_layout, SiteHook<T>* hook = nullptr) const;

  /// Read-only dump of P, V and P·V for a single sequence x [T, model_dim].
  AttentionInspection<T> inspect(const BasicTensor<T>& x) const;

  const AttentionConfig& config() const { return config_; }
  const std::string& prefix() const { return prefix_; }
  bool has_gate() const { return gate.has_value(); }

  void collect(ParamList<T>& out) const;
  std::vector<std::string> activation_sites() const;
  std::vector<std::string> weight_sites() const;

  Linear<T> q_proj;
  Linear<T> k_proj;
  Linear<T> v_proj;
  Linear<T> out_proj;
  std::optional<Linear<T>> gate;

 private:
  BasicTensor<T> attend(const BasicTensor<T>& query_in, const SequenceLayout& q_layout, const BasicTensor<T>& kv_in,
                        const SequenceLayout& kv_layout, bool causal, bool use_gate, SiteHook<T>* hook) const;

  std::string prefix_;
  AttentionConfig config_;
};

extern template class AttentionBlock<float>;
extern template class AttentionBlock<double>;

}  // namespace qgate
