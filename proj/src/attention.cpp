#include "qgate/attention.hpp"

#include <algorithm>

#include "qgate/errors.hpp"
#include "qgate/ops.hpp"

namespace qgate {

template <typename T>
AttentionBlock<T>::AttentionBlock(std::string prefix, AttentionConfig config, Rng& rng, double gate_bias_init)
    : q_proj(config.model_dim(), config.model_dim(), rng),
      k_proj(config.model_dim(), config.model_dim(), rng),
      v_proj(config.model_dim(), config.model_dim(), rng),
      out_proj(config.model_dim(), config.model_dim(), rng),
      prefix_(std::move(prefix)),
      config_(config) {
  if (config.n_heads == 0 || config.head_dim == 0) throw ConfigError("attention needs n_heads > 0 and head_dim > 0");
  if (config.gated) {
    Linear<T> g(config.model_dim(), config.model_dim(), rng);
    // Small weights keep σ(G(x)) close to σ(bias) at init, i.e. gates start almost open.
    for (auto& w : g.weight.data()) w *= T(0.1);
    std::fill(g.bias.data().begin(), g.bias.data().end(), static_cast<T>(gate_bias_init));
    gate = std::move(g);
  }
}

template <typename T>
BasicTensor<T> AttentionBlock<T>::attend(const BasicTensor<T>& query_in, const SequenceLayout& q_layout,
                                         const BasicTensor<T>& kv_in, const SequenceLayout& kv_layout, bool causal,
                                         bool use_gate, SiteHook<T>* hook) const {
  const std::size_t dm = config_.model_dim();
  if (query_in.rank() != 2 || query_in.dim(1) != dm || kv_in.rank() != 2 || kv_in.dim(1) != dm)
    throw DimensionError(prefix_ + ": expected inputs with " + std::to_string(dm) + " features");
  auto q = q_proj(query_in);
  auto k = k_proj(kv_in);
  auto v = v_proj(kv_in);
  auto probs = ops::attention_probs(q, k, config_.n_heads, q_layout, kv_layout, causal);
  probs = tap(hook, prefix_ + ".probs", probs);
  auto context = ops::attention_context(probs, v, config_.n_heads, q_layout, kv_layout);
  if (use_gate) context = ops::mul(ops::sigmoid((*gate)(query_in)), context);
  context = tap(hook, prefix_ + ".context", context);
  return tap(hook, prefix_ + ".output", out_proj(context));
}

template <typename T>
BasicTensor<T> AttentionBlock<T>::self_attention(const BasicTensor<T>& x, const SequenceLayout& layout,
                                                 SiteHook<T>* hook) const {
  auto in = tap(hook, prefix_ + ".input", x);
  return attend(in, layout, in, layout, config_.causal, false, hook);
}

template <typename T>
BasicTensor<T> AttentionBlock<T>::gated_attention(const BasicTensor<T>& x, const SequenceLayout& layout,
                                                  SiteHook<T>* hook) const {
  if (!gate) throw ConfigError(prefix_ + ": gated attention requested but the block has no gate");
  auto in = tap(hook, prefix_ + ".input", x);
  return attend(in, layout, in, layout, config_.causal, true, hook);
}

template <typename T>
BasicTensor<T> AttentionBlock<T>::forward(const BasicTensor<T>& x, const SequenceLayout& layout,
                                          SiteHook<T>* hook) const {
  return config_.gated ? gated_attention(x, layout, hook) : self_attention(x, layout, hook);
}

template <typename T>
BasicTensor<T> AttentionBlock<T>::cross_attention(const BasicTensor<T>& x, const SequenceLayout& x_layout,
                                                  const BasicTensor<T>& memory, const SequenceLayout& memory_layout,
                                                  SiteHook<T>* hook) const {
  if (config_.gated && !gate) throw ConfigError(prefix_ + ": gated attention requested but the block has no gate");
  auto in = tap(hook, prefix_ + ".input", x);
  return attend(in, x_layout, memory, memory_layout, false, config_.gated, hook);
}

template <typename T>
AttentionInspection<T> AttentionBlock<T>::inspect(const BasicTensor<T>& x) const {
  NoGradScope no_grad;
  const std::size_t t = x.dim(0), n = config_.n_heads, d = config_.head_dim, dm = config_.model_dim();
  const auto layout = SequenceLayout::single(t);
  auto q = q_proj(x);
  auto k = k_proj(x);
  auto v = v_proj(x);
  auto flat = ops::attention_probs(q, k, n, layout, layout, config_.causal);

  AttentionInspection<T> result{BasicTensor<T>(Shape{n, t, t}), BasicTensor<T>(Shape{n, t, d}),
                                BasicTensor<T>(Shape{n, t, d})};
  std::copy(flat.data().begin(), flat.data().end(), result.probs.data().begin());
  for (std::size_t h = 0; h < n; ++h) {
    BasicTensor<T> ph(Shape{t, t});
    BasicTensor<T> vh(Shape{t, d});
    std::copy_n(flat.data().begin() + static_cast<std::ptrdiff_t>(h * t * t), t * t, ph.data().begin());
    for (std::size_t i = 0; i < t; ++i)
      for (std::size_t j = 0; j < d; ++j) vh.data()[i * d + j] = v.data()[i * dm + h * d + j];
    auto pv = ops::matmul(ph, vh);
    std::copy(vh.data().begin(), vh.data().end(), result.values.data().begin() + static_cast<std::ptrdiff_t>(h * t * d));
    std::copy(pv.data().begin(), pv.data().end(), result.product.data().begin() + static_cast<std::ptrdiff_t>(h * t * d));
  }
  return result;
}

template <typename T>
void AttentionBlock<T>::collect(ParamList<T>& out) const {
  q_proj.collect(out, prefix_ + ".q_proj");
  k_proj.collect(out, prefix_ + ".k_proj");
  v_proj.collect(out, prefix_ + ".v_proj");
  out_proj.collect(out, prefix_ + ".out_proj");
  if (gate) gate->collect(out, prefix_ + ".gate");
}

template <typename T>
std::vector<std::string> AttentionBlock<T>::activation_sites() const {
  return {prefix_ + ".input", prefix_ + ".probs", prefix_ + ".context", prefix_ + ".output"};
}

template <typename T>
std::vector<std::string> AttentionBlock<T>::weight_sites() const {
  std::vector<std::string> ids{prefix_ + ".q_proj.weight", prefix_ + ".k_proj.weight", prefix_ + ".v_proj.weight",
                               prefix_ + ".out_proj.weight"};
  if (gate) ids.push_back(prefix_ + ".gate.weight");
  return ids;
}

template class AttentionBlock<float>;
template class AttentionBlock<double>;

}  // namespace qgate
