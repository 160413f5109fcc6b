#include "qgate/model.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "qgate/errors.hpp"
#include "qgate/ops.hpp"

namespace qgate {

void ModelConfig::validate() const {
  if (enc_layers == 0) throw ConfigError("enc_layers must be >= 1");
  if (dec_layers == 0) throw ConfigError("dec_layers must be >= 1");
  if (n_heads == 0 || model_dim % n_heads != 0) throw ConfigError("model_dim must be divisible by n_heads");
  if (model_dim % 2 != 0) throw ConfigError("model_dim must be even for sinusoidal positions");
  if (ffn_dim == 0 || feature_dim == 0) throw ConfigError("ffn_dim and feature_dim must be positive");
  if (vocab_size <= static_cast<std::size_t>(kFirstSymbolId)) throw ConfigError("vocab_size too small for specials");
  if (max_source_len == 0 || max_target_len == 0) throw ConfigError("sequence limits must be positive");
}

bool ModelConfig::same_architecture(const ModelConfig& o) const {
  return enc_layers == o.enc_layers && dec_layers == o.dec_layers && model_dim == o.model_dim &&
         n_heads == o.n_heads && ffn_dim == o.ffn_dim && vocab_size == o.vocab_size &&
         feature_dim == o.feature_dim && max_source_len == o.max_source_len &&
         max_target_len == o.max_target_len && gated == o.gated && gate_cross_attention == o.gate_cross_attention;
}

nlohmann::json ModelConfig::to_json() const {
  return {{"enc_layers", enc_layers},         {"dec_layers", dec_layers},
          {"model_dim", model_dim},           {"n_heads", n_heads},
          {"ffn_dim", ffn_dim},               {"vocab_size", vocab_size},
          {"feature_dim", feature_dim},       {"max_source_len", max_source_len},
          {"max_target_len", max_target_len}, {"gated", gated},
          {"gate_cross_attention", gate_cross_attention}, {"gate_bias_init", gate_bias_init}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.enc_layers = j.value("enc_layers", c.enc_layers);
  c.dec_layers = j.value("dec_layers", c.dec_layers);
  c.model_dim = j.value("model_dim", c.model_dim);
  c.n_heads = j.value("n_heads", c.n_heads);
  c.ffn_dim = j.value("ffn_dim", c.ffn_dim);
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.feature_dim = j.value("feature_dim", c.feature_dim);
  c.max_source_len = j.value("max_source_len", c.max_source_len);
  c.max_target_len = j.value("max_target_len", c.max_target_len);
  c.gated = j.value("gated", c.gated);
  c.gate_cross_attention = j.value("gate_cross_attention", c.gate_cross_attention);
  c.gate_bias_init = j.value("gate_bias_init", c.gate_bias_init);
  c.validate();
  return c;
}

EncoderDecoder::EncoderDecoder(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
  config_.validate();
  Rng rng(seed);
  const std::size_t dm = config_.model_dim;
  const AttentionConfig self_cfg{config_.n_heads, dm / config_.n_heads, config_.gated, false};
  const AttentionConfig causal_cfg{config_.n_heads, dm / config_.n_heads, config_.gated, true};
  const AttentionConfig cross_cfg{config_.n_heads, dm / config_.n_heads,
                                  config_.gated && config_.gate_cross_attention, false};

  frontend = Linear<float>(config_.feature_dim, dm, rng);
  for (std::size_t i = 0; i < config_.enc_layers; ++i) {
    const std::string p = "encoder.layers." + std::to_string(i);
    encoder_layers.push_back(EncoderLayer<float>{
        LayerNorm<float>(dm), AttentionBlock<float>(p + ".self_attn", self_cfg, rng, config_.gate_bias_init),
        LayerNorm<float>(dm), FeedForward<float>(p + ".ffn", dm, config_.ffn_dim, rng)});
  }
  encoder_norm = LayerNorm<float>(dm);

  embed_tokens = Tensor(Shape{config_.vocab_size, dm}, true);
  std::normal_distribution<double> emb(0.0, 1.0 / std::sqrt(static_cast<double>(dm)));
  for (auto& w : embed_tokens.data()) w = static_cast<float>(emb(rng));

  for (std::size_t i = 0; i < config_.dec_layers; ++i) {
    const std::string p = "decoder.layers." + std::to_string(i);
    decoder_layers.push_back(DecoderLayer<float>{
        LayerNorm<float>(dm), AttentionBlock<float>(p + ".self_attn", causal_cfg, rng, config_.gate_bias_init),
        LayerNorm<float>(dm), AttentionBlock<float>(p + ".cross_attn", cross_cfg, rng, config_.gate_bias_init),
        LayerNorm<float>(dm), FeedForward<float>(p + ".ffn", dm, config_.ffn_dim, rng)});
  }
  decoder_norm = LayerNorm<float>(dm);
  position_table_ = sinusoidal_table(std::max(config_.max_source_len, config_.max_target_len + 1), dm);
}

EncoderDecoder EncoderDecoder::clone() const {
  EncoderDecoder copy(config_, 0);
  auto src = parameters();
  auto dst = copy.parameters();
  for (std::size_t i = 0; i < src.size(); ++i) {
    auto from = src[i].tensor.data();
    std::copy(from.begin(), from.end(), dst[i].tensor.data().begin());
  }
  return copy;
}

Tensor EncoderDecoder::positions(const SequenceLayout& layout, std::size_t max_len) const {
  const std::size_t dm = config_.model_dim;
  Tensor pe(Shape{layout.total, dm});
  auto out = pe.data();
  for (std::size_t s = 0; s < layout.size(); ++s) {
    if (layout.lengths[s] > max_len)
      throw DataError("sequence of length " + std::to_string(layout.lengths[s]) + " exceeds the limit of " +
                      std::to_string(max_len));
    std::copy_n(position_table_.begin(), layout.lengths[s] * dm,
                out.begin() + static_cast<std::ptrdiff_t>(layout.offsets[s] * dm));
  }
  return pe;
}

Tensor EncoderDecoder::encode(const Tensor& features, SiteHook<float>* hook) const {
  return encode(features, SequenceLayout::single(features.dim(0)), hook);
}

Tensor EncoderDecoder::encode(const Tensor& features, const SequenceLayout& layout, SiteHook<float>* hook) const {
  if (features.rank() != 2 || features.dim(1) != config_.feature_dim)
    throw DimensionError("encode: expected features [L, " + std::to_string(config_.feature_dim) + "], got " +
                         shape_str(features.shape()));
  if (layout.total != features.dim(0)) throw DimensionError("encode: layout does not cover the feature rows");
  const Tensor pe = positions(layout, config_.max_source_len);
  auto x = tap(hook, "encoder.frontend.input", features);
  // Unit-norm frames are rescaled to unit RMS per feature.
  const float in_scale = std::sqrt(static_cast<float>(config_.feature_dim));
  Tensor h = ops::add(frontend(ops::scale(x, in_scale)), pe);
  for (const auto& layer : encoder_layers) {
    h = ops::add(h, layer.self_attn.forward(layer.attn_norm(h), layout, hook));
    h = ops::add(h, layer.ffn.forward(layer.ffn_norm(h), hook));
  }
  return tap(hook, "encoder.final_norm.output", encoder_norm(h));
}

Tensor EncoderDecoder::decode(const Tensor& memory, const SequenceLayout& memory_layout, std::span<const int> input_ids,
                              const SequenceLayout& input_layout, SiteHook<float>* hook) const {
  if (input_layout.total != input_ids.size()) throw DimensionError("decode: layout does not cover the token ids");
  if (memory_layout.size() != input_layout.size())
    throw DimensionError("decode: memory and target layouts have different sequence counts");
  const Tensor pe = positions(input_layout, config_.max_target_len + 1);
  const float emb_scale = std::sqrt(static_cast<float>(config_.model_dim));
  Tensor x = ops::add(ops::scale(ops::embedding_lookup(embed_tokens, input_ids), emb_scale), pe);
  for (const auto& layer : decoder_layers) {
    x = ops::add(x, layer.self_attn.forward(layer.self_attn_norm(x), input_layout, hook));
    x = ops::add(x, layer.cross_attn.cross_attention(layer.cross_attn_norm(x), input_layout, memory, memory_layout, hook));
    x = ops::add(x, layer.ffn.forward(layer.ffn_norm(x), hook));
  }
  auto h = tap(hook, "decoder.final_norm.output", decoder_norm(x));
  return ops::linear(h, embed_tokens, Tensor());
}

Tensor EncoderDecoder::forward(const Batch& batch, SiteHook<float>* hook) const {
  const Tensor memory = encode(batch.features, batch.source, hook);
  return decode(memory, batch.source, batch.decoder_input, batch.target, hook);
}

Tensor EncoderDecoder::decode_step(const Tensor& memory, std::span<const int> prefix, SiteHook<float>* hook) const {
  if (prefix.empty()) throw DataError("decode_step: empty prefix");
  if (prefix.size() > config_.max_target_len + 1) throw DataError("decode_step: prefix exceeds max_target_len");
  const auto logits = decode(memory, SequenceLayout::single(memory.dim(0)), prefix,
                             SequenceLayout::single(prefix.size()), hook);
  const std::size_t v = config_.vocab_size;
  Tensor last(Shape{v});
  std::copy_n(logits.data().begin() + static_cast<std::ptrdiff_t>((prefix.size() - 1) * v), v, last.data().begin());
  return last;
}

std::vector<int> EncoderDecoder::greedy_decode(const Tensor& features, std::size_t max_len, int eos_id,
                                               SiteHook<float>* hook) const {
  return greedy_decode_batch(std::span<const Tensor>(&features, 1), max_len, eos_id, hook).front();
}

std::vector<std::vector<int>> EncoderDecoder::greedy_decode_batch(std::span<const Tensor> features,
                                                                  std::size_t max_len, int eos_id,
                                                                  SiteHook<float>* hook) const {
  NoGradScope no_grad;
  max_len = std::min(max_len, config_.max_target_len);
  const std::size_t n = features.size();
  std::vector<std::vector<int>> out(n);
  if (n == 0) return out;

  std::vector<std::size_t> src_lengths;
  std::size_t src_total = 0;
  for (const auto& f : features) {
    src_lengths.push_back(f.dim(0));
    src_total += f.dim(0);
  }
  Tensor packed(Shape{src_total, config_.feature_dim});
  {
    std::size_t off = 0;
    for (const auto& f : features) {
      std::copy(f.data().begin(), f.data().end(), packed.data().begin() + static_cast<std::ptrdiff_t>(off));
      off += f.numel();
    }
  }
  const SequenceLayout full_layout(src_lengths);
  const Tensor memory = encode(packed, full_layout, hook);
  const std::size_t dm = config_.model_dim, v = config_.vocab_size;

  std::vector<std::vector<int>> prefixes(n, std::vector<int>{kBosId});
  std::vector<bool> done(n, false);
  for (std::size_t step = 0; step < max_len; ++step) {
    std::vector<std::size_t> active;
    for (std::size_t i = 0; i < n; ++i)
      if (!done[i]) active.push_back(i);
    if (active.empty()) break;

    std::vector<std::size_t> mem_lengths, tgt_lengths;
    std::vector<int> ids;
    std::size_t mem_total = 0;
    for (std::size_t i : active) {
      mem_lengths.push_back(src_lengths[i]);
      mem_total += src_lengths[i];
      tgt_lengths.push_back(prefixes[i].size());
      ids.insert(ids.end(), prefixes[i].begin(), prefixes[i].end());
    }
    Tensor mem(Shape{mem_total, dm});
    {
      std::size_t off = 0;
      for (std::size_t i : active) {
        const std::size_t rows = src_lengths[i] * dm;
        std::copy_n(memory.data().begin() + static_cast<std::ptrdiff_t>(full_layout.offsets[i] * dm), rows,
                    mem.data().begin() + static_cast<std::ptrdiff_t>(off));
        off += rows;
      }
    }
    const SequenceLayout tgt_layout(tgt_lengths);
    const Tensor logits = decode(mem, SequenceLayout(mem_lengths), ids, tgt_layout, hook);
    for (std::size_t a = 0; a < active.size(); ++a) {
      const std::size_t row = tgt_layout.offsets[a] + tgt_layout.lengths[a] - 1;
      const auto begin = logits.data().begin() + static_cast<std::ptrdiff_t>(row * v);
      const int next = static_cast<int>(std::max_element(begin, begin + static_cast<std::ptrdiff_t>(v)) - begin);
      const std::size_t i = active[a];
      if (next == eos_id) {
        done[i] = true;
      } else {
        prefixes[i].push_back(next);
        out[i].push_back(next);
      }
    }
  }
  return out;
}

ParamList<float> EncoderDecoder::parameters() const {
  ParamList<float> params;
  frontend.collect(params, "encoder.frontend.proj");
  for (std::size_t i = 0; i < encoder_layers.size(); ++i) {
    const std::string p = "encoder.layers." + std::to_string(i);
    const auto& l = encoder_layers[i];
    l.attn_norm.collect(params, p + ".attn_norm");
    l.self_attn.collect(params);
    l.ffn_norm.collect(params, p + ".ffn_norm");
    l.ffn.collect(params);
  }
  encoder_norm.collect(params, "encoder.final_norm");
  params.push_back({"decoder.embed_tokens.weight", embed_tokens, true});
  for (std::size_t i = 0; i < decoder_layers.size(); ++i) {
    const std::string p = "decoder.layers." + std::to_string(i);
    const auto& l = decoder_layers[i];
    l.self_attn_norm.collect(params, p + ".self_attn_norm");
    l.self_attn.collect(params);
    l.cross_attn_norm.collect(params, p + ".cross_attn_norm");
    l.cross_attn.collect(params);
    l.ffn_norm.collect(params, p + ".ffn_norm");
    l.ffn.collect(params);
  }
  decoder_norm.collect(params, "decoder.final_norm");
  return params;
}

std::vector<SiteInfo> EncoderDecoder::sites() const {
  std::vector<SiteInfo> out;
  auto act = [&](const std::string& id) { out.push_back({id, SiteKind::Activation}); };
  auto wt = [&](const std::string& id) { out.push_back({id, SiteKind::Weight}); };
  act("encoder.frontend.input");
  wt("encoder.frontend.proj.weight");
  for (const auto& l : encoder_layers) {
    for (const auto& id : l.self_attn.activation_sites()) act(id);
    for (const auto& id : l.self_attn.weight_sites()) wt(id);
    for (const auto& id : l.ffn.activation_sites()) act(id);
    for (const auto& id : l.ffn.weight_sites()) wt(id);
  }
  act("encoder.final_norm.output");
  for (const auto& l : decoder_layers) {
    for (const auto* blk : {&l.self_attn, &l.cross_attn}) {
      for (const auto& id : blk->activation_sites()) act(id);
      for (const auto& id : blk->weight_sites()) wt(id);
    }
    for (const auto& id : l.ffn.activation_sites()) act(id);
    for (const auto& id : l.ffn.weight_sites()) wt(id);
  }
  act("decoder.final_norm.output");
  wt("decoder.output_proj.weight");
  return out;
}

std::vector<std::string> EncoderDecoder::attention_output_sites() const {
  std::vector<std::string> ids;
  for (const auto& l : encoder_layers) ids.push_back(l.self_attn.prefix() + ".output");
  for (const auto& l : decoder_layers) {
    ids.push_back(l.self_attn.prefix() + ".output");
    ids.push_back(l.cross_attn.prefix() + ".output");
  }
  return ids;
}

std::size_t EncoderDecoder::linear_layer_count() const {
  std::size_t n = 1;  // frontend
  for (const auto& l : encoder_layers) n += 4 + (l.self_attn.has_gate() ? 1 : 0) + 2;
  for (const auto& l : decoder_layers)
    n += 4 + (l.self_attn.has_gate() ? 1 : 0) + 4 + (l.cross_attn.has_gate() ? 1 : 0) + 2;
  return n + 1;  // tied output projection
}

Tensor EncoderDecoder::weight_for_site(const std::string& site_id) const {
  if (site_id == "decoder.output_proj.weight") return embed_tokens;
  for (const auto& p : parameters())
    if (p.name == site_id && p.tensor.rank() == 2) return p.tensor;
  throw ConfigError("unresolved weight site '" + site_id + "'");
}

QuantPolicy default_policy(const EncoderDecoder& model, int bits, double ema_decay) {
  QuantPolicy policy;
  policy.bits = bits;
  policy.ema_decay = ema_decay;
  const std::string last_enc_output =
      "encoder.layers." + std::to_string(model.config().enc_layers - 1) + ".ffn.output";
  for (const auto& s : model.sites()) {
    const bool skip = s.kind == SiteKind::Activation &&
                      (s.site_id == last_enc_output || s.site_id == "encoder.final_norm.output");
    policy.entries.push_back({s.site_id, s.kind, !skip});
  }
  return policy;
}

QuantPolicy passthrough_policy(const EncoderDecoder& model) {
  QuantPolicy policy;
  for (const auto& s : model.sites()) policy.entries.push_back({s.site_id, s.kind, false});
  return policy;
}

std::map<std::string, QuantizerSite> InstrumentedModel::all_sites() const {
  auto sites = weight_sites;
  for (const auto& [id, s] : runtime.sites()) sites.emplace(id, s);
  return sites;
}

InstrumentedModel apply_policy(const EncoderDecoder& model, const QuantPolicy& policy) {
  std::map<std::string, SiteKind> known;
  for (const auto& s : model.sites()) known.emplace(s.site_id, s.kind);
  std::set<std::string> covered;
  for (const auto& e : policy.entries) {
    auto it = known.find(e.site_id);
    if (it == known.end()) throw ConfigError("policy site '" + e.site_id + "' does not resolve against the model");
    if (it->second != e.kind) throw ConfigError("policy site '" + e.site_id + "' has the wrong kind");
    if (!covered.insert(e.site_id).second) throw ConfigError("policy lists site '" + e.site_id + "' twice");
  }
  for (const auto& [id, kind] : known)
    if (!covered.count(id)) throw ConfigError("policy does not cover model site '" + id + "'");

  InstrumentedModel qm{model.clone(), QuantizationRuntime(policy), {}, policy};
  for (const auto& e : policy.entries) {
    if (e.kind != SiteKind::Weight) continue;
    QuantizerSite site{e.site_id, SiteKind::Weight, e.enabled, std::nullopt, std::nullopt};
    if (e.enabled) {
      Tensor w = qm.model.weight_for_site(e.site_id);
      const QuantParams p = weight_qparams(w, policy.bits);
      for (auto& v : w.data()) v = fake_quantize_value(v, p);
      site.params = p;
    }
    qm.weight_sites.emplace(e.site_id, std::move(site));
  }
  qm.runtime.set_mode(QuantizationRuntime::Mode::Quantize);
  return qm;
}

CalibrationSummary calibrate(InstrumentedModel& qmodel, std::span<const Batch> batches) {
  return calibrate(qmodel.runtime, batches.size(), [&](std::size_t b, SiteHook<float>& hook) {
    (void)qmodel.model.forward(batches[b], &hook);
  });
}

void load_calibration(InstrumentedModel& qmodel, const std::map<std::string, QuantizerSite>& sites) {
  for (auto& [id, site] : qmodel.runtime.sites()) {
    auto it = sites.find(id);
    if (it == sites.end()) throw ConfigError("calibration file has no entry for site '" + id + "'");
    if (it->second.enabled != site.enabled)
      throw ConfigError("calibration file disagrees with the policy on site '" + id + "'");
    site.params = it->second.params;
    site.range = it->second.range;
  }
  if (!qmodel.runtime.finalized()) throw ConfigError("calibration file leaves enabled sites without parameters");
  qmodel.runtime.set_mode(QuantizationRuntime::Mode::Quantize);
}

}  // namespace qgate
