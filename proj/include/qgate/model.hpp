#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "qgate/attention.hpp"
#include "qgate/layers.hpp"
#include "qgate/quant.hpp"
#include "qgate/tensor.hpp"

namespace qgate {

inline constexpr int kPadId = 0;
inline constexpr int kBosId = 1;
inline constexpr int kEosId = 2;
inline constexpr int kFirstSymbolId = 3;

struct ModelConfig {
  std::size_t enc_layers = 8;
  std::size_t dec_layers = 4;
  std::size_t model_dim = 128;
  std::size_t n_heads = 4;
  std::size_t ffn_dim = 512;
  std::size_t vocab_size = 64;
  std::size_t feature_dim = 64;
  std::size_t max_source_len = 64;
  std::size_t max_target_len = 24;
  bool gated = false;
  bool gate_cross_attention = false;
  double gate_bias_init = 4.0;

  void validate() const;
  // Fields that fix parameter shapes; checkpoints must agree on these.
  bool same_architecture(const ModelConfig& other) const;
  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

/// Teacher-forced batch of packed sequences.
struct Batch {
  Tensor features;                  // [sum L, feature_dim]
  SequenceLayout source;
  std::vector<int> decoder_input;   // bos y1 .. yn per sequence
  std::vector<int> decoder_target;  // y1 .. yn eos per sequence
  SequenceLayout target;
};

struct SiteInfo {
  std::string site_id;
  SiteKind kind;
};

template <typename T>
struct EncoderLayer {
  LayerNorm<T> attn_norm;
  AttentionBlock<T> self_attn;
  LayerNorm<T> ffn_norm;
  FeedForward<T> ffn;
};

template <typename T>
struct DecoderLayer {
  LayerNorm<T> self_attn_norm;
  AttentionBlock<T> self_attn;
  LayerNorm<T> cross_attn_norm;
  AttentionBlock<T> cross_attn;
  LayerNorm<T> ffn_norm;
  FeedForward<T> ffn;
};

/// Pre-norm encoder-decoder transformer with a linear feature frontend,
/// sinusoidal positions on both sides and an output projection tied to the
/// token embedding.
class EncoderDecoder {
 public:
  EncoderDecoder(ModelConfig config, std::uint64_t seed);
  EncoderDecoder(const EncoderDecoder&) = delete;
  EncoderDecoder& operator=(const EncoderDecoder&) = delete;
  EncoderDecoder(EncoderDecoder&&) = default;
  EncoderDecoder& operator=(EncoderDecoder&&) = default;

  /// Deep copy of all parameters.
  EncoderDecoder clone() const;

  const ModelConfig& config() const { return config_; }

  Tensor encode(const Tensor& features, SiteHook<float>* hook = nullptr) const;
  Tensor encode(const Tensor& features, const SequenceLayout& layout, SiteHook<float>* hook = nullptr) const;

  /// Logits [sum T, vocab] for packed decoder inputs attending to packed memory.
  Tensor decode(const Tensor& memory, const SequenceLayout& memory_layout, std::span<const int> input_ids,
                const SequenceLayout& input_layout, SiteHook<float>* hook = nullptr) const;

  /// Teacher-forced logits for a batch.
  Tensor forward(const Batch& batch, SiteHook<float>* hook = nullptr) const;

  /// Next-token logits [vocab] after `prefix` (which starts with bos).
  Tensor decode_step(const Tensor& memory, std::span<const int> prefix, SiteHook<float>* hook = nullptr) const;

  /// Argmax decoding until eos or max_len tokens. Returns tokens without bos/eos.
  std::vector<int> greedy_decode(const Tensor& features, std::size_t max_len, int eos_id = kEosId,
                                 SiteHook<float>* hook = nullptr) const;
  std::vector<std::vector<int>> greedy_decode_batch(std::span<const Tensor> features, std::size_t max_len,
                                                    int eos_id = kEosId, SiteHook<float>* hook = nullptr) const;

  ParamList<float> parameters() const;
  std::vector<SiteInfo> sites() const;
  std::vector<std::string> attention_output_sites() const;
  std::size_t linear_layer_count() const;
  /// Tensor quantized at a weight site (the embedding table for the tied output projection).
  Tensor weight_for_site(const std::string& site_id) const;

  Linear<float> frontend;
  std::vector<EncoderLayer<float>> encoder_layers;
  LayerNorm<float> encoder_norm;
  Tensor embed_tokens;  // [vocab, model_dim], also the output projection
  std::vector<DecoderLayer<float>> decoder_layers;
  LayerNorm<float> decoder_norm;

 private:
  Tensor positions(const SequenceLayout& layout, std::size_t max_len) const;

  ModelConfig config_;
  std::vector<float> position_table_;
};

/// Skip rule: every weight site is quantized; every activation site except
/// the FFN output projection of the last encoder layer and the encoder's
/// final layer norm output.
QuantPolicy default_policy(const EncoderDecoder& model, int bits = 8, double ema_decay = 0.9);

/// A policy with every site disabled (FP passthrough).
QuantPolicy passthrough_policy(const EncoderDecoder& model);

struct InstrumentedModel {
  EncoderDecoder model;  // weights fake-quantized at enabled weight sites
  QuantizationRuntime runtime;
  std::map<std::string, QuantizerSite> weight_sites;
  QuantPolicy policy;

  /// Weight and activation sites together, keyed by id.
  std::map<std::string, QuantizerSite> all_sites() const;
};

/// Throws ConfigError when a policy entry does not resolve against the model
/// or a model site is missing from the policy.
InstrumentedModel apply_policy(const EncoderDecoder& model, const QuantPolicy& policy);

CalibrationSummary calibrate(InstrumentedModel& qmodel, std::span<const Batch> batches);

/// Installs calibrated activation parameters (from a calibration document) into
/// the runtime and switches it to Quantize mode.
void load_calibration(InstrumentedModel& qmodel, const std::map<std::string, QuantizerSite>& sites);

// Checkpoint file: "QGATECKP" magic, u32 version, u64 payload size, 32-byte
// SHA-256 of the payload, then the payload: JSON header string (model config
// plus metadata), u64 tensor count, and (name, tensor blob) pairs.
void save_checkpoint(const EncoderDecoder& model, const std::string& path,
                     const nlohmann::json& metadata = nlohmann::json::object());

struct LoadedCheckpoint {
  EncoderDecoder model;
  nlohmann::json metadata;
};

LoadedCheckpoint load_checkpoint(const std::string& path);
/// Loads parameters into an existing model; throws ConfigError on architecture mismatch.
void load_checkpoint(EncoderDecoder& model, const std::string& path);

}  // namespace qgate
