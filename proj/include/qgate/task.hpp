#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "qgate/model.hpp"
#include "qgate/tensor.hpp"

namespace qgate {

/// Synthetic transcription task: each symbol is rendered as its prototype
/// feature vector repeated for a random number of frames, plus Gaussian noise.
struct TaskSpec {
  std::size_t vocab_size = 64;  // including pad/bos/eos
  std::size_t feature_dim = 64;
  std::size_t min_frames = 1;   // frames per symbol, inclusive range
  std::size_t max_frames = 3;
  double noise_sigma = 0.1;
  std::size_t min_symbols = 3;  // symbols per utterance, inclusive range
  std::size_t max_symbols = 8;
  std::uint64_t seed = 1234;

  std::size_t symbol_count() const { return vocab_size - static_cast<std::size_t>(kFirstSymbolId); }
  std::size_t max_source_len() const { return max_symbols * max_frames; }
  void validate() const;
  nlohmann::json to_json() const;
  static TaskSpec from_json(const nlohmann::json& j);
};

struct Example {
  Tensor features;              // [L, feature_dim]
  std::vector<int> target_ids;  // bos y1 .. yn eos
};

/// Unit-norm, mutually orthogonal prototype rows [symbol_count, feature_dim].
/// Depends only on (seed, vocab_size, feature_dim), so ID and OOD variants share them.
std::vector<float> symbol_prototypes(const TaskSpec& spec);

/// Generates `n` examples of a named split. Each example draws from its own
/// generator keyed by (seed, split, index), so distinct split names never
/// share a random stream.
std::vector<Example> generate_split(const TaskSpec& spec, const std::string& split, std::size_t n);

struct DatasetSplits {
  std::vector<Example> train;
  std::vector<Example> validation;
  std::vector<Example> test;
};

DatasetSplits generate(const TaskSpec& spec, std::size_t n_train, std::size_t n_validation, std::size_t n_test);

/// SHA-256 over an example's feature bytes and token ids.
std::string example_hash(const Example& ex);

Batch make_batch(std::span<const Example> examples);

/// Transcript tokens without bos/eos.
std::vector<int> transcript(const Example& ex);

/// Levenshtein distance between token sequences.
std::size_t edit_distance(std::span<const int> reference, std::span<const int> hypothesis);

/// edit_distance / |reference|. Throws DataError for an empty reference. May exceed 1.
double wer(std::span<const int> reference, std::span<const int> hypothesis);

/// Corpus-level rate: total edits over total reference tokens.
double corpus_wer(const std::vector<std::vector<int>>& references, const std::vector<std::vector<int>>& hypotheses);

// Dataset file: "QGATEDAT" magic, u32 version, JSON header string
// {spec, split, count}, then per example a features tensor blob and a
// rank-1 tensor blob of token ids.
void save_dataset(const std::string& path, const TaskSpec& spec, const std::string& split,
                  std::span<const Example> examples);

struct LoadedDataset {
  TaskSpec spec;
  std::string split;
  std::vector<Example> examples;
};

LoadedDataset load_dataset(const std::string& path);

}  // namespace qgate
