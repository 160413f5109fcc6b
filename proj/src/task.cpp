#include "qgate/task.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <random>
#include <sstream>

#include "qgate/errors.hpp"
#include "qgate/hashing.hpp"
#include "qgate/serialize.hpp"

namespace qgate {

void TaskSpec::validate() const {
  if (vocab_size <= static_cast<std::size_t>(kFirstSymbolId) + 1) throw ConfigError("task needs at least two symbols");
  if (symbol_count() > feature_dim)
    throw ConfigError("orthonormal prototypes need feature_dim >= number of symbols");
  if (min_frames == 0 || min_frames > max_frames) throw ConfigError("invalid frames-per-symbol range");
  if (min_symbols == 0 || min_symbols > max_symbols) throw ConfigError("invalid symbols-per-utterance range");
  if (noise_sigma < 0.0) throw ConfigError("noise_sigma must be non-negative");
}

nlohmann::json TaskSpec::to_json() const {
  return {{"vocab_size", vocab_size}, {"feature_dim", feature_dim}, {"min_frames", min_frames},
          {"max_frames", max_frames}, {"noise_sigma", noise_sigma},   {"min_symbols", min_symbols},
          {"max_symbols", max_symbols}, {"seed", seed}};
}

TaskSpec TaskSpec::from_json(const nlohmann::json& j) {
  TaskSpec s;
  s.vocab_size = j.value("vocab_size", s.vocab_size);
  s.feature_dim = j.value("feature_dim", s.feature_dim);
  s.min_frames = j.value("min_frames", s.min_frames);
  s.max_frames = j.value("max_frames", s.max_frames);
  s.noise_sigma = j.value("noise_sigma", s.noise_sigma);
  s.min_symbols = j.value("min_symbols", s.min_symbols);
  s.max_symbols = j.value("max_symbols", s.max_symbols);
  s.seed = j.value("seed", s.seed);
  s.validate();
  return s;
}

namespace {

Rng keyed_rng(std::uint64_t seed, const std::string& stream, std::uint64_t index) {
  std::vector<std::uint32_t> key{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                                 static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
  for (unsigned char c : stream) key.push_back(c);
  std::seed_seq seq(key.begin(), key.end());
  return Rng(seq);
}

}  // namespace

std::vector<float> symbol_prototypes(const TaskSpec& spec) {
  spec.validate();
  const std::size_t n = spec.symbol_count(), d = spec.feature_dim;
  Rng rng = keyed_rng(spec.seed, "prototypes", 0);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> rows(n * d);
  for (auto& v : rows) v = normal(rng);
  // Modified Gram-Schmidt.
  for (std::size_t i = 0; i < n; ++i) {
    double* ri = rows.data() + i * d;
    for (std::size_t j = 0; j < i; ++j) {
      const double* rj = rows.data() + j * d;
      double dot = 0.0;
      for (std::size_t k = 0; k < d; ++k) dot += ri[k] * rj[k];
      for (std::size_t k = 0; k < d; ++k) ri[k] -= dot * rj[k];
    }
    double norm = 0.0;
    for (std::size_t k = 0; k < d; ++k) norm += ri[k] * ri[k];
    norm = std::sqrt(norm);
    for (std::size_t k = 0; k < d; ++k) ri[k] /= norm;
  }
  return std::vector<float>(rows.begin(), rows.end());
}

std::vector<Example> generate_split(const TaskSpec& spec, const std::string& split, std::size_t n) {
  const auto protos = symbol_prototypes(spec);
  const std::size_t d = spec.feature_dim;
  const int n_symbols = static_cast<int>(spec.symbol_count());
  std::vector<Example> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng = keyed_rng(spec.seed, split, i);
    std::uniform_int_distribution<std::size_t> len_dist(spec.min_symbols, spec.max_symbols);
    std::uniform_int_distribution<std::size_t> frame_dist(spec.min_frames, spec.max_frames);
    std::uniform_int_distribution<int> sym_dist(0, n_symbols - 1);
    std::normal_distribution<double> noise(0.0, 1.0);

    const std::size_t length = len_dist(rng);
    std::vector<int> symbols;
    // Adjacent repeats would be indistinguishable from a longer single symbol.
    while (symbols.size() < length) {
      const int s = sym_dist(rng);
      if (!symbols.empty() && symbols.back() == s) continue;
      symbols.push_back(s);
    }
    std::vector<float> frames;
    for (int s : symbols) {
      const std::size_t reps = frame_dist(rng);
      for (std::size_t r = 0; r < reps; ++r) {
        for (std::size_t k = 0; k < d; ++k)
          frames.push_back(static_cast<float>(protos[static_cast<std::size_t>(s) * d + k] + spec.noise_sigma * noise(rng)));
      }
    }
    Example ex;
    const std::size_t rows = frames.size() / d;
    ex.features = Tensor(Shape{rows, d}, std::move(frames));
    ex.target_ids.push_back(kBosId);
    for (int s : symbols) ex.target_ids.push_back(s + kFirstSymbolId);
    ex.target_ids.push_back(kEosId);
    out.push_back(std::move(ex));
  }
  return out;
}

DatasetSplits generate(const TaskSpec& spec, std::size_t n_train, std::size_t n_validation, std::size_t n_test) {
  return {generate_split(spec, "train", n_train), generate_split(spec, "validation", n_validation),
          generate_split(spec, "test", n_test)};
}

std::string example_hash(const Example& ex) {
  std::string bytes(reinterpret_cast<const char*>(ex.features.data().data()), ex.features.numel() * sizeof(float));
  bytes.append(reinterpret_cast<const char*>(ex.target_ids.data()), ex.target_ids.size() * sizeof(int));
  return sha256_hex(bytes);
}

Batch make_batch(std::span<const Example> examples) {
  if (examples.empty()) throw DataError("make_batch: no examples");
  const std::size_t d = examples.front().features.dim(1);
  std::vector<std::size_t> src_lengths, tgt_lengths;
  std::size_t rows = 0;
  for (const auto& ex : examples) {
    if (ex.features.dim(1) != d) throw DimensionError("make_batch: inconsistent feature dims");
    if (ex.target_ids.size() < 2) throw DataError("make_batch: target must hold at least bos and eos");
    src_lengths.push_back(ex.features.dim(0));
    rows += ex.features.dim(0);
    tgt_lengths.push_back(ex.target_ids.size() - 1);
  }
  Batch b;
  b.features = Tensor(Shape{rows, d});
  std::size_t off = 0;
  for (const auto& ex : examples) {
    std::copy(ex.features.data().begin(), ex.features.data().end(),
              b.features.data().begin() + static_cast<std::ptrdiff_t>(off));
    off += ex.features.numel();
    b.decoder_input.insert(b.decoder_input.end(), ex.target_ids.begin(), ex.target_ids.end() - 1);
    b.decoder_target.insert(b.decoder_target.end(), ex.target_ids.begin() + 1, ex.target_ids.end());
  }
  b.source = SequenceLayout(std::move(src_lengths));
  b.target = SequenceLayout(std::move(tgt_lengths));
  return b;
}

std::vector<int> transcript(const Example& ex) {
  std::vector<int> out;
  for (int id : ex.target_ids)
    if (id >= kFirstSymbolId) out.push_back(id);
  return out;
}

std::size_t edit_distance(std::span<const int> reference, std::span<const int> hypothesis) {
  std::vector<std::size_t> prev(hypothesis.size() + 1), cur(hypothesis.size() + 1);
  for (std::size_t j = 0; j <= hypothesis.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= reference.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= hypothesis.size(); ++j) {
      const std::size_t sub = prev[j - 1] + (reference[i - 1] == hypothesis[j - 1] ? 0 : 1);
      cur[j] = std::min({sub, prev[j] + 1, cur[j - 1] + 1});
    }
    std::swap(prev, cur);
  }
  return prev[hypothesis.size()];
}

double wer(std::span<const int> reference, std::span<const int> hypothesis) {
  if (reference.empty()) throw DataError("wer: empty reference");
  return static_cast<double>(edit_distance(reference, hypothesis)) / static_cast<double>(reference.size());
}

double corpus_wer(const std::vector<std::vector<int>>& references, const std::vector<std::vector<int>>& hypotheses) {
  if (references.size() != hypotheses.size()) throw DataError("corpus_wer: reference/hypothesis count mismatch");
  std::size_t edits = 0, words = 0;
  for (std::size_t i = 0; i < references.size(); ++i) {
    edits += edit_distance(references[i], hypotheses[i]);
    words += references[i].size();
  }
  if (words == 0) throw DataError("corpus_wer: empty references");
  return static_cast<double>(edits) / static_cast<double>(words);
}

namespace {
constexpr char kDatasetMagic[8] = {'Q', 'G', 'A', 'T', 'E', 'D', 'A', 'T'};
constexpr std::uint32_t kDatasetVersion = 1;
}  // namespace

void save_dataset(const std::string& path, const TaskSpec& spec, const std::string& split,
                  std::span<const Example> examples) {
  std::ostringstream os;
  os.write(kDatasetMagic, sizeof kDatasetMagic);
  io::write_u32(os, kDatasetVersion);
  const nlohmann::json header{{"spec", spec.to_json()}, {"split", split}, {"count", examples.size()}};
  io::write_string(os, header.dump());
  for (const auto& ex : examples) {
    io::write_tensor(os, ex.features);
    const Shape shape{ex.target_ids.size()};
    io::write_tensor(os, Tensor(shape, std::vector<float>(ex.target_ids.begin(), ex.target_ids.end())));
  }
  io::write_file_atomic(path, os.str());
}

LoadedDataset load_dataset(const std::string& path) {
  std::istringstream is(io::read_file(path));
  char magic[8];
  is.read(magic, sizeof magic);
  if (!is || std::memcmp(magic, kDatasetMagic, sizeof magic) != 0) throw DataError(path + ": not a qgate dataset");
  const std::uint32_t version = io::read_u32(is);
  if (version != kDatasetVersion) throw DataError(path + ": unsupported dataset version");
  const auto header = nlohmann::json::parse(io::read_string(is));
  LoadedDataset ds;
  ds.spec = TaskSpec::from_json(header.at("spec"));
  ds.split = header.at("split").get<std::string>();
  const auto count = header.at("count").get<std::size_t>();
  for (std::size_t i = 0; i < count; ++i) {
    Example ex;
    ex.features = io::read_tensor(is);
    const Tensor ids = io::read_tensor(is);
    for (float v : ids.data()) ex.target_ids.push_back(static_cast<int>(v));
    ds.examples.push_back(std::move(ex));
  }
  return ds;
}

}  // namespace qgate
