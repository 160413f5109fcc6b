#include <cstring>
#include <sstream>

#include "qgate/errors.hpp"
#include "qgate/hashing.hpp"
#include "qgate/model.hpp"
#include "qgate/serialize.hpp"

namespace qgate {
namespace {

constexpr char kMagic[8] = {'Q', 'G', 'A', 'T', 'E', 'C', 'K', 'P'};
constexpr std::uint32_t kVersion = 1;
constexpr std::size_t kDigestSize = 32;

struct RawCheckpoint {
  nlohmann::json header;
  std::vector<std::pair<std::string, Tensor>> tensors;
};

RawCheckpoint read_raw(const std::string& path) {
  const std::string bytes = io::read_file(path);
  constexpr std::size_t fixed = sizeof kMagic + 4 + 8 + kDigestSize;
  if (bytes.size() < fixed || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0)
    throw DataError(path + ": not a qgate checkpoint");
  std::istringstream in(bytes.substr(sizeof kMagic, 12));
  const std::uint32_t version = io::read_u32(in);
  if (version != kVersion) throw DataError(path + ": unsupported checkpoint version " + std::to_string(version));
  const std::uint64_t payload_size = io::read_u64(in);
  if (bytes.size() != fixed + payload_size)
    throw DataError(path + ": truncated or padded checkpoint (expected " + std::to_string(fixed + payload_size) +
                    " bytes, found " + std::to_string(bytes.size()) + ")");
  const std::string_view digest(bytes.data() + sizeof kMagic + 12, kDigestSize);
  const std::string_view payload(bytes.data() + fixed, payload_size);
  if (sha256_raw(payload) != digest) throw DataError(path + ": checkpoint checksum mismatch");

  std::istringstream body{std::string(payload)};
  RawCheckpoint raw;
  raw.header = nlohmann::json::parse(io::read_string(body));
  const std::uint64_t count = io::read_u64(body);
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string name = io::read_string(body);
    raw.tensors.emplace_back(std::move(name), io::read_tensor(body));
  }
  return raw;
}

void assign(EncoderDecoder& model, const RawCheckpoint& raw, const std::string& path) {
  auto params = model.parameters();
  if (params.size() != raw.tensors.size())
    throw ConfigError(path + ": checkpoint holds " + std::to_string(raw.tensors.size()) + " tensors, model expects " +
                      std::to_string(params.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& [name, t] = raw.tensors[i];
    if (name != params[i].name) throw ConfigError(path + ": tensor '" + name + "' where '" + params[i].name + "' expected");
    if (t.shape() != params[i].tensor.shape())
      throw ConfigError(path + ": shape mismatch for '" + name + "': " + shape_str(t.shape()) + " vs " +
                        shape_str(params[i].tensor.shape()));
    std::copy(t.data().begin(), t.data().end(), params[i].tensor.data().begin());
  }
}

}  // namespace

void save_checkpoint(const EncoderDecoder& model, const std::string& path, const nlohmann::json& metadata) {
  std::ostringstream body;
  const nlohmann::json header{{"format", "qgate-checkpoint"}, {"model", model.config().to_json()}, {"metadata", metadata}};
  io::write_string(body, header.dump());
  const auto params = model.parameters();
  io::write_u64(body, params.size());
  for (const auto& p : params) {
    io::write_string(body, p.name);
    io::write_tensor(body, p.tensor);
  }
  const std::string payload = body.str();

  std::ostringstream file;
  file.write(kMagic, sizeof kMagic);
  io::write_u32(file, kVersion);
  io::write_u64(file, payload.size());
  file << sha256_raw(payload) << payload;
  io::write_file_atomic(path, file.str());
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
  RawCheckpoint raw = read_raw(path);
  const ModelConfig config = ModelConfig::from_json(raw.header.at("model"));
  LoadedCheckpoint out{EncoderDecoder(config, 0), raw.header.value("metadata", nlohmann::json::object())};
  assign(out.model, raw, path);
  return out;
}

void load_checkpoint(EncoderDecoder& model, const std::string& path) {
  RawCheckpoint raw = read_raw(path);
  const ModelConfig stored = ModelConfig::from_json(raw.header.at("model"));
  if (!stored.same_architecture(model.config()))
    throw ConfigError(path + ": checkpoint architecture " + raw.header.at("model").dump() +
                      " does not match the target model");
  assign(model, raw, path);
}

}  // namespace qgate
