#include "qgate/analytics.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <sstream>

#include "qgate/errors.hpp"
#include "qgate/serialize.hpp"
#include "qgate/task.hpp"

namespace qgate {

void MomentAccumulator::add(double x) {
  const double n1 = static_cast<double>(n_);
  ++n_;
  const double n = static_cast<double>(n_);
  const double delta = x - mean_;
  const double dn = delta / n;
  const double dn2 = dn * dn;
  const double term1 = delta * dn * n1;
  mean_ += dn;
  m4_ += term1 * dn2 * (n * n - 3.0 * n + 3.0) + 6.0 * dn2 * m2_ - 4.0 * dn * m3_;
  m3_ += term1 * dn * (n - 2.0) - 3.0 * dn * m2_;
  m2_ += term1;
}

void MomentAccumulator::add(std::span<const float> xs) {
  MomentAccumulator local;
  for (float x : xs) local.add(static_cast<double>(x));
  merge(local);
}

void MomentAccumulator::merge(const MomentAccumulator& o) {
  if (o.n_ == 0) return;
  if (n_ == 0) {
    *this = o;
    return;
  }
  const double na = static_cast<double>(n_), nb = static_cast<double>(o.n_);
  const double n = na + nb;
  const double delta = o.mean_ - mean_;
  const double d2 = delta * delta, d3 = d2 * delta, d4 = d2 * d2;
  const double m2 = m2_ + o.m2_ + d2 * na * nb / n;
  const double m3 = m3_ + o.m3_ + d3 * na * nb * (na - nb) / (n * n) + 3.0 * delta * (na * o.m2_ - nb * m2_) / n;
  const double m4 = m4_ + o.m4_ + d4 * na * nb * (na * na - na * nb + nb * nb) / (n * n * n) +
                    6.0 * d2 * (na * na * o.m2_ + nb * nb * m2_) / (n * n) + 4.0 * delta * (na * o.m3_ - nb * m3_) / n;
  mean_ += delta * nb / n;
  m2_ = m2;
  m3_ = m3;
  m4_ = m4;
  n_ += o.n_;
}

double MomentAccumulator::variance() const { return n_ == 0 ? 0.0 : m2_ / static_cast<double>(n_); }

double MomentAccumulator::kurtosis() const {
  if (n_ < 4) throw NumericalError("kurtosis needs at least 4 values");
  if (!(m2_ > 0.0)) throw NumericalError("kurtosis undefined for zero variance");
  return static_cast<double>(n_) * m4_ / (m2_ * m2_);
}

double kurtosis(std::span<const float> x) {
  if (x.size() < 4) throw NumericalError("kurtosis needs at least 4 values");
  double mean = 0.0;
  for (float v : x) mean += v;
  mean /= static_cast<double>(x.size());
  double m2 = 0.0, m4 = 0.0;
  for (float v : x) {
    const double d = v - mean, d2 = d * d;
    m2 += d2;
    m4 += d2 * d2;
  }
  if (!(m2 > 0.0)) throw NumericalError("kurtosis undefined for zero variance");
  m2 /= static_cast<double>(x.size());
  m4 /= static_cast<double>(x.size());
  return m4 / (m2 * m2);
}

double inf_norm(std::span<const float> x) {
  if (x.empty()) throw DataError("inf_norm of an empty tensor");
  double m = 0.0;
  for (float v : x) m = std::max(m, static_cast<double>(std::fabs(v)));
  return m;
}

OutlierCount count_outliers(const Tensor& x) {
  OutlierCount out;
  const std::size_t dims = x.rank() == 0 ? 1 : x.dim(x.rank() - 1);
  out.per_dimension.assign(dims, 0);
  const auto v = x.data();
  if (v.empty()) return out;
  double mean = 0.0;
  for (float a : v) mean += a;
  mean /= static_cast<double>(v.size());
  double var = 0.0;
  for (float a : v) var += (a - mean) * (a - mean);
  const double sd = std::sqrt(var / static_cast<double>(v.size()));
  if (!(sd > 0.0)) return out;
  const double threshold = 6.0 * sd;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (std::fabs(v[i] - mean) > threshold) {
      ++out.count;
      ++out.per_dimension[i % dims];
    }
  }
  return out;
}

void ActivationTrace::add_batch(const Tensor& x) {
  moments.add(x.data());
  max_abs = std::max(max_abs, x.numel() ? inf_norm(x.data()) : 0.0);
  const OutlierCount oc = count_outliers(x);
  if (per_dimension.size() < oc.per_dimension.size()) per_dimension.resize(oc.per_dimension.size(), 0);
  for (std::size_t d = 0; d < oc.per_dimension.size(); ++d) per_dimension[d] += oc.per_dimension[d];
  outliers += oc.count;
  ++batches;
}

OutlierTracer::OutlierTracer(const std::vector<std::string>& site_ids) {
  for (const auto& id : site_ids) traces_[id].site_id = id;
}

Tensor OutlierTracer::on_activation(const std::string& site_id, const Tensor& x) {
  auto it = traces_.find(site_id);
  if (it != traces_.end()) {
    std::lock_guard lock(mutex_);
    it->second.add_batch(x);
  }
  return x;
}

std::vector<ActivationTrace> OutlierTracer::traces() const {
  std::lock_guard lock(mutex_);
  std::vector<ActivationTrace> out;
  for (const auto& [id, t] : traces_) out.push_back(t);
  return out;
}

namespace {

std::vector<double> shares(const std::vector<std::size_t>& counts, std::size_t total) {
  std::vector<double> s(counts.size(), 0.0);
  if (total == 0) return s;
  for (std::size_t i = 0; i < counts.size(); ++i) s[i] = static_cast<double>(counts[i]) / static_cast<double>(total);
  return s;
}

}  // namespace

OutlierReport aggregate(std::span<const ActivationTrace> traces) {
  if (traces.empty()) throw DataError("aggregate: no traces");
  std::vector<const ActivationTrace*> sorted;
  for (const auto& t : traces) sorted.push_back(&t);
  std::sort(sorted.begin(), sorted.end(),
            [](const ActivationTrace* a, const ActivationTrace* b) { return a->site_id < b->site_id; });

  OutlierReport r;
  std::vector<std::size_t> dim_counts;
  double kurt_sum = 0.0;
  for (const auto* t : sorted) {
    if (t->moments.count() == 0) throw DataError("aggregate: site '" + t->site_id + "' saw no activations");
    SiteOutlierStats s;
    s.site_id = t->site_id;
    s.kurtosis = t->moments.kurtosis();
    s.max_inf_norm = t->max_abs;
    s.outlier_count = t->outliers;
    s.per_dimension_shares = shares(t->per_dimension, t->outliers);
    kurt_sum += s.kurtosis;
    r.max_inf_norm = std::max(r.max_inf_norm, t->max_abs);
    r.total_outlier_count += t->outliers;
    if (dim_counts.size() < t->per_dimension.size()) dim_counts.resize(t->per_dimension.size(), 0);
    for (std::size_t d = 0; d < t->per_dimension.size(); ++d) dim_counts[d] += t->per_dimension[d];
    r.sites.push_back(std::move(s));
  }
  r.average_kurtosis = kurt_sum / static_cast<double>(sorted.size());
  r.per_dimension_shares = shares(dim_counts, r.total_outlier_count);
  return r;
}

std::vector<std::pair<std::size_t, double>> OutlierReport::top_dimensions(std::size_t k) const {
  std::vector<std::pair<std::size_t, double>> v;
  for (std::size_t d = 0; d < per_dimension_shares.size(); ++d)
    if (per_dimension_shares[d] > 0.0) v.emplace_back(d, per_dimension_shares[d]);
  std::stable_sort(v.begin(), v.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  if (v.size() > k) v.resize(k);
  return v;
}

nlohmann::json OutlierReport::to_json() const {
  nlohmann::json sites_json = nlohmann::json::array();
  for (const auto& s : sites)
    sites_json.push_back({{"site_id", s.site_id},
                          {"kurtosis", s.kurtosis},
                          {"max_inf_norm", s.max_inf_norm},
                          {"outlier_count", s.outlier_count},
                          {"per_dimension_shares", s.per_dimension_shares}});
  nlohmann::json top = nlohmann::json::array();
  for (const auto& [d, share] : top_dimensions()) top.push_back({{"dimension", d}, {"share", share}});
  return {{"format", "qgate-outlier-report"},
          {"version", 1},
          {"average_kurtosis", average_kurtosis},
          {"max_inf_norm", max_inf_norm},
          {"total_outlier_count", total_outlier_count},
          {"per_dimension_shares", per_dimension_shares},
          {"top_dimensions", top},
          {"sites", sites_json}};
}

std::string OutlierReport::to_csv() const {
  std::ostringstream os;
  os.precision(17);
  os << "site_id,kurtosis,max_inf_norm,outlier_count\n";
  for (const auto& s : sites) os << s.site_id << ',' << s.kurtosis << ',' << s.max_inf_norm << ',' << s.outlier_count << '\n';
  os << "ALL," << average_kurtosis << ',' << max_inf_norm << ',' << total_outlier_count << '\n';
  return os.str();
}

namespace {

class CaptureHook final : public SiteHook<float> {
 public:
  explicit CaptureHook(std::string site) : site_(std::move(site)) {}
  Tensor on_activation(const std::string& site_id, const Tensor& x) override {
    if (site_id == site_) captured = x.clone();
    return x;
  }
  Tensor captured;

 private:
  std::string site_;
};

Tensor slice_head(const Tensor& t, std::size_t head) {
  const std::size_t rows = t.dim(1), cols = t.dim(2);
  Tensor out(Shape{rows, cols});
  std::copy_n(t.data().begin() + static_cast<std::ptrdiff_t>(head * rows * cols), rows * cols, out.data().begin());
  return out;
}

constexpr char kDumpMagic[8] = {'Q', 'G', 'A', 'T', 'E', 'A', 'T', 'T'};
constexpr std::uint32_t kDumpVersion = 1;

}  // namespace

AttentionDump attention_dump(const EncoderDecoder& model, const Example& example, const std::string& stack,
                             std::size_t layer, std::size_t head) {
  const ModelConfig& cfg = model.config();
  const AttentionBlock<float>* block = nullptr;
  if (stack == "encoder") {
    if (layer >= cfg.enc_layers) throw IndexError("encoder layer " + std::to_string(layer) + " out of range");
    block = &model.encoder_layers[layer].self_attn;
  } else if (stack == "decoder") {
    if (layer >= cfg.dec_layers) throw IndexError("decoder layer " + std::to_string(layer) + " out of range");
    block = &model.decoder_layers[layer].self_attn;
  } else {
    throw ConfigError("attention stack must be 'encoder' or 'decoder', got '" + stack + "'");
  }
  if (head >= cfg.n_heads) throw IndexError("head " + std::to_string(head) + " out of range");

  CaptureHook capture(block->prefix() + ".input");
  {
    NoGradScope no_grad;
    const Batch batch = make_batch(std::span<const Example>(&example, 1));
    model.forward(batch, &capture);
  }
  const AttentionInspection<float> ins = block->inspect(capture.captured);

  AttentionDump dump;
  dump.stack = stack;
  dump.layer = layer;
  dump.head = head;
  dump.probs = slice_head(ins.probs, head);
  dump.values = slice_head(ins.values, head);
  dump.product = slice_head(ins.product, head);
  if (stack == "encoder") {
    for (std::size_t i = 0; i < example.features.dim(0); ++i) dump.token_labels.push_back("f" + std::to_string(i));
  } else {
    for (std::size_t i = 0; i + 1 < example.target_ids.size(); ++i) {
      const int id = example.target_ids[i];
      dump.token_labels.push_back(id == kBosId ? "<bos>" : "s" + std::to_string(id));
    }
  }
  return dump;
}

std::string write_attention_dump(const AttentionDump& dump, const std::string& dir) {
  std::filesystem::create_directories(dir);
  const std::string stem = dump.stack + "_layer" + std::to_string(dump.layer) + "_head" + std::to_string(dump.head);
  const auto base = std::filesystem::path(dir) / stem;
  std::ostringstream os;
  os.write(kDumpMagic, sizeof kDumpMagic);
  io::write_u32(os, kDumpVersion);
  io::write_tensor(os, dump.probs);
  io::write_tensor(os, dump.values);
  io::write_tensor(os, dump.product);
  const std::string bin = base.string() + ".bin";
  io::write_file_atomic(bin, os.str());
  const nlohmann::json side{{"format", "qgate-attention-dump"},
                            {"version", kDumpVersion},
                            {"stack", dump.stack},
                            {"layer", dump.layer},
                            {"head", dump.head},
                            {"tensors", {"P", "V", "PV"}},
                            {"token_labels", dump.token_labels}};
  io::write_file_atomic(base.string() + ".json", side.dump(2) + "\n");
  return bin;
}

AttentionDump read_attention_dump(const std::string& bin_path) {
  std::istringstream is(io::read_file(bin_path));
  char magic[8];
  is.read(magic, sizeof magic);
  if (!is || std::memcmp(magic, kDumpMagic, sizeof magic) != 0) throw DataError(bin_path + ": not an attention dump");
  if (io::read_u32(is) != kDumpVersion) throw DataError(bin_path + ": unsupported attention dump version");
  AttentionDump d;
  d.probs = io::read_tensor(is);
  d.values = io::read_tensor(is);
  d.product = io::read_tensor(is);
  std::filesystem::path side(bin_path);
  side.replace_extension(".json");
  const auto j = nlohmann::json::parse(io::read_file(side.string()));
  d.stack = j.at("stack").get<std::string>();
  d.layer = j.at("layer").get<std::size_t>();
  d.head = j.at("head").get<std::size_t>();
  d.token_labels = j.at("token_labels").get<std::vector<std::string>>();
  return d;
}

}  // namespace qgate
