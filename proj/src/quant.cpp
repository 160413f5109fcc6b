#include "qgate/quant.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>

#include "qgate/errors.hpp"

namespace qgate {

QuantParams compute_qparams(double min, double max, int bits) {
  if (bits < 2 || bits > 30) throw ConfigError("bitwidth " + std::to_string(bits) + " outside [2, 30]");
  if (!(min <= max)) throw ConfigError("quantization range has min > max or NaN bounds");
  min = std::min(min, 0.0);
  max = std::max(max, 0.0);
  QuantParams p;
  p.bits = bits;
  const double width = max - min;
  if (width == 0.0) {
    spdlog::warn("degenerate zero-width quantization range; falling back to scale=1, zero_point=0");
    p.scale = 1.0;
    p.zero_point = 0;
    return p;
  }
  const auto qmax = static_cast<double>(p.qmax());
  p.scale = width / qmax;
  // −min / s written as −min · qmax / width keeps halves exact (e.g. 127.5).
  const double z = std::round(-min * qmax / width);
  p.zero_point = static_cast<std::int64_t>(std::clamp(z, 0.0, qmax));
  return p;
}

float fake_quantize_value(float x, const QuantParams& p) {
  const double q = std::clamp(std::round(static_cast<double>(x) / p.scale) + static_cast<double>(p.zero_point), 0.0,
                              static_cast<double>(p.qmax()));
  return static_cast<float>(p.scale * (q - static_cast<double>(p.zero_point)));
}

template <typename T>
BasicTensor<T> fake_quantize(const BasicTensor<T>& x, const QuantParams& p) {
  const bool rec = active_tape() != nullptr && x.requires_grad();
  BasicTensor<T> out(x.shape(), rec);
  auto xv = x.data();
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = static_cast<T>(fake_quantize_value(static_cast<float>(xv[i]), p));
  if (rec) {
    const double lo = p.lower(), hi = p.upper();
    active_tape()->record([x, out, lo, hi]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto xv = x.data();
      auto gx = x.grad();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double v = xv[i];
        if (v >= lo && v <= hi) gx[i] += g[i];
      }
    });
  }
  return out;
}

template Tensor fake_quantize(const Tensor&, const QuantParams&);
template TensorD fake_quantize(const TensorD&, const QuantParams&);

QuantParams weight_qparams(const Tensor& w, int bits) {
  if (w.numel() == 0) throw DimensionError("weight_qparams: empty tensor");
  const auto [lo, hi] = std::minmax_element(w.data().begin(), w.data().end());
  return compute_qparams(*lo, *hi, bits);
}

void RangeState::observe(std::span<const float> batch, const std::string& site_id) {
  if (batch.empty()) throw DimensionError("observe: empty batch at site '" + site_id + "'");
  float bmin = batch[0], bmax = batch[0];
  for (float v : batch) {
    if (std::isnan(v)) throw NumericalError("calibration: NaN activation at site '" + site_id + "'");
    bmin = std::min(bmin, v);
    bmax = std::max(bmax, v);
  }
  if (observed_batches == 0) {
    running_min = bmin;
    running_max = bmax;
  } else {
    // Same value as decay·running + (1 − decay)·batch, but exact at the fixed point.
    running_min += (1.0 - decay) * (static_cast<double>(bmin) - running_min);
    running_max += (1.0 - decay) * (static_cast<double>(bmax) - running_max);
  }
  ++observed_batches;
}

RangeState observe(RangeState range, std::span<const float> batch) {
  range.observe(batch);
  return range;
}

std::string to_string(SiteKind kind) { return kind == SiteKind::Weight ? "weight" : "activation"; }

SiteKind site_kind_from_string(const std::string& s) {
  if (s == "weight") return SiteKind::Weight;
  if (s == "activation") return SiteKind::Activation;
  throw DataError("unknown site kind '" + s + "'");
}

std::size_t QuantPolicy::count(SiteKind kind, bool enabled) const {
  return static_cast<std::size_t>(std::count_if(entries.begin(), entries.end(), [&](const Entry& e) {
    return e.kind == kind && e.enabled == enabled;
  }));
}

std::vector<std::string> QuantPolicy::disabled_ids() const {
  std::vector<std::string> ids;
  for (const auto& e : entries)
    if (!e.enabled) ids.push_back(e.site_id);
  return ids;
}

QuantizationRuntime::QuantizationRuntime(const QuantPolicy& policy) : bits_(policy.bits), decay_(policy.ema_decay) {
  if (!(decay_ > 0.0 && decay_ < 1.0)) throw ConfigError("EMA decay must lie in (0, 1)");
  for (const auto& e : policy.entries) {
    if (e.kind != SiteKind::Activation) continue;
    QuantizerSite site;
    site.site_id = e.site_id;
    site.kind = SiteKind::Activation;
    site.enabled = e.enabled;
    add_site(std::move(site));
  }
}

void QuantizationRuntime::add_site(QuantizerSite site) {
  if (site.kind != SiteKind::Activation) throw ConfigError("runtime only hosts activation sites: " + site.site_id);
  const std::string id = site.site_id;
  if (!sites_.emplace(id, std::move(site)).second) throw ConfigError("duplicate quantizer site '" + id + "'");
}

Tensor QuantizationRuntime::on_activation(const std::string& site_id, const Tensor& x) {
  if (mode_ == Mode::Passthrough) return x;
  auto it = sites_.find(site_id);
  if (it == sites_.end()) throw ConfigError("activation site '" + site_id + "' is not in the quantization policy");
  QuantizerSite& site = it->second;
  if (!site.enabled) return x;
  if (mode_ == Mode::Observe) {
    if (!site.range) {
      site.range = RangeState{};
      site.range->decay = decay_;
    }
    site.range->observe(x.data(), site_id);
    return x;
  }
  if (!site.params) throw ConfigError("activation site '" + site_id + "' has no calibrated parameters");
  return fake_quantize(x, *site.params);
}

void QuantizationRuntime::finalize() {
  std::vector<std::string> missing;
  for (auto& [id, site] : sites_) {
    if (!site.enabled) continue;
    if (!site.range || site.range->observed_batches == 0) {
      missing.push_back(id);
      continue;
    }
    site.params = site.range->qparams(bits_);
  }
  if (!missing.empty()) {
    std::string msg = "calibration never observed " + std::to_string(missing.size()) + " enabled site(s):";
    for (const auto& id : missing) msg += " " + id;
    throw ConfigError(msg);
  }
}

bool QuantizationRuntime::finalized() const {
  return std::all_of(sites_.begin(), sites_.end(),
                     [](const auto& kv) { return !kv.second.enabled || kv.second.params.has_value(); });
}

CalibrationSummary calibrate(QuantizationRuntime& runtime, std::size_t n_batches,
                             const std::function<void(std::size_t, SiteHook<float>&)>& run_batch) {
  if (n_batches == 0) throw ConfigError("calibration needs at least one batch");
  for (auto& [id, site] : runtime.sites()) {
    site.range.reset();
    site.params.reset();
  }
  runtime.set_mode(QuantizationRuntime::Mode::Observe);
  NoGradScope no_grad;
  for (std::size_t b = 0; b < n_batches; ++b) run_batch(b, runtime);
  runtime.finalize();
  runtime.set_mode(QuantizationRuntime::Mode::Quantize);
  CalibrationSummary summary;
  summary.batches = n_batches;
  for (const auto& [id, site] : runtime.sites())
    if (site.params) ++summary.sites_parameterized;
  return summary;
}

nlohmann::json sites_to_json(const std::map<std::string, QuantizerSite>& sites, int bits) {
  nlohmann::json list = nlohmann::json::array();
  for (const auto& [id, site] : sites) {
    nlohmann::json j;
    j["site_id"] = id;
    j["kind"] = to_string(site.kind);
    j["enabled"] = site.enabled;
    j["s"] = site.params ? nlohmann::json(site.params->scale) : nlohmann::json();
    j["z"] = site.params ? nlohmann::json(site.params->zero_point) : nlohmann::json();
    j["b"] = site.params ? site.params->bits : bits;
    j["running_min"] = site.range ? nlohmann::json(site.range->running_min) : nlohmann::json();
    j["running_max"] = site.range ? nlohmann::json(site.range->running_max) : nlohmann::json();
    j["observed_batches"] = site.range ? site.range->observed_batches : 0;
    list.push_back(std::move(j));
  }
  return {{"format", "qgate-calibration"}, {"version", 1}, {"bits", bits}, {"sites", std::move(list)}};
}

std::map<std::string, QuantizerSite> sites_from_json(const nlohmann::json& doc) {
  if (doc.value("format", std::string{}) != "qgate-calibration" || doc.value("version", 0) != 1)
    throw DataError("not a version-1 calibration document");
  std::map<std::string, QuantizerSite> sites;
  for (const auto& j : doc.at("sites")) {
    QuantizerSite site;
    site.site_id = j.at("site_id").get<std::string>();
    site.kind = site_kind_from_string(j.at("kind").get<std::string>());
    site.enabled = j.at("enabled").get<bool>();
    if (!j.at("s").is_null()) {
      QuantParams p;
      p.scale = j.at("s").get<double>();
      p.zero_point = j.at("z").get<std::int64_t>();
      p.bits = j.at("b").get<int>();
      if (!(p.scale > 0.0) || p.zero_point < 0 || p.zero_point > p.qmax())
        throw DataError("invalid quantization parameters for site '" + site.site_id + "'");
      site.params = p;
    }
    if (!j.at("running_min").is_null()) {
      RangeState r;
      r.running_min = j.at("running_min").get<double>();
      r.running_max = j.at("running_max").get<double>();
      r.observed_batches = j.value("observed_batches", std::size_t{0});
      site.range = r;
    }
    sites.emplace(site.site_id, std::move(site));
  }
  return sites;
}

}  // namespace qgate
