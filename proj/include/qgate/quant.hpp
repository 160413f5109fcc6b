#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "qgate/instrument.hpp"
#include "qgate/tensor.hpp"

namespace qgate {

/// Affine quantization grid: real value r ↔ integer q via r = scale · (q − zero_point),
/// q ∈ [0, 2^bits − 1].
struct QuantParams {
  double scale = 1.0;
  std::int64_t zero_point = 0;
  int bits = 8;

  std::int64_t qmax() const { return (std::int64_t{1} << bits) - 1; }
  // Real interval the grid represents without clipping.
  double lower() const { return scale * static_cast<double>(0 - zero_point); }
  double upper() const { return scale * static_cast<double>(qmax() - zero_point); }

  bool operator==(const QuantParams&) const = default;
};

/// Widens [min, max] to contain zero, then s = (max − min) / (2^b − 1) and
/// z = round(−min / s) clamped to the grid. A zero-width range falls back to
/// s = 1, z = 0 and logs a warning.
QuantParams compute_qparams(double min, double max, int bits = 8);

/// Round-half-away-from-zero, clamp to the grid, dequantize.
float fake_quantize_value(float x, const QuantParams& p);

/// Elementwise fake quantization. Backward is the straight-through estimator:
/// gradient 1 inside the representable interval, 0 where values were clipped.
template <typename T>
BasicTensor<T> fake_quantize(const BasicTensor<T>& x, const QuantParams& p);

/// Per-tensor parameters from the full range of a weight tensor.
QuantParams weight_qparams(const Tensor& w, int bits = 8);

/// Exponential moving average of per-batch min and max.
struct RangeState {
  double running_min = 0.0;
  double running_max = 0.0;
  double decay = 0.9;
  std::size_t observed_batches = 0;

  // Throws NumericalError naming site_id if the batch contains NaN.
  void observe(std::span<const float> batch, const std::string& site_id = {});
  QuantParams qparams(int bits) const { return compute_qparams(running_min, running_max, bits); }
};

RangeState observe(RangeState range, std::span<const float> batch);

enum class SiteKind { Weight, Activation };

std::string to_string(SiteKind kind);
SiteKind site_kind_from_string(const std::string& s);

struct QuantizerSite {
  std::string site_id;
  SiteKind kind = SiteKind::Activation;
  bool enabled = true;
  std::optional<QuantParams> params;
  std::optional<RangeState> range;  // activation sites only
};

/// Site descriptors with enabled flags over a whole model.
struct QuantPolicy {
  struct Entry {
    std::string site_id;
    SiteKind kind = SiteKind::Activation;
    bool enabled = true;
  };
  std::vector<Entry> entries;
  int bits = 8;
  double ema_decay = 0.9;

  std::size_t count(SiteKind kind, bool enabled) const;
  std::vector<std::string> disabled_ids() const;
};

/// Activation-site runtime. In Observe mode enabled sites accumulate their
/// RangeState; in Quantize mode they fake-quantize with calibrated params;
/// disabled sites always pass through.
class QuantizationRuntime final : public SiteHook<float> {
 public:
  enum class Mode { Passthrough, Observe, Quantize };

  QuantizationRuntime() = default;
  explicit QuantizationRuntime(const QuantPolicy& policy);

  Tensor on_activation(const std::string& site_id, const Tensor& x) override;

  void set_mode(Mode mode) { mode_ = mode; }
  Mode mode() const { return mode_; }
  int bits() const { return bits_; }

  /// Derives QuantParams for every enabled activation site from its range.
  /// Throws ConfigError listing sites that were never observed.
  void finalize();
  bool finalized() const;

  const std::map<std::string, QuantizerSite>& sites() const { return sites_; }
  std::map<std::string, QuantizerSite>& sites() { return sites_; }
  void add_site(QuantizerSite site);

 private:
  std::map<std::string, QuantizerSite> sites_;
  Mode mode_ = Mode::Passthrough;
  int bits_ = 8;
  double decay_ = 0.9;
};

struct CalibrationSummary {
  std::size_t batches = 0;
  std::size_t sites_parameterized = 0;
};

/// Runs `run_batch` once per calibration batch with the runtime in Observe
/// mode, then finalizes. Leaves the runtime in Quantize mode.
CalibrationSummary calibrate(QuantizationRuntime& runtime, std::size_t n_batches,
                             const std::function<void(std::size_t, SiteHook<float>&)>& run_batch);

/// Calibration document: {"format", "version", "bits", "sites": [{site_id,
/// kind, enabled, s, z, b, running_min, running_max}]}. Absent values are null.
nlohmann::json sites_to_json(const std::map<std::string, QuantizerSite>& sites, int bits);
std::map<std::string, QuantizerSite> sites_from_json(const nlohmann::json& doc);

}  // namespace qgate
