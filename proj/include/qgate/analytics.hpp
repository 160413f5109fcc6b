#pragma once

#include <map>
#include <mutex>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "qgate/instrument.hpp"
#include "qgate/model.hpp"
#include "qgate/task.hpp"
#include "qgate/tensor.hpp"

namespace qgate {

/// Streaming central moments in FP64 (Welford/Terriberry updates, Chan merge).
class MomentAccumulator {
 public:
  void add(double x);
  void add(std::span<const float> xs);
  void merge(const MomentAccumulator& other);

  std::size_t count() const { return n_; }
  double mean() const { return mean_; }
  /// Population variance.
  double variance() const;
  /// Pearson kurtosis m4 / m2² (normal = 3). Throws NumericalError for zero
  /// variance or fewer than 4 values.
  double kurtosis() const;

 private:
  std::size_t n_ = 0;
  double mean_ = 0.0, m2_ = 0.0, m3_ = 0.0, m4_ = 0.0;
};

/// Pearson kurtosis (population moments, two-pass, FP64).
double kurtosis(std::span<const float> x);

/// max |x_i|; 0 for an all-zero input. Throws DataError when empty.
double inf_norm(std::span<const float> x);

struct OutlierCount {
  std::size_t count = 0;
  std::vector<std::size_t> per_dimension;  // indexed by last-axis position
};

/// Values with |x - mean| > 6·std (mean/std over the whole tensor, population
/// std). A zero-std tensor has no outliers.
OutlierCount count_outliers(const Tensor& x);

struct ActivationTrace {
  std::string site_id;
  MomentAccumulator moments;
  double max_abs = 0.0;
  std::size_t batches = 0;
  std::size_t outliers = 0;
  std::vector<std::size_t> per_dimension;

  void add_batch(const Tensor& x);
};

/// Pass-through hook that records traces for a fixed set of sites.
class OutlierTracer : public SiteHook<float> {
 public:
  explicit OutlierTracer(const std::vector<std::string>& site_ids);
  Tensor on_activation(const std::string& site_id, const Tensor& x) override;
  /// Traces sorted by site_id.
  std::vector<ActivationTrace> traces() const;

 private:
  mutable std::mutex mutex_;
  std::map<std::string, ActivationTrace> traces_;
};

struct SiteOutlierStats {
  std::string site_id;
  double kurtosis = 0.0;
  double max_inf_norm = 0.0;
  std::size_t outlier_count = 0;
  std::vector<double> per_dimension_shares;
};

struct OutlierReport {
  double average_kurtosis = 0.0;
  double max_inf_norm = 0.0;
  std::size_t total_outlier_count = 0;
  std::vector<double> per_dimension_shares;
  std::vector<SiteOutlierStats> sites;  // sorted by site_id

  /// Up to k (dimension, share) pairs, share descending, dimension ascending on ties.
  std::vector<std::pair<std::size_t, double>> top_dimensions(std::size_t k = 10) const;
  nlohmann::json to_json() const;
  /// One row per site plus an "ALL" aggregate row.
  std::string to_csv() const;
};

/// Per-site kurtosis over everything the site saw, averaged over sites in
/// site_id order; max and count reductions are order independent.
/// Throws DataError on an empty trace list.
OutlierReport aggregate(std::span<const ActivationTrace> traces);

struct AttentionDump {
  std::string stack;  // "encoder" or "decoder"
  std::size_t layer = 0;
  std::size_t head = 0;
  Tensor probs;    // [T, T]
  Tensor values;   // [T, head_dim]
  Tensor product;  // [T, head_dim]
  std::vector<std::string> token_labels;
};

/// Self-attention matrices of one head for a single example. Decoder dumps
/// run teacher-forced on the example's target prefix (bos y1 .. yn).
AttentionDump attention_dump(const EncoderDecoder& model, const Example& example, const std::string& stack,
                             std::size_t layer, std::size_t head);

/// Writes <dir>/<stack>_layer<L>_head<H>.bin (magic "QGATEATT", u32 version,
/// P, V and PV tensor blobs) and a .json sidecar with token labels.
/// Returns the .bin path.
std::string write_attention_dump(const AttentionDump& dump, const std::string& dir);
AttentionDump read_attention_dump(const std::string& bin_path);

}  // namespace qgate
