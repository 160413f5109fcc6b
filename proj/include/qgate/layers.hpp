#pragma once

#include <random>
#include <string>
#include <vector>

#include "qgate/instrument.hpp"
#include "qgate/tensor.hpp"

namespace qgate {

using Rng = std::mt19937_64;

template <typename T>
struct NamedParam {
  std::string name;
  BasicTensor<T> tensor;
  bool weight_decay = false;
};

template <typename T>
using ParamList = std::vector<NamedParam<T>>;

/// y = x · Wᵀ + b with W stored [out, in].
template <typename T>
struct Linear {
  BasicTensor<T> weight;
  BasicTensor<T> bias;

  Linear() = default;
  Linear(std::size_t in, std::size_t out, Rng& rng);

  BasicTensor<T> operator()(const BasicTensor<T>& x) const;
  void collect(ParamList<T>& out, const std::string& prefix) const;
  std::size_t in_features() const { return weight.dim(1); }
  std::size_t out_features() const { return weight.dim(0); }
};

template <typename T>
struct LayerNorm {
  BasicTensor<T> gamma;
  BasicTensor<T> beta;
  double eps = 1e-5;

  LayerNorm() = default;
  explicit LayerNorm(std::size_t dim);

  BasicTensor<T> operator()(const BasicTensor<T>& x) const;
  void collect(ParamList<T>& out, const std::string& prefix) const;
};

/// fc2(gelu(fc1(x))). Sites: <prefix>.input, .hidden, .output.
template <typename T>
class FeedForward {
 public:
  FeedForward() = default;
  FeedForward(std::string prefix, std::size_t model_dim, std::size_t ffn_dim, Rng& rng);

  BasicTensor<T> forward(const BasicTensor<T>& x, SiteHook<T>* hook = nullptr) const;
  void collect(ParamList<T>& out) const;
  std::vector<std::string> activation_sites() const;
  std::vector<std::string> weight_sites() const;
  const std::string& prefix() const { return prefix_; }

  Linear<T> fc1;
  Linear<T> fc2;

 private:
  std::string prefix_;
};

/// Fixed sinusoidal position table [max_len, dim].
std::vector<float> sinusoidal_table(std::size_t max_len, std::size_t dim);

extern template struct Linear<float>;
extern template struct Linear<double>;
extern template struct LayerNorm<float>;
extern template struct LayerNorm<double>;
extern template class FeedForward<float>;
extern template class FeedForward<double>;

}  // namespace qgate
