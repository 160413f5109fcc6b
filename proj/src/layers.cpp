#include "qgate/layers.hpp"

#include <cmath>

#include "qgate/ops.hpp"

namespace qgate {

template <typename T>
Linear<T>::Linear(std::size_t in, std::size_t out, Rng& rng)
    : weight(Shape{out, in}, true), bias(Shape{out}, true) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (auto& w : weight.data()) w = static_cast<T>(dist(rng));
}

template <typename T>
BasicTensor<T> Linear<T>::operator()(const BasicTensor<T>& x) const {
  return ops::linear(x, weight, bias);
}

template <typename T>
void Linear<T>::collect(ParamList<T>& out, const std::string& prefix) const {
  out.push_back({prefix + ".weight", weight, true});
  out.push_back({prefix + ".bias", bias, false});
}

template <typename T>
LayerNorm<T>::LayerNorm(std::size_t dim) : gamma(BasicTensor<T>::full(Shape{dim}, T(1))), beta(Shape{dim}) {
  gamma.set_requires_grad(true);
  beta.set_requires_grad(true);
}

template <typename T>
BasicTensor<T> LayerNorm<T>::operator()(const BasicTensor<T>& x) const {
  return ops::layer_norm(x, gamma, beta, eps);
}

template <typename T>
void LayerNorm<T>::collect(ParamList<T>& out, const std::string& prefix) const {
  out.push_back({prefix + ".gamma", gamma, false});
  out.push_back({prefix + ".beta", beta, false});
}

template <typename T>
FeedForward<T>::FeedForward(std::string prefix, std::size_t model_dim, std::size_t ffn_dim, Rng& rng)
    : fc1(model_dim, ffn_dim, rng), fc2(ffn_dim, model_dim, rng), prefix_(std::move(prefix)) {}

template <typename T>
BasicTensor<T> FeedForward<T>::forward(const BasicTensor<T>& x, SiteHook<T>* hook) const {
  auto in = tap(hook, prefix_ + ".input", x);
  auto hidden = tap(hook, prefix_ + ".hidden", ops::gelu(fc1(in)));
  return tap(hook, prefix_ + ".output", fc2(hidden));
}

template <typename T>
void FeedForward<T>::collect(ParamList<T>& out) const {
  fc1.collect(out, prefix_ + ".fc1");
  fc2.collect(out, prefix_ + ".fc2");
}

template <typename T>
std::vector<std::string> FeedForward<T>::activation_sites() const {
  return {prefix_ + ".input", prefix_ + ".hidden", prefix_ + ".output"};
}

template <typename T>
std::vector<std::string> FeedForward<T>::weight_sites() const {
  return {prefix_ + ".fc1.weight", prefix_ + ".fc2.weight"};
}

std::vector<float> sinusoidal_table(std::size_t max_len, std::size_t dim) {
  std::vector<float> table(max_len * dim);
  const std::size_t half = dim / 2;
  for (std::size_t pos = 0; pos < max_len; ++pos) {
    for (std::size_t i = 0; i < half; ++i) {
      const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
      const double angle = static_cast<double>(pos) * freq;
      table[pos * dim + i] = static_cast<float>(std::sin(angle));
      table[pos * dim + half + i] = static_cast<float>(std::cos(angle));
    }
  }
  return table;
}

template struct Linear<float>;
template struct Linear<double>;
template struct LayerNorm<float>;
template struct LayerNorm<double>;
template class FeedForward<float>;
template class FeedForward<double>;

}  // namespace qgate
