#pragma once

#include <string>
#include <vector>

#include "qgate/tensor.hpp"

namespace qgate {

/// Interception point for named activation tensors during a forward pass.
/// Quantization (observe / fake-quantize) and outlier tracing both plug in
/// here. Implementations return the tensor that flows onward.
template <typename T>
class SiteHook {
 public:
  virtual ~SiteHook() = default;
  virtual BasicTensor<T> on_activation(const std::string& site_id, const BasicTensor<T>& x) = 0;
};

template <typename T>
BasicTensor<T> tap(SiteHook<T>* hook, const std::string& site_id, const BasicTensor<T>& x) {
  return hook ? hook->on_activation(site_id, x) : x;
}

/// Runs hooks in order, feeding each the previous hook's output.
template <typename T>
class HookChain final : public SiteHook<T> {
 public:
  HookChain() = default;
  explicit HookChain(std::vector<SiteHook<T>*> hooks) : hooks_(std::move(hooks)) {}
  void push_back(SiteHook<T>* hook) { hooks_.push_back(hook); }

  BasicTensor<T> on_activation(const std::string& site_id, const BasicTensor<T>& x) override {
    BasicTensor<T> y = x;
    for (auto* h : hooks_)
      if (h) y = h->on_activation(site_id, y);
    return y;
  }

 private:
  std::vector<SiteHook<T>*> hooks_;
};

}  // namespace qgate
