#pragma once

#include <span>
#include <unordered_map>

#include "graftnet/tensor.hpp"

namespace graftnet {

/// SGD with heavy-ball momentum: v <- mu v + g, w <- w - lr v.
/// Frozen parameters are skipped entirely (no velocity, no update).
template <class T>
class SgdMomentum {
 public:
  void step(std::span<BasicParameter<T>* const> params, T learning_rate,
            T momentum) {
    for (auto* p : params) {
      if (!p->trainable) continue;
      auto [it, inserted] = velocity_.try_emplace(p->name, p->value.shape());
      auto& v = it->second;
      for (std::size_t i = 0; i < p->value.numel(); ++i) {
        v[i] = momentum * v[i] + p->grad[i];
        p->value[i] -= learning_rate * v[i];
      }
    }
  }

  void reset() { velocity_.clear(); }

 private:
  std::unordered_map<std::string, BasicTensor<T>> velocity_;
};

template <class T>
void zero_grads(std::span<BasicParameter<T>* const> params) {
  for (auto* p : params) p->zero_grad();
}

}  // namespace graftnet
