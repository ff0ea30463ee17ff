#pragma once

#include <cmath>
#include <cstddef>
#include <map>

#include "dsspn/autodiff.hpp"

namespace dsspn {

struct SgdConfig {
  double base_lr{0.003};
  double momentum{0.9};
  double weight_decay{0.0001};
  double power{0.9};
  std::size_t max_iter{1};
};

// "poly" schedule: base * (1 - iter / max_iter)^power.
inline double poly_lr(const SgdConfig& cfg, std::size_t iter) {
  if (iter >= cfg.max_iter) throw ValidationError(str_cat("poly_lr: iter ", iter, " >= max_iter ", cfg.max_iter));
  return cfg.base_lr * std::pow(1.0 - static_cast<double>(iter) / static_cast<double>(cfg.max_iter), cfg.power);
}

template <typename T>
struct OptimState {
  SgdConfig config;
  std::map<ParamId, Tensor<T>> momentum;
};

// Momentum SGD with coupled weight decay:
//   v <- momentum * v + grad + weight_decay * param;  param <- param - lr * v.
// Parameters without a gradient entry (not reached this step) are left untouched.
template <typename T>
double sgd_step(ParamStore<T>& params, const std::map<ParamId, Tensor<T>>& grads, OptimState<T>& state,
                std::size_t iter) {
  const double lr = poly_lr(state.config, iter);
  const T mu = static_cast<T>(state.config.momentum);
  const T wd = static_cast<T>(state.config.weight_decay);
  const T step = static_cast<T>(lr);
  for (const auto& [pid, grad] : grads) {
    Tensor<T>& value = params[pid].value;
    if (grad.shape() != value.shape()) {
      throw ShapeError(str_cat("sgd_step: gradient shape ", grad.shape().str(), " != parameter ", params[pid].name));
    }
    auto [it, inserted] = state.momentum.try_emplace(pid, value.shape());
    Tensor<T>& v = it->second;
    for (std::size_t i = 0; i < value.size(); ++i) {
      v[i] = mu * v[i] + grad[i] + wd * value[i];
      value[i] -= step * v[i];
    }
  }
  return lr;
}

}  // namespace dsspn
