#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "fpthd/nn/params.hpp"

namespace fpthd::nn {

/// Per-element flag: true where decoupled weight decay applies.
template <class T>
std::vector<bool> decay_mask(const ParamStore<T>& store) {
  std::vector<bool> mask(store.size(), false);
  for (const auto& e : store.entries())
    if (e.decay) std::fill(mask.begin() + static_cast<std::ptrdiff_t>(e.offset),
                           mask.begin() + static_cast<std::ptrdiff_t>(e.offset + e.size), true);
  return mask;
}

/// w <- w - lr·(g + wd·w), decay restricted to `decay`.
template <class T>
void sgd_update(std::span<T> w, std::span<const T> g, const std::vector<bool>& decay, double lr,
                double weight_decay) {
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double wd = decay[i] ? weight_decay * static_cast<double>(w[i]) : 0.0;
    w[i] = static_cast<T>(static_cast<double>(w[i]) - lr * (static_cast<double>(g[i]) + wd));
  }
}

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <class T>
struct AdamState {
  std::vector<T> m;
  std::vector<T> v;
  std::int64_t step = 0;

  void reset(std::size_t n) {
    m.assign(n, T(0));
    v.assign(n, T(0));
    step = 0;
  }
};

/// AdamW: adaptive step plus decoupled decay lr·wd·w.
template <class T>
void adamw_update(std::span<T> w, std::span<const T> g, const std::vector<bool>& decay,
                  AdamState<T>& state, double lr, double weight_decay, const AdamConfig& cfg = {}) {
  if (state.m.size() != w.size()) state.reset(w.size());
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double gi = static_cast<double>(g[i]);
    const double m = cfg.beta1 * static_cast<double>(state.m[i]) + (1.0 - cfg.beta1) * gi;
    const double v = cfg.beta2 * static_cast<double>(state.v[i]) + (1.0 - cfg.beta2) * gi * gi;
    state.m[i] = static_cast<T>(m);
    state.v[i] = static_cast<T>(v);
    double wi = static_cast<double>(w[i]);
    if (decay[i]) wi -= lr * weight_decay * wi;
    wi -= lr * (m / bc1) / (std::sqrt(v / bc2) + cfg.eps);
    w[i] = static_cast<T>(wi);
  }
}

}  // namespace fpthd::nn
