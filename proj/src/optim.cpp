// SPDX-License-Identifier: Apache-2.0
#include "milpath/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace milpath {

void adam_step(std::span<const AdamSlot> slots, AdamState &state, const AdamConfig &config) {
  if (state.m.empty()) {
    for (const auto &s : slots) {
      state.m.push_back(s.param->zeros_like());
      state.v.push_back(s.param->zeros_like());
      state.t.push_back(0);
    }
  }
  if (state.m.size() != slots.size()) throw std::invalid_argument("adam state layout changed");

  for (std::size_t k = 0; k < slots.size(); ++k) {
    const auto &slot = slots[k];
    if (!slot.grad) continue;
    Tensor &p = *slot.param;
    const Tensor &g = *slot.grad;
    if (g.size() != p.size() || state.m[k].size() != p.size())
      throw std::invalid_argument("adam shape mismatch");
    const auto t = ++state.t[k];
    const double c1 = 1.0 - std::pow(config.beta1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(config.beta2, static_cast<double>(t));
    auto &m = state.m[k].values;
    auto &v = state.v[k].values;
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * g[i];
      v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * g[i] * g[i];
      p[i] -= slot.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + config.eps);
    }
  }
}

}  // namespace milpath
