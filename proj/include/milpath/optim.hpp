// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "milpath/tensor.hpp"

namespace milpath {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Moments per tensor slot. Each slot keeps its own step counter so a tensor
/// that starts training late gets a fresh bias correction.
struct AdamState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::vector<std::int64_t> t;
};

struct AdamSlot {
  Tensor *param = nullptr;
  const Tensor *grad = nullptr;  // nullptr: frozen, left untouched
  double lr = 0.0;
};

/// One bias-corrected Adam update over all slots. State is lazily sized on
/// first use and must be reused with the same slot layout afterwards.
void adam_step(std::span<const AdamSlot> slots, AdamState &state, const AdamConfig &config = {});

}  // namespace milpath
