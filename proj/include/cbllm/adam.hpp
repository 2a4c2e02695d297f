#pragma once

#include <cstdint>
#include <vector>

#include "cbllm/tensor.hpp"

namespace cbllm {

struct AdamConfig {
  float lr = 1e-3f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
};

// First/second moments per parameter, in the order of the ParamList the state
// was created for.
struct AdamState {
  AdamConfig config;
  std::int64_t step = 0;
  std::vector<Tensor> m;
  std::vector<Tensor> v;

  AdamState() = default;
  AdamState(const ParamList& params, AdamConfig cfg);
};

// One bias-corrected Adam update of every param from its accumulated grad.
void adam_step(const ParamList& params, AdamState& state);

}  // namespace cbllm
