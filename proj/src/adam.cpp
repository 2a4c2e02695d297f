#include "cbllm/adam.hpp"

#include <cmath>

#include "cbllm/errors.hpp"

namespace cbllm {

AdamState::AdamState(const ParamList& params, AdamConfig cfg) : config(cfg) {
  m.reserve(params.size());
  v.reserve(params.size());
  for (const auto* p : params) {
    m.emplace_back(p->value.shape());
    v.emplace_back(p->value.shape());
  }
}

void adam_step(const ParamList& params, AdamState& state) {
  if (params.size() != state.m.size()) {
    throw ShapeError("adam_step: " + std::to_string(params.size()) + " params but state holds " +
                     std::to_string(state.m.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Param& p = *params[i];
    if (!p.grad.same_shape(p.value) || !state.m[i].same_shape(p.value)) {
      throw ShapeError("adam_step: param '" + p.name + "' " + shape_str(p.value.shape()) + ", grad " +
                       shape_str(p.grad.shape()) + ", moment " + shape_str(state.m[i].shape()));
    }
  }
  ++state.step;
  const auto& c = state.config;
  double bc1 = 1.0 - std::pow(double(c.beta1), double(state.step));
  double bc2 = 1.0 - std::pow(double(c.beta2), double(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Param& p = *params[i];
    float* w = p.value.data();
    const float* g = p.grad.data();
    float* m = state.m[i].data();
    float* v = state.v[i].data();
    for (std::size_t j = 0; j < p.value.size(); ++j) {
      m[j] = c.beta1 * m[j] + (1.0f - c.beta1) * g[j];
      v[j] = c.beta2 * v[j] + (1.0f - c.beta2) * g[j] * g[j];
      double mh = m[j] / bc1;
      double vh = v[j] / bc2;
      w[j] -= static_cast<float>(c.lr * mh / (std::sqrt(vh) + c.eps));
    }
  }
}

}  // namespace cbllm
