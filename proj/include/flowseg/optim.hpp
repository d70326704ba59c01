#pragma once

#include <cstdint>
#include <vector>

#include "flowseg/autodiff.hpp"

namespace flowseg::optim {

/// Adam moment estimates for a fixed, ordered parameter list.
struct AdamState {
  Real beta1 = Real(0.9);
  Real beta2 = Real(0.999);
  Real eps = Real(1e-8);
  std::int64_t step = 0;
  std::vector<NdArr> m;
  std::vector<NdArr> v;

  AdamState() = default;
  explicit AdamState(const ParameterList& params);
};

/// One bias-corrected Adam update using each parameter's `grad`.
/// Throws Error naming the parameter if a gradient is not finite.
void adam_step(const ParameterList& params, AdamState& state, Real lr);

/// Linear warm-up from 0 to lr0 over `warmup_steps`, then polynomial decay to 0
/// at `total_steps`. `step` is clamped to [0, total_steps].
Real poly_decay_lr(std::int64_t step, std::int64_t total_steps, Real lr0, std::int64_t warmup_steps,
                   Real power = Real(1));

}  // namespace flowseg::optim
