#include "flowseg/optim.hpp"

#include <algorithm>
#include <cmath>

namespace flowseg::optim {

AdamState::AdamState(const ParameterList& params) {
  m.reserve(params.size());
  v.reserve(params.size());
  for (const auto* p : params) {
    m.emplace_back(p->value.shape());
    v.emplace_back(p->value.shape());
  }
}

void adam_step(const ParameterList& params, AdamState& state, Real lr) {
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw Error("adam_step: state tracks " + std::to_string(state.m.size()) + " parameters, got " +
                std::to_string(params.size()));
  }
  if (lr < 0) throw Error("adam_step: negative learning rate");
  for (std::size_t k = 0; k < params.size(); ++k) {
    const Parameter& p = *params[k];
    require_same_shape(("adam_step(" + p.name + ")").c_str(), p.value.shape(), p.grad.shape());
    require_same_shape(("adam_step(" + p.name + ")").c_str(), p.value.shape(), state.m[k].shape());
    if (!all_finite(p.grad)) throw Error("adam_step: non-finite gradient in parameter '" + p.name + "'");
  }
  state.step += 1;
  const Real t = static_cast<Real>(state.step);
  const Real bc1 = Real(1) - std::pow(state.beta1, t);
  const Real bc2 = Real(1) - std::pow(state.beta2, t);
  for (std::size_t k = 0; k < params.size(); ++k) {
    Parameter& p = *params[k];
    NdArr& m = state.m[k];
    NdArr& v = state.v[k];
    for (std::int64_t i = 0; i < p.value.size(); ++i) {
      const Real g = p.grad[i];
      m[i] = state.beta1 * m[i] + (Real(1) - state.beta1) * g;
      v[i] = state.beta2 * v[i] + (Real(1) - state.beta2) * g * g;
      const Real mhat = m[i] / bc1;
      const Real vhat = v[i] / bc2;
      p.value[i] -= lr * mhat / (std::sqrt(vhat) + state.eps);
    }
  }
}

Real poly_decay_lr(std::int64_t step, std::int64_t total_steps, Real lr0, std::int64_t warmup_steps, Real power) {
  if (total_steps <= 0) return 0;
  step = std::clamp<std::int64_t>(step, 0, total_steps);
  warmup_steps = std::clamp<std::int64_t>(warmup_steps, 0, total_steps - 1);
  if (step < warmup_steps) return lr0 * static_cast<Real>(step) / static_cast<Real>(warmup_steps);
  const Real frac = static_cast<Real>(step - warmup_steps) / static_cast<Real>(total_steps - warmup_steps);
  return lr0 * std::pow(Real(1) - frac, power);
}

}  // namespace flowseg::optim
