#pragma once

#include <functional>

#include "flowseg/autodiff.hpp"
#include "flowseg/rng.hpp"

namespace flowseg {

using ScalarFn = std::function<Var(Tape&, const Var&)>;

/// Max over coordinates of |analytic - central difference| / max(1, |central difference|).
/// Throws Error on non-finite function values or gradients.
Real grad_check(const ScalarFn& f, const NdArr& x, Real eps);

/// Same measure for `count` randomly drawn scalar entries of `params`, with
/// `loss` rebuilding the scalar loss on a fresh tape each call.
Real grad_check_parameters(const std::function<Var(Tape&)>& loss, const ParameterList& params, int count, Rng& rng,
                           Real eps);

}  // namespace flowseg
