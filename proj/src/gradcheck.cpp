#include "flowseg/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace flowseg {

namespace {

Real checked(Real v, const char* what) {
  if (!std::isfinite(v)) throw Error(std::string("grad_check: non-finite ") + what);
  return v;
}

Real rel_err(Real analytic, Real numeric) {
  return std::abs(analytic - numeric) / std::max(Real(1), std::abs(numeric));
}

}  // namespace

Real grad_check(const ScalarFn& f, const NdArr& x, Real eps) {
  if (!(eps > 0)) throw Error("grad_check: eps must be positive");
  Tape tape;
  Var xv = tape.variable(x);
  Var y = f(tape, xv);
  checked(y.value().item(), "function value");
  tape.backward(y);
  const NdArr analytic = xv.grad();
  if (!all_finite(analytic)) throw Error("grad_check: non-finite analytic gradient");

  auto eval = [&](const NdArr& at) {
    Tape t(false);
    return checked(f(t, t.constant(at)).value().item(), "function value");
  };
  Real worst = 0;
  NdArr probe = x;
  for (std::int64_t i = 0; i < x.size(); ++i) {
    const Real orig = probe[i];
    probe[i] = orig + eps;
    const Real up = eval(probe);
    probe[i] = orig - eps;
    const Real down = eval(probe);
    probe[i] = orig;
    worst = std::max(worst, rel_err(analytic[i], (up - down) / (Real(2) * eps)));
  }
  return worst;
}

Real grad_check_parameters(const std::function<Var(Tape&)>& loss, const ParameterList& params, int count, Rng& rng,
                           Real eps) {
  if (params.empty()) throw Error("grad_check_parameters: no parameters");
  zero_grads(params);
  {
    Tape tape;
    Var l = loss(tape);
    checked(l.value().item(), "loss");
    tape.backward(l);
  }
  auto eval = [&]() {
    Tape t(false);
    return checked(loss(t).value().item(), "loss");
  };
  const std::int64_t total = [&] {
    std::int64_t n = 0;
    for (auto* p : params) n += p->value.size();
    return n;
  }();
  Real worst = 0;
  for (int k = 0; k < count; ++k) {
    auto flat = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(total)));
    Parameter* p = nullptr;
    for (auto* q : params) {
      if (flat < q->value.size()) {
        p = q;
        break;
      }
      flat -= q->value.size();
    }
    const Real analytic = checked(p->grad[flat], "analytic gradient");
    const Real orig = p->value[flat];
    p->value[flat] = orig + eps;
    const Real up = eval();
    p->value[flat] = orig - eps;
    const Real down = eval();
    p->value[flat] = orig;
    worst = std::max(worst, rel_err(analytic, (up - down) / (Real(2) * eps)));
  }
  return worst;
}

}  // namespace flowseg
