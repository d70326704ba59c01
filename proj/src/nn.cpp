#include "flowseg/nn.hpp"

#include <cmath>

namespace flowseg::nn {

NdArr xavier_normal(const Shape& shape, std::int64_t fan_in, std::int64_t fan_out, Rng& rng) {
  const Real stddev = static_cast<Real>(std::sqrt(2.0 / static_cast<double>(fan_in + fan_out)));
  return rng.normal_array(shape, stddev);
}

static NdArr make_weight(const Shape& shape, std::int64_t fan_in, std::int64_t fan_out, Init init, Rng& rng) {
  return init == Init::Zero ? NdArr(shape) : xavier_normal(shape, fan_in, fan_out, rng);
}

Conv2d::Conv2d(std::string name, std::int64_t in, std::int64_t out, std::int64_t k, Conv2dGeometry geo, Init init,
               Rng& rng)
    : weight(name + ".weight", make_weight({out, in, k, k}, in * k * k, out * k * k, init, rng)),
      bias(name + ".bias", NdArr(Shape{out})),
      geometry(geo) {}

Var Conv2d::operator()(Tape& t, const Var& x) { return conv2d(x, t.param(weight), t.param(bias), geometry); }

ConvTranspose2d::ConvTranspose2d(std::string name, std::int64_t in, std::int64_t out, std::int64_t k,
                                 Conv2dGeometry geo, Init init, Rng& rng)
    : weight(name + ".weight", make_weight({in, out, k, k}, in * k * k, out * k * k, init, rng)),
      bias(name + ".bias", NdArr(Shape{out})),
      geometry(geo) {}

Var ConvTranspose2d::operator()(Tape& t, const Var& x) {
  return conv_transpose2d(x, t.param(weight), t.param(bias), geometry);
}

Dense::Dense(std::string name, std::int64_t in, std::int64_t out, Init init, Rng& rng)
    : weight(name + ".weight", make_weight({out, in}, in, out, init, rng)), bias(name + ".bias", NdArr(Shape{out})) {}

Var Dense::operator()(Tape& t, const Var& x) { return flowseg::dense(x, t.param(weight), t.param(bias)); }

std::int64_t parameter_count(const ParameterList& params) {
  std::int64_t n = 0;
  for (const auto* p : params) n += p->value.size();
  return n;
}

void append(ParameterList& dst, const ParameterList& src) { dst.insert(dst.end(), src.begin(), src.end()); }

}  // namespace flowseg::nn
