#pragma once

#include <string>

#include "flowseg/autodiff.hpp"
#include "flowseg/rng.hpp"

namespace flowseg::nn {

/// Xavier (Glorot) normal: N(0, 2 / (fan_in + fan_out)).
NdArr xavier_normal(const Shape& shape, std::int64_t fan_in, std::int64_t fan_out, Rng& rng);

enum class Init { Xavier, Zero };

class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(std::string name, std::int64_t in, std::int64_t out, std::int64_t k, Conv2dGeometry geo, Init init, Rng& rng);

  Var operator()(Tape& t, const Var& x);
  ParameterList parameters() { return {&weight, &bias}; }

  Parameter weight;
  Parameter bias;
  Conv2dGeometry geometry;
};

/// Weight layout in x out x k x k.
class ConvTranspose2d {
 public:
  ConvTranspose2d() = default;
  ConvTranspose2d(std::string name, std::int64_t in, std::int64_t out, std::int64_t k, Conv2dGeometry geo, Init init,
                  Rng& rng);

  Var operator()(Tape& t, const Var& x);
  ParameterList parameters() { return {&weight, &bias}; }

  Parameter weight;
  Parameter bias;
  Conv2dGeometry geometry;
};

class Dense {
 public:
  Dense() = default;
  Dense(std::string name, std::int64_t in, std::int64_t out, Init init, Rng& rng);

  Var operator()(Tape& t, const Var& x);
  ParameterList parameters() { return {&weight, &bias}; }
  std::int64_t in_features() const { return weight.value.dim(1); }
  std::int64_t out_features() const { return weight.value.dim(0); }

  Parameter weight;
  Parameter bias;
};

std::int64_t parameter_count(const ParameterList& params);
void append(ParameterList& dst, const ParameterList& src);

}  // namespace flowseg::nn
