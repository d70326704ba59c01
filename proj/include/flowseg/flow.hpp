#pragma once

#include <string>
#include <vector>

#include "flowseg/nn.hpp"

namespace flowseg::flow {

/// Output of one invertible layer: the transformed value and its per-sample
/// log|det J|, shape [N].
struct LayerOut {
  Var y;
  Var logdet;
};

/// Per-channel affine map y = scale * x + bias with scale = exp(log_scale).
/// Starts uninitialized; the first batch sets scale and bias so that batch
/// has zero mean and unit variance per channel.
class ActNorm {
 public:
  ActNorm() = default;
  ActNorm(std::string name, std::int64_t channels);

  bool initialized() const { return initialized_; }
  /// Population moments over N, H, W. Throws Error on a zero-variance channel.
  void initialize(const NdArr& batch);
  void set_identity();
  void set(const NdArr& scale, const NdArr& bias);
  /// Marks the layer initialized without touching the parameters (checkpoint restore).
  void mark_initialized(bool v) { initialized_ = v; }
  NdArr scale() const;

  LayerOut forward(Tape& t, const Var& x);
  Var inverse(Tape& t, const Var& y);
  ParameterList parameters() { return {&log_scale, &bias}; }

  Parameter log_scale;
  Parameter bias;

 private:
  void require_initialized() const;
  bool initialized_ = false;
};

/// Invertible 1x1 convolution: y[:, :, h, w] = W x[:, :, h, w] with a dense C x C matrix.
class InvConv1x1 {
 public:
  InvConv1x1() = default;
  /// Weight starts as a random orthogonal matrix.
  InvConv1x1(std::string name, std::int64_t channels, Rng& rng);

  void set_weight(const NdArr& w);

  LayerOut forward(Tape& t, const Var& x);
  Var inverse(Tape& t, const Var& y);
  ParameterList parameters() { return {&weight}; }

  Parameter weight;

 private:
  void require_invertible() const;
};

/// Three-convolution network (3x3 -> 1x1 -> 3x3, ReLU between) producing
/// s and t for the transformed half. The last convolution starts at zero.
class CouplingBackbone {
 public:
  CouplingBackbone() = default;
  CouplingBackbone(std::string name, std::int64_t in_channels, std::int64_t out_channels, std::int64_t hidden,
                   Rng& rng);

  /// Returns the stacked [s; t] output with 2 * out_channels channels.
  Var operator()(Tape& t, const Var& x);
  ParameterList parameters();

  nn::Conv2d in;
  nn::Conv2d mid;
  nn::Conv2d out;
};

/// h_{1:d} = x_{1:d};  h_{d+1:D} = x_{d+1:D} * exp(s(x_{1:d})) + t(x_{1:d}), split along channels with d = D/2.
class AffineCoupling {
 public:
  AffineCoupling() = default;
  AffineCoupling(std::string name, std::int64_t channels, std::int64_t hidden, Rng& rng);

  LayerOut forward(Tape& t, const Var& x);
  Var inverse(Tape& t, const Var& y);
  ParameterList parameters() { return backbone.parameters(); }

  std::int64_t channels = 0;
  CouplingBackbone backbone;
};

/// C x H x W -> 4C x H/2 x W/2; output channel 4c + 2i + j holds x[c, 2h + i, 2w + j].
Var squeeze(const Var& x);
Var unsqueeze(const Var& y);

/// Splits off the first half of the channels as the factored-out latent.
struct FactorOut {
  Var z_part;
  Var rest;
};
FactorOut factor_out(const Var& h);
Var merge(const Var& z_part, const Var& rest);

/// actnorm -> invconv -> coupling.
struct FlowStep {
  ActNorm actnorm;
  InvConv1x1 invconv;
  AffineCoupling coupling;

  ParameterList parameters();
};

struct FlowConfig {
  std::int64_t in_channels = 1;
  std::int64_t levels = 2;
  std::int64_t steps = 4;
  std::int64_t hidden = 64;
};

/// Multi-scale flow: each level squeezes, runs `steps` flow steps, and every
/// level but the last factors out half of its channels.
class MultiScaleFlow {
 public:
  struct Output {
    std::vector<Var> z_parts;
    Var z;
    Var logdet;
  };

  MultiScaleFlow() = default;
  MultiScaleFlow(const FlowConfig& cfg, Rng& rng, const std::string& prefix = "flow");

  /// With `init_actnorm`, uninitialized actnorm layers are initialized from
  /// the activations they receive.
  Output forward(Tape& t, const Var& x, bool init_actnorm = false);
  Var inverse(Tape& t, const std::vector<Var>& z_parts, const Var& z);

  void initialize(const NdArr& batch);
  bool initialized() const;
  void set_actnorm_identity();

  /// Throws ShapeError unless H and W are divisible by 2^levels.
  void check_input(const Shape& x) const;
  /// Shape of the final latent for an input shape.
  Shape latent_shape(const Shape& x) const;
  std::vector<Shape> z_part_shapes(const Shape& x) const;

  ParameterList parameters();
  std::vector<std::string> layer_order() const;
  std::vector<bool> actnorm_flags() const;
  void set_actnorm_flags(const std::vector<bool>& flags);

  const FlowConfig& config() const { return cfg_; }
  std::vector<std::vector<FlowStep>>& levels() { return levels_; }

 private:
  FlowConfig cfg_;
  std::vector<std::vector<FlowStep>> levels_;
};

}  // namespace flowseg::flow
