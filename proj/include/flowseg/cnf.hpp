#pragma once

#include <cstdint>
#include <functional>
#include <string>

#include "flowseg/checkpoint.hpp"
#include "flowseg/flow.hpp"
#include "flowseg/io.hpp"
#include "flowseg/optim.hpp"
#include "flowseg/train.hpp"

namespace flowseg::cnf {

struct CnfConfig {
  std::int64_t patch = 16;
  std::int64_t channels = 1;
  flow::FlowConfig flow{1, 2, 4, 32};
  std::int64_t prior_hidden = 32;
  std::int64_t aux_hidden = 32;
  /// Weight of the auxiliary BCE term.
  Real bce_weight = 1;
};

/// L = 2, K = 4, 16 x 16 patches.
CnfConfig desk_config();
/// L = 4, K = 15, 64 x 64 patches.
CnfConfig paper_config();

io::json to_json(const CnfConfig& c);
CnfConfig cnf_config_from_json(const io::json& j);

/// Four 3x3 convolutions (the first `levels` with stride 2) and a
/// zero-initialized 1x1 convolution emitting [mu; log sigma] for z_k.
class PriorNetwork {
 public:
  PriorNetwork() = default;
  PriorNetwork(const CnfConfig& cfg, std::int64_t latent_channels, Rng& rng);

  struct Out {
    Var mu;
    Var log_sigma;
  };
  Out operator()(Tape& t, const Var& y);
  ParameterList parameters();

  std::vector<nn::Conv2d> convs;
  nn::Conv2d head;
  std::int64_t latent_channels = 0;
};

/// Four 3x3 transposed convolutions (the first `levels` doubling resolution)
/// and a 3x3 convolution emitting one channel of mask logits.
class AuxNetwork {
 public:
  AuxNetwork() = default;
  AuxNetwork(const CnfConfig& cfg, std::int64_t latent_channels, Rng& rng);

  Var operator()(Tape& t, const Var& z);
  ParameterList parameters();

  std::vector<nn::ConvTranspose2d> deconvs;
  nn::Conv2d head;
};

/// Sum of -0.5 log(2 pi) - log sigma - (z - mu)^2 / (2 sigma^2) over all elements.
/// Throws Error if any sigma <= 0.
Real cond_gaussian_logprob(const NdArr& z, const NdArr& mu, const NdArr& sigma);

/// Throws Error if y is not binary within 1e-6.
void require_binary(const char* op, const NdArr& y);

/// Mean elementwise binary cross-entropy of sigmoid(logits) against y.
Var bce_mean(const Var& logits, const NdArr& y);

struct NllResult {
  NdArr nll;  ///< per sample, nats
  Real mean_nll = 0;
  Real bpd = 0;  ///< mean_nll / (D ln 2)
};

struct LossTerms {
  Var loss;     ///< mean nll + lambda * bce
  Var nll;      ///< per-sample, [N]
  Var mean_nll;
  Var bce;      ///< mean over elements
  flow::MultiScaleFlow::Output latents;
};

class CnfModel {
 public:
  CnfModel(const CnfConfig& cfg, std::uint64_t seed);
  CnfModel(const CnfModel&) = delete;
  CnfModel& operator=(const CnfModel&) = delete;

  const CnfConfig& config() const { return cfg_; }
  Shape input_shape(std::int64_t n) const { return {n, cfg_.channels, cfg_.patch, cfg_.patch}; }
  std::int64_t dims() const { return cfg_.channels * cfg_.patch * cfg_.patch; }

  PriorNetwork::Out prior(Tape& t, const NdArr& y);
  /// Returns (mu, sigma) as arrays. Throws ShapeError on a mis-sized mask.
  std::pair<NdArr, NdArr> prior_params(const NdArr& y);

  /// Full objective on a recording or non-recording tape. With `init_actnorm`,
  /// uninitialized actnorm layers are set from this batch first.
  LossTerms loss_terms(Tape& t, const NdArr& x, const NdArr& y, bool init_actnorm = false);
  NllResult nll(const NdArr& x, const NdArr& y);
  /// Mean BCE between the auxiliary network's prediction from z_k and y.
  Real aux_bce(const NdArr& z_k, const NdArr& y);

  /// z_k ~ N(mu(y), (T sigma(y))^2), z_parts ~ N(0, T^2), x = f^{-1}(z).
  NdArr sample(const NdArr& y, Real temperature, std::uint64_t seed);
  /// Inverse flow from explicit latents.
  NdArr decode(const std::vector<NdArr>& z_parts, const NdArr& z_k);

  void initialize(const NdArr& x);
  bool initialized() const { return flow_.initialized(); }
  /// Sets every actnorm layer to scale 1, bias 0 and marks it initialized.
  void set_actnorm_identity() { flow_.set_actnorm_identity(); }

  ParameterList parameters();
  flow::MultiScaleFlow& flow() { return flow_; }
  PriorNetwork& prior_net() { return prior_; }
  AuxNetwork& aux_net() { return aux_; }

  io::json manifest_meta() const;
  void save(const io::fs::path& dir, const optim::AdamState* adam = nullptr, const io::json& extra = {});
  /// Loads a checkpoint written by save(); architecture must match.
  io::json load(const io::fs::path& dir, optim::AdamState* adam = nullptr);
  static CnfConfig read_config(const io::fs::path& dir);

 private:
  void check_pair(const NdArr& x, const NdArr& y) const;
  void check_mask(const NdArr& y) const;

  CnfConfig cfg_;
  flow::MultiScaleFlow flow_;
  std::int64_t latent_channels_ = 0;
  PriorNetwork prior_;
  AuxNetwork aux_;
};

/// Batch 16, 2K iterations, lr 1e-3 decayed to 0.
TrainConfig desk_train_config();
/// Batch 50, 396.8K iterations, lr 1e-4 decayed to 0.
TrainConfig paper_train_config();

struct StepStats {
  std::int64_t iter = 0;
  Real loss = 0;
  Real nll = 0;
  Real bpd = 0;
  Real bce = 0;
  Real lr = 0;
};

/// Adam over all model parameters with the warm-up + polynomial-decay schedule.
/// Mini-batches are drawn from (seed, iteration) so resumed runs repeat exactly.
class CnfTrainer {
 public:
  CnfTrainer(CnfModel& model, TrainConfig cfg);

  StepStats step(const NdArr& x, const NdArr& y);
  /// Draws the batch for the current iteration from the pair arrays
  /// (shapes [M, C, H, W] and [M, 1, H, W]) and steps.
  StepStats step_from(const NdArr& xs, const NdArr& ys);

  std::int64_t iteration() const { return iter_; }
  void set_iteration(std::int64_t i) { iter_ = i; }
  optim::AdamState& adam() { return adam_; }
  const TrainConfig& config() const { return cfg_; }

 private:
  CnfModel& model_;
  TrainConfig cfg_;
  ParameterList params_;
  optim::AdamState adam_;
  std::int64_t iter_ = 0;
};

}  // namespace flowseg::cnf
