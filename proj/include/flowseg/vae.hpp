#pragma once

#include <cstdint>
#include <vector>

#include "flowseg/checkpoint.hpp"
#include "flowseg/nn.hpp"
#include "flowseg/optim.hpp"
#include "flowseg/train.hpp"

namespace flowseg::vae {

struct VaeConfig {
  std::int64_t patch = 16;
  /// Encoder widths after the input layer; the decoder mirrors them.
  std::vector<std::int64_t> hidden{128, 64, 32};
  std::int64_t latent = 16;
};

VaeConfig desk_config();
/// 64 x 64 masks, widths 1024 / 256 / 64, latent 64.
VaeConfig paper_config();
io::json to_json(const VaeConfig& c);
VaeConfig vae_config_from_json(const io::json& j);

/// Batch 32, 1K iterations, lr 1e-3 with 100 warm-up steps.
TrainConfig desk_train_config();
/// Batch 300, 65.6K iterations, lr 1e-3 with 6.5K warm-up steps.
TrainConfig paper_train_config();

/// 0.5 * sum(exp(logvar) + mu^2 - 1 - logvar) per row of [N, latent] inputs.
NdArr kl_closed_form(const NdArr& mu, const NdArr& logvar);

struct Posterior {
  Var mu;
  Var logvar;
};

struct ElboTerms {
  Var loss;   ///< mean over the batch of recon + kl
  Var recon;  ///< mean summed BCE
  Var kl;     ///< mean closed-form KL
};

/// Dense VAE over flattened H x W binary masks. Encoder: three ReLU dense
/// layers and a zero-initialized head emitting [mu; logvar]. Decoder: four
/// ReLU dense layers and an output layer emitting H*W logits.
class VaeModel {
 public:
  VaeModel(const VaeConfig& cfg, std::uint64_t seed);
  VaeModel(const VaeModel&) = delete;
  VaeModel& operator=(const VaeModel&) = delete;

  const VaeConfig& config() const { return cfg_; }
  std::int64_t dims() const { return cfg_.patch * cfg_.patch; }

  /// y: [N, 1, H, W] or [N, H*W].
  Posterior encode(Tape& t, const NdArr& y);
  /// [N, latent] -> [N, H*W] logits.
  Var decode(Tape& t, const Var& z);
  /// z = mu + exp(logvar / 2) * eps.
  static Var reparameterize(const Var& mu, const Var& logvar, const NdArr& eps);

  std::pair<NdArr, NdArr> encode(const NdArr& y);
  NdArr reparameterize(const NdArr& mu, const NdArr& logvar, std::uint64_t seed) const;
  /// Logits reshaped to [N, 1, H, W].
  NdArr decode(const NdArr& z);

  /// Negative ELBO with one reparameterized draw per example, noise from `seed`.
  ElboTerms elbo_loss(Tape& t, const NdArr& y, std::uint64_t seed);
  /// Binary masks [count, 1, H, W] from z ~ N(0, I), thresholded at 0.5.
  NdArr sample(std::uint64_t seed, std::int64_t count);

  ParameterList parameters();
  ParameterList encoder_parameters();
  ParameterList decoder_parameters();

  io::json manifest_meta() const;
  void save(const io::fs::path& dir, const optim::AdamState* adam = nullptr, const io::json& extra = {});
  io::json load(const io::fs::path& dir, optim::AdamState* adam = nullptr);
  static VaeConfig read_config(const io::fs::path& dir);

  std::vector<nn::Dense> encoder;
  nn::Dense head;
  std::vector<nn::Dense> decoder;

 private:
  NdArr flatten_masks(const NdArr& y) const;

  VaeConfig cfg_;
};

struct StepStats {
  std::int64_t iter = 0;
  Real loss = 0;
  Real recon = 0;
  Real kl = 0;
  Real lr = 0;
};

class VaeTrainer {
 public:
  VaeTrainer(VaeModel& model, TrainConfig cfg);

  StepStats step(const NdArr& y);
  /// Draws the current iteration's batch from [M, 1, H, W] masks and steps.
  StepStats step_from(const NdArr& ys);

  std::int64_t iteration() const { return iter_; }
  void set_iteration(std::int64_t i) { iter_ = i; }
  optim::AdamState& adam() { return adam_; }
  const TrainConfig& config() const { return cfg_; }

 private:
  VaeModel& model_;
  TrainConfig cfg_;
  ParameterList params_;
  optim::AdamState adam_;
  std::int64_t iter_ = 0;
};

}  // namespace flowseg::vae
