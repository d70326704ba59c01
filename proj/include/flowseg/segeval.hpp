#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include "flowseg/checkpoint.hpp"
#include "flowseg/nn.hpp"

namespace flowseg::cnf {
class CnfModel;
}
namespace flowseg::vae {
class VaeModel;
}

namespace flowseg::segeval {

/// |P and G| / |P or G| with P = pred >= thr, over all elements. Returns 1
/// when both are empty. Throws ShapeError on mismatched shapes and Error on a
/// non-binary ground truth.
Real iou_at_threshold(const NdArr& pred, const NdArr& gt, Real thr = Real(0.5));

struct UNetConfig {
  std::int64_t blocks = 2;
  std::int64_t filters = 8;
};

UNetConfig desk_unet_config();
/// Four blocks, 65 first-block filters.
UNetConfig paper_unet_config();
io::json to_json(const UNetConfig& c);
UNetConfig unet_config_from_json(const io::json& j);

/// Encoder blocks of two 3x3 conv + ReLU followed by 2x2 max pooling, a
/// bottleneck block, and decoder blocks that upsample with a 2x2 stride-2
/// transposed convolution, concatenate the skip, and apply two 3x3 conv +
/// ReLU. Filters double per block; a 1x1 convolution emits one logit channel.
class UNet {
 public:
  UNet(const UNetConfig& cfg, std::uint64_t seed);
  UNet(const UNet&) = delete;
  UNet& operator=(const UNet&) = delete;
  UNet(UNet&&) = default;

  /// x: [N, 1, H, W] with H, W divisible by 2^blocks.
  Var forward(Tape& t, const Var& x);
  NdArr predict_probs(const NdArr& x);
  ParameterList parameters();
  std::int64_t parameter_count();
  const UNetConfig& config() const { return cfg_; }

  void save(const io::fs::path& dir, const io::json& extra = {});
  void load(const io::fs::path& dir);

 private:
  struct Block {
    nn::Conv2d a, b;
  };
  UNetConfig cfg_;
  std::vector<Block> down_;
  Block bottleneck_;
  std::vector<nn::ConvTranspose2d> up_;
  std::vector<Block> dec_;
  nn::Conv2d out_;
};

struct SegTrainConfig {
  std::int64_t epochs = 30;
  std::int64_t batch = 16;
  Real lr = Real(1e-3);
};

SegTrainConfig desk_seg_train_config();
/// 60 epochs at lr 1e-3.
SegTrainConfig paper_seg_train_config();
io::json to_json(const SegTrainConfig& c);
SegTrainConfig seg_train_config_from_json(const io::json& j);

/// Stacked pairs, [N, 1, H, W] each.
struct PairSet {
  NdArr x;
  NdArr y;
  std::int64_t size() const { return x.rank() ? x.dim(0) : 0; }
};

PairSet concat(const PairSet& a, const PairSet& b);

struct SegRun {
  Real train_iou = 0;
  Real val_iou = 0;
};

/// Trains on train + aug with per-pixel BCE and Adam, shuffling per epoch
/// from `seed`. Reports IoU on the original training pairs and on `val`.
SegRun train_segmenter(UNet& model, const PairSet& train, const PairSet& aug, const PairSet& val,
                       const SegTrainConfig& cfg, std::uint64_t seed);

/// Dataset-level IoU of the model's probabilities on a pair set.
Real evaluate(UNet& model, const PairSet& set);

/// Produces `count` generated pairs from a seed.
using Generator = std::function<PairSet(std::int64_t count, std::uint64_t seed)>;

/// Draws without replacement from a finite pool; asking for more pairs than
/// the pool holds is an error.
Generator pool_generator(PairSet pool);
/// Masks from the VAE, then patches from the CNF conditioned on them.
Generator model_generator(vae::VaeModel& vae, cnf::CnfModel& cnf, Real temperature);
/// One call's worth of the model generator. A patch with a non-finite value
/// is redrawn from a derived seed, up to `max_redraws` times per pair; the
/// number of redraws is added to `*redrawn` when given.
PairSet generate_pairs(vae::VaeModel& vae, cnf::CnfModel& cnf, std::int64_t count, Real temperature,
                       std::uint64_t seed, std::int64_t* redrawn = nullptr, std::int64_t max_redraws = 100);

/// Index of the second-highest value: stable sort descending, pick position 1
/// (position 0 when there is a single value).
std::size_t select_second_best(const std::vector<Real>& train_ious);

struct TrialRecord {
  std::int64_t trial = 0;
  std::uint64_t model_seed = 0;
  Real train_iou = 0;
  Real val_iou = 0;
};

struct SizeResult {
  std::int64_t size = 0;
  std::vector<TrialRecord> trials;
  std::size_t selected = 0;
  Real val_iou = 0;
};

struct SweepConfig {
  std::vector<std::int64_t> sizes{0, 25, 50, 100};
  std::int64_t trials = 10;
  SegTrainConfig train;
  UNetConfig unet;
  std::uint64_t seed = 0;
  /// Upper bound on concurrent trials; 0 means the hardware concurrency.
  std::int64_t threads = 0;
};

/// Trial t of every size initializes its model from trial_model_seed(seed, t)
/// and draws its augmentation from (seed, size, t).
std::uint64_t trial_model_seed(std::uint64_t seed, std::int64_t trial);
std::uint64_t trial_aug_seed(std::uint64_t seed, std::int64_t size, std::int64_t trial);

/// When `models_dir` is set, each size's selected model is saved under
/// models_dir/size_<n>.
std::vector<SizeResult> augmentation_sweep(const PairSet& train, const PairSet& val, const Generator& gen,
                                           const SweepConfig& cfg,
                                           const std::optional<io::fs::path>& models_dir = std::nullopt);

/// {"sizes": [{"size", "trials": [{"trial", "model_seed", "train_iou", "val_iou"}], "selected", "val_iou"}],
///  "baseline_val_iou", "best_size"}
io::json sweep_report(const std::vector<SizeResult>& results);
/// Throws Error describing the first deviation from the sweep_report shape.
void validate_sweep_report(const io::json& report);
/// Header "size,selected_trial,selected_train_iou,val_iou,mean_train_iou,mean_val_iou".
std::string sweep_csv(const std::vector<SizeResult>& results);

/// Trial-thread cap from FLOWSEG_THREADS, else the hardware concurrency.
std::int64_t thread_limit();

}  // namespace flowseg::segeval
