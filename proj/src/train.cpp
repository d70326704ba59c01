#include "flowseg/train.hpp"

#include <algorithm>

#include "flowseg/rng.hpp"

namespace flowseg {

using io::json;

json to_json(const TrainConfig& c) {
  return {{"batch", c.batch},   {"iterations", c.iterations}, {"lr", c.lr},
          {"warmup", c.warmup}, {"power", c.power},           {"seed", c.seed}};
}

TrainConfig train_config_from_json(const json& j, const TrainConfig& base) {
  io::require_keys_subset(j, {"batch", "iterations", "lr", "warmup", "power", "seed"}, "train config");
  TrainConfig c = base;
  c.batch = j.value("batch", c.batch);
  c.iterations = j.value("iterations", c.iterations);
  c.lr = j.value("lr", c.lr);
  c.warmup = j.value("warmup", c.warmup);
  c.power = j.value("power", c.power);
  c.seed = j.value("seed", c.seed);
  if (c.batch <= 0 || c.iterations <= 0) throw Error("train config: batch and iterations must be positive");
  if (c.warmup < 0 || c.warmup >= c.iterations) throw Error("train config: warmup must be in [0, iterations)");
  if (!(c.lr >= 0)) throw Error("train config: lr must be >= 0");
  return c;
}

NdArr take_rows(const NdArr& a, const std::vector<std::int64_t>& idx) {
  Shape s = a.shape();
  const std::int64_t row = a.size() / s[0];
  s[0] = static_cast<std::int64_t>(idx.size());
  NdArr out(s);
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] < 0 || idx[r] >= a.dim(0)) throw Error("take_rows: index out of range");
    std::copy_n(a.data() + idx[r] * row, row, out.data() + static_cast<std::int64_t>(r) * row);
  }
  return out;
}

std::vector<std::int64_t> batch_indices(std::uint64_t seed, std::int64_t iter, std::int64_t batch,
                                        std::int64_t population) {
  if (population <= 0) throw Error("batch_indices: empty population");
  Rng rng(mix_seed(seed, static_cast<std::uint64_t>(iter), 0xba7c4));
  std::vector<std::int64_t> idx(static_cast<std::size_t>(batch));
  for (auto& i : idx) i = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(population)));
  return idx;
}

}  // namespace flowseg
