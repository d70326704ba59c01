#pragma once

#include <cstdint>
#include <vector>

#include "flowseg/io.hpp"
#include "flowseg/ndarray.hpp"

namespace flowseg {

struct TrainConfig {
  std::int64_t batch = 16;
  std::int64_t iterations = 2000;
  Real lr = Real(1e-3);
  std::int64_t warmup = 0;
  Real power = 1;
  std::uint64_t seed = 0;
};

io::json to_json(const TrainConfig& c);
/// Keys of to_json(); missing keys keep `base` values. Rejects unknown keys.
TrainConfig train_config_from_json(const io::json& j, const TrainConfig& base = {});

/// Rows `idx` of an [M, ...] array.
NdArr take_rows(const NdArr& a, const std::vector<std::int64_t>& idx);
/// `batch` indices drawn uniformly with replacement from [0, population),
/// a pure function of (seed, iter).
std::vector<std::int64_t> batch_indices(std::uint64_t seed, std::int64_t iter, std::int64_t batch,
                                        std::int64_t population);

}  // namespace flowseg
