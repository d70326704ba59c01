#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "flowseg/io.hpp"
#include "flowseg/ndarray.hpp"

namespace flowseg::data {

/// Half-open column interval [begin, end) of a section assigned to one split.
struct SplitRange {
  std::string name;
  std::int64_t begin = 0;
  std::int64_t end = 0;
};

/// A 2-D image with its binary mask and column splits.
struct Section {
  std::string id;
  NdArr image;  ///< [H, W]
  NdArr mask;   ///< [H, W], binary
  std::vector<SplitRange> splits;
  /// Recorded in dataset manifests; empty for in-memory sections.
  io::json provenance = io::json::object();
};

/// Throws Error unless image and mask are 2-D with equal shapes, the mask is
/// binary, and the splits are disjoint, ordered, and cover the width.
void validate_section(const Section& s);

struct NormStats {
  Real mean = 0;
  Real std = 1;
};

/// (img - mean) / std with the population standard deviation.
NdArr normalize_image(const NdArr& img, NormStats* stats = nullptr);

/// 1 where clamp(vel, clip_lo, clip_hi) >= threshold, else 0.
NdArr velocity_to_mask(const NdArr& vel, Real threshold, Real clip_lo, Real clip_hi);

/// stride = max(1, round(patch * (1 - overlap))).
std::int64_t grid_stride(std::int64_t patch, Real overlap);
/// Anchors 0, stride, 2 stride, ... plus a far-edge anchor at extent - patch
/// when the last regular anchor leaves pixels uncovered.
std::vector<std::int64_t> grid_anchors(std::int64_t extent, std::int64_t patch, Real overlap);
/// floor((extent - patch) / stride) + 1, + 1 if the division leaves a remainder.
std::int64_t grid_count(std::int64_t extent, std::int64_t patch, Real overlap);

struct Origin {
  std::string section;
  std::string split;
  std::int64_t row = 0;
  std::int64_t col = 0;
  bool flipped = false;
};

struct PatchPair {
  NdArr x;  ///< [P, P]
  NdArr y;  ///< [P, P], binary
  Origin origin;
};

/// Grid of square patches over columns [col_begin, col_end) of the section.
/// col_end < 0 means the full width.
std::vector<PatchPair> extract_patch_grid(const Section& s, std::int64_t patch, Real overlap,
                                          std::int64_t col_begin = 0, std::int64_t col_end = -1,
                                          const std::string& split = "");

/// Mean of a binary mask. Throws Error on non-binary input.
Real salt_fraction(const NdArr& y);

/// Keeps pairs with lo <= salt_fraction <= hi, in order.
std::vector<PatchPair> filter_boundary_patches(const std::vector<PatchPair>& pairs, Real lo = Real(0.1),
                                               Real hi = Real(0.9));

/// Originals followed by their horizontal mirror images.
std::vector<PatchPair> hflip_augment(const std::vector<PatchPair>& pairs);
NdArr hflip(const NdArr& a);

struct DatasetConfig {
  std::int64_t patch = 16;
  Real generative_overlap = Real(0.9);
  Real segmentation_overlap = Real(0.1);
  Real fraction_lo = Real(0.1);
  Real fraction_hi = Real(0.9);
  std::vector<std::string> generative_splits{"train", "val"};
  std::vector<std::string> segmentation_splits{"train", "val", "test"};
};

io::json to_json(const DatasetConfig& c);
DatasetConfig dataset_config_from_json(const io::json& j);

struct PatchDataset {
  std::map<std::string, std::vector<PatchPair>> splits;
  io::json manifest = io::json::object();
  std::int64_t size() const;
};

struct Datasets {
  PatchDataset generative;
  PatchDataset segmentation;
};

/// Generative: grid at the generative overlap over the generative splits,
/// boundary filter, then flips. Segmentation: grid at the segmentation
/// overlap per split, then flips. Sections are normalized first.
Datasets build_datasets(const std::vector<Section>& sections, const DatasetConfig& cfg);

/// Layout: pairs/<split>/<index, 6 digits>_{x,y}.bin + manifest.json.
void save_dataset(const io::fs::path& dir, const PatchDataset& ds);
PatchDataset load_dataset(const io::fs::path& dir);

/// Stacks pairs as [N, 1, P, P] images and masks.
std::pair<NdArr, NdArr> stack(const std::vector<PatchPair>& pairs);
/// All splits of a dataset in split-name order.
std::vector<PatchPair> all_pairs(const PatchDataset& ds);
std::vector<PatchPair> unstack(const NdArr& xs, const NdArr& ys, const std::string& split, const std::string& source);

/// Non-physical synthetic section: layered sediments with star-shaped salt
/// bodies, imaged by convolving vertical reflectivity with a Ricker wavelet.
/// Returns the section and its velocity model.
struct DemoSection {
  Section section;
  NdArr velocity;
};
DemoSection demo_section(std::uint64_t seed, std::int64_t height = 64, std::int64_t width = 640);

/// Section descriptor JSON: {"id", "image", "mask" | ("velocity", "threshold",
/// "clip_lo", "clip_hi"), "splits": [{"name", "begin", "end"}]}, with array
/// paths relative to the descriptor.
Section load_section(const io::fs::path& descriptor);

/// Binary masks [count, 1, P, P], each the positive side of a random line,
/// with salt fraction within [lo, hi].
NdArr half_plane_masks(std::int64_t count, std::int64_t patch, std::uint64_t seed, Real lo = Real(0.1),
                       Real hi = Real(0.9));

}  // namespace flowseg::data
