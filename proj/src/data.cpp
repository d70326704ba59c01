#include "flowseg/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>

#include "flowseg/rng.hpp"

namespace flowseg::data {

using io::json;
namespace fs = io::fs;

namespace {

bool is_binary(Real v) { return std::abs(v) <= Real(1e-6) || std::abs(v - 1) <= Real(1e-6); }

std::string array_hash(const NdArr& a) {
  return io::bytes_hash(std::string(reinterpret_cast<const char*>(a.data()), static_cast<std::size_t>(a.size()) * sizeof(Real)));
}

NdArr crop(const NdArr& a, std::int64_t r0, std::int64_t c0, std::int64_t p) {
  NdArr out(Shape{p, p});
  const auto W = a.dim(1);
  for (std::int64_t r = 0; r < p; ++r)
    for (std::int64_t c = 0; c < p; ++c) out[r * p + c] = a[(r0 + r) * W + c0 + c];
  return out;
}

json origin_json(const Origin& o) {
  return {{"section", o.section}, {"split", o.split}, {"row", o.row}, {"col", o.col}, {"flipped", o.flipped}};
}

Origin origin_from_json(const json& j) {
  return {j.at("section").get<std::string>(), j.at("split").get<std::string>(), j.at("row").get<std::int64_t>(),
          j.at("col").get<std::int64_t>(), j.at("flipped").get<bool>()};
}

std::string pair_stem(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%06zu", i);
  return buf;
}

const SplitRange& find_split(const Section& s, const std::string& name) {
  for (const auto& r : s.splits)
    if (r.name == name) return r;
  throw Error("section '" + s.id + "' has no split '" + name + "'");
}

}  // namespace

void validate_section(const Section& s) {
  if (s.image.rank() != 2) throw ShapeError("section '" + s.id + "': image must be 2-D, got " + shape_str(s.image.shape()));
  require_same_shape("section", s.image.shape(), s.mask.shape());
  for (std::int64_t i = 0; i < s.mask.size(); ++i)
    if (!is_binary(s.mask[i])) throw Error("section '" + s.id + "': mask is not binary");
  if (s.splits.empty()) throw Error("section '" + s.id + "': no splits");
  std::int64_t at = 0;
  for (const auto& r : s.splits) {
    if (r.begin != at || r.end <= r.begin) {
      throw Error("section '" + s.id + "': splits must be ordered, disjoint, and cover the width (split '" + r.name +
                  "' is [" + std::to_string(r.begin) + ", " + std::to_string(r.end) + "))");
    }
    at = r.end;
  }
  if (at != s.image.dim(1)) throw Error("section '" + s.id + "': splits end at " + std::to_string(at) + ", width is " +
                                        std::to_string(s.image.dim(1)));
}

NdArr normalize_image(const NdArr& img, NormStats* stats) {
  const auto n = static_cast<double>(img.size());
  double m = 0;
  for (auto v : img.vec()) m += v;
  m /= n;
  double var = 0;
  for (auto v : img.vec()) var += (v - m) * (v - m);
  const double sd = std::sqrt(var / n);
  if (!(sd > 1e-12 * std::max(1.0, std::abs(m)))) throw Error("normalize_image: image has zero standard deviation");
  NdArr out(img.shape());
  for (std::int64_t i = 0; i < img.size(); ++i) out[i] = static_cast<Real>((img[i] - m) / sd);
  if (stats) *stats = {static_cast<Real>(m), static_cast<Real>(sd)};
  return out;
}

NdArr velocity_to_mask(const NdArr& vel, Real threshold, Real clip_lo, Real clip_hi) {
  if (!(clip_lo < clip_hi)) throw Error("velocity_to_mask: clip_lo must be below clip_hi");
  if (threshold < clip_lo || threshold > clip_hi) throw Error("velocity_to_mask: threshold outside the clip range");
  NdArr out(vel.shape());
  for (std::int64_t i = 0; i < vel.size(); ++i) out[i] = std::clamp(vel[i], clip_lo, clip_hi) >= threshold ? 1 : 0;
  return out;
}

std::int64_t grid_stride(std::int64_t patch, Real overlap) {
  if (!(overlap >= 0 && overlap < 1)) throw Error("grid: overlap must be in [0, 1), got " + std::to_string(overlap));
  if (patch <= 0) throw Error("grid: patch must be positive");
  return std::max<std::int64_t>(1, std::llround(double(patch) * (1 - double(overlap))));
}

std::vector<std::int64_t> grid_anchors(std::int64_t extent, std::int64_t patch, Real overlap) {
  const auto stride = grid_stride(patch, overlap);
  if (patch > extent) {
    throw Error("grid: patch " + std::to_string(patch) + " exceeds extent " + std::to_string(extent));
  }
  std::vector<std::int64_t> out;
  for (std::int64_t a = 0; a + patch <= extent; a += stride) out.push_back(a);
  if (out.back() + patch < extent) out.push_back(extent - patch);
  return out;
}

std::int64_t grid_count(std::int64_t extent, std::int64_t patch, Real overlap) {
  const auto stride = grid_stride(patch, overlap);
  if (patch > extent) throw Error("grid: patch exceeds extent");
  return (extent - patch) / stride + 1 + ((extent - patch) % stride ? 1 : 0);
}

std::vector<PatchPair> extract_patch_grid(const Section& s, std::int64_t patch, Real overlap, std::int64_t col_begin,
                                          std::int64_t col_end, const std::string& split) {
  require_same_shape("extract_patch_grid", s.image.shape(), s.mask.shape());
  if (s.image.rank() != 2) throw ShapeError("extract_patch_grid: section must be 2-D");
  if (col_end < 0) col_end = s.image.dim(1);
  if (col_begin < 0 || col_end > s.image.dim(1) || col_begin >= col_end) throw Error("extract_patch_grid: bad column range");
  const auto rows = grid_anchors(s.image.dim(0), patch, overlap);
  const auto cols = grid_anchors(col_end - col_begin, patch, overlap);
  std::vector<PatchPair> out;
  out.reserve(rows.size() * cols.size());
  for (auto r : rows)
    for (auto c : cols)
      out.push_back({crop(s.image, r, col_begin + c, patch), crop(s.mask, r, col_begin + c, patch),
                     {s.id, split, r, col_begin + c, false}});
  return out;
}

Real salt_fraction(const NdArr& y) {
  double s = 0;
  for (std::int64_t i = 0; i < y.size(); ++i) {
    if (!is_binary(y[i])) throw Error("salt_fraction: mask is not binary");
    s += y[i];
  }
  return static_cast<Real>(s / double(y.size()));
}

std::vector<PatchPair> filter_boundary_patches(const std::vector<PatchPair>& pairs, Real lo, Real hi) {
  if (!(lo < hi)) throw Error("filter_boundary_patches: lo must be below hi");
  std::vector<PatchPair> out;
  for (const auto& p : pairs) {
    const Real f = salt_fraction(p.y);
    if (f >= lo && f <= hi) out.push_back(p);
  }
  return out;
}

NdArr hflip(const NdArr& a) {
  if (a.rank() < 1) return a;
  const auto W = a.shape().back();
  NdArr out(a.shape());
  for (std::int64_t r = 0; r < a.size() / W; ++r)
    for (std::int64_t c = 0; c < W; ++c) out[r * W + c] = a[r * W + (W - 1 - c)];
  return out;
}

std::vector<PatchPair> hflip_augment(const std::vector<PatchPair>& pairs) {
  std::vector<PatchPair> out = pairs;
  out.reserve(2 * pairs.size());
  for (const auto& p : pairs) {
    PatchPair f{hflip(p.x), hflip(p.y), p.origin};
    f.origin.flipped = !p.origin.flipped;
    out.push_back(std::move(f));
  }
  return out;
}

json to_json(const DatasetConfig& c) {
  return {{"patch", c.patch},
          {"generative_overlap", c.generative_overlap},
          {"segmentation_overlap", c.segmentation_overlap},
          {"fraction_lo", c.fraction_lo},
          {"fraction_hi", c.fraction_hi},
          {"generative_splits", c.generative_splits},
          {"segmentation_splits", c.segmentation_splits}};
}

DatasetConfig dataset_config_from_json(const json& j) {
  io::require_keys_subset(j, {"patch", "generative_overlap", "segmentation_overlap", "fraction_lo", "fraction_hi",
                              "generative_splits", "segmentation_splits"},
                          "dataset config");
  DatasetConfig c;
  c.patch = j.value("patch", c.patch);
  c.generative_overlap = j.value("generative_overlap", c.generative_overlap);
  c.segmentation_overlap = j.value("segmentation_overlap", c.segmentation_overlap);
  c.fraction_lo = j.value("fraction_lo", c.fraction_lo);
  c.fraction_hi = j.value("fraction_hi", c.fraction_hi);
  c.generative_splits = j.value("generative_splits", c.generative_splits);
  c.segmentation_splits = j.value("segmentation_splits", c.segmentation_splits);
  grid_stride(c.patch, c.generative_overlap);
  grid_stride(c.patch, c.segmentation_overlap);
  if (!(c.fraction_lo < c.fraction_hi)) throw Error("dataset config: fraction_lo must be below fraction_hi");
  return c;
}

std::int64_t PatchDataset::size() const {
  std::size_t n = 0;
  for (const auto& [name, pairs] : splits) n += pairs.size();
  return static_cast<std::int64_t>(n);
}

Datasets build_datasets(const std::vector<Section>& sections, const DatasetConfig& cfg) {
  if (sections.empty()) throw Error("build_datasets: no sections");
  Datasets d;
  json sources = json::array();
  for (const auto& raw : sections) {
    validate_section(raw);
    NormStats st;
    Section s = raw;
    s.image = normalize_image(raw.image, &st);
    sources.push_back({{"id", s.id},
                       {"shape", s.image.shape()},
                       {"splits", [&] {
                          json a = json::array();
                          for (const auto& r : s.splits) a.push_back({{"name", r.name}, {"begin", r.begin}, {"end", r.end}});
                          return a;
                        }()},
                       {"normalization", {{"mean", st.mean}, {"std", st.std}}},
                       {"image_hash", array_hash(raw.image)},
                       {"mask_hash", array_hash(raw.mask)},
                       {"provenance", raw.provenance}});
    for (const auto& name : cfg.generative_splits) {
      const auto& r = find_split(s, name);
      auto grid = extract_patch_grid(s, cfg.patch, cfg.generative_overlap, r.begin, r.end, name);
      auto kept = filter_boundary_patches(grid, cfg.fraction_lo, cfg.fraction_hi);
      auto& dst = d.generative.splits[name];
      dst.insert(dst.end(), kept.begin(), kept.end());
    }
    for (const auto& name : cfg.segmentation_splits) {
      const auto& r = find_split(s, name);
      auto grid = extract_patch_grid(s, cfg.patch, cfg.segmentation_overlap, r.begin, r.end, name);
      auto& dst = d.segmentation.splits[name];
      dst.insert(dst.end(), grid.begin(), grid.end());
    }
  }
  for (auto* ds : {&d.generative, &d.segmentation})
    for (auto& [name, pairs] : ds->splits) pairs = hflip_augment(pairs);
  for (const auto& [name, pairs] : d.generative.splits)
    if (pairs.empty()) throw Error("build_datasets: generative split '" + name + "' is empty after filtering");
  for (const auto& [name, pairs] : d.segmentation.splits)
    if (pairs.empty()) throw Error("build_datasets: segmentation split '" + name + "' is empty");
  d.generative.manifest = {{"kind", "generative"}, {"config", to_json(cfg)}, {"sources", sources}};
  d.segmentation.manifest = {{"kind", "segmentation"}, {"config", to_json(cfg)}, {"sources", sources}};
  return d;
}

void save_dataset(const fs::path& dir, const PatchDataset& ds) {
  fs::path tmp = dir;
  tmp += ".tmp";
  fs::remove_all(tmp);
  fs::create_directories(tmp);
  json manifest = ds.manifest;
  json counts = json::object(), origins = json::object();
  for (const auto& [name, pairs] : ds.splits) {
    fs::create_directories(tmp / "pairs" / name);
    json o = json::array();
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      io::save_ndarray(tmp / "pairs" / name / (pair_stem(i) + "_x.bin"), pairs[i].x);
      io::save_ndarray(tmp / "pairs" / name / (pair_stem(i) + "_y.bin"), pairs[i].y);
      o.push_back(origin_json(pairs[i].origin));
    }
    counts[name] = pairs.size();
    origins[name] = o;
  }
  manifest["counts"] = counts;
  manifest["origins"] = origins;
  manifest["format"] = 1;
  io::write_json(tmp / "manifest.json", manifest);
  fs::remove_all(dir);
  if (dir.has_parent_path()) fs::create_directories(dir.parent_path());
  fs::rename(tmp, dir);
}

PatchDataset load_dataset(const fs::path& dir) {
  if (!fs::exists(dir / "manifest.json")) throw Error("dataset not found: " + dir.string());
  PatchDataset ds;
  ds.manifest = io::read_json(dir / "manifest.json");
  for (const auto& [name, count] : ds.manifest.at("counts").items()) {
    const auto& origins = ds.manifest.at("origins").at(name);
    auto& pairs = ds.splits[name];
    const auto n = count.get<std::size_t>();
    for (std::size_t i = 0; i < n; ++i) {
      pairs.push_back({io::load_ndarray(dir / "pairs" / name / (pair_stem(i) + "_x.bin")),
                       io::load_ndarray(dir / "pairs" / name / (pair_stem(i) + "_y.bin")), origin_from_json(origins.at(i))});
    }
  }
  ds.manifest.erase("counts");
  ds.manifest.erase("origins");
  ds.manifest.erase("format");
  return ds;
}

std::pair<NdArr, NdArr> stack(const std::vector<PatchPair>& pairs) {
  if (pairs.empty()) return {NdArr(Shape{0, 1, 1, 1}), NdArr(Shape{0, 1, 1, 1})};
  const auto H = pairs[0].x.dim(0), W = pairs[0].x.dim(1);
  const auto n = static_cast<std::int64_t>(pairs.size());
  NdArr xs(Shape{n, 1, H, W}), ys(xs.shape());
  for (std::int64_t i = 0; i < n; ++i) {
    const auto& p = pairs[static_cast<std::size_t>(i)];
    if (p.x.shape() != Shape{H, W} || p.y.shape() != Shape{H, W}) throw ShapeError("stack: pairs differ in shape");
    std::copy_n(p.x.data(), H * W, xs.data() + i * H * W);
    std::copy_n(p.y.data(), H * W, ys.data() + i * H * W);
  }
  return {xs, ys};
}

std::vector<PatchPair> all_pairs(const PatchDataset& ds) {
  std::vector<PatchPair> out;
  for (const auto& [name, pairs] : ds.splits) out.insert(out.end(), pairs.begin(), pairs.end());
  return out;
}

std::vector<PatchPair> unstack(const NdArr& xs, const NdArr& ys, const std::string& split, const std::string& source) {
  require_same_shape("unstack", xs.shape(), ys.shape());
  if (xs.rank() != 4 || xs.dim(1) != 1) throw ShapeError("unstack: expected [N, 1, H, W], got " + shape_str(xs.shape()));
  const auto n = xs.dim(0), H = xs.dim(2), W = xs.dim(3);
  std::vector<PatchPair> out;
  for (std::int64_t i = 0; i < n; ++i) {
    PatchPair p{NdArr(Shape{H, W}), NdArr(Shape{H, W}), {source, split, 0, 0, false}};
    std::copy_n(xs.data() + i * H * W, H * W, p.x.data());
    std::copy_n(ys.data() + i * H * W, H * W, p.y.data());
    p.origin.col = i;
    out.push_back(std::move(p));
  }
  return out;
}

DemoSection demo_section(std::uint64_t seed, std::int64_t H, std::int64_t W) {
  if (H < 16 || W < 80) throw Error("demo_section: section must be at least 16 x 80");
  Rng rng(seed);
  NdArr vel(Shape{H, W});
  const int layers = 14;
  std::vector<double> depth(layers), amp(layers), wavelength(layers), phase(layers), jump(layers);
  for (int i = 0; i < layers; ++i) {
    depth[i] = rng.uniform(0.05, 0.95) * double(H);
    amp[i] = rng.uniform(0, 0.06) * double(H);
    wavelength[i] = rng.uniform(0.3, 1.5) * double(W);
    phase[i] = rng.uniform(0, 2 * std::numbers::pi);
    jump[i] = rng.uniform(-150, 300);
  }
  for (std::int64_t r = 0; r < H; ++r)
    for (std::int64_t c = 0; c < W; ++c) {
      double v = 1500 + 1800 * double(r) / double(H);
      for (int i = 0; i < layers; ++i) {
        const double d = depth[i] + amp[i] * std::sin(2 * std::numbers::pi * double(c) / wavelength[i] + phase[i]);
        if (double(r) > d) v += jump[i];
      }
      vel[r * W + c] = static_cast<Real>(std::clamp(v, 1400.0, 4200.0));
    }

  const auto bodies = std::max<std::int64_t>(1, W / 128);
  for (std::int64_t b = 0; b < bodies; ++b) {
    const double cx = (double(b) + 0.5) * double(W) / double(bodies) + rng.uniform(-0.1, 0.1) * double(W) / double(bodies);
    const double cy = rng.uniform(0.35, 0.65) * double(H);
    const double r0 = rng.uniform(0.18, 0.3) * double(H);
    const double a3 = rng.uniform(0.05, 0.2), a5 = rng.uniform(0.0, 0.12);
    const double p3 = rng.uniform(0, 2 * std::numbers::pi), p5 = rng.uniform(0, 2 * std::numbers::pi);
    for (std::int64_t r = 0; r < H; ++r)
      for (std::int64_t c = 0; c < W; ++c) {
        const double dx = double(c) - cx, dy = double(r) - cy;
        const double th = std::atan2(dy, dx);
        const double rad = r0 * (1 + a3 * std::cos(3 * th + p3) + a5 * std::cos(5 * th + p5));
        if (std::hypot(dx, dy) <= rad) vel[r * W + c] = 4500;
      }
  }

  NdArr refl(Shape{H, W});
  for (std::int64_t r = 0; r + 1 < H; ++r)
    for (std::int64_t c = 0; c < W; ++c) {
      const double a = vel[r * W + c], b = vel[(r + 1) * W + c];
      refl[r * W + c] = static_cast<Real>((b - a) / (b + a));
    }
  const double f = 0.12;
  const int half = 8;
  std::vector<double> wavelet(2 * half + 1);
  for (int k = -half; k <= half; ++k) {
    const double a = std::pow(std::numbers::pi * f * k, 2);
    wavelet[static_cast<std::size_t>(k + half)] = (1 - 2 * a) * std::exp(-a);
  }
  NdArr image(Shape{H, W});
  for (std::int64_t r = 0; r < H; ++r)
    for (std::int64_t c = 0; c < W; ++c) {
      double s = 0;
      for (int k = -half; k <= half; ++k) {
        const auto rr = r - k;
        if (rr >= 0 && rr < H) s += wavelet[static_cast<std::size_t>(k + half)] * refl[rr * W + c];
      }
      image[r * W + c] = static_cast<Real>(s + 0.002 * rng.normal());
    }

  DemoSection d;
  d.velocity = vel;
  d.section.id = "demo-" + std::to_string(seed);
  d.section.image = image;
  d.section.mask = velocity_to_mask(vel, 4400, 1400, 5000);
  const auto t1 = W * 3 / 5, t2 = W * 4 / 5;
  d.section.splits = {{"train", 0, t1}, {"val", t1, t2}, {"test", t2, W}};
  d.section.provenance = {{"generator", "demo"}, {"seed", seed}, {"threshold", 4400}, {"clip", {1400, 5000}}};
  return d;
}

Section load_section(const fs::path& descriptor) {
  const json j = io::read_json(descriptor);
  io::require_keys_subset(j, {"id", "image", "mask", "velocity", "threshold", "clip_lo", "clip_hi", "splits"},
                          "section descriptor " + descriptor.string());
  const fs::path base = descriptor.parent_path();
  Section s;
  s.id = j.value("id", descriptor.stem().string());
  const fs::path image = base / j.at("image").get<std::string>();
  s.image = io::load_ndarray(image);
  s.provenance = {{"descriptor", descriptor.filename().string()}, {"image_file_hash", io::file_hash(image)}};
  if (j.contains("mask") == j.contains("velocity")) {
    throw Error("section descriptor " + descriptor.string() + ": give exactly one of 'mask' or 'velocity'");
  }
  if (j.contains("mask")) {
    const fs::path mask = base / j.at("mask").get<std::string>();
    s.mask = io::load_ndarray(mask);
    s.provenance["mask_file_hash"] = io::file_hash(mask);
  } else {
    for (const char* k : {"threshold", "clip_lo", "clip_hi"})
      if (!j.contains(k)) throw Error("section descriptor " + descriptor.string() + ": velocity needs '" + k + "'");
    const fs::path vel = base / j.at("velocity").get<std::string>();
    s.mask = velocity_to_mask(io::load_ndarray(vel), j.at("threshold").get<Real>(), j.at("clip_lo").get<Real>(),
                              j.at("clip_hi").get<Real>());
    s.provenance["velocity_file_hash"] = io::file_hash(vel);
    s.provenance["threshold"] = j.at("threshold");
    s.provenance["clip"] = {j.at("clip_lo"), j.at("clip_hi")};
  }
  for (const auto& r : j.at("splits"))
    s.splits.push_back({r.at("name").get<std::string>(), r.at("begin").get<std::int64_t>(), r.at("end").get<std::int64_t>()});
  validate_section(s);
  return s;
}

NdArr half_plane_masks(std::int64_t count, std::int64_t patch, std::uint64_t seed, Real lo, Real hi) {
  Rng rng(seed);
  NdArr out(Shape{count, 1, patch, patch});
  const double c0 = double(patch - 1) / 2;
  for (std::int64_t n = 0; n < count; ++n) {
    for (int attempt = 0;; ++attempt) {
      if (attempt > 1000) throw Error("half_plane_masks: cannot meet the fraction bounds");
      const double th = rng.uniform(0, 2 * std::numbers::pi);
      const double off = rng.uniform(-0.35, 0.35) * double(patch);
      const double ct = std::cos(th), st = std::sin(th);
      std::int64_t ones = 0;
      for (std::int64_t r = 0; r < patch; ++r)
        for (std::int64_t c = 0; c < patch; ++c) {
          const bool salt = (double(c) - c0) * ct + (double(r) - c0) * st > off;
          out[(n * patch + r) * patch + c] = salt ? 1 : 0;
          ones += salt;
        }
      const double f = double(ones) / double(patch * patch);
      if (f >= lo && f <= hi) break;
    }
  }
  return out;
}

}  // namespace flowseg::data
