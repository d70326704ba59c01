#include "flowseg/segeval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <numeric>
#include <sstream>
#include <thread>

#include "flowseg/cnf.hpp"
#include "flowseg/optim.hpp"
#include "flowseg/rng.hpp"
#include "flowseg/train.hpp"
#include "flowseg/vae.hpp"

namespace flowseg::segeval {

using io::json;

Real iou_at_threshold(const NdArr& pred, const NdArr& gt, Real thr) {
  require_same_shape("iou_at_threshold", pred.shape(), gt.shape());
  std::int64_t inter = 0, uni = 0;
  for (std::int64_t i = 0; i < gt.size(); ++i) {
    const Real g = gt[i];
    if (!(std::abs(g) <= Real(1e-6) || std::abs(g - 1) <= Real(1e-6))) throw Error("iou_at_threshold: ground truth is not binary");
    const bool p = pred[i] >= thr, q = g > Real(0.5);
    inter += p && q;
    uni += p || q;
  }
  return uni == 0 ? Real(1) : static_cast<Real>(double(inter) / double(uni));
}

UNetConfig desk_unet_config() { return UNetConfig{}; }
UNetConfig paper_unet_config() { return UNetConfig{4, 65}; }

json to_json(const UNetConfig& c) { return {{"blocks", c.blocks}, {"filters", c.filters}}; }

UNetConfig unet_config_from_json(const json& j) {
  io::require_keys_subset(j, {"blocks", "filters"}, "unet config");
  UNetConfig c;
  c.blocks = j.value("blocks", c.blocks);
  c.filters = j.value("filters", c.filters);
  return c;
}

UNet::UNet(const UNetConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  if (cfg_.blocks < 1 || cfg_.filters < 1) throw Error("unet: blocks and filters must be positive");
  Rng rng(seed);
  const Conv2dGeometry same{1, 1, 0};
  auto block = [&](const std::string& name, std::int64_t in, std::int64_t out) {
    return Block{nn::Conv2d(name + ".a", in, out, 3, same, nn::Init::Xavier, rng),
                 nn::Conv2d(name + ".b", out, out, 3, same, nn::Init::Xavier, rng)};
  };
  std::int64_t in = 1;
  for (std::int64_t b = 0; b < cfg_.blocks; ++b) {
    const std::int64_t f = cfg_.filters << b;
    down_.push_back(block("unet.down" + std::to_string(b), in, f));
    in = f;
  }
  bottleneck_ = block("unet.mid", in, cfg_.filters << cfg_.blocks);
  for (std::int64_t b = cfg_.blocks - 1; b >= 0; --b) {
    const std::int64_t f = cfg_.filters << b;
    up_.emplace_back("unet.up" + std::to_string(b), 2 * f, f, 2, Conv2dGeometry{2, 0, 0}, nn::Init::Xavier, rng);
    dec_.push_back(block("unet.dec" + std::to_string(b), 2 * f, f));
  }
  out_ = nn::Conv2d("unet.out", cfg_.filters, 1, 1, {}, nn::Init::Xavier, rng);
}

Var UNet::forward(Tape& t, const Var& x) {
  const std::int64_t m = std::int64_t(1) << cfg_.blocks;
  if (x.value().rank() != 4 || x.dim(1) != 1 || x.dim(2) % m || x.dim(3) % m) {
    throw ShapeError("unet: input must be [N, 1, H, W] with H and W divisible by " + std::to_string(m) + ", got " +
                     shape_str(x.shape()));
  }
  std::vector<Var> skips;
  Var h = x;
  for (auto& blk : down_) {
    h = relu(blk.b(t, relu(blk.a(t, h))));
    skips.push_back(h);
    h = maxpool2d(h, 2);
  }
  h = relu(bottleneck_.b(t, relu(bottleneck_.a(t, h))));
  for (std::size_t i = 0; i < up_.size(); ++i) {
    h = concat_channels(up_[i](t, h), skips[skips.size() - 1 - i]);
    h = relu(dec_[i].b(t, relu(dec_[i].a(t, h))));
  }
  return out_(t, h);
}

NdArr UNet::predict_probs(const NdArr& x) {
  Tape t(false);
  return sigmoid(forward(t, t.constant(x))).value();
}

ParameterList UNet::parameters() {
  ParameterList out;
  auto add_block = [&](Block& b) {
    nn::append(out, b.a.parameters());
    nn::append(out, b.b.parameters());
  };
  for (auto& b : down_) add_block(b);
  add_block(bottleneck_);
  for (std::size_t i = 0; i < up_.size(); ++i) {
    nn::append(out, up_[i].parameters());
    add_block(dec_[i]);
  }
  nn::append(out, out_.parameters());
  return out;
}

std::int64_t UNet::parameter_count() { return nn::parameter_count(parameters()); }

void UNet::save(const io::fs::path& dir, const json& extra) {
  json meta = {{"kind", "unet"}, {"architecture", to_json(cfg_)}};
  if (extra.is_object()) meta.update(extra);
  save_checkpoint(dir, parameters(), meta);
}

void UNet::load(const io::fs::path& dir) {
  const json manifest = read_manifest(dir);
  if (manifest.value("kind", "") != "unet" || manifest.at("architecture") != to_json(cfg_)) {
    throw Error("checkpoint " + dir.string() + " is not a matching unet");
  }
  load_checkpoint(dir, parameters());
}

SegTrainConfig desk_seg_train_config() { return SegTrainConfig{}; }

SegTrainConfig paper_seg_train_config() {
  SegTrainConfig c;
  c.epochs = 60;
  return c;
}

json to_json(const SegTrainConfig& c) { return {{"epochs", c.epochs}, {"batch", c.batch}, {"lr", c.lr}}; }

SegTrainConfig seg_train_config_from_json(const json& j) {
  io::require_keys_subset(j, {"epochs", "batch", "lr"}, "segmenter train config");
  SegTrainConfig c;
  c.epochs = j.value("epochs", c.epochs);
  c.batch = j.value("batch", c.batch);
  c.lr = j.value("lr", c.lr);
  if (c.epochs < 0 || c.batch <= 0 || !(c.lr >= 0)) throw Error("segmenter train config: invalid epochs, batch or lr");
  return c;
}

PairSet concat(const PairSet& a, const PairSet& b) {
  if (b.size() == 0) return a;
  if (a.size() == 0) return b;
  Shape s = a.x.shape();
  Shape sb = b.x.shape();
  sb[0] = s[0];
  if (s != sb || a.y.shape() != a.x.shape() || b.y.shape() != b.x.shape()) {
    throw ShapeError("concat: pair sets " + shape_str(a.x.shape()) + " and " + shape_str(b.x.shape()) + " do not stack");
  }
  s[0] = a.size() + b.size();
  PairSet out{NdArr(s), NdArr(s)};
  std::copy_n(a.x.data(), a.x.size(), out.x.data());
  std::copy_n(b.x.data(), b.x.size(), out.x.data() + a.x.size());
  std::copy_n(a.y.data(), a.y.size(), out.y.data());
  std::copy_n(b.y.data(), b.y.size(), out.y.data() + a.y.size());
  return out;
}

Real evaluate(UNet& model, const PairSet& set) {
  if (set.size() == 0) throw Error("evaluate: empty pair set");
  return iou_at_threshold(model.predict_probs(set.x), set.y);
}

SegRun train_segmenter(UNet& model, const PairSet& train, const PairSet& aug, const PairSet& val,
                       const SegTrainConfig& cfg, std::uint64_t seed) {
  if (train.size() == 0) throw Error("train_segmenter: empty training set");
  const PairSet all = concat(train, aug);
  const auto params = model.parameters();
  optim::AdamState adam(params);
  const auto n = all.size();
  std::vector<std::int64_t> order(static_cast<std::size_t>(n));
  for (std::int64_t e = 0; e < cfg.epochs; ++e) {
    std::iota(order.begin(), order.end(), 0);
    Rng rng(mix_seed(seed, static_cast<std::uint64_t>(e), 0x5e9));
    for (std::int64_t i = n - 1; i > 0; --i) std::swap(order[i], order[rng.below(static_cast<std::uint64_t>(i + 1))]);
    for (std::int64_t b = 0; b < n; b += cfg.batch) {
      const std::vector<std::int64_t> idx(order.begin() + b, order.begin() + std::min(n, b + cfg.batch));
      const NdArr x = take_rows(all.x, idx), y = take_rows(all.y, idx);
      Tape t;
      const Var loss = mean(bce_with_logits(model.forward(t, t.constant(x)), y));
      if (!std::isfinite(loss.value().item())) {
        throw Error("train_segmenter: non-finite loss in epoch " + std::to_string(e));
      }
      zero_grads(params);
      t.backward(loss);
      optim::adam_step(params, adam, cfg.lr);
    }
  }
  SegRun r;
  r.train_iou = evaluate(model, train);
  r.val_iou = val.size() ? evaluate(model, val) : Real(0);
  return r;
}

Generator pool_generator(PairSet pool) {
  return [pool = std::move(pool)](std::int64_t count, std::uint64_t seed) {
    if (count > pool.size()) {
      throw Error("generator exhausted: asked for " + std::to_string(count) + " pairs, pool holds " +
                  std::to_string(pool.size()));
    }
    if (count == 0) return PairSet{};
    std::vector<std::int64_t> idx(static_cast<std::size_t>(pool.size()));
    std::iota(idx.begin(), idx.end(), 0);
    Rng rng(seed);
    for (std::int64_t i = 0; i < count; ++i) {
      const auto j = i + static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(pool.size() - i)));
      std::swap(idx[i], idx[j]);
    }
    idx.resize(static_cast<std::size_t>(count));
    return PairSet{take_rows(pool.x, idx), take_rows(pool.y, idx)};
  };
}

PairSet generate_pairs(vae::VaeModel& vae, cnf::CnfModel& cnf, std::int64_t count, Real temperature,
                       std::uint64_t seed, std::int64_t* redrawn, std::int64_t max_redraws) {
  if (vae.config().patch != cnf.config().patch) {
    throw Error("generate: vae patch " + std::to_string(vae.config().patch) + " differs from cnf patch " +
                std::to_string(cnf.config().patch));
  }
  if (count == 0) return PairSet{};
  const NdArr masks = vae.sample(mix_seed(seed, 1), count);
  NdArr x = cnf.sample(masks, temperature, mix_seed(seed, 2));
  const auto row = x.size() / count;
  auto finite = [row](const Real* p) { return std::all_of(p, p + row, [](Real v) { return std::isfinite(v); }); };
  for (std::int64_t i = 0; i < count; ++i) {
    Real* dst = x.data() + i * row;
    if (finite(dst)) continue;
    const NdArr y = take_rows(masks, {i});
    bool ok = false;
    for (std::int64_t a = 0; a < max_redraws && !ok; ++a) {
      const NdArr r = cnf.sample(y, temperature, mix_seed(mix_seed(seed, 3), static_cast<std::uint64_t>(i),
                                                          static_cast<std::uint64_t>(a)));
      if (redrawn) ++*redrawn;
      ok = finite(r.data());
      if (ok) std::copy(r.data(), r.data() + row, dst);
    }
    if (!ok) {
      throw Error("generate: pair " + std::to_string(i) + " still non-finite after " + std::to_string(max_redraws) +
                  " redraws");
    }
  }
  return PairSet{std::move(x), masks};
}

Generator model_generator(vae::VaeModel& vae, cnf::CnfModel& cnf, Real temperature) {
  return [&vae, &cnf, temperature](std::int64_t count, std::uint64_t seed) {
    return generate_pairs(vae, cnf, count, temperature, seed);
  };
}

std::size_t select_second_best(const std::vector<Real>& train_ious) {
  if (train_ious.empty()) throw Error("select_second_best: no trials");
  std::vector<std::size_t> order(train_ious.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return train_ious[a] > train_ious[b]; });
  return order[order.size() > 1 ? 1 : 0];
}

std::uint64_t trial_model_seed(std::uint64_t seed, std::int64_t trial) {
  return mix_seed(seed, static_cast<std::uint64_t>(trial), 0x3de1);
}

std::uint64_t trial_aug_seed(std::uint64_t seed, std::int64_t size, std::int64_t trial) {
  return mix_seed(mix_seed(seed, 0xa06), static_cast<std::uint64_t>(size), static_cast<std::uint64_t>(trial));
}

std::int64_t thread_limit() {
  if (const char* env = std::getenv("FLOWSEG_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v > 0) return v;
    throw Error(std::string("FLOWSEG_THREADS must be a positive integer, got '") + env + "'");
  }
  return std::max<std::int64_t>(1, std::thread::hardware_concurrency());
}

std::vector<SizeResult> augmentation_sweep(const PairSet& train, const PairSet& val, const Generator& gen,
                                           const SweepConfig& cfg, const std::optional<io::fs::path>& models_dir) {
  if (cfg.trials < 1) throw Error("sweep: trials must be positive");
  for (auto s : cfg.sizes)
    if (s < 0) throw Error("sweep: sizes must be nonnegative");
  const auto limit = cfg.threads > 0 ? std::min(cfg.threads, thread_limit()) : thread_limit();
  std::vector<SizeResult> results;
  for (auto size : cfg.sizes) {
    std::vector<PairSet> augs;
    for (std::int64_t t = 0; t < cfg.trials; ++t) augs.push_back(gen(size, trial_aug_seed(cfg.seed, size, t)));
    SizeResult r;
    r.size = size;
    r.trials.resize(static_cast<std::size_t>(cfg.trials));
    std::vector<std::optional<UNet>> models(static_cast<std::size_t>(cfg.trials));
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(cfg.trials));
    auto run = [&](std::int64_t t) {
      try {
        const auto seed = trial_model_seed(cfg.seed, t);
        auto& m = models[static_cast<std::size_t>(t)].emplace(cfg.unet, seed);
        const auto run = train_segmenter(m, train, augs[static_cast<std::size_t>(t)], val, cfg.train, seed);
        r.trials[static_cast<std::size_t>(t)] = {t, seed, run.train_iou, run.val_iou};
      } catch (...) {
        errors[static_cast<std::size_t>(t)] = std::current_exception();
      }
    };
    for (std::int64_t t0 = 0; t0 < cfg.trials; t0 += limit) {
      const auto t1 = std::min(cfg.trials, t0 + limit);
      if (t1 - t0 == 1) {
        run(t0);
        continue;
      }
      std::vector<std::thread> pool;
      for (std::int64_t t = t0; t < t1; ++t) pool.emplace_back(run, t);
      for (auto& th : pool) th.join();
    }
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
    std::vector<Real> tr;
    for (const auto& rec : r.trials) tr.push_back(rec.train_iou);
    r.selected = select_second_best(tr);
    r.val_iou = r.trials[r.selected].val_iou;
    if (models_dir) {
      models[r.selected]->save(*models_dir / ("size_" + std::to_string(size)),
                               {{"size", size}, {"trial", r.selected}, {"val_iou", r.val_iou}});
    }
    results.push_back(std::move(r));
  }
  return results;
}

json sweep_report(const std::vector<SizeResult>& results) {
  json sizes = json::array();
  std::optional<Real> baseline;
  std::int64_t best_size = -1;
  Real best = -1;
  for (const auto& r : results) {
    json trials = json::array();
    for (const auto& t : r.trials)
      trials.push_back({{"trial", t.trial}, {"model_seed", t.model_seed}, {"train_iou", t.train_iou}, {"val_iou", t.val_iou}});
    sizes.push_back({{"size", r.size}, {"trials", trials}, {"selected", r.selected}, {"val_iou", r.val_iou}});
    if (r.size == 0) baseline = r.val_iou;
    if (r.val_iou > best) {
      best = r.val_iou;
      best_size = r.size;
    }
  }
  return {{"sizes", sizes}, {"baseline_val_iou", baseline ? json(*baseline) : json(nullptr)}, {"best_size", best_size}};
}

void validate_sweep_report(const json& report) {
  auto fail = [](const std::string& what) { throw Error("sweep report: " + what); };
  if (!report.is_object()) fail("not an object");
  for (const char* k : {"sizes", "baseline_val_iou", "best_size"})
    if (!report.contains(k)) fail(std::string("missing '") + k + "'");
  if (!report.at("sizes").is_array()) fail("'sizes' is not an array");
  if (!report.at("best_size").is_number_integer()) fail("'best_size' is not an integer");
  if (!report.at("baseline_val_iou").is_null() && !report.at("baseline_val_iou").is_number()) fail("bad 'baseline_val_iou'");
  auto unit = [&](const json& v, const std::string& what) {
    if (!v.is_number() || v.get<double>() < 0 || v.get<double>() > 1) fail(what + " is not a number in [0, 1]");
  };
  for (const auto& s : report.at("sizes")) {
    for (const char* k : {"size", "trials", "selected", "val_iou"})
      if (!s.contains(k)) fail(std::string("size entry missing '") + k + "'");
    if (!s.at("size").is_number_integer() || s.at("size").get<std::int64_t>() < 0) fail("bad 'size'");
    const auto& trials = s.at("trials");
    if (!trials.is_array() || trials.empty()) fail("'trials' must be a nonempty array");
    std::vector<Real> tr;
    for (std::size_t i = 0; i < trials.size(); ++i) {
      const auto& t = trials[i];
      for (const char* k : {"trial", "model_seed", "train_iou", "val_iou"})
        if (!t.contains(k)) fail(std::string("trial missing '") + k + "'");
      if (t.at("trial") != i) fail("trials out of order");
      unit(t.at("train_iou"), "train_iou");
      unit(t.at("val_iou"), "val_iou");
      tr.push_back(t.at("train_iou").get<Real>());
    }
    if (!s.at("selected").is_number_unsigned() || s.at("selected").get<std::size_t>() >= trials.size()) fail("bad 'selected'");
    if (s.at("selected").get<std::size_t>() != select_second_best(tr)) fail("'selected' is not the second-best trial");
    unit(s.at("val_iou"), "val_iou");
    if (s.at("val_iou") != trials[s.at("selected").get<std::size_t>()].at("val_iou")) fail("'val_iou' is not the selected trial's");
  }
}

std::string sweep_csv(const std::vector<SizeResult>& results) {
  std::ostringstream os;
  os.precision(17);
  os << "size,selected_trial,selected_train_iou,val_iou,mean_train_iou,mean_val_iou\n";
  for (const auto& r : results) {
    double mt = 0, mv = 0;
    for (const auto& t : r.trials) {
      mt += t.train_iou;
      mv += t.val_iou;
    }
    mt /= double(r.trials.size());
    mv /= double(r.trials.size());
    os << r.size << ',' << r.selected << ',' << r.trials[r.selected].train_iou << ',' << r.val_iou << ',' << mt << ','
       << mv << '\n';
  }
  return os.str();
}

}  // namespace flowseg::segeval
