#include "flowseg/vae.hpp"

#include <cmath>

#include "flowseg/cnf.hpp"

namespace flowseg::vae {

using io::json;

VaeConfig desk_config() { return VaeConfig{}; }

VaeConfig paper_config() {
  VaeConfig c;
  c.patch = 64;
  c.hidden = {1024, 256, 64};
  c.latent = 64;
  return c;
}

json to_json(const VaeConfig& c) { return {{"patch", c.patch}, {"hidden", c.hidden}, {"latent", c.latent}}; }

VaeConfig vae_config_from_json(const json& j) {
  io::require_keys_subset(j, {"patch", "hidden", "latent"}, "vae config");
  VaeConfig c;
  c.patch = j.value("patch", c.patch);
  c.hidden = j.value("hidden", c.hidden);
  c.latent = j.value("latent", c.latent);
  return c;
}

TrainConfig desk_train_config() {
  TrainConfig c;
  c.batch = 32;
  c.iterations = 1000;
  c.lr = Real(1e-3);
  c.warmup = 100;
  return c;
}

TrainConfig paper_train_config() {
  TrainConfig c;
  c.batch = 300;
  c.iterations = 65600;
  c.lr = Real(1e-3);
  c.warmup = 6500;
  return c;
}

NdArr kl_closed_form(const NdArr& mu, const NdArr& logvar) {
  require_same_shape("kl_closed_form", mu.shape(), logvar.shape());
  if (mu.rank() != 2) throw ShapeError("kl_closed_form: expected [N, latent], got " + shape_str(mu.shape()));
  const auto n = mu.dim(0), d = mu.dim(1);
  NdArr out(Shape{n});
  for (std::int64_t i = 0; i < n; ++i) {
    double s = 0;
    for (std::int64_t k = 0; k < d; ++k) {
      const double m = mu[i * d + k], lv = logvar[i * d + k];
      s += std::exp(lv) + m * m - 1 - lv;
    }
    out[i] = static_cast<Real>(0.5 * s);
  }
  return out;
}

VaeModel::VaeModel(const VaeConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  if (cfg_.patch <= 0 || cfg_.latent <= 0 || cfg_.hidden.size() != 3) {
    throw Error("vae config: patch and latent must be positive and hidden must list three widths");
  }
  for (auto h : cfg_.hidden)
    if (h <= 0) throw Error("vae config: hidden widths must be positive");
  Rng rng(seed);
  const auto& h = cfg_.hidden;
  const std::int64_t D = dims();
  const std::vector<std::int64_t> enc{D, h[0], h[1], h[2]};
  for (std::size_t i = 0; i + 1 < enc.size(); ++i)
    encoder.emplace_back("vae.enc" + std::to_string(i), enc[i], enc[i + 1], nn::Init::Xavier, rng);
  head = nn::Dense("vae.enc_head", h[2], 2 * cfg_.latent, nn::Init::Zero, rng);
  const std::vector<std::int64_t> dec{cfg_.latent, h[2], h[1], h[0], D, D};
  for (std::size_t i = 0; i + 1 < dec.size(); ++i)
    decoder.emplace_back("vae.dec" + std::to_string(i), dec[i], dec[i + 1], nn::Init::Xavier, rng);
}

NdArr VaeModel::flatten_masks(const NdArr& y) const {
  const bool image = y.rank() == 4 && y.dim(1) == 1 && y.dim(2) == cfg_.patch && y.dim(3) == cfg_.patch;
  const bool flat = y.rank() == 2 && y.dim(1) == dims();
  if (!image && !flat) {
    throw ShapeError("vae: masks must be [N, 1, " + std::to_string(cfg_.patch) + ", " + std::to_string(cfg_.patch) +
                     "] or [N, " + std::to_string(dims()) + "], got " + shape_str(y.shape()));
  }
  return y.reshaped({y.dim(0), dims()});
}

Posterior VaeModel::encode(Tape& t, const NdArr& y) {
  Var h = t.constant(flatten_masks(y));
  for (auto& layer : encoder) h = relu(layer(t, h));
  const Var out = head(t, h);
  const Var r = reshape(out, {out.dim(0), 2 * cfg_.latent, 1, 1});
  return {reshape(slice_channels(r, 0, cfg_.latent), {out.dim(0), cfg_.latent}),
          reshape(slice_channels(r, cfg_.latent, 2 * cfg_.latent), {out.dim(0), cfg_.latent})};
}

Var VaeModel::decode(Tape& t, const Var& z) {
  if (z.value().rank() != 2 || z.dim(1) != cfg_.latent) {
    throw ShapeError("vae decode: expected [N, " + std::to_string(cfg_.latent) + "], got " + shape_str(z.shape()));
  }
  Var h = z;
  for (std::size_t i = 0; i < decoder.size(); ++i) {
    h = decoder[i](t, h);
    if (i + 1 < decoder.size()) h = relu(h);
  }
  return h;
}

Var VaeModel::reparameterize(const Var& mu, const Var& logvar, const NdArr& eps) {
  require_same_shape("reparameterize", mu.shape(), logvar.shape());
  require_same_shape("reparameterize", mu.shape(), eps.shape());
  return add(mu, mul(exp(flowseg::scale(logvar, Real(0.5))), mu.tape()->constant(eps)));
}

std::pair<NdArr, NdArr> VaeModel::encode(const NdArr& y) {
  Tape t(false);
  const auto p = encode(t, y);
  return {p.mu.value(), p.logvar.value()};
}

NdArr VaeModel::reparameterize(const NdArr& mu, const NdArr& logvar, std::uint64_t seed) const {
  require_same_shape("reparameterize", mu.shape(), logvar.shape());
  Rng rng(seed);
  NdArr z = rng.normal_array(mu.shape());
  for (std::int64_t i = 0; i < z.size(); ++i) z[i] = mu[i] + std::exp(logvar[i] / 2) * z[i];
  return z;
}

NdArr VaeModel::decode(const NdArr& z) {
  Tape t(false);
  return decode(t, t.constant(z)).value().reshaped({z.dim(0), 1, cfg_.patch, cfg_.patch});
}

ElboTerms VaeModel::elbo_loss(Tape& t, const NdArr& y, std::uint64_t seed) {
  const NdArr flat = flatten_masks(y);
  cnf::require_binary("vae elbo", flat);
  const auto q = encode(t, flat);
  Rng rng(seed);
  const Var z = reparameterize(q.mu, q.logvar, rng.normal_array(q.mu.shape()));
  const Var logits = decode(t, z);
  ElboTerms r;
  r.recon = mean(sum_per_sample(bce_with_logits(logits, flat)));
  const Var kl_terms = sub(add(exp(q.logvar), square(q.mu)), add_scalar(q.logvar, 1));
  r.kl = flowseg::scale(mean(sum_per_sample(kl_terms)), Real(0.5));
  r.loss = add(r.recon, r.kl);
  return r;
}

NdArr VaeModel::sample(std::uint64_t seed, std::int64_t count) {
  if (count < 0) throw Error("vae sample: count must be >= 0");
  Rng rng(seed);
  const NdArr logits = decode(rng.normal_array({count, cfg_.latent}));
  NdArr out(logits.shape());
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] = logits[i] > 0 ? 1 : 0;
  return out;
}

ParameterList VaeModel::encoder_parameters() {
  ParameterList out;
  for (auto& l : encoder) nn::append(out, l.parameters());
  nn::append(out, head.parameters());
  return out;
}

ParameterList VaeModel::decoder_parameters() {
  ParameterList out;
  for (auto& l : decoder) nn::append(out, l.parameters());
  return out;
}

ParameterList VaeModel::parameters() {
  ParameterList out = encoder_parameters();
  nn::append(out, decoder_parameters());
  return out;
}

json VaeModel::manifest_meta() const { return {{"kind", "vae"}, {"architecture", to_json(cfg_)}}; }

void VaeModel::save(const io::fs::path& dir, const optim::AdamState* adam, const json& extra) {
  json meta = manifest_meta();
  if (extra.is_object()) meta.update(extra);
  save_checkpoint(dir, parameters(), meta, adam);
}

json VaeModel::load(const io::fs::path& dir, optim::AdamState* adam) {
  const json manifest = read_manifest(dir);
  if (manifest.value("kind", "") != "vae") throw Error("not a vae checkpoint: " + dir.string());
  if (manifest.at("architecture") != to_json(cfg_)) {
    throw Error("vae checkpoint architecture " + manifest.at("architecture").dump() + " does not match model " +
                to_json(cfg_).dump());
  }
  load_checkpoint(dir, parameters(), adam);
  return manifest;
}

VaeConfig VaeModel::read_config(const io::fs::path& dir) {
  const json manifest = read_manifest(dir);
  if (manifest.value("kind", "") != "vae") throw Error("not a vae checkpoint: " + dir.string());
  return vae_config_from_json(manifest.at("architecture"));
}

VaeTrainer::VaeTrainer(VaeModel& model, TrainConfig cfg)
    : model_(model), cfg_(cfg), params_(model.parameters()), adam_(params_) {}

StepStats VaeTrainer::step(const NdArr& y) {
  Tape t;
  const auto terms = model_.elbo_loss(t, y, mix_seed(cfg_.seed, static_cast<std::uint64_t>(iter_), 0xe95));
  StepStats s;
  s.iter = iter_;
  s.loss = terms.loss.value().item();
  if (!std::isfinite(s.loss)) throw Error("vae training: non-finite loss at iteration " + std::to_string(iter_));
  s.recon = terms.recon.value().item();
  s.kl = terms.kl.value().item();
  s.lr = optim::poly_decay_lr(iter_, cfg_.iterations, cfg_.lr, cfg_.warmup, cfg_.power);
  zero_grads(params_);
  t.backward(terms.loss);
  optim::adam_step(params_, adam_, s.lr);
  ++iter_;
  return s;
}

StepStats VaeTrainer::step_from(const NdArr& ys) {
  const auto idx = batch_indices(cfg_.seed, iter_, cfg_.batch, ys.dim(0));
  return step(take_rows(ys, idx));
}

}  // namespace flowseg::vae
