#include "flowseg/cnf.hpp"

#include <cmath>
#include <numbers>

namespace flowseg::cnf {

using io::json;

namespace {

constexpr int kPriorDepth = 4;

void require_levels(const CnfConfig& cfg) {
  if (cfg.flow.levels < 1 || cfg.flow.levels > kPriorDepth) {
    throw Error("cnf: levels must be in [1, " + std::to_string(kPriorDepth) + "], got " +
                std::to_string(cfg.flow.levels));
  }
  if (cfg.flow.in_channels != cfg.channels) throw Error("cnf: flow.in_channels must equal channels");
}

}  // namespace

CnfConfig desk_config() { return CnfConfig{}; }

CnfConfig paper_config() {
  CnfConfig c;
  c.patch = 64;
  c.flow = flow::FlowConfig{1, 4, 15, 512};
  c.prior_hidden = 64;
  c.aux_hidden = 64;
  return c;
}

json to_json(const CnfConfig& c) {
  return {{"patch", c.patch},
          {"channels", c.channels},
          {"levels", c.flow.levels},
          {"steps", c.flow.steps},
          {"hidden", c.flow.hidden},
          {"prior_hidden", c.prior_hidden},
          {"aux_hidden", c.aux_hidden},
          {"bce_weight", c.bce_weight}};
}

CnfConfig cnf_config_from_json(const json& j) {
  io::require_keys_subset(j, {"patch", "channels", "levels", "steps", "hidden", "prior_hidden", "aux_hidden", "bce_weight"},
                          "cnf config");
  CnfConfig c;
  c.patch = j.value("patch", c.patch);
  c.channels = j.value("channels", c.channels);
  c.flow.in_channels = c.channels;
  c.flow.levels = j.value("levels", c.flow.levels);
  c.flow.steps = j.value("steps", c.flow.steps);
  c.flow.hidden = j.value("hidden", c.flow.hidden);
  c.prior_hidden = j.value("prior_hidden", c.prior_hidden);
  c.aux_hidden = j.value("aux_hidden", c.aux_hidden);
  c.bce_weight = j.value("bce_weight", c.bce_weight);
  return c;
}

PriorNetwork::PriorNetwork(const CnfConfig& cfg, std::int64_t latent, Rng& rng) : latent_channels(latent) {
  require_levels(cfg);
  convs.reserve(kPriorDepth);
  for (int i = 0; i < kPriorDepth; ++i) {
    const std::int64_t in = i == 0 ? 1 : cfg.prior_hidden;
    const Conv2dGeometry geo{i < cfg.flow.levels ? 2 : 1, 1, 0};
    convs.emplace_back("prior.conv" + std::to_string(i), in, cfg.prior_hidden, 3, geo, nn::Init::Xavier, rng);
  }
  head = nn::Conv2d("prior.head", cfg.prior_hidden, 2 * latent, 1, {}, nn::Init::Zero, rng);
}

PriorNetwork::Out PriorNetwork::operator()(Tape& t, const Var& y) {
  Var h = y;
  for (auto& c : convs) h = relu(c(t, h));
  const Var out = head(t, h);
  return {slice_channels(out, 0, latent_channels), slice_channels(out, latent_channels, 2 * latent_channels)};
}

ParameterList PriorNetwork::parameters() {
  ParameterList out;
  for (auto& c : convs) nn::append(out, c.parameters());
  nn::append(out, head.parameters());
  return out;
}

AuxNetwork::AuxNetwork(const CnfConfig& cfg, std::int64_t latent, Rng& rng) {
  require_levels(cfg);
  deconvs.reserve(kPriorDepth);
  for (int i = 0; i < kPriorDepth; ++i) {
    const std::int64_t in = i == 0 ? latent : cfg.aux_hidden;
    const bool up = i < cfg.flow.levels;
    const Conv2dGeometry geo{up ? 2 : 1, 1, up ? 1 : 0};
    deconvs.emplace_back("aux.deconv" + std::to_string(i), in, cfg.aux_hidden, 3, geo, nn::Init::Xavier, rng);
  }
  head = nn::Conv2d("aux.head", cfg.aux_hidden, 1, 3, {1, 1, 0}, nn::Init::Zero, rng);
}

Var AuxNetwork::operator()(Tape& t, const Var& z) {
  Var h = z;
  for (auto& d : deconvs) h = relu(d(t, h));
  return head(t, h);
}

ParameterList AuxNetwork::parameters() {
  ParameterList out;
  for (auto& d : deconvs) nn::append(out, d.parameters());
  nn::append(out, head.parameters());
  return out;
}

Real cond_gaussian_logprob(const NdArr& z, const NdArr& mu, const NdArr& sigma) {
  require_same_shape("cond_gaussian_logprob", z.shape(), mu.shape());
  require_same_shape("cond_gaussian_logprob", z.shape(), sigma.shape());
  const double half_log_2pi = 0.5 * std::log(2 * std::numbers::pi);
  double s = 0;
  for (std::int64_t i = 0; i < z.size(); ++i) {
    if (!(sigma[i] > 0)) throw Error("cond_gaussian_logprob: sigma must be positive, got " + std::to_string(sigma[i]));
    const double d = (double(z[i]) - double(mu[i])) / double(sigma[i]);
    s += -half_log_2pi - std::log(double(sigma[i])) - 0.5 * d * d;
  }
  return static_cast<Real>(s);
}

void require_binary(const char* op, const NdArr& y) {
  for (std::int64_t i = 0; i < y.size(); ++i) {
    const Real v = y[i];
    if (!(std::abs(v) <= Real(1e-6) || std::abs(v - 1) <= Real(1e-6))) {
      throw Error(std::string(op) + ": mask must be binary, found " + std::to_string(v) + " at index " +
                  std::to_string(i));
    }
  }
}

Var bce_mean(const Var& logits, const NdArr& y) {
  require_binary("bce", y);
  return mean(bce_with_logits(logits, y));
}

CnfModel::CnfModel(const CnfConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.flow.in_channels = cfg_.channels;
  require_levels(cfg_);
  if (cfg_.patch <= 0) throw Error("cnf: patch must be positive");
  Rng rng(seed);
  flow_ = flow::MultiScaleFlow(cfg_.flow, rng);
  flow_.check_input(input_shape(1));
  latent_channels_ = flow_.latent_shape(input_shape(1))[1];
  prior_ = PriorNetwork(cfg_, latent_channels_, rng);
  aux_ = AuxNetwork(cfg_, latent_channels_, rng);
}

void CnfModel::check_mask(const NdArr& y) const {
  if (y.rank() != 4 || y.dim(1) != 1 || y.dim(2) != cfg_.patch || y.dim(3) != cfg_.patch) {
    throw ShapeError("cnf: mask must have shape [N, 1, " + std::to_string(cfg_.patch) + ", " +
                     std::to_string(cfg_.patch) + "], got " + shape_str(y.shape()));
  }
}

void CnfModel::check_pair(const NdArr& x, const NdArr& y) const {
  check_mask(y);
  if (x.shape() != input_shape(y.dim(0))) {
    throw ShapeError("cnf: expected patches of shape " + shape_str(input_shape(y.dim(0))) + ", got " +
                     shape_str(x.shape()));
  }
}

PriorNetwork::Out CnfModel::prior(Tape& t, const NdArr& y) {
  check_mask(y);
  return prior_(t, t.constant(y));
}

std::pair<NdArr, NdArr> CnfModel::prior_params(const NdArr& y) {
  Tape t(false);
  const auto p = prior(t, y);
  return {p.mu.value(), exp(p.log_sigma).value()};
}

LossTerms CnfModel::loss_terms(Tape& t, const NdArr& x, const NdArr& y, bool init_actnorm) {
  check_pair(x, y);
  LossTerms r;
  r.latents = flow_.forward(t, t.constant(x), init_actnorm);
  const auto p = prior_(t, t.constant(y));
  Var logp = normal_logprob(r.latents.z, p.mu, p.log_sigma);
  for (const auto& zp : r.latents.z_parts) logp = add(logp, std_normal_logprob(zp));
  r.nll = -add(logp, r.latents.logdet);
  r.mean_nll = mean(r.nll);
  r.bce = bce_mean(aux_(t, r.latents.z), y);
  r.loss = cfg_.bce_weight == 0 ? r.mean_nll : add(r.mean_nll, flowseg::scale(r.bce, cfg_.bce_weight));
  return r;
}

NllResult CnfModel::nll(const NdArr& x, const NdArr& y) {
  Tape t(false);
  const auto terms = loss_terms(t, x, y);
  NllResult r;
  r.nll = terms.nll.value();
  r.mean_nll = terms.mean_nll.value().item();
  r.bpd = static_cast<Real>(r.mean_nll / (double(dims()) * std::numbers::ln2));
  return r;
}

Real CnfModel::aux_bce(const NdArr& z_k, const NdArr& y) {
  check_mask(y);
  Tape t(false);
  const Var logits = aux_(t, t.constant(z_k));
  require_same_shape("aux_bce", logits.shape(), y.shape());
  return bce_mean(logits, y).value().item();
}

NdArr CnfModel::sample(const NdArr& y, Real temperature, std::uint64_t seed) {
  if (!(temperature >= 0)) throw Error("cnf sample: temperature must be >= 0");
  const auto [mu, sigma] = prior_params(y);
  Rng rng(seed);
  NdArr z_k = rng.normal_array(mu.shape());
  for (std::int64_t i = 0; i < z_k.size(); ++i) z_k[i] = mu[i] + temperature * sigma[i] * z_k[i];
  std::vector<NdArr> parts;
  for (const auto& s : flow_.z_part_shapes(input_shape(y.dim(0)))) parts.push_back(rng.normal_array(s, temperature));
  return decode(parts, z_k);
}

NdArr CnfModel::decode(const std::vector<NdArr>& z_parts, const NdArr& z_k) {
  Tape t(false);
  std::vector<Var> parts;
  for (const auto& p : z_parts) parts.push_back(t.constant(p));
  return flow_.inverse(t, parts, t.constant(z_k)).value();
}

void CnfModel::initialize(const NdArr& x) {
  flow_.check_input(x.shape());
  flow_.initialize(x);
}

ParameterList CnfModel::parameters() {
  ParameterList out = flow_.parameters();
  nn::append(out, prior_.parameters());
  nn::append(out, aux_.parameters());
  return out;
}

json CnfModel::manifest_meta() const {
  return {{"kind", "cnf"},
          {"architecture", to_json(cfg_)},
          {"layer_order", flow_.layer_order()},
          {"init_flags", {{"actnorm", flow_.actnorm_flags()}}}};
}

void CnfModel::save(const io::fs::path& dir, const optim::AdamState* adam, const json& extra) {
  json meta = manifest_meta();
  if (extra.is_object()) meta.update(extra);
  save_checkpoint(dir, parameters(), meta, adam);
}

json CnfModel::load(const io::fs::path& dir, optim::AdamState* adam) {
  const json manifest = read_manifest(dir);
  if (manifest.value("kind", "") != "cnf") throw Error("not a cnf checkpoint: " + dir.string());
  if (manifest.at("architecture") != to_json(cfg_)) {
    throw Error("cnf checkpoint architecture " + manifest.at("architecture").dump() + " does not match model " +
                to_json(cfg_).dump());
  }
  load_checkpoint(dir, parameters(), adam);
  flow_.set_actnorm_flags(manifest.at("init_flags").at("actnorm").get<std::vector<bool>>());
  return manifest;
}

CnfConfig CnfModel::read_config(const io::fs::path& dir) {
  const json manifest = read_manifest(dir);
  if (manifest.value("kind", "") != "cnf") throw Error("not a cnf checkpoint: " + dir.string());
  return cnf_config_from_json(manifest.at("architecture"));
}

TrainConfig desk_train_config() {
  TrainConfig c;
  c.batch = 16;
  c.iterations = 2000;
  c.lr = Real(1e-3);
  return c;
}

TrainConfig paper_train_config() {
  TrainConfig c;
  c.batch = 50;
  c.iterations = 396800;
  c.lr = Real(1e-4);
  return c;
}

CnfTrainer::CnfTrainer(CnfModel& model, TrainConfig cfg)
    : model_(model), cfg_(cfg), params_(model.parameters()), adam_(params_) {}

StepStats CnfTrainer::step(const NdArr& x, const NdArr& y) {
  Tape t;
  const auto terms = model_.loss_terms(t, x, y, !model_.initialized());
  StepStats s;
  s.iter = iter_;
  s.loss = terms.loss.value().item();
  if (!std::isfinite(s.loss)) throw Error("cnf training: non-finite loss at iteration " + std::to_string(iter_));
  s.nll = terms.mean_nll.value().item();
  s.bpd = static_cast<Real>(s.nll / (double(model_.dims()) * std::numbers::ln2));
  s.bce = terms.bce.value().item();
  s.lr = optim::poly_decay_lr(iter_, cfg_.iterations, cfg_.lr, cfg_.warmup, cfg_.power);
  zero_grads(params_);
  t.backward(terms.loss);
  optim::adam_step(params_, adam_, s.lr);
  ++iter_;
  return s;
}

StepStats CnfTrainer::step_from(const NdArr& xs, const NdArr& ys) {
  if (xs.rank() < 1 || ys.rank() < 1 || xs.dim(0) != ys.dim(0)) {
    throw ShapeError("cnf training: pair arrays " + shape_str(xs.shape()) + " and " + shape_str(ys.shape()) +
                     " disagree on count");
  }
  const auto idx = batch_indices(cfg_.seed, iter_, cfg_.batch, xs.dim(0));
  return step(take_rows(xs, idx), take_rows(ys, idx));
}

}  // namespace flowseg::cnf
