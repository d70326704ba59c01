#include "flowseg/flow.hpp"

#include <cmath>

#include "flowseg/linalg.hpp"

namespace flowseg::flow {

namespace {

void require_nchw(const char* op, const Shape& s) {
  if (s.size() != 4) throw ShapeError(std::string(op) + ": expected N x C x H x W, got " + shape_str(s));
}

NdArr random_orthogonal(std::int64_t n, Rng& rng) {
  NdArr q = rng.normal_array({n, n});
  // Modified Gram-Schmidt over columns.
  for (std::int64_t j = 0; j < n; ++j) {
    for (std::int64_t k = 0; k < j; ++k) {
      Real d = 0;
      for (std::int64_t i = 0; i < n; ++i) d += q[i * n + j] * q[i * n + k];
      for (std::int64_t i = 0; i < n; ++i) q[i * n + j] -= d * q[i * n + k];
    }
    Real norm = 0;
    for (std::int64_t i = 0; i < n; ++i) norm += q[i * n + j] * q[i * n + j];
    norm = std::sqrt(norm);
    for (std::int64_t i = 0; i < n; ++i) q[i * n + j] /= norm;
  }
  return q;
}

Var per_sample(const Var& scalar, std::int64_t n) { return expand(scalar, Shape{n}); }

}  // namespace

// ---- ActNorm -----------------------------------------------------------------

ActNorm::ActNorm(std::string name, std::int64_t channels)
    : log_scale(name + ".log_scale", NdArr(Shape{channels})), bias(name + ".bias", NdArr(Shape{channels})) {}

void ActNorm::initialize(const NdArr& batch) {
  require_nchw("actnorm_initialize", batch.shape());
  const auto N = batch.dim(0), C = batch.dim(1), P = batch.dim(2) * batch.dim(3);
  if (C != log_scale.value.size()) {
    throw ShapeError("actnorm_initialize: layer has " + std::to_string(log_scale.value.size()) + " channels, batch " +
                     shape_str(batch.shape()));
  }
  if (N * P < 2) throw Error("actnorm_initialize: need at least 2 elements per channel");
  for (std::int64_t c = 0; c < C; ++c) {
    Real m = 0;
    for (std::int64_t n = 0; n < N; ++n)
      for (std::int64_t q = 0; q < P; ++q) m += batch[(n * C + c) * P + q];
    m /= static_cast<Real>(N * P);
    Real var = 0;
    for (std::int64_t n = 0; n < N; ++n)
      for (std::int64_t q = 0; q < P; ++q) {
        const Real d = batch[(n * C + c) * P + q] - m;
        var += d * d;
      }
    var /= static_cast<Real>(N * P);
    if (!(var > Real(1e-20))) {
      throw Error("actnorm_initialize: channel " + std::to_string(c) + " of '" + log_scale.name +
                  "' has zero variance");
    }
    const Real inv_std = Real(1) / std::sqrt(var);
    log_scale.value[c] = std::log(inv_std);
    bias.value[c] = -m * inv_std;
  }
  initialized_ = true;
}

void ActNorm::set_identity() {
  log_scale.value.fill(0);
  bias.value.fill(0);
  initialized_ = true;
}

void ActNorm::set(const NdArr& scale, const NdArr& b) {
  require_same_shape("actnorm_set", scale.shape(), log_scale.value.shape());
  require_same_shape("actnorm_set", b.shape(), bias.value.shape());
  for (std::int64_t c = 0; c < scale.size(); ++c) {
    if (!(scale[c] > 0)) throw Error("actnorm_set: scale must be positive");
    log_scale.value[c] = std::log(scale[c]);
  }
  bias.value = b;
  initialized_ = true;
}

NdArr ActNorm::scale() const {
  NdArr s = log_scale.value;
  for (auto& v : s.vec()) v = std::exp(v);
  return s;
}

void ActNorm::require_initialized() const {
  if (!initialized_) throw Error("actnorm '" + log_scale.name + "' used before initialization");
}

LayerOut ActNorm::forward(Tape& t, const Var& x) {
  require_initialized();
  require_nchw("actnorm_forward", x.shape());
  Var ls = t.param(log_scale);
  Var y = channel_affine(x, exp(ls), t.param(bias));
  const auto hw = static_cast<Real>(x.dim(2) * x.dim(3));
  return {y, per_sample(flowseg::scale(sum(ls), hw), x.dim(0))};
}

Var ActNorm::inverse(Tape& t, const Var& y) {
  require_initialized();
  require_nchw("actnorm_inverse", y.shape());
  const auto C = log_scale.value.size();
  NdArr inv_scale(Shape{C}), shift(Shape{C});
  for (std::int64_t c = 0; c < C; ++c) {
    inv_scale[c] = std::exp(-log_scale.value[c]);
    shift[c] = -bias.value[c] * inv_scale[c];
  }
  return channel_affine(y, t.constant(inv_scale), t.constant(shift));
}

// ---- InvConv1x1 --------------------------------------------------------------

InvConv1x1::InvConv1x1(std::string name, std::int64_t channels, Rng& rng)
    : weight(name + ".weight", random_orthogonal(channels, rng)) {}

void InvConv1x1::set_weight(const NdArr& w) {
  require_same_shape("invconv_set_weight", w.shape(), weight.value.shape());
  weight.value = w;
  require_invertible();
}

void InvConv1x1::require_invertible() const {
  if (!(linalg::log_abs_det(weight.value) > std::log(Real(1e-12)))) {
    throw Error("invconv '" + weight.name + "': weight is singular (|det W| <= 1e-12)");
  }
}

LayerOut InvConv1x1::forward(Tape& t, const Var& x) {
  require_nchw("invconv_forward", x.shape());
  const auto C = weight.value.dim(0);
  if (x.dim(1) != C) {
    throw ShapeError("invconv_forward: weight is " + shape_str(weight.value.shape()) + ", input " +
                     shape_str(x.shape()));
  }
  require_invertible();
  Var w = t.param(weight);
  Var y = conv2d(x, reshape(w, {C, C, 1, 1}), Var{}, {});
  const auto hw = static_cast<Real>(x.dim(2) * x.dim(3));
  return {y, per_sample(scale(logabsdet(w), hw), x.dim(0))};
}

Var InvConv1x1::inverse(Tape& t, const Var& y) {
  require_nchw("invconv_inverse", y.shape());
  const auto C = weight.value.dim(0);
  const NdArr inv = linalg::inverse(weight.value);
  return conv2d(y, t.constant(inv.reshaped({C, C, 1, 1})), Var{}, {});
}

// ---- AffineCoupling ------------------------------------------------------------

CouplingBackbone::CouplingBackbone(std::string name, std::int64_t in_channels, std::int64_t out_channels,
                                   std::int64_t hidden, Rng& rng)
    : in(name + ".conv0", in_channels, hidden, 3, {1, 1, 0}, nn::Init::Xavier, rng),
      mid(name + ".conv1", hidden, hidden, 1, {1, 0, 0}, nn::Init::Xavier, rng),
      out(name + ".conv2", hidden, 2 * out_channels, 3, {1, 1, 0}, nn::Init::Zero, rng) {}

Var CouplingBackbone::operator()(Tape& t, const Var& x) { return out(t, relu(mid(t, relu(in(t, x))))); }

ParameterList CouplingBackbone::parameters() {
  ParameterList p = in.parameters();
  nn::append(p, mid.parameters());
  nn::append(p, out.parameters());
  return p;
}

AffineCoupling::AffineCoupling(std::string name, std::int64_t ch, std::int64_t hidden, Rng& rng)
    : channels(ch), backbone(name + ".backbone", ch / 2, ch - ch / 2, hidden, rng) {
  if (ch % 2 != 0) throw ShapeError("affine coupling needs an even channel count, got " + std::to_string(ch));
}

LayerOut AffineCoupling::forward(Tape& t, const Var& x) {
  require_nchw("coupling_forward", x.shape());
  if (x.dim(1) != channels) {
    throw ShapeError("coupling_forward: layer has " + std::to_string(channels) + " channels, input " +
                     shape_str(x.shape()));
  }
  const auto d = channels / 2;
  Var x1 = slice_channels(x, 0, d);
  Var x2 = slice_channels(x, d, channels);
  Var st = backbone(t, x1);
  Var s = slice_channels(st, 0, channels - d);
  Var sh = slice_channels(st, channels - d, 2 * (channels - d));
  Var y2 = add(mul(x2, exp(s)), sh);
  return {concat_channels(x1, y2), sum_per_sample(s)};
}

Var AffineCoupling::inverse(Tape& t, const Var& y) {
  require_nchw("coupling_inverse", y.shape());
  if (y.dim(1) != channels) {
    throw ShapeError("coupling_inverse: layer has " + std::to_string(channels) + " channels, input " +
                     shape_str(y.shape()));
  }
  const auto d = channels / 2;
  Var y1 = slice_channels(y, 0, d);
  Var y2 = slice_channels(y, d, channels);
  Var st = backbone(t, y1);
  Var s = slice_channels(st, 0, channels - d);
  Var sh = slice_channels(st, channels - d, 2 * (channels - d));
  Var x2 = mul(sub(y2, sh), exp(-s));
  return concat_channels(y1, x2);
}

// ---- squeeze / factor-out --------------------------------------------------------

Var squeeze(const Var& x) {
  require_nchw("squeeze", x.shape());
  const auto N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (H % 2 != 0 || W % 2 != 0) throw ShapeError("squeeze: H and W must be even, got " + shape_str(x.shape()));
  const auto Ho = H / 2, Wo = W / 2;
  std::vector<std::int64_t> idx;
  idx.reserve(static_cast<std::size_t>(x.value().size()));
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t c = 0; c < C; ++c)
      for (std::int64_t i = 0; i < 2; ++i)
        for (std::int64_t j = 0; j < 2; ++j)
          for (std::int64_t h = 0; h < Ho; ++h)
            for (std::int64_t w = 0; w < Wo; ++w) idx.push_back(((n * C + c) * H + 2 * h + i) * W + 2 * w + j);
  return gather(x, std::move(idx), {N, 4 * C, Ho, Wo});
}

Var unsqueeze(const Var& y) {
  require_nchw("unsqueeze", y.shape());
  const auto N = y.dim(0), C4 = y.dim(1), Ho = y.dim(2), Wo = y.dim(3);
  if (C4 % 4 != 0) throw ShapeError("unsqueeze: channels must be divisible by 4, got " + shape_str(y.shape()));
  const auto C = C4 / 4, H = 2 * Ho, W = 2 * Wo;
  std::vector<std::int64_t> idx;
  idx.reserve(static_cast<std::size_t>(y.value().size()));
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t c = 0; c < C; ++c)
      for (std::int64_t h = 0; h < H; ++h)
        for (std::int64_t w = 0; w < W; ++w) {
          const auto oc = 4 * c + 2 * (h % 2) + (w % 2);
          idx.push_back(((n * C4 + oc) * Ho + h / 2) * Wo + w / 2);
        }
  return gather(y, std::move(idx), {N, C, H, W});
}

FactorOut factor_out(const Var& h) {
  require_nchw("factor_out", h.shape());
  const auto C = h.dim(1);
  if (C % 2 != 0) throw ShapeError("factor_out: odd channel count in " + shape_str(h.shape()));
  return {slice_channels(h, 0, C / 2), slice_channels(h, C / 2, C)};
}

Var merge(const Var& z_part, const Var& rest) { return concat_channels(z_part, rest); }

// ---- MultiScaleFlow ----------------------------------------------------------------

ParameterList FlowStep::parameters() {
  ParameterList p = actnorm.parameters();
  nn::append(p, invconv.parameters());
  nn::append(p, coupling.parameters());
  return p;
}

MultiScaleFlow::MultiScaleFlow(const FlowConfig& cfg, Rng& rng, const std::string& prefix) : cfg_(cfg) {
  if (cfg.levels < 1 || cfg.steps < 1 || cfg.in_channels < 1 || cfg.hidden < 1) {
    throw Error("MultiScaleFlow: levels, steps, channels and hidden width must be positive");
  }
  levels_.resize(static_cast<std::size_t>(cfg.levels));
  std::int64_t ch = cfg.in_channels;
  for (std::int64_t l = 0; l < cfg.levels; ++l) {
    ch *= 4;
    auto& level = levels_[static_cast<std::size_t>(l)];
    level.reserve(static_cast<std::size_t>(cfg.steps));
    for (std::int64_t k = 0; k < cfg.steps; ++k) {
      const std::string base = prefix + ".l" + std::to_string(l) + ".s" + std::to_string(k);
      level.push_back(FlowStep{ActNorm(base + ".actnorm", ch), InvConv1x1(base + ".invconv", ch, rng),
                               AffineCoupling(base + ".coupling", ch, cfg.hidden, rng)});
    }
    if (l + 1 < cfg.levels) ch /= 2;
  }
}

void MultiScaleFlow::check_input(const Shape& x) const {
  require_nchw("flow_forward", x);
  const std::int64_t div = std::int64_t{1} << cfg_.levels;
  if (x[1] != cfg_.in_channels || x[2] % div != 0 || x[3] % div != 0) {
    throw ShapeError("flow: input " + shape_str(x) + " needs " + std::to_string(cfg_.in_channels) +
                     " channels and H, W divisible by 2^" + std::to_string(cfg_.levels) + " = " +
                     std::to_string(div));
  }
}

Shape MultiScaleFlow::latent_shape(const Shape& x) const {
  check_input(x);
  Shape s = x;
  for (std::int64_t l = 0; l < cfg_.levels; ++l) {
    s = {s[0], s[1] * 4, s[2] / 2, s[3] / 2};
    if (l + 1 < cfg_.levels) s[1] /= 2;
  }
  return s;
}

std::vector<Shape> MultiScaleFlow::z_part_shapes(const Shape& x) const {
  check_input(x);
  std::vector<Shape> out;
  Shape s = x;
  for (std::int64_t l = 0; l + 1 < cfg_.levels; ++l) {
    s = {s[0], s[1] * 2, s[2] / 2, s[3] / 2};
    out.push_back(s);
  }
  return out;
}

MultiScaleFlow::Output MultiScaleFlow::forward(Tape& t, const Var& x, bool init_actnorm) {
  check_input(x.shape());
  Output out;
  out.logdet = t.constant(NdArr(Shape{x.dim(0)}));
  Var h = x;
  for (std::size_t l = 0; l < levels_.size(); ++l) {
    h = squeeze(h);
    for (auto& step : levels_[l]) {
      if (init_actnorm && !step.actnorm.initialized()) step.actnorm.initialize(h.value());
      LayerOut r = step.actnorm.forward(t, h);
      out.logdet = add(out.logdet, r.logdet);
      r = step.invconv.forward(t, r.y);
      out.logdet = add(out.logdet, r.logdet);
      r = step.coupling.forward(t, r.y);
      out.logdet = add(out.logdet, r.logdet);
      h = r.y;
    }
    if (l + 1 < levels_.size()) {
      FactorOut f = factor_out(h);
      out.z_parts.push_back(f.z_part);
      h = f.rest;
    }
  }
  out.z = h;
  return out;
}

Var MultiScaleFlow::inverse(Tape& t, const std::vector<Var>& z_parts, const Var& z) {
  if (z_parts.size() + 1 != levels_.size()) {
    throw ShapeError("flow_inverse: expected " + std::to_string(levels_.size() - 1) + " factored-out parts, got " +
                     std::to_string(z_parts.size()));
  }
  Var h = z;
  for (std::size_t l = levels_.size(); l-- > 0;) {
    if (l + 1 < levels_.size()) h = merge(z_parts[l], h);
    auto& level = levels_[l];
    for (std::size_t k = level.size(); k-- > 0;) {
      h = level[k].coupling.inverse(t, h);
      h = level[k].invconv.inverse(t, h);
      h = level[k].actnorm.inverse(t, h);
    }
    h = unsqueeze(h);
  }
  return h;
}

void MultiScaleFlow::initialize(const NdArr& batch) {
  Tape t(false);
  forward(t, t.constant(batch), true);
}

bool MultiScaleFlow::initialized() const {
  for (const auto& level : levels_)
    for (const auto& s : level)
      if (!s.actnorm.initialized()) return false;
  return true;
}

void MultiScaleFlow::set_actnorm_identity() {
  for (auto& level : levels_)
    for (auto& s : level) s.actnorm.set_identity();
}

ParameterList MultiScaleFlow::parameters() {
  ParameterList p;
  for (auto& level : levels_)
    for (auto& s : level) nn::append(p, s.parameters());
  return p;
}

std::vector<std::string> MultiScaleFlow::layer_order() const {
  std::vector<std::string> order;
  for (std::size_t l = 0; l < levels_.size(); ++l) {
    order.push_back("squeeze");
    for (std::size_t k = 0; k < levels_[l].size(); ++k) {
      const std::string base = "l" + std::to_string(l) + ".s" + std::to_string(k);
      order.push_back("actnorm:" + base);
      order.push_back("invconv:" + base);
      order.push_back("coupling:" + base);
    }
    if (l + 1 < levels_.size()) order.push_back("split");
  }
  return order;
}

std::vector<bool> MultiScaleFlow::actnorm_flags() const {
  std::vector<bool> f;
  for (const auto& level : levels_)
    for (const auto& s : level) f.push_back(s.actnorm.initialized());
  return f;
}

void MultiScaleFlow::set_actnorm_flags(const std::vector<bool>& flags) {
  std::size_t i = 0;
  for (auto& level : levels_)
    for (auto& s : level) {
      if (i >= flags.size()) throw Error("set_actnorm_flags: too few flags");
      s.actnorm.mark_initialized(flags[i++]);
    }
  if (i != flags.size()) throw Error("set_actnorm_flags: too many flags");
}

}  // namespace flowseg::flow
