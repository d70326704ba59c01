#include <cmath>
#include <numbers>

#include "doctest.h"
#include "flowseg/flow.hpp"
#include "flowseg/linalg.hpp"
#include "test_util.hpp"

using namespace flowseg;
using namespace flowseg::flow;
using flowseg::testing::fd_log_abs_det;

namespace {

/// Standardizes each channel of an N x C x H x W array with population moments.
NdArr standardize(NdArr x) {
  const auto N = x.dim(0), C = x.dim(1), P = x.dim(2) * x.dim(3);
  for (std::int64_t c = 0; c < C; ++c) {
    double m = 0, v = 0;
    for (std::int64_t n = 0; n < N; ++n)
      for (std::int64_t q = 0; q < P; ++q) m += x[(n * C + c) * P + q];
    m /= double(N * P);
    for (std::int64_t n = 0; n < N; ++n)
      for (std::int64_t q = 0; q < P; ++q) v += std::pow(x[(n * C + c) * P + q] - m, 2);
    v /= double(N * P);
    for (std::int64_t n = 0; n < N; ++n)
      for (std::int64_t q = 0; q < P; ++q) x[(n * C + c) * P + q] = Real((x[(n * C + c) * P + q] - m) / std::sqrt(v));
  }
  return x;
}

template <class Layer>
NdArr apply(Layer& l, const NdArr& x) {
  Tape t(false);
  return l.forward(t, t.constant(x)).y.value();
}

template <class Layer>
Real logdet_of(Layer& l, const NdArr& x) {
  Tape t(false);
  return l.forward(t, t.constant(x)).logdet.value()[0];
}

template <class Layer>
NdArr invert(Layer& l, const NdArr& y) {
  Tape t(false);
  return l.inverse(t, t.constant(y)).value();
}

}  // namespace

TEST_CASE("actnorm_initialize") {
  SUBCASE("standardized batch gives unit scale and zero bias") {
    Rng rng(1);
    const NdArr x = standardize(rng.normal_array({8, 3, 4, 4}));
    ActNorm an("an", 3);
    an.initialize(x);
    const NdArr s = an.scale();
    for (int c = 0; c < 3; ++c) {
      CHECK(s[c] == doctest::Approx(1).epsilon(1e-12));
      CHECK(std::abs(an.bias.value[c]) < 1e-12);
    }
  }
  SUBCASE("constant channel is a zero-variance error naming the channel") {
    NdArr x({4, 2, 2, 2}, 3.0);
    Rng rng(2);
    for (std::int64_t n = 0; n < 4; ++n)
      for (int q = 0; q < 4; ++q) x[(n * 2) * 4 + q] = Real(rng.normal());
    ActNorm an("an", 2);
    CHECK_THROWS_WITH_AS(an.initialize(x), doctest::Contains("channel 1"), Error);
  }
  SUBCASE("random batch has zero mean and unit variance after init") {
    Rng rng(3);
    NdArr x = rng.normal_array({6, 4, 3, 3}, 2.5);
    for (auto& v : x.vec()) v += 1.7;
    ActNorm an("an", 4);
    an.initialize(x);
    const NdArr y = apply(an, x);
    const auto N = y.dim(0), C = y.dim(1), P = y.dim(2) * y.dim(3);
    for (std::int64_t c = 0; c < C; ++c) {
      double m = 0, v = 0;
      for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t q = 0; q < P; ++q) m += y[(n * C + c) * P + q];
      m /= double(N * P);
      for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t q = 0; q < P; ++q) v += std::pow(y[(n * C + c) * P + q] - m, 2);
      v /= double(N * P);
      CHECK(std::abs(m) < 1e-10);
      CHECK(std::abs(v - 1) < 1e-8);
    }
  }
}

TEST_CASE("actnorm forward and inverse") {
  Rng rng(4);
  SUBCASE("unit scale is the identity") {
    ActNorm an("an", 2);
    an.set_identity();
    const NdArr x = rng.normal_array({1, 2, 3, 3});
    CHECK(apply(an, x) == x);
    CHECK(logdet_of(an, x) == 0);
  }
  SUBCASE("scale 2 on a 1-channel 2x2 input") {
    ActNorm an("an", 1);
    an.set(NdArr::from({2}), NdArr::from({0}));
    const NdArr x = rng.normal_array({1, 1, 2, 2});
    CHECK(logdet_of(an, x) == doctest::Approx(4 * std::log(2.0)).epsilon(1e-14));
    CHECK(fd_log_abs_det([&](const NdArr& v) { return apply(an, v); }, x) ==
          doctest::Approx(4 * std::log(2.0)).epsilon(1e-8));
  }
  SUBCASE("round trip") {
    ActNorm an("an", 3);
    an.set(NdArr::from({0.3, 1.7, 2.2}), NdArr::from({-1, 0.5, 3}));
    const NdArr x = rng.normal_array({2, 3, 4, 4});
    CHECK(max_abs_diff(invert(an, apply(an, x)), x) < 1e-12);
  }
  SUBCASE("uninitialized layer refuses to run") {
    ActNorm an("an", 1);
    Tape t(false);
    CHECK_THROWS_AS(an.forward(t, t.constant(NdArr({1, 1, 2, 2}))), Error);
  }
}

TEST_CASE("invertible 1x1 convolution") {
  Rng rng(5);
  SUBCASE("identity weight") {
    InvConv1x1 ic("ic", 3, rng);
    ic.set_weight(linalg::identity(3));
    const NdArr x = rng.normal_array({2, 3, 2, 2});
    CHECK(apply(ic, x) == x);
    CHECK(logdet_of(ic, x) == 0);
  }
  SUBCASE("rotation") {
    InvConv1x1 ic("ic", 2, rng);
    const double th = 0.7;
    ic.set_weight(NdArr({2, 2}, {Real(std::cos(th)), Real(-std::sin(th)), Real(std::sin(th)), Real(std::cos(th))}));
    const NdArr x = rng.normal_array({1, 2, 2, 3});
    const NdArr y = apply(ic, x);
    CHECK(std::abs(logdet_of(ic, x)) < 1e-14);
    for (int p = 0; p < 6; ++p) {
      CHECK(y[p] == doctest::Approx(std::cos(th) * x[p] - std::sin(th) * x[6 + p]));
      CHECK(y[6 + p] == doctest::Approx(std::sin(th) * x[p] + std::cos(th) * x[6 + p]));
    }
  }
  SUBCASE("random weight matches the dense Jacobian") {
    InvConv1x1 ic("ic", 4, rng);
    ic.set_weight(rng.normal_array({4, 4}));
    const NdArr x = rng.normal_array({1, 4, 3, 3});
    const double oracle = fd_log_abs_det([&](const NdArr& v) { return apply(ic, v); }, x);
    CHECK(std::abs(logdet_of(ic, x) - oracle) < 1e-6);
    CHECK(max_abs_diff(invert(ic, apply(ic, x)), x) < 1e-12);
  }
  SUBCASE("singular weight") {
    InvConv1x1 ic("ic", 2, rng);
    CHECK_THROWS_AS(ic.set_weight(NdArr({2, 2}, {1, 2, 2, 4})), Error);
  }
}

TEST_CASE("affine coupling") {
  Rng rng(6);
  SUBCASE("zero-initialized backbone is the identity") {
    AffineCoupling cp("cp", 4, 8, rng);
    const NdArr x = rng.normal_array({2, 4, 3, 3});
    CHECK(apply(cp, x) == x);
    CHECK(logdet_of(cp, x) == 0);
  }
  SUBCASE("constant s = log 2, t = 1 on [a, b]") {
    AffineCoupling cp("cp", 2, 4, rng);
    cp.backbone.out.bias.value = NdArr::from({Real(std::log(2.0)), 1});
    const NdArr x({1, 2, 1, 1}, {0.75, -1.25});
    const NdArr y = apply(cp, x);
    CHECK(y[0] == 0.75);
    CHECK(y[1] == doctest::Approx(2 * -1.25 + 1).epsilon(1e-15));
    CHECK(logdet_of(cp, x) == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  }
  SUBCASE("random backbone keeps the first half and inverts") {
    AffineCoupling cp("cp", 6, 8, rng);
    auto& out = cp.backbone.out;
    out.weight.value = rng.normal_array(out.weight.value.shape(), 0.2);
    out.bias.value = rng.normal_array(out.bias.value.shape(), 0.2);
    const NdArr x = rng.normal_array({2, 6, 4, 4});
    const NdArr y = apply(cp, x);
    for (std::int64_t n = 0; n < 2; ++n)
      for (std::int64_t q = 0; q < 3 * 16; ++q) CHECK(y[n * 96 + q] == x[n * 96 + q]);
    CHECK(max_abs_diff(invert(cp, y), x) < 1e-10);
    const NdArr x1 = rng.normal_array({1, 6, 2, 2});
    CHECK(std::abs(logdet_of(cp, x1) - fd_log_abs_det([&](const NdArr& v) { return apply(cp, v); }, x1)) < 1e-6);
  }
  SUBCASE("odd channel count") { CHECK_THROWS_AS(AffineCoupling("cp", 3, 4, rng), ShapeError); }
}

TEST_CASE("squeeze and unsqueeze") {
  Tape t(false);
  const NdArr x({1, 1, 2, 2}, {1, 2, 3, 4});
  Var y = squeeze(t.constant(x));
  CHECK(y.shape() == Shape{1, 4, 1, 1});
  CHECK(y.value().vec() == std::vector<Real>{1, 2, 3, 4});

  Rng rng(7);
  for (Shape s : {Shape{2, 3, 4, 6}, Shape{1, 2, 8, 2}, Shape{3, 1, 2, 2}}) {
    const NdArr r = rng.normal_array(s);
    Var sq = squeeze(t.constant(r));
    CHECK(sq.value().size() == r.size());
    CHECK(sq.shape() == Shape{s[0], 4 * s[1], s[2] / 2, s[3] / 2});
    CHECK(unsqueeze(sq).value() == r);
  }
  CHECK_THROWS_AS(squeeze(t.constant(NdArr({1, 1, 3, 2}))), ShapeError);
}

TEST_CASE("factor_out and merge") {
  Tape t(false);
  Rng rng(8);
  const NdArr h = rng.normal_array({2, 4, 3, 3});
  FactorOut f = factor_out(t.constant(h));
  CHECK(f.z_part.shape() == Shape{2, 2, 3, 3});
  CHECK(f.rest.shape() == Shape{2, 2, 3, 3});
  CHECK(f.z_part.value().size() + f.rest.value().size() == h.size());
  CHECK(f.z_part.value()[0] == h[0]);                   // first half of the channels
  CHECK(f.rest.value()[0] == h.at(0, 2, 0, 0));
  CHECK(merge(f.z_part, f.rest).value() == h);
  CHECK_THROWS_AS(factor_out(t.constant(NdArr({1, 3, 2, 2}))), ShapeError);
}

TEST_CASE("multi-scale flow") {
  SUBCASE("identity initialization yields the fixed permutation") {
    Rng rng(9);
    MultiScaleFlow f({1, 2, 2, 8}, rng);
    f.set_actnorm_identity();
    for (auto& level : f.levels())
      for (auto& s : level) s.invconv.set_weight(linalg::identity(s.invconv.weight.value.dim(0)));
    const NdArr x = rng.normal_array({2, 1, 8, 8});
    Tape t(false);
    auto out = f.forward(t, t.constant(x));
    // Expected: squeeze, split, squeeze applied directly.
    Var sq = squeeze(t.constant(x));
    FactorOut fo = factor_out(sq);
    CHECK(out.z_parts.size() == 1);
    CHECK(out.z_parts[0].value() == fo.z_part.value());
    CHECK(out.z.value() == squeeze(fo.rest).value());
    CHECK(max_abs(out.logdet.value()) == 0);
  }
  SUBCASE("round trip on a random flow") {
    Rng rng(10);
    MultiScaleFlow f({4, 2, 2, 8}, rng);
    flowseg::testing::randomize_flow(f, rng, 0.1);
    const NdArr x = rng.normal_array({2, 4, 8, 8});
    Tape t(false);
    auto out = f.forward(t, t.constant(x));
    CHECK(max_abs_diff(f.inverse(t, out.z_parts, out.z).value(), x) < 1e-8);
    std::int64_t total = out.z.value().size();
    for (const auto& p : out.z_parts) total += p.value().size();
    CHECK(total == x.size());
  }
  SUBCASE("log-det matches the dense Jacobian at dimension 48") {
    Rng rng(11);
    MultiScaleFlow f({3, 2, 2, 8}, rng);
    flowseg::testing::randomize_flow(f, rng, 0.1);
    const NdArr x = rng.normal_array({1, 3, 4, 4});
    Tape t(false);
    const Real ld = f.forward(t, t.constant(x)).logdet.value()[0];
    const double oracle = fd_log_abs_det(
        [&](const NdArr& v) {
          Tape tt(false);
          return flowseg::testing::flatten_latents(f.forward(tt, tt.constant(v)));
        },
        x);
    CHECK(std::abs(ld - oracle) / std::max(1.0, std::abs(oracle)) < 1e-4);
  }
  SUBCASE("data-dependent initialization and shape errors") {
    Rng rng(12);
    MultiScaleFlow f({1, 2, 2, 8}, rng);
    CHECK_FALSE(f.initialized());
    Tape t(false);
    CHECK_THROWS_AS(f.forward(t, t.constant(rng.normal_array({2, 1, 8, 8}))), Error);
    f.initialize(rng.normal_array({4, 1, 8, 8}));
    CHECK(f.initialized());
    CHECK_THROWS_WITH_AS(f.forward(t, t.constant(NdArr({1, 1, 6, 8}))), doctest::Contains("divisible by 2^2"),
                         ShapeError);
    CHECK(f.latent_shape({5, 1, 16, 16}) == Shape{5, 8, 4, 4});
    CHECK(f.z_part_shapes({5, 1, 16, 16}) == std::vector<Shape>{{5, 2, 8, 8}});
  }
}

TEST_CASE("planar flow density integrates to one") {
  Rng rng(13);
  flowseg::testing::PlanarFlow f(3, 16, rng, 0.3);
  const double mass = flowseg::testing::integrate_density(f, -6, 6, 0.05);
  CHECK(mass > 0.98);
  CHECK(mass < 1.02);
}
