#include <cmath>
#include <filesystem>
#include <limits>
#include <numbers>

#include "doctest.h"
#include "flowseg/cnf.hpp"
#include "flowseg/gradcheck.hpp"
#include "flowseg/linalg.hpp"
#include "test_util.hpp"

using namespace flowseg;
using namespace flowseg::cnf;
namespace fs = std::filesystem;

namespace {

CnfConfig tiny_config(std::int64_t patch = 8, std::int64_t channels = 1) {
  CnfConfig c;
  c.patch = patch;
  c.channels = channels;
  c.flow = flow::FlowConfig{channels, 2, 2, 8};
  c.prior_hidden = 8;
  c.aux_hidden = 8;
  return c;
}

void set_flow_identity(CnfModel& m) {
  m.set_actnorm_identity();
  for (auto& level : m.flow().levels())
    for (auto& step : level) step.invconv.set_weight(linalg::identity(step.invconv.weight.value.dim(0)));
}

/// Random values in every zero-initialized head and flow output layer.
void randomize_model(CnfModel& m, Rng& rng, Real scale = Real(0.05)) {
  testing::randomize_flow(m.flow(), rng, scale);
  for (auto* p : m.prior_net().head.parameters()) p->value = rng.normal_array(p->value.shape(), scale);
  for (auto* p : m.aux_net().head.parameters()) p->value = rng.normal_array(p->value.shape(), scale);
}

NdArr random_mask(const Shape& s, Rng& rng) {
  NdArr y(s);
  for (std::int64_t i = 0; i < y.size(); ++i) y[i] = rng.uniform() < 0.5 ? 1 : 0;
  return y;
}

/// Left part salt, right part sediment, split column drawn per sample; x
/// follows the mask with additive noise.
std::pair<NdArr, NdArr> toy_pairs(std::int64_t n, std::int64_t patch, Rng& rng) {
  NdArr x(Shape{n, 1, patch, patch}), y(x.shape());
  for (std::int64_t k = 0; k < n; ++k) {
    const auto split = 1 + static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(patch - 1)));
    for (std::int64_t h = 0; h < patch; ++h)
      for (std::int64_t w = 0; w < patch; ++w) {
        const Real salt = w < split ? 1 : 0;
        y.at(k, 0, h, w) = salt;
        x.at(k, 0, h, w) = 2 * salt - 1 + Real(0.3) * static_cast<Real>(rng.normal());
      }
  }
  return {x, y};
}

bool same_values(const ParameterList& a, const std::vector<NdArr>& b) {
  for (std::size_t i = 0; i < a.size(); ++i)
    if (!(a[i]->value == b[i])) return false;
  return true;
}

std::vector<NdArr> snapshot(const ParameterList& ps) {
  std::vector<NdArr> out;
  for (auto* p : ps) out.push_back(p->value);
  return out;
}

}  // namespace

TEST_CASE("prior network") {
  CnfModel m(tiny_config(), 1);
  Rng rng(2);
  SUBCASE("zero-initialized head gives mu = 0, sigma = 1") {
    const auto [mu, sigma] = m.prior_params(random_mask({3, 1, 8, 8}, rng));
    CHECK(mu.shape() == m.flow().latent_shape(m.input_shape(3)));
    CHECK(max_abs(mu) == 0);
    CHECK(max_abs_diff(sigma, NdArr::full(sigma.shape(), 1)) == 0);
  }
  SUBCASE("mis-sized mask") {
    CHECK_THROWS_AS(m.prior_params(NdArr({1, 1, 4, 4})), ShapeError);
    CHECK_THROWS_AS(m.prior_params(NdArr({1, 2, 8, 8})), ShapeError);
  }
  SUBCASE("too many levels for the prior depth") {
    auto c = tiny_config(32);
    c.flow.levels = 5;
    CHECK_THROWS_AS(CnfModel(c, 1), Error);
  }
}

TEST_CASE("cond_gaussian_logprob") {
  CHECK(cond_gaussian_logprob(NdArr::from({0}), NdArr::from({0}), NdArr::from({1})) ==
        doctest::Approx(-0.9189385332).epsilon(1e-10));
  const NdArr mu = NdArr::from({0.3, -1.2, 2.5, 0.0, 7.0});
  CHECK(cond_gaussian_logprob(mu, mu, NdArr::full(mu.shape(), 1)) ==
        doctest::Approx(-5 * 0.5 * std::log(2 * std::numbers::pi)).epsilon(1e-12));

  Rng rng(3);
  const NdArr z = rng.normal_array({40}, 2);
  const NdArr m = rng.normal_array({40});
  NdArr s({40});
  for (std::int64_t i = 0; i < 40; ++i) s[i] = static_cast<Real>(std::exp(rng.normal()));
  double ref = 0;
  for (std::int64_t i = 0; i < 40; ++i) {
    const double pdf = std::exp(-0.5 * std::pow((z[i] - m[i]) / s[i], 2)) / (s[i] * std::sqrt(2 * std::numbers::pi));
    ref += std::log(pdf);
  }
  CHECK(std::abs(cond_gaussian_logprob(z, m, s) - ref) / std::abs(ref) < 1e-12);

  s[7] = 0;
  CHECK_THROWS_AS(cond_gaussian_logprob(z, m, s), Error);
  CHECK_THROWS_AS(cond_gaussian_logprob(z, NdArr({3}), s), ShapeError);
}

TEST_CASE("cnf negative log-likelihood") {
  SUBCASE("identity flow and zero prior give the standard-normal nll") {
    CnfModel m(tiny_config(), 4);
    set_flow_identity(m);
    Rng rng(5);
    const NdArr x = rng.normal_array({2, 1, 8, 8});
    const auto r1 = m.nll(x, random_mask({2, 1, 8, 8}, rng));
    const auto r2 = m.nll(x, random_mask({2, 1, 8, 8}, rng));
    for (std::int64_t n = 0; n < 2; ++n) {
      NdArr xn(Shape{64}, std::vector<Real>(x.vec().begin() + n * 64, x.vec().begin() + (n + 1) * 64));
      CHECK(r1.nll[n] == doctest::Approx(testing::std_normal_nll(xn)).epsilon(1e-12));
    }
    CHECK(r1.nll == r2.nll);
    CHECK(r1.bpd == doctest::Approx(r1.mean_nll / (64 * std::numbers::ln2)));
  }

  SUBCASE("matches brute-force change of variables at dimension 48") {
    CnfModel m(tiny_config(4, 3), 6);
    Rng rng(7);
    randomize_model(m, rng, Real(0.1));
    const NdArr x = rng.normal_array({1, 3, 4, 4});
    const NdArr y = random_mask({1, 1, 4, 4}, rng);
    const auto f = [&](const NdArr& v) {
      Tape t(false);
      return testing::flatten_latents(m.flow().forward(t, t.constant(v)));
    };
    Tape t(false);
    const auto out = m.flow().forward(t, t.constant(x));
    const auto [mu, sigma] = m.prior_params(y);
    double logp = cond_gaussian_logprob(out.z.value(), mu, sigma);
    for (const auto& zp : out.z_parts) logp -= testing::std_normal_nll(zp.value());
    const double brute = -(logp + testing::fd_log_abs_det(f, x));
    const double nll = m.nll(x, y).nll[0];
    CHECK(std::abs(nll - brute) / std::abs(brute) < 1e-4);
  }

  SUBCASE("doubling sigma adds dim(z_k) log 2 at z = mu") {
    CnfModel m(tiny_config(), 8);
    Rng rng(9);
    const NdArr y = random_mask({1, 1, 8, 8}, rng);
    const auto [mu, sigma] = m.prior_params(y);
    auto& bias = m.prior_net().head.bias.value;
    const auto cz = bias.size() / 2;
    for (std::int64_t c = cz; c < 2 * cz; ++c) bias[c] = static_cast<Real>(std::log(2.0));
    const auto [mu2, sigma2] = m.prior_params(y);
    CHECK(max_abs_diff(sigma2, NdArr::full(sigma2.shape(), 2)) < 1e-15);
    const double delta = cond_gaussian_logprob(mu, mu, sigma) - cond_gaussian_logprob(mu2, mu2, sigma2);
    CHECK(delta == doctest::Approx(double(mu.size()) * std::log(2.0)).epsilon(1e-12));
  }

  SUBCASE("uninitialized actnorm and shape errors") {
    CnfModel m(tiny_config(), 10);
    CHECK_FALSE(m.initialized());
    CHECK_THROWS_AS(m.nll(NdArr({1, 1, 8, 8}, 0.5), NdArr({1, 1, 8, 8})), Error);
    m.set_actnorm_identity();
    CHECK_THROWS_AS(m.nll(NdArr({2, 1, 8, 8}), NdArr({1, 1, 8, 8})), ShapeError);
    CHECK_THROWS_AS(m.nll(NdArr({1, 1, 8, 8}), NdArr({1, 1, 8, 8}, 0.5)), Error);
  }

  SUBCASE("the flow does not see the mask") {
    CnfModel m(tiny_config(), 11);
    Rng rng(12);
    randomize_model(m, rng);
    const NdArr x = rng.normal_array({2, 1, 8, 8});
    Tape t1(false), t2(false);
    const auto a = m.loss_terms(t1, x, random_mask({2, 1, 8, 8}, rng));
    const auto b = m.loss_terms(t2, x, random_mask({2, 1, 8, 8}, rng));
    CHECK(a.latents.z.value() == b.latents.z.value());
    CHECK_FALSE(a.nll.value() == b.nll.value());
  }
}

TEST_CASE("auxiliary BCE") {
  Tape t(false);
  Rng rng(13);
  const NdArr y = random_mask({2, 1, 4, 4}, rng);
  CHECK(bce_mean(t.constant(NdArr(y.shape())), y).value().item() == doctest::Approx(std::numbers::ln2).epsilon(1e-14));
  NdArr good(y.shape()), bad(y.shape());
  for (std::int64_t i = 0; i < y.size(); ++i) {
    good[i] = y[i] > 0.5 ? 50 : -50;
    bad[i] = y[i] > 0.5 ? -50 : 50;
  }
  CHECK(bce_mean(t.constant(good), y).value().item() < 1e-6);
  CHECK(bce_mean(t.constant(bad), y).value().item() == doctest::Approx(50).epsilon(1e-12));
  NdArr fuzzy = y;
  fuzzy[3] = Real(0.5);
  CHECK_THROWS_AS(bce_mean(t.constant(good), fuzzy), Error);
  fuzzy[3] = Real(1 + 1e-9);
  CHECK_NOTHROW(bce_mean(t.constant(good), fuzzy));

  CnfModel m(tiny_config(), 14);
  const auto zs = m.flow().latent_shape(m.input_shape(2));
  const NdArr y8 = random_mask({2, 1, 8, 8}, rng);
  CHECK(m.aux_bce(rng.normal_array(zs), y8) == doctest::Approx(std::numbers::ln2).epsilon(1e-14));
  CHECK_THROWS_AS(m.aux_bce(rng.normal_array(zs), NdArr({2, 1, 4, 4})), ShapeError);
}

TEST_CASE("cnf training step") {
  Rng rng(15);
  auto [xs, ys] = toy_pairs(24, 8, rng);

  SUBCASE("lr = 0 leaves parameters unchanged and repeats the loss") {
    CnfModel m(tiny_config(), 16);
    TrainConfig tc;
    tc.lr = 0;
    tc.batch = 4;
    CnfTrainer tr(m, tc);
    m.initialize(take_rows(xs, {0, 1, 2, 3, 4, 5, 6, 7}));
    const auto before = snapshot(m.parameters());
    const NdArr x = take_rows(xs, {0, 1, 2, 3}), y = take_rows(ys, {0, 1, 2, 3});
    const auto s1 = tr.step(x, y);
    const auto s2 = tr.step(x, y);
    CHECK(same_values(m.parameters(), before));
    CHECK(s1.loss == s2.loss);
    CHECK(s1.loss == doctest::Approx(s1.nll + s1.bce).epsilon(1e-12));
  }

  SUBCASE("lazy actnorm initialization on the first step") {
    CnfModel m(tiny_config(), 17);
    CnfTrainer tr(m, TrainConfig{});
    CHECK_FALSE(m.initialized());
    tr.step_from(xs, ys);
    CHECK(m.initialized());
    CHECK(tr.iteration() == 1);
  }

  SUBCASE("lambda = 0 is pure maximum likelihood") {
    auto c = tiny_config();
    c.bce_weight = 0;
    CnfModel m(c, 18);
    randomize_model(m, rng);
    Tape t;
    const auto terms = m.loss_terms(t, take_rows(xs, {0, 1, 2}), take_rows(ys, {0, 1, 2}));
    CHECK(terms.loss.value().item() == terms.mean_nll.value().item());
    CHECK(terms.bce.value().item() > 0);
  }

  SUBCASE("gradient matches finite differences on 10 parameters") {
    CnfModel m(tiny_config(), 19);
    randomize_model(m, rng, Real(0.1));
    const NdArr x = take_rows(xs, {0, 5}), y = take_rows(ys, {0, 5});
    const auto loss = [&](Tape& t) { return m.loss_terms(t, x, y).loss; };
    Rng pick(20);
    CHECK(grad_check_parameters(loss, m.parameters(), 10, pick, Real(1e-5)) < 1e-3);
  }

  SUBCASE("non-finite loss reports the iteration") {
    CnfModel m(tiny_config(), 21);
    CnfTrainer tr(m, TrainConfig{});
    tr.step_from(xs, ys);
    NdArr x = take_rows(xs, {0, 1});
    x[5] = std::numeric_limits<Real>::quiet_NaN();
    CHECK_THROWS_WITH_AS(tr.step(x, take_rows(ys, {0, 1})), doctest::Contains("iteration 1"), Error);
  }

  SUBCASE("training makes the prior depend on the mask") {
    CnfModel m(tiny_config(), 22);
    TrainConfig tc;
    tc.iterations = 100;
    tc.batch = 8;
    tc.lr = Real(2e-3);
    CnfTrainer tr(m, tc);
    for (int i = 0; i < 100; ++i) tr.step_from(xs, ys);
    const auto [mu_a, sigma_a] = m.prior_params(take_rows(ys, {0}));
    NdArr other = take_rows(ys, {0});
    for (std::int64_t i = 0; i < other.size(); ++i) other[i] = 1 - other[i];
    const auto [mu_b, sigma_b] = m.prior_params(other);
    CHECK(max_abs_diff(mu_a, mu_b) + max_abs_diff(sigma_a, sigma_b) > 1e-3);
  }

  SUBCASE("batches are a function of seed and iteration") {
    CHECK(batch_indices(3, 7, 16, 100) == batch_indices(3, 7, 16, 100));
    CHECK_FALSE(batch_indices(3, 7, 16, 100) == batch_indices(3, 8, 16, 100));
    for (auto i : batch_indices(1, 0, 64, 5)) CHECK((i >= 0 && i < 5));
  }
}

TEST_CASE("cnf sampling") {
  Rng rng(23);
  const NdArr y = random_mask({3, 1, 8, 8}, rng);

  SUBCASE("temperature 0 decodes the prior mean") {
    CnfModel m(tiny_config(), 24);
    randomize_model(m, rng);
    const NdArr a = m.sample(y, 0, 1), b = m.sample(y, 0, 2);
    CHECK(a == b);
    std::vector<NdArr> zeros;
    for (const auto& s : m.flow().z_part_shapes(m.input_shape(3))) zeros.emplace_back(s);
    CHECK(a == m.decode(zeros, m.prior_params(y).first));
    CHECK_THROWS_AS(m.sample(y, -1, 1), Error);
    CHECK_THROWS_AS(m.sample(NdArr({1, 1, 4, 4}), 1, 1), ShapeError);
  }

  SUBCASE("same seed, same sample") {
    CnfModel m(tiny_config(), 25);
    randomize_model(m, rng);
    CHECK(m.sample(y, 1, 77) == m.sample(y, 1, 77));
    CHECK_FALSE(m.sample(y, 1, 77) == m.sample(y, 1, 78));
  }

  SUBCASE("identity model draws standard-normal pixels") {
    CnfModel m(tiny_config(4), 26);
    set_flow_identity(m);
    const int n = 1000;
    const NdArr ones({n, 1, 4, 4}, 1);
    const NdArr s = m.sample(ones, 1, 27);
    for (std::int64_t e = 0; e < 16; ++e) {
      double sum = 0, sq = 0;
      for (int k = 0; k < n; ++k) {
        sum += s[k * 16 + e];
        sq += s[k * 16 + e] * s[k * 16 + e];
      }
      const double mean = sum / n, var = sq / n - mean * mean;
      CHECK(std::abs(mean) < 3 / std::sqrt(double(n)));
      CHECK(std::abs(var - 1) < 3 * std::sqrt(2.0 / n));
    }
  }

  SUBCASE("recomputed likelihood of a sample matches its latents") {
    CnfModel m(tiny_config(), 28);
    randomize_model(m, rng, Real(0.1));
    const auto [mu, sigma] = m.prior_params(y);
    NdArr zk = rng.normal_array(mu.shape());
    for (std::int64_t i = 0; i < zk.size(); ++i) zk[i] = mu[i] + sigma[i] * zk[i];
    std::vector<NdArr> parts;
    double logp = cond_gaussian_logprob(zk, mu, sigma);
    for (const auto& sh : m.flow().z_part_shapes(m.input_shape(3))) {
      parts.push_back(rng.normal_array(sh));
      logp -= testing::std_normal_nll(parts.back());
    }
    const NdArr x = m.decode(parts, zk);
    Tape t(false);
    const auto out = m.flow().forward(t, t.constant(x));
    const double expected = -(logp + sum(out.logdet).value().item());
    const double got = sum(m.nll(x, y).nll);
    CHECK(std::abs(got - expected) / std::abs(expected) < 1e-6);
  }
}

TEST_CASE("cnf checkpoint") {
  const fs::path dir = fs::temp_directory_path() / "flowseg_test_cnf_ckpt";
  fs::remove_all(dir);
  Rng rng(29);
  auto [xs, ys] = toy_pairs(12, 8, rng);
  CnfModel m(tiny_config(), 30);
  CnfTrainer tr(m, TrainConfig{});
  for (int i = 0; i < 3; ++i) tr.step_from(xs, ys);
  m.save(dir, &tr.adam(), {{"iteration", tr.iteration()}});

  SUBCASE("round trip reproduces nll bit-exact") {
    CnfModel r(CnfModel::read_config(dir), 999);
    optim::AdamState adam(r.parameters());
    const auto manifest = r.load(dir, &adam);
    CHECK(manifest.at("iteration") == 3);
    CHECK(adam.step == tr.adam().step);
    CHECK(r.initialized());
    CHECK(r.nll(xs, ys).nll == m.nll(xs, ys).nll);
    CHECK(manifest.at("layer_order").size() == m.flow().layer_order().size());
  }

  SUBCASE("architecture mismatch") {
    auto c = tiny_config();
    c.flow.steps = 3;
    CnfModel r(c, 1);
    CHECK_THROWS_AS(r.load(dir), Error);
  }
  fs::remove_all(dir);
}

TEST_CASE("cnf configuration JSON") {
  const auto p = paper_config();
  CHECK(p.flow.levels == 4);
  CHECK(p.flow.steps == 15);
  CHECK(p.patch == 64);
  CHECK(to_json(cnf_config_from_json(to_json(p))) == to_json(p));
  CHECK_THROWS_AS(cnf_config_from_json({{"levles", 3}}), Error);
  const auto tc = paper_train_config();
  CHECK(tc.batch == 50);
  CHECK(tc.iterations == 396800);
  CHECK(tc.lr == doctest::Approx(1e-4));
  CHECK(to_json(train_config_from_json(to_json(tc))) == to_json(tc));
  CHECK_THROWS_AS(train_config_from_json({{"warmup", 5}, {"iterations", 5}}), Error);
}
