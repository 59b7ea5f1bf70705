#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "groundseg/objectives.hpp"
#include "groundseg/rng.hpp"
#include "oracles.hpp"

using namespace groundseg;
using namespace oracle;

namespace {

Tensor<double> tensor(int h, int w, V v) { return Tensor<double>({h, w}, std::move(v)); }

}  // namespace

TEST_CASE("penalty weight map") {
  const LossConfig cfg;
  SUBCASE("background only") {
    CategoryMap gt{2, 2, kNumCategories, {0, 0, 0, 0}};
    CHECK(penalty_weight_map<double>(gt, 1, cfg).data == V{1, 1, 1, 1});
  }
  SUBCASE("own class") {
    CategoryMap gt{2, 2, kNumCategories, {2, 2, 2, 2}};
    CHECK(penalty_weight_map<double>(gt, 2, cfg).data == V{1, 1, 1, 1});
  }
  SUBCASE("mixed 2x2") {
    CategoryMap gt{2, 2, kNumCategories, {1, 3, 0, 3}};
    CHECK(penalty_weight_map<double>(gt, 1, cfg).data == V{1, 1.5, 1, 1.5});
  }
  SUBCASE("invalid category") {
    CategoryMap gt{2, 2, kNumCategories, {0, 0, 0, 0}};
    CHECK_THROWS_AS(penalty_weight_map<double>(gt, 0, cfg), InvalidInput);
    CHECK_THROWS_AS(penalty_weight_map<double>(gt, 5, cfg), InvalidInput);
  }
}

TEST_CASE("weighted bce") {
  CHECK(weighted_bce<double>(V{0, 0, 0}, V{1, 1, 1}, V{1, 1, 1}) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(weighted_bce<double>(V{60, -60}, V{1, 0}, V{1, 1}) < 1e-20);
  CHECK(std::isfinite(weighted_bce<double>(V{800, -800}, V{0, 1}, V{1, 1})));

  const V z{1, -1, 0, 2}, t{1, 0, 0, 1}, w{1, 1.5, 1, 1};
  CHECK(std::fabs(weighted_bce<double>(z, t, w) - static_cast<double>(ref_bce(z, t, w))) < 1e-6);

  Rng rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    V zz(9), tt(9), ww(9);
    for (int i = 0; i < 9; ++i) {
      zz[i] = rng.uniform(-6, 6);
      tt[i] = rng.uniform01() < 0.5;
      ww[i] = rng.uniform01() < 0.3 ? 1.5 : 1.0;
    }
    CHECK(std::fabs(weighted_bce<double>(zz, tt, ww) - static_cast<double>(ref_bce(zz, tt, ww))) < 1e-9);
  }
}

TEST_CASE("weighted dice") {
  CHECK(weighted_dice<double>(V{1, 0, 1}, V{1, 0, 1}, V{1, 1, 1}, 1e-6) < 1e-6);
  CHECK(weighted_dice<double>(V{0, 0}, V{0, 0}, V{1, 1}, 1e-6) == doctest::Approx(0.0));
  const V p{1, 1, 0, 0}, t{1, 0, 0, 0}, w{1, 1, 1, 1};
  CHECK(std::fabs(weighted_dice<double>(p, t, w, 1e-6) - 1.0 / 3.0) < 1e-6);
  CHECK(std::fabs(weighted_dice<double>(p, t, w, 1e-6) - static_cast<double>(ref_dice(p, t, w, 1e-6L))) < 1e-12);
}

TEST_CASE("mask loss averages tokens") {
  LossConfig cfg;
  const auto z1 = tensor(2, 2, {1, -1, 0, 2}), z2 = tensor(2, 2, {-2, 0.5, 3, -0.25});
  const auto t1 = tensor(2, 2, {1, 0, 0, 1}), t2 = tensor(2, 2, {0, 1, 1, 0});
  const auto w1 = tensor(2, 2, {1, 1.5, 1, 1}), w2 = tensor(2, 2, {1.5, 1, 1, 1.5});
  auto token = [&](const Tensor<double>& z, const Tensor<double>& t, const Tensor<double>& w) {
    return 2.0L * ref_bce(z.data, t.data, w.data) + 0.5L * ref_dice(sigmoid(z.data), t.data, w.data, 1e-6L);
  };
  const long double want = (token(z1, t1, w1) + token(z2, t2, w2)) / 2;
  CHECK(std::fabs(mask_loss<double>({z1, z2}, {t1, t2}, {w1, w2}, cfg) - static_cast<double>(want)) < 1e-6);

  CHECK(mask_loss<double>({}, {}, {}, cfg) == 0.0);
  cfg.lambda_bce = cfg.lambda_dice = 0;
  CHECK(mask_loss<double>({z1}, {t1}, {w1}, cfg) == 0.0);

  // A confident correct prediction costs almost nothing.
  LossConfig d;
  CHECK(mask_loss<double>({tensor(1, 2, {40, -40})}, {tensor(1, 2, {1, 0})}, {tensor(1, 2, {1, 1})}, d) < 1e-6);
}

TEST_CASE("penalty never lowers the mask loss") {
  Rng rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    CategoryMap gt{4, 4, kNumCategories, std::vector<std::uint8_t>(16)};
    for (auto& l : gt.labels) l = static_cast<std::uint8_t>(rng.uniform_int(0, 4));
    V z(16);
    for (auto& v : z) v = rng.uniform(-4, 4);
    const auto b = gt.binary(1);
    const Tensor<double> zt({4, 4}, z), t({4, 4}, V(b.begin(), b.end()));
    LossConfig on, off;
    off.penalty = 1.0;
    const double a = mask_loss<double>({zt}, {t}, {penalty_weight_map<double>(gt, 1, on)}, on);
    const double c = mask_loss<double>({zt}, {t}, {penalty_weight_map<double>(gt, 1, off)}, off);
    CHECK(a >= c - 1e-12);
  }
}

TEST_CASE("consistency loss") {
  CHECK(consistency_loss<double>({tensor(3, 3, V(9, 0.4))}) == 0.0);
  CHECK(consistency_loss<double>({tensor(1, 2, {1, 0})}) == doctest::Approx(1.0));
  CHECK(consistency_loss<double>({tensor(2, 2, {1, 0, 0, 1})}) == doctest::Approx(1.0));
  CHECK(consistency_loss<double>({tensor(1, 1, {0.7})}) == 0.0);

  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const int h = rng.uniform_int(1, 5), w = rng.uniform_int(1, 5);
    std::vector<Tensor<double>> maps;
    for (int k = rng.uniform_int(1, 3); k > 0; --k) {
      V v(static_cast<std::size_t>(h * w));
      for (auto& x : v) x = rng.uniform01();
      maps.push_back(tensor(h, w, v));
    }
    const double got = consistency_loss<double>(maps);
    CHECK(std::fabs(got - static_cast<double>(ref_consistency(maps))) < 1e-12);
    CHECK(got >= 0.0);
    CHECK(got <= 1.0);
  }
}

TEST_CASE("text loss") {
  const Tensor<double> uniform({4, 7}, 0.3);
  CHECK(text_loss<double>(uniform, {0, 1, 2, 3}, 1, 4) == doctest::Approx(std::log(7.0)));

  Tensor<double> sharp({3, 5}, -50.0);
  const std::vector<int> ids{0, 2, 4};
  sharp.at(0, 2) = 50;
  sharp.at(1, 4) = 50;
  CHECK(text_loss<double>(sharp, ids, 1, 3) < 1e-12);

  const Tensor<double> l({4, 3}, V{0.5, -1, 2, 1.5, 0.2, -0.3, -2, 0.1, 0.7, 3, 1, -1});
  const std::vector<int> tgt{0, 2, 1, 0};
  CHECK(std::fabs(text_loss<double>(l, tgt, 1, 4) - static_cast<double>(ref_text(l, tgt, 1, 4))) < 1e-6);
  CHECK(std::fabs(text_loss<double>(l, tgt, 2, 4) - static_cast<double>(ref_text(l, tgt, 2, 4))) < 1e-6);

  CHECK_THROWS_AS(text_loss<double>(l, tgt, 2, 2), InvalidInput);
  CHECK_THROWS_AS(text_loss<double>(l, tgt, 0, 2), InvalidInput);
}

TEST_CASE("total loss") {
  LossConfig cfg;
  CHECK(total_loss(0.1, 0.2, 0.3, cfg) == doctest::Approx(0.6));
  cfg.lambda_mask = 2;
  cfg.lambda_txt = 1;
  cfg.lambda_con = 0.5;
  CHECK(std::fabs(total_loss(0.4, 0.6, 0.2, cfg) - 1.5) < 1e-12);
  cfg.lambda_mask = cfg.lambda_txt = cfg.lambda_con = 0;
  CHECK(total_loss(0.4, 0.6, 0.2, cfg) == 0.0);
}

TEST_CASE("loss config validation") {
  LossConfig cfg;
  cfg.penalty = -1;
  CHECK_THROWS_AS(cfg.validate(), InvalidInput);
}

TEST_CASE("kernel gradients match finite differences") {
  SUBCASE("bce on 2x2") {
    Parameter<double> z("z", {2, 2});
    z.value.data = {1, -1, 0, 2};
    const V t{1, 0, 0, 1}, w{1, 1.5, 1, 1};
    const auto r = grad_check(
        {&z}, [&] { return weighted_bce_grad<double>(z.value.data, t, w, z.grad.data); },
        [&] { return weighted_bce<double>(z.value.data, t, w); });
    CHECK(r.finite);
    CHECK(r.checked == 4);
    CHECK(r.max_rel_error < 1e-3);
  }
  SUBCASE("consistency on 3x3") {
    Parameter<double> p("p", {3, 3});
    p.value.data = {0.1, 0.5, 0.9, 0.35, 0.72, 0.05, 0.6, 0.22, 0.81};
    const auto r = grad_check(
        {&p},
        [&] {
          std::vector<Tensor<double>> g;
          const double v = consistency_loss_grad<double>({p.value}, g);
          p.grad = g[0];
          return v;
        },
        [&] { return consistency_loss<double>({p.value}); });
    CHECK(r.max_rel_error < 1e-3);
  }
  SUBCASE("dice") {
    Parameter<double> p("p", {2, 3});
    p.value.data = {0.2, 0.9, 0.4, 0.7, 0.1, 0.55};
    const V t{1, 1, 0, 0, 0, 1}, w{1, 1, 1.5, 1, 1.5, 1};
    const auto r = grad_check(
        {&p}, [&] { return weighted_dice_grad<double>(p.value.data, t, w, 1e-6, p.grad.data); },
        [&] { return weighted_dice<double>(p.value.data, t, w, 1e-6); });
    CHECK(r.max_rel_error < 1e-3);
  }
  SUBCASE("text") {
    Parameter<double> l("l", {4, 3});
    l.value.data = {0.5, -1, 2, 1.5, 0.2, -0.3, -2, 0.1, 0.7, 3, 1, -1};
    const std::vector<int> ids{0, 2, 1, 0};
    const auto r = grad_check(
        {&l}, [&] { return text_loss_grad<double>(l.value, ids, 1, 4, l.grad); },
        [&] { return text_loss<double>(l.value, ids, 1, 4); });
    CHECK(r.max_rel_error < 1e-3);
  }
}

TEST_CASE("grad_check reports non-finite losses and oversize fixtures") {
  Parameter<double> p("p", {2});
  auto r = grad_check(
      {&p}, [] { return std::nan(""); }, [] { return 0.0; });
  CHECK_FALSE(r.finite);
  CHECK(r.message.find("non-finite") != std::string::npos);

  Parameter<double> big("big", {kGradCheckMaxScalars + 1});
  CHECK_THROWS_AS(grad_check({&big}, [] { return 0.0; }, [] { return 0.0; }), InvalidInput);
}
