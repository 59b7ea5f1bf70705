#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "groundseg/autograd.hpp"
#include "groundseg/objectives.hpp"
#include "groundseg/rng.hpp"

using namespace groundseg;
using G = ag::Graph<double>;
using Var = ag::Var<double>;

namespace {

Parameter<double> param(const std::string& name, std::vector<int> shape, Rng& rng, double scale = 1.0) {
  Parameter<double> p(name, std::move(shape));
  for (auto& v : p.value.data) v = rng.normal() * scale;
  return p;
}

// Projects an arbitrary tensor output to a scalar with fixed random weights,
// so every output element gets a distinct upstream gradient.
Var project(G& g, Var x, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> c(x.value().size());
  for (auto& v : c) v = rng.normal();
  double s = 0;
  for (std::size_t i = 0; i < c.size(); ++i) s += c[i] * x.value()[i];
  return g.record(Tensor<double>({1}, s), {x}, [x, c](G& gr, int self) {
    const double go = gr.grad(self)[0];
    auto& gx = gr.grad(x.id);
    for (std::size_t i = 0; i < c.size(); ++i) gx[i] += go * c[i];
  });
}

template <typename Build>
double check(std::vector<Parameter<double>*> params, Build build) {
  auto eval = [&](bool backward) {
    G g;
    auto root = project(g, build(g), 99);
    if (backward) {
      for (auto* p : params) p->zero_grad();
      g.backward(root);
    }
    return root.value()[0];
  };
  const auto r = grad_check(params, [&] { return eval(true); }, [&] { return eval(false); });
  REQUIRE(r.finite);
  return r.max_rel_error;
}

}  // namespace

TEST_CASE("elementwise ops") {
  Rng rng(1);
  auto a = param("a", {3, 4}, rng), b = param("b", {3, 4}, rng);
  CHECK(check({&a, &b}, [&](G& g) { return ag::add(g.param(a), g.param(b)); }) < 1e-7);
  CHECK(check({&a}, [&](G& g) { return ag::scale(g.param(a), 0.3); }) < 1e-7);
  CHECK(check({&a}, [&](G& g) { return ag::gelu(g.param(a)); }) < 1e-6);
  CHECK(check({&a}, [&](G& g) { return ag::sigmoid(g.param(a)); }) < 1e-6);
  CHECK(check({&a}, [&](G& g) { return ag::reshape(g.param(a), {2, 6}); }) < 1e-7);
}

TEST_CASE("gelu uses the tanh form") {
  G g;
  auto x = g.constant(Tensor<double>({3}, std::vector<double>{-1.0, 0.0, 2.0}));
  const auto y = ag::gelu(x).value();
  auto ref = [](double v) { return 0.5 * v * (1 + std::tanh(std::sqrt(2 / M_PI) * (v + 0.044715 * v * v * v))); };
  CHECK(y[0] == doctest::Approx(ref(-1.0)));
  CHECK(y[1] == 0.0);
  CHECK(y[2] == doctest::Approx(ref(2.0)));
}

TEST_CASE("convolution matches a direct loop") {
  Rng rng(2);
  auto x = param("x", {2, 5, 6}, rng), w = param("w", {3, 2, 3, 3}, rng), b = param("b", {3}, rng);
  for (int stride : {1, 2}) {
    G g;
    const auto y = ag::conv2d(g.param(x), g.param(w), g.param(b), stride, 1).value();
    const int oh = (5 + 2 - 3) / stride + 1, ow = (6 + 2 - 3) / stride + 1;
    REQUIRE(y.shape == std::vector<int>{3, oh, ow});
    for (int o = 0; o < 3; ++o)
      for (int i = 0; i < oh; ++i)
        for (int j = 0; j < ow; ++j) {
          double s = b.value[static_cast<std::size_t>(o)];
          for (int c = 0; c < 2; ++c)
            for (int u = 0; u < 3; ++u)
              for (int v = 0; v < 3; ++v) {
                const int yy = i * stride + u - 1, xx = j * stride + v - 1;
                if (yy < 0 || yy >= 5 || xx < 0 || xx >= 6) continue;
                s += w.value[((static_cast<std::size_t>(o) * 2 + c) * 3 + u) * 3 + v] * x.value.at(c, yy, xx);
              }
          CHECK(y.at(o, i, j) == doctest::Approx(s).epsilon(1e-12));
        }
  }
}

TEST_CASE("image ops gradients") {
  Rng rng(3);
  auto x = param("x", {2, 4, 4}, rng), w = param("w", {3, 2, 3, 3}, rng), b = param("b", {3}, rng);
  auto w1 = param("w1", {1, 2, 1, 1}, rng), b1 = param("b1", {1}, rng);
  auto y = param("y", {3, 4, 4}, rng), v = param("v", {5}, rng);
  CHECK(check({&x, &w, &b}, [&](G& g) { return ag::conv2d(g.param(x), g.param(w), g.param(b), 1, 1); }) < 1e-6);
  CHECK(check({&x, &w, &b}, [&](G& g) { return ag::conv2d(g.param(x), g.param(w), g.param(b), 2, 1); }) < 1e-6);
  CHECK(check({&x, &w1, &b1}, [&](G& g) { return ag::conv2d(g.param(x), g.param(w1), g.param(b1), 1, 0); }) < 1e-6);
  CHECK(check({&x}, [&](G& g) { return ag::avg_pool2(g.param(x)); }) < 1e-7);
  CHECK(check({&x}, [&](G& g) { return ag::upsample2(g.param(x)); }) < 1e-7);
  CHECK(check({&x, &y}, [&](G& g) { return ag::concat_channels(g.param(x), g.param(y)); }) < 1e-7);
  CHECK(check({&v}, [&](G& g) { return ag::broadcast_grid(g.param(v), 3, 2); }) < 1e-7);
  CHECK(check({&y}, [&](G& g) { return ag::grid_to_rows(g.param(y)); }) < 1e-7);
}

TEST_CASE("sequence ops gradients") {
  Rng rng(4);
  auto x = param("x", {5, 6}, rng), w = param("w", {6, 4}, rng), b = param("b", {4}, rng);
  auto table = param("table", {7, 6}, rng), pos = param("pos", {9, 6}, rng);
  auto gamma = param("gamma", {6}, rng), beta = param("beta", {6}, rng);
  auto qkv = param("qkv", {5, 12}, rng), extra = param("extra", {2, 6}, rng);
  CHECK(check({&x, &w, &b}, [&](G& g) { return ag::linear(g.param(x), g.param(w), g.param(b)); }) < 1e-7);
  CHECK(check({&table}, [&](G& g) { return ag::embedding(g.param(table), {3, 1, 3, 6}); }) < 1e-7);
  CHECK(check({&x, &extra}, [&](G& g) { return ag::concat_rows(g.param(extra), g.param(x)); }) < 1e-7);
  CHECK(check({&x, &pos}, [&](G& g) { return ag::add_leading_rows(g.param(x), g.param(pos)); }) < 1e-7);
  CHECK(check({&x, &gamma, &beta}, [&](G& g) { return ag::layer_norm(g.param(x), g.param(gamma), g.param(beta)); }) <
        1e-5);
  CHECK(check({&qkv}, [&](G& g) { return ag::causal_attention(g.param(qkv), 2); }) < 1e-5);
  CHECK(check({&x}, [&](G& g) { return ag::take_rows(g.param(x), {4, 0, 4}); }) < 1e-7);
  CHECK(check({&x}, [&](G& g) { return ag::row(g.param(x), 2); }) < 1e-7);
  auto col = param("col", {4, 1}, rng);
  CHECK(check({&col}, [&](G& g) {
          return ag::weighted_sum<double>({ag::row(g.param(col), 0), ag::row(g.param(col), 3)}, {0.5, -2.0});
        }) < 1e-7);
}

TEST_CASE("uniform attention averages the prefix") {
  // With q = k = 0 every position attends uniformly to its prefix, so output
  // row t is the mean of the first t+1 value rows.
  Tensor<double> qkv({4, 6}, 0.0);
  for (int t = 0; t < 4; ++t)
    for (int k = 4; k < 6; ++k) qkv.at(t, k) = t * 10 + k;
  G g;
  const auto y = ag::causal_attention(g.constant(qkv), 1).value();
  for (int t = 0; t < 4; ++t)
    for (int k = 0; k < 2; ++k) {
      double mean = 0;
      for (int s = 0; s <= t; ++s) mean += qkv.at(s, 4 + k);
      CHECK(y.at(t, k) == doctest::Approx(mean / (t + 1)));
    }
}

TEST_CASE("parameter leaves are shared within a graph") {
  Parameter<double> p("p", {2});
  p.value.data = {1, 2};
  G g;
  auto a = g.param(p), b = g.param(p);
  CHECK(a.id == b.id);
  auto y = project(g, ag::add(a, b), 5);
  p.zero_grad();
  g.backward(y);
  Rng rng(5);
  const double c0 = rng.normal(), c1 = rng.normal();
  CHECK(p.grad[0] == doctest::Approx(2 * c0));
  CHECK(p.grad[1] == doctest::Approx(2 * c1));
}

TEST_CASE("shape errors are rejected") {
  Rng rng(6);
  auto x = param("x", {2, 4, 4}, rng), w = param("w", {3, 3, 3, 3}, rng), b = param("b", {3}, rng);
  G g;
  CHECK_THROWS_AS(ag::conv2d(g.param(x), g.param(w), g.param(b), 1, 1), InvalidInput);
  auto m = param("m", {3, 4}, rng), n = param("n", {5, 2}, rng), nb = param("nb", {2}, rng);
  CHECK_THROWS_AS(ag::linear(g.param(m), g.param(n), g.param(nb)), InvalidInput);
  CHECK_THROWS_AS(ag::add(g.param(m), g.param(n)), InvalidInput);
}
