#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "samref/nn.hpp"
#include "support.hpp"

using namespace samref;
using namespace samref::testing;

namespace {

Tensor<double> naive_conv(const nn::Conv2d<double>& conv, const Tensor<double>& x) {
  const int k = conv.kernel(), s = conv.stride(), p = conv.padding();
  const int oh = conv.out_size(x.height()), ow = conv.out_size(x.width());
  Tensor<double> y(conv.out_channels(), oh, ow);
  auto& c = const_cast<nn::Conv2d<double>&>(conv);
  for (int o = 0; o < conv.out_channels(); ++o)
    for (int i = 0; i < oh; ++i)
      for (int j = 0; j < ow; ++j) {
        double acc = conv.has_bias() ? conv.bias.value[o] : 0.0;
        for (int ci = 0; ci < conv.in_channels(); ++ci)
          for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
              const int yy = i * s - p + ky, xx = j * s - p + kx;
              if (yy < 0 || xx < 0 || yy >= x.height() || xx >= x.width()) continue;
              acc += c.w(o, ci, ky, kx) * x(ci, yy, xx);
            }
        y(o, i, j) = acc;
      }
  return y;
}

}  // namespace

TEST_CASE("conv forward matches a direct convolution") {
  std::mt19937_64 rng(1);
  for (auto [k, s] : {std::pair{3, 1}, {3, 2}, {1, 1}, {5, 1}}) {
    nn::Conv2d<double> conv("c", 3, 4, k, s);
    conv.init_he(rng);
    for (auto& b : conv.bias.value) b = 0.1;
    const auto x = random_tensor<double>(rng, 3, 9, 8);
    const auto y = conv.forward(x);
    const auto ref = naive_conv(conv, x);
    REQUIRE(y.same_shape(ref));
    for (std::size_t i = 0; i < y.size(); ++i) CHECK(y[i] == doctest::Approx(ref[i]).epsilon(1e-12));
  }
}

TEST_CASE("conv backward matches finite differences") {
  std::mt19937_64 rng(2);
  for (auto [k, s] : {std::pair{3, 1}, {3, 2}, {1, 1}}) {
    nn::Conv2d<double> conv("c", 3, 4, k, s);
    conv.init_he(rng);
    auto x = random_tensor<double>(rng, 3, 8, 8);
    const auto y0 = conv.forward(x);
    const auto r = random_tensor<double>(rng, y0.channels(), y0.height(), y0.width());
    nn::ParamList<double> params;
    conv.collect(params);
    nn::zero_grads(params);
    const auto dx = conv.backward(x, r);
    auto loss = [&] { return probe(conv.forward(x), r); };
    auto pp = probe_params(params, rng);
    CHECK(rel_error(pp.analytic, numeric_grad(loss, pp.vars)) < 1e-7);
    auto px = probe_tensor(x, dx);
    CHECK(rel_error(px.analytic, numeric_grad(loss, px.vars)) < 1e-7);
  }
}

TEST_CASE("group norm normalises each group and matches finite differences") {
  std::mt19937_64 rng(3);
  nn::GroupNorm<double> gn("g", 8, 2);
  auto x = random_tensor<double>(rng, 8, 5, 6, -3, 4);
  const auto y = gn.forward(x);
  for (int g = 0; g < 2; ++g) {
    double m = 0, v = 0;
    const std::size_t n = 4 * y.plane();
    for (std::size_t i = 0; i < n; ++i) m += y[g * n + i];
    m /= n;
    for (std::size_t i = 0; i < n; ++i) v += (y[g * n + i] - m) * (y[g * n + i] - m);
    CHECK(m == doctest::Approx(0).epsilon(1e-9));
    CHECK(v / n == doctest::Approx(1).epsilon(1e-3));
  }
  for (auto& g : gn.gamma.value) g = 0.5 + std::uniform_real_distribution<>(0, 1)(rng);
  for (auto& b : gn.beta.value) b = std::uniform_real_distribution<>(-1, 1)(rng);
  const auto r = random_tensor<double>(rng, 8, 5, 6);
  nn::ParamList<double> params;
  gn.collect(params);
  nn::zero_grads(params);
  const auto dx = gn.backward(x, r);
  auto loss = [&] { return probe(gn.forward(x), r); };
  auto pp = probe_params(params, rng);
  CHECK(rel_error(pp.analytic, numeric_grad(loss, pp.vars)) < 1e-6);
  auto px = probe_tensor(x, dx);
  CHECK(rel_error(px.analytic, numeric_grad(loss, px.vars)) < 1e-6);
}

TEST_CASE("roi_align matches a scalar bilinear sampler") {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0, 1);
  for (int trial = 0; trial < 50; ++trial) {
    const auto x = random_tensor<double>(rng, 2, 12, 10);
    const double y0 = u(rng) * 8, x0 = u(rng) * 6;
    const nn::Region r{y0, x0, y0 + 0.5 + u(rng) * (12 - y0), x0 + 0.5 + u(rng) * (10 - x0)};
    const int oh = 1 + trial % 7, ow = 2 + trial % 5;
    const auto y = nn::roi_align(x, r, oh, ow);
    for (int c = 0; c < 2; ++c)
      for (int i = 0; i < oh; ++i)
        for (int j = 0; j < ow; ++j) {
          const double sy = r.y0 + (i + 0.5) * (r.y1 - r.y0) / oh - 0.5;
          const double sx = r.x0 + (j + 0.5) * (r.x1 - r.x0) / ow - 0.5;
          CHECK(y(c, i, j) == doctest::Approx(bilinear_at(x, c, sy, sx)).epsilon(1e-12));
        }
  }
}

TEST_CASE("roi_align backward is the adjoint of forward") {
  std::mt19937_64 rng(5);
  const auto x = random_tensor<double>(rng, 3, 9, 11);
  const nn::Region r{1.3, 0.7, 8.1, 10.2};
  const auto y = nn::roi_align(x, r, 6, 5);
  const auto g = random_tensor<double>(rng, 3, 6, 5);
  const auto dx = nn::roi_align_backward(g, r, 9, 11);
  CHECK(probe(y, g) == doctest::Approx(probe(x, dx)).epsilon(1e-12));
}

TEST_CASE("resize of a constant is constant; identity resize is exact") {
  Tensor<double> c(1, 7, 5, 2.5);
  const auto y = nn::resize_bilinear(c, 13, 3);
  for (double v : y.values()) CHECK(v == doctest::Approx(2.5));
  std::mt19937_64 rng(6);
  const auto x = random_tensor<double>(rng, 2, 6, 6);
  CHECK(nn::resize_bilinear(x, 6, 6) == x);
}

TEST_CASE("avg_pool and its adjoint") {
  std::mt19937_64 rng(7);
  const auto x = random_tensor<double>(rng, 2, 8, 4);
  const auto y = nn::avg_pool(x, 2);
  CHECK(y(1, 3, 1) == doctest::Approx((x(1, 6, 2) + x(1, 6, 3) + x(1, 7, 2) + x(1, 7, 3)) / 4));
  const auto g = random_tensor<double>(rng, 2, 4, 2);
  CHECK(probe(y, g) == doctest::Approx(probe(x, nn::avg_pool_backward(g, 2))).epsilon(1e-12));
  CHECK_THROWS_AS(nn::avg_pool(x, 3), Error);
}

TEST_CASE("relu backward gates on the output") {
  Tensor<double> x(1, 1, 4);
  x[0] = -1;
  x[1] = 0;
  x[2] = 2;
  x[3] = 3;
  const auto y = nn::relu(x);
  Tensor<double> dy(1, 1, 4, 1.0);
  const auto dx = nn::relu_backward(y, dy);
  CHECK(dx[0] == 0);
  CHECK(dx[1] == 0);
  CHECK(dx[2] == 1);
}

TEST_CASE("concat and split are inverse") {
  std::mt19937_64 rng(8);
  const auto a = random_tensor<double>(rng, 2, 3, 3);
  const auto b = random_tensor<double>(rng, 1, 3, 3);
  const auto ab = nn::concat_channels<double>({&a, &b});
  CHECK(ab.channels() == 3);
  const auto parts = nn::split_channels(ab, {2, 1});
  CHECK(parts[0] == a);
  CHECK(parts[1] == b);
}

TEST_CASE("adam minimises a quadratic") {
  nn::Param<double> p("p", {2});
  p.value = {3.0, -2.0};
  nn::Adam<double> opt(0.1);
  for (int i = 0; i < 500; ++i) {
    p.grad = {2 * p.value[0], 2 * p.value[1]};
    opt.step({&p});
  }
  CHECK(std::abs(p.value[0]) < 1e-2);
  CHECK(std::abs(p.value[1]) < 1e-2);
  CHECK(opt.steps() == 500);
}
