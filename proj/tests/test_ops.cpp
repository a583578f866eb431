// SPDX-License-Identifier: Apache-2.0
#include "support.hpp"

#include <doctest.h>

#include <array>

using namespace gssd;
using gssd::test::max_fd_error;
using gssd::test::naive_conv;
using gssd::test::random_tensor;

TEST_CASE("numel rejects non-positive extents") {
  CHECK(numel({2, 3, 4}) == 24);
  CHECK(numel({}) == 1);
  CHECK_THROWS_AS(numel({2, 0}), ConfigError);
}

TEST_CASE("tensor shape and data length must agree") {
  CHECK_THROWS_AS(Tensor<double>({2, 2}, Tensor<double>::Array::Zero(3)), ConfigError);
}

TEST_CASE("xavier bounds, fan arithmetic and determinism") {
  std::mt19937_64 a(3), b(3);
  const auto t = xavier_uniform<double>({8, 4, 3, 3}, a);
  const auto u = xavier_uniform<double>({8, 4, 3, 3}, b);
  const double bound = std::sqrt(6.0 / (4 * 9 + 8 * 9));
  CHECK(t.data().abs().maxCoeff() <= bound);
  CHECK(t.data().abs().maxCoeff() > 0.8 * bound);
  CHECK((t.data() == u.data()).all());
  std::mt19937_64 c(3);
  CHECK_THROWS(xavier_uniform<double>({5}, c));
}

TEST_CASE("conv2d matches a direct-loop oracle across strides, padding and groups") {
  std::mt19937_64 rng(11);
  struct Case {
    Index c, f, k, stride, pad, groups, h, w;
  };
  for (const Case cs : {Case{4, 6, 3, 1, 1, 2, 7, 6}, Case{6, 6, 3, 2, 1, 3, 9, 8}, Case{4, 8, 1, 1, 0, 4, 5, 5},
                        Case{3, 5, 3, 1, 0, 1, 6, 7}, Case{4, 4, 3, 2, 0, 2, 7, 7}}) {
    const auto x = random_tensor({2, cs.c, cs.h, cs.w}, rng);
    const auto k = random_tensor({cs.f, cs.c / cs.groups, cs.k, cs.k}, rng);
    const auto bias = random_tensor({cs.f}, rng);
    Graph<double> g;
    const auto y = conv2d(g.constant(x), g.constant(k), std::optional(g.constant(bias)),
                          {cs.stride, cs.pad, cs.groups});
    const auto ref = naive_conv(x, k, &bias, cs.stride, cs.pad, cs.groups);
    REQUIRE(y.shape() == ref.shape());
    CHECK((y.value().data() - ref.data()).abs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("grouped conv equals concatenated per-group full convs") {
  std::mt19937_64 rng(5);
  const Index groups = 4, cg = 3, fg = 2;
  const auto x = random_tensor<float>({2, groups * cg, 8, 8}, rng);
  const auto k = random_tensor<float>({groups * fg, cg, 3, 3}, rng);
  Graph<float> g;
  const auto y = conv2d(g.constant(x), g.constant(k), std::nullopt, {1, 1, groups}).value();
  for (Index gi = 0; gi < groups; ++gi) {
    Tensor<float> xs({2, cg, 8, 8}), ks({fg, cg, 3, 3});
    for (Index n = 0; n < 2; ++n)
      for (Index c = 0; c < cg; ++c)
        for (Index i = 0; i < 64; ++i)
          xs[(n * cg + c) * 64 + i] = x[(n * groups * cg + gi * cg + c) * 64 + i];
    for (Index i = 0; i < ks.size(); ++i)
      ks[i] = k[gi * ks.size() + i];
    const auto ys = conv2d(g.constant(xs), g.constant(ks), std::nullopt, {1, 1, 1}).value();
    for (Index n = 0; n < 2; ++n)
      for (Index f = 0; f < fg; ++f)
        for (Index i = 0; i < 64; ++i)
          CHECK(std::abs(ys[(n * fg + f) * 64 + i] - y[(n * groups * fg + gi * fg + f) * 64 + i]) < 1e-5f);
  }
}

TEST_CASE("grouped conv is a block-diagonal full conv") {
  std::mt19937_64 rng(8);
  const Index groups = 3, cg = 2, fg = 2;
  const auto x = random_tensor({1, groups * cg, 6, 6}, rng);
  const auto k = random_tensor({groups * fg, cg, 3, 3}, rng);
  Tensor<double> full({groups * fg, groups * cg, 3, 3});
  for (Index o = 0; o < groups * fg; ++o)
    for (Index c = 0; c < cg; ++c)
      for (Index i = 0; i < 9; ++i)
        full[(o * groups * cg + (o / fg) * cg + c) * 9 + i] = k[(o * cg + c) * 9 + i];
  Graph<double> g;
  const auto a = conv2d(g.constant(x), g.constant(k), std::nullopt, {1, 1, groups}).value();
  const auto b = conv2d(g.constant(x), g.constant(full), std::nullopt, {1, 1, 1}).value();
  CHECK((a.data() - b.data()).abs().maxCoeff() < 1e-12);
}

TEST_CASE("conv2d errors name the offending dimensions") {
  Graph<double> g;
  auto x = g.constant(Tensor<double>({1, 6, 5, 5}));
  auto k = g.constant(Tensor<double>({4, 2, 3, 3}));
  CHECK_THROWS_WITH_AS(conv2d(x, k, std::nullopt, {1, 0, 4}), doctest::Contains("6"), ConfigError);
  auto k2 = g.constant(Tensor<double>({4, 3, 3, 3}));
  CHECK_THROWS_AS(conv2d(x, k2, std::nullopt, {1, 0, 1}), ConfigError);
  auto big = g.constant(Tensor<double>({2, 6, 7, 7}));
  CHECK_THROWS_AS(conv2d(x, big, std::nullopt, {1, 0, 1}), ConfigError);
}

TEST_CASE("finite differences: conv2d with bias, stride and groups") {
  std::mt19937_64 rng(1);
  const double err = max_fd_error(
      {random_tensor({2, 4, 5, 5}, rng), random_tensor({6, 2, 3, 3}, rng), random_tensor({6}, rng)},
      [](Graph<double> &, std::vector<Var<double>> &v) {
        auto y = conv2d(v[0], v[1], std::optional(v[2]), {2, 1, 2});
        return sum(y * y);
      });
  CHECK(err < 1e-6);
}

TEST_CASE("finite differences: relu, max pool, concat, channels-last, softmax") {
  std::mt19937_64 rng(2);
  const double err = max_fd_error({random_tensor({2, 3, 5, 5}, rng), random_tensor({2, 3, 5, 5}, rng)},
                                  [](Graph<double> &, std::vector<Var<double>> &v) {
                                    auto a = max_pool2d(relu(v[0]), {3, 2, 1, true});
                                    auto b = max_pool2d(v[1], {2, 2, 0, true});
                                    std::array<Var<double>, 2> parts{to_channels_last(a), to_channels_last(b)};
                                    auto c = concat(std::span<const Var<double>>(parts), 3);
                                    auto s = softmax(c, 3);
                                    return sum(s * c);
                                  });
  CHECK(err < 1e-6);
}

TEST_CASE("finite differences: batch norm in training mode") {
  std::mt19937_64 rng(3);
  Tensor<double> mean({3}), var = Tensor<double>::filled({3}, 1.0);
  const double err = max_fd_error(
      {random_tensor({4, 3, 3, 3}, rng), random_tensor({3}, rng, 0.5, 1.5), random_tensor({3}, rng)},
      [&](Graph<double> &, std::vector<Var<double>> &v) {
        auto y = batch_norm(v[0], v[1], v[2], BatchNormState<double>{mean, var}, true);
        return sum(y * y * y);
      });
  CHECK(err < 1e-6);
}

TEST_CASE("finite differences: softmax cross entropy, smooth L1, weighted sum") {
  std::mt19937_64 rng(4);
  const std::vector<int> labels{0, 2, 1, 1, 0};
  const auto target = random_tensor({5, 3}, rng, -2, 2);
  Tensor<double>::Array w = Tensor<double>::Array::LinSpaced(15, 0.1, 1.5);
  const double err =
      max_fd_error({random_tensor({5, 3}, rng, -3, 3), random_tensor({5, 3}, rng, -3, 3)},
                   [&](Graph<double> &, std::vector<Var<double>> &v) {
                     auto ce = softmax_cross_entropy(v[0], labels);
                     auto l1 = weighted_sum(smooth_l1(v[1], target), w);
                     return sum(ce) + l1;
                   });
  CHECK(err < 1e-6);
}

TEST_CASE("softmax cross entropy equals a 64-bit oracle and survives large logits") {
  Tensor<double> logits({3, 3}, (Tensor<double>::Array(9) << 1, 2, 3, 1000, 0, -1000, -5, -5, -5).finished());
  const std::vector<int> labels{2, 0, 1};
  Graph<double> g;
  const auto ce = softmax_cross_entropy(g.constant(logits), labels).value();
  const double r0 = -std::log(std::exp(3.0) / (std::exp(1.0) + std::exp(2.0) + std::exp(3.0)));
  CHECK(ce[0] == doctest::Approx(r0).epsilon(1e-15));
  CHECK(ce[1] == doctest::Approx(0.0));
  CHECK(ce[2] == doctest::Approx(std::log(3.0)).epsilon(1e-15));
  CHECK(std::isfinite(ce[1]));
}

TEST_CASE("batch norm: two-pass oracle, running statistics, inference mode") {
  std::mt19937_64 rng(6);
  const auto x = random_tensor({4, 2, 3, 3}, rng, -2, 5);
  Tensor<double> gamma({2}, (Tensor<double>::Array(2) << 1.5, 0.5).finished());
  Tensor<double> beta({2}, (Tensor<double>::Array(2) << 0.25, -1.0).finished());
  Tensor<double> mean({2}), var = Tensor<double>::filled({2}, 1.0);
  Graph<double> g;
  const auto y =
      batch_norm(g.constant(x), g.constant(gamma), g.constant(beta), BatchNormState<double>{mean, var}, true)
          .value();
  for (Index c = 0; c < 2; ++c) {
    std::vector<double> vals;
    for (Index n = 0; n < 4; ++n)
      for (Index i = 0; i < 9; ++i)
        vals.push_back(x[(n * 2 + c) * 9 + i]);
    double m = 0;
    for (double v : vals)
      m += v;
    m /= 36;
    double s2 = 0;
    for (double v : vals)
      s2 += (v - m) * (v - m);
    const double biased = s2 / 36, unbiased = s2 / 35;
    double ym = 0, yv = 0;
    for (Index n = 0; n < 4; ++n)
      for (Index i = 0; i < 9; ++i) {
        const double v = x[(n * 2 + c) * 9 + i];
        const double expect = gamma[c] * (v - m) / std::sqrt(biased + 1e-5) + beta[c];
        CHECK(y[(n * 2 + c) * 9 + i] == doctest::Approx(expect).epsilon(1e-12));
        ym += y[(n * 2 + c) * 9 + i];
      }
    ym /= 36;
    for (Index n = 0; n < 4; ++n)
      for (Index i = 0; i < 9; ++i)
        yv += std::pow(y[(n * 2 + c) * 9 + i] - ym, 2);
    yv /= 36;
    CHECK(ym == doctest::Approx(beta[c]).epsilon(1e-9));
    CHECK(yv == doctest::Approx(gamma[c] * gamma[c] * biased / (biased + 1e-5)).epsilon(1e-9));
    CHECK(mean[c] == doctest::Approx(0.1 * m).epsilon(1e-12));
    CHECK(var[c] == doctest::Approx(0.9 + 0.1 * unbiased).epsilon(1e-12));
  }
  const auto frozen_mean = mean, frozen_var = var;
  const auto z =
      batch_norm(g.constant(x), g.constant(gamma), g.constant(beta), BatchNormState<double>{mean, var}, false)
          .value();
  CHECK((mean.data() == frozen_mean.data()).all());
  CHECK((var.data() == frozen_var.data()).all());
  CHECK(z[0] == doctest::Approx(gamma[0] * (x[0] - mean[0]) / std::sqrt(var[0] + 1e-5) + beta[0]));
}

TEST_CASE("max pool ceil mode and padding extents") {
  CHECK(pool_output_extent(75, {2, 2, 0, true}) == 38);
  CHECK(pool_output_extent(75, {2, 2, 0, false}) == 37);
  CHECK(pool_output_extent(19, {3, 1, 1, false}) == 19);
  CHECK(conv_output_extent(5, 3, 2, 1) == 3);
  CHECK(conv_output_extent(2, 3, 1, 0) <= 0);
  Tensor<double> x({1, 1, 3, 3}, Tensor<double>::Array::LinSpaced(9, 1, 9));
  Graph<double> g;
  const auto y = max_pool2d(g.constant(x), {2, 2, 0, true}).value();
  REQUIRE(y.shape() == Shape{1, 1, 2, 2});
  CHECK(y[0] == 5);
  CHECK(y[1] == 6);
  CHECK(y[2] == 8);
  CHECK(y[3] == 9);
}

TEST_CASE("backward may run only once and needs a scalar") {
  Tensor<double> p = Tensor<double>::filled({2}, 1.0);
  Graph<double> g;
  auto v = g.parameter(p);
  CHECK_THROWS(g.backward(v));
  auto s = sum(v * v);
  g.backward(s);
  CHECK(p.grad()[0] == 2.0);
  CHECK_THROWS(g.backward(s));
}
