#include <cmath>

#include "doctest.h"
#include "edapseg/autodiff.hpp"
#include "test_support.hpp"

using namespace edapseg;
using edapseg::testing::grad_check;
using edapseg::testing::random_param;

namespace {

// Weighted sum with fixed pseudo-random weights so every output entry
// contributes a distinct gradient.
ad::Var probe(const ad::Var& x) {
  std::vector<double> w(x.size());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = std::sin(1.3 * i + 0.7);
  return ad::sum(ad::mul(x, ad::constant(x.shape(), w)));
}

void expect_grad(const std::function<ad::Var()>& f, std::vector<ad::Var> params, double tol = 1e-6) {
  auto r = grad_check(f, std::move(params));
  CHECK_MESSAGE(r.max_rel_error < tol, r.worst);
}

}  // namespace

TEST_CASE("elementwise op gradients") {
  Rng rng(1);
  auto a = random_param({3, 4}, rng), b = random_param({3, 4}, rng);
  expect_grad([&] { return probe(ad::add(a, b)); }, {a, b});
  expect_grad([&] { return probe(ad::sub(a, b)); }, {a, b});
  expect_grad([&] { return probe(ad::mul(a, b)); }, {a, b});
  expect_grad([&] { return probe(ad::scale(a, -2.5)); }, {a});
  expect_grad([&] { return probe(ad::add_scalar(a, 3.0)); }, {a});
  expect_grad([&] { return probe(ad::exp(a)); }, {a});
  expect_grad([&] { return probe(ad::square(a)); }, {a});
  expect_grad([&] { return probe(ad::abs(a)); }, {a});
  expect_grad([&] { return probe(ad::relu(a)); }, {a});
  expect_grad([&] { return probe(ad::log(ad::add_scalar(ad::square(a), 0.5))); }, {a});
  auto s = random_param({1}, rng);
  expect_grad([&] { return probe(ad::mul_scalar_var(a, s)); }, {a, s});
}

TEST_CASE("reduction and matrix op gradients") {
  Rng rng(2);
  auto a = random_param({3, 4}, rng), b = random_param({4, 5}, rng), c = random_param({5, 4}, rng);
  auto bias = random_param({4}, rng);
  expect_grad([&] { return ad::mean(ad::square(a)); }, {a});
  expect_grad([&] { return probe(ad::mean_rows(a)); }, {a});
  expect_grad([&] { return probe(ad::matmul(a, b)); }, {a, b});
  expect_grad([&] { return probe(ad::matmul_bt(a, c)); }, {a, c});
  expect_grad([&] { return probe(ad::transpose(a)); }, {a});
  expect_grad([&] { return probe(ad::add_row_vector(a, bias)); }, {a, bias});
  expect_grad([&] { return probe(ad::softmax_rows(a)); }, {a});
  expect_grad([&] { return probe(ad::unit_normalize_rows(a)); }, {a});
  expect_grad([&] { return probe(ad::standardize(a)); }, {a});
  auto pos = ad::parameter({3, 4}, {1, 2, 3, 4, 2, 2, 1, 5, 0.5, 3, 2, 1});
  expect_grad([&] { return probe(ad::row_normalize(pos)); }, {pos});
  expect_grad([&] { return probe(ad::col_normalize(pos)); }, {pos});
}

TEST_CASE("structural op gradients") {
  Rng rng(3);
  auto a = random_param({4, 3}, rng), b = random_param({2, 3}, rng), c = random_param({4, 2}, rng);
  std::vector<int> rows{3, 0, 3};
  expect_grad([&] { return probe(ad::reshape(a, {2, 6})); }, {a});
  expect_grad([&] { return probe(ad::slice_rows(a, 1, 3)); }, {a});
  expect_grad([&] { return probe(ad::slice_cols(a, 1, 3)); }, {a});
  expect_grad([&] { return probe(ad::gather_rows(a, rows)); }, {a});
  expect_grad([&] { return probe(ad::concat_rows({a, b})); }, {a, b});
  expect_grad([&] { return probe(ad::concat_cols({a, c})); }, {a, c});
}

TEST_CASE("image op gradients") {
  Rng rng(4);
  auto x = random_param({2, 3, 4, 6}, rng);
  auto w = random_param({5, 3, 3, 3}, rng, 0.3), b = random_param({5}, rng);
  expect_grad([&] { return probe(ad::conv2d(x, w, b, 1, 1)); }, {x, w, b});
  expect_grad([&] { return probe(ad::conv2d(x, w, b, 2, 1)); }, {x, w, b});
  expect_grad([&] { return probe(ad::upsample_nearest(x, 2)); }, {x});
  expect_grad([&] { return probe(ad::upsample_bilinear(x, 4)); }, {x});
  expect_grad([&] { return probe(ad::nchw_to_tokens(x)); }, {x});
  auto t = random_param({2 * 4 * 6, 3}, rng);
  expect_grad([&] { return probe(ad::tokens_to_nchw(t, 2, 4, 6)); }, {t});
}

TEST_CASE("cross entropy value and gradient") {
  Rng rng(5);
  auto logits = random_param({1, 3, 2, 2}, rng);
  std::vector<int> labels{0, 2, 255, 1};
  std::vector<double> weights{1.0, 0.5, 1.0, 2.0};
  auto ce = ad::cross_entropy(logits, labels, weights, 255);
  // Direct evaluation over the three valid pixels.
  double expect = 0.0;
  const auto& v = logits.value();
  for (int q : {0, 1, 3}) {
    double z = 0.0;
    for (int c = 0; c < 3; ++c) z += std::exp(v[c * 4 + q]);
    expect += weights[q] * (std::log(z) - v[labels[q] * 4 + q]);
  }
  CHECK(ce.item() == doctest::Approx(expect / 3.0).epsilon(1e-12));
  expect_grad([&] { return ad::cross_entropy(logits, labels, weights, 255); }, {logits});
}

TEST_CASE("conv2d matches a direct loop") {
  Rng rng(6);
  auto x = random_param({1, 2, 5, 5}, rng), w = random_param({3, 2, 3, 3}, rng);
  auto b = random_param({3}, rng);
  auto y = ad::conv2d(x, w, b, 2, 1);
  REQUIRE(y.shape() == ad::Shape{1, 3, 3, 3});
  for (int o = 0; o < 3; ++o)
    for (int oy = 0; oy < 3; ++oy)
      for (int ox = 0; ox < 3; ++ox) {
        double s = b.value()[o];
        for (int c = 0; c < 2; ++c)
          for (int ky = 0; ky < 3; ++ky)
            for (int kx = 0; kx < 3; ++kx) {
              const int iy = oy * 2 - 1 + ky, ix = ox * 2 - 1 + kx;
              if (iy < 0 || ix < 0 || iy >= 5 || ix >= 5) continue;
              s += w.value()[((o * 2 + c) * 3 + ky) * 3 + kx] * x.value()[(c * 5 + iy) * 5 + ix];
            }
        CHECK(y.value()[(o * 3 + oy) * 3 + ox] == doctest::Approx(s).epsilon(1e-12));
      }
}

TEST_CASE("standardize of a constant is zero with zero gradient") {
  auto a = ad::parameter({2, 2}, {3, 3, 3, 3});
  auto s = ad::standardize(a);
  for (double v : s.value()) CHECK(v == 0.0);
  probe(s).backward();
  for (double g : a.grad()) CHECK(g == 0.0);
}

TEST_CASE("constant inputs record no graph") {
  auto a = ad::constant({2}, {1, 2});
  auto b = ad::mul(a, a);
  CHECK_FALSE(b.requires_grad());
  CHECK(b.node()->parents.empty());
  CHECK_THROWS(ad::constant({3}, {1, 2}));
  CHECK_THROWS(ad::add(a, ad::constant({3}, {1, 2, 3})));
}

TEST_CASE("gradients accumulate over shared subexpressions") {
  auto a = ad::parameter({1}, {3.0});
  auto y = ad::add(ad::mul(a, a), a);  // a^2 + a
  y.backward();
  CHECK(a.grad()[0] == doctest::Approx(7.0));
}
