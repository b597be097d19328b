#include <doctest.h>

#include <cmath>

#include "flag/autodiff.hpp"
#include "flag/errors.hpp"
#include "../support/gradcheck.hpp"

using namespace flag;
using ad::Var;
using flag::testing::grad_check;
using flag::testing::random_const;
using flag::testing::random_param;

namespace {

// Contracts an arbitrary tensor with fixed random weights so upstream
// gradients are generic rather than all ones.
Var probe(const Var& y, std::uint64_t seed = 99) {
  Rng rng(seed);
  return ad::sum_all(ad::mul(y, random_const(y.shape(), rng)));
}

void expect_grads(const std::function<Var()>& f, const std::vector<std::pair<std::string, Var>>& ps,
                  double tol = 1e-6) {
  auto r = grad_check(f, ps);
  INFO(r.worst);
  CHECK(r.checked > 0);
  CHECK(r.max_rel < tol);
}

}  // namespace

TEST_CASE("elementwise ops broadcast and differentiate") {
  Rng rng(1);
  Var a = random_param({2, 3, 4}, rng), b = random_param({4}, rng), c = random_param({2, 1, 4}, rng);
  Var s = random_param({1}, rng);
  expect_grads([&] { return probe(ad::add(a, b)); }, {{"a", a}, {"b", b}});
  expect_grads([&] { return probe(ad::sub(a, c)); }, {{"a", a}, {"c", c}});
  expect_grads([&] { return probe(ad::mul(c, a)); }, {{"a", a}, {"c", c}});
  expect_grads([&] { return probe(ad::mul(s, a)); }, {{"a", a}, {"s", s}});
  Var pos = Var::parameter({2, 3, 4}, std::vector<double>(24, 0.0));
  for (std::size_t i = 0; i < 24; ++i) pos.mutable_data()[i] = 0.5 + 0.1 * static_cast<double>(i);
  expect_grads([&] { return probe(ad::div(a, pos)); }, {{"a", a}, {"pos", pos}});
  expect_grads([&] { return probe(ad::sqrt(pos)); }, {{"pos", pos}});
}

TEST_CASE("unary activations") {
  Rng rng(2);
  Var a = random_param({3, 5}, rng);
  expect_grads([&] { return probe(ad::gelu(a)); }, {{"a", a}});
  expect_grads([&] { return probe(ad::silu(a)); }, {{"a", a}});
  expect_grads([&] { return probe(ad::exp(a)); }, {{"a", a}});
  expect_grads([&] { return probe(ad::square(a)); }, {{"a", a}});
  expect_grads([&] { return probe(ad::abs(a)); }, {{"a", a}});
  CHECK(ad::gelu(Var::scalar(0.0)).item() == doctest::Approx(0.0));
  CHECK(ad::gelu(Var::scalar(1.0)).item() == doctest::Approx(0.8413447460685429));
  CHECK(ad::silu(Var::scalar(1.0)).item() == doctest::Approx(1.0 / (1.0 + std::exp(-1.0))));
}

TEST_CASE("matmul, bmm, permute, reshape") {
  Rng rng(3);
  Var x = random_param({2, 3, 4}, rng), w = random_param({4, 5}, rng);
  expect_grads([&] { return probe(ad::matmul(x, w)); }, {{"x", x}, {"w", w}});
  Var p = random_param({2, 3, 4}, rng), q = random_param({2, 4, 2}, rng);
  expect_grads([&] { return probe(ad::bmm(p, q)); }, {{"p", p}, {"q", q}});
  expect_grads([&] { return probe(ad::permute(p, {2, 0, 1})); }, {{"p", p}});
  expect_grads([&] { return probe(ad::transpose_last2(p)); }, {{"p", p}});
  expect_grads([&] { return probe(ad::reshape(p, {6, 4})); }, {{"p", p}});

  // matmul value against a manual loop
  Var y = ad::matmul(x, w);
  double manual = 0;
  for (std::size_t k = 0; k < 4; ++k) manual += x.data()[1 * 12 + 2 * 4 + k] * w.data()[k * 5 + 3];
  CHECK(y.data()[1 * 15 + 2 * 5 + 3] == doctest::Approx(manual).epsilon(1e-14));

  Var pp = ad::permute(p, {2, 0, 1});  // [4,2,3]
  CHECK(pp.data()[3 * 6 + 1 * 3 + 2] == p.data()[1 * 12 + 2 * 4 + 3]);
}

TEST_CASE("reductions, softmax and layer norm") {
  Rng rng(4);
  Var a = random_param({2, 3, 4}, rng);
  expect_grads([&] { return probe(ad::sum_last(a)); }, {{"a", a}});
  expect_grads([&] { return probe(ad::mean_last(a)); }, {{"a", a}});
  expect_grads([&] { return probe(ad::mean_axis(a, 1)); }, {{"a", a}});
  expect_grads([&] { return probe(ad::softmax_last(a)); }, {{"a", a}});
  expect_grads([&] { return probe(ad::layer_norm_last(a, 1e-5)); }, {{"a", a}});
  expect_grads([&] { return ad::mean_all(ad::square(a)); }, {{"a", a}});

  Var sm = ad::softmax_last(a);
  for (std::size_t r = 0; r < 6; ++r) {
    double s = 0;
    for (std::size_t j = 0; j < 4; ++j) s += sm.data()[r * 4 + j];
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  }
  Var ln = ad::layer_norm_last(a, 1e-5);
  for (std::size_t r = 0; r < 6; ++r) {
    double m = 0, v = 0;
    for (std::size_t j = 0; j < 4; ++j) m += ln.data()[r * 4 + j] / 4;
    for (std::size_t j = 0; j < 4; ++j) v += std::pow(ln.data()[r * 4 + j] - m, 2) / 4;
    CHECK(std::abs(m) < 1e-12);
    CHECK(v == doctest::Approx(1.0).epsilon(1e-4));
  }
}

TEST_CASE("structural ops") {
  Rng rng(5);
  Var a = random_param({2, 3}, rng), b = random_param({2, 2}, rng);
  expect_grads([&] { return probe(ad::concat_last({a, b})); }, {{"a", a}, {"b", b}});
  expect_grads([&] { return probe(ad::slice_last(a, 1, 2)); }, {{"a", a}});
  Var m = random_param({4, 3}, rng);
  expect_grads([&] { return probe(ad::take_rows(m, {3, 0, 3})); }, {{"m", m}});
  Var t = ad::take_rows(m, {2});
  CHECK(t.data()[1] == m.data()[7]);
}

TEST_CASE("gradients accumulate through shared subexpressions") {
  Var x = Var::parameter({1}, {3.0});
  Var y = ad::mul(x, x);
  Var z = ad::add(y, y);  // 2x²
  ad::backward(z);
  CHECK(x.grad()[0] == doctest::Approx(12.0));
}

TEST_CASE("shape contracts") {
  Var a = Var::constant({2, 3}), b = Var::constant({4, 5});
  CHECK_THROWS_AS(ad::matmul(a, b), ContractError);
  CHECK_THROWS_AS(ad::add(a, Var::constant({2})), ContractError);
  CHECK_THROWS_AS(ad::reshape(a, {5}), ContractError);
}

TEST_CASE("fused multi-head attention matches the composed ops") {
  Rng rng(8);
  const std::size_t b = 2, lq = 4, lk = 5, h = 2, dh = 3, d = h * dh;
  Var q = random_param({b, lq, d}, rng), k = random_param({b, lk, d}, rng), v = random_param({b, lk, d}, rng);
  const double scale = 0.7;
  auto heads = [&](const Var& x, std::size_t l) {
    return ad::permute(ad::reshape(x, {b, l, h, dh}), {0, 2, 1, 3});
  };
  Var ref = ad::bmm(ad::softmax_last(ad::mul_scalar(ad::bmm(heads(q, lq), ad::transpose_last2(heads(k, lk))), scale)),
                    heads(v, lk));
  ref = ad::reshape(ad::permute(ref, {0, 2, 1, 3}), {b, lq, d});
  Var got = ad::multihead_attention(q, k, v, h, scale);
  REQUIRE(got.shape() == ref.shape());
  for (std::size_t i = 0; i < got.size(); ++i) CHECK(std::abs(got.data()[i] - ref.data()[i]) < 1e-13);
  expect_grads([&] { return probe(ad::multihead_attention(q, k, v, h, scale)); }, {{"q", q}, {"k", k}, {"v", v}});
  CHECK_THROWS_AS(ad::multihead_attention(q, k, v, 4, scale), ContractError);
  CHECK_THROWS_AS(ad::multihead_attention(q, q, v, h, scale), ContractError);
}

TEST_CASE("no-grad guard suppresses graph recording") {
  Var x = Var::parameter({2}, {1.0, 2.0});
  {
    ad::NoGradGuard guard;
    CHECK_FALSE(ad::grad_enabled());
    Var y = ad::mul(x, x);
    CHECK_FALSE(y.requires_grad());
    CHECK(y.data()[1] == 4.0);
  }
  CHECK(ad::grad_enabled());
  CHECK(ad::mul(x, x).requires_grad());
}
