#include "doctest.h"

#include "gradcheck.hpp"
#include "uvp/autodiff.hpp"
#include "uvp/rng.hpp"

using namespace uvp;
using ad::Var;

namespace {

Tensor randt(Rng& r, std::vector<int64_t> shape, double lo = -1.5, double hi = 1.5) {
  return r.rand_uniform(std::move(shape), lo, hi);
}

void expect_grads_ok(const gradcheck::Report& rep, double tol = 1e-4) {
  INFO("worst: " << rep.worst);
  CHECK(rep.max_rel_err < tol);
  CHECK(rep.checked > 0);
}

}  // namespace

TEST_CASE("elementwise op gradients") {
  Rng r(1);
  auto rep = gradcheck::run(
      [](const std::vector<Var>& in) {
        Var y = ad::mul(ad::add(in[0], in[1]), ad::sub(in[0], ad::scale(in[1], 0.5)));
        y = ad::silu(y);
        y = ad::sigmoid(y);
        return ad::mean(y);
      },
      {randt(r, {3, 4}), randt(r, {3, 4})});
  expect_grads_ok(rep);
}

TEST_CASE("abs sqrt clamp gradients away from kinks") {
  Rng r(2);
  Tensor a = randt(r, {10});
  for (auto& x : a.v) x += (x >= 0 ? 0.5 : -0.5);  // keep away from 0
  auto rep = gradcheck::run(
      [](const std::vector<Var>& in) {
        Var y = ad::abs(in[0]);
        y = ad::sqrt_eps(y, 1e-9);
        y = ad::clamp_min(y, 0.4);
        return ad::sum(y);
      },
      {a});
  expect_grads_ok(rep);
}

TEST_CASE("scalar broadcast gradients") {
  Rng r(3);
  auto rep = gradcheck::run(
      [](const std::vector<Var>& in) {
        Var s = ad::mean(in[1]);
        Var y = ad::div_scalar(ad::sub_scalar(in[0], s), ad::add_const(ad::abs(s), 2.0));
        y = ad::mul_scalar(y, s);
        return ad::mean(ad::mul(y, y));
      },
      {randt(r, {4, 3}), randt(r, {5})});
  expect_grads_ok(rep);
}

TEST_CASE("matmul gradients") {
  Rng r(4);
  auto rep = gradcheck::run(
      [](const std::vector<Var>& in) {
        return ad::mean(ad::mul(ad::matmul(in[0], in[1]), ad::matmul(in[0], in[1])));
      },
      {randt(r, {3, 5}), randt(r, {5, 4})});
  expect_grads_ok(rep);
}

TEST_CASE("row ops gradients") {
  Rng r(5);
  auto rep = gradcheck::run(
      [](const std::vector<Var>& in) {
        Var y = ad::add_rowvec(in[0], in[1]);
        y = ad::mul_rowvec(y, in[2]);
        Var g = ad::gather_rows(y, {2, 0, 2});
        Var c = ad::concat_rows({g, ad::slice_rows(y, 1, 3)});
        Var rs = ad::row_sum(c);
        return ad::mean(ad::mul(rs, rs));
      },
      {randt(r, {4, 3}), randt(r, {3}), randt(r, {3})});
  expect_grads_ok(rep);
}

TEST_CASE("layer_norm and softmax gradients") {
  Rng r(6);
  auto rep = gradcheck::run(
      [](const std::vector<Var>& in) {
        Var y = ad::layer_norm(in[0]);
        Var s = ad::softmax_rows(y);
        return ad::mean(ad::mul(s, ad::add_const(y, 0.3)));
      },
      {randt(r, {4, 6})});
  expect_grads_ok(rep);
}

TEST_CASE("masked softmax excludes entries exactly") {
  Tensor x({1, 4}, {0.3, 100.0, 0.7, -0.2});
  Tensor mask({1, 4}, {0.0, -std::numeric_limits<double>::infinity(), 0.0, 0.0});
  Var s = ad::softmax_rows(ad::leaf(x, false), &mask);
  CHECK(s->val[1] == 0.0);
  // compare to softmax over remaining entries
  Tensor x3({1, 3}, {0.3, 0.7, -0.2});
  Var s3 = ad::softmax_rows(ad::leaf(x3, false));
  CHECK(s->val[0] == doctest::Approx(s3->val[0]).epsilon(1e-15));
  CHECK(s->val[2] == doctest::Approx(s3->val[1]).epsilon(1e-15));
}

TEST_CASE("rope rotation gradients for tokens and angles") {
  Rng r(7);
  auto rep = gradcheck::run(
      [](const std::vector<Var>& in) {
        Var y = ad::rope_rotate(in[0], in[1]);
        return ad::mean(ad::mul(y, ad::add_const(in[0], 0.1)));
      },
      {randt(r, {3, 8}), randt(r, {3, 4}, -3.0, 3.0)});
  expect_grads_ok(rep);
}

TEST_CASE("rope preserves norms") {
  Rng r(8);
  Tensor x = randt(r, {5, 12});
  Tensor ang = randt(r, {5, 6}, -6.0, 6.0);
  Var y = ad::rope_rotate(ad::leaf(x, false), ad::leaf(ang, false));
  for (int64_t i = 0; i < 5; ++i) {
    double n0 = 0, n1 = 0;
    for (int64_t j = 0; j < 12; ++j) {
      n0 += x[i * 12 + j] * x[i * 12 + j];
      n1 += y->val[i * 12 + j] * y->val[i * 12 + j];
    }
    CHECK(std::sqrt(n0) == doctest::Approx(std::sqrt(n1)).epsilon(1e-12));
  }
}

TEST_CASE("conv3d gradients: strided and padded") {
  Rng r(9);
  ad::Conv3dSpec sp;
  sp.kernel = {3, 3, 3};
  sp.stride = {2, 2, 2};
  sp.pad = {1, 1, 1};
  auto rep = gradcheck::run(
      [&sp](const std::vector<Var>& in) {
        Var y = ad::conv3d(in[0], in[1], in[2], sp);
        return ad::mean(ad::mul(y, y));
      },
      {randt(r, {5, 4, 4, 2}), randt(r, {3, 3, 3, 2, 3}, -0.5, 0.5), randt(r, {3})});
  expect_grads_ok(rep);
}

TEST_CASE("conv3d shape arithmetic") {
  Rng r(10);
  ad::Conv3dSpec sp;
  sp.stride = {2, 2, 2};
  Var x = ad::leaf(randt(r, {17, 8, 8, 1}), false);
  Var w = ad::leaf(randt(r, {3, 3, 3, 1, 2}), false);
  Var b = ad::leaf(Tensor({2}), false);
  Var y = ad::conv3d(x, w, b, sp);
  CHECK(y->val.shape == std::vector<int64_t>{9, 4, 4, 2});
}

TEST_CASE("upsampling gradients") {
  Rng r(11);
  auto rep = gradcheck::run(
      [](const std::vector<Var>& in) {
        Var y = ad::upsample_time_linear(in[0]);
        y = ad::upsample_space_nearest2(y);
        return ad::mean(ad::mul(y, y));
      },
      {randt(r, {3, 2, 2, 2})});
  expect_grads_ok(rep);

  Var x = ad::leaf(randt(r, {5, 4, 4, 3}), false);
  CHECK(ad::upsample_time_linear(x)->val.shape == std::vector<int64_t>{9, 4, 4, 3});
  CHECK(ad::upsample_space_nearest2(x)->val.shape == std::vector<int64_t>{5, 8, 8, 3});
}

TEST_CASE("reductions and gather") {
  Rng r(12);
  auto rep = gradcheck::run(
      [](const std::vector<Var>& in) {
        Tensor w = Tensor::full({6}, 0.0);
        w[1] = 1.0;
        w[4] = 1.0;
        Var a = ad::dot_const(in[0], w);
        Var b = ad::gather_index(in[0], 3);
        return ad::add(ad::mul(a, a), ad::mul(b, a));
      },
      {randt(r, {6})});
  expect_grads_ok(rep);
}

TEST_CASE("graph reuse accumulates gradients through shared nodes") {
  // f(x) = sum(x*x) computed via the same node twice
  Tensor x({3}, {1.0, 2.0, 3.0});
  Var v = ad::leaf(x, true);
  Var y = ad::sum(ad::mul(v, v));
  ad::backward(y);
  CHECK(v->grad[0] == doctest::Approx(2.0));
  CHECK(v->grad[1] == doctest::Approx(4.0));
  CHECK(v->grad[2] == doctest::Approx(6.0));
}

TEST_CASE("backward on frozen leaves is skipped") {
  Tensor x({2}, {1.0, 2.0});
  Var v = ad::leaf(x, false);
  Var y = ad::sum(ad::mul(v, v));
  CHECK_FALSE(y->needs_grad);
  ad::backward(y);  // no-op
  CHECK_FALSE(v->grad_alloc);
}

TEST_CASE("bilinear upsampling gradients and interpolation") {
  Rng r(13);
  auto rep = gradcheck::run(
      [](const std::vector<Var>& in) {
        Var y = ad::upsample_space_bilinear2(in[0]);
        return ad::mean(ad::mul(y, y));
      },
      {randt(r, {2, 3, 3, 2})});
  expect_grads_ok(rep);

  // constant fields stay constant
  Var c = ad::upsample_space_bilinear2(ad::leaf(Tensor::full({1, 2, 2, 1}, 0.7), false));
  for (double v : c->val.v) CHECK(v == doctest::Approx(0.7));
  CHECK(c->val.shape == std::vector<int64_t>{1, 4, 4, 1});
}
