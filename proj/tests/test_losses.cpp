#include "doctest.h"

#include <algorithm>
#include <numeric>

#include "gradcheck.hpp"
#include "uvp/losses.hpp"
#include "uvp/rng.hpp"

using namespace uvp;
using ad::Var;

namespace {

// Independent brute-force route for the SSI loss: plain sorting + arithmetic,
// no tape involved.
double ssi_oracle(std::vector<double> pred, std::vector<double> gt) {
  auto norm = [](std::vector<double> x) {
    std::vector<double> s = x;
    std::sort(s.begin(), s.end());
    double med = s[(s.size() - 1) / 2];  // lower middle
    double mad = 0;
    for (double v : x) mad += std::fabs(v - med);
    mad = std::max(mad / static_cast<double>(x.size()), 1e-8);
    for (double& v : x) v = (v - med) / mad;
    return x;
  };
  auto p = norm(std::move(pred));
  auto g = norm(std::move(gt));
  double acc = 0;
  for (size_t i = 0; i < p.size(); ++i) acc += std::fabs(p[i] - g[i]);
  return acc / static_cast<double>(p.size());
}

Tensor ones(std::vector<int64_t> shape) { return Tensor::full(std::move(shape), 1.0); }

}  // namespace

TEST_CASE("rectified flow loss oracles") {
  Rng r(0);
  Tensor x0 = r.randn({2, 3, 2});
  Tensor eps = r.randn({2, 3, 2});
  Tensor v = eps;
  for (int64_t i = 0; i < v.numel(); ++i) v[i] -= x0[i];

  CHECK(losses::value(losses::rectified_flow_loss(ad::constant(v), ad::constant(x0),
                                                  ad::constant(eps))) ==
        doctest::Approx(0.0).epsilon(1e-12));

  Tensor zero = Tensor::zeros(v.shape);
  CHECK(losses::value(losses::rectified_flow_loss(ad::constant(zero), ad::constant(x0),
                                                  ad::constant(x0))) ==
        doctest::Approx(0.0).epsilon(1e-12));

  Tensor voff = v;
  for (auto& x : voff.v) x += 0.7;
  CHECK(losses::value(losses::rectified_flow_loss(ad::constant(voff), ad::constant(x0),
                                                  ad::constant(eps))) ==
        doctest::Approx(0.49).epsilon(1e-12));

  Tensor bad({3}, {0, 0, 0});
  CHECK_THROWS_AS(losses::rectified_flow_loss(ad::constant(bad), ad::constant(x0),
                                              ad::constant(eps)),
                  ShapeError);
}

TEST_CASE("normal loss analytic values") {
  Tensor mask = ones({1});

  Tensor p({1, 1, 1, 3}, {1, 0, 0});
  Tensor g({1, 1, 1, 3}, {0, 1, 0});
  double v = losses::value(losses::normal_loss(ad::constant(p), ad::constant(g), mask));
  CHECK(v == doctest::Approx(std::sqrt(2.0) + 1.0).epsilon(1e-9));

  Tensor p2({1, 1, 1, 3}, {0, 0, 1});
  Tensor g2({1, 1, 1, 3}, {0, 0, -1});
  CHECK(losses::value(losses::normal_loss(ad::constant(p2), ad::constant(g2), mask)) ==
        doctest::Approx(4.0).epsilon(1e-9));

  CHECK(losses::value(losses::normal_loss(ad::constant(g2), ad::constant(g2), mask)) ==
        doctest::Approx(0.0).epsilon(1e-6));

  Tensor empty_mask = Tensor::zeros({1});
  CHECK_THROWS(losses::normal_loss(ad::constant(p), ad::constant(g), empty_mask));
}

TEST_CASE("normal loss cosine term is scale invariant, full loss is not") {
  Rng r(1);
  Tensor g = r.randn({4, 1, 1, 3});
  // normalize gt rows
  for (int64_t i = 0; i < 4; ++i) {
    double n = 0;
    for (int c = 0; c < 3; ++c) n += g[i * 3 + c] * g[i * 3 + c];
    n = std::sqrt(n);
    for (int c = 0; c < 3; ++c) g[i * 3 + c] /= n;
  }
  Tensor p = r.randn({4, 1, 1, 3});
  Tensor p_scaled = p;
  for (auto& x : p_scaled.v) x *= 3.7;
  Tensor mask = ones({4});

  auto cosine_of = [&](const Tensor& pred) {
    // loss - l2 part, computed by subtracting a pure-L2 evaluation
    Var pl = ad::constant(pred);
    Var gl = ad::constant(g);
    Var full = losses::normal_loss(pl, gl, mask);
    Var diff = ad::sub(pl, gl);
    Var l2 = ad::mean(ad::sqrt_eps(
        ad::row_sum(ad::mul(ad::reshape(diff, {4, 3}), ad::reshape(diff, {4, 3}))), 1e-16));
    return full->val[0] - l2->val[0];
  };
  CHECK(cosine_of(p) == doctest::Approx(cosine_of(p_scaled)).epsilon(1e-9));
  double full_a = losses::value(losses::normal_loss(ad::constant(p), ad::constant(g), mask));
  double full_b =
      losses::value(losses::normal_loss(ad::constant(p_scaled), ad::constant(g), mask));
  CHECK(full_a != doctest::Approx(full_b).epsilon(1e-9));
}

TEST_CASE("ssi depth loss: invariances and the pinned 2x2 case") {
  Tensor mask = ones({4});
  Tensor gt({4}, {1, 2, 3, 4});

  CHECK(losses::value(losses::ssi_depth_loss(ad::constant(gt), ad::constant(gt), mask)) ==
        doctest::Approx(0.0).epsilon(1e-12));

  // positive affine invariance
  Tensor aff({4});
  for (int64_t i = 0; i < 4; ++i) aff[i] = 2.5 * gt[i] + 0.7;
  CHECK(losses::value(losses::ssi_depth_loss(ad::constant(aff), ad::constant(gt), mask)) <
        1e-9);

  // 2x2 single-frame grid, gt {1,2,3,4}, pred {1,2,3,5}:
  //   gt: median 2, MAD 1, gt* = {-1,0,1,2}
  //   pred: median 2, MAD 1.25, pred* = {-0.8,0,0.8,2.4}
  //   loss = (0.2+0+0.2+0.4)/4 = 0.2
  Tensor pred({4}, {1, 2, 3, 5});
  double v = losses::value(losses::ssi_depth_loss(ad::constant(pred), ad::constant(gt), mask));
  CHECK(v == doctest::Approx(0.2).epsilon(1e-9));
  CHECK(v == doctest::Approx(ssi_oracle({1, 2, 3, 5}, {1, 2, 3, 4})).epsilon(1e-12));

  // random instances: tape route equals the brute-force oracle
  Rng r(5);
  for (int it = 0; it < 20; ++it) {
    std::vector<double> p(9), g(9);
    for (auto& x : p) x = r.uniform(0.05, 1.0);
    for (auto& x : g) x = r.uniform(0.05, 1.0);
    Tensor pt({9}, std::vector<double>(p));
    Tensor gtt({9}, std::vector<double>(g));
    Tensor m9 = ones({9});
    CHECK(losses::value(losses::ssi_depth_loss(ad::constant(pt), ad::constant(gtt), m9)) ==
          doctest::Approx(ssi_oracle(p, g)).epsilon(1e-10));
  }

  // both sides constant -> 0
  Tensor cp = Tensor::full({4}, 0.3), cg = Tensor::full({4}, 0.9);
  CHECK(losses::value(losses::ssi_depth_loss(ad::constant(cp), ad::constant(cg), mask)) == 0.0);
}

TEST_CASE("l2 loss oracles") {
  Rng r(2);
  Tensor g = r.randn({2, 4});
  Tensor mask = ones({8});
  CHECK(losses::value(losses::l2_loss(ad::constant(g), ad::constant(g), mask)) == 0.0);

  Tensor p = g;
  for (auto& x : p.v) x += 0.3;
  CHECK(losses::value(losses::l2_loss(ad::constant(p), ad::constant(g), mask)) ==
        doctest::Approx(0.09).epsilon(1e-12));

  // half the pixels offset by c, full mask -> c^2/2
  Tensor ph = g;
  for (int64_t i = 0; i < 4; ++i) ph[i] += 0.5;
  CHECK(losses::value(losses::l2_loss(ad::constant(ph), ad::constant(g), mask)) ==
        doctest::Approx(0.125).epsilon(1e-12));

  CHECK_THROWS(losses::l2_loss(ad::constant(p), ad::constant(g), Tensor::zeros({8})));
}

TEST_CASE("keypoint loss oracles") {
  const int64_t T = 1, K = 16;
  KeypointSet gt;
  gt.task = Task::Kp2d;
  gt.space = KeypointSpace::NormalizedImage;
  gt.coords = Tensor({T, K, 2});
  Rng r(3);
  for (auto& x : gt.coords.v) x = r.uniform(0.1, 0.9);
  gt.visibility.assign(static_cast<size_t>(T * K), 1);

  CHECK(losses::keypoint_loss(ad::constant(gt.coords), KeypointSpace::NormalizedImage, gt)
            ->val[0] == 0.0);

  Tensor p = gt.coords;
  p[0] += 0.3;
  p[1] += 0.4;
  CHECK(losses::value(losses::keypoint_loss(ad::constant(p), KeypointSpace::NormalizedImage,
                                            gt)) == doctest::Approx(0.0078125).epsilon(1e-12));

  // all joints invisible -> 0 with a warning
  KeypointSet blind = gt;
  std::fill(blind.visibility.begin(), blind.visibility.end(), 0);
  CHECK(losses::value(losses::keypoint_loss(ad::constant(p), KeypointSpace::NormalizedImage,
                                            blind)) == 0.0);

  // space-tag mismatch
  CHECK_THROWS(losses::keypoint_loss(ad::constant(p), KeypointSpace::RootRelativeCamera, gt));

  // 3d: constant offset vanishes after root-relativization of both sides
  KeypointSet gt3;
  gt3.task = Task::Kp3d;
  gt3.space = KeypointSpace::RootRelativeCamera;
  gt3.coords = r.randn({2, 4, 3});
  Tensor p3 = gt3.coords;
  for (auto& x : p3.v) x += 1.23;
  CHECK(losses::value(losses::keypoint_loss(ad::constant(p3),
                                            KeypointSpace::RootRelativeCamera, gt3)) ==
        doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("losses are permutation equivariant under identical pixel shuffles") {
  Rng r(6);
  const int64_t n = 12;
  Tensor p = r.rand_uniform({n}, 0.1, 1.0);
  Tensor g = r.rand_uniform({n}, 0.1, 1.0);
  Tensor mask = ones({n});

  std::vector<int64_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  for (int64_t i = n - 1; i > 0; --i) std::swap(perm[i], perm[r.uniform_int(i + 1)]);
  Tensor ps({n}), gs({n});
  for (int64_t i = 0; i < n; ++i) {
    ps[i] = p[perm[i]];
    gs[i] = g[perm[i]];
  }

  CHECK(losses::value(losses::ssi_depth_loss(ad::constant(p), ad::constant(g), mask)) ==
        doctest::Approx(losses::value(
            losses::ssi_depth_loss(ad::constant(ps), ad::constant(gs), mask))).epsilon(1e-12));
  CHECK(losses::value(losses::l2_loss(ad::constant(p), ad::constant(g), mask)) ==
        doctest::Approx(losses::value(losses::l2_loss(ad::constant(ps), ad::constant(gs),
                                                      mask))).epsilon(1e-12));
}

TEST_CASE("loss gradients match finite differences") {
  Rng r(7);
  const double tol = 1e-4;

  for (int inst = 0; inst < 5; ++inst) {
    Tensor mask = ones({8});

    auto rf = gradcheck::run(
        [](const std::vector<Var>& in) {
          return losses::rectified_flow_loss(in[0], in[1], in[2]);
        },
        {r.randn({2, 2, 2}), r.randn({2, 2, 2}), r.randn({2, 2, 2})}, tol);
    INFO("rf worst: " << rf.worst);
    CHECK(rf.max_rel_err < tol);

    Tensor gn = r.randn({2, 2, 2, 3});
    for (int64_t i = 0; i < 8; ++i) {
      double nn = 0;
      for (int c = 0; c < 3; ++c) nn += gn[i * 3 + c] * gn[i * 3 + c];
      nn = std::sqrt(nn);
      for (int c = 0; c < 3; ++c) gn[i * 3 + c] /= nn;
    }
    Tensor pn = r.randn({2, 2, 2, 3});
    for (auto& x : pn.v) x += (x >= 0 ? 0.3 : -0.3);
    auto nl = gradcheck::run(
        [&mask](const std::vector<Var>& in) { return losses::normal_loss(in[0], in[1], mask); },
        {pn, gn}, tol);
    INFO("normal worst: " << nl.worst);
    CHECK(nl.max_rel_err < tol);

    // ssi: well-separated values keep the median/sign pattern stable under fd
    Tensor pd({8}), gd({8});
    std::vector<double> vals(8);
    for (auto& v : vals) v = r.uniform(0.1, 1.0);
    std::sort(vals.begin(), vals.end());
    for (int64_t i = 0; i < 8; ++i) pd[i] = vals[static_cast<size_t>(i)] + 0.002 * i;
    for (int64_t i = 0; i < 8; ++i) gd[i] = r.uniform(0.1, 1.0);
    // fd step 1e-6 keeps perturbations inside the median/sign cell; the 1e-5
    // denominator floor absorbs pure fd cancellation noise at zero gradients
    auto sl = gradcheck::run(
        [&mask](const std::vector<Var>& in) {
          return losses::ssi_depth_loss(in[0], in[1], mask);
        },
        {pd, gd}, tol, 0, 1e-6, 1e-5);
    INFO("ssi worst: " << sl.worst);
    CHECK(sl.max_rel_err < tol);

    auto l2 = gradcheck::run(
        [&mask](const std::vector<Var>& in) { return losses::l2_loss(in[0], in[1], mask); },
        {r.randn({2, 4}), r.randn({2, 4})}, tol);
    CHECK(l2.max_rel_err < tol);

    KeypointSet gt3;
    gt3.task = Task::Kp3d;
    gt3.space = KeypointSpace::RootRelativeCamera;
    gt3.coords = r.randn({2, 3, 3});
    auto kp = gradcheck::run(
        [&gt3](const std::vector<Var>& in) {
          return losses::keypoint_loss(in[0], KeypointSpace::RootRelativeCamera, gt3);
        },
        {r.randn({2, 3, 3})}, tol);
    CHECK(kp.max_rel_err < tol);
  }
}
