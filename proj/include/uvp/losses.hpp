#pragma once

#include <algorithm>
#include <cstdio>
#include <numeric>
#include <vector>

#include "uvp/autodiff.hpp"
#include "uvp/tasks.hpp"
#include "uvp/tensor.hpp"

// Training objectives. Everything is built on the tape so the same code path
// serves optimization and the finite-difference verification suite. Masks are
// 0/1 tensors over pixels.
namespace uvp::losses {

using ad::Var;

namespace detail {

inline std::vector<int64_t> mask_indices(const Tensor& mask) {
  std::vector<int64_t> idx;
  for (int64_t i = 0; i < mask.numel(); ++i)
    if (mask[i] > 0.5) idx.push_back(i);
  return idx;
}

// Lower-middle median: index into the ORIGINAL vector of the sorted element
// at position (n-1)/2 (even counts take the lower of the two middles).
inline int64_t median_index(const Tensor& x) {
  std::vector<int64_t> order(static_cast<size_t>(x.numel()));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&x](int64_t a, int64_t b) { return x[a] < x[b]; });
  return order[static_cast<size_t>((x.numel() - 1) / 2)];
}

// (x - median(x)) / max(MAD(x), 1e-8), all on the tape.
inline Var median_mad_normalize(const Var& x) {
  int64_t med_idx = median_index(x->val);
  Var med = ad::gather_index(x, med_idx);
  Var centered = ad::sub_scalar(x, med);
  Var mad = ad::clamp_min(ad::mean(ad::abs(centered)), 1e-8);
  return ad::div_scalar(centered, mad);
}

}  // namespace detail

// mean squared error between v_pred and (eps - x0)
inline Var rectified_flow_loss(const Var& v_pred, const Var& x0, const Var& eps) {
  check_shape(v_pred->val.same_shape(x0->val) && v_pred->val.same_shape(eps->val),
              "rectified_flow_loss: shape mismatch");
  Var d = ad::sub(v_pred, ad::sub(eps, x0));
  return ad::mean(ad::mul(d, d));
}

// Per masked pixel: ||y - y_hat||_2 + (1 - cos(y, y_hat)); vectors are used
// raw in the L2 term, the cosine denominator carries the 1e-8 guard.
inline Var normal_loss(const Var& pred, const Var& gt, const Tensor& mask) {
  check_shape(pred->val.same_shape(gt->val), "normal_loss: shape mismatch");
  check_shape(pred->val.numel() == mask.numel() * 3,
              "normal_loss: mask must cover pixels of a [*,3] field");
  auto idx = detail::mask_indices(mask);
  check(!idx.empty(), "normal_loss: empty mask");

  int64_t n_pix = mask.numel();
  Var p = ad::gather_rows(ad::reshape(pred, {n_pix, 3}), idx);
  Var g = ad::gather_rows(ad::reshape(gt, {n_pix, 3}), idx);

  Var diff = ad::sub(p, g);
  Var l2 = ad::sqrt_eps(ad::row_sum(ad::mul(diff, diff)), 1e-16);

  Var dot = ad::row_sum(ad::mul(p, g));
  Var pn = ad::sqrt_eps(ad::row_sum(ad::mul(p, p)), 0.0);
  Var gn = ad::sqrt_eps(ad::row_sum(ad::mul(g, g)), 0.0);
  Var denom = ad::clamp_min(ad::mul(pn, gn), 1e-8);
  Var cos_term = ad::add_const(ad::neg(ad::div(dot, denom)), 1.0);

  return ad::mean(ad::add(l2, cos_term));
}

// Scale-and-shift-invariant disparity loss: both sides are normalized by
// their own median and mean absolute deviation over the masked video volume,
// then the absolute difference is averaged per element.
inline Var ssi_depth_loss(const Var& pred_disp, const Var& gt_disp, const Tensor& mask) {
  check_shape(pred_disp->val.same_shape(gt_disp->val), "ssi_depth_loss: shape mismatch");
  check_shape(pred_disp->val.numel() == mask.numel(), "ssi_depth_loss: mask shape mismatch");
  auto idx = detail::mask_indices(mask);
  check(!idx.empty(), "ssi_depth_loss: empty mask");

  int64_t n = mask.numel();
  Var p = ad::reshape(ad::gather_rows(ad::reshape(pred_disp, {n, 1}), idx),
                      {static_cast<int64_t>(idx.size())});
  Var g = ad::reshape(ad::gather_rows(ad::reshape(gt_disp, {n, 1}), idx),
                      {static_cast<int64_t>(idx.size())});

  auto span = [](const Tensor& t) {
    auto [mn, mx] = std::minmax_element(t.v.begin(), t.v.end());
    return *mx - *mn;
  };
  if (span(p->val) <= 0.0 && span(g->val) <= 0.0) return ad::constant(0.0);

  Var ps = detail::median_mad_normalize(p);
  Var gs = detail::median_mad_normalize(g);
  return ad::mean(ad::abs(ad::sub(ps, gs)));
}

// masked mean squared error
inline Var l2_loss(const Var& pred, const Var& gt, const Tensor& mask) {
  check_shape(pred->val.same_shape(gt->val), "l2_loss: shape mismatch");
  double count = 0.0;
  for (double x : mask.v) count += (x > 0.5) ? 1.0 : 0.0;
  check(count > 0, "l2_loss: empty mask");

  Tensor w = Tensor::zeros(pred->val.shape);
  int64_t per = pred->val.numel() / mask.numel();
  check_shape(per * mask.numel() == pred->val.numel(),
              "l2_loss: mask does not tile the prediction");
  for (int64_t i = 0; i < mask.numel(); ++i)
    if (mask[i] > 0.5)
      for (int64_t c = 0; c < per; ++c) w[i * per + c] = 1.0;

  Var d = ad::sub(pred, gt);
  return ad::scale(ad::dot_const(ad::mul(d, d), w), 1.0 / (count * static_cast<double>(per)));
}

// Mean squared coordinate error. 2d averages over coordinates of visible
// joints; 3d root-relativizes both sides (pelvis row = joint 0) and averages
// over everything.
inline Var keypoint_loss(const Var& pred_coords, KeypointSpace pred_space,
                         const KeypointSet& gt) {
  check(pred_space == gt.space, "keypoint_loss: space-tag mismatch");
  const Tensor& gc = gt.coords;
  check_shape(pred_coords->val.same_shape(gc), "keypoint_loss: shape mismatch");
  check_shape(gc.rank() == 3, "keypoint_loss expects [T,K,C]");
  int64_t T = gc.dim(0), K = gc.dim(1), C = gc.dim(2);

  if (gt.task == Task::Kp2d) {
    check_shape(C == 2, "kp2d coords must be [T,K,2]");
    check_shape(static_cast<int64_t>(gt.visibility.size()) == T * K,
                "kp2d visibility size mismatch");
    double count = 0;
    Tensor w = Tensor::zeros({T, K, C});
    for (int64_t i = 0; i < T * K; ++i)
      if (gt.visibility[static_cast<size_t>(i)]) {
        w[i * C] = 1.0;
        w[i * C + 1] = 1.0;
        count += 2.0;
      }
    if (count == 0) {
      std::fprintf(stderr, "[losses] warning: kp2d batch with no visible joints, loss = 0\n");
      return ad::constant(0.0);
    }
    Var d = ad::sub(pred_coords, ad::constant(gc));
    return ad::scale(ad::dot_const(ad::mul(d, d), w), 1.0 / count);
  }

  check(gt.task == Task::Kp3d, "keypoint_loss: not a keypoint task");
  check(gt.space == KeypointSpace::RootRelativeCamera ||
            gt.space == KeypointSpace::NormalizedImage,
        "keypoint_loss: bad space tag");
  check_shape(C == 3, "kp3d coords must be [T,K,3]");

  // root-relativize both sides
  std::vector<int64_t> pelvis_rows;
  pelvis_rows.reserve(static_cast<size_t>(T * K));
  for (int64_t f = 0; f < T; ++f)
    for (int64_t k = 0; k < K; ++k) pelvis_rows.push_back(f * K);
  Var pr = ad::reshape(pred_coords, {T * K, 3});
  Var p_rel = ad::sub(pr, ad::gather_rows(pr, pelvis_rows));

  Tensor g_rel({T * K, 3});
  for (int64_t f = 0; f < T; ++f)
    for (int64_t k = 0; k < K; ++k)
      for (int64_t c = 0; c < 3; ++c)
        g_rel[(f * K + k) * 3 + c] = gc[(f * K + k) * 3 + c] - gc[f * K * 3 + c];

  Var d = ad::sub(p_rel, ad::constant(g_rel));
  return ad::mean(ad::mul(d, d));
}

inline double keypoint_loss(const KeypointSet& pred, const KeypointSet& gt) {
  check(pred.task == gt.task, "keypoint_loss: task mismatch");
  check_shape(pred.coords.dim(0) == gt.coords.dim(0) && pred.coords.dim(1) == gt.coords.dim(1),
              "keypoint_loss: T/K mismatch");
  return keypoint_loss(ad::constant(pred.coords), pred.space, gt)->val[0];
}

// Convenience evaluation without gradients.
inline double value(const Var& v) { return v->val[0]; }

}  // namespace uvp::losses
