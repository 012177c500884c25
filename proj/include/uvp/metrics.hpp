#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "uvp/datagen.hpp"
#include "uvp/modality.hpp"
#include "uvp/tasks.hpp"
#include "uvp/tensor.hpp"

// Evaluation metrics. Pure double-precision functions, no tape.
namespace uvp::metrics {

// ---------------------------------------------------------------------------
// surface normals

struct AngularStats {
  double mean_deg = 0, median_deg = 0;
  double pct_11_25 = 0, pct_22_5 = 0, pct_30 = 0;
};

// Per-pixel arccos of the clamped inner product. Predictions are renormalized
// first; zero-norm predictions count as 90 degrees.
inline AngularStats angular_error(const Tensor& pred_n, const Tensor& gt_n,
                                  const Tensor& mask) {
  check_shape(pred_n.same_shape(gt_n), "angular_error: shape mismatch");
  check_shape(pred_n.numel() == mask.numel() * 3, "angular_error: mask shape mismatch");
  std::vector<double> errs;
  errs.reserve(static_cast<size_t>(mask.numel()));
  for (int64_t i = 0; i < mask.numel(); ++i) {
    if (mask[i] <= 0.5) continue;
    double px = pred_n[i * 3], py = pred_n[i * 3 + 1], pz = pred_n[i * 3 + 2];
    double pn = std::sqrt(px * px + py * py + pz * pz);
    double deg;
    if (pn < 1e-12) {
      deg = 90.0;
    } else {
      double dot = (px * gt_n[i * 3] + py * gt_n[i * 3 + 1] + pz * gt_n[i * 3 + 2]) / pn;
      deg = std::acos(std::clamp(dot, -1.0, 1.0)) * (180.0 / 3.14159265358979323846);
    }
    errs.push_back(deg);
  }
  check(!errs.empty(), "angular_error: empty mask");

  AngularStats s;
  double acc = 0;
  int64_t c11 = 0, c22 = 0, c30 = 0;
  for (double e : errs) {
    acc += e;
    if (e <= 11.25) ++c11;
    if (e <= 22.5) ++c22;
    if (e <= 30.0) ++c30;
  }
  double n = static_cast<double>(errs.size());
  s.mean_deg = acc / n;
  std::vector<double> sorted = errs;
  std::sort(sorted.begin(), sorted.end());
  s.median_deg = sorted[(sorted.size() - 1) / 2];  // lower-middle convention
  s.pct_11_25 = 100.0 * c11 / n;
  s.pct_22_5 = 100.0 * c22 / n;
  s.pct_30 = 100.0 * c30 / n;
  return s;
}

// ---------------------------------------------------------------------------
// depth

struct DepthMetrics {
  double rmse = 0, absrel = 0;
  double align_a = 1, align_b = 0;
};

// Least-squares scale-and-shift alignment of predicted disparity to ground
// truth disparity over the masked volume, then errors in metric depth.
inline DepthMetrics depth_metrics(const Tensor& pred_disp, const Tensor& gt_depth,
                                  const Tensor& mask, bool align = true) {
  check_shape(pred_disp.same_shape(gt_depth), "depth_metrics: shape mismatch");
  check_shape(pred_disp.numel() == mask.numel(), "depth_metrics: mask shape mismatch");

  double sp = 0, spp = 0, sg = 0, spg = 0, n = 0;
  for (int64_t i = 0; i < mask.numel(); ++i) {
    if (mask[i] <= 0.5) continue;
    check(gt_depth[i] > 0, "depth_metrics: gt depth must be positive on the mask");
    double p = pred_disp[i], g = 1.0 / gt_depth[i];
    sp += p;
    spp += p * p;
    sg += g;
    spg += p * g;
    n += 1;
  }
  check(n > 0, "depth_metrics: empty mask");

  DepthMetrics out;
  if (align) {
    double det = n * spp - sp * sp;
    if (std::fabs(det) < 1e-12 * std::max(1.0, n * spp)) {
      out.align_a = 1.0;  // constant prediction: shift-only fallback
      out.align_b = (sg - sp) / n;
    } else {
      out.align_a = (n * spg - sp * sg) / det;
      out.align_b = (sg - out.align_a * sp) / n;
    }
  }

  double se = 0, sr = 0;
  for (int64_t i = 0; i < mask.numel(); ++i) {
    if (mask[i] <= 0.5) continue;
    double d = std::max(out.align_a * pred_disp[i] + out.align_b, 1e-6);
    double zhat = 1.0 / d;
    double z = gt_depth[i];
    se += (zhat - z) * (zhat - z);
    sr += std::fabs(zhat - z) / z;
  }
  out.rmse = std::sqrt(se / n);
  out.absrel = sr / n;
  return out;
}

// ---------------------------------------------------------------------------
// matting

struct MattingMetrics {
  double mad = 0, mse = 0, grad = 0, conn = 0;
  std::optional<double> dtssd;
};

namespace detail {

// separable correlation with clamped borders, one frame [H,W]
inline std::vector<double> correlate2d(const double* img, int64_t H, int64_t W,
                                       const std::vector<double>& krow,
                                       const std::vector<double>& kcol) {
  int64_t r = static_cast<int64_t>(krow.size() / 2);
  std::vector<double> tmp(static_cast<size_t>(H * W)), out(static_cast<size_t>(H * W));
  for (int64_t y = 0; y < H; ++y)
    for (int64_t x = 0; x < W; ++x) {
      double acc = 0;
      for (int64_t i = -r; i <= r; ++i) {
        int64_t xx = std::clamp(x + i, int64_t{0}, W - 1);
        acc += krow[static_cast<size_t>(i + r)] * img[y * W + xx];
      }
      tmp[static_cast<size_t>(y * W + x)] = acc;
    }
  for (int64_t y = 0; y < H; ++y)
    for (int64_t x = 0; x < W; ++x) {
      double acc = 0;
      for (int64_t i = -r; i <= r; ++i) {
        int64_t yy = std::clamp(y + i, int64_t{0}, H - 1);
        acc += kcol[static_cast<size_t>(i + r)] * tmp[static_cast<size_t>(yy * W + x)];
      }
      out[static_cast<size_t>(y * W + x)] = acc;
    }
  return out;
}

// gaussian-derivative gradient magnitude, sigma 1.4, radius 5
inline std::vector<double> grad_magnitude(const double* img, int64_t H, int64_t W) {
  const double sigma = 1.4;
  const int64_t r = 5;
  std::vector<double> g(static_cast<size_t>(2 * r + 1)), dg(static_cast<size_t>(2 * r + 1));
  double gsum = 0, dnorm = 0;
  for (int64_t i = -r; i <= r; ++i) {
    double e = std::exp(-0.5 * (i * i) / (sigma * sigma));
    g[static_cast<size_t>(i + r)] = e;
    dg[static_cast<size_t>(i + r)] = static_cast<double>(i) * e;
    gsum += e;
    dnorm += static_cast<double>(i * i) * e;
  }
  for (auto& v : g) v /= gsum;
  for (auto& v : dg) v /= dnorm;  // unit response to a unit ramp

  auto gx = correlate2d(img, H, W, dg, g);
  auto gy = correlate2d(img, H, W, g, dg);
  std::vector<double> mag(gx.size());
  for (size_t i = 0; i < mag.size(); ++i)
    mag[i] = std::sqrt(gx[i] * gx[i] + gy[i] * gy[i]);
  return mag;
}

// largest 4-connected component of a binary map; returns its label mask
inline std::vector<uint8_t> largest_component(const std::vector<uint8_t>& bin, int64_t H,
                                              int64_t W) {
  std::vector<int32_t> label(bin.size(), -1);
  int32_t next = 0, best_label = -1;
  int64_t best_size = 0;
  std::vector<int64_t> stack;
  for (int64_t s = 0; s < H * W; ++s) {
    if (!bin[static_cast<size_t>(s)] || label[static_cast<size_t>(s)] >= 0) continue;
    int64_t size = 0;
    stack.push_back(s);
    label[static_cast<size_t>(s)] = next;
    while (!stack.empty()) {
      int64_t p = stack.back();
      stack.pop_back();
      ++size;
      int64_t y = p / W, x = p % W;
      const int64_t ny[4] = {y - 1, y + 1, y, y};
      const int64_t nx[4] = {x, x, x - 1, x + 1};
      for (int k = 0; k < 4; ++k) {
        if (ny[k] < 0 || ny[k] >= H || nx[k] < 0 || nx[k] >= W) continue;
        int64_t q = ny[k] * W + nx[k];
        if (bin[static_cast<size_t>(q)] && label[static_cast<size_t>(q)] < 0) {
          label[static_cast<size_t>(q)] = next;
          stack.push_back(q);
        }
      }
    }
    if (size > best_size) {
      best_size = size;
      best_label = next;
    }
    ++next;
  }
  std::vector<uint8_t> out(bin.size(), 0);
  if (best_label >= 0)
    for (size_t i = 0; i < bin.size(); ++i) out[i] = label[i] == best_label ? 1 : 0;
  return out;
}

// connected-to-omega flags for a binarized map
inline std::vector<uint8_t> connected_to(const std::vector<uint8_t>& bin,
                                         const std::vector<uint8_t>& omega, int64_t H,
                                         int64_t W) {
  std::vector<uint8_t> out(bin.size(), 0);
  std::vector<int64_t> stack;
  for (int64_t i = 0; i < H * W; ++i)
    if (omega[static_cast<size_t>(i)] && bin[static_cast<size_t>(i)] &&
        !out[static_cast<size_t>(i)]) {
      out[static_cast<size_t>(i)] = 1;
      stack.push_back(i);
    }
  while (!stack.empty()) {
    int64_t p = stack.back();
    stack.pop_back();
    int64_t y = p / W, x = p % W;
    const int64_t ny[4] = {y - 1, y + 1, y, y};
    const int64_t nx[4] = {x, x, x - 1, x + 1};
    for (int k = 0; k < 4; ++k) {
      if (ny[k] < 0 || ny[k] >= H || nx[k] < 0 || nx[k] >= W) continue;
      int64_t q = ny[k] * W + nx[k];
      if (bin[static_cast<size_t>(q)] && !out[static_cast<size_t>(q)]) {
        out[static_cast<size_t>(q)] = 1;
        stack.push_back(q);
      }
    }
  }
  return out;
}

// Connectivity per frame: theta sweep 0.1..0.9, omega = largest component of
// the binarized intersection; phi follows the perceptual-connectivity recipe
// with the 0.15 soft threshold.
inline double connectivity_frame(const double* pred, const double* gt, int64_t H, int64_t W) {
  const size_t n = static_cast<size_t>(H * W);
  std::vector<double> lp(n, 0.0), lg(n, 0.0);
  for (int step = 9; step >= 1; --step) {
    double theta = 0.1 * step;
    std::vector<uint8_t> bp(n), bg(n), bi(n);
    for (size_t i = 0; i < n; ++i) {
      bp[i] = pred[i] >= theta ? 1 : 0;
      bg[i] = gt[i] >= theta ? 1 : 0;
      bi[i] = (bp[i] && bg[i]) ? 1 : 0;
    }
    std::vector<uint8_t> omega = largest_component(bi, H, W);
    std::vector<uint8_t> cp = connected_to(bp, omega, H, W);
    std::vector<uint8_t> cg = connected_to(bg, omega, H, W);
    for (size_t i = 0; i < n; ++i) {
      if (cp[i] && lp[i] < theta) lp[i] = theta;
      if (cg[i] && lg[i] < theta) lg[i] = theta;
    }
  }
  double acc = 0;
  for (size_t i = 0; i < n; ++i) {
    double dp = pred[i] - lp[i];
    double dg = gt[i] - lg[i];
    double phi_p = 1.0 - (dp >= 0.15 ? dp : 0.0);
    double phi_g = 1.0 - (dg >= 0.15 ? dg : 0.0);
    acc += std::fabs(phi_p - phi_g);
  }
  return acc / static_cast<double>(n);
}

}  // namespace detail

// MAD and MSE are reported x1e3, dtSSD x1e2, Conn (mean |phi difference|) x1e3.
inline MattingMetrics matting_metrics(const Tensor& pred_a, const Tensor& gt_a) {
  check_shape(pred_a.same_shape(gt_a), "matting_metrics: shape mismatch");
  check_shape(pred_a.rank() == 3, "matting_metrics expects [T,H,W]");
  const int64_t T = pred_a.dim(0), H = pred_a.dim(1), W = pred_a.dim(2);
  const double n = static_cast<double>(pred_a.numel());

  MattingMetrics out;
  for (int64_t i = 0; i < pred_a.numel(); ++i) {
    double d = pred_a[i] - gt_a[i];
    out.mad += std::fabs(d);
    out.mse += d * d;
  }
  out.mad = 1e3 * out.mad / n;
  out.mse = 1e3 * out.mse / n;

  double gacc = 0, cacc = 0;
  for (int64_t f = 0; f < T; ++f) {
    const double* p = pred_a.data() + f * H * W;
    const double* g = gt_a.data() + f * H * W;
    auto mp = detail::grad_magnitude(p, H, W);
    auto mg = detail::grad_magnitude(g, H, W);
    for (size_t i = 0; i < mp.size(); ++i) gacc += (mp[i] - mg[i]) * (mp[i] - mg[i]);
    cacc += detail::connectivity_frame(p, g, H, W);
  }
  out.grad = gacc / n;
  out.conn = 1e3 * cacc / static_cast<double>(T);

  if (T >= 2) {
    double acc = 0;
    for (int64_t f = 1; f < T; ++f)
      for (int64_t i = 0; i < H * W; ++i) {
        double dp = pred_a[f * H * W + i] - pred_a[(f - 1) * H * W + i];
        double dg = gt_a[f * H * W + i] - gt_a[(f - 1) * H * W + i];
        acc += (dp - dg) * (dp - dg);
      }
    out.dtssd = 1e2 * std::sqrt(acc / static_cast<double>((T - 1) * H * W));
  }
  return out;
}

// ---------------------------------------------------------------------------
// procrustes / pose

struct AlignmentSolution {
  double scale = 1;
  Mat3 rotation;
  Vec3 shift;
};

// Closed-form similarity fit minimizing ||s R x + t - y||_F^2 with a proper
// rotation (reflections are repaired through the sign matrix).
inline AlignmentSolution procrustes_align(const Tensor& X, const Tensor& Y) {
  check_shape(X.rank() == 2 && X.dim(1) == 3 && X.same_shape(Y),
              "procrustes_align expects matching [K,3]");
  const int64_t K = X.dim(0);
  check(K >= 3, "procrustes_align needs K >= 3");

  Eigen::MatrixXd Xm(K, 3), Ym(K, 3);
  for (int64_t i = 0; i < K; ++i)
    for (int64_t j = 0; j < 3; ++j) {
      Xm(i, j) = X[i * 3 + j];
      Ym(i, j) = Y[i * 3 + j];
    }
  Eigen::RowVector3d mx = Xm.colwise().mean(), my = Ym.colwise().mean();
  Eigen::MatrixXd Xc = Xm.rowwise() - mx, Yc = Ym.rowwise() - my;

  {
    Eigen::JacobiSVD<Eigen::MatrixXd> rank_svd(Xc);
    const auto& sv = rank_svd.singularValues();
    if (sv(1) < 1e-9 * std::max(1.0, sv(0)))
      throw Error("procrustes_align: centered configuration has rank < 2 (degenerate)");
  }

  Eigen::Matrix3d Sigma = (Yc.transpose() * Xc) / static_cast<double>(K);
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(Sigma, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Eigen::Matrix3d U = svd.matrixU(), V = svd.matrixV();
  Eigen::Vector3d D = svd.singularValues();
  Eigen::Matrix3d S = Eigen::Matrix3d::Identity();
  if (U.determinant() * V.determinant() < 0) S(2, 2) = -1.0;

  Eigen::Matrix3d R = U * S * V.transpose();
  double var_x = Xc.squaredNorm() / static_cast<double>(K);
  double s = (D.asDiagonal() * S).trace() / var_x;
  check(s > 0, "procrustes_align: non-positive scale (degenerate input)");
  Eigen::Vector3d t = my.transpose() - s * R * mx.transpose();

  AlignmentSolution out;
  out.scale = s;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) out.rotation.m[static_cast<size_t>(i * 3 + j)] = R(i, j);
  out.shift = {t(0), t(1), t(2)};
  return out;
}

inline double alignment_residual(const AlignmentSolution& a, const Tensor& X, const Tensor& Y) {
  double acc = 0;
  for (int64_t i = 0; i < X.dim(0); ++i) {
    Vec3 x{X[i * 3], X[i * 3 + 1], X[i * 3 + 2]};
    Vec3 y{Y[i * 3], Y[i * 3 + 1], Y[i * 3 + 2]};
    Vec3 r = a.rotation * x * a.scale + a.shift - y;
    acc += r.dot(r);
  }
  return acc;
}

struct PoseMetrics {
  double mpjpe_mm = 0, pa_mpjpe_mm = 0;
  std::optional<double> accel;  // m/s^2
};

// MPJPE after per-frame root (joint 0) translation alignment; PA-MPJPE after
// per-frame procrustes; Accel from the centered second difference times fps^2.
inline PoseMetrics pose_metrics(const Tensor& pred, const Tensor& gt, double fps) {
  check_shape(pred.rank() == 3 && pred.dim(2) == 3 && pred.same_shape(gt),
              "pose_metrics expects matching [T,K,3]");
  const int64_t T = pred.dim(0), K = pred.dim(1);

  PoseMetrics out;
  double acc_root = 0, acc_pa = 0;
  for (int64_t f = 0; f < T; ++f) {
    Vec3 pr{pred[(f * K) * 3], pred[(f * K) * 3 + 1], pred[(f * K) * 3 + 2]};
    Vec3 gr{gt[(f * K) * 3], gt[(f * K) * 3 + 1], gt[(f * K) * 3 + 2]};
    Vec3 shift = gr - pr;
    Tensor Xf({K, 3}), Yf({K, 3});
    for (int64_t k = 0; k < K; ++k) {
      Vec3 p{pred[(f * K + k) * 3], pred[(f * K + k) * 3 + 1], pred[(f * K + k) * 3 + 2]};
      Vec3 g{gt[(f * K + k) * 3], gt[(f * K + k) * 3 + 1], gt[(f * K + k) * 3 + 2]};
      acc_root += (p + shift - g).norm();
      for (int c = 0; c < 3; ++c) {
        Xf[k * 3 + c] = c == 0 ? p.x : (c == 1 ? p.y : p.z);
        Yf[k * 3 + c] = c == 0 ? g.x : (c == 1 ? g.y : g.z);
      }
    }
    AlignmentSolution al = procrustes_align(Xf, Yf);
    for (int64_t k = 0; k < K; ++k) {
      Vec3 p{Xf[k * 3], Xf[k * 3 + 1], Xf[k * 3 + 2]};
      Vec3 g{Yf[k * 3], Yf[k * 3 + 1], Yf[k * 3 + 2]};
      acc_pa += (al.rotation * p * al.scale + al.shift - g).norm();
    }
  }
  out.mpjpe_mm = 1000.0 * acc_root / static_cast<double>(T * K);
  out.pa_mpjpe_mm = 1000.0 * acc_pa / static_cast<double>(T * K);

  if (T >= 3) {
    double acc = 0;
    for (int64_t f = 1; f + 1 < T; ++f)
      for (int64_t k = 0; k < K; ++k) {
        Vec3 ap, ag;
        double* comp[3] = {&ap.x, &ap.y, &ap.z};
        double* comg[3] = {&ag.x, &ag.y, &ag.z};
        for (int c = 0; c < 3; ++c) {
          *comp[c] = (pred[((f + 1) * K + k) * 3 + c] - 2 * pred[(f * K + k) * 3 + c] +
                      pred[((f - 1) * K + k) * 3 + c]) *
                     fps * fps;
          *comg[c] = (gt[((f + 1) * K + k) * 3 + c] - 2 * gt[(f * K + k) * 3 + c] +
                      gt[((f - 1) * K + k) * 3 + c]) *
                     fps * fps;
        }
        acc += (ap - ag).norm();
      }
    out.accel = acc / static_cast<double>((T - 2) * K);
  }
  return out;
}

// ---------------------------------------------------------------------------
// auxiliary task metrics

inline double semantics_accuracy(const Tensor& pred_rgb, const Tensor& gt_rgb,
                                 const std::vector<std::array<float, 3>>& palette) {
  auto p = perception::decode_semantics_ids(pred_rgb, palette);
  auto g = perception::decode_semantics_ids(gt_rgb, palette);
  check(!p.empty() && p.size() == g.size(), "semantics_accuracy: size mismatch");
  int64_t ok = 0;
  for (size_t i = 0; i < p.size(); ++i) ok += p[i] == g[i] ? 1 : 0;
  return static_cast<double>(ok) / static_cast<double>(p.size());
}

// mean euclidean error over gt-visible joints, normalized image units
inline double kp2d_mean_error(const KeypointSet& pred, const KeypointSet& gt) {
  check_shape(pred.coords.same_shape(gt.coords), "kp2d_mean_error: shape mismatch");
  double acc = 0;
  int64_t n = 0;
  for (int64_t i = 0; i < gt.coords.dim(0) * gt.coords.dim(1); ++i) {
    if (gt.visibility.empty() || gt.visibility[static_cast<size_t>(i)]) {
      double dx = pred.coords[i * 2] - gt.coords[i * 2];
      double dy = pred.coords[i * 2 + 1] - gt.coords[i * 2 + 1];
      acc += std::sqrt(dx * dx + dy * dy);
      ++n;
    }
  }
  return n > 0 ? acc / static_cast<double>(n) : 0.0;
}

// ---------------------------------------------------------------------------
// dataset evaluation

// (clip, task, clip seed) -> prediction; the model wrapper and the gt-backed
// oracle both fit this signature.
using PredictFn =
    std::function<PredictOutput(const datagen::VideoClip&, Task, uint64_t)>;

struct ClipRow {
  uint64_t seed = 0;
  std::map<std::string, double> values;
};

struct TaskReport {
  Task task = Task::Depth;
  std::map<std::string, double> aggregate;  // mean over clips
  std::vector<ClipRow> clips;
};

struct EvalReport {
  std::vector<TaskReport> tasks;
  std::string dataset;
  std::string notes;
};

namespace detail {

inline std::string modality_file(Task t) {
  switch (t) {
    case Task::Depth: return "depth.npy";
    case Task::Normal: return "normal.npy";
    case Task::Segmentation: return "alpha.npy";
    case Task::Semantics: return "semantics.npy";
    case Task::Kp2d: return "kp2d.npy";
    case Task::Kp3d: return "kp3d.npy";
    default: throw Error("no ground-truth modality for task " + task_name(t));
  }
}

}  // namespace detail

inline EvalReport evaluate_dataset(const std::filesystem::path& root,
                                   const std::vector<Task>& tasks, const PredictFn& fn) {
  datagen::DatasetManifest m = datagen::load_manifest(root);
  for (Task t : tasks)
    for (uint64_t seed : m.clip_seeds) {
      auto f = root / m.clip_dir(seed) / detail::modality_file(t);
      if (!std::filesystem::exists(f))
        throw Error("dataset at " + root.string() + " is missing the '" + task_name(t) +
                    "' ground truth (" + f.string() + ")");
    }

  EvalReport rep;
  rep.dataset = root.string();
  for (Task t : tasks) {
    TaskReport tr;
    tr.task = t;
    for (uint64_t seed : m.clip_seeds) {
      datagen::VideoClip clip;
      datagen::GroundTruthBundle gt;
      datagen::read_clip(root, m, seed, clip, gt, /*require_all=*/false);
      PredictOutput out = fn(clip, t, seed);

      ClipRow row;
      row.seed = seed;
      switch (t) {
        case Task::Depth: {
          check(out.video.has_value(), "predictor returned no video for depth");
          Tensor pred_disp = perception::decode_scalar(out.video->values);
          DepthMetrics dm =
              depth_metrics(pred_disp, gt.depth.to_tensor(), perception::validity_mask(gt));
          row.values["rmse_m"] = dm.rmse;
          row.values["absrel"] = dm.absrel;
          break;
        }
        case Task::Normal: {
          check(out.video.has_value(), "predictor returned no video for normal");
          Tensor pred_n = perception::decode_normals(out.video->values);
          AngularStats as =
              angular_error(pred_n, gt.normal.to_tensor(), perception::validity_mask(gt));
          row.values["mean_deg"] = as.mean_deg;
          row.values["median_deg"] = as.median_deg;
          row.values["pct_11_25"] = as.pct_11_25;
          row.values["pct_22_5"] = as.pct_22_5;
          row.values["pct_30"] = as.pct_30;
          break;
        }
        case Task::Segmentation: {
          check(out.video.has_value(), "predictor returned no video for segmentation");
          Tensor pred_a = perception::decode_scalar(out.video->values);
          MattingMetrics mm = matting_metrics(pred_a, gt.alpha.to_tensor());
          row.values["mad_1e3"] = mm.mad;
          row.values["mse_1e3"] = mm.mse;
          row.values["grad"] = mm.grad;
          row.values["conn_1e3"] = mm.conn;
          if (mm.dtssd) row.values["dtssd_1e2"] = *mm.dtssd;
          break;
        }
        case Task::Semantics: {
          check(out.video.has_value(), "predictor returned no video for semantics");
          row.values["accuracy"] =
              semantics_accuracy(out.video->values, gt.semantics.to_tensor(), m.palette);
          break;
        }
        case Task::Kp2d: {
          check(out.keypoints.has_value(), "predictor returned no keypoints for kp2d");
          row.values["mean_err_norm"] =
              kp2d_mean_error(*out.keypoints, perception::gt_kp2d(gt));
          break;
        }
        case Task::Kp3d: {
          check(out.keypoints.has_value(), "predictor returned no keypoints for kp3d");
          // both sides root-relative for a fair comparison
          Tensor g = perception::gt_kp3d(gt).coords;
          const int64_t T = g.dim(0), K = g.dim(1);
          Tensor grel = g;
          for (int64_t f = 0; f < T; ++f)
            for (int64_t k = 0; k < K; ++k)
              for (int c = 0; c < 3; ++c)
                grel[(f * K + k) * 3 + c] -= g[(f * K) * 3 + c];
          PoseMetrics pm = pose_metrics(out.keypoints->coords, grel, m.fps);
          row.values["mpjpe_mm"] = pm.mpjpe_mm;
          row.values["pa_mpjpe_mm"] = pm.pa_mpjpe_mm;
          if (pm.accel) row.values["accel_mps2"] = *pm.accel;
          break;
        }
        default:
          throw Error("evaluate_dataset: unsupported task " + task_name(t));
      }
      tr.clips.push_back(std::move(row));
    }

    for (const auto& row : tr.clips)
      for (const auto& [k, v] : row.values) tr.aggregate[k] += v;
    for (auto& [k, v] : tr.aggregate) v /= static_cast<double>(tr.clips.size());
    rep.tasks.push_back(std::move(tr));
  }
  return rep;
}

// gt-as-prediction predictor for suite self-checks (`eval --oracle`)
inline PredictFn oracle_predictor(const std::filesystem::path& root) {
  datagen::DatasetManifest m = datagen::load_manifest(root);
  return [root, m](const datagen::VideoClip&, Task t, uint64_t seed) {
    datagen::VideoClip clip;
    datagen::GroundTruthBundle gt;
    datagen::read_clip(root, m, seed, clip, gt, /*require_all=*/false);
    PredictOutput out;
    if (is_dense(t)) {
      out.video = perception::encode_modality(gt, t);
    } else if (t == Task::Kp2d) {
      out.keypoints = perception::gt_kp2d(gt);
    } else if (t == Task::Kp3d) {
      KeypointSet s = perception::gt_kp3d(gt);
      const int64_t T = s.coords.dim(0), K = s.coords.dim(1);
      Tensor rel = s.coords;
      for (int64_t f = 0; f < T; ++f)
        for (int64_t k = 0; k < K; ++k)
          for (int c = 0; c < 3; ++c) rel[(f * K + k) * 3 + c] -= s.coords[(f * K) * 3 + c];
      s.coords = rel;
      out.keypoints = s;
    }
    return out;
  };
}

inline std::string report_text(const EvalReport& rep) {
  std::ostringstream os;
  os << "evaluation report\n";
  os << "dataset: " << rep.dataset << "\n";
  if (!rep.notes.empty()) os << "notes: " << rep.notes << "\n";
  os << "conventions: depth aligned by per-video least-squares scale+shift in disparity;"
     << " MPJPE root-aligned per frame; matting MAD/MSE x1e3, Conn x1e3, dtSSD x1e2;"
     << " Grad uses gaussian derivatives sigma=1.4 radius=5\n\n";
  for (const auto& tr : rep.tasks) {
    os << "[" << task_name(tr.task) << "]\n";
    for (const auto& [k, v] : tr.aggregate) {
      char buf[64];
      std::snprintf(buf, sizeof buf, "  %-14s %.10g\n", (k + ":").c_str(), v);
      os << buf;
    }
    os << "  per-clip:\n";
    for (const auto& row : tr.clips) {
      os << "    clip_" << row.seed << ":";
      for (const auto& [k, v] : row.values) {
        char buf[64];
        std::snprintf(buf, sizeof buf, " %s=%.6g", k.c_str(), v);
        os << buf;
      }
      os << "\n";
    }
    os << "\n";
  }
  return os.str();
}

inline nlohmann::json report_json(const EvalReport& rep) {
  nlohmann::json j;
  j["dataset"] = rep.dataset;
  j["notes"] = rep.notes;
  j["tasks"] = nlohmann::json::object();
  for (const auto& tr : rep.tasks) {
    nlohmann::json t;
    t["aggregate"] = tr.aggregate;
    t["clips"] = nlohmann::json::array();
    for (const auto& row : tr.clips) {
      nlohmann::json c;
      c["seed"] = row.seed;
      c["values"] = row.values;
      t["clips"].push_back(c);
    }
    j["tasks"][task_name(tr.task)] = t;
  }
  return j;
}

inline void write_report(const std::filesystem::path& dir, const EvalReport& rep) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream f(dir / "report.txt");
    check(f.good(), "cannot write report.txt");
    f << report_text(rep);
  }
  {
    std::ofstream f(dir / "report.json");
    check(f.good(), "cannot write report.json");
    f << report_json(rep).dump(2) << "\n";
  }
}

}  // namespace uvp::metrics
