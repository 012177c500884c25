#pragma once

#include <array>
#include <cmath>
#include <vector>

#include "uvp/datagen.hpp"
#include "uvp/tasks.hpp"
#include "uvp/tensor.hpp"

// Ground truth <-> unified RGB-ambient representation. Scalar tasks repeat
// their channel three times; normals map through (n+1)/2; depth converts to
// disparity 1/z normalized to [0,1] by the per-video min/max shared across
// all frames.
namespace uvp::perception {

inline Tensor grid_to_tensor(const GridF& g) { return g.to_tensor(); }

inline ModalityVideo encode_modality(const datagen::GroundTruthBundle& gt, Task task) {
  check(is_dense(task), "encode_modality: '" + task_name(task) + "' is not a dense modality");
  ModalityVideo mv;
  mv.task = task;

  switch (task) {
    case Task::Normal: {
      const GridF& n = gt.normal;
      mv.values = Tensor({n.dim(0), n.dim(1), n.dim(2), 3});
      for (int64_t i = 0; i < n.numel(); ++i)
        mv.values[i] = 0.5 * (static_cast<double>(n[i]) + 1.0);
      break;
    }
    case Task::Depth: {
      const GridF& z = gt.depth;
      int64_t n = z.numel();
      std::vector<double> disp(static_cast<size_t>(n));
      double dmin = std::numeric_limits<double>::infinity(), dmax = -dmin;
      for (int64_t i = 0; i < n; ++i) {
        check(z[i] > 0, "encode_modality: depth must be positive");
        double d = 1.0 / static_cast<double>(z[i]);
        disp[static_cast<size_t>(i)] = d;
        dmin = std::min(dmin, d);
        dmax = std::max(dmax, d);
      }
      mv.disp_min = dmin;
      mv.disp_max = dmax;
      mv.values = Tensor({z.dim(0), z.dim(1), z.dim(2), 3});
      double span = dmax - dmin;
      for (int64_t i = 0; i < n; ++i) {
        // degenerate constant-disparity video maps to 0.5
        double v = span < 1e-12 ? 0.5 : (disp[static_cast<size_t>(i)] - dmin) / span;
        for (int c = 0; c < 3; ++c) mv.values[i * 3 + c] = v;
      }
      break;
    }
    case Task::Segmentation: {
      const GridF& a = gt.alpha;
      mv.values = Tensor({a.dim(0), a.dim(1), a.dim(2), 3});
      for (int64_t i = 0; i < a.numel(); ++i)
        for (int c = 0; c < 3; ++c) mv.values[i * 3 + c] = static_cast<double>(a[i]);
      break;
    }
    case Task::Semantics: {
      mv.values = gt.semantics.to_tensor();
      break;
    }
    default:
      throw Error("unreachable");
  }
  return mv;
}

// normal decode: 2*rgb - 1, renormalized; zero vectors fall back to (0,0,-1)
inline Tensor decode_normals(const Tensor& values) {
  check_shape(values.rank() == 4 && values.dim(3) == 3, "decode_normals expects [T,H,W,3]");
  Tensor out = values;
  int64_t n = values.numel() / 3;
  for (int64_t i = 0; i < n; ++i) {
    double x = 2.0 * values[i * 3] - 1.0;
    double y = 2.0 * values[i * 3 + 1] - 1.0;
    double z = 2.0 * values[i * 3 + 2] - 1.0;
    double nn = std::sqrt(x * x + y * y + z * z);
    if (nn < 1e-9) {
      out[i * 3] = 0;
      out[i * 3 + 1] = 0;
      out[i * 3 + 2] = -1;
    } else {
      out[i * 3] = x / nn;
      out[i * 3 + 1] = y / nn;
      out[i * 3 + 2] = z / nn;
    }
  }
  return out;
}

// depth/segmentation decode: per-pixel channel mean -> [T,H,W]
inline Tensor decode_scalar(const Tensor& values) {
  check_shape(values.rank() == 4 && values.dim(3) == 3, "decode_scalar expects [T,H,W,3]");
  Tensor out({values.dim(0), values.dim(1), values.dim(2)});
  int64_t n = out.numel();
  for (int64_t i = 0; i < n; ++i)
    out[i] = (values[i * 3] + values[i * 3 + 1] + values[i * 3 + 2]) / 3.0;
  return out;
}

// semantics decode: nearest palette entry (background black is id = parts)
inline std::vector<int> decode_semantics_ids(const Tensor& values,
                                             const std::vector<std::array<float, 3>>& palette) {
  check_shape(values.rank() == 4 && values.dim(3) == 3, "decode_semantics expects [T,H,W,3]");
  int64_t n = values.numel() / 3;
  int P = static_cast<int>(palette.size());
  std::vector<int> ids(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    double r = values[i * 3], g = values[i * 3 + 1], b = values[i * 3 + 2];
    double best = r * r + g * g + b * b;  // distance to background black
    int best_id = P;
    for (int p = 0; p < P; ++p) {
      double dr = r - palette[static_cast<size_t>(p)][0];
      double dg = g - palette[static_cast<size_t>(p)][1];
      double db = b - palette[static_cast<size_t>(p)][2];
      double d = dr * dr + dg * dg + db * db;
      if (d < best) {
        best = d;
        best_id = p;
      }
    }
    ids[static_cast<size_t>(i)] = best_id;
  }
  return ids;
}

struct DecodedModality {
  Task task;
  Tensor raw;        // the [0,1] rgb video as produced
  Tensor scalar;     // depth/segmentation: channel mean
  Tensor normals;    // normal task: unit vectors
  std::vector<int> semantic_ids;  // semantics task
};

inline DecodedModality decode_modality(const ModalityVideo& mv,
                                       const std::vector<std::array<float, 3>>& palette = {}) {
  check(is_dense(mv.task), "decode_modality: not a dense modality");
  DecodedModality out;
  out.task = mv.task;
  out.raw = mv.values;
  switch (mv.task) {
    case Task::Normal:
      out.normals = decode_normals(mv.values);
      break;
    case Task::Depth:
    case Task::Segmentation:
      out.scalar = decode_scalar(mv.values);
      break;
    case Task::Semantics:
      out.semantic_ids = decode_semantics_ids(mv.values, palette);
      break;
    default:
      break;
  }
  return out;
}

// Masks used for supervision and evaluation. Depth/normal exclude rays that
// hit nothing; segmentation/semantics supervise the full frame.
inline Tensor validity_mask(const datagen::GroundTruthBundle& gt) {
  Tensor m({static_cast<int64_t>(gt.validity.size())});
  for (size_t i = 0; i < gt.validity.size(); ++i) m[static_cast<int64_t>(i)] = gt.validity[i] ? 1.0 : 0.0;
  return m;
}

inline Tensor full_mask(int64_t n) { return Tensor::full({n}, 1.0); }

inline Tensor alpha_mask(const datagen::GroundTruthBundle& gt) {
  Tensor m({gt.alpha.numel()});
  for (int64_t i = 0; i < gt.alpha.numel(); ++i) m[i] = gt.alpha[i] > 0.5 ? 1.0 : 0.0;
  return m;
}

inline Tensor task_mask(const datagen::GroundTruthBundle& gt, Task task,
                        bool human_only = false) {
  Tensor m;
  if (task == Task::Depth || task == Task::Normal)
    m = validity_mask(gt);
  else
    m = full_mask(static_cast<int64_t>(gt.validity.size()));
  if (human_only) {
    Tensor a = alpha_mask(gt);
    for (int64_t i = 0; i < m.numel(); ++i) m[i] *= a[i];
  }
  return m;
}

// gt keypoint sets in the convention the losses and metrics expect
inline KeypointSet gt_kp2d(const datagen::GroundTruthBundle& gt) {
  KeypointSet s;
  s.task = Task::Kp2d;
  s.space = KeypointSpace::NormalizedImage;
  s.coords = gt.kp2d.to_tensor();
  s.visibility = gt.kp2d_vis;
  return s;
}

inline KeypointSet gt_kp3d(const datagen::GroundTruthBundle& gt) {
  KeypointSet s;
  s.task = Task::Kp3d;
  s.space = KeypointSpace::RootRelativeCamera;
  s.coords = gt.kp3d.to_tensor();
  return s;
}

}  // namespace uvp::perception
