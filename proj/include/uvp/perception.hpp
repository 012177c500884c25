#pragma once

#include "uvp/backbone.hpp"
#include "uvp/codec.hpp"
#include "uvp/metrics.hpp"
#include "uvp/modality.hpp"
#include "uvp/tasks.hpp"

// The single-step predict path: encode the RGB clip, run the backbone once at
// the end-of-diffusion timestep, negate the velocity output, and either decode
// back to the ambient space or read the keypoint heads.
namespace uvp::perception {

struct PredictConfig {
  double input_timestep = 0.0;    // 0 = "end" (clean input); 1 = "start" ablation
  bool mask_query_tokens = true;
};

inline PredictOutput predict(const Tensor& video, Task task, const codec::Codec& cdc,
                             const dit::Backbone& model, const PredictConfig& pc = {}) {
  check(task != Task::Generate, "predict: 'generate' is not a perception task");
  codec::LatentGrid lat = cdc.encode(video);
  Tensor z = cdc.standardize(lat.values);

  dit::ForwardFlags flags;
  flags.use_queries = true;
  flags.mask_query_tokens = pc.mask_query_tokens;
  dit::ForwardOut fwd = model.forward(z, task, pc.input_timestep, flags);

  PredictOutput out;
  if (is_dense(task)) {
    ad::Var x0_std = ad::neg(fwd.v_pred);
    Tensor raw = cdc.destandardize(x0_std->val);
    codec::LatentGrid pred_lat = lat;
    pred_lat.values = raw;
    Tensor decoded = cdc.decode(pred_lat);
    for (auto& x : decoded.v) x = std::clamp(x, 0.0, 1.0);
    ModalityVideo mv;
    mv.task = task;
    mv.values = std::move(decoded);
    out.video = std::move(mv);
  } else {
    check(fwd.query_out != nullptr, "predict: keypoint task requires query tokens");
    ad::Var kp = model.keypoint_head(fwd.query_out, task);
    KeypointSet s;
    s.task = task;
    s.space = task == Task::Kp2d ? KeypointSpace::NormalizedImage
                                 : KeypointSpace::RootRelativeCamera;
    s.coords = kp->val;
    if (task == Task::Kp2d)
      s.visibility.assign(static_cast<size_t>(s.coords.dim(0) * s.coords.dim(1)), 1);
    out.keypoints = std::move(s);
  }
  return out;
}

// PredictFn adapter for metrics::evaluate_dataset
inline metrics::PredictFn model_predictor(const codec::Codec& cdc, const dit::Backbone& model,
                                          PredictConfig pc = {}) {
  return [&cdc, &model, pc](const datagen::VideoClip& clip, Task t, uint64_t) {
    return predict(clip.rgb.to_tensor(), t, cdc, model, pc);
  };
}

}  // namespace uvp::perception
