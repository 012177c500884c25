#pragma once

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "uvp/backbone.hpp"
#include "uvp/codec.hpp"
#include "uvp/datagen.hpp"
#include "uvp/losses.hpp"
#include "uvp/modality.hpp"
#include "uvp/optim.hpp"
#include "uvp/tasks.hpp"

// Generative pretraining and the two-stage perception fine-tune. Latents are
// precomputed once per dataset; stage 1 supervises in latent space with the
// codec frozen, stage 2 decodes through the codec and applies the per-task
// ambient losses with the decoder trainable and the encoder frozen.
namespace uvp::trainer {

inline constexpr uint32_t kTrainStateVersion = 1;

enum class Stage { Pretrain, Latent, Ambient };

inline const char* stage_name(Stage s) {
  switch (s) {
    case Stage::Pretrain: return "pretrain";
    case Stage::Latent: return "latent";
    case Stage::Ambient: return "ambient";
  }
  return "?";
}

struct TrainConfig {
  double base_lr = 5e-5;
  double warmup_frac = 0.10;
  double clip_norm = 1.0;
  double drop_norm = 10.0;
  int64_t batch_size = 8;
  int64_t steps = 2000;
  Stage stage = Stage::Latent;
  std::array<double, kPerceptionTaskCount> task_weights{1, 1, 1, 1, 1, 1};
  uint64_t seed = 0;
  bool decoder_training = true;    // stage-2 ablation axis
  bool mask_query_tokens = true;   // token-mask ablation axis
  double input_timestep = 0.0;     // 0 = end (default), 1 = start ablation
  bool human_only_masks = false;
  int64_t log_every = 50;

  void validate() const {
    if (!(warmup_frac > 0.0 && warmup_frac < 1.0))
      throw ConfigError("warmup_frac must lie in (0,1)");
    if (!(drop_norm > clip_norm && clip_norm > 0.0))
      throw ConfigError("need drop_norm > clip_norm > 0");
    if (batch_size < 1 || steps < 0) throw ConfigError("bad batch/steps");
  }

  uint64_t hash() const {
    std::string s = std::to_string(base_lr) + "|" + std::to_string(warmup_frac) + "|" +
                    std::to_string(clip_norm) + "|" + std::to_string(drop_norm) + "|" +
                    std::to_string(batch_size) + "|" + std::to_string(steps) + "|" +
                    stage_name(stage) + "|" + std::to_string(seed) + "|" +
                    std::to_string(decoder_training) + "|" +
                    std::to_string(mask_query_tokens) + "|" +
                    std::to_string(input_timestep);
    for (double w : task_weights) s += "|" + std::to_string(w);
    return fnv1a(s);
  }
};

// Linear ramp 0 -> base_lr over the first ceil(warmup_frac * total) steps,
// constant afterwards.
inline double lr_schedule(int64_t step, int64_t total_steps, const TrainConfig& cfg) {
  check(step >= 0 && step <= total_steps, "lr_schedule: step out of range");
  int64_t warm = static_cast<int64_t>(
      std::ceil(cfg.warmup_frac * static_cast<double>(total_steps)));
  if (warm < 1) warm = 1;
  if (step < warm) return cfg.base_lr * static_cast<double>(step) / static_cast<double>(warm);
  return cfg.base_lr;
}

struct GradDecision {
  double factor = 1.0;
  bool skip = false;
};

// norm <= clip: apply as is; clip < norm <= drop: scale by clip/norm;
// norm > drop or non-finite: skip the batch entirely.
inline GradDecision grad_control(double grad_norm, const TrainConfig& cfg) {
  GradDecision d;
  if (!std::isfinite(grad_norm) || grad_norm > cfg.drop_norm) {
    d.skip = true;
    return d;
  }
  if (grad_norm > cfg.clip_norm) d.factor = cfg.clip_norm / grad_norm;
  return d;
}

// pretrain timestep draw; kept separate so tests can probe its distribution
inline double sample_timestep(Rng& rng) { return rng.uniform(); }

inline Task sample_task(Rng& rng, const std::array<double, kPerceptionTaskCount>& weights) {
  double total = 0;
  for (double w : weights) {
    if (w < 0) throw ConfigError("task weights must be nonnegative");
    total += w;
  }
  if (total <= 0) throw ConfigError("task weights must not all be zero");
  double u = rng.uniform() * total;
  double acc = 0;
  for (int i = 0; i < kPerceptionTaskCount; ++i) {
    acc += weights[static_cast<size_t>(i)];
    if (u < acc) return static_cast<Task>(i);
  }
  return static_cast<Task>(kPerceptionTaskCount - 1);
}

// ---------------------------------------------------------------------------
// preprocessed training data

struct ClipData {
  Tensor rgb_lat_std;                    // [T',H',W',C]
  std::array<Tensor, 4> target_lat_std;  // dense tasks, same shape
  std::array<Tensor, 4> ambient_target;  // [T,H,W,3]
  Tensor gt_disp_norm;                   // [N] normalized gt disparity
  Tensor gt_normals;                     // [N,3]
  Tensor mask_validity, mask_full;       // [N]
  KeypointSet kp2d, kp3d;
};

struct TrainSet {
  std::vector<ClipData> clips;
  int64_t frames = 0, height = 0, width = 0;
  int joints = 0;

  static TrainSet build(const std::filesystem::path& root,
                        const std::vector<uint64_t>& seeds, const codec::Codec& cdc,
                        bool human_only_masks = false) {
    datagen::DatasetManifest m = datagen::load_manifest(root);
    TrainSet out;
    out.frames = m.frames;
    out.height = m.height;
    out.width = m.width;
    out.joints = m.joints;
    for (uint64_t seed : seeds) {
      datagen::VideoClip clip;
      datagen::GroundTruthBundle gt;
      datagen::read_clip(root, m, seed, clip, gt);
      ClipData cd;
      cd.rgb_lat_std = cdc.standardize(cdc.encode(clip.rgb.to_tensor()).values);
      for (Task t : {Task::Depth, Task::Normal, Task::Segmentation, Task::Semantics}) {
        ModalityVideo mv = perception::encode_modality(gt, t);
        size_t ti = static_cast<size_t>(t);
        cd.ambient_target[ti] = mv.values;
        cd.target_lat_std[ti] = cdc.standardize(cdc.encode(mv.values).values);
        if (t == Task::Depth) cd.gt_disp_norm = perception::decode_scalar(mv.values);
      }
      cd.gt_normals = gt.normal.to_tensor().reshaped({gt.normal.numel() / 3, 3});
      cd.mask_validity = perception::task_mask(gt, Task::Depth, human_only_masks);
      cd.mask_full = perception::task_mask(gt, Task::Segmentation, human_only_masks);
      cd.kp2d = perception::gt_kp2d(gt);
      cd.kp3d = perception::gt_kp3d(gt);
      out.clips.push_back(std::move(cd));
    }
    return out;
  }
};

// ---------------------------------------------------------------------------
// trainer

struct StepLog {
  int64_t step = 0;
  std::string task;
  double loss = 0, grad_norm = 0, lr = 0;
  bool skipped = false;
};

struct RunResult {
  std::vector<StepLog> history;
  int64_t skipped = 0;
  double first100_mean = 0, last100_mean = 0;
};

class Trainer {
public:
  Trainer(codec::Codec& cdc, dit::Backbone& model, TrainConfig cfg)
      : codec_(cdc), model_(model), cfg_(cfg), rng_(cfg.seed ^ 0x7261696e) {
    cfg_.validate();
  }

  Rng& rng() { return rng_; }
  int64_t step() const { return step_; }
  const TrainConfig& config() const { return cfg_; }

  // csv log: step,task,loss,grad_norm,lr,skipped (append-only)
  void set_log_file(const std::filesystem::path& p) {
    bool fresh = !std::filesystem::exists(p);
    log_.open(p, std::ios::app);
    check(log_.good(), "cannot open training log " + p.string());
    if (fresh) log_ << "step,task,loss,grad_norm,lr,skipped\n";
  }

  RunResult run(const TrainSet& data, std::FILE* console = nullptr,
                int64_t override_steps = -1) {
    check(!data.clips.empty(), "trainer: empty dataset");
    apply_freeze_policy();
    RunResult res;
    int64_t todo = override_steps >= 0 ? override_steps : cfg_.steps;
    for (int64_t i = 0; i < todo; ++i) {
      StepLog row = train_step(data);
      res.history.push_back(row);
      if (row.skipped) ++res.skipped;
      if (console && (step_ % cfg_.log_every == 0 || i + 1 == todo))
        std::fprintf(console, "[train:%s] step %ld task %s loss %.6f gnorm %.3f lr %.2e%s\n",
                     stage_name(cfg_.stage), static_cast<long>(step_), row.task.c_str(),
                     row.loss, row.grad_norm, row.lr, row.skipped ? " SKIP" : "");
    }
    int64_t n = static_cast<int64_t>(res.history.size());
    int64_t head = std::min<int64_t>(100, n);
    for (int64_t i = 0; i < head; ++i) res.first100_mean += res.history[i].loss;
    if (head > 0) res.first100_mean /= static_cast<double>(head);
    for (int64_t i = std::max<int64_t>(0, n - 100); i < n; ++i)
      res.last100_mean += res.history[i].loss;
    if (n > 0) res.last100_mean /= static_cast<double>(std::min<int64_t>(100, n));
    return res;
  }

  // tracked (not optimized) loss of one task on one clip
  double eval_task_loss(const TrainSet& data, Task task, size_t clip_index = 0) {
    const ClipData& cd = data.clips[clip_index % data.clips.size()];
    ad::Var loss = sample_loss(cd, task, cfg_.stage == Stage::Ambient);
    return loss->val[0];
  }

  void save_state(const std::filesystem::path& path) const {
    io::Blob b;
    b.kind = "uvp-trainstate";
    b.version = kTrainStateVersion;
    b.put("step", Tensor::scalar(static_cast<double>(step_)));
    b.put("rng", rng_.state());
    b.put("config_hash", std::to_string(cfg_.hash()));
    model_.params().save_into(b, "bb.");
    codec_.params().save_into(b, "cd.");
    io::save_blob(path, b);
  }

  void load_state(const std::filesystem::path& path, bool check_config = true) {
    io::Blob b = io::load_blob(path, "uvp-trainstate", kTrainStateVersion);
    if (check_config)
      check(b.str("config_hash") == std::to_string(cfg_.hash()),
            "train state was produced under a different config");
    step_ = static_cast<int64_t>(b.number("step"));
    Rng restored;
    restored.set_state(b.str("rng"));
    rng_ = restored;
    model_.params().load_from(b, "bb.");
    codec_.params().load_from(b, "cd.");
  }

private:
  void apply_freeze_policy() {
    model_.params().set_trainable_all(true);
    switch (cfg_.stage) {
      case Stage::Pretrain:
      case Stage::Latent:
        codec_.params().set_trainable_all(false);
        break;
      case Stage::Ambient:
        codec_.params().set_trainable_all(false);
        if (cfg_.decoder_training) codec_.params().set_trainable_prefix("dec.", true);
        break;
    }
  }

  dit::ForwardFlags flags() const {
    dit::ForwardFlags f;
    f.use_queries = true;
    f.mask_query_tokens = cfg_.mask_query_tokens;
    return f;
  }

  // one sample's loss on the tape
  ad::Var sample_loss(const ClipData& cd, Task task, bool ambient) {
    if (task == Task::Generate) {
      double t = sample_timestep(rng_);
      Tensor eps = rng_.randn(cd.rgb_lat_std.shape);
      Tensor xt = cd.rgb_lat_std;
      for (int64_t i = 0; i < xt.numel(); ++i)
        xt[i] = (1.0 - t) * cd.rgb_lat_std[i] + t * eps[i];
      dit::ForwardOut fwd = model_.forward(ad::constant(xt), Task::Generate, t, flags());
      return losses::rectified_flow_loss(fwd.v_pred, ad::constant(cd.rgb_lat_std),
                                         ad::constant(eps));
    }

    dit::ForwardOut fwd = model_.forward(ad::constant(cd.rgb_lat_std), task,
                                         cfg_.input_timestep, flags());
    if (is_keypoint(task)) {
      ad::Var kp = model_.keypoint_head(fwd.query_out, task);
      const KeypointSet& gt = task == Task::Kp2d ? cd.kp2d : cd.kp3d;
      return losses::keypoint_loss(kp, gt.space, gt);
    }

    size_t ti = static_cast<size_t>(task);
    ad::Var x0_std = ad::neg(fwd.v_pred);
    if (!ambient) {
      ad::Var d = ad::sub(x0_std, ad::constant(cd.target_lat_std[ti]));
      return ad::mean(ad::mul(d, d));
    }

    ad::Var video = codec_.decode_var(codec_.destandardize_var(x0_std),
                                      cd.ambient_target[ti].dim(0));
    int64_t n_pix = cd.mask_full.numel();
    switch (task) {
      case Task::Depth: {
        ad::Var disp = ad::scale(ad::row_sum(ad::reshape(video, {n_pix, 3})), 1.0 / 3.0);
        return losses::ssi_depth_loss(disp, ad::constant(cd.gt_disp_norm.reshaped({n_pix})),
                                      cd.mask_validity);
      }
      case Task::Normal: {
        ad::Var vec = ad::add_const(ad::scale(ad::reshape(video, {n_pix, 3}), 2.0), -1.0);
        return losses::normal_loss(vec, ad::constant(cd.gt_normals), cd.mask_validity);
      }
      case Task::Segmentation:
      case Task::Semantics:
        return losses::l2_loss(video, ad::constant(cd.ambient_target[ti]), cd.mask_full);
      default:
        throw Error("unreachable task in ambient loss");
    }
  }

  StepLog train_step(const TrainSet& data) {
    Task task = cfg_.stage == Stage::Pretrain ? Task::Generate
                                              : sample_task(rng_, cfg_.task_weights);
    model_.params().zero_grads();
    codec_.params().zero_grads();

    // per-sample backward keeps one graph alive at a time; gradient
    // accumulation order is fixed, so results match a joint batch graph
    StepLog row;
    row.step = step_;
    row.task = task_name(task);
    row.lr = lr_schedule(std::min(step_, cfg_.steps), cfg_.steps, cfg_);
    for (int64_t b = 0; b < cfg_.batch_size; ++b) {
      const ClipData& cd =
          data.clips[static_cast<size_t>(rng_.uniform_int(static_cast<int64_t>(data.clips.size())))];
      ad::Var l = ad::scale(sample_loss(cd, task, cfg_.stage == Stage::Ambient),
                            1.0 / static_cast<double>(cfg_.batch_size));
      row.loss += l->val[0];
      ad::backward(l);
    }
    if (!std::isfinite(row.loss))
      throw Error("training diverged: non-finite loss at step " + std::to_string(step_));
    double gn2 = model_.params().grad_norm();
    double gc2 = codec_.params().grad_norm();
    row.grad_norm = std::sqrt(gn2 * gn2 + gc2 * gc2);
    if (!model_.params().grads_finite() || !codec_.params().grads_finite())
      row.grad_norm = std::numeric_limits<double>::quiet_NaN();

    GradDecision gd = grad_control(row.grad_norm, cfg_);
    row.skipped = gd.skip;
    if (!gd.skip) {
      adam_.step(model_.params(), row.lr, gd.factor, step_);
      if (cfg_.stage == Stage::Ambient && cfg_.decoder_training)
        adam_.step(codec_.params(), row.lr, gd.factor, step_);
    }
    ++step_;

    if (log_.is_open()) {
      log_ << row.step << "," << row.task << "," << row.loss << "," << row.grad_norm << ","
           << row.lr << "," << (row.skipped ? 1 : 0) << "\n";
      log_.flush();
    }
    return row;
  }

  codec::Codec& codec_;
  dit::Backbone& model_;
  TrainConfig cfg_;
  Rng rng_;
  Adam adam_;
  int64_t step_ = 0;
  std::ofstream log_;
};

}  // namespace uvp::trainer
