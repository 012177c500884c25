#pragma once

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <unistd.h>  // environ

#include "json.hpp"
#include "uvp/perception.hpp"
#include "uvp/trainer.hpp"

// Pipeline orchestration behind the CLI: configuration tree with environment
// overrides, the datagen -> codec -> pretrain -> two-stage -> eval/infer
// chain, artifact management, and the quick selftest battery.
namespace uvp::harness {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// configuration

inline json default_config(const std::string& profile = "desk") {
  json c;
  c["profile"] = profile;
  c["seed"] = 0;
  c["data"] = {{"clips", 64},      {"frames", 17},   {"height", 64}, {"width", 64},
               {"joints", 16},     {"parts", 10},    {"fps", 24.0},  {"far_value", 100.0},
               {"orbit_radius_min", 2.6}, {"orbit_radius_max", 3.4}};
  c["codec"] = {{"channels", 16},
                {"f_t", 4},
                {"f_s", 8},
                {"base_width", 16},
                {"tail_width", 0},
                {"train", {{"steps", 900}, {"batch", 1}, {"lr", 2e-3},
                           {"holdout_rmse_threshold", 0.2}}}};
  c["backbone"] = {{"blocks", 2}, {"width", 128}, {"heads", 4}, {"mlp_ratio", 4}};
  // shared trainer knobs; the paper-reported optimizer recipe
  c["trainer"] = {{"warmup_frac", 0.10},
                  {"clip_norm", 1.0},
                  {"drop_norm", 10.0},
                  {"mask_query_tokens", true},
                  {"input_timestep", "end"},
                  {"task_weights", {1, 1, 1, 1, 1, 2}},
                  {"log_every", 50}};
  // desk-scale stage splits; lr re-tuned for from-scratch desk training
  c["pretrain"] = {{"steps", 400}, {"batch", 4}, {"base_lr", 1e-3}};
  c["stage1"] = {{"steps", 2000}, {"batch", 8}, {"base_lr", 1e-3}};
  c["stage2"] = {{"steps", 1000}, {"batch", 2}, {"base_lr", 3e-4}, {"decoder_training", true}};
  c["eval"] = {{"tasks", {"depth", "normal", "segmentation", "semantics", "kp2d", "kp3d"}}};

  if (profile == "paper-shape") {
    c["data"]["frames"] = 81;
    c["data"]["height"] = 480;
    c["data"]["width"] = 832;
  } else if (profile != "desk") {
    throw ConfigError("unknown profile '" + profile + "' (desk | paper-shape)");
  }
  return c;
}

inline void deep_merge(json& base, const json& over) {
  for (auto it = over.begin(); it != over.end(); ++it) {
    if (it->is_object() && base.contains(it.key()) && base[it.key()].is_object())
      deep_merge(base[it.key()], *it);
    else
      base[it.key()] = *it;
  }
}

inline json parse_scalar(const std::string& value) {
  try {
    return json::parse(value);
  } catch (...) {
    return json(value);  // plain string
  }
}

// path "a.b.c" or "a__b__c"
inline void set_path(json& c, std::string path, const std::string& value) {
  for (size_t p; (p = path.find("__")) != std::string::npos;) path.replace(p, 2, ".");
  json* node = &c;
  size_t pos = 0;
  while (true) {
    size_t dot = path.find('.', pos);
    std::string key = path.substr(pos, dot == std::string::npos ? dot : dot - pos);
    if (dot == std::string::npos) {
      (*node)[key] = parse_scalar(value);
      return;
    }
    node = &(*node)[key];
    pos = dot + 1;
  }
}

inline void apply_env_overrides(json& c, char** envp = nullptr) {
  char** env = envp ? envp : ::environ;
  for (char** e = env; *e; ++e) {
    std::string kv(*e);
    if (kv.rfind("UVP_", 0) != 0) continue;
    size_t eq = kv.find('=');
    if (eq == std::string::npos) continue;
    std::string key = kv.substr(4, eq - 4);
    if (key == "THREADS") continue;  // handled by the thread pool
    set_path(c, key, kv.substr(eq + 1));
  }
}

struct RunConfig {
  json tree;

  static RunConfig load(const std::string& profile, const std::string& config_file,
                        const std::vector<std::string>& sets) {
    RunConfig rc;
    rc.tree = default_config(profile.empty() ? "desk" : profile);
    if (!config_file.empty()) {
      std::ifstream f(config_file);
      if (!f.good()) throw ConfigError("cannot read config file " + config_file);
      json user;
      try {
        f >> user;
      } catch (const std::exception& e) {
        throw ConfigError(std::string("config parse error: ") + e.what());
      }
      if (user.contains("profile") && user["profile"] != rc.tree["profile"])
        rc.tree = default_config(user["profile"].get<std::string>());
      deep_merge(rc.tree, user);
    }
    apply_env_overrides(rc.tree);
    for (const auto& s : sets) {
      size_t eq = s.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects key=value, got " + s);
      set_path(rc.tree, s.substr(0, eq), s.substr(eq + 1));
    }
    return rc;
  }

  bool paper_shape() const { return tree["profile"] == "paper-shape"; }

  datagen::GenConfig gen_config() const {
    datagen::GenConfig g;
    const json& d = tree.at("data");
    g.frames = d.at("frames").get<int64_t>();
    g.height = d.at("height").get<int64_t>();
    g.width = d.at("width").get<int64_t>();
    g.joints = d.at("joints").get<int>();
    g.parts = d.at("parts").get<int>();
    g.fps = d.at("fps").get<double>();
    g.far_value = d.at("far_value").get<double>();
    g.orbit_radius_min = d.at("orbit_radius_min").get<double>();
    g.orbit_radius_max = d.at("orbit_radius_max").get<double>();
    return g;
  }

  codec::CodecConfig codec_config() const {
    codec::CodecConfig c;
    const json& j = tree.at("codec");
    c.channels = j.at("channels").get<int>();
    c.f_t = j.at("f_t").get<int>();
    c.f_s = j.at("f_s").get<int>();
    c.base_width = j.at("base_width").get<int>();
    c.tail_width_cfg = j.at("tail_width").get<int>();
    return c;
  }

  dit::BackboneConfig backbone_config() const {
    dit::BackboneConfig b;
    const json& j = tree.at("backbone");
    b.blocks = j.at("blocks").get<int>();
    b.width = j.at("width").get<int>();
    b.heads = j.at("heads").get<int>();
    b.mlp_ratio = j.at("mlp_ratio").get<int>();
    b.latent_channels = tree.at("codec").at("channels").get<int>();
    const json& d = tree.at("data");
    b.frames = d.at("frames").get<int64_t>();
    codec::LatentShape ls =
        codec::latent_shape(d.at("frames").get<int64_t>(), d.at("height").get<int64_t>(),
                            d.at("width").get<int64_t>(), tree.at("codec").at("f_t").get<int>(),
                            tree.at("codec").at("f_s").get<int>());
    b.latent_frames = ls.t;
    b.latent_height = ls.h;
    b.latent_width = ls.w;
    b.joints = d.at("joints").get<int>();
    return b;
  }

  trainer::TrainConfig train_config(trainer::Stage stage) const {
    trainer::TrainConfig t;
    const json& shared = tree.at("trainer");
    t.warmup_frac = shared.at("warmup_frac").get<double>();
    t.clip_norm = shared.at("clip_norm").get<double>();
    t.drop_norm = shared.at("drop_norm").get<double>();
    t.mask_query_tokens = shared.at("mask_query_tokens").get<bool>();
    std::string ts = shared.at("input_timestep").get<std::string>();
    if (ts == "end")
      t.input_timestep = 0.0;
    else if (ts == "start")
      t.input_timestep = 1.0;
    else
      throw ConfigError("trainer.input_timestep must be 'end' or 'start'");
    auto tw = shared.at("task_weights");
    if (tw.size() != kPerceptionTaskCount)
      throw ConfigError("trainer.task_weights needs 6 entries");
    for (int i = 0; i < kPerceptionTaskCount; ++i)
      t.task_weights[static_cast<size_t>(i)] = tw.at(i).get<double>();
    t.log_every = shared.at("log_every").get<int64_t>();

    const char* key = stage == trainer::Stage::Pretrain
                          ? "pretrain"
                          : (stage == trainer::Stage::Latent ? "stage1" : "stage2");
    const json& s = tree.at(key);
    t.stage = stage;
    t.steps = s.at("steps").get<int64_t>();
    t.batch_size = s.at("batch").get<int64_t>();
    t.base_lr = s.at("base_lr").get<double>();
    if (stage == trainer::Stage::Ambient)
      t.decoder_training = s.at("decoder_training").get<bool>();
    t.seed = tree.at("seed").get<uint64_t>() + static_cast<uint64_t>(stage) * 101;
    return t;
  }

  std::vector<uint64_t> clip_seeds() const {
    uint64_t base = tree.at("seed").get<uint64_t>();
    int64_t clips = tree.at("data").at("clips").get<int64_t>();
    std::vector<uint64_t> seeds;
    for (int64_t i = 0; i < clips; ++i) seeds.push_back(base + static_cast<uint64_t>(i));
    return seeds;
  }
};

// ---------------------------------------------------------------------------
// paper-shape dry run

// Shape plumbing only; never allocates training-scale buffers.
inline int dry_run_shapes(const RunConfig& rc, std::FILE* out) {
  const json& d = rc.tree.at("data");
  int64_t T = d.at("frames").get<int64_t>();
  int64_t H = d.at("height").get<int64_t>();
  int64_t W = d.at("width").get<int64_t>();
  int f_t = rc.tree.at("codec").at("f_t").get<int>();
  int f_s = rc.tree.at("codec").at("f_s").get<int>();
  codec::LatentShape ls = codec::latent_shape(T, H, W, f_t, f_s);
  std::fprintf(out, "profile %s: video %ldx%ldx%ld -> latents %ldx%ldx%ld (f_t=%d, f_s=%d)\n",
               rc.tree.at("profile").get<std::string>().c_str(), static_cast<long>(T),
               static_cast<long>(H), static_cast<long>(W), static_cast<long>(ls.t),
               static_cast<long>(ls.h), static_cast<long>(ls.w), f_t, f_s);
  std::fprintf(out, "query tokens: %ld (one per source frame)\n", static_cast<long>(T));
  bool ok = true;
  if (rc.paper_shape())
    ok = ls.t == 21 && ls.h == 60 && ls.w == 104 && T == 81;
  std::fprintf(out, "shape check: %s\n", ok ? "ok" : "MISMATCH");
  return ok ? 0 : 1;
}

// ---------------------------------------------------------------------------
// pipeline steps (each idempotent unless force)

inline bool artifact_fresh(const fs::path& p, bool force, std::FILE* out) {
  if (force || !fs::exists(p)) return false;
  std::fprintf(out, "[skip] %s exists (use --force to regenerate)\n", p.string().c_str());
  return true;
}

inline int cmd_datagen(const RunConfig& rc, const fs::path& out_dir, bool force,
                       std::FILE* out) {
  if (rc.paper_shape()) return dry_run_shapes(rc, out);
  if (artifact_fresh(out_dir / "manifest.json", force, out)) return 0;
  datagen::GenConfig g = rc.gen_config();
  auto seeds = rc.clip_seeds();
  std::fprintf(out, "[datagen] %zu clips of %ldx%ldx%ld -> %s\n", seeds.size(),
               static_cast<long>(g.frames), static_cast<long>(g.height),
               static_cast<long>(g.width), out_dir.string().c_str());
  datagen::generate_dataset(out_dir, g, seeds);
  return 0;
}

// every training video: rgb plus the four ambient-encoded modalities
inline std::vector<Tensor> codec_training_videos(const fs::path& data_dir) {
  datagen::DatasetManifest m = datagen::load_manifest(data_dir);
  std::vector<Tensor> videos;
  for (uint64_t seed : m.clip_seeds) {
    datagen::VideoClip clip;
    datagen::GroundTruthBundle gt;
    datagen::read_clip(data_dir, m, seed, clip, gt);
    videos.push_back(clip.rgb.to_tensor());
    for (Task t : {Task::Depth, Task::Normal, Task::Segmentation, Task::Semantics})
      videos.push_back(perception::encode_modality(gt, t).values);
  }
  return videos;
}

inline int cmd_train_codec(const RunConfig& rc, const fs::path& data_dir,
                           const fs::path& out_dir, bool force, std::FILE* out) {
  if (rc.paper_shape()) return dry_run_shapes(rc, out);
  fs::create_directories(out_dir);
  fs::path ckpt = out_dir / "codec.ckpt";
  if (artifact_fresh(ckpt, force, out)) return 0;

  codec::Codec cdc(rc.codec_config());
  Rng init(rc.tree.at("seed").get<uint64_t>() ^ 0xc0dec);
  cdc.init_weights(init);

  codec::CodecTrainConfig tc;
  const json& j = rc.tree.at("codec").at("train");
  tc.steps = j.at("steps").get<int64_t>();
  tc.batch = j.at("batch").get<int64_t>();
  tc.lr = j.at("lr").get<double>();
  tc.holdout_rmse_threshold = j.at("holdout_rmse_threshold").get<double>();
  tc.seed = rc.tree.at("seed").get<uint64_t>();

  auto videos = codec_training_videos(data_dir);
  std::fprintf(out, "[train-codec] %zu videos, %ld steps\n", videos.size(),
               static_cast<long>(tc.steps));
  codec::CodecTrainResult res = codec::train_codec(cdc, videos, tc, out);
  std::fprintf(out, "[train-codec] final loss %.6f holdout rmse %.4f\n", res.final_loss,
               res.holdout_rmse);
  cdc.save(ckpt);
  return 0;
}

struct StagePaths {
  fs::path codec_in, backbone_in;  // inputs ("" = fresh backbone)
  fs::path codec_out, backbone_out, state_out;
};

inline StagePaths stage_paths(trainer::Stage stage, const fs::path& out_dir) {
  StagePaths p;
  switch (stage) {
    case trainer::Stage::Pretrain:
      p.codec_in = out_dir / "codec.ckpt";
      p.backbone_in = "";
      p.codec_out = "";
      p.backbone_out = out_dir / "backbone_pretrain.ckpt";
      p.state_out = out_dir / "state_pretrain.ckpt";
      break;
    case trainer::Stage::Latent:
      p.codec_in = out_dir / "codec.ckpt";
      p.backbone_in = out_dir / "backbone_pretrain.ckpt";
      p.codec_out = "";
      p.backbone_out = out_dir / "backbone_latent.ckpt";
      p.state_out = out_dir / "state_latent.ckpt";
      break;
    case trainer::Stage::Ambient:
      p.codec_in = out_dir / "codec.ckpt";
      p.backbone_in = out_dir / "backbone_latent.ckpt";
      p.codec_out = out_dir / "codec_ambient.ckpt";
      p.backbone_out = out_dir / "backbone_ambient.ckpt";
      p.state_out = out_dir / "state_ambient.ckpt";
      break;
  }
  return p;
}

inline int cmd_train_stage(const RunConfig& rc, trainer::Stage stage, const fs::path& data_dir,
                           const fs::path& out_dir, bool force, std::FILE* out) {
  if (rc.paper_shape()) return dry_run_shapes(rc, out);
  fs::create_directories(out_dir);
  StagePaths paths = stage_paths(stage, out_dir);
  if (artifact_fresh(paths.backbone_out, force, out)) return 0;
  check(fs::exists(paths.codec_in),
        "missing codec checkpoint " + paths.codec_in.string() + " (run train-codec first)");

  codec::Codec cdc = codec::Codec::load(paths.codec_in);
  dit::Backbone model = [&] {
    if (!paths.backbone_in.empty()) {
      check(fs::exists(paths.backbone_in), "missing backbone checkpoint " +
                                               paths.backbone_in.string() +
                                               " (run the previous stage first)");
      return dit::Backbone::load(paths.backbone_in);
    }
    dit::Backbone fresh(rc.backbone_config());
    Rng init(rc.tree.at("seed").get<uint64_t>() ^ 0xb0b0);
    fresh.init_weights(init);
    return fresh;
  }();

  datagen::DatasetManifest m = datagen::load_manifest(data_dir);
  trainer::TrainSet data = trainer::TrainSet::build(data_dir, m.clip_seeds, cdc);
  trainer::TrainConfig tc = rc.train_config(stage);
  trainer::Trainer tr(cdc, model, tc);
  tr.set_log_file(out_dir / "train_log.csv");
  std::fprintf(out, "[train:%s] %ld steps, batch %ld, lr %.2e, %zu clips\n",
               trainer::stage_name(stage), static_cast<long>(tc.steps),
               static_cast<long>(tc.batch_size), tc.base_lr, data.clips.size());
  trainer::RunResult res = tr.run(data, out);
  std::fprintf(out, "[train:%s] first100 %.6f last100 %.6f skipped %ld\n",
               trainer::stage_name(stage), res.first100_mean, res.last100_mean,
               static_cast<long>(res.skipped));

  std::string codec_hash = std::to_string(cdc.weights_hash());
  model.save(paths.backbone_out, codec_hash);
  if (!paths.codec_out.empty()) cdc.save(paths.codec_out);
  tr.save_state(paths.state_out);
  return 0;
}

// newest trained pair available in an output dir
inline std::pair<fs::path, fs::path> model_pair(const fs::path& out_dir) {
  if (fs::exists(out_dir / "backbone_ambient.ckpt"))
    return {out_dir / "codec_ambient.ckpt", out_dir / "backbone_ambient.ckpt"};
  if (fs::exists(out_dir / "backbone_latent.ckpt"))
    return {out_dir / "codec.ckpt", out_dir / "backbone_latent.ckpt"};
  if (fs::exists(out_dir / "backbone_pretrain.ckpt"))
    return {out_dir / "codec.ckpt", out_dir / "backbone_pretrain.ckpt"};
  throw Error("no trained backbone checkpoint found in " + out_dir.string());
}

inline int cmd_eval(const RunConfig& rc, const fs::path& data_dir, const fs::path& out_dir,
                    bool oracle, std::FILE* out) {
  if (rc.paper_shape()) return dry_run_shapes(rc, out);
  std::vector<Task> tasks;
  for (const auto& t : rc.tree.at("eval").at("tasks"))
    tasks.push_back(parse_task(t.get<std::string>()));

  metrics::EvalReport rep;
  if (oracle) {
    rep = metrics::evaluate_dataset(data_dir, tasks, metrics::oracle_predictor(data_dir));
    rep.notes = "oracle mode: ground truth fed as prediction";
  } else {
    auto [codec_path, backbone_path] = model_pair(out_dir);
    codec::Codec cdc = codec::Codec::load(codec_path);
    dit::Backbone model = dit::Backbone::load(backbone_path);
    rep = metrics::evaluate_dataset(data_dir, tasks, perception::model_predictor(cdc, model));
    rep.notes = "model: " + backbone_path.string();
  }
  fs::path rep_dir = out_dir / (oracle ? "report_oracle" : "report");
  metrics::write_report(rep_dir, rep);
  std::fputs(metrics::report_text(rep).c_str(), out);
  std::fprintf(out, "[eval] report written to %s\n", rep_dir.string().c_str());
  return 0;
}

// ---------------------------------------------------------------------------
// inference + visualization

namespace viz {

inline uint8_t to_byte(double v) {
  return static_cast<uint8_t>(std::clamp(v, 0.0, 1.0) * 255.0 + 0.5);
}

// [T,H,W,3] in [0,1] -> per-frame rgb8
inline std::vector<uint8_t> frame_rgb8(const Tensor& video, int64_t f) {
  int64_t H = video.dim(1), W = video.dim(2);
  std::vector<uint8_t> out(static_cast<size_t>(H * W * 3));
  for (int64_t i = 0; i < H * W; ++i)
    for (int c = 0; c < 3; ++c)
      out[static_cast<size_t>(i * 3 + c)] = to_byte(video[(f * H * W + i) * 3 + c]);
  return out;
}

inline void draw_cross(std::vector<uint8_t>& img, int64_t H, int64_t W, double u, double v,
                       uint8_t r, uint8_t g, uint8_t b) {
  int64_t x = static_cast<int64_t>(u * static_cast<double>(W));
  int64_t y = static_cast<int64_t>(v * static_cast<double>(H));
  for (int64_t d = -2; d <= 2; ++d) {
    int64_t xs[2] = {x + d, x};
    int64_t ys[2] = {y, y + d};
    for (int k = 0; k < 2; ++k)
      if (xs[k] >= 0 && xs[k] < W && ys[k] >= 0 && ys[k] < H) {
        size_t i = static_cast<size_t>((ys[k] * W + xs[k]) * 3);
        img[i] = r;
        img[i + 1] = g;
        img[i + 2] = b;
      }
  }
}

inline std::vector<uint8_t> hstack(const std::vector<std::vector<uint8_t>>& tiles, int64_t H,
                                   int64_t W) {
  int64_t n = static_cast<int64_t>(tiles.size());
  std::vector<uint8_t> out(static_cast<size_t>(H * W * n * 3));
  for (int64_t y = 0; y < H; ++y)
    for (int64_t t = 0; t < n; ++t)
      std::copy_n(tiles[static_cast<size_t>(t)].data() + y * W * 3, W * 3,
                  out.data() + (y * n * W + t * W) * 3);
  return out;
}

}  // namespace viz

inline int cmd_infer(const RunConfig& rc, Task task, const fs::path& clip_dir,
                     const fs::path& out_dir, const fs::path& model_dir, std::FILE* out) {
  if (rc.paper_shape()) return dry_run_shapes(rc, out);
  fs::path data_root = clip_dir.parent_path();
  datagen::DatasetManifest m = datagen::load_manifest(data_root);
  std::string dirname = clip_dir.filename().string();
  check(dirname.rfind("clip_", 0) == 0, "infer --in expects a clip_<seed> directory");
  uint64_t seed = std::stoull(dirname.substr(5));

  datagen::VideoClip clip;
  datagen::GroundTruthBundle gt;
  datagen::read_clip(data_root, m, seed, clip, gt, /*require_all=*/false);
  Tensor rgb = clip.rgb.to_tensor();

  auto [codec_path, backbone_path] = model_pair(model_dir);
  codec::Codec cdc = codec::Codec::load(codec_path);
  dit::Backbone model = dit::Backbone::load(backbone_path);
  PredictOutput pred = perception::predict(rgb, task, cdc, model);

  fs::create_directories(out_dir);
  const int64_t T = rgb.dim(0), H = rgb.dim(1), W = rgb.dim(2);

  if (is_dense(task)) {
    // raw float container plus 8-bit rasters plus side-by-side panels
    io::write_npy(out_dir / (task_name(task) + ".npy"),
                  GridF::from_tensor(pred.video->values));
    ModalityVideo gt_mv = perception::encode_modality(gt, task);
    for (int64_t f = 0; f < T; ++f) {
      auto in_tile = viz::frame_rgb8(rgb, f);
      auto pred_tile = viz::frame_rgb8(pred.video->values, f);
      auto gt_tile = viz::frame_rgb8(gt_mv.values, f);
      char name[64];
      std::snprintf(name, sizeof name, "frame_%03ld.ppm", static_cast<long>(f));
      io::write_ppm(out_dir / name, H, 3 * W, viz::hstack({in_tile, pred_tile, gt_tile}, H, W));
    }
  } else {
    // structured-text keypoint table: frame, joint, coords, visibility
    std::ofstream table(out_dir / (task_name(task) + ".csv"));
    const KeypointSet& kp = *pred.keypoints;
    int64_t K = kp.coords.dim(1);
    table << (task == Task::Kp2d ? "frame,joint,u,v,visibility\n" : "frame,joint,x,y,z\n");
    for (int64_t f = 0; f < T; ++f)
      for (int64_t k = 0; k < K; ++k) {
        table << f << "," << k;
        for (int64_t c = 0; c < kp.coords.dim(2); ++c)
          table << "," << kp.coords[(f * K + k) * kp.coords.dim(2) + c];
        if (task == Task::Kp2d)
          table << "," << static_cast<int>(kp.visibility[static_cast<size_t>(f * K + k)]);
        table << "\n";
      }

    KeypointSet gt2d = perception::gt_kp2d(gt);
    for (int64_t f = 0; f < T; ++f) {
      auto in_tile = viz::frame_rgb8(rgb, f);
      auto overlay = in_tile;
      if (task == Task::Kp2d) {
        for (int64_t k = 0; k < K; ++k)
          viz::draw_cross(overlay, H, W, kp.coords[(f * K + k) * 2],
                          kp.coords[(f * K + k) * 2 + 1], 255, 40, 40);
      }
      auto gt_tile = in_tile;
      for (int64_t k = 0; k < K; ++k)
        if (gt2d.visibility[static_cast<size_t>(f * K + k)])
          viz::draw_cross(gt_tile, H, W, gt2d.coords[(f * K + k) * 2],
                          gt2d.coords[(f * K + k) * 2 + 1], 40, 255, 40);
      char name[64];
      std::snprintf(name, sizeof name, "frame_%03ld.ppm", static_cast<long>(f));
      io::write_ppm(out_dir / name, H, 3 * W, viz::hstack({in_tile, overlay, gt_tile}, H, W));
    }
  }

  std::ofstream footer(out_dir / "panel_footer.txt");
  footer << "panels: input | prediction | ground-truth\n"
         << "normals are shown as (n+1)/2 rgb; depth as per-video min-max normalized "
            "disparity; keypoints as crosses (red prediction, green gt)\n";
  std::fprintf(out, "[infer] %s for clip_%llu written to %s\n", task_name(task).c_str(),
               static_cast<unsigned long long>(seed), out_dir.string().c_str());
  return 0;
}

// ---------------------------------------------------------------------------
// selftest: the fast oracle/invariant battery

struct CheckResult {
  std::string name;
  bool pass = false;
  std::string detail;
};

inline std::vector<CheckResult> selftest_battery() {
  std::vector<CheckResult> out;
  auto add = [&out](const std::string& name, bool pass, const std::string& detail = "") {
    out.push_back({name, pass, detail});
  };

  // shape arithmetic
  try {
    codec::LatentShape paper = codec::latent_shape(81, 480, 832, 4, 8);
    codec::LatentShape desk = codec::latent_shape(17, 64, 64, 4, 8);
    add("latent-shape-arithmetic",
        paper.t == 21 && paper.h == 60 && paper.w == 104 && desk.t == 5 && desk.h == 8 &&
            desk.w == 8);
  } catch (const std::exception& e) {
    add("latent-shape-arithmetic", false, e.what());
  }

  // rope identities
  {
    Rng r(0);
    bool ok = true;
    for (int it = 0; it < 200 && ok; ++it) {
      std::vector<double> x(32);
      for (auto& v : x) v = r.gaussian();
      dit::RoPEAngles a = dit::rope3d_angles(r.uniform(0, 8), r.uniform(0, 8), r.uniform(0, 8), 32);
      auto y = dit::apply_rope(x, a);
      double n0 = 0, n1 = 0;
      for (size_t i = 0; i < x.size(); ++i) {
        n0 += x[i] * x[i];
        n1 += y[i] * y[i];
      }
      ok = std::fabs(std::sqrt(n0) - std::sqrt(n1)) < 1e-6;
    }
    add("rope-norm-preservation", ok);
  }

  // loss oracles
  {
    bool ok = true;
    Tensor mask = Tensor::full({1}, 1.0);
    Tensor p({1, 1, 1, 3}, {1, 0, 0}), g({1, 1, 1, 3}, {0, 1, 0});
    double v = losses::value(losses::normal_loss(ad::constant(p), ad::constant(g), mask));
    ok = ok && std::fabs(v - (std::sqrt(2.0) + 1.0)) < 1e-9;
    Tensor m4 = Tensor::full({4}, 1.0);
    Tensor gt({4}, {1, 2, 3, 4}), pr({4}, {1, 2, 3, 5});
    double s = losses::value(losses::ssi_depth_loss(ad::constant(pr), ad::constant(gt), m4));
    ok = ok && std::fabs(s - 0.2) < 1e-9;
    add("loss-oracles", ok);
  }

  // metric goldens
  {
    Rng r(1);
    Tensor gt = r.randn({4, 5, 3});
    Tensor off = gt;
    for (auto& x : off.v) x += 0.05;
    metrics::PoseMetrics pm = metrics::pose_metrics(off, gt, 24.0);
    bool ok = pm.mpjpe_mm < 1e-9 && pm.pa_mpjpe_mm < 1e-6;
    Tensor a = r.rand_uniform({2, 6, 6}, 0, 1);
    metrics::MattingMetrics mm = metrics::matting_metrics(a, a);
    ok = ok && mm.mad == 0 && mm.mse == 0 && mm.grad == 0 && mm.conn == 0 && *mm.dtssd == 0;
    add("metric-goldens", ok);
  }

  // analytic sphere + projection
  {
    CameraModel cam;
    cam.focal_px = 100;
    cam.cx = 32;
    cam.cy = 32;
    cam.width = 64;
    cam.height = 64;
    Projected pr = project_point({0.1, 0.2, 2.0}, cam);
    add("projection-arithmetic",
        std::fabs(pr.u - 0.578125) < 1e-12 && std::fabs(pr.v - 0.65625) < 1e-12);

    std::vector<datagen::CapsuleW> caps = {{{0, 0, 3}, {0, 0, 3}, 0.5, 0}};
    datagen::TraceHit hit = datagen::trace_figure({0, 0, 0}, {0, 0, 1}, caps, 10.0);
    add("analytic-sphere-trace", hit.hit && std::fabs(hit.t - 2.5) < 1e-9);
  }

  // datagen determinism
  {
    datagen::GenConfig g;
    g.frames = 3;
    g.height = 16;
    g.width = 16;
    datagen::SceneSpec a = datagen::sample_scene(0, g);
    datagen::SceneSpec b = datagen::sample_scene(0, g);
    add("scene-sampling-determinism",
        a.camera.focal_px == b.camera.focal_px &&
            a.motion.joints[1].a.amp == b.motion.joints[1].a.amp);
  }

  return out;
}

inline int cmd_selftest(std::FILE* out) {
  auto results = selftest_battery();
  bool all = true;
  for (const auto& r : results) {
    std::fprintf(out, "[%s] %s%s%s\n", r.pass ? "PASS" : "FAIL", r.name.c_str(),
                 r.detail.empty() ? "" : ": ", r.detail.c_str());
    all = all && r.pass;
  }
  std::fprintf(out, "selftest: %s\n", all ? "all checks passed" : "FAILURES present");
  return all ? 0 : 1;
}

}  // namespace uvp::harness
