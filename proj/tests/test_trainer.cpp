#include "doctest.h"

#include <filesystem>

#include "uvp/perception.hpp"
#include "uvp/trainer.hpp"

using namespace uvp;
using namespace uvp::trainer;
namespace fs = std::filesystem;

namespace {

// tiny end-to-end fixture shared by the smoke tests
struct Mini {
  fs::path root;
  datagen::DatasetManifest manifest;
  codec::Codec cdc{[] {
    codec::CodecConfig c;
    c.channels = 4;
    c.base_width = 4;
    return c;
  }()};
  dit::BackboneConfig bcfg;
  TrainSet data;

  explicit Mini(int clips = 4) {
    root = fs::temp_directory_path() / "uvp_trainer_mini";
    fs::remove_all(root);
    datagen::GenConfig g;
    g.frames = 5;
    g.height = 32;
    g.width = 32;
    std::vector<uint64_t> seeds;
    for (int i = 0; i < clips; ++i) seeds.push_back(static_cast<uint64_t>(i));
    manifest = datagen::generate_dataset(root, g, seeds);

    std::vector<Tensor> vids;
    for (uint64_t sd : seeds) {
      datagen::VideoClip clip;
      datagen::GroundTruthBundle gt;
      datagen::read_clip(root, manifest, sd, clip, gt);
      vids.push_back(clip.rgb.to_tensor());
      for (Task t : {Task::Depth, Task::Normal, Task::Segmentation, Task::Semantics})
        vids.push_back(perception::encode_modality(gt, t).values);
    }
    codec::CodecTrainConfig ct;
    ct.steps = 150;
    ct.batch = 1;
    ct.lr = 3e-3;
    ct.hold_out_last = false;
    ct.holdout_rmse_threshold = 0.5;
    codec::train_codec(cdc, vids, ct);

    bcfg.blocks = 2;
    bcfg.width = 32;
    bcfg.heads = 4;
    bcfg.mlp_ratio = 2;
    bcfg.latent_channels = 4;
    bcfg.frames = 5;
    bcfg.latent_frames = 2;
    bcfg.latent_height = 4;
    bcfg.latent_width = 4;
    bcfg.joints = 16;
    data = TrainSet::build(root, seeds, cdc);
  }
  ~Mini() { fs::remove_all(root); }
};

// built once; tests that mutate the codec take a deep copy
Mini& shared_mini() {
  static Mini m(4);
  return m;
}

TrainConfig fast_cfg(Stage stage, int64_t steps, uint64_t seed = 0) {
  TrainConfig cfg;
  cfg.stage = stage;
  cfg.steps = steps;
  cfg.batch_size = 4;
  cfg.base_lr = 3e-3;  // mini-model smoke rate; the spec default stays 5e-5
  cfg.seed = seed;
  cfg.log_every = 1000;
  return cfg;
}

}  // namespace

TEST_CASE("lr schedule oracles") {
  TrainConfig cfg;
  cfg.base_lr = 5e-5;
  cfg.warmup_frac = 0.10;
  CHECK(lr_schedule(0, 1000, cfg) == 0.0);
  CHECK(lr_schedule(100, 1000, cfg) == doctest::Approx(5e-5).epsilon(1e-15));
  CHECK(lr_schedule(1000, 1000, cfg) == doctest::Approx(5e-5).epsilon(1e-15));
  CHECK(lr_schedule(50, 1000, cfg) == doctest::Approx(2.5e-5).epsilon(1e-15));

  // piecewise linear and continuous at the warmup boundary
  double before = lr_schedule(99, 1000, cfg);
  double at = lr_schedule(100, 1000, cfg);
  CHECK(at - before == doctest::Approx(5e-5 / 100).epsilon(1e-9));
  for (int64_t s = 1; s < 100; ++s) {
    double d = lr_schedule(s, 1000, cfg) - lr_schedule(s - 1, 1000, cfg);
    CHECK(d == doctest::Approx(5e-5 / 100).epsilon(1e-9));
  }

  TrainConfig bad = cfg;
  bad.warmup_frac = 1.5;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.drop_norm = 0.5;  // below clip
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("grad control oracles") {
  TrainConfig cfg;
  cfg.clip_norm = 1.0;
  cfg.drop_norm = 10.0;
  CHECK(grad_control(0.5, cfg).factor == 1.0);
  CHECK_FALSE(grad_control(0.5, cfg).skip);
  CHECK(grad_control(5.0, cfg).factor == doctest::Approx(0.2).epsilon(1e-15));
  CHECK(grad_control(20.0, cfg).skip);
  CHECK(grad_control(std::numeric_limits<double>::quiet_NaN(), cfg).skip);
  CHECK(grad_control(std::numeric_limits<double>::infinity(), cfg).skip);
}

TEST_CASE("task sampling") {
  Rng r(0);
  std::array<double, kPerceptionTaskCount> only_depth{1, 0, 0, 0, 0, 0};
  for (int i = 0; i < 50; ++i) CHECK(sample_task(r, only_depth) == Task::Depth);

  std::array<double, kPerceptionTaskCount> uniform{1, 1, 1, 1, 1, 1};
  std::array<int, kPerceptionTaskCount> counts{};
  const int n = 10000;
  for (int i = 0; i < n; ++i) ++counts[static_cast<size_t>(sample_task(r, uniform))];
  double p = 1.0 / 6.0;
  double sigma = std::sqrt(p * (1 - p) * n);
  for (int c : counts) CHECK(std::fabs(c - n * p) < 3 * sigma);

  std::array<double, kPerceptionTaskCount> neg{1, -1, 0, 0, 0, 0};
  CHECK_THROWS_AS(sample_task(r, neg), ConfigError);
  std::array<double, kPerceptionTaskCount> zero{};
  CHECK_THROWS_AS(sample_task(r, zero), ConfigError);
}

TEST_CASE("pretrain timestep sampling is uniform (chi-squared)") {
  Rng r(123);
  const int n = 10000, bins = 20;
  std::array<int, bins> hist{};
  for (int i = 0; i < n; ++i) {
    double t = sample_timestep(r);
    CHECK(t >= 0.0);
    CHECK(t < 1.0);
    ++hist[static_cast<size_t>(std::min(bins - 1, static_cast<int>(t * bins)))];
  }
  double expect = static_cast<double>(n) / bins;
  double chi2 = 0;
  for (int h : hist) chi2 += (h - expect) * (h - expect) / expect;
  // dof 19, p = 0.01 critical value
  CHECK(chi2 < 36.191);
}

TEST_CASE("skipped batches leave weights and moments untouched") {
  Mini& mini = shared_mini();
  dit::Backbone model(mini.bcfg);
  Rng ir(1);
  model.init_weights(ir, false);

  TrainConfig cfg = fast_cfg(Stage::Latent, 1);
  cfg.clip_norm = 1e-12;
  cfg.drop_norm = 1e-11;  // everything skips
  Trainer tr(mini.cdc, model, cfg);

  uint64_t wh_before = model.weights_hash();
  RunResult res = tr.run(mini.data);
  CHECK(res.skipped == 1);
  CHECK(model.weights_hash() == wh_before);
  for (const auto& p : model.params().all())
    for (double m : p->m.v) CHECK(m == 0.0);
  CHECK(tr.step() == 1);
}

TEST_CASE("training is seed deterministic") {
  Mini& mini = shared_mini();
  auto run_once = [&](uint64_t seed) {
    dit::Backbone model(mini.bcfg);
    Rng ir(7);
    model.init_weights(ir);
    Trainer tr(mini.cdc, model, fast_cfg(Stage::Latent, 8, seed));
    tr.run(mini.data);
    return model.weights_hash();
  };
  CHECK(run_once(3) == run_once(3));
  CHECK(run_once(3) != run_once(4));
}

TEST_CASE("checkpoint resume reproduces the exact continuation") {
  Mini& mini = shared_mini();
  auto dir = fs::temp_directory_path() / "uvp_resume";
  fs::create_directories(dir);

  TrainConfig cfg = fast_cfg(Stage::Latent, 6, 11);

  dit::Backbone one(mini.bcfg);
  Rng ir(9);
  one.init_weights(ir);
  Trainer t1(mini.cdc, one, cfg);
  t1.run(mini.data, nullptr, 6);
  uint64_t direct = one.weights_hash();

  // split run: 3 steps, checkpoint, restore into fresh objects, 3 more
  codec::Codec cdc2 = mini.cdc;
  dit::Backbone two(mini.bcfg);
  Rng ir2(9);
  two.init_weights(ir2);
  Trainer t2(cdc2, two, cfg);
  t2.run(mini.data, nullptr, 3);
  t2.save_state(dir / "state.ckpt");

  codec::Codec cdc3 = mini.cdc;
  dit::Backbone three(mini.bcfg);
  Trainer t3(cdc3, three, cfg);
  t3.load_state(dir / "state.ckpt");
  CHECK(t3.step() == 3);
  // rebuild the data against the restored codec (stage 1 keeps it frozen)
  t3.run(mini.data, nullptr, 3);
  CHECK(three.weights_hash() == direct);

  // config mismatch is refused
  TrainConfig other = cfg;
  other.seed = 99;
  Trainer t4(cdc3, three, other);
  CHECK_THROWS(t4.load_state(dir / "state.ckpt"));
  fs::remove_all(dir);
}

TEST_CASE("pretrain smoke: loss halves from its first-step average") {
  Mini& mini = shared_mini();
  dit::Backbone model(mini.bcfg);
  Rng ir(3);
  model.init_weights(ir);
  TrainConfig cfg = fast_cfg(Stage::Pretrain, 220, 0);
  Trainer tr(mini.cdc, model, cfg);
  RunResult res = tr.run(mini.data);
  INFO("first " << res.first100_mean << " last " << res.last100_mean);
  CHECK(res.last100_mean < 0.5 * res.first100_mean);
  CHECK(res.skipped < 220);
}

TEST_CASE("stage 1 latent smoke: dense-only and keypoint-only overfit") {
  Mini& mini = shared_mini();

  {
    dit::Backbone model(mini.bcfg);
    Rng ir(4);
    model.init_weights(ir);
    TrainConfig cfg = fast_cfg(Stage::Latent, 400, 1);
    cfg.task_weights = {1, 1, 1, 1, 0, 0};  // dense only
    Trainer tr(mini.cdc, model, cfg);
    uint64_t codec_hash = mini.cdc.weights_hash();
    RunResult res = tr.run(mini.data);
    INFO("dense initial " << res.history[0].loss << " last " << res.last100_mean);
    CHECK(res.last100_mean < 0.1 * res.history[0].loss);
    CHECK(mini.cdc.weights_hash() == codec_hash);  // codec frozen in stage 1
  }
  {
    dit::Backbone model(mini.bcfg);
    Rng ir(5);
    model.init_weights(ir);
    TrainConfig cfg = fast_cfg(Stage::Latent, 500, 2);
    cfg.task_weights = {0, 0, 0, 0, 1, 1};  // keypoints only
    Trainer tr(mini.cdc, model, cfg);
    RunResult res = tr.run(mini.data);
    INFO("kp initial " << res.history[0].loss << " last " << res.last100_mean);
    CHECK(res.last100_mean < 0.1 * res.history[0].loss);
  }
}

TEST_CASE("stage 2 ambient: decoder trains, encoder stays frozen") {
  Mini& shared = shared_mini();
  codec::Codec local_cdc = shared.cdc;  // deep copy; stage 2 mutates it
  struct {  // view with the local codec
    codec::Codec& cdc;
    const dit::BackboneConfig& bcfg;
    const TrainSet& data;
  } mini{local_cdc, shared.bcfg, shared.data};

  dit::Backbone model(mini.bcfg);
  Rng ir(6);
  model.init_weights(ir);

  // brief stage 1 so stage 2 starts from something sensible
  TrainConfig s1 = fast_cfg(Stage::Latent, 60, 3);
  Trainer t1(mini.cdc, model, s1);
  t1.run(mini.data);

  auto hash_prefix = [&](const std::string& prefix) {
    uint64_t h = 1469598103934665603ull;
    for (const auto& p : mini.cdc.params().all())
      if (p->name.rfind(prefix, 0) == 0)
        h = fnv1a(p->value().v.data(), p->value().v.size() * sizeof(double), h);
    return h;
  };
  uint64_t enc_before = hash_prefix("enc.");
  uint64_t dec_before = hash_prefix("dec.");

  TrainConfig s2 = fast_cfg(Stage::Ambient, 12, 4);
  s2.batch_size = 2;
  Trainer t2(mini.cdc, model, s2);
  RunResult res = t2.run(mini.data);
  CHECK(res.history.size() == 12);
  CHECK(hash_prefix("enc.") == enc_before);
  CHECK(hash_prefix("dec.") != dec_before);

  // with decoder training disabled the codec is untouched entirely
  uint64_t all_before = mini.cdc.weights_hash();
  TrainConfig s2f = s2;
  s2f.decoder_training = false;
  s2f.seed = 5;
  Trainer t3(mini.cdc, model, s2f);
  t3.run(mini.data, nullptr, 6);
  CHECK(mini.cdc.weights_hash() == all_before);
}

TEST_CASE("prompt routing: different tasks give different v_pred after training") {
  Mini& mini = shared_mini();
  dit::Backbone model(mini.bcfg);
  Rng ir(8);
  model.init_weights(ir);
  Trainer tr(mini.cdc, model, fast_cfg(Stage::Latent, 40, 6));
  tr.run(mini.data);

  const Tensor& z = mini.data.clips[0].rgb_lat_std;
  Tensor a = model.forward(z, Task::Depth, 0.0).v_pred->val;
  Tensor b = model.forward(z, Task::Normal, 0.0).v_pred->val;
  double linf = 0;
  for (int64_t i = 0; i < a.numel(); ++i) linf = std::max(linf, std::fabs(a[i] - b[i]));
  CHECK(linf > 0.0);
}
