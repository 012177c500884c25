#include "doctest.h"

#include <filesystem>

#include "uvp/perception.hpp"
#include "uvp/trainer.hpp"

using namespace uvp;
namespace fs = std::filesystem;

namespace {

struct Fixture {
  fs::path root = fs::temp_directory_path() / "uvp_perception_fx";
  datagen::DatasetManifest manifest;
  codec::Codec cdc{[] {
    codec::CodecConfig c;
    c.channels = 4;
    c.base_width = 4;
    return c;
  }()};
  dit::Backbone model{[] {
    dit::BackboneConfig b;
    b.blocks = 2;
    b.width = 32;
    b.heads = 4;
    b.mlp_ratio = 2;
    b.latent_channels = 4;
    b.frames = 5;
    b.latent_frames = 2;
    b.latent_height = 4;
    b.latent_width = 4;
    b.joints = 16;
    return b;
  }()};
  Tensor rgb;

  Fixture() {
    fs::remove_all(root);
    datagen::GenConfig g;
    g.frames = 5;
    g.height = 32;
    g.width = 32;
    manifest = datagen::generate_dataset(root, g, {0, 1});
    datagen::VideoClip clip;
    datagen::GroundTruthBundle gt;
    datagen::read_clip(root, manifest, 0, clip, gt);
    rgb = clip.rgb.to_tensor();
  }
  ~Fixture() { fs::remove_all(root); }
};

Fixture& fx() {
  static Fixture f;
  return f;
}

}  // namespace

TEST_CASE("predict runs exactly one backbone forward per call for every task") {
  auto& f = fx();
  for (Task t : perception_tasks()) {
    f.model.reset_forward_count();
    PredictOutput out = perception::predict(f.rgb, t, f.cdc, f.model);
    CHECK(f.model.forward_count() == 1);
    if (is_dense(t)) {
      REQUIRE(out.video.has_value());
      CHECK(out.video->values.shape == f.rgb.shape);
      for (double v : out.video->values.v) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
      }
    } else {
      REQUIRE(out.keypoints.has_value());
      CHECK(out.keypoints->coords.dim(0) == 5);
      CHECK(out.keypoints->coords.dim(1) == 16);
    }
  }
  CHECK_THROWS(perception::predict(f.rgb, Task::Generate, f.cdc, f.model));
}

TEST_CASE("predict at initialization has no NaN path and leaves inputs untouched") {
  auto& f = fx();
  Tensor before = f.rgb;
  PredictOutput out = perception::predict(f.rgb, Task::Depth, f.cdc, f.model);
  CHECK(out.video->values.all_finite());
  for (int64_t i = 0; i < before.numel(); ++i) CHECK(before[i] == f.rgb[i]);

  // identical inputs, identical outputs
  PredictOutput out2 = perception::predict(f.rgb, Task::Depth, f.cdc, f.model);
  for (int64_t i = 0; i < out.video->values.numel(); ++i)
    CHECK(out.video->values[i] == out2.video->values[i]);
}

TEST_CASE("kp3d predictions are pelvis-rooted, kp2d bounded") {
  auto& f = fx();
  PredictOutput kp3 = perception::predict(f.rgb, Task::Kp3d, f.cdc, f.model);
  for (int64_t fr = 0; fr < 5; ++fr)
    for (int c = 0; c < 3; ++c) CHECK(kp3.keypoints->coords[(fr * 16) * 3 + c] == 0.0);
  CHECK(kp3.keypoints->space == KeypointSpace::RootRelativeCamera);

  PredictOutput kp2 = perception::predict(f.rgb, Task::Kp2d, f.cdc, f.model);
  for (double v : kp2.keypoints->coords.v) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
  CHECK(kp2.keypoints->visibility.size() == 5 * 16);
}

TEST_CASE("model predictor slots into evaluate_dataset") {
  auto& f = fx();
  metrics::EvalReport rep = metrics::evaluate_dataset(
      f.root, {Task::Depth, Task::Kp3d}, perception::model_predictor(f.cdc, f.model));
  REQUIRE(rep.tasks.size() == 2);
  CHECK(rep.tasks[0].clips.size() == 2);
  CHECK(std::isfinite(rep.tasks[0].aggregate.at("absrel")));
  CHECK(std::isfinite(rep.tasks[1].aggregate.at("mpjpe_mm")));
}
