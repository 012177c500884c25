#include "doctest.h"

#include <filesystem>
#include <fstream>

#include "uvp/datagen.hpp"

using namespace uvp;
using namespace uvp::datagen;
namespace fs = std::filesystem;

namespace {

GenConfig small_cfg() {
  GenConfig cfg;
  cfg.frames = 5;
  cfg.height = 32;
  cfg.width = 32;
  return cfg;
}

bool scenes_equal(const SceneSpec& a, const SceneSpec& b) {
  if (a.figure.joints.size() != b.figure.joints.size()) return false;
  for (size_t i = 0; i < a.figure.joints.size(); ++i) {
    const auto& ja = a.figure.joints[i];
    const auto& jb = b.figure.joints[i];
    if (ja.parent != jb.parent || ja.rest_offset.x != jb.rest_offset.x ||
        ja.rest_offset.y != jb.rest_offset.y || ja.rest_offset.z != jb.rest_offset.z)
      return false;
  }
  for (size_t i = 0; i < a.figure.bones.size(); ++i)
    if (a.figure.bones[i].radius != b.figure.bones[i].radius) return false;
  for (size_t i = 0; i < a.motion.joints.size(); ++i) {
    const auto& ma = a.motion.joints[i];
    const auto& mb = b.motion.joints[i];
    if (ma.a.amp != mb.a.amp || ma.a.freq != mb.a.freq || ma.a.phase != mb.a.phase)
      return false;
  }
  if (a.camera.focal_px != b.camera.focal_px) return false;
  for (size_t f = 0; f < a.camera.world_to_camera.size(); ++f)
    for (int i = 0; i < 9; ++i)
      if (a.camera.world_to_camera[f].R.m[i] != b.camera.world_to_camera[f].R.m[i])
        return false;
  return true;
}

// A lone sphere: two joints at the same spot, one capsule of radius r.
SceneSpec sphere_scene(double r, double depth_m) {
  SceneSpec s;
  s.seed = 0;
  s.frames = 1;
  s.height = 64;
  s.width = 64;
  s.far_value = 100.0;
  s.figure.parts = 1;
  s.figure.joints = {Joint{-1, {0, 0, 0}, "root"}, Joint{0, {0, 0, 0}, "c"}};
  s.figure.bones = {Bone{0, 1, r, 0}};
  s.motion.root.base_pos = {0, 0, depth_m};
  s.motion.joints.resize(2);
  s.orbit_radius = depth_m;
  s.background.enabled = false;
  s.camera.width = 64;
  s.camera.height = 64;
  s.camera.focal_px = 64;
  // principal point on a pixel center so one ray runs down the optical axis
  s.camera.cx = 32.5;
  s.camera.cy = 32.5;
  s.camera.world_to_camera = {RigidTransform{}};
  return s;
}

}  // namespace

TEST_CASE("sample_scene is deterministic and seed sensitive") {
  GenConfig cfg = small_cfg();
  SceneSpec a = sample_scene(0, cfg);
  SceneSpec b = sample_scene(0, cfg);
  SceneSpec c = sample_scene(1, cfg);
  CHECK(scenes_equal(a, b));
  CHECK_FALSE(scenes_equal(a, c));
}

TEST_CASE("sample_scene rejects degenerate configs") {
  GenConfig cfg = small_cfg();
  cfg.frames = 1;
  CHECK_THROWS_AS(sample_scene(0, cfg), ConfigError);
  cfg = small_cfg();
  cfg.joints = 1;
  CHECK_THROWS_AS(sample_scene(0, cfg), ConfigError);
}

TEST_CASE("camera orbit keeps the configured radius") {
  GenConfig cfg = small_cfg();
  cfg.orbit_radius_min = cfg.orbit_radius_max = 3.0;
  SceneSpec s = sample_scene(7, cfg);
  for (const auto& w2c : s.camera.world_to_camera) {
    Vec3 cam_pos = w2c.inverse().t;
    CHECK(std::fabs((cam_pos - s.orbit_center).norm() - 3.0) < 1e-6);
  }
}

TEST_CASE("forward kinematics: identity rotations reproduce rest offsets") {
  Rng r(3);
  ArticulatedFigure fig = make_humanoid(1.0, r, 0.0, 0.0);
  MotionParams motion;
  motion.root.base_pos = {0, 0, 0};
  motion.joints.resize(fig.joint_count());
  FramePose pose = pose_figure(fig, motion, 0, 2);

  std::vector<Vec3> expect(fig.joint_count());
  for (int j = 0; j < fig.joint_count(); ++j) {
    int p = fig.joints[j].parent;
    expect[j] = (p < 0 ? Vec3{0, 0, 0} : expect[p]) + fig.joints[j].rest_offset;
    CHECK((pose.joint_pos[j] - expect[j]).norm() < 1e-12);
  }
}

TEST_CASE("forward kinematics: rotating the root rotates all joints about it") {
  Rng r(4);
  ArticulatedFigure fig = make_humanoid(1.0, r, 0.0, 0.0);
  MotionParams rest;
  rest.root.base_pos = {0, 0, 0};
  rest.joints.resize(fig.joint_count());
  FramePose p0 = pose_figure(fig, rest, 0, 2);

  MotionParams yawed = rest;
  yawed.root.yaw = {0.7, 0.0, 1.5707963267948966};  // constant sin(phase)*amp
  double ang = yawed.root.yaw.eval(0.0);
  Mat3 R = Mat3::axis_angle({0, 1, 0}, ang);
  FramePose p1 = pose_figure(fig, yawed, 0, 2);
  for (int j = 0; j < fig.joint_count(); ++j)
    CHECK((p1.joint_pos[j] - R * p0.joint_pos[j]).norm() < 1e-12);
}

TEST_CASE("forward kinematics: two-link chain quarter turn") {
  ArticulatedFigure fig;
  fig.parts = 1;
  fig.joints = {Joint{-1, {0, 0, 0}, "root"}, Joint{0, {0, 1, 0}, "a"},
                Joint{1, {0, 1, 0}, "b"}};
  fig.bones = {Bone{0, 1, 0.05, 0}, Bone{1, 2, 0.05, 0}};
  MotionParams motion;
  motion.joints.resize(3);
  motion.joints[1].axis = {0, 0, 1};
  motion.joints[1].a = {1.5707963267948966, 0.0, 1.5707963267948966};  // 90 deg constant
  FramePose pose = pose_figure(fig, motion, 0, 2);
  CHECK((pose.joint_pos[1] - Vec3{0, 1, 0}).norm() < 1e-12);
  CHECK((pose.joint_pos[2] - Vec3{-1, 1, 0}).norm() < 1e-9);
}

TEST_CASE("analytic sphere render: center depth, normal, alpha") {
  SceneSpec s = sphere_scene(0.5, 3.0);
  VideoClip clip;
  GroundTruthBundle gt;
  render_clip(s, clip, gt);

  int64_t pix = 32 * 64 + 32;  // the on-axis pixel
  CHECK(gt.depth[pix] == doctest::Approx(2.5).epsilon(1e-9));
  CHECK(gt.normal[pix * 3 + 0] == doctest::Approx(0.0).epsilon(1e-9));
  CHECK(gt.normal[pix * 3 + 1] == doctest::Approx(0.0).epsilon(1e-9));
  CHECK(gt.normal[pix * 3 + 2] == doctest::Approx(-1.0).epsilon(1e-9));
  CHECK(gt.alpha[pix] == 1.0f);
  CHECK(gt.validity[pix] == 1);

  int64_t corner = 0;  // far outside the silhouette
  CHECK(gt.alpha[corner] == 0.0f);
  CHECK(gt.depth[corner] == doctest::Approx(100.0));
  CHECK(gt.validity[corner] == 0);
  CHECK(gt.normal[corner * 3 + 2] == doctest::Approx(-1.0));
}

TEST_CASE("projection arithmetic") {
  CameraModel cam;
  cam.focal_px = 100;
  cam.cx = 32;
  cam.cy = 32;
  cam.width = 64;
  cam.height = 64;

  Projected c = project_point({0, 0, 1.7}, cam);
  CHECK(c.u == doctest::Approx(0.5));
  CHECK(c.v == doctest::Approx(0.5));

  Projected p = project_point({0.1, 0.2, 2.0}, cam);
  CHECK(p.in_front);
  CHECK(p.u == doctest::Approx(0.578125).epsilon(1e-12));
  CHECK(p.v == doctest::Approx(0.65625).epsilon(1e-12));

  // doubling z halves the offset from the principal point
  Projected q = project_point({0.1, 0.2, 4.0}, cam);
  CHECK((q.u - 0.5) == doctest::Approx(0.5 * (p.u - 0.5)).epsilon(1e-12));
  CHECK((q.v - 0.5) == doctest::Approx(0.5 * (p.v - 0.5)).epsilon(1e-12));

  Projected behind = project_point({0.1, 0.2, -1.0}, cam);
  CHECK_FALSE(behind.in_front);
  CHECK(behind.u >= 0.0);
  CHECK(behind.u <= 1.0);
  CHECK(std::isfinite(behind.v));
}

TEST_CASE("joint behind the torso capsule is invisible") {
  SceneSpec s;
  s.seed = 0;
  s.frames = 1;
  s.height = 64;
  s.width = 64;
  s.background.enabled = false;
  s.figure.parts = 2;
  // torso: vertical capsule at origin; probe joints in front of / behind it
  s.figure.joints = {Joint{-1, {0, 0, 0}, "root"}, Joint{0, {0, 0.6, 0}, "top"},
                     Joint{1, {0.02, -0.6, -0.5}, "front"},
                     Joint{1, {0.02, -0.6, 0.5}, "behind"}};
  s.figure.bones = {Bone{0, 1, 0.2, 0}, Bone{2, 2, 0.04, 1}, Bone{3, 3, 0.04, 1}};
  s.motion.root.base_pos = {0, 0.0, 0};
  s.motion.joints.resize(4);
  s.orbit_radius = 3.0;
  s.camera.width = 64;
  s.camera.height = 64;
  s.camera.focal_px = 64;
  s.camera.cx = 32;
  s.camera.cy = 32;
  // camera on -z looking toward +z
  s.camera.world_to_camera = {CameraModel::look_at({0, 0, -3}, {0, 0, 0})};

  VideoClip clip;
  GroundTruthBundle gt;
  render_clip(s, clip, gt);
  CHECK(gt.kp2d_vis[2] == 1);  // front joint
  CHECK(gt.kp2d_vis[3] == 0);  // behind the torso
}

TEST_CASE("rendered clips satisfy the geometric ground-truth invariants") {
  GenConfig cfg = small_cfg();
  for (uint64_t seed : {0ull, 1ull, 2ull}) {
    SceneSpec s = sample_scene(seed, cfg);
    VideoClip clip;
    GroundTruthBundle gt;
    render_clip(s, clip, gt);

    const int64_t T = cfg.frames, H = cfg.height, W = cfg.width;
    int figure_px = 0, normal_ok = 0;
    for (int64_t f = 0; f < T; ++f) {
      FramePose pose = pose_figure(s.figure, s.motion, f, T);
      auto caps = world_capsules(s.figure, pose);
      RigidTransform c2w = s.camera.world_to_camera[f].inverse();
      for (int64_t py = 0; py < H; ++py)
        for (int64_t px = 0; px < W; ++px) {
          int64_t pix = (f * H + py) * W + px;
          CHECK(gt.depth[pix] > 0);
          CHECK(std::isfinite(gt.depth[pix]));
          if (gt.alpha[pix] < 1.0f || gt.validity[pix] == 0) continue;
          // reconstruct the hit point from (ray, axial depth)
          Vec3 d_cam{(px + 0.5 - s.camera.cx) / s.camera.focal_px,
                     (py + 0.5 - s.camera.cy) / s.camera.focal_px, 1.0};
          Vec3 p_cam = d_cam * static_cast<double>(gt.depth[pix]);
          Vec3 p_world = c2w.apply(p_cam);
          int idx = -1;
          double sd = figure_sdf(p_world, caps, &idx);
          if (std::fabs(sd) > 1e-3) continue;  // plane pixel under the figure mask
          ++figure_px;
          CHECK(std::fabs(sd) < 1e-3);

          // stored normals vs finite-difference SDF gradient, camera space
          double h = 1e-5;
          Vec3 g{(figure_sdf(p_world + Vec3{h, 0, 0}, caps, nullptr) -
                  figure_sdf(p_world - Vec3{h, 0, 0}, caps, nullptr)),
                 (figure_sdf(p_world + Vec3{0, h, 0}, caps, nullptr) -
                  figure_sdf(p_world - Vec3{0, h, 0}, caps, nullptr)),
                 (figure_sdf(p_world + Vec3{0, 0, h}, caps, nullptr) -
                  figure_sdf(p_world - Vec3{0, 0, h}, caps, nullptr))};
          Vec3 fd_n = s.camera.world_to_camera[f].rotate(g.normalized());
          Vec3 stored{gt.normal[pix * 3], gt.normal[pix * 3 + 1], gt.normal[pix * 3 + 2]};
          double cosang = std::clamp(fd_n.dot(stored), -1.0, 1.0);
          if (std::acos(cosang) < 1.0 * 3.14159265358979 / 180.0) ++normal_ok;

          // unit norm on the figure
          CHECK(std::fabs(stored.norm() - 1.0) < 1e-4);
        }

      // projection consistency for visible joints
      for (int j = 0; j < s.figure.joint_count(); ++j) {
        int64_t kix = f * s.figure.joint_count() + j;
        if (!gt.kp2d_vis[kix]) continue;
        Vec3 p_cam{gt.kp3d[kix * 3], gt.kp3d[kix * 3 + 1], gt.kp3d[kix * 3 + 2]};
        Projected pr = project_point(p_cam, s.camera);
        CHECK(std::fabs(pr.u - gt.kp2d[kix * 2]) * W < 0.5);
        CHECK(std::fabs(pr.v - gt.kp2d[kix * 2 + 1]) * H < 0.5);
        CHECK(gt.kp2d[kix * 2] >= 0.0f);
        CHECK(gt.kp2d[kix * 2] <= 1.0f);
      }
    }
    REQUIRE(figure_px > 50);
    CHECK(static_cast<double>(normal_ok) / figure_px > 0.99);
  }
}

TEST_CASE("semantics pixels are exact palette entries") {
  GenConfig cfg = small_cfg();
  SceneSpec s = sample_scene(3, cfg);
  VideoClip clip;
  GroundTruthBundle gt;
  render_clip(s, clip, gt);
  auto pal = part_palette(cfg.parts);
  int64_t n = cfg.frames * cfg.height * cfg.width;
  for (int64_t pix = 0; pix < n; ++pix) {
    float r = gt.semantics[pix * 3], g = gt.semantics[pix * 3 + 1], b = gt.semantics[pix * 3 + 2];
    if (r == 0.0f && g == 0.0f && b == 0.0f) continue;  // background
    bool found = false;
    for (const auto& c : pal)
      if (r == c[0] && g == c[1] && b == c[2]) found = true;
    CHECK(found);
  }
}

TEST_CASE("dataset write/read round trip is bit exact") {
  auto root = fs::temp_directory_path() / "uvp_ds_test";
  fs::remove_all(root);
  GenConfig cfg = small_cfg();
  DatasetManifest m = generate_dataset(root, cfg, {0, 1});
  CHECK(m.clip_seeds.size() == 2);

  VideoClip clip;
  GroundTruthBundle gt;
  read_clip(root, m, 0, clip, gt);

  SceneSpec s = sample_scene(0, cfg);
  VideoClip clip2;
  GroundTruthBundle gt2;
  render_clip(s, clip2, gt2);
  REQUIRE(clip.rgb.v.size() == clip2.rgb.v.size());
  for (size_t i = 0; i < clip.rgb.v.size(); ++i) CHECK(clip.rgb.v[i] == clip2.rgb.v[i]);
  for (size_t i = 0; i < gt.depth.v.size(); ++i) CHECK(gt.depth.v[i] == gt2.depth.v[i]);
  for (size_t i = 0; i < gt.kp3d.v.size(); ++i) CHECK(gt.kp3d.v[i] == gt2.kp3d.v[i]);
  CHECK(gt.kp2d_vis == gt2.kp2d_vis);

  // corrupt the manifest frame count -> integrity error
  DatasetManifest bad = m;
  bad.frames = 7;
  CHECK_THROWS_AS(read_clip(root, bad, 0, clip, gt), IntegrityError);
  fs::remove_all(root);
}

TEST_CASE("datagen to the same directory twice yields identical bytes") {
  auto a = fs::temp_directory_path() / "uvp_ds_a";
  auto b = fs::temp_directory_path() / "uvp_ds_b";
  fs::remove_all(a);
  fs::remove_all(b);
  GenConfig cfg = small_cfg();
  generate_dataset(a, cfg, {0, 1});
  generate_dataset(b, cfg, {0, 1});
  CHECK(io::files_identical(a / "manifest.json", b / "manifest.json"));
  CHECK(io::files_identical(a / "clip_0" / "rgb.npy", b / "clip_0" / "rgb.npy"));
  CHECK(io::files_identical(a / "clip_1" / "normal.npy", b / "clip_1" / "normal.npy"));
  CHECK(io::files_identical(a / "clip_0" / "kp2d_vis.npy", b / "clip_0" / "kp2d_vis.npy"));
  fs::remove_all(a);
  fs::remove_all(b);
}
