#pragma once

#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "uvp/common.hpp"
#include "uvp/geometry.hpp"
#include "uvp/io.hpp"
#include "uvp/rng.hpp"
#include "uvp/tensor.hpp"

// Procedural clip generator: an articulated capsule figure animated by
// band-limited sinusoidal joint angles, rendered by sphere tracing a signed
// distance field, with every ground-truth pass computed analytically.
namespace uvp::datagen {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// figure

struct Joint {
  int parent = -1;      // -1 for the root
  Vec3 rest_offset;     // from parent, in the parent frame (meters)
  std::string name;
};

struct Bone {
  int joint_a = 0, joint_b = 0;  // capsule endpoints bound to these joints
  double radius = 0.05;
  int part_id = 0;
};

struct ArticulatedFigure {
  std::vector<Joint> joints;
  std::vector<Bone> bones;
  int parts = 0;

  int joint_count() const { return static_cast<int>(joints.size()); }

  void validate() const {
    check(!joints.empty(), "figure has no joints");
    int roots = 0;
    for (size_t j = 0; j < joints.size(); ++j) {
      int p = joints[j].parent;
      if (p < 0) {
        ++roots;
      } else {
        check(p < static_cast<int>(j), "joint parents must precede children");
      }
    }
    check(roots == 1, "figure must have exactly one root");
    for (const auto& b : bones) {
      check(b.radius > 0, "capsule radius must be positive");
      check(b.joint_a >= 0 && b.joint_a < joint_count() && b.joint_b >= 0 &&
                b.joint_b < joint_count(),
            "bone joint index out of range");
      check(b.part_id >= 0 && b.part_id < parts, "bone part id out of range");
    }
  }

  // Radius of the thickest capsule touching the joint; used by the keypoint
  // visibility test.
  double joint_radius(int j) const {
    double r = 0.0;
    for (const auto& b : bones)
      if (b.joint_a == j || b.joint_b == j) r = std::max(r, b.radius);
    return r > 0 ? r : 0.05;
  }
};

inline constexpr int kSkeletonJoints = 16;

inline const std::vector<std::string>& skeleton_joint_names() {
  static const std::vector<std::string> names = {
      "pelvis",  "spine",   "chest",   "head",   "l_shoulder", "l_elbow",
      "l_wrist", "r_shoulder", "r_elbow", "r_wrist", "l_hip",  "l_knee",
      "l_ankle", "r_hip",   "r_knee",  "r_ankle"};
  return names;
}

// The built-in 16-joint humanoid. `scale` stretches the whole body,
// `limb_jitter`/`radius_jitter` perturb individual segments.
inline ArticulatedFigure make_humanoid(double scale, Rng& jitter_rng,
                                       double limb_jitter = 0.1,
                                       double radius_jitter = 0.15) {
  auto J = [&](int parent, double x, double y, double z) {
    Joint j;
    j.parent = parent;
    double s = scale * (1.0 + limb_jitter * (2.0 * jitter_rng.uniform() - 1.0));
    j.rest_offset = {x * s, y * s, z * s};
    return j;
  };

  ArticulatedFigure f;
  f.parts = 10;
  f.joints.resize(kSkeletonJoints);
  f.joints[0] = Joint{-1, {0, 0, 0}, ""};
  f.joints[1] = J(0, 0.00, 0.12, 0);    // spine
  f.joints[2] = J(1, 0.00, 0.15, 0);    // chest
  f.joints[3] = J(2, 0.00, 0.24, 0);    // head
  f.joints[4] = J(2, 0.19, 0.10, 0);    // l_shoulder
  f.joints[5] = J(4, 0.26, 0.00, 0);    // l_elbow
  f.joints[6] = J(5, 0.25, 0.00, 0);    // l_wrist
  f.joints[7] = J(2, -0.19, 0.10, 0);   // r_shoulder
  f.joints[8] = J(7, -0.26, 0.00, 0);   // r_elbow
  f.joints[9] = J(8, -0.25, 0.00, 0);   // r_wrist
  f.joints[10] = J(0, 0.10, -0.06, 0);  // l_hip
  f.joints[11] = J(10, 0.00, -0.40, 0); // l_knee
  f.joints[12] = J(11, 0.00, -0.40, 0); // l_ankle
  f.joints[13] = J(0, -0.10, -0.06, 0); // r_hip
  f.joints[14] = J(13, 0.00, -0.40, 0); // r_knee
  f.joints[15] = J(14, 0.00, -0.40, 0); // r_ankle
  for (int j = 0; j < kSkeletonJoints; ++j) f.joints[j].name = skeleton_joint_names()[j];

  auto B = [&](int a, int b, double r, int part) {
    double rr = r * scale * (1.0 + radius_jitter * (2.0 * jitter_rng.uniform() - 1.0));
    return Bone{a, b, rr, part};
  };
  f.bones = {
      B(0, 1, 0.090, 0), B(1, 2, 0.100, 0),                     // torso
      B(2, 3, 0.090, 1),                                         // neck+head
      B(2, 4, 0.045, 2), B(4, 5, 0.040, 2), B(5, 6, 0.035, 3),  // left arm
      B(2, 7, 0.045, 4), B(7, 8, 0.040, 4), B(8, 9, 0.035, 5),  // right arm
      B(0, 10, 0.060, 6), B(10, 11, 0.055, 6), B(11, 12, 0.045, 7),
      B(0, 13, 0.060, 8), B(13, 14, 0.055, 8), B(14, 15, 0.045, 9),
  };
  f.validate();
  return f;
}

// Part palette; channel values are multiples of 0.25 so they survive float32
// storage exactly. Background is black and not part of the palette.
inline std::vector<std::array<float, 3>> part_palette(int parts) {
  static const std::array<std::array<float, 3>, 10> base = {{
      {1.00f, 0.25f, 0.25f},
      {1.00f, 1.00f, 0.25f},
      {0.25f, 1.00f, 0.25f},
      {0.25f, 1.00f, 1.00f},
      {0.25f, 0.25f, 1.00f},
      {1.00f, 0.25f, 1.00f},
      {0.75f, 0.50f, 0.25f},
      {0.25f, 0.50f, 0.75f},
      {0.50f, 0.75f, 0.25f},
      {0.75f, 0.25f, 0.50f},
  }};
  check(parts >= 1 && parts <= static_cast<int>(base.size()),
        "supported part count is 1..10");
  return {base.begin(), base.begin() + parts};
}

// ---------------------------------------------------------------------------
// motion

struct Sinusoid {
  double amp = 0, freq = 0, phase = 0;  // freq in cycles per clip
  double eval(double u) const { return amp * std::sin(6.283185307179586477 * freq * u + phase); }
};

struct JointMotion {
  Vec3 axis{0, 0, 1};
  Sinusoid a, b;
  double angle(double u) const { return a.eval(u) + b.eval(u); }
};

struct RootMotion {
  Vec3 base_pos;
  Sinusoid yaw, bob, sway_x, sway_z;
};

struct MotionParams {
  RootMotion root;
  std::vector<JointMotion> joints;  // one per joint; root entry unused
};

struct BackgroundSpec {
  bool enabled = true;
  double plane_y = 0.0;     // ground plane height
  double extent = 10.0;     // plane is a disc of this radius; beyond is sky
  double texture_scale = 0.6;  // wavelength of the smooth ground pattern (m)
  std::array<double, 3> color_a{0.55, 0.50, 0.45};
  std::array<double, 3> color_b{0.35, 0.38, 0.42};
  std::array<double, 3> horizon{0.65, 0.75, 0.85};
  std::array<double, 3> zenith{0.25, 0.40, 0.65};
};

// ---------------------------------------------------------------------------
// scene

struct GenConfig {
  int64_t frames = 17, height = 64, width = 64;
  int joints = kSkeletonJoints;
  int parts = 10;
  double fps = 24.0;
  double far_value = 100.0;
  double orbit_radius_min = 2.6, orbit_radius_max = 3.4;
  double orbit_elev_min_deg = 6.0, orbit_elev_max_deg = 22.0;
  double focal_factor_min = 0.9, focal_factor_max = 1.3;  // focal = factor * width
  double figure_scale_min = 0.9, figure_scale_max = 1.1;
  double joint_amp_max = 0.45;  // radians

  void validate() const {
    if (frames < 2) throw ConfigError("generation config requires frames >= 2");
    if (joints < 2) throw ConfigError("generation config requires joints >= 2");
    if (joints != kSkeletonJoints)
      throw ConfigError("only the built-in " + std::to_string(kSkeletonJoints) +
                        "-joint skeleton is provided (requested " +
                        std::to_string(joints) + ")");
    if (height < 8 || width < 8) throw ConfigError("image size too small");
    if (parts < 1 || parts > 10) throw ConfigError("parts must be 1..10");
  }
};

struct SceneSpec {
  uint64_t seed = 0;
  ArticulatedFigure figure;
  MotionParams motion;
  CameraModel camera;
  BackgroundSpec background;
  Vec3 orbit_center;
  double orbit_radius = 3.0;
  int64_t frames = 17, height = 64, width = 64;
  double fps = 24.0;
  double far_value = 100.0;
};

inline SceneSpec sample_scene(uint64_t seed, const GenConfig& cfg) {
  cfg.validate();
  Rng root(seed);
  Rng fig_rng = root.fork(1);
  Rng motion_rng = root.fork(2);
  Rng cam_rng = root.fork(3);
  Rng bg_rng = root.fork(4);

  SceneSpec s;
  s.seed = seed;
  s.frames = cfg.frames;
  s.height = cfg.height;
  s.width = cfg.width;
  s.fps = cfg.fps;
  s.far_value = cfg.far_value;

  double scale = fig_rng.uniform(cfg.figure_scale_min, cfg.figure_scale_max);
  s.figure = make_humanoid(scale, fig_rng);
  s.figure.parts = cfg.parts;
  for (auto& b : s.figure.bones) b.part_id = std::min(b.part_id, cfg.parts - 1);

  double pelvis_h = 0.95 * scale;
  s.motion.root.base_pos = {0, pelvis_h, 0};
  s.motion.root.yaw = {motion_rng.uniform(0.15, 0.6),
                       static_cast<double>(1 + motion_rng.uniform_int(2)),
                       motion_rng.uniform(0, 6.28)};
  s.motion.root.bob = {motion_rng.uniform(0.01, 0.05),
                       static_cast<double>(1 + motion_rng.uniform_int(3)),
                       motion_rng.uniform(0, 6.28)};
  s.motion.root.sway_x = {motion_rng.uniform(0.02, 0.08),
                          static_cast<double>(1 + motion_rng.uniform_int(2)),
                          motion_rng.uniform(0, 6.28)};
  s.motion.root.sway_z = {motion_rng.uniform(0.02, 0.08),
                          static_cast<double>(1 + motion_rng.uniform_int(2)),
                          motion_rng.uniform(0, 6.28)};
  s.motion.joints.resize(s.figure.joint_count());
  for (int j = 1; j < s.figure.joint_count(); ++j) {
    JointMotion& jm = s.motion.joints[j];
    double theta = motion_rng.uniform(0, 6.283185307179586477);
    double zc = motion_rng.uniform(-1, 1);
    double rr = std::sqrt(std::max(0.0, 1 - zc * zc));
    jm.axis = {rr * std::cos(theta), rr * std::sin(theta), zc};
    jm.a = {motion_rng.uniform(0.04, cfg.joint_amp_max),
            static_cast<double>(1 + motion_rng.uniform_int(3)),
            motion_rng.uniform(0, 6.28)};
    jm.b = {motion_rng.uniform(0.02, 0.5 * cfg.joint_amp_max),
            static_cast<double>(1 + motion_rng.uniform_int(3)),
            motion_rng.uniform(0, 6.28)};
  }

  s.orbit_center = {0, pelvis_h, 0};
  s.orbit_radius = cam_rng.uniform(cfg.orbit_radius_min, cfg.orbit_radius_max);
  double elev = cam_rng.uniform(cfg.orbit_elev_min_deg, cfg.orbit_elev_max_deg) *
                (3.14159265358979324 / 180.0);
  double az0 = cam_rng.uniform(0, 6.283185307179586477);
  Sinusoid az_wobble{cam_rng.uniform(0.1, 0.5),
                     static_cast<double>(1 + cam_rng.uniform_int(2)),
                     cam_rng.uniform(0, 6.28)};

  s.camera.width = cfg.width;
  s.camera.height = cfg.height;
  s.camera.focal_px = cfg.width * cam_rng.uniform(cfg.focal_factor_min, cfg.focal_factor_max);
  s.camera.cx = 0.5 * cfg.width + cam_rng.uniform(-1.5, 1.5);
  s.camera.cy = 0.5 * cfg.height + cam_rng.uniform(-1.5, 1.5);
  s.camera.world_to_camera.resize(cfg.frames);
  for (int64_t f = 0; f < cfg.frames; ++f) {
    double u = static_cast<double>(f) / static_cast<double>(cfg.frames - 1);
    double az = az0 + az_wobble.eval(u);
    Vec3 pos = s.orbit_center + Vec3{std::cos(elev) * std::sin(az), std::sin(elev),
                                     std::cos(elev) * std::cos(az)} *
                                    s.orbit_radius;
    s.camera.world_to_camera[f] = CameraModel::look_at(pos, s.orbit_center);
  }
  s.camera.validate();

  s.background.texture_scale = bg_rng.uniform(0.5, 1.2);
  double tint = bg_rng.uniform(-0.06, 0.06);
  s.background.color_a = {0.55 + tint, 0.50, 0.45 - tint};
  s.background.color_b = {0.35, 0.38 + tint, 0.42};
  return s;
}

// ---------------------------------------------------------------------------
// forward kinematics

struct FramePose {
  std::vector<RigidTransform> world;  // per joint
  std::vector<Vec3> joint_pos;
};

// World transform of joint j: W_parent o translate(rest_offset) o rotate(R_j).
// Positions come from the translation part, so a joint's own rotation moves
// its children, not itself.
inline FramePose pose_figure(const ArticulatedFigure& fig, const MotionParams& motion,
                             int64_t frame, int64_t total_frames) {
  check(frame >= 0 && frame < total_frames, "pose_figure: frame out of range");
  double u = total_frames > 1
                 ? static_cast<double>(frame) / static_cast<double>(total_frames - 1)
                 : 0.0;
  FramePose out;
  int K = fig.joint_count();
  out.world.resize(K);
  out.joint_pos.resize(K);
  for (int j = 0; j < K; ++j) {
    Mat3 local = Mat3::identity();
    if (j < static_cast<int>(motion.joints.size())) {
      const JointMotion& jm = motion.joints[j];
      double ang = jm.angle(u);
      if (ang != 0.0) local = Mat3::axis_angle(jm.axis, ang);
    }
    if (fig.joints[j].parent < 0) {
      const RootMotion& rm = motion.root;
      Vec3 pos = rm.base_pos + Vec3{rm.sway_x.eval(u), rm.bob.eval(u), rm.sway_z.eval(u)};
      Mat3 yaw = Mat3::axis_angle({0, 1, 0}, rm.yaw.eval(u));
      out.world[j] = RigidTransform{yaw * local, pos};
    } else {
      const RigidTransform& pw = out.world[fig.joints[j].parent];
      RigidTransform localT{local, fig.joints[j].rest_offset};
      out.world[j] = pw.compose(localT);
    }
    out.joint_pos[j] = out.world[j].t;
  }
  return out;
}

// ---------------------------------------------------------------------------
// SDF renderer

struct CapsuleW {
  Vec3 a, b;
  double radius = 0;
  int part_id = 0;
};

inline double capsule_sdf(const Vec3& p, const CapsuleW& c) {
  Vec3 ab = c.b - c.a;
  double len2 = ab.dot(ab);
  double t = len2 > 0 ? std::clamp((p - c.a).dot(ab) / len2, 0.0, 1.0) : 0.0;
  Vec3 closest = c.a + ab * t;
  return (p - closest).norm() - c.radius;
}

inline Vec3 capsule_normal(const Vec3& p, const CapsuleW& c) {
  Vec3 ab = c.b - c.a;
  double len2 = ab.dot(ab);
  double t = len2 > 0 ? std::clamp((p - c.a).dot(ab) / len2, 0.0, 1.0) : 0.0;
  Vec3 closest = c.a + ab * t;
  return (p - closest).normalized();
}

inline double figure_sdf(const Vec3& p, const std::vector<CapsuleW>& caps, int* nearest) {
  double best = std::numeric_limits<double>::infinity();
  int bi = -1;
  for (size_t i = 0; i < caps.size(); ++i) {
    double d = capsule_sdf(p, caps[i]);
    if (d < best) {
      best = d;
      bi = static_cast<int>(i);
    }
  }
  if (nearest) *nearest = bi;
  return best;
}

struct TraceHit {
  bool hit = false;
  double t = 0;
  int capsule = -1;
};

// Sphere tracing against the capsule union. The SDF is exact, so the march
// converges to |sdf| < 1e-9 away from grazing rays; rays that exhaust the
// step budget inside the 1e-3 band still count as hits.
inline TraceHit trace_figure(const Vec3& origin, const Vec3& dir,
                             const std::vector<CapsuleW>& caps, double t_max) {
  TraceHit out;
  if (caps.empty()) return out;
  double t = 0.0;
  int idx = -1;
  for (int step = 0; step < 512; ++step) {
    Vec3 p = origin + dir * t;
    double d = figure_sdf(p, caps, &idx);
    if (d < 1e-9) {
      out.hit = true;
      out.t = t;
      out.capsule = idx;
      return out;
    }
    t += d;
    if (t > t_max) return out;
  }
  Vec3 p = origin + dir * t;
  double d = figure_sdf(p, caps, &idx);
  if (d < 1e-3) {
    out.hit = true;
    out.t = t;
    out.capsule = idx;
  }
  return out;
}

struct PlaneHit {
  bool hit = false;
  double t = 0;
  Vec3 point;
};

inline PlaneHit trace_plane(const Vec3& origin, const Vec3& dir, const BackgroundSpec& bg) {
  PlaneHit out;
  if (!bg.enabled) return out;
  if (std::fabs(dir.y) < 1e-12) return out;
  double t = (bg.plane_y - origin.y) / dir.y;
  if (t <= 1e-9) return out;
  Vec3 p = origin + dir * t;
  if (std::hypot(p.x, p.z) > bg.extent) return out;
  out.hit = true;
  out.t = t;
  out.point = p;
  return out;
}

struct VideoClip {
  GridF rgb;  // T,H,W,3 in [0,1]
};

struct GroundTruthBundle {
  GridF depth;                    // T,H,W  axial camera-space distance (m)
  GridF normal;                   // T,H,W,3 unit camera-space vectors
  GridF alpha;                    // T,H,W in [0,1]
  GridF semantics;                // T,H,W,3 palette colors, black background
  GridF kp2d;                     // T,K,2 normalized image coords
  std::vector<uint8_t> kp2d_vis;  // T*K
  GridF kp3d;                     // T,K,3 camera-space meters
  std::vector<uint8_t> validity;  // T*H*W, 0 where the ray hit nothing
};

namespace detail {

inline std::array<double, 3> shade(const std::array<double, 3>& albedo, const Vec3& n_world) {
  static const Vec3 light = Vec3{0.45, 1.0, 0.55}.normalized();
  double diff = std::max(0.0, n_world.dot(light));
  double s = 0.35 + 0.65 * diff;
  return {std::clamp(albedo[0] * s, 0.0, 1.0), std::clamp(albedo[1] * s, 0.0, 1.0),
          std::clamp(albedo[2] * s, 0.0, 1.0)};
}

inline std::array<double, 3> sky_color(const Vec3& dir, const BackgroundSpec& bg) {
  double t = std::clamp(0.5 * (dir.y + 1.0), 0.0, 1.0);
  return {bg.horizon[0] + t * (bg.zenith[0] - bg.horizon[0]),
          bg.horizon[1] + t * (bg.zenith[1] - bg.horizon[1]),
          bg.horizon[2] + t * (bg.zenith[2] - bg.horizon[2])};
}

// smooth band-limited ground pattern; hard texture edges would dominate the
// codec's reconstruction budget at desk resolution
inline std::array<double, 3> ground_color(const Vec3& p, const BackgroundSpec& bg) {
  double k = 6.283185307179586477 / bg.texture_scale;
  double t = 0.5 + 0.5 * std::sin(k * p.x) * std::sin(k * p.z);
  return {bg.color_a[0] + t * (bg.color_b[0] - bg.color_a[0]),
          bg.color_a[1] + t * (bg.color_b[1] - bg.color_a[1]),
          bg.color_a[2] + t * (bg.color_b[2] - bg.color_a[2])};
}

}  // namespace detail

inline std::vector<CapsuleW> world_capsules(const ArticulatedFigure& fig,
                                            const FramePose& pose) {
  std::vector<CapsuleW> caps;
  caps.reserve(fig.bones.size());
  for (const auto& b : fig.bones)
    caps.push_back({pose.joint_pos[b.joint_a], pose.joint_pos[b.joint_b], b.radius,
                    b.part_id});
  return caps;
}

inline void render_clip(const SceneSpec& scene, VideoClip& clip, GroundTruthBundle& gt) {
  scene.figure.validate();
  const int64_t T = scene.frames, H = scene.height, W = scene.width;
  const int K = scene.figure.joint_count();
  const auto palette = part_palette(scene.figure.parts);

  clip.rgb = GridF({T, H, W, 3});
  gt.depth = GridF({T, H, W});
  gt.normal = GridF({T, H, W, 3});
  gt.alpha = GridF({T, H, W});
  gt.semantics = GridF({T, H, W, 3});
  gt.kp2d = GridF({T, K, 2});
  gt.kp2d_vis.assign(static_cast<size_t>(T * K), 0);
  gt.kp3d = GridF({T, K, 3});
  gt.validity.assign(static_cast<size_t>(T * H * W), 0);

  for (int64_t f = 0; f < T; ++f) {
    FramePose pose = pose_figure(scene.figure, scene.motion, f, T);
    std::vector<CapsuleW> caps = world_capsules(scene.figure, pose);
    const RigidTransform& w2c = scene.camera.world_to_camera[static_cast<size_t>(f)];
    RigidTransform c2w = w2c.inverse();
    Vec3 cam_pos = c2w.t;

    // One worker per image row block; all buffers are disjoint per pixel.
    parallel_for(H, [&](int64_t h0, int64_t h1) {
      for (int64_t py = h0; py < h1; ++py) {
        for (int64_t px = 0; px < W; ++px) {
          auto ray_dir = [&](double sx, double sy) {
            Vec3 d{(static_cast<double>(px) + sx - scene.camera.cx) / scene.camera.focal_px,
                   (static_cast<double>(py) + sy - scene.camera.cy) / scene.camera.focal_px,
                   1.0};
            return c2w.rotate(d.normalized());
          };

          // center-subpixel ray carries every pass except alpha
          Vec3 dir = ray_dir(0.5, 0.5);
          TraceHit fh = trace_figure(cam_pos, dir, caps, 3.0 * scene.orbit_radius + 10.0);
          PlaneHit ph = trace_plane(cam_pos, dir, scene.background);

          int64_t pix = (f * H + py) * W + px;
          bool fig_front = fh.hit && (!ph.hit || fh.t <= ph.t);
          std::array<double, 3> rgb{};
          if (fig_front) {
            Vec3 p = cam_pos + dir * fh.t;
            Vec3 n_world = capsule_normal(p, caps[static_cast<size_t>(fh.capsule)]);
            Vec3 n_cam = w2c.rotate(n_world);
            Vec3 p_cam = w2c.apply(p);
            gt.depth[pix] = static_cast<float>(p_cam.z);
            gt.normal[pix * 3 + 0] = static_cast<float>(n_cam.x);
            gt.normal[pix * 3 + 1] = static_cast<float>(n_cam.y);
            gt.normal[pix * 3 + 2] = static_cast<float>(n_cam.z);
            int part = caps[static_cast<size_t>(fh.capsule)].part_id;
            for (int c = 0; c < 3; ++c) gt.semantics[pix * 3 + c] = palette[part][c];
            gt.validity[pix] = 1;
            std::array<double, 3> albedo = {0.35 + 0.5 * palette[part][0],
                                            0.35 + 0.5 * palette[part][1],
                                            0.35 + 0.5 * palette[part][2]};
            rgb = detail::shade(albedo, n_world);
          } else if (ph.hit) {
            Vec3 p_cam = w2c.apply(ph.point);
            gt.depth[pix] = static_cast<float>(p_cam.z);
            Vec3 n_cam = w2c.rotate({0, 1, 0});
            gt.normal[pix * 3 + 0] = static_cast<float>(n_cam.x);
            gt.normal[pix * 3 + 1] = static_cast<float>(n_cam.y);
            gt.normal[pix * 3 + 2] = static_cast<float>(n_cam.z);
            gt.validity[pix] = 1;
            rgb = detail::shade(detail::ground_color(ph.point, scene.background), {0, 1, 0});
          } else {
            gt.depth[pix] = static_cast<float>(scene.far_value);
            gt.normal[pix * 3 + 0] = 0;
            gt.normal[pix * 3 + 1] = 0;
            gt.normal[pix * 3 + 2] = -1;
            rgb = detail::sky_color(dir, scene.background);
          }
          for (int c = 0; c < 3; ++c) clip.rgb[pix * 3 + c] = static_cast<float>(rgb[c]);

          // 2x2 supersampled alpha
          int cover = 0;
          static const double offs[4][2] = {{0.25, 0.25}, {0.75, 0.25}, {0.25, 0.75}, {0.75, 0.75}};
          for (auto& o : offs) {
            Vec3 d = ray_dir(o[0], o[1]);
            TraceHit sf = trace_figure(cam_pos, d, caps, 3.0 * scene.orbit_radius + 10.0);
            if (!sf.hit) continue;
            PlaneHit sp = trace_plane(cam_pos, d, scene.background);
            if (!sp.hit || sf.t <= sp.t) ++cover;
          }
          gt.alpha[pix] = static_cast<float>(cover) / 4.0f;
        }
      }
    });

    // keypoints
    for (int j = 0; j < K; ++j) {
      Vec3 p_cam = w2c.apply(pose.joint_pos[j]);
      int64_t kix = f * K + j;
      gt.kp3d[kix * 3 + 0] = static_cast<float>(p_cam.x);
      gt.kp3d[kix * 3 + 1] = static_cast<float>(p_cam.y);
      gt.kp3d[kix * 3 + 2] = static_cast<float>(p_cam.z);
      Projected pr = project_point(p_cam, scene.camera);
      gt.kp2d[kix * 2 + 0] = static_cast<float>(std::clamp(pr.u, 0.0, 1.0));
      gt.kp2d[kix * 2 + 1] = static_cast<float>(std::clamp(pr.v, 0.0, 1.0));

      bool visible = false;
      if (pr.in_front && pr.u >= 0.0 && pr.u <= 1.0 && pr.v >= 0.0 && pr.v <= 1.0) {
        // oracle ray-cast from the camera toward the joint; the first hit must
        // lie within eps_occ of the joint (its own capsule surface qualifies)
        Vec3 to_joint = pose.joint_pos[j] - cam_pos;
        double dist = to_joint.norm();
        Vec3 d = to_joint * (1.0 / dist);
        double eps_occ = 2.0 * scene.figure.joint_radius(j);
        TraceHit th = trace_figure(cam_pos, d, caps, dist + 1.0);
        if (th.hit) {
          Vec3 hp = cam_pos + d * th.t;
          visible = (hp - pose.joint_pos[j]).norm() <= eps_occ;
        } else {
          visible = true;  // joint not inside any capsule; nothing occludes it
        }
        PlaneHit bh = trace_plane(cam_pos, d, scene.background);
        if (bh.hit && bh.t < dist - eps_occ && (!th.hit || bh.t < th.t)) visible = false;
      }
      gt.kp2d_vis[static_cast<size_t>(kix)] = visible ? 1 : 0;
    }
  }
}

// ---------------------------------------------------------------------------
// dataset layout:  <root>/manifest.json  +  <root>/clip_<seed>/<pass>.npy

inline constexpr int kDatasetFormatVersion = 1;

struct DatasetManifest {
  int format_version = kDatasetFormatVersion;
  int64_t frames = 0, height = 0, width = 0;
  int joints = 0, parts = 0;
  double fps = 24.0;
  double far_value = 100.0;
  std::vector<std::array<float, 3>> palette;
  std::vector<int> skeleton_parents;
  std::vector<std::string> joint_names;
  std::vector<uint64_t> clip_seeds;

  std::string clip_dir(uint64_t seed) const { return "clip_" + std::to_string(seed); }
};

inline nlohmann::json manifest_to_json(const DatasetManifest& m) {
  nlohmann::json j;
  j["format_version"] = m.format_version;
  j["frames"] = m.frames;
  j["height"] = m.height;
  j["width"] = m.width;
  j["joints"] = m.joints;
  j["parts"] = m.parts;
  j["fps"] = m.fps;
  j["far_value"] = m.far_value;
  j["palette"] = nlohmann::json::array();
  for (const auto& c : m.palette) j["palette"].push_back({c[0], c[1], c[2]});
  j["skeleton_parents"] = m.skeleton_parents;
  j["joint_names"] = m.joint_names;
  j["clip_seeds"] = m.clip_seeds;
  return j;
}

inline DatasetManifest manifest_from_json(const nlohmann::json& j) {
  DatasetManifest m;
  m.format_version = j.at("format_version").get<int>();
  check(m.format_version == kDatasetFormatVersion,
        "unsupported dataset format version " + std::to_string(m.format_version));
  m.frames = j.at("frames").get<int64_t>();
  m.height = j.at("height").get<int64_t>();
  m.width = j.at("width").get<int64_t>();
  m.joints = j.at("joints").get<int>();
  m.parts = j.at("parts").get<int>();
  m.fps = j.at("fps").get<double>();
  m.far_value = j.at("far_value").get<double>();
  for (const auto& c : j.at("palette"))
    m.palette.push_back({c.at(0).get<float>(), c.at(1).get<float>(), c.at(2).get<float>()});
  m.skeleton_parents = j.at("skeleton_parents").get<std::vector<int>>();
  m.joint_names = j.at("joint_names").get<std::vector<std::string>>();
  m.clip_seeds = j.at("clip_seeds").get<std::vector<uint64_t>>();
  return m;
}

inline void save_manifest(const fs::path& root, const DatasetManifest& m) {
  std::ofstream f(root / "manifest.json");
  check(f.good(), "cannot write manifest in " + root.string());
  f << manifest_to_json(m).dump(2) << "\n";
}

inline DatasetManifest load_manifest(const fs::path& root) {
  std::ifstream f(root / "manifest.json");
  check(f.good(), "no manifest.json in " + root.string());
  nlohmann::json j;
  f >> j;
  return manifest_from_json(j);
}

inline void write_clip(const fs::path& root, const DatasetManifest& m, uint64_t seed,
                       const VideoClip& clip, const GroundTruthBundle& gt) {
  fs::path dir = root / m.clip_dir(seed);
  fs::create_directories(dir);
  io::write_npy(dir / "rgb.npy", clip.rgb);
  io::write_npy(dir / "depth.npy", gt.depth);
  io::write_npy(dir / "normal.npy", gt.normal);
  io::write_npy(dir / "alpha.npy", gt.alpha);
  io::write_npy(dir / "semantics.npy", gt.semantics);
  io::write_npy(dir / "kp2d.npy", gt.kp2d);
  io::write_npy_u8(dir / "kp2d_vis.npy", {m.frames, m.joints}, gt.kp2d_vis);
  io::write_npy(dir / "kp3d.npy", gt.kp3d);
  io::write_npy_u8(dir / "validity.npy", {m.frames, m.height, m.width}, gt.validity);
}

// Reads one clip and validates every array shape against the manifest. With
// require_all = false, absent pass files are skipped (partial datasets).
inline void read_clip(const fs::path& root, const DatasetManifest& m, uint64_t seed,
                      VideoClip& clip, GroundTruthBundle& gt, bool require_all = true) {
  fs::path dir = root / m.clip_dir(seed);
  auto expect = [&](const GridF& g, std::vector<int64_t> shape, const std::string& name) {
    if (g.shape != shape)
      throw IntegrityError("dataset integrity: " + name + " has shape " +
                           shape_str(g.shape) + ", manifest implies " + shape_str(shape));
  };
  auto want = [&](const char* file) {
    return require_all || fs::exists(dir / file);
  };
  if (want("rgb.npy")) {
    clip.rgb = io::read_npy_f32(dir / "rgb.npy");
    expect(clip.rgb, {m.frames, m.height, m.width, 3}, "rgb");
  }
  if (want("depth.npy")) {
    gt.depth = io::read_npy_f32(dir / "depth.npy");
    expect(gt.depth, {m.frames, m.height, m.width}, "depth");
  }
  if (want("normal.npy")) {
    gt.normal = io::read_npy_f32(dir / "normal.npy");
    expect(gt.normal, {m.frames, m.height, m.width, 3}, "normal");
  }
  if (want("alpha.npy")) {
    gt.alpha = io::read_npy_f32(dir / "alpha.npy");
    expect(gt.alpha, {m.frames, m.height, m.width}, "alpha");
  }
  if (want("semantics.npy")) {
    gt.semantics = io::read_npy_f32(dir / "semantics.npy");
    expect(gt.semantics, {m.frames, m.height, m.width, 3}, "semantics");
  }
  std::vector<int64_t> vshape;
  if (want("kp2d.npy")) {
    gt.kp2d = io::read_npy_f32(dir / "kp2d.npy");
    expect(gt.kp2d, {m.frames, m.joints, 2}, "kp2d");
    gt.kp2d_vis = io::read_npy_u8(dir / "kp2d_vis.npy", vshape);
    if (vshape != std::vector<int64_t>{m.frames, m.joints})
      throw IntegrityError("dataset integrity: kp2d_vis shape mismatch");
  }
  if (want("kp3d.npy")) {
    gt.kp3d = io::read_npy_f32(dir / "kp3d.npy");
    expect(gt.kp3d, {m.frames, m.joints, 3}, "kp3d");
  }
  if (want("validity.npy")) {
    gt.validity = io::read_npy_u8(dir / "validity.npy", vshape);
    if (vshape != std::vector<int64_t>{m.frames, m.height, m.width})
      throw IntegrityError("dataset integrity: validity shape mismatch");
  }
}

// Generates `seeds` and writes the dataset; pure function of (seeds, cfg).
inline DatasetManifest generate_dataset(const fs::path& root, const GenConfig& cfg,
                                        const std::vector<uint64_t>& seeds) {
  cfg.validate();
  check(!seeds.empty(), "generate_dataset: empty seed list");
  fs::create_directories(root);
  DatasetManifest m;
  m.frames = cfg.frames;
  m.height = cfg.height;
  m.width = cfg.width;
  m.joints = cfg.joints;
  m.parts = cfg.parts;
  m.fps = cfg.fps;
  m.far_value = cfg.far_value;
  m.palette = part_palette(cfg.parts);
  {
    Rng tmp(0);
    ArticulatedFigure ref = make_humanoid(1.0, tmp);
    for (const auto& jt : ref.joints) m.skeleton_parents.push_back(jt.parent);
  }
  m.joint_names = skeleton_joint_names();
  m.clip_seeds = seeds;
  for (uint64_t s : seeds) {
    SceneSpec scene = sample_scene(s, cfg);
    VideoClip clip;
    GroundTruthBundle gt;
    render_clip(scene, clip, gt);
    write_clip(root, m, s, clip, gt);
  }
  save_manifest(root, m);
  return m;
}

}  // namespace uvp::datagen
