#pragma once

#include <array>
#include <cmath>
#include <vector>

#include "uvp/common.hpp"

namespace uvp {

struct Vec3 {
  double x = 0, y = 0, z = 0;

  Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
  Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
  Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
  Vec3 operator-() const { return {-x, -y, -z}; }

  double dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
  Vec3 cross(const Vec3& o) const {
    return {y * o.z - z * o.y, z * o.x - x * o.z, x * o.y - y * o.x};
  }
  double norm() const { return std::sqrt(dot(*this)); }
  Vec3 normalized() const {
    double n = norm();
    return n > 0 ? Vec3{x / n, y / n, z / n} : Vec3{0, 0, 0};
  }
};

struct Mat3 {
  // row-major
  std::array<double, 9> m{1, 0, 0, 0, 1, 0, 0, 0, 1};

  static Mat3 identity() { return {}; }

  static Mat3 axis_angle(const Vec3& axis_in, double angle) {
    Vec3 a = axis_in.normalized();
    double c = std::cos(angle), s = std::sin(angle), t = 1.0 - c;
    Mat3 r;
    r.m = {t * a.x * a.x + c,       t * a.x * a.y - s * a.z, t * a.x * a.z + s * a.y,
           t * a.x * a.y + s * a.z, t * a.y * a.y + c,       t * a.y * a.z - s * a.x,
           t * a.x * a.z - s * a.y, t * a.y * a.z + s * a.x, t * a.z * a.z + c};
    return r;
  }

  static Mat3 from_rows(const Vec3& r0, const Vec3& r1, const Vec3& r2) {
    Mat3 r;
    r.m = {r0.x, r0.y, r0.z, r1.x, r1.y, r1.z, r2.x, r2.y, r2.z};
    return r;
  }

  Vec3 operator*(const Vec3& v) const {
    return {m[0] * v.x + m[1] * v.y + m[2] * v.z,
            m[3] * v.x + m[4] * v.y + m[5] * v.z,
            m[6] * v.x + m[7] * v.y + m[8] * v.z};
  }

  Mat3 operator*(const Mat3& o) const {
    Mat3 r;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) {
        double acc = 0;
        for (int k = 0; k < 3; ++k) acc += m[i * 3 + k] * o.m[k * 3 + j];
        r.m[i * 3 + j] = acc;
      }
    return r;
  }

  Mat3 transposed() const {
    Mat3 r;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) r.m[i * 3 + j] = m[j * 3 + i];
    return r;
  }

  double det() const {
    return m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6]) +
           m[2] * (m[3] * m[7] - m[4] * m[6]);
  }

  // max |R R^T - I| entry
  double orthonormal_residual() const {
    Mat3 g = *this * transposed();
    double worst = 0;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j)
        worst = std::max(worst, std::fabs(g.m[i * 3 + j] - (i == j ? 1.0 : 0.0)));
    return worst;
  }
};

// p -> R p + t
struct RigidTransform {
  Mat3 R;
  Vec3 t;

  Vec3 apply(const Vec3& p) const { return R * p + t; }
  Vec3 rotate(const Vec3& v) const { return R * v; }

  RigidTransform compose(const RigidTransform& inner) const {
    // (*this) o inner : first inner, then this
    return {R * inner.R, R * inner.t + t};
  }

  RigidTransform inverse() const {
    Mat3 rt = R.transposed();
    return {rt, -(rt * t)};
  }

  static RigidTransform translation(const Vec3& t) { return {Mat3::identity(), t}; }
  static RigidTransform rotation(const Mat3& r) { return {r, {0, 0, 0}}; }
};

// Pinhole camera. Camera space: x right, y down, z forward (into the scene);
// the world->camera pose list holds one transform per frame.
struct CameraModel {
  double focal_px = 64;
  double cx = 32, cy = 32;
  int64_t width = 64, height = 64;
  std::vector<RigidTransform> world_to_camera;

  void validate() const {
    check(focal_px > 0, "camera focal length must be positive");
    for (const auto& tr : world_to_camera) {
      check(tr.R.orthonormal_residual() < 1e-6, "camera rotation not orthonormal");
      check(std::fabs(tr.R.det() - 1.0) < 1e-6, "camera rotation must have det +1");
    }
  }

  // world->camera for camera placed at `pos` looking at `target`, image y down.
  static RigidTransform look_at(const Vec3& pos, const Vec3& target) {
    Vec3 z = (target - pos).normalized();
    Vec3 x = Vec3{0, -1, 0}.cross(z).normalized();
    check(x.norm() > 1e-9, "look_at: view direction parallel to vertical");
    Vec3 y = z.cross(x);
    Mat3 r = Mat3::from_rows(x, y, z);
    return {r, -(r * pos)};
  }
};

struct Projected {
  double u = 0, v = 0;  // normalized [0,1] when in front of the camera
  bool in_front = false;
};

// u = (f x/z + cx)/W, v = (f y/z + cy)/H for camera-space points. Points with
// z <= 0 are flagged and clamped to finite coordinates.
inline Projected project_point(const Vec3& p_cam, const CameraModel& cam) {
  Projected out;
  out.in_front = p_cam.z > 0;
  double z = std::max(p_cam.z, 1e-9);
  out.u = (cam.focal_px * (p_cam.x / z) + cam.cx) / static_cast<double>(cam.width);
  out.v = (cam.focal_px * (p_cam.y / z) + cam.cy) / static_cast<double>(cam.height);
  if (!out.in_front) {
    out.u = std::clamp(out.u, 0.0, 1.0);
    out.v = std::clamp(out.v, 0.0, 1.0);
  }
  return out;
}

inline std::vector<Projected> project(const std::vector<Vec3>& cam_points,
                                      const CameraModel& cam) {
  std::vector<Projected> out;
  out.reserve(cam_points.size());
  for (const auto& p : cam_points) out.push_back(project_point(p, cam));
  return out;
}

}  // namespace uvp
