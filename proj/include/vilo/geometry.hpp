#pragma once

#include <Eigen/Core>

#include <utility>

namespace vilo {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Vec4 = Eigen::Vector4d;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;

// Gravity in every gravity-aligned frame (local VIO frame, map frames, ground
// truth). z points up. Simulator and filter both read it from here.
inline constexpr double kGravityMagnitude = 9.81;
inline Vec3 gravity_vector() { return Vec3(0.0, 0.0, -kGravityMagnitude); }

inline constexpr double kPi = 3.14159265358979323846;

// Wraps to [-pi, pi].
double wrap_angle(double a);

Mat3 skew(const Vec3& v);

/// Rotation stored as a unit JPL quaternion, components ordered (x, y, z, w).
///
/// A Rotation named `A_R_B` maps coordinates in frame B to frame A. Its JPL
/// quaternion q satisfies C(q) = A_R_B with
///
///   C(q) = (2w^2 - 1) I - 2w [v]x + 2 v v^T,   v = (x, y, z)
///
/// which is the transpose of the Hamilton matrix of the same components.
/// Consequently C([k sin(t/2), cos(t/2)]) = exp(-t [k]x).
///
/// Worked example, 90 degree yaw: the matrix that sends (1,0,0) to (0,1,0) is
/// exp(+pi/2 [z]x) and its JPL quaternion is (0, 0, -sqrt(1/2), sqrt(1/2)).
///
/// Products follow C(p (x) q) = C(p) C(q), so `a * b` chains frames exactly
/// like matrix multiplication.
class Rotation {
 public:
  Rotation() : q_(0.0, 0.0, 0.0, 1.0) {}

  static Rotation identity() { return Rotation(); }
  static Rotation from_jpl(const Vec4& xyzw);
  static Rotation from_matrix(const Mat3& m);
  // exp([v]x): right-handed rotation by |v| about v.
  static Rotation exp(const Vec3& v);
  static Rotation about_axis(const Vec3& axis, double angle);

  const Vec4& jpl() const { return q_; }
  Mat3 matrix() const;
  Rotation inverse() const;
  Vec3 rotate(const Vec3& p) const;
  // Inverse of exp, angle in [0, pi].
  Vec3 log() const;
  double angle() const;

  Rotation operator*(const Rotation& other) const;

 private:
  explicit Rotation(const Vec4& q) : q_(q) {}
  Vec4 q_;
};

// Rotation about +z by alpha (radians). Leaves the gravity axis fixed.
Rotation yaw_rotation(double alpha);

// Z-Y-X decomposition: r = yaw_rotation(yaw) * tilt, tilt has no yaw component.
// The yaw is normalized to [-pi, pi].
struct YawTilt {
  double yaw;
  Rotation tilt;
};
YawTilt split_yaw_tilt(const Rotation& r);

/// A_T_B: rotation A_R_B plus translation A_p_B (origin of B expressed in A).
struct RigidTransform {
  Rotation rotation;
  Vec3 translation = Vec3::Zero();

  RigidTransform() = default;
  RigidTransform(const Rotation& r, const Vec3& t) : rotation(r), translation(t) {}

  static RigidTransform identity() { return {}; }
  static RigidTransform from_matrix(const Mat4& m);

  Mat4 matrix() const;
  RigidTransform inverse() const;
};

// A_T_C = A_T_B * B_T_C.
RigidTransform compose(const RigidTransform& a, const RigidTransform& b);
inline RigidTransform operator*(const RigidTransform& a, const RigidTransform& b) { return compose(a, b); }

// A_T_B p = A_R_B p + A_p_B
Vec3 transform_point(const RigidTransform& t, const Vec3& p);

// Translation error norm and rotation angle between two transforms.
std::pair<double, double> transform_distance(const RigidTransform& a, const RigidTransform& b);

/// Gravity-aligned 4DoF pose: yaw about +z, then translation.
struct YawPose {
  double yaw = 0.0;
  Vec3 translation = Vec3::Zero();

  YawPose() = default;
  YawPose(double yaw_rad, const Vec3& t);

  RigidTransform to_rigid() const;
};

}  // namespace vilo
