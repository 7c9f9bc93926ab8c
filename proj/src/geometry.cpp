#include "vilo/geometry.hpp"

#include <Eigen/Geometry>

#include <algorithm>
#include <cmath>

namespace vilo {

double wrap_angle(double a) {
  double w = std::remainder(a, 2.0 * kPi);
  // remainder() maps to [-pi, pi]; keep +pi stable instead of flipping sign.
  if (w < -kPi) w += 2.0 * kPi;
  if (w > kPi) w -= 2.0 * kPi;
  return w;
}

Mat3 skew(const Vec3& v) {
  Mat3 m;
  m << 0.0, -v.z(), v.y(), v.z(), 0.0, -v.x(), -v.y(), v.x(), 0.0;
  return m;
}

namespace {

Vec4 normalized(const Vec4& q) {
  Vec4 n = q / q.norm();
  return n;
}

}  // namespace

Rotation Rotation::from_jpl(const Vec4& xyzw) {
  // Already-unit input is kept bit-exact so serialization round-trips.
  if (std::abs(xyzw.norm() - 1.0) <= 1e-15) return Rotation(xyzw);
  return Rotation(normalized(xyzw));
}

Rotation Rotation::from_matrix(const Mat3& m) {
  // JPL components of m are the Hamilton components of m^T.
  Eigen::Quaterniond h(Mat3(m.transpose()));
  h.normalize();
  return Rotation(Vec4(h.x(), h.y(), h.z(), h.w()));
}

Rotation Rotation::exp(const Vec3& v) {
  const double theta = v.norm();
  if (theta < 1e-12) {
    // First order: C([-v/2, 1]) = I + [v]x
    return Rotation(normalized(Vec4(-0.5 * v.x(), -0.5 * v.y(), -0.5 * v.z(), 1.0)));
  }
  const Vec3 k = v / theta;
  const double s = std::sin(0.5 * theta);
  return Rotation(normalized(Vec4(-k.x() * s, -k.y() * s, -k.z() * s, std::cos(0.5 * theta))));
}

Rotation Rotation::about_axis(const Vec3& axis, double angle) { return exp(axis.normalized() * angle); }

Mat3 Rotation::matrix() const {
  const Vec3 v = q_.head<3>();
  const double w = q_.w();
  Mat3 m = (2.0 * w * w - 1.0) * Mat3::Identity() - 2.0 * w * skew(v) + 2.0 * v * v.transpose();
  // Pure yaw keeps the gravity axis bit-exact instead of 2(w^2+z^2)-1.
  if (v.x() == 0.0 && v.y() == 0.0) m(2, 2) = 1.0;
  return m;
}

Rotation Rotation::inverse() const { return Rotation(Vec4(-q_.x(), -q_.y(), -q_.z(), q_.w())); }

Vec3 Rotation::rotate(const Vec3& p) const { return matrix() * p; }

Vec3 Rotation::log() const {
  // Canonical sign so the angle lands in [0, pi].
  Vec4 q = q_.w() < 0.0 ? Vec4(-q_) : q_;
  const Vec3 v = q.head<3>();
  const double vn = v.norm();
  if (vn < 1e-12) return -2.0 * v;
  const double theta = 2.0 * std::atan2(vn, q.w());
  return -theta * v / vn;
}

double Rotation::angle() const {
  const double vn = q_.head<3>().norm();
  return 2.0 * std::atan2(vn, std::abs(q_.w()));
}

Rotation Rotation::operator*(const Rotation& other) const {
  // JPL product: C(q (x) p) = C(q) C(p)
  const Vec3 qv = q_.head<3>();
  const Vec3 pv = other.q_.head<3>();
  const double qw = q_.w();
  const double pw = other.q_.w();
  Vec4 r;
  r.head<3>() = qw * pv + pw * qv - qv.cross(pv);
  r.w() = qw * pw - qv.dot(pv);
  return Rotation(normalized(r));
}

Rotation yaw_rotation(double alpha) {
  return Rotation::from_jpl(Vec4(0.0, 0.0, -std::sin(0.5 * alpha), std::cos(0.5 * alpha)));
}

YawTilt split_yaw_tilt(const Rotation& r) {
  const Mat3 m = r.matrix();
  const double yaw = wrap_angle(std::atan2(m(1, 0), m(0, 0)));
  const Rotation tilt = yaw_rotation(-yaw) * r;
  return {yaw, tilt};
}

RigidTransform RigidTransform::from_matrix(const Mat4& m) {
  return {Rotation::from_matrix(m.block<3, 3>(0, 0)), m.block<3, 1>(0, 3)};
}

Mat4 RigidTransform::matrix() const {
  Mat4 m = Mat4::Identity();
  m.block<3, 3>(0, 0) = rotation.matrix();
  m.block<3, 1>(0, 3) = translation;
  return m;
}

RigidTransform RigidTransform::inverse() const {
  const Rotation inv = rotation.inverse();
  return {inv, -inv.rotate(translation)};
}

RigidTransform compose(const RigidTransform& a, const RigidTransform& b) {
  return {a.rotation * b.rotation, a.rotation.rotate(b.translation) + a.translation};
}

Vec3 transform_point(const RigidTransform& t, const Vec3& p) { return t.rotation.rotate(p) + t.translation; }

std::pair<double, double> transform_distance(const RigidTransform& a, const RigidTransform& b) {
  const double dt = (a.translation - b.translation).norm();
  // Quaternion angle stays accurate near zero where acos of the trace does not.
  return {dt, (a.rotation.inverse() * b.rotation).angle()};
}

YawPose::YawPose(double yaw_rad, const Vec3& t) : yaw(wrap_angle(yaw_rad)), translation(t) {}

RigidTransform YawPose::to_rigid() const { return {yaw_rotation(yaw), translation}; }

}  // namespace vilo
