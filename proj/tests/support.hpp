#pragma once

#include "vilo/sim.hpp"
#include "vilo/solvers.hpp"

#include <random>

namespace vilo::testing {

// A gravity-tilted query body looking at random landmarks in map frame G.
struct Query {
  RigidTransform map_T_imu;
  solvers::QueryGeometry geometry;
  YawPose truth;  // G_T_Q
};

inline Query random_query(std::mt19937_64& rng, int num_cameras = 1, double max_tilt = 0.1) {
  std::uniform_real_distribution<double> yaw(-kPi, kPi), pos(-20.0, 20.0), tilt(-max_tilt, max_tilt);
  Query q;
  const Rotation r = yaw_rotation(yaw(rng)) * Rotation::about_axis(Vec3::UnitY(), tilt(rng)) *
                     Rotation::about_axis(Vec3::UnitX(), tilt(rng));
  q.map_T_imu = RigidTransform(r, Vec3(pos(rng), pos(rng), pos(rng) * 0.1));
  const YawTilt yt = split_yaw_tilt(r);
  q.geometry.tilt = yt.tilt;
  sim::RigConfig rc;
  rc.num_cameras = num_cameras;
  q.geometry.rig = sim::make_rig(rc);
  q.truth = YawPose(yt.yaw, q.map_T_imu.translation);
  return q;
}

// `inliers` and `outliers` per camera, shuffled.
inline std::vector<sim::Correspondence> make_matches(const Query& q, int inliers, int outliers, double sigma,
                                                     std::mt19937_64& rng, double min_depth = 3.0,
                                                     double max_depth = 10.0) {
  std::vector<sim::Correspondence> out;
  for (const auto& cam : q.geometry.rig) {
    const auto pts = sim::random_visible_points(q.map_T_imu, cam, std::max(inliers, 1) + 20, min_depth, max_depth, rng);
    auto c = sim::make_correspondences(pts, q.map_T_imu, cam, 1, inliers, outliers, sigma, rng);
    out.insert(out.end(), c.begin(), c.end());
  }
  std::shuffle(out.begin(), out.end(), rng);
  return out;
}

inline bool pose_close(const YawPose& a, const YawPose& b, double meters, double radians) {
  return (a.translation - b.translation).norm() <= meters && std::abs(wrap_angle(a.yaw - b.yaw)) <= radians;
}

}  // namespace vilo::testing
