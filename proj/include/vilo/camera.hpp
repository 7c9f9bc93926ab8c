#pragma once

#include "vilo/geometry.hpp"

#include <optional>
#include <vector>

namespace vilo {

struct Intrinsics {
  double fx = 500.0;
  double fy = 500.0;
  double cx = 320.0;
  double cy = 240.0;
};

/// Pinhole camera rigidly attached to the IMU body.
struct CameraModel {
  int id = 0;
  Intrinsics K;
  RigidTransform imu_T_cam;  // I_T_C
  int width = 640;
  int height = 480;

  // Throws InvariantError on non-positive focal length or image size.
  void validate() const;

  // Pixel of a point given in this camera's frame; empty for depth <= min_depth
  // or when the pixel falls outside the image.
  std::optional<Vec2> project(const Vec3& p_cam, double min_depth = 0.1) const;
  // Pinhole projection without any visibility check.
  Vec2 project_unchecked(const Vec3& p_cam) const;
  // K^-1 [u, 1]^T, third component is 1.
  Vec3 normalized(const Vec2& pixel) const;
  bool inside(const Vec2& pixel) const;
  double min_focal() const { return K.fx < K.fy ? K.fx : K.fy; }
};

using CameraRig = std::vector<CameraModel>;

const CameraModel& camera_by_id(const CameraRig& rig, int id);

}  // namespace vilo
