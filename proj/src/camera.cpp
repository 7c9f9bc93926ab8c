#include "vilo/camera.hpp"

#include "vilo/error.hpp"

namespace vilo {

void CameraModel::validate() const {
  if (!(K.fx > 0.0) || !(K.fy > 0.0)) throw InvariantError("camera " + std::to_string(id) + ": focal length must be positive");
  if (width <= 0 || height <= 0) throw InvariantError("camera " + std::to_string(id) + ": image size must be positive");
}

Vec2 CameraModel::project_unchecked(const Vec3& p) const {
  return {K.fx * p.x() / p.z() + K.cx, K.fy * p.y() / p.z() + K.cy};
}

std::optional<Vec2> CameraModel::project(const Vec3& p, double min_depth) const {
  if (p.z() <= min_depth) return std::nullopt;
  Vec2 u = project_unchecked(p);
  if (!inside(u)) return std::nullopt;
  return u;
}

Vec3 CameraModel::normalized(const Vec2& u) const { return {(u.x() - K.cx) / K.fx, (u.y() - K.cy) / K.fy, 1.0}; }

bool CameraModel::inside(const Vec2& u) const {
  return u.x() >= 0.0 && u.y() >= 0.0 && u.x() <= static_cast<double>(width) && u.y() <= static_cast<double>(height);
}

const CameraModel& camera_by_id(const CameraRig& rig, int id) {
  for (const auto& c : rig) {
    if (c.id == id) return c;
  }
  throw InvariantError("unknown camera id " + std::to_string(id));
}

}  // namespace vilo
