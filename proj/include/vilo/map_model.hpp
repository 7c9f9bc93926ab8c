#pragma once

#include "vilo/camera.hpp"
#include "vilo/geometry.hpp"

#include <filesystem>
#include <iosfwd>
#include <string>
#include <unordered_map>
#include <vector>

namespace vilo::map {

// One landmark measured by a keyframe, in normalized image coordinates
// (x/z, y/z of the landmark in the keyframe camera frame).
struct KeyframeObservation {
  int landmark_id = 0;
  Vec2 normalized = Vec2::Zero();
};

struct MapKeyframe {
  int id = 0;
  RigidTransform pose;  // G_T_KF, the keyframe camera in its map frame
  std::vector<KeyframeObservation> observations;
};

struct Landmark {
  int id = 0;
  Vec3 position = Vec3::Zero();  // in the map frame
  std::vector<int> observers;    // keyframe ids
};

/// An isolated pre-built map. Immutable once constructed; the constructor
/// validates every cross-reference and throws InvariantError on violations.
class MapBundle {
 public:
  MapBundle() = default;
  MapBundle(int id, std::vector<MapKeyframe> keyframes, std::vector<Landmark> landmarks);

  int id() const { return id_; }
  const std::vector<MapKeyframe>& keyframes() const { return keyframes_; }
  const std::vector<Landmark>& landmarks() const { return landmarks_; }

  const MapKeyframe* find_keyframe(int id) const;
  const Landmark* find_landmark(int id) const;
  // Normalized observation of `landmark_id` by keyframe `keyframe_id`, if recorded.
  const KeyframeObservation* find_observation(int keyframe_id, int landmark_id) const;

 private:
  int id_ = 0;
  std::vector<MapKeyframe> keyframes_;
  std::vector<Landmark> landmarks_;
  std::unordered_map<int, std::size_t> kf_index_;
  std::unordered_map<int, std::size_t> lm_index_;
};

// Versioned line-oriented text format, see docs/formats.md.
void write_map(std::ostream& os, const MapBundle& map);
MapBundle read_map(std::istream& is);
void save_map(const MapBundle& map, const std::filesystem::path& path);
MapBundle load_map(const std::filesystem::path& path);

struct VisibleLandmark {
  int landmark_id = 0;
  Vec2 pixel = Vec2::Zero();
  Vec3 bearing = Vec3::Zero();  // K^-1 [pixel, 1]
};

// Landmarks that project inside `camera`'s image when the body sits at
// `map_T_imu`. Sorted by landmark id.
std::vector<VisibleLandmark> landmarks_visible_from(const MapBundle& map, const RigidTransform& map_T_imu,
                                                    const CameraModel& camera, double max_range = 1e9);

}  // namespace vilo::map
