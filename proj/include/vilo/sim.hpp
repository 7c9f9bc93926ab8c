#pragma once

#include "vilo/camera.hpp"
#include "vilo/geometry.hpp"
#include "vilo/map_model.hpp"

#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace vilo::sim {

struct ImuSample {
  double timestamp = 0.0;
  Vec3 gyro = Vec3::Zero();   // omega_m, rad/s, body frame
  Vec3 accel = Vec3::Zero();  // a_m, specific force, m/s^2, body frame
};

// 2D observation of a map point by one camera of the query rig.
struct Correspondence {
  int camera_id = 0;
  int map_id = 0;
  int landmark_id = -1;           // id inside map `map_id`
  Vec2 pixel = Vec2::Zero();
  Vec3 point = Vec3::Zero();      // G^k F, map frame
  double weight = 1.0;            // reliability score in [0, 1]
  bool inlier = true;             // ground truth, simulator only
};

// Observation of an environment point used for local feature tracking.
struct FeatureObservation {
  int feature_id = 0;
  int camera_id = 0;
  Vec2 pixel = Vec2::Zero();
};

enum class TrajectoryKind { kStatic, kLine, kCircle, kFigureEight };

TrajectoryKind parse_trajectory_kind(const std::string& name);
std::string to_string(TrajectoryKind kind);

struct TrajectoryConfig {
  TrajectoryKind kind = TrajectoryKind::kCircle;
  double duration = 10.0;    // s
  double imu_rate = 200.0;   // Hz
  double speed = 2.5;        // m/s for line; circle/eight use radius * rate
  double radius = 5.0;       // m, circle radius / figure-eight half width
  double angular_rate = 0.5; // rad/s for circle and figure-eight
  double height = 1.5;       // m above the ground-truth origin
  double initial_yaw = 0.0;  // heading for static and line
  // Optional sinusoidal roll/pitch wobble (rad, Hz) to exercise gravity alignment.
  double wobble_amplitude = 0.0;
  double wobble_frequency = 0.3;
};

// Pose and derivatives of the body at one instant, all in the ground-truth frame.
struct BodyState {
  double timestamp = 0.0;
  RigidTransform pose;       // GT_T_I
  Vec3 velocity = Vec3::Zero();
  Vec3 acceleration = Vec3::Zero();
  Vec3 body_rate = Vec3::Zero();  // omega in the body frame
};

/// Closed-form smooth trajectory.
class TrajectoryModel {
 public:
  explicit TrajectoryModel(const TrajectoryConfig& cfg);
  BodyState evaluate(double t) const;
  // Exact IMU reading at t (zero noise, zero bias).
  ImuSample imu_at(double t) const;
  const TrajectoryConfig& config() const { return cfg_; }

 private:
  TrajectoryConfig cfg_;
};

struct TrajectoryData {
  std::vector<BodyState> samples;
  std::vector<ImuSample> imu;
};

// Throws vilo::Error on non-positive duration or rate.
TrajectoryData generate_trajectory(const TrajectoryConfig& cfg);

/// Additive white noise plus random-walk biases. gyro/accel noise are the
/// per-sample standard deviations at the stream rate (rad/s, m/s^2). The bias
/// walks are continuous densities: each step adds N(0, walk^2 dt).
struct ImuNoise {
  double gyro_noise = 0.0;
  double accel_noise = 0.0;
  double gyro_walk = 0.0;
  double accel_walk = 0.0;
  Vec3 gyro_bias = Vec3::Zero();
  Vec3 accel_bias = Vec3::Zero();
};

std::vector<ImuSample> corrupt_imu(const std::vector<ImuSample>& stream, const ImuNoise& noise, std::uint64_t seed);

// Deterministic stream splitting so each stage draws from its own generator.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

double sample_beta(std::mt19937_64& rng, double a, double b);

// ---------------------------------------------------------------------------
// Scenario

struct RigConfig {
  int num_cameras = 1;  // 1..4: front, left, right, back
  Intrinsics K;
  int width = 640;
  int height = 480;
};

CameraRig make_rig(const RigConfig& cfg);

struct EnvironmentConfig {
  double points_per_meter = 6.0;  // per side of the path
  double min_offset = 3.0;        // lateral distance from path
  double max_offset = 12.0;
  double min_height = -1.0;
  double max_height = 5.0;
};

struct MapConfig {
  // Portion of the run (fractions of duration) each map was recorded over.
  double start_fraction = 0.0;
  double end_fraction = 1.0;
  double keyframe_interval = 0.5;        // s
  int max_observations_per_keyframe = 80;
  double landmark_sigma = 0.0;           // m
  double keyframe_position_sigma = 0.0;  // m
  double keyframe_rotation_sigma = 0.0;  // rad
  double keyframe_obs_sigma = 0.0;       // normalized image units
};

struct CorrespondenceConfig {
  double outlier_rate = 0.0;  // w_bar, probability each correspondence is an outlier
  double pixel_sigma = 1.0;   // per axis, truncated at 3 sigma
  int max_per_camera = 40;    // correspondence slots per camera and map
  double max_range = 40.0;
  double inlier_weight_a = 8.0, inlier_weight_b = 2.0;
  double outlier_weight_a = 2.0, outlier_weight_b = 5.0;
};

struct ScenarioConfig {
  TrajectoryConfig trajectory;
  RigConfig rig;
  EnvironmentConfig environment;
  std::vector<MapConfig> maps{MapConfig{}};
  ImuNoise imu_noise;
  CorrespondenceConfig correspondences;
  double camera_rate = 10.0;         // Hz
  double map_query_period = 1.0;     // s between map-matching frames
  double feature_pixel_sigma = 1.0;  // local tracks
  int max_tracks_per_camera = 25;
  double max_track_range = 30.0;
  std::uint64_t seed = 1;
};

struct CrossMapAssociation {
  int map_a = 0;
  int landmark_a = 0;
  int map_b = 0;
  int landmark_b = 0;
};

struct Frame {
  double timestamp = 0.0;
  std::vector<FeatureObservation> tracks;
  std::vector<Correspondence> correspondences;  // grouped by map id, may be empty
};

struct Scenario {
  ScenarioConfig config;
  std::vector<BodyState> ground_truth;  // at IMU rate, GT frame
  std::vector<ImuSample> imu;           // corrupted stream
  CameraRig rig;
  std::vector<Vec3> environment;        // GT frame points, index = feature id
  std::vector<map::MapBundle> maps;
  std::vector<std::vector<int>> map_landmark_env;  // per map: landmark id -> environment index
  std::vector<RigidTransform> map_T_gt;             // G^i_T_GT per map
  RigidTransform gt_T_local;                        // GT_T_L
  std::vector<CrossMapAssociation> associations;
  std::vector<Frame> frames;

  // G^i_T_L for map index i.
  RigidTransform true_map_T_local(std::size_t map_index) const;
  // Ground-truth body pose at t (interpolated from the analytic model).
  BodyState truth_at(double t) const;
  std::size_t map_index(int map_id) const;
};

Scenario generate_scenario(const ScenarioConfig& cfg);

// Correspondences for one camera frame against map `map_index`.
// cfg.max_per_camera slots are drawn per camera; each is an outlier with
// probability w_bar. Inlier slots are dropped once the visible landmarks run out. Inliers are
// visible map landmarks observed with truncated Gaussian pixel noise; an
// outlier pairs a uniformly random pixel with a uniformly chosen wrong landmark.
std::vector<Correspondence> generate_correspondences(const Scenario& scenario, double timestamp, std::size_t map_index,
                                                     const CorrespondenceConfig& cfg, std::uint64_t seed);

// Exact-count variant for controlled experiments: `inliers` correct matches
// and `outliers` wrong ones for a single camera, map frame given by map_T_imu.
struct PointSet {
  std::vector<Vec3> points;  // map frame
};
std::vector<Correspondence> make_correspondences(const PointSet& points, const RigidTransform& map_T_imu,
                                                 const CameraModel& camera, int map_id, int inliers, int outliers,
                                                 double pixel_sigma, std::mt19937_64& rng,
                                                 const CorrespondenceConfig& weights = {});

// Random landmarks in front of `camera` at depth [min_depth, max_depth] that
// project inside the image, expressed in the map frame.
PointSet random_visible_points(const RigidTransform& map_T_imu, const CameraModel& camera, int count, double min_depth,
                               double max_depth, std::mt19937_64& rng);

}  // namespace vilo::sim
