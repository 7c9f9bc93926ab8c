#pragma once

#include "vilo/camera.hpp"
#include "vilo/geometry.hpp"
#include "vilo/map_model.hpp"
#include "vilo/sim.hpp"

#include <Eigen/Core>

#include <deque>
#include <map>
#include <optional>
#include <vector>

namespace vilo::filter {

using MatX = Eigen::MatrixXd;
using VecX = Eigen::VectorXd;
using sim::ImuSample;

// State layout
// ------------
// The error state is a stack of blocks in insertion order; each block records
// its own offset into P. The IMU block always sits at offset 0:
//
//   IMU (15):       theta (I_R_L), L_v_I, L_p_I, b_g, b_a
//   clone (6):      theta (I_R_L at the clone time), L_p_I
//   map (6):        theta (G_R_L), G_p_L
//   keyframe (6):   theta (G_R_KF), G_p_KF      nuisance, Schmidt
//
// Every rotation uses the same left perturbation: R = exp(-[theta]x) R_hat,
// i.e. q = dq (x) q_hat with the JPL dq = [theta / 2, 1]. Positions, velocity
// and biases are additive. Removing a block compacts the offsets of the
// blocks behind it.

struct FilterConfig {
  int window_size = 11;  // B
  // IMU noise as generated by the simulator: per-sample white noise stds at
  // imu_rate, continuous random-walk densities.
  double gyro_noise = 1e-3;
  double accel_noise = 1e-2;
  double gyro_walk = 1e-5;
  double accel_walk = 1e-4;
  double imu_rate = 200.0;
  // Initial uncertainty of the VIO block.
  double init_attitude_sigma = 1e-3;  // rad
  double init_velocity_sigma = 1e-2;
  double init_position_sigma = 1e-6;
  double init_gyro_bias_sigma = 1e-3;
  double init_accel_bias_sigma = 1e-2;
  // Measurements.
  double pixel_sigma = 1.0;             // local tracks
  double map_pixel_sigma = 1.0;         // current-camera rows of map observations
  double map_noise_inflation = 1.0;     // multiplies map_pixel_sigma
  double keyframe_obs_sigma = 2e-3;     // normalized image units
  double chi2_confidence = 0.95;
  bool chi2_gate = true;
  // Nuisance keyframes. A zero sigma treats keyframes as constants.
  double keyframe_position_sigma = 0.01;
  double keyframe_rotation_sigma = 0.1 * kPi / 180.0;
  int max_nuisance_keyframes = 30;
  int max_anchor_keyframes = 2;
  // Map registration: the initializer covariance is scaled and floored.
  double registration_inflation = 4.0;
  double registration_yaw_floor = 0.2 * kPi / 180.0;  // sigma, rad
  double registration_position_floor = 0.05;          // sigma, m
  double registration_tilt_sigma = 1e-4;              // rad, roll/pitch of G_R_L
  // Local feature triangulation.
  double min_triangulation_depth = 0.2;
  double max_triangulation_residual = 10.0;  // in units of pixel_sigma
};

struct ImuState {
  double timestamp = 0.0;
  Rotation q_il;  // I_R_L
  Vec3 v = Vec3::Zero();
  Vec3 p = Vec3::Zero();
  Vec3 bg = Vec3::Zero();
  Vec3 ba = Vec3::Zero();
};

struct Clone {
  double timestamp = 0.0;
  Rotation q_il;
  Vec3 p = Vec3::Zero();
  int offset = 0;
};

struct MapTransform {
  Rotation q_gl;  // G_R_L
  Vec3 p = Vec3::Zero();  // G_p_L
  int offset = 0;
};

struct NuisanceKeyframe {
  Rotation q_gk;  // G_R_KF
  Vec3 p = Vec3::Zero();
  int offset = 0;
  long last_used = 0;
};

// One observation of a tracked local feature, normalized image coordinates.
struct TrackObservation {
  double timestamp = 0.0;  // must match a clone
  int camera_id = 0;
  Vec2 normalized = Vec2::Zero();
};

struct FeatureTrack {
  int feature_id = 0;
  std::vector<TrackObservation> observations;
};

// One matched map landmark seen by the current camera.
struct MapFeature {
  int camera_id = 0;
  Vec2 pixel = Vec2::Zero();
  int landmark_id = 0;
  Vec3 point = Vec3::Zero();  // in map k
  // Optional cross-map link: the same physical point is landmark
  // `cross_landmark_id` of map `cross_map_id`.
  int cross_map_id = -1;
  int cross_landmark_id = -1;
};

struct MapObservation {
  int map_id = 0;
  double timestamp = 0.0;  // must match a clone, normally the newest
  std::vector<MapFeature> features;
};

struct UpdateStats {
  int features_used = 0;
  int features_rejected = 0;  // chi-square gate
  int features_skipped = 0;   // triangulation or geometry failure
  int rows = 0;
};

struct PoseRecord {
  double timestamp = 0.0;
  int map_id = -1;  // -1: local frame only
  RigidTransform map_T_imu;
  RigidTransform local_T_imu;
  double covariance_trace = 0.0;
};

/// Multi-map Schmidt-MSCKF. Single owner, not thread safe.
class MultiMapFilter {
 public:
  MultiMapFilter(const FilterConfig& cfg, const CameraRig& rig);

  // Seeds the VIO block. `first` is the IMU reading at the start time.
  void initialize(const ImuState& state, const ImuSample& first);
  bool initialized() const { return initialized_; }

  // Integrates from the current time to sample.timestamp using the previous
  // reading and this one. Throws Error on non-increasing time.
  void propagate(const ImuSample& sample);

  // Clones the current pose; drops the oldest clone once the window exceeds B.
  void clone_and_marginalize();

  // MSCKF update with features marginalized by null-space projection.
  UpdateStats update_local(const std::vector<FeatureTrack>& tracks);

  // Map update, Schmidt on keyframes. Throws UnknownMapError when the map
  // (or a cross map) is not registered.
  UpdateStats update_map(const MapObservation& obs, const map::MapBundle& map,
                         const std::map<int, const map::MapBundle*>& other_maps = {});

  // Adds G_T_L from an initializer result. `map_T_query` is G_T_Q where Q is
  // the level IMU frame at the current time; `covariance` is over (yaw, p).
  // Throws Error on a duplicate id.
  void register_map(int map_id, const YawPose& map_T_query, const Eigen::Matrix4d& covariance);
  bool has_map(int map_id) const { return maps_.count(map_id) > 0; }
  std::vector<int> map_ids() const;

  // G_T_I = G_T_L * L_T_I from the current estimates. Throws UnknownMapError.
  RigidTransform current_pose_in_map(int map_id) const;
  RigidTransform local_pose() const;
  RigidTransform map_transform(int map_id) const;  // G_T_L

  const ImuState& imu() const { return imu_; }
  const std::deque<Clone>& clones() const { return clones_; }
  const std::map<int, MapTransform>& maps() const { return maps_; }
  const std::map<std::pair<int, int>, NuisanceKeyframe>& nuisance() const { return keyframes_; }
  const MatX& covariance() const { return P_; }
  int dimension() const { return static_cast<int>(P_.rows()); }
  // Indices of the active (non-nuisance) part of the error state.
  std::vector<int> active_indices() const;
  std::vector<int> nuisance_indices() const;
  const FilterConfig& config() const { return cfg_; }
  // Largest |N^T H_f| entry seen by any null-space projection so far.
  double max_nullspace_residual() const { return max_nullspace_residual_; }
  int gate_rejections() const { return gate_rejections_; }

  // Appends one record per registered map (or a single local record).
  void log_pose(std::vector<PoseRecord>& out) const;

  // Applies an error-state correction; nuisance entries are ignored unless
  // `include_nuisance` (tests perturb the full state).
  void apply_correction(const VecX& dx, bool include_nuisance = false);

  // Lifts a map keyframe into the nuisance block (no-op when present or in
  // zero-sigma mode). Returns false in zero-sigma mode.
  bool lift_keyframe(int map_id, const map::MapKeyframe& kf);

  // Schmidt EKF step on whitened rows (R = I) over the given state columns.
  // Nuisance means and P_NN are never modified.
  void schmidt_update(const std::vector<int>& cols, const MatX& H, const VecX& r);

 private:
  struct Rows {
    MatX hx;                 // rows x columns of `cols`
    Eigen::Matrix<double, Eigen::Dynamic, 3> hf;
    VecX r;
  };

  int add_block(int size, const MatX& cross, const MatX& cov);
  void remove_block(int offset, int size);
  const Clone& clone_at(double t) const;
  const CameraModel& camera(int id) const;
  // Null-space projection of one feature's rows; whitened input.
  bool project_out_feature(Rows& rows);
  bool gate(const std::vector<int>& cols, const MatX& H, const VecX& r) const;
  std::optional<Vec3> triangulate(const FeatureTrack& track) const;

  FilterConfig cfg_;
  CameraRig rig_;
  bool initialized_ = false;
  ImuState imu_;
  ImuSample last_sample_;
  std::deque<Clone> clones_;
  std::map<int, MapTransform> maps_;
  std::map<std::pair<int, int>, NuisanceKeyframe> keyframes_;
  MatX P_;
  long update_counter_ = 0;
  double max_nullspace_residual_ = 0.0;
  int gate_rejections_ = 0;

  friend struct FilterTestAccess;
};

// Measurement models in normalized image coordinates with Jacobians w.r.t.
// the 6-dof error blocks (theta, p) involved and the feature position.
namespace model {

using Mat26 = Eigen::Matrix<double, 2, 6>;
using Mat23 = Eigen::Matrix<double, 2, 3>;

struct PoseBlock {
  Rotation q;  // rotation as stored in the state
  Vec3 p = Vec3::Zero();
};

struct Prediction {
  Vec2 z = Vec2::Zero();
  double depth = 0.0;  // camera z of the point
};

// Local feature F (frame L) seen from clone (I_R_L, L_p_I) through camera I_T_C.
Prediction local(const PoseBlock& clone, const RigidTransform& imu_T_cam, const Vec3& f_l, Mat26* j_clone,
                 Mat23* j_f);

// Map feature F (frame G) seen from clone via G_T_L = (map.q, map.p).
Prediction map_camera(const PoseBlock& clone, const PoseBlock& map, const RigidTransform& imu_T_cam, const Vec3& f_g,
                      Mat26* j_clone, Mat26* j_map, Mat23* j_f);

// Map feature F (frame G) seen from keyframe (G_R_KF, G_p_KF).
Prediction keyframe(const PoseBlock& kf, const Vec3& f_g, Mat26* j_kf, Mat23* j_f);

// Feature of map k seen from a keyframe of map s: F_s = G^s_T_L (G^k_T_L)^-1 F_k.
Prediction cross_keyframe(const PoseBlock& map_k, const PoseBlock& map_s, const PoseBlock& kf_s, const Vec3& f_k,
                          Mat26* j_map_k, Mat26* j_map_s, Mat26* j_kf, Mat23* j_f);

// Error-state retraction used by the filter: R <- exp(-theta) R, p <- p + dp.
PoseBlock retract(const PoseBlock& b, const Eigen::Matrix<double, 6, 1>& dx);

}  // namespace model

}  // namespace vilo::filter
