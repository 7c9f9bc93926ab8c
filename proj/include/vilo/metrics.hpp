#pragma once

#include "vilo/geometry.hpp"

#include <filesystem>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

namespace vilo::metrics {

struct PoseSample {
  double timestamp = 0.0;
  RigidTransform pose;  // frame_T_body
};

/// Timed poses in one named frame. Timestamps strictly increase.
struct Trajectory {
  std::string frame;
  std::vector<PoseSample> samples;

  // Appends a sample; throws InvariantError when t does not increase.
  void push(double t, const RigidTransform& pose);
  std::size_t size() const { return samples.size(); }
  bool empty() const { return samples.empty(); }
  // Throws InvariantError on non-increasing timestamps or non-finite values.
  void validate() const;
};

using PointCloud = std::vector<Vec3>;

inline constexpr double kDefaultAssociationTolerance = 0.01;  // s

// Index pairs (est, gt) matched by nearest timestamp within `tolerance`.
// Each gt sample is used at most once; pairs come out in est order.
std::vector<std::pair<std::size_t, std::size_t>> associate(const Trajectory& est, const Trajectory& gt,
                                                           double tolerance = kDefaultAssociationTolerance);

// T minimizing sum |gt_i - T est_i|^2 over associated positions (no scale).
// Throws InsufficientDataError below 3 pairs and DegenerateError when the
// positions are collinear.
RigidTransform align_se3(const Trajectory& est, const Trajectory& gt,
                         double tolerance = kDefaultAssociationTolerance);

// Keyframe ATE: RMSE of |gt_i - T est_i| with T from align_se3.
double mapping_keyframe_error(const Trajectory& map_traj, const Trajectory& gt,
                              double tolerance = kDefaultAssociationTolerance);

struct IcpConfig {
  int max_iterations = 50;
  double tolerance = 1e-9;             // stop when the mean squared error changes less
  double max_correspondence = 1.0;     // m, nearest-neighbour cap
  RigidTransform initial;              // starting gt_T_recon
};

struct IcpResult {
  double rmse = 0.0;           // over nearest-neighbour pairs within the cap
  RigidTransform transform;    // gt_T_recon
  int iterations = 0;
  bool converged = false;      // false: partial result after max_iterations
  std::size_t pairs = 0;
};

// Point-to-point ICP of `recon` onto `gt` starting from cfg.initial, then the
// nearest-neighbour RMSE. Throws InsufficientDataError on an empty cloud or
// when fewer than 3 pairs fall within the cap.
IcpResult mapping_point_error(const PointCloud& recon, const PointCloud& gt, const IcpConfig& cfg = {});

struct PoseError {
  double translation = 0.0;  // m
  double rotation = 0.0;     // rad
};

// |t_est - t_gt| and arccos((tr(R_est^T R_gt) - 1) / 2).
PoseError alignment_error(const RigidTransform& est, const RigidTransform& gt);

// Causal local error: T = gt_1 est_1^-1 from the first associated pair only,
// RMSE of positions over the remaining pairs. Throws InsufficientDataError
// below 2 pairs.
double local_trajectory_error(const Trajectory& est, const Trajectory& gt,
                              double tolerance = kDefaultAssociationTolerance);

// Plain positional RMSE, both trajectories in the same map frame. Throws
// InvariantError when some est sample has no gt partner.
double map_trajectory_error(const Trajectory& est, const Trajectory& gt,
                            double tolerance = kDefaultAssociationTolerance);

// Text formats, see docs/formats.md. One sample per line:
//   timestamp tx ty tz qx qy qz qw     (JPL quaternion of frame_R_body)
// '#' starts a comment line.
void write_trajectory(std::ostream& os, const Trajectory& traj);
Trajectory read_trajectory(std::istream& is, const std::string& frame = "");
void save_trajectory(const Trajectory& traj, const std::filesystem::path& path);
Trajectory load_trajectory(const std::filesystem::path& path, const std::string& frame = "");

// Whitespace-separated x y z per line.
void write_point_cloud(std::ostream& os, const PointCloud& cloud);
PointCloud read_point_cloud(std::istream& is);

}  // namespace vilo::metrics
