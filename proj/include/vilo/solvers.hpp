#pragma once

#include "vilo/camera.hpp"
#include "vilo/geometry.hpp"
#include "vilo/sim.hpp"

#include <Eigen/Core>

#include <array>
#include <cstdint>
#include <optional>
#include <vector>

namespace vilo::solvers {

using sim::Correspondence;
using Mat4d = Eigen::Matrix4d;

// Query side of a match: the rig and the roll/pitch of the body. Bearings are
// expressed in the level query frame Q, whose origin is the IMU and whose
// rotation to the body is `tilt` (Q_R_I). The unknown is the 4DoF G_T_Q.
struct QueryGeometry {
  Rotation tilt;
  CameraRig rig{CameraModel{}};
};

// Viewing ray of one correspondence in frame Q.
struct BearingRay {
  Vec3 origin = Vec3::Zero();     // camera center
  Vec3 direction = Vec3::UnitZ(); // unit length
  // Orthonormal basis of the plane normal to `direction`.
  Vec3 e1 = Vec3::UnitX();
  Vec3 e2 = Vec3::UnitY();
};

BearingRay make_ray(const Vec3& origin, const Vec3& direction);
BearingRay ray_for(const QueryGeometry& q, const Correspondence& c);

struct SolverCandidate {
  YawPose pose;  // G_T_Q
  std::array<int, 3> sample{-1, -1, -1};
};

// Coefficients of d1 sin(a) + d2 cos(a) + d3 = 0 for a pair of rays, with
// translation eliminated. Empty when the pair leaves yaw unobservable
// (parallel rays through one center, or coincident points).
std::optional<Vec3> tim_coefficients(const BearingRay& r1, const Vec3& f1, const BearingRay& r2, const Vec3& f2);

// Roots of d1 sin(a) + d2 cos(a) + d3 = 0 in [-pi, pi]. A tangent case within
// `slack` of touching returns the touching angle.
std::vector<double> solve_tim(const Vec3& d, double slack = 1e-9);

// Translation for a fixed yaw from two or more rays, least squares.
Vec3 translation_for_yaw(double yaw, const std::vector<BearingRay>& rays, const std::vector<Vec3>& points);

// Up to two candidates. Throws DegenerateError for coincident points or an
// unobservable yaw; returns an empty list when the rays admit no real yaw.
std::vector<SolverCandidate> solve_2pt(const BearingRay& r1, const Vec3& f1, const BearingRay& r2, const Vec3& f2);
std::vector<SolverCandidate> solve_2pt(const Correspondence& c1, const Correspondence& c2,
                                       const QueryGeometry& q = QueryGeometry{});

// Reprojection of map points under a 4DoF pose, per camera of the query rig.
class Reprojector {
 public:
  explicit Reprojector(const QueryGeometry& q);
  // Pixel error of `c` under G_T_Q = pose; +inf when behind the camera.
  double error(const YawPose& pose, const Correspondence& c) const;
  // Residual (projection - pixel) with its Jacobian w.r.t. (yaw, p). Returns
  // false when the point is behind the camera.
  bool residual(const YawPose& pose, const Correspondence& c, Vec2& r, Eigen::Matrix<double, 2, 4>* jac) const;
  const QueryGeometry& geometry() const { return q_; }

 private:
  struct Cam {
    int id;
    Intrinsics K;
    Mat3 R_cq;  // C_R_Q
    Vec3 o;     // camera center in Q
  };
  const Cam& cam(int id) const;
  QueryGeometry q_;
  std::vector<Cam> cams_;
};

struct RefineResult {
  YawPose pose;
  Mat4d covariance = Mat4d::Zero();  // (yaw, p), from sigma^2 (J^T J)^-1
  double rms_px = 0.0;
  int iterations = 0;
};

// Levenberg-Marquardt on reprojection error over `subset` (all if empty).
RefineResult refine_pose(const YawPose& init, const std::vector<Correspondence>& corrs, const std::vector<int>& subset,
                         const Reprojector& proj, double pixel_sigma, int max_iterations = 30);

struct RansacConfig {
  int iterations = 100;        // k
  double threshold_px = 3.0;
  int min_inliers = 6;
  bool use_weights = false;    // sample proportional to correspondence weight
  std::uint64_t seed = 1;
  int sample_size = 2;         // 2 for 2P/MC2P, 3 for the three-point baseline
  bool polish = false;         // least-squares refinement on the final inliers
  double pixel_sigma = 1.0;    // only used by the polish covariance
};

struct MatchResult {
  YawPose pose;  // G_T_Q in the queried map frame
  std::vector<int> inliers;
  double inlier_ratio = 0.0;
  int iterations = 0;
  int candidates = 0;
};

// Throws InsufficientDataError below sample_size correspondences and
// NoConsensusError when no candidate reaches min_inliers.
MatchResult ransac_pose(const std::vector<Correspondence>& corrs, const RansacConfig& cfg,
                        const QueryGeometry& q = QueryGeometry{});

// 1 - (1 - w^n)^k
double ransac_success_probability(double w, int n, int k);

}  // namespace vilo::solvers
