#pragma once

#include "vilo/solvers.hpp"

#include <cmath>
#include <vector>

namespace vilo::init {

using solvers::Correspondence;
using solvers::QueryGeometry;

struct InitConfig {
  double pixel_sigma = 1.0;
  double yaw_step = 0.25 * kPi / 180.0;  // vote resolution
  double yaw_slack_fraction = 0.02;      // yaw inliers tolerate step * fraction of yaw error
  double bound_scale = 3.0;              // sigma multiple for TIM and reprojection bounds
  double linearization_margin = 1.1;     // covers curvature of the TIM coefficients in the pixels
  double yaw_margin = 0.2 * kPi / 180.0; // yaw error allowance in the translation stage
  double compatibility_gate = 2.0;       // max summed normalized residual of a compatible pair
  double final_threshold_sigmas = 4.5;   // reprojection gate for the final inlier set
  int min_inliers = 4;
};

// Translation-invariant measurement from correspondences i and j:
// d(a) = d1 sin a + d2 cos a + d3, consistent when |d(a)| <= bound.
struct TimConstraint {
  int i = 0;
  int j = 0;
  Vec3 d = Vec3::Zero();
  double bound = 0.0;  // n_ij

  double eval(double yaw) const { return d.x() * std::sin(yaw) + d.y() * std::cos(yaw) + d.z(); }
  bool consistent(double yaw, double slack = 0.0) const {
    return std::abs(eval(yaw)) <= bound + slack * (std::abs(d.x()) + std::abs(d.y()));
  }
};

// One constraint per unordered pair whose rays leave yaw observable.
std::vector<TimConstraint> build_tims(const std::vector<Correspondence>& corrs, const QueryGeometry& q,
                                      const InitConfig& cfg = {});

struct YawVote {
  double yaw = 0.0;
  int count = 0;  // constraints with |d(yaw)| <= bound
};

// Exact maximum of the number of consistent constraints over [-pi, pi]. Each
// constraint holds on at most two arcs; a sweep over the arc endpoints finds
// every deepest range, and inside a range the yaw is placed to centre its
// constraints (searched at step/50, then polished). Ties between ranges go to
// the smallest |yaw|. Throws InsufficientDataError on an empty constraint set.
YawVote vote_yaw(const std::vector<TimConstraint>& tims, double step);

struct TranslationResult {
  Vec3 translation = Vec3::Zero();  // G_p_Q
  std::vector<int> inliers;         // indices into the input, sorted
};

// Pairwise compatibility at a fixed yaw: a common translation keeps both
// normalized angular residuals small. `bounds_px` are per-correspondence
// pixel bounds.
bool translation_compatible(const Correspondence& a, const Correspondence& b, double yaw, double bound_a_px,
                            double bound_b_px, const QueryGeometry& q, double gate = 2.0);

// Maximum clique of the compatibility graph by branch and bound.
std::vector<int> maximum_clique(const std::vector<std::vector<char>>& adjacency);

// Throws InsufficientDataError on empty input.
TranslationResult solve_translation(const std::vector<Correspondence>& corrs, double yaw,
                                    const std::vector<double>& bounds_px, const QueryGeometry& q, double gate = 2.0);

struct InitResult {
  YawPose pose;                          // from the yaw vote and the clique fit
  YawPose refined;                       // after nonlinear refinement
  Eigen::Matrix4d covariance = Eigen::Matrix4d::Zero();  // of `refined`, (yaw, p)
  std::vector<int> yaw_inliers;          // correspondences in at least one consistent TIM
  std::vector<int> translation_inliers;  // final set, subset of yaw_inliers
  int tim_count = 0;
  int yaw_consensus = 0;
  double wall_time_s = 0.0;
};

// Deterministic 4DoF initialization. Throws InsufficientDataError below two
// correspondences and NoConsensusError when the clique is below min_inliers.
InitResult initialize(const std::vector<Correspondence>& corrs, const InitConfig& cfg, const QueryGeometry& q);

}  // namespace vilo::init
