#include "vilo/metrics.hpp"

#include "vilo/error.hpp"

#include <Eigen/LU>
#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>

namespace vilo::metrics {

namespace {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

// Closed-form rigid fit dst ~ R src + t.
RigidTransform kabsch(const std::vector<Vec3>& src, const std::vector<Vec3>& dst) {
  const std::size_t n = src.size();
  Vec3 ms = Vec3::Zero(), md = Vec3::Zero();
  for (std::size_t i = 0; i < n; ++i) {
    ms += src[i];
    md += dst[i];
  }
  ms /= static_cast<double>(n);
  md /= static_cast<double>(n);
  Mat3 h = Mat3::Zero();
  for (std::size_t i = 0; i < n; ++i) h += (src[i] - ms) * (dst[i] - md).transpose();
  const Eigen::JacobiSVD<Mat3> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 d = Mat3::Identity();
  d(2, 2) = (svd.matrixV() * svd.matrixU().transpose()).determinant() < 0.0 ? -1.0 : 1.0;
  const Mat3 r = svd.matrixV() * d * svd.matrixU().transpose();
  return {Rotation::from_matrix(r), md - r * ms};
}

bool collinear(const std::vector<Vec3>& pts) {
  Vec3 m = Vec3::Zero();
  for (const auto& p : pts) m += p;
  m /= static_cast<double>(pts.size());
  Mat3 s = Mat3::Zero();
  for (const auto& p : pts) s += (p - m) * (p - m).transpose();
  const Eigen::JacobiSVD<Mat3> svd(s);
  const Vec3 sv = svd.singularValues();
  return sv[0] <= 0.0 || sv[1] <= 1e-12 * sv[0];
}

double rmse(double sum_sq, std::size_t n) { return std::sqrt(sum_sq / static_cast<double>(n)); }

}  // namespace

void Trajectory::push(double t, const RigidTransform& pose) {
  if (!samples.empty() && !(t > samples.back().timestamp))
    throw InvariantError("trajectory '" + frame + "': timestamp " + fmt(t) + " does not increase");
  samples.push_back({t, pose});
}

void Trajectory::validate() const {
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    if (!std::isfinite(s.timestamp) || !s.pose.translation.allFinite() || !s.pose.rotation.jpl().allFinite())
      throw InvariantError("trajectory '" + frame + "': non-finite sample " + std::to_string(i));
    if (i > 0 && !(s.timestamp > samples[i - 1].timestamp))
      throw InvariantError("trajectory '" + frame + "': timestamps not strictly increasing at " + std::to_string(i));
  }
}

std::vector<std::pair<std::size_t, std::size_t>> associate(const Trajectory& est, const Trajectory& gt,
                                                           double tolerance) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  std::vector<char> used(gt.size(), 0);
  for (std::size_t i = 0; i < est.size(); ++i) {
    const double t = est.samples[i].timestamp;
    const auto it = std::lower_bound(gt.samples.begin(), gt.samples.end(), t,
                                     [](const PoseSample& s, double v) { return s.timestamp < v; });
    std::size_t best = gt.size();
    double best_dt = std::numeric_limits<double>::infinity();
    for (auto c : {it, it == gt.samples.begin() ? it : std::prev(it)}) {
      if (c == gt.samples.end()) continue;
      const double dt = std::abs(c->timestamp - t);
      const auto j = static_cast<std::size_t>(c - gt.samples.begin());
      if (dt < best_dt || (dt == best_dt && j < best)) {
        best_dt = dt;
        best = j;
      }
    }
    if (best < gt.size() && best_dt <= tolerance && !used[best]) {
      used[best] = 1;
      out.emplace_back(i, best);
    }
  }
  return out;
}

RigidTransform align_se3(const Trajectory& est, const Trajectory& gt, double tolerance) {
  const auto pairs = associate(est, gt, tolerance);
  if (pairs.size() < 3)
    throw InsufficientDataError("align_se3: " + std::to_string(pairs.size()) + " associated pairs, need 3");
  std::vector<Vec3> src, dst;
  for (const auto& [i, j] : pairs) {
    src.push_back(est.samples[i].pose.translation);
    dst.push_back(gt.samples[j].pose.translation);
  }
  if (collinear(src) || collinear(dst)) throw DegenerateError("align_se3: positions are collinear");
  return kabsch(src, dst);
}

double mapping_keyframe_error(const Trajectory& map_traj, const Trajectory& gt, double tolerance) {
  const RigidTransform t = align_se3(map_traj, gt, tolerance);
  const auto pairs = associate(map_traj, gt, tolerance);
  double sum = 0.0;
  for (const auto& [i, j] : pairs)
    sum += (gt.samples[j].pose.translation - transform_point(t, map_traj.samples[i].pose.translation)).squaredNorm();
  return rmse(sum, pairs.size());
}

IcpResult mapping_point_error(const PointCloud& recon, const PointCloud& gt, const IcpConfig& cfg) {
  if (recon.empty() || gt.empty()) throw InsufficientDataError("mapping_point_error: empty point cloud");
  const double cap2 = cfg.max_correspondence * cfg.max_correspondence;

  // Brute-force nearest neighbours of the moved recon points in gt.
  // TODO: spatial index for clouds beyond a few thousand points.
  auto match = [&](const RigidTransform& t, std::vector<Vec3>& src, std::vector<Vec3>& dst) {
    src.clear();
    dst.clear();
    double sum = 0.0;
    for (const auto& q : recon) {
      const Vec3 p = transform_point(t, q);
      double best = std::numeric_limits<double>::infinity();
      std::size_t bj = 0;
      for (std::size_t j = 0; j < gt.size(); ++j) {
        const double d = (gt[j] - p).squaredNorm();
        if (d < best) {
          best = d;
          bj = j;
        }
      }
      if (best <= cap2) {
        src.push_back(q);
        dst.push_back(gt[bj]);
        sum += best;
      }
    }
    return sum;
  };

  IcpResult res;
  std::vector<Vec3> src, dst;
  RigidTransform current = cfg.initial;
  double prev = std::numeric_limits<double>::infinity();
  double best = prev;
  for (int it = 0; it < cfg.max_iterations; ++it) {
    const double sum = match(current, src, dst);
    if (src.size() < 3) throw InsufficientDataError("mapping_point_error: fewer than 3 pairs within the cap");
    const double mse = sum / static_cast<double>(src.size());
    res.iterations = it + 1;
    // The pair set can change between iterations, so keep the best iterate.
    if (mse < best) {
      best = mse;
      res.transform = current;
    }
    if (std::abs(prev - mse) <= cfg.tolerance) {
      res.converged = true;
      break;
    }
    prev = mse;
    current = kabsch(src, dst);
  }
  const double sum = match(res.transform, src, dst);
  if (src.empty()) throw InsufficientDataError("mapping_point_error: no pairs within the cap");
  res.pairs = src.size();
  res.rmse = rmse(sum, src.size());
  return res;
}

PoseError alignment_error(const RigidTransform& est, const RigidTransform& gt) {
  const Mat3 r = est.rotation.matrix().transpose() * gt.rotation.matrix();
  // Same angle as arccos((tr - 1) / 2), but exact near zero and pi.
  const double c = std::clamp((r.trace() - 1.0) / 2.0, -1.0, 1.0);
  const double s = 0.5 * Vec3(r(2, 1) - r(1, 2), r(0, 2) - r(2, 0), r(1, 0) - r(0, 1)).norm();
  return {(est.translation - gt.translation).norm(), std::atan2(s, c)};
}

double local_trajectory_error(const Trajectory& est, const Trajectory& gt, double tolerance) {
  const auto pairs = associate(est, gt, tolerance);
  if (pairs.size() < 2)
    throw InsufficientDataError("local_trajectory_error: " + std::to_string(pairs.size()) + " associated pairs, need 2");
  // |gt_i - gt_1 est_1^-1 est_i| evaluated in the first body frame, where
  // both sides are plain relative positions.
  const RigidTransform& e1 = est.samples[pairs[0].first].pose;
  const RigidTransform& g1 = gt.samples[pairs[0].second].pose;
  const Mat3 re = e1.rotation.matrix().transpose(), rg = g1.rotation.matrix().transpose();
  double sum = 0.0;
  for (std::size_t k = 1; k < pairs.size(); ++k) {
    const auto& [i, j] = pairs[k];
    const Vec3 de = re * (est.samples[i].pose.translation - e1.translation);
    const Vec3 dg = rg * (gt.samples[j].pose.translation - g1.translation);
    sum += (dg - de).squaredNorm();
  }
  return rmse(sum, pairs.size() - 1);
}

double map_trajectory_error(const Trajectory& est, const Trajectory& gt, double tolerance) {
  if (est.empty()) throw InsufficientDataError("map_trajectory_error: empty trajectory");
  const auto pairs = associate(est, gt, tolerance);
  if (pairs.size() != est.size())
    throw InvariantError("map_trajectory_error: " + std::to_string(est.size() - pairs.size()) +
                         " estimate samples without ground truth");
  double sum = 0.0;
  for (const auto& [i, j] : pairs)
    sum += (gt.samples[j].pose.translation - est.samples[i].pose.translation).squaredNorm();
  return rmse(sum, pairs.size());
}

void write_trajectory(std::ostream& os, const Trajectory& traj) {
  os << "# timestamp tx ty tz qx qy qz qw (JPL, frame_R_body)";
  if (!traj.frame.empty()) os << " frame=" << traj.frame;
  os << '\n';
  for (const auto& s : traj.samples) {
    const Vec3& t = s.pose.translation;
    const Vec4& q = s.pose.rotation.jpl();
    os << fmt(s.timestamp) << ' ' << fmt(t.x()) << ' ' << fmt(t.y()) << ' ' << fmt(t.z()) << ' ' << fmt(q[0]) << ' '
       << fmt(q[1]) << ' ' << fmt(q[2]) << ' ' << fmt(q[3]) << '\n';
  }
}

Trajectory read_trajectory(std::istream& is, const std::string& frame) {
  Trajectory traj;
  traj.frame = frame;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    std::istringstream ss(line);
    double v[8];
    for (int k = 0; k < 8; ++k)
      if (!(ss >> v[k])) throw ParseError(line_no, "pose", "expected 8 numbers");
    const Vec4 q(v[4], v[5], v[6], v[7]);
    if (!(q.norm() > 0.0)) throw ParseError(line_no, "quaternion", "zero norm");
    try {
      traj.push(v[0], RigidTransform(Rotation::from_jpl(q), Vec3(v[1], v[2], v[3])));
    } catch (const InvariantError& e) {
      throw ParseError(line_no, "timestamp", e.what());
    }
  }
  return traj;
}

void save_trajectory(const Trajectory& traj, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw Error("cannot write " + path.string());
  write_trajectory(os, traj);
}

Trajectory load_trajectory(const std::filesystem::path& path, const std::string& frame) {
  std::ifstream is(path);
  if (!is) throw Error("cannot read " + path.string());
  return read_trajectory(is, frame);
}

void write_point_cloud(std::ostream& os, const PointCloud& cloud) {
  for (const auto& p : cloud) os << fmt(p.x()) << ' ' << fmt(p.y()) << ' ' << fmt(p.z()) << '\n';
}

PointCloud read_point_cloud(std::istream& is) {
  PointCloud cloud;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    std::istringstream ss(line);
    Vec3 p;
    if (!(ss >> p.x() >> p.y() >> p.z())) throw ParseError(line_no, "point", "expected 3 numbers");
    if (!p.allFinite()) throw ParseError(line_no, "point", "non-finite coordinate");
    cloud.push_back(p);
  }
  return cloud;
}

}  // namespace vilo::metrics
