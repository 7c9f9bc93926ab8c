#include "vilo/solvers.hpp"

#include "vilo/error.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

namespace vilo::solvers {

BearingRay make_ray(const Vec3& origin, const Vec3& direction) {
  BearingRay r;
  r.origin = origin;
  r.direction = direction.normalized();
  // Cross with the axis least aligned with the ray for a well-conditioned basis.
  Vec3 a = Vec3::Zero();
  Eigen::Index k;
  r.direction.cwiseAbs().minCoeff(&k);
  a[k] = 1.0;
  r.e1 = r.direction.cross(a).normalized();
  r.e2 = r.direction.cross(r.e1);
  return r;
}

BearingRay ray_for(const QueryGeometry& q, const Correspondence& c) {
  const CameraModel& cam = camera_by_id(q.rig, c.camera_id);
  const Mat3 r_qc = (q.tilt * cam.imu_T_cam.rotation).matrix();
  return make_ray(q.tilt.rotate(cam.imu_T_cam.translation), r_qc * cam.normalized(c.pixel));
}

namespace {

// Two constraint rows e^T (Rz^T F + t' - o) = 0 written as
// a^T t' + b^T (sin, cos, 1) = 0.
void constraint_rows(const BearingRay& r, const Vec3& f, Eigen::Matrix<double, 2, 3>& a,
                     Eigen::Matrix<double, 2, 3>& b) {
  const Vec3* es[2] = {&r.e1, &r.e2};
  for (int k = 0; k < 2; ++k) {
    const Vec3& e = *es[k];
    a.row(k) = e.transpose();
    b(k, 0) = e.x() * f.y() - e.y() * f.x();
    b(k, 1) = e.x() * f.x() + e.y() * f.y();
    b(k, 2) = e.z() * f.z() - e.dot(r.origin);
  }
}

Mat3 rz_t(double yaw) {
  const double c = std::cos(yaw), s = std::sin(yaw);
  Mat3 m;
  m << c, s, 0, -s, c, 0, 0, 0, 1;
  return m;
}

}  // namespace

std::optional<Vec3> tim_coefficients(const BearingRay& r1, const Vec3& f1, const BearingRay& r2, const Vec3& f2) {
  Eigen::Matrix<double, 4, 3> a, b;
  Eigen::Matrix<double, 2, 3> a1, b1, a2, b2;
  constraint_rows(r1, f1, a1, b1);
  constraint_rows(r2, f2, a2, b2);
  a << a1, a2;
  b << b1, b2;
  // Left null vector of the 4x3 translation block from signed 3x3 minors.
  Eigen::Vector4d n;
  for (int i = 0; i < 4; ++i) {
    Mat3 minor;
    for (int r = 0, k = 0; r < 4; ++r) {
      if (r == i) continue;
      minor.row(k++) = a.row(r);
    }
    n[i] = ((i % 2) ? -1.0 : 1.0) * minor.determinant();
  }
  const double nn = n.norm();
  if (nn < 1e-10) return std::nullopt;
  return Vec3(b.transpose() * (n / nn));
}

std::vector<double> solve_tim(const Vec3& d, double slack) {
  const double r = std::hypot(d.x(), d.y());
  if (r == 0.0) return {};
  double c = -d.z() / r;
  if (std::abs(c) > 1.0 + slack) return {};
  c = std::clamp(c, -1.0, 1.0);
  const double phi = std::atan2(d.x(), d.y());
  const double delta = std::acos(c);
  if (delta == 0.0) return {wrap_angle(phi)};
  return {wrap_angle(phi + delta), wrap_angle(phi - delta)};
}

Vec3 translation_for_yaw(double yaw, const std::vector<BearingRay>& rays, const std::vector<Vec3>& points) {
  const Mat3 rt = rz_t(yaw);
  Mat3 h = Mat3::Zero();
  Vec3 g = Vec3::Zero();
  for (std::size_t i = 0; i < rays.size(); ++i) {
    const Vec3 fq = rt * points[i] - rays[i].origin;
    for (const Vec3* e : {&rays[i].e1, &rays[i].e2}) {
      h += *e * e->transpose();
      g -= *e * e->dot(fq);
    }
  }
  const Vec3 tq = h.ldlt().solve(g);  // t' = -Rz^T p
  return -rt.transpose() * tq;
}

std::vector<SolverCandidate> solve_2pt(const BearingRay& r1, const Vec3& f1, const BearingRay& r2, const Vec3& f2) {
  const double scale = 1.0 + std::max(f1.norm(), f2.norm());
  if ((f1 - f2).norm() <= 1e-12 * scale) throw DegenerateError("2-point solver: coincident landmarks");
  const auto d = tim_coefficients(r1, f1, r2, f2);
  if (!d) throw DegenerateError("2-point solver: rays leave yaw unobservable");
  const double tol = 1e-10 * scale;
  if (std::hypot(d->x(), d->y()) <= tol) {
    if (std::abs(d->z()) <= tol) throw DegenerateError("2-point solver: yaw unobservable");
    return {};
  }
  std::vector<SolverCandidate> out;
  const std::vector<BearingRay> rays{r1, r2};
  const std::vector<Vec3> pts{f1, f2};
  for (double yaw : solve_tim(*d)) {
    SolverCandidate c;
    c.pose = YawPose(yaw, translation_for_yaw(yaw, rays, pts));
    out.push_back(c);
  }
  return out;
}

std::vector<SolverCandidate> solve_2pt(const Correspondence& c1, const Correspondence& c2, const QueryGeometry& q) {
  return solve_2pt(ray_for(q, c1), c1.point, ray_for(q, c2), c2.point);
}

// ---------------------------------------------------------------------------

Reprojector::Reprojector(const QueryGeometry& q) : q_(q) {
  for (const auto& c : q_.rig) {
    c.validate();
    const Rotation r_qc = q_.tilt * c.imu_T_cam.rotation;
    cams_.push_back({c.id, c.K, r_qc.matrix().transpose(), q_.tilt.rotate(c.imu_T_cam.translation)});
  }
}

const Reprojector::Cam& Reprojector::cam(int id) const {
  for (const auto& c : cams_) {
    if (c.id == id) return c;
  }
  throw InvariantError("unknown camera id " + std::to_string(id));
}

double Reprojector::error(const YawPose& pose, const Correspondence& c) const {
  const Cam& k = cam(c.camera_id);
  const Vec3 xq = rz_t(pose.yaw) * (c.point - pose.translation);
  const Vec3 xc = k.R_cq * (xq - k.o);
  if (xc.z() <= 1e-9) return std::numeric_limits<double>::infinity();
  const Vec2 u(k.K.fx * xc.x() / xc.z() + k.K.cx, k.K.fy * xc.y() / xc.z() + k.K.cy);
  return (u - c.pixel).norm();
}

bool Reprojector::residual(const YawPose& pose, const Correspondence& c, Vec2& r,
                           Eigen::Matrix<double, 2, 4>* jac) const {
  const Cam& k = cam(c.camera_id);
  const Mat3 rt = rz_t(pose.yaw);
  const Vec3 xq = rt * (c.point - pose.translation);
  const Vec3 xc = k.R_cq * (xq - k.o);
  if (xc.z() <= 1e-9) return false;
  const double iz = 1.0 / xc.z();
  r = Vec2(k.K.fx * xc.x() * iz + k.K.cx, k.K.fy * xc.y() * iz + k.K.cy) - c.pixel;
  if (jac) {
    Eigen::Matrix<double, 2, 3> dp;
    dp << k.K.fx * iz, 0.0, -k.K.fx * xc.x() * iz * iz, 0.0, k.K.fy * iz, -k.K.fy * xc.y() * iz * iz;
    Eigen::Matrix<double, 3, 4> dx;
    dx.col(0) = k.R_cq * Vec3(xq.y(), -xq.x(), 0.0);
    dx.rightCols<3>() = -k.R_cq * rt;
    *jac = dp * dx;
  }
  return true;
}

RefineResult refine_pose(const YawPose& init, const std::vector<Correspondence>& corrs, const std::vector<int>& subset,
                         const Reprojector& proj, double pixel_sigma, int max_iterations) {
  std::vector<int> idx = subset;
  if (idx.empty()) {
    idx.resize(corrs.size());
    for (std::size_t i = 0; i < corrs.size(); ++i) idx[i] = static_cast<int>(i);
  }
  auto evaluate = [&](const YawPose& p, Mat4d* h, Eigen::Vector4d* g) {
    double cost = 0.0;
    if (h) h->setZero();
    if (g) g->setZero();
    Vec2 r;
    Eigen::Matrix<double, 2, 4> j;
    for (int i : idx) {
      if (!proj.residual(p, corrs[i], r, h ? &j : nullptr)) {
        cost += 1e6;
        continue;
      }
      cost += r.squaredNorm();
      if (h) {
        *h += j.transpose() * j;
        *g += j.transpose() * r;
      }
    }
    return cost;
  };

  RefineResult out;
  out.pose = init;
  Mat4d h;
  Eigen::Vector4d g;
  double cost = evaluate(out.pose, &h, &g);
  double lambda = 1e-6;
  for (int it = 0; it < max_iterations; ++it) {
    out.iterations = it + 1;
    Mat4d damped = h;
    damped.diagonal() *= 1.0 + lambda;
    damped.diagonal().array() += 1e-12;
    const Eigen::Vector4d step = damped.ldlt().solve(-g);
    const YawPose trial(out.pose.yaw + step[0], out.pose.translation + step.tail<3>());
    Mat4d h2;
    Eigen::Vector4d g2;
    const double c2 = evaluate(trial, &h2, &g2);
    if (c2 <= cost) {
      out.pose = trial;
      cost = c2;
      h = h2;
      g = g2;
      lambda = std::max(lambda * 0.1, 1e-12);
      if (step.norm() < 1e-12) break;
    } else {
      lambda *= 10.0;
      if (lambda > 1e8) break;
    }
  }
  out.rms_px = idx.empty() ? 0.0 : std::sqrt(cost / (2.0 * idx.size()));
  Eigen::FullPivLU<Mat4d> lu(h);
  if (lu.isInvertible()) out.covariance = pixel_sigma * pixel_sigma * lu.inverse();
  else out.covariance = Mat4d::Identity() * 1e6;
  return out;
}

// ---------------------------------------------------------------------------

namespace {

class Sampler {
 public:
  Sampler(const std::vector<Correspondence>& corrs, bool weighted, std::uint64_t seed)
      : rng_(seed), n_(static_cast<int>(corrs.size())), uni_(0, n_ - 1) {
    if (weighted) {
      cum_.reserve(corrs.size());
      double s = 0.0;
      for (const auto& c : corrs) {
        s += std::max(c.weight, 0.0);
        cum_.push_back(s);
      }
      if (!(s > 0.0)) cum_.clear();
    }
  }

  int draw() {
    if (cum_.empty()) return uni_(rng_);
    std::uniform_real_distribution<double> u(0.0, cum_.back());
    const double x = u(rng_);
    const auto it = std::upper_bound(cum_.begin(), cum_.end(), x);
    return static_cast<int>(std::min<std::ptrdiff_t>(it - cum_.begin(), n_ - 1));
  }

  // `m` distinct indices.
  std::array<int, 3> sample(int m) {
    std::array<int, 3> s{-1, -1, -1};
    for (int k = 0; k < m; ++k) {
      int guard = 0;
      for (;;) {
        int v = draw();
        // Heavily skewed weights could starve the second draw; fall back to uniform.
        if (++guard > 1000) v = uni_(rng_);
        if (std::find(s.begin(), s.begin() + k, v) == s.begin() + k) {
          s[k] = v;
          break;
        }
      }
    }
    return s;
  }

 private:
  std::mt19937_64 rng_;
  int n_;
  std::uniform_int_distribution<int> uni_;
  std::vector<double> cum_;
};

std::vector<int> inliers_of(const YawPose& pose, const std::vector<Correspondence>& corrs, const Reprojector& proj,
                            double threshold) {
  std::vector<int> out;
  for (std::size_t i = 0; i < corrs.size(); ++i) {
    if (proj.error(pose, corrs[i]) <= threshold) out.push_back(static_cast<int>(i));
  }
  return out;
}

int count_inliers(const YawPose& pose, const std::vector<Correspondence>& corrs, const Reprojector& proj,
                  double threshold) {
  int n = 0;
  for (const auto& c : corrs) n += proj.error(pose, c) <= threshold;
  return n;
}

}  // namespace

MatchResult ransac_pose(const std::vector<Correspondence>& corrs, const RansacConfig& cfg, const QueryGeometry& q) {
  if (cfg.iterations < 1) throw Error("RANSAC needs at least one iteration");
  if (!(cfg.threshold_px > 0.0)) throw Error("RANSAC threshold must be positive");
  if (cfg.sample_size != 2 && cfg.sample_size != 3) throw Error("RANSAC sample size must be 2 or 3");
  if (static_cast<int>(corrs.size()) < std::max(2, cfg.sample_size))
    throw InsufficientDataError("RANSAC needs at least " + std::to_string(cfg.sample_size) + " correspondences");

  const Reprojector proj(q);
  std::vector<BearingRay> rays;
  rays.reserve(corrs.size());
  for (const auto& c : corrs) rays.push_back(ray_for(q, c));

  Sampler sampler(corrs, cfg.use_weights, cfg.seed);
  MatchResult best;
  int best_count = -1;
  for (int it = 0; it < cfg.iterations; ++it) {
    const auto s = sampler.sample(cfg.sample_size);
    std::vector<SolverCandidate> cands;
    try {
      cands = solve_2pt(rays[s[0]], corrs[s[0]].point, rays[s[1]], corrs[s[1]].point);
    } catch (const DegenerateError&) {
      continue;
    }
    for (auto& cand : cands) {
      cand.sample = s;
      YawPose pose = cand.pose;
      if (cfg.sample_size == 3) {
        // The third point must agree before the minimal fit is polished on all three.
        if (proj.error(pose, corrs[s[2]]) > cfg.threshold_px) continue;
        pose = refine_pose(pose, corrs, {s[0], s[1], s[2]}, proj, cfg.pixel_sigma, 10).pose;
      }
      ++best.candidates;
      const int n = count_inliers(pose, corrs, proj, cfg.threshold_px);
      if (n > best_count) {
        best_count = n;
        best.pose = pose;
      }
    }
  }
  best.iterations = cfg.iterations;
  if (best_count < cfg.min_inliers)
    throw NoConsensusError("RANSAC: best candidate has " + std::to_string(std::max(best_count, 0)) + " inliers, need " +
                           std::to_string(cfg.min_inliers));

  best.inliers = inliers_of(best.pose, corrs, proj, cfg.threshold_px);
  if (cfg.polish) {
    // Refit and re-select until the inlier set stops growing.
    for (int round = 0; round < 5; ++round) {
      const RefineResult r = refine_pose(best.pose, corrs, best.inliers, proj, cfg.pixel_sigma);
      auto polished = inliers_of(r.pose, corrs, proj, cfg.threshold_px);
      if (polished.size() < best.inliers.size()) break;
      const bool same = polished == best.inliers;
      best.pose = r.pose;
      best.inliers = std::move(polished);
      if (same) break;
    }
  }
  best.inlier_ratio = static_cast<double>(best.inliers.size()) / static_cast<double>(corrs.size());
  return best;
}

double ransac_success_probability(double w, int n, int k) {
  if (!(w >= 0.0 && w <= 1.0)) throw Error("inlier rate must be in [0, 1]");
  if (n < 1 || k < 1) throw Error("sample size and iterations must be positive");
  return 1.0 - std::pow(1.0 - std::pow(w, n), k);
}

}  // namespace vilo::solvers
