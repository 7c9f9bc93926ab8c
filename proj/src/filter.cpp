#include "vilo/filter.hpp"

#include "vilo/error.hpp"

#include <boost/math/distributions/chi_squared.hpp>

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <unordered_map>

namespace vilo::filter {

namespace model {

namespace {

Mat23 projection_jacobian(const Vec3& p) {
  const double iz = 1.0 / p.z();
  Mat23 j;
  j << iz, 0.0, -p.x() * iz * iz, 0.0, iz, -p.y() * iz * iz;
  return j;
}

Prediction predict(const Vec3& p_c) { return {Vec2(p_c.x() / p_c.z(), p_c.y() / p_c.z()), p_c.z()}; }

}  // namespace

Prediction local(const PoseBlock& clone, const RigidTransform& imu_T_cam, const Vec3& f_l, Mat26* j_clone,
                 Mat23* j_f) {
  const Mat3 r_il = clone.q.matrix();
  const Mat3 r_ci = imu_T_cam.rotation.matrix().transpose();
  const Vec3 p_i = r_il * (f_l - clone.p);
  const Vec3 p_c = r_ci * (p_i - imu_T_cam.translation);
  const Mat23 jh = projection_jacobian(p_c);
  if (j_clone) {
    j_clone->leftCols<3>() = jh * r_ci * skew(p_i);
    j_clone->rightCols<3>() = -jh * r_ci * r_il;
  }
  if (j_f) *j_f = jh * r_ci * r_il;
  return predict(p_c);
}

Prediction map_camera(const PoseBlock& clone, const PoseBlock& map, const RigidTransform& imu_T_cam, const Vec3& f_g,
                      Mat26* j_clone, Mat26* j_map, Mat23* j_f) {
  const Mat3 r_gl = map.q.matrix();
  const Vec3 f_l = r_gl.transpose() * (f_g - map.p);
  Mat23 j_fl;
  const Prediction pred = local(clone, imu_T_cam, f_l, j_clone, &j_fl);
  if (j_map) {
    j_map->leftCols<3>() = -j_fl * r_gl.transpose() * skew(f_g - map.p);
    j_map->rightCols<3>() = -j_fl * r_gl.transpose();
  }
  if (j_f) *j_f = j_fl * r_gl.transpose();
  return pred;
}

Prediction keyframe(const PoseBlock& kf, const Vec3& f_g, Mat26* j_kf, Mat23* j_f) {
  const Mat3 r_gk = kf.q.matrix();
  const Vec3 p_c = r_gk.transpose() * (f_g - kf.p);
  const Mat23 jh = projection_jacobian(p_c);
  if (j_kf) {
    j_kf->leftCols<3>() = -jh * r_gk.transpose() * skew(f_g - kf.p);
    j_kf->rightCols<3>() = -jh * r_gk.transpose();
  }
  if (j_f) *j_f = jh * r_gk.transpose();
  return predict(p_c);
}

Prediction cross_keyframe(const PoseBlock& map_k, const PoseBlock& map_s, const PoseBlock& kf_s, const Vec3& f_k,
                          Mat26* j_map_k, Mat26* j_map_s, Mat26* j_kf, Mat23* j_f) {
  const Mat3 r_k = map_k.q.matrix();
  const Mat3 r_s = map_s.q.matrix();
  const Vec3 f_l = r_k.transpose() * (f_k - map_k.p);
  const Vec3 f_s = r_s * f_l + map_s.p;
  Mat23 j_fs;
  const Prediction pred = keyframe(kf_s, f_s, j_kf, &j_fs);
  if (j_map_s) {
    j_map_s->leftCols<3>() = j_fs * skew(r_s * f_l);
    j_map_s->rightCols<3>() = j_fs;
  }
  if (j_map_k) {
    j_map_k->leftCols<3>() = -j_fs * r_s * r_k.transpose() * skew(f_k - map_k.p);
    j_map_k->rightCols<3>() = -j_fs * r_s * r_k.transpose();
  }
  if (j_f) *j_f = j_fs * r_s * r_k.transpose();
  return pred;
}

PoseBlock retract(const PoseBlock& b, const Eigen::Matrix<double, 6, 1>& dx) {
  return {Rotation::exp(-dx.head<3>()) * b.q, b.p + dx.tail<3>()};
}

}  // namespace model

namespace {

using model::Mat23;
using model::Mat26;
using model::PoseBlock;

constexpr double kTimeEps = 1e-9;

double chi2_threshold(int dof, double confidence) {
  static std::unordered_map<long long, double> cache;
  const long long key = static_cast<long long>(dof) * 1000003LL + static_cast<long long>(confidence * 1e6);
  auto it = cache.find(key);
  if (it != cache.end()) return it->second;
  const boost::math::chi_squared dist(dof);
  const double v = boost::math::quantile(dist, confidence);
  cache.emplace(key, v);
  return v;
}

void symmetrize(MatX& p) { p = 0.5 * (p + p.transpose()).eval(); }

// Error-state of `actual` relative to `nominal` under R = exp(-theta) R_hat.
Eigen::Matrix<double, 6, 1> pose_error(const Rotation& q, const Vec3& p, const Rotation& q0, const Vec3& p0) {
  Eigen::Matrix<double, 6, 1> e;
  e.head<3>() = -(q * q0.inverse()).log();
  e.tail<3>() = p - p0;
  return e;
}

}  // namespace

MultiMapFilter::MultiMapFilter(const FilterConfig& cfg, const CameraRig& rig) : cfg_(cfg), rig_(rig) {
  if (cfg_.window_size < 2) throw Error("filter window must hold at least two clones");
  if (rig_.empty()) throw Error("filter needs at least one camera");
  for (const auto& c : rig_) c.validate();
}

void MultiMapFilter::initialize(const ImuState& state, const ImuSample& first) {
  imu_ = state;
  last_sample_ = first;
  clones_.clear();
  maps_.clear();
  keyframes_.clear();
  P_ = MatX::Zero(15, 15);
  const auto sq = [](double s) { return s * s; };
  P_.block<3, 3>(0, 0).diagonal().setConstant(sq(cfg_.init_attitude_sigma));
  P_.block<3, 3>(3, 3).diagonal().setConstant(sq(cfg_.init_velocity_sigma));
  P_.block<3, 3>(6, 6).diagonal().setConstant(sq(cfg_.init_position_sigma));
  P_.block<3, 3>(9, 9).diagonal().setConstant(sq(cfg_.init_gyro_bias_sigma));
  P_.block<3, 3>(12, 12).diagonal().setConstant(sq(cfg_.init_accel_bias_sigma));
  initialized_ = true;
}

void MultiMapFilter::propagate(const ImuSample& sample) {
  if (!initialized_) throw Error("filter not initialized");
  const double dt = sample.timestamp - imu_.timestamp;
  if (!(dt > 0.0)) throw Error("IMU timestamps must increase");

  const Vec3 w0 = last_sample_.gyro - imu_.bg, w1 = sample.gyro - imu_.bg;
  const Vec3 a0 = last_sample_.accel - imu_.ba, a1 = sample.accel - imu_.ba;
  const Vec3 g = gravity_vector();
  const Mat3 r0 = imu_.q_il.matrix();

  // RK4 on (I_R_L, v, p) with readings interpolated linearly across the step.
  struct Deriv {
    Mat3 dr;
    Vec3 dv, dp;
  };
  auto f = [&](double s, const Mat3& r, const Vec3& v) {
    const Vec3 w = w0 + s * (w1 - w0);
    const Vec3 a = a0 + s * (a1 - a0);
    return Deriv{-skew(w) * r, r.transpose() * a + g, v};
  };
  const Deriv k1 = f(0.0, r0, imu_.v);
  const Deriv k2 = f(0.5, r0 + 0.5 * dt * k1.dr, imu_.v + 0.5 * dt * k1.dv);
  const Deriv k3 = f(0.5, r0 + 0.5 * dt * k2.dr, imu_.v + 0.5 * dt * k2.dv);
  const Deriv k4 = f(1.0, r0 + dt * k3.dr, imu_.v + dt * k3.dv);
  const Mat3 r1 = r0 + dt / 6.0 * (k1.dr + 2.0 * k2.dr + 2.0 * k3.dr + k4.dr);
  const Vec3 v1 = imu_.v + dt / 6.0 * (k1.dv + 2.0 * k2.dv + 2.0 * k3.dv + k4.dv);
  const Vec3 p1 = imu_.p + dt / 6.0 * (k1.dp + 2.0 * k2.dp + 2.0 * k3.dp + k4.dp);

  // Error-state transition from the start of the step.
  Eigen::Matrix<double, 15, 15> F = Eigen::Matrix<double, 15, 15>::Zero();
  F.block<3, 3>(0, 0) = -skew(w0);
  F.block<3, 3>(0, 9) = -Mat3::Identity();
  F.block<3, 3>(3, 0) = -r0.transpose() * skew(a0);
  F.block<3, 3>(3, 12) = -r0.transpose();
  F.block<3, 3>(6, 3) = Mat3::Identity();
  const Eigen::Matrix<double, 15, 15> Fdt = F * dt;
  const Eigen::Matrix<double, 15, 15> phi = Eigen::Matrix<double, 15, 15>::Identity() + Fdt + 0.5 * Fdt * Fdt;

  Eigen::Matrix<double, 15, 12> G = Eigen::Matrix<double, 15, 12>::Zero();
  G.block<3, 3>(0, 0) = -Mat3::Identity();
  G.block<3, 3>(3, 3) = -r0.transpose();
  G.block<3, 3>(9, 6) = Mat3::Identity();
  G.block<3, 3>(12, 9) = Mat3::Identity();
  // Per-sample white noise converts to a density with the nominal period.
  const double dt_nom = 1.0 / cfg_.imu_rate;
  Eigen::Matrix<double, 12, 1> qc;
  qc << Vec3::Constant(cfg_.gyro_noise * cfg_.gyro_noise * dt_nom),
      Vec3::Constant(cfg_.accel_noise * cfg_.accel_noise * dt_nom), Vec3::Constant(cfg_.gyro_walk * cfg_.gyro_walk),
      Vec3::Constant(cfg_.accel_walk * cfg_.accel_walk);
  const Eigen::Matrix<double, 15, 15> qd = G * qc.asDiagonal() * G.transpose() * dt;

  P_.topRows<15>() = (phi * P_.topRows<15>()).eval();
  P_.leftCols<15>() = (P_.leftCols<15>() * phi.transpose()).eval();
  P_.topLeftCorner<15, 15>() += qd;
  const Eigen::Matrix<double, 15, 15> pii = P_.topLeftCorner<15, 15>();
  P_.topLeftCorner<15, 15>() = 0.5 * (pii + pii.transpose());

  imu_.q_il = Rotation::from_matrix(r1);
  imu_.v = v1;
  imu_.p = p1;
  imu_.timestamp = sample.timestamp;
  last_sample_ = sample;
}

int MultiMapFilter::add_block(int size, const MatX& cross, const MatX& cov) {
  const int n = dimension();
  MatX p(n + size, n + size);
  p.topLeftCorner(n, n) = P_;
  p.bottomLeftCorner(size, n) = cross;
  p.topRightCorner(n, size) = cross.transpose();
  p.bottomRightCorner(size, size) = cov;
  P_ = std::move(p);
  return n;
}

void MultiMapFilter::remove_block(int offset, int size) {
  const int n = dimension();
  const int tail = n - offset - size;
  MatX p(n - size, n - size);
  p.topLeftCorner(offset, offset) = P_.topLeftCorner(offset, offset);
  p.topRightCorner(offset, tail) = P_.topRightCorner(offset, tail);
  p.bottomLeftCorner(tail, offset) = P_.bottomLeftCorner(tail, offset);
  p.bottomRightCorner(tail, tail) = P_.bottomRightCorner(tail, tail);
  P_ = std::move(p);
  auto shift = [&](int& o) {
    if (o > offset) o -= size;
  };
  for (auto& c : clones_) shift(c.offset);
  for (auto& [id, m] : maps_) shift(m.offset);
  for (auto& [key, k] : keyframes_) shift(k.offset);
}

void MultiMapFilter::clone_and_marginalize() {
  if (!initialized_) throw Error("filter not initialized");
  if (!clones_.empty() && std::abs(clones_.back().timestamp - imu_.timestamp) < kTimeEps)
    throw Error("a clone already exists at this time");
  const int n = dimension();
  MatX cross(6, n);
  cross.topRows<3>() = P_.middleRows<3>(0);
  cross.bottomRows<3>() = P_.middleRows<3>(6);
  MatX cov(6, 6);
  cov.topLeftCorner<3, 3>() = P_.block<3, 3>(0, 0);
  cov.topRightCorner<3, 3>() = P_.block<3, 3>(0, 6);
  cov.bottomLeftCorner<3, 3>() = P_.block<3, 3>(6, 0);
  cov.bottomRightCorner<3, 3>() = P_.block<3, 3>(6, 6);
  Clone c;
  c.timestamp = imu_.timestamp;
  c.q_il = imu_.q_il;
  c.p = imu_.p;
  c.offset = add_block(6, cross, cov);
  clones_.push_back(c);
  if (static_cast<int>(clones_.size()) > cfg_.window_size) {
    remove_block(clones_.front().offset, 6);
    clones_.pop_front();
  }
}

const Clone& MultiMapFilter::clone_at(double t) const {
  for (const auto& c : clones_) {
    if (std::abs(c.timestamp - t) < kTimeEps) return c;
  }
  throw Error("no clone at t = " + std::to_string(t));
}

const CameraModel& MultiMapFilter::camera(int id) const { return camera_by_id(rig_, id); }

std::vector<int> MultiMapFilter::nuisance_indices() const {
  std::vector<int> out;
  for (const auto& [key, k] : keyframes_) {
    for (int i = 0; i < 6; ++i) out.push_back(k.offset + i);
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<int> MultiMapFilter::active_indices() const {
  std::vector<char> nuisance(dimension(), 0);
  for (int i : nuisance_indices()) nuisance[i] = 1;
  std::vector<int> out;
  for (int i = 0; i < dimension(); ++i) {
    if (!nuisance[i]) out.push_back(i);
  }
  return out;
}

void MultiMapFilter::apply_correction(const VecX& dx, bool include_nuisance) {
  if (dx.size() != dimension()) throw Error("correction size does not match the state");
  imu_.q_il = Rotation::exp(-dx.segment<3>(0)) * imu_.q_il;
  imu_.v += dx.segment<3>(3);
  imu_.p += dx.segment<3>(6);
  imu_.bg += dx.segment<3>(9);
  imu_.ba += dx.segment<3>(12);
  for (auto& c : clones_) {
    c.q_il = Rotation::exp(-dx.segment<3>(c.offset)) * c.q_il;
    c.p += dx.segment<3>(c.offset + 3);
  }
  for (auto& [id, m] : maps_) {
    m.q_gl = Rotation::exp(-dx.segment<3>(m.offset)) * m.q_gl;
    m.p += dx.segment<3>(m.offset + 3);
  }
  if (include_nuisance) {
    for (auto& [key, k] : keyframes_) {
      k.q_gk = Rotation::exp(-dx.segment<3>(k.offset)) * k.q_gk;
      k.p += dx.segment<3>(k.offset + 3);
    }
  }
}

void MultiMapFilter::schmidt_update(const std::vector<int>& cols, const MatX& H, const VecX& r) {
  if (H.rows() == 0) return;
  const MatX pht = P_(Eigen::all, cols) * H.transpose();
  MatX S = H * pht(cols, Eigen::all);
  S.diagonal().array() += 1.0;
  const Eigen::LLT<MatX> llt(S);
  if (llt.info() != Eigen::Success) throw Error("innovation covariance not positive definite");
  const std::vector<int> nuis = nuisance_indices();

  VecX dx = pht * llt.solve(r);
  for (int i : nuis) dx[i] = 0.0;

  MatX D = pht * llt.solve(pht.transpose());
  for (int i : nuis) {
    for (int j : nuis) D(i, j) = 0.0;
  }
  P_ -= D;
  symmetrize(P_);
  apply_correction(dx);
}

bool MultiMapFilter::gate(const std::vector<int>& cols, const MatX& H, const VecX& r) const {
  if (!cfg_.chi2_gate) return true;
  MatX S = H * P_(cols, cols) * H.transpose();
  S.diagonal().array() += 1.0;
  const double chi2 = r.dot(S.ldlt().solve(r));
  return chi2 <= chi2_threshold(static_cast<int>(r.size()), cfg_.chi2_confidence);
}

bool MultiMapFilter::project_out_feature(Rows& rows) {
  const Eigen::Index m = rows.hf.rows();
  if (m <= 3) return false;
  const Eigen::HouseholderQR<MatX> qr(MatX(rows.hf));
  const MatX q = qr.householderQ();
  const MatX n = q.rightCols(m - 3);
  const double residual = (n.transpose() * rows.hf).cwiseAbs().maxCoeff();
  max_nullspace_residual_ = std::max(max_nullspace_residual_, residual);
  rows.hx = (n.transpose() * rows.hx).eval();
  rows.r = (n.transpose() * rows.r).eval();
  rows.hf = (n.transpose() * rows.hf).eval();
  return true;
}

namespace {

// Stacks accepted rows and compresses them with a thin QR when they outnumber
// the state columns involved.
struct Stack {
  std::vector<MatX> h;
  std::vector<VecX> r;
  int rows = 0;

  void add(const MatX& hx, const VecX& rx) {
    h.push_back(hx);
    r.push_back(rx);
    rows += static_cast<int>(hx.rows());
  }

  void build(int cols, MatX& H, VecX& res) const {
    H.resize(rows, cols);
    res.resize(rows);
    int k = 0;
    for (std::size_t i = 0; i < h.size(); ++i) {
      H.middleRows(k, h[i].rows()) = h[i];
      res.segment(k, r[i].size()) = r[i];
      k += static_cast<int>(h[i].rows());
    }
    if (rows > cols) {
      const Eigen::HouseholderQR<MatX> qr(H);
      const MatX qt_r = qr.householderQ().transpose() * res;
      const MatX rr = qr.matrixQR().topRows(cols).triangularView<Eigen::Upper>();
      H = rr;
      res = qt_r.topRows(cols);
    }
  }
};

PoseBlock clone_block(const Clone& c) { return {c.q_il, c.p}; }

}  // namespace

std::optional<Vec3> MultiMapFilter::triangulate(const FeatureTrack& track) const {
  Mat3 a = Mat3::Zero();
  Vec3 b = Vec3::Zero();
  struct Obs {
    PoseBlock clone;
    const CameraModel* cam;
    Vec2 z;
  };
  std::vector<Obs> obs;
  for (const auto& o : track.observations) {
    const Clone& c = clone_at(o.timestamp);
    const CameraModel& cam = camera(o.camera_id);
    obs.push_back({clone_block(c), &cam, o.normalized});
    const Mat3 r_lc = c.q_il.matrix().transpose() * cam.imu_T_cam.rotation.matrix();
    const Vec3 center = c.p + c.q_il.matrix().transpose() * cam.imu_T_cam.translation;
    const Vec3 dir = (r_lc * Vec3(o.normalized.x(), o.normalized.y(), 1.0)).normalized();
    const Mat3 proj = Mat3::Identity() - dir * dir.transpose();
    a += proj;
    b += proj * center;
  }
  const Eigen::SelfAdjointEigenSolver<Mat3> es(a);
  if (es.eigenvalues()(0) < 1e-6 * std::max(es.eigenvalues()(2), 1e-12)) return std::nullopt;
  Vec3 f = a.ldlt().solve(b);

  // Gauss-Newton on the normalized reprojection error.
  for (int it = 0; it < 10; ++it) {
    Mat3 h = Mat3::Zero();
    Vec3 g = Vec3::Zero();
    for (const auto& o : obs) {
      Mat23 jf;
      const auto pred = model::local(o.clone, o.cam->imu_T_cam, f, nullptr, &jf);
      if (pred.depth <= 1e-6) return std::nullopt;
      const Vec2 r = o.z - pred.z;
      h += jf.transpose() * jf;
      g += jf.transpose() * r;
    }
    const Vec3 step = h.ldlt().solve(g);
    if (!step.allFinite()) return std::nullopt;
    f += step;
    if (step.norm() < 1e-12 * (1.0 + f.norm())) break;
  }
  for (const auto& o : obs) {
    const auto pred = model::local(o.clone, o.cam->imu_T_cam, f, nullptr, nullptr);
    if (pred.depth < cfg_.min_triangulation_depth) return std::nullopt;
    const double px = (o.z - pred.z).norm() * o.cam->min_focal();
    if (px > cfg_.max_triangulation_residual * cfg_.pixel_sigma) return std::nullopt;
  }
  return f;
}

UpdateStats MultiMapFilter::update_local(const std::vector<FeatureTrack>& tracks) {
  UpdateStats stats;
  if (clones_.size() < 2) return stats;
  std::vector<int> cols;
  std::unordered_map<long long, int> clone_col;  // clone offset -> local column
  for (const auto& c : clones_) {
    clone_col[c.offset] = static_cast<int>(cols.size());
    for (int i = 0; i < 6; ++i) cols.push_back(c.offset + i);
  }
  const int width = static_cast<int>(cols.size());
  Stack stack;
  for (const auto& track : tracks) {
    FeatureTrack usable;
    usable.feature_id = track.feature_id;
    for (const auto& o : track.observations) {
      for (const auto& c : clones_) {
        if (std::abs(c.timestamp - o.timestamp) < kTimeEps) {
          usable.observations.push_back(o);
          break;
        }
      }
    }
    if (usable.observations.size() < 2) {
      ++stats.features_skipped;
      continue;
    }
    const auto f = triangulate(usable);
    if (!f) {
      ++stats.features_skipped;
      continue;
    }
    const int m = 2 * static_cast<int>(usable.observations.size());
    Rows rows;
    rows.hx = MatX::Zero(m, width);
    rows.hf.resize(m, 3);
    rows.r.resize(m);
    bool ok = true;
    for (int k = 0; k < m / 2; ++k) {
      const auto& o = usable.observations[k];
      const Clone& c = clone_at(o.timestamp);
      const CameraModel& cam = camera(o.camera_id);
      Mat26 jc;
      Mat23 jf;
      const auto pred = model::local(clone_block(c), cam.imu_T_cam, *f, &jc, &jf);
      if (pred.depth <= 0.0) {
        ok = false;
        break;
      }
      const Eigen::Array2d inv_sigma(cam.K.fx / cfg_.pixel_sigma, cam.K.fy / cfg_.pixel_sigma);
      const Eigen::Matrix2d w = inv_sigma.matrix().asDiagonal();
      rows.hx.block(2 * k, clone_col[c.offset], 2, 6) = w * jc;
      rows.hf.middleRows<2>(2 * k) = w * jf;
      rows.r.segment<2>(2 * k) = w * (o.normalized - pred.z);
    }
    if (!ok || !project_out_feature(rows)) {
      ++stats.features_skipped;
      continue;
    }
    if (!gate(cols, rows.hx, rows.r)) {
      ++stats.features_rejected;
      ++gate_rejections_;
      continue;
    }
    stack.add(rows.hx, rows.r);
    ++stats.features_used;
  }
  if (stack.rows == 0) return stats;
  MatX H;
  VecX r;
  stack.build(width, H, r);
  stats.rows = static_cast<int>(H.rows());
  schmidt_update(cols, H, r);
  return stats;
}

bool MultiMapFilter::lift_keyframe(int map_id, const map::MapKeyframe& kf) {
  if (cfg_.keyframe_position_sigma <= 0.0 && cfg_.keyframe_rotation_sigma <= 0.0) return false;
  const auto key = std::make_pair(map_id, kf.id);
  auto it = keyframes_.find(key);
  if (it != keyframes_.end()) {
    it->second.last_used = update_counter_;
    return true;
  }
  NuisanceKeyframe k;
  k.q_gk = kf.pose.rotation;
  k.p = kf.pose.translation;
  k.last_used = update_counter_;
  MatX cov = MatX::Zero(6, 6);
  cov.topLeftCorner<3, 3>().diagonal().setConstant(cfg_.keyframe_rotation_sigma * cfg_.keyframe_rotation_sigma);
  cov.bottomRightCorner<3, 3>().diagonal().setConstant(cfg_.keyframe_position_sigma * cfg_.keyframe_position_sigma);
  k.offset = add_block(6, MatX::Zero(6, dimension()), cov);
  keyframes_.emplace(key, k);
  return true;
}

UpdateStats MultiMapFilter::update_map(const MapObservation& obs, const map::MapBundle& map,
                                       const std::map<int, const map::MapBundle*>& other_maps) {
  auto mit = maps_.find(obs.map_id);
  if (mit == maps_.end()) throw UnknownMapError("map " + std::to_string(obs.map_id) + " is not registered");
  if (map.id() != obs.map_id) throw Error("observation and map bundle disagree on the map id");
  UpdateStats stats;
  ++update_counter_;
  const Clone& clone = clone_at(obs.timestamp);
  const bool lift = cfg_.keyframe_position_sigma > 0.0 || cfg_.keyframe_rotation_sigma > 0.0;

  // Current camera position in map k, to pick the nearest anchoring keyframes.
  const RigidTransform map_T_imu = compose(map_transform(obs.map_id), RigidTransform(clone.q_il.inverse(), clone.p));

  struct Anchor {
    int map_id;  // map the keyframe belongs to
    const map::MapKeyframe* kf;
    Vec2 z;
  };
  auto pick_anchors = [&](const map::MapBundle& bundle, int landmark_id, const Vec3& near) {
    std::vector<Anchor> out;
    const map::Landmark* lm = bundle.find_landmark(landmark_id);
    if (!lm) return out;
    std::vector<std::pair<double, int>> order;
    for (int kf_id : lm->observers) {
      const map::MapKeyframe* kf = bundle.find_keyframe(kf_id);
      if (!kf || !bundle.find_observation(kf_id, landmark_id)) continue;
      order.emplace_back((kf->pose.translation - near).norm(), kf_id);
    }
    std::sort(order.begin(), order.end());
    for (const auto& [dist, kf_id] : order) {
      if (static_cast<int>(out.size()) >= cfg_.max_anchor_keyframes) break;
      out.push_back({bundle.id(), bundle.find_keyframe(kf_id), bundle.find_observation(kf_id, landmark_id)->normalized});
    }
    return out;
  };

  struct FeatureAnchors {
    std::vector<Anchor> own;
    std::vector<Anchor> cross;
  };
  std::vector<FeatureAnchors> anchors(obs.features.size());
  for (std::size_t i = 0; i < obs.features.size(); ++i) {
    const MapFeature& f = obs.features[i];
    anchors[i].own = pick_anchors(map, f.landmark_id, map_T_imu.translation);
    if (f.cross_map_id >= 0 && f.cross_map_id != obs.map_id && maps_.count(f.cross_map_id)) {
      auto ot = other_maps.find(f.cross_map_id);
      if (ot != other_maps.end() && ot->second) {
        const RigidTransform s_T_imu =
            compose(map_transform(f.cross_map_id), RigidTransform(clone.q_il.inverse(), clone.p));
        anchors[i].cross = pick_anchors(*ot->second, f.cross_landmark_id, s_T_imu.translation);
      }
    }
  }

  // Lift every anchoring keyframe first so offsets are stable while rows are built.
  if (lift) {
    for (const auto& fa : anchors) {
      for (const auto* list : {&fa.own, &fa.cross}) {
        for (const auto& a : *list) lift_keyframe(a.map_id, *a.kf);
      }
    }
    // Least recently used keyframes beyond the cap are marginalized (dropped).
    while (static_cast<int>(keyframes_.size()) > cfg_.max_nuisance_keyframes) {
      auto victim = keyframes_.end();
      for (auto it = keyframes_.begin(); it != keyframes_.end(); ++it) {
        if (it->second.last_used >= update_counter_) continue;
        if (victim == keyframes_.end() || it->second.last_used < victim->second.last_used) victim = it;
      }
      if (victim == keyframes_.end()) break;
      remove_block(victim->second.offset, 6);
      keyframes_.erase(victim);
    }
  }

  // Columns: clone, map k, any cross maps, lifted keyframes.
  std::vector<int> cols;
  std::map<int, int> block_col;  // state offset -> local column
  auto add_cols = [&](int offset) {
    if (block_col.count(offset)) return;
    block_col[offset] = static_cast<int>(cols.size());
    for (int i = 0; i < 6; ++i) cols.push_back(offset + i);
  };
  const Clone& c = clone_at(obs.timestamp);  // offsets may have moved during eviction
  add_cols(c.offset);
  add_cols(maps_.at(obs.map_id).offset);
  for (const auto& fa : anchors) {
    for (const auto& a : fa.cross) add_cols(maps_.at(a.map_id).offset);
    if (!lift) continue;
    for (const auto* list : {&fa.own, &fa.cross}) {
      for (const auto& a : *list) add_cols(keyframes_.at({a.map_id, a.kf->id}).offset);
    }
  }
  const int width = static_cast<int>(cols.size());

  const MapTransform& mk = maps_.at(obs.map_id);
  const PoseBlock map_k{mk.q_gl, mk.p};
  const PoseBlock cb = clone_block(c);
  const double kf_w = 1.0 / cfg_.keyframe_obs_sigma;
  auto kf_block = [&](const Anchor& a, int* offset) {
    if (lift) {
      const NuisanceKeyframe& k = keyframes_.at({a.map_id, a.kf->id});
      *offset = k.offset;
      return PoseBlock{k.q_gk, k.p};
    }
    *offset = -1;
    return PoseBlock{a.kf->pose.rotation, a.kf->pose.translation};
  };

  Stack stack;
  for (std::size_t i = 0; i < obs.features.size(); ++i) {
    const MapFeature& f = obs.features[i];
    const FeatureAnchors& fa = anchors[i];
    const int m = 2 * static_cast<int>(1 + fa.own.size() + fa.cross.size());
    if (m <= 3) {
      ++stats.features_skipped;
      continue;
    }
    Rows rows;
    rows.hx = MatX::Zero(m, width);
    rows.hf.resize(m, 3);
    rows.r.resize(m);
    bool ok = true;
    int row = 0;

    {
      const CameraModel& cam = camera(f.camera_id);
      Mat26 jc, jm;
      Mat23 jf;
      const auto pred = model::map_camera(cb, map_k, cam.imu_T_cam, f.point, &jc, &jm, &jf);
      const double s = cfg_.map_pixel_sigma * cfg_.map_noise_inflation;
      const Eigen::Matrix2d w = Eigen::Vector2d(cam.K.fx / s, cam.K.fy / s).asDiagonal();
      const Vec2 z = cam.normalized(f.pixel).head<2>();
      ok = ok && pred.depth > 0.0;
      rows.hx.block(row, block_col.at(c.offset), 2, 6) = w * jc;
      rows.hx.block(row, block_col.at(mk.offset), 2, 6) = w * jm;
      rows.hf.middleRows<2>(row) = w * jf;
      rows.r.segment<2>(row) = w * (z - pred.z);
      row += 2;
    }
    for (const auto& a : fa.own) {
      int off = -1;
      const PoseBlock kb = kf_block(a, &off);
      Mat26 jk;
      Mat23 jf;
      const auto pred = model::keyframe(kb, f.point, &jk, &jf);
      ok = ok && pred.depth > 0.0;
      if (off >= 0) rows.hx.block(row, block_col.at(off), 2, 6) = kf_w * jk;
      rows.hf.middleRows<2>(row) = kf_w * jf;
      rows.r.segment<2>(row) = kf_w * (a.z - pred.z);
      row += 2;
    }
    for (const auto& a : fa.cross) {
      int off = -1;
      const PoseBlock kb = kf_block(a, &off);
      const MapTransform& ms = maps_.at(a.map_id);
      Mat26 jmk, jms, jk;
      Mat23 jf;
      const auto pred = model::cross_keyframe(map_k, {ms.q_gl, ms.p}, kb, f.point, &jmk, &jms, &jk, &jf);
      ok = ok && pred.depth > 0.0;
      rows.hx.block(row, block_col.at(mk.offset), 2, 6) += kf_w * jmk;
      rows.hx.block(row, block_col.at(ms.offset), 2, 6) += kf_w * jms;
      if (off >= 0) rows.hx.block(row, block_col.at(off), 2, 6) = kf_w * jk;
      rows.hf.middleRows<2>(row) = kf_w * jf;
      rows.r.segment<2>(row) = kf_w * (a.z - pred.z);
      row += 2;
    }
    if (!ok || !project_out_feature(rows)) {
      ++stats.features_skipped;
      continue;
    }
    if (!gate(cols, rows.hx, rows.r)) {
      ++stats.features_rejected;
      ++gate_rejections_;
      continue;
    }
    stack.add(rows.hx, rows.r);
    ++stats.features_used;
  }
  if (stack.rows == 0) return stats;
  MatX H;
  VecX r;
  stack.build(width, H, r);
  stats.rows = static_cast<int>(H.rows());
  schmidt_update(cols, H, r);
  return stats;
}

void MultiMapFilter::register_map(int map_id, const YawPose& map_T_query, const Eigen::Matrix4d& covariance) {
  if (!initialized_) throw Error("filter not initialized");
  if (maps_.count(map_id)) throw Error("map " + std::to_string(map_id) + " is already registered");

  // G_R_L = G_R_I I_R_L with G_R_I = Rz(yaw) * tilt(I); G_p_L = G_p_I - G_R_L L_p_I.
  auto transform = [](const Rotation& q_il, const Vec3& p_li, double yaw, const Vec3& g_p_i) {
    const YawTilt yt = split_yaw_tilt(q_il.inverse());
    const Rotation q_gl = yaw_rotation(yaw) * yt.tilt * q_il;
    return std::make_pair(q_gl, Vec3(g_p_i - q_gl.rotate(p_li)));
  };
  const auto nominal = transform(imu_.q_il, imu_.p, map_T_query.yaw, map_T_query.translation);

  // Numerical Jacobians w.r.t. the IMU pose error and the measured (yaw, p).
  const double h = 1e-7;
  Eigen::Matrix<double, 6, 6> j_imu;
  Eigen::Matrix<double, 6, 4> j_meas;
  for (int k = 0; k < 6; ++k) {
    Eigen::Matrix<double, 6, 1> d = Eigen::Matrix<double, 6, 1>::Zero();
    d[k] = h;
    const PoseBlock plus = model::retract({imu_.q_il, imu_.p}, d);
    const PoseBlock minus = model::retract({imu_.q_il, imu_.p}, -d);
    const auto tp = transform(plus.q, plus.p, map_T_query.yaw, map_T_query.translation);
    const auto tm = transform(minus.q, minus.p, map_T_query.yaw, map_T_query.translation);
    j_imu.col(k) = (pose_error(tp.first, tp.second, nominal.first, nominal.second) -
                    pose_error(tm.first, tm.second, nominal.first, nominal.second)) /
                   (2.0 * h);
  }
  for (int k = 0; k < 4; ++k) {
    Vec4 d = Vec4::Zero();
    d[k] = h;
    const auto tp = transform(imu_.q_il, imu_.p, map_T_query.yaw + d[0], map_T_query.translation + d.tail<3>());
    const auto tm = transform(imu_.q_il, imu_.p, map_T_query.yaw - d[0], map_T_query.translation - d.tail<3>());
    j_meas.col(k) = (pose_error(tp.first, tp.second, nominal.first, nominal.second) -
                     pose_error(tm.first, tm.second, nominal.first, nominal.second)) /
                    (2.0 * h);
  }

  Eigen::Matrix4d sigma = cfg_.registration_inflation * covariance;
  sigma = 0.5 * (sigma + sigma.transpose()).eval();
  sigma(0, 0) = std::max(sigma(0, 0), cfg_.registration_yaw_floor * cfg_.registration_yaw_floor);
  for (int k = 1; k < 4; ++k)
    sigma(k, k) = std::max(sigma(k, k), cfg_.registration_position_floor * cfg_.registration_position_floor);

  const int n = dimension();
  MatX pose_rows(6, n);
  pose_rows.topRows<3>() = P_.middleRows<3>(0);
  pose_rows.bottomRows<3>() = P_.middleRows<3>(6);
  Eigen::Matrix<double, 6, 6> p_pose;
  p_pose << P_.block<3, 3>(0, 0), P_.block<3, 3>(0, 6), P_.block<3, 3>(6, 0), P_.block<3, 3>(6, 6);
  MatX cov = j_imu * p_pose * j_imu.transpose() + j_meas * sigma * j_meas.transpose();
  cov(0, 0) += cfg_.registration_tilt_sigma * cfg_.registration_tilt_sigma;
  cov(1, 1) += cfg_.registration_tilt_sigma * cfg_.registration_tilt_sigma;
  cov = 0.5 * (cov + cov.transpose()).eval();
  const MatX cross = j_imu * pose_rows;

  MapTransform m;
  m.q_gl = nominal.first;
  m.p = nominal.second;
  m.offset = add_block(6, cross, cov);
  maps_.emplace(map_id, m);
}

std::vector<int> MultiMapFilter::map_ids() const {
  std::vector<int> out;
  for (const auto& [id, m] : maps_) out.push_back(id);
  return out;
}

RigidTransform MultiMapFilter::local_pose() const { return {imu_.q_il.inverse(), imu_.p}; }

RigidTransform MultiMapFilter::map_transform(int map_id) const {
  auto it = maps_.find(map_id);
  if (it == maps_.end()) throw UnknownMapError("map " + std::to_string(map_id) + " is not registered");
  return {it->second.q_gl, it->second.p};
}

RigidTransform MultiMapFilter::current_pose_in_map(int map_id) const {
  return compose(map_transform(map_id), local_pose());
}

void MultiMapFilter::log_pose(std::vector<PoseRecord>& out) const {
  const double trace = P_.trace();
  const RigidTransform local = local_pose();
  if (maps_.empty()) {
    out.push_back({imu_.timestamp, -1, local, local, trace});
    return;
  }
  for (const auto& [id, m] : maps_) out.push_back({imu_.timestamp, id, current_pose_in_map(id), local, trace});
}

}  // namespace vilo::filter
