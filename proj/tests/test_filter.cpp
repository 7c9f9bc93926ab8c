#include "vilo/error.hpp"
#include "vilo/filter.hpp"
#include "vilo/sim.hpp"

#include <gtest/gtest.h>

#include <Eigen/Eigenvalues>

#include <random>

using namespace vilo;
using namespace vilo::filter;
using model::Mat23;
using model::Mat26;
using model::PoseBlock;

namespace {

using Vec6 = Eigen::Matrix<double, 6, 1>;

PoseBlock random_pose(std::mt19937_64& rng, double spread = 5.0) {
  std::normal_distribution<double> n(0.0, 1.0);
  return {Rotation::exp(Vec3(n(rng), n(rng), n(rng))), spread * Vec3(n(rng), n(rng), n(rng))};
}

// Central differences of a normalized prediction w.r.t. a pose block.
template <typename Fn>
Mat26 numeric_pose(const PoseBlock& b, Fn fn) {
  const double h = 1e-6;
  Mat26 j;
  for (int k = 0; k < 6; ++k) {
    Vec6 d = Vec6::Zero();
    d[k] = h;
    j.col(k) = (fn(model::retract(b, d)) - fn(model::retract(b, -d))) / (2.0 * h);
  }
  return j;
}

template <typename Fn>
Mat23 numeric_point(const Vec3& f, Fn fn) {
  const double h = 1e-6;
  Mat23 j;
  for (int k = 0; k < 3; ++k) {
    Vec3 d = Vec3::Zero();
    d[k] = h;
    j.col(k) = (fn(Vec3(f + d)) - fn(Vec3(f - d))) / (2.0 * h);
  }
  return j;
}

// A point in front of a camera at pose `cam_in_frame` (frame_T_cam).
Vec3 point_in_front(std::mt19937_64& rng, const RigidTransform& frame_T_cam) {
  std::uniform_real_distribution<double> u(-1.0, 1.0), depth(3.0, 8.0);
  const double z = depth(rng);
  return transform_point(frame_T_cam, Vec3(u(rng) * z * 0.5, u(rng) * z * 0.4, z));
}

CameraRig test_rig(int cams = 1) {
  sim::RigConfig rc;
  rc.num_cameras = cams;
  return sim::make_rig(rc);
}

ImuState level_state(double t = 0.0) {
  ImuState s;
  s.timestamp = t;
  return s;
}

ImuSample static_sample(double t) {
  ImuSample s;
  s.timestamp = t;
  s.accel = -gravity_vector();
  return s;
}

bool covariance_healthy(const MultiMapFilter& f, double tol = 1e-9) {
  const MatX& p = f.covariance();
  if ((p - p.transpose()).cwiseAbs().maxCoeff() > tol) return false;
  const auto a = f.active_indices();
  const MatX paa = p(a, a);
  const Eigen::SelfAdjointEigenSolver<MatX> es(paa, Eigen::EigenvaluesOnly);
  return es.eigenvalues().minCoeff() >= -tol;
}

// Moves the filter forward by `n` IMU steps of a constant-velocity walk.
void drive(MultiMapFilter& f, int n, const Vec3& gyro = Vec3::Zero()) {
  for (int k = 0; k < n; ++k) {
    ImuSample s = static_sample(f.imu().timestamp + 0.005);
    s.gyro = gyro;
    f.propagate(s);
  }
}

// Exact normalized observations of `f_l` from the filter's own clones.
FeatureTrack exact_track(const MultiMapFilter& filt, const CameraRig& rig, const Vec3& f_l, int id) {
  FeatureTrack t;
  t.feature_id = id;
  for (const auto& c : filt.clones()) {
    for (const auto& cam : rig) {
      const auto pred = model::local({c.q_il, c.p}, cam.imu_T_cam, f_l, nullptr, nullptr);
      if (pred.depth < 0.5) continue;
      t.observations.push_back({c.timestamp, cam.id, pred.z});
      break;
    }
  }
  return t;
}

// A map whose keyframes sit at given poses and observe `points` exactly.
map::MapBundle exact_map(int id, const std::vector<RigidTransform>& kf_poses, const std::vector<Vec3>& points) {
  std::vector<map::MapKeyframe> kfs;
  std::vector<map::Landmark> lms;
  for (std::size_t j = 0; j < points.size(); ++j) lms.push_back({static_cast<int>(j), points[j], {}});
  for (std::size_t k = 0; k < kf_poses.size(); ++k) {
    map::MapKeyframe kf;
    kf.id = static_cast<int>(k);
    kf.pose = kf_poses[k];
    for (std::size_t j = 0; j < points.size(); ++j) {
      const Vec3 pc = transform_point(kf_poses[k].inverse(), points[j]);
      if (pc.z() < 0.5) continue;
      kf.observations.push_back({static_cast<int>(j), Vec2(pc.x() / pc.z(), pc.y() / pc.z())});
      lms[j].observers.push_back(kf.id);
    }
    kfs.push_back(kf);
  }
  return map::MapBundle(id, std::move(kfs), std::move(lms));
}

}  // namespace

TEST(FilterModel, LocalJacobians) {
  std::mt19937_64 rng(1);
  const CameraRig rig = test_rig(4);
  for (int trial = 0; trial < 20; ++trial) {
    const PoseBlock clone = random_pose(rng);
    const auto& cam = rig[trial % 4];
    const RigidTransform l_T_cam = compose(RigidTransform(clone.q.inverse(), clone.p), cam.imu_T_cam);
    const Vec3 f = point_in_front(rng, l_T_cam);
    Mat26 jc;
    Mat23 jf;
    model::local(clone, cam.imu_T_cam, f, &jc, &jf);
    const Mat26 nc = numeric_pose(clone, [&](const PoseBlock& b) {
      return model::local(b, cam.imu_T_cam, f, nullptr, nullptr).z;
    });
    const Mat23 nf = numeric_point(f, [&](const Vec3& x) { return model::local(clone, cam.imu_T_cam, x, nullptr, nullptr).z; });
    EXPECT_LT((jc - nc).cwiseAbs().maxCoeff(), 1e-6);
    EXPECT_LT((jf - nf).cwiseAbs().maxCoeff(), 1e-6);
  }
}

TEST(FilterModel, MapCameraJacobians) {
  std::mt19937_64 rng(2);
  const CameraRig rig = test_rig(2);
  for (int trial = 0; trial < 20; ++trial) {
    const PoseBlock clone = random_pose(rng), map = random_pose(rng, 20.0);
    const auto& cam = rig[trial % 2];
    const RigidTransform g_T_cam =
        compose(compose(RigidTransform(map.q, map.p), RigidTransform(clone.q.inverse(), clone.p)), cam.imu_T_cam);
    const Vec3 f = point_in_front(rng, g_T_cam);
    Mat26 jc, jm;
    Mat23 jf;
    model::map_camera(clone, map, cam.imu_T_cam, f, &jc, &jm, &jf);
    auto z = [&](const PoseBlock& c, const PoseBlock& m, const Vec3& x) {
      return model::map_camera(c, m, cam.imu_T_cam, x, nullptr, nullptr, nullptr).z;
    };
    EXPECT_LT((jc - numeric_pose(clone, [&](const PoseBlock& b) { return z(b, map, f); })).cwiseAbs().maxCoeff(), 1e-6);
    EXPECT_LT((jm - numeric_pose(map, [&](const PoseBlock& b) { return z(clone, b, f); })).cwiseAbs().maxCoeff(), 1e-6);
    EXPECT_LT((jf - numeric_point(f, [&](const Vec3& x) { return z(clone, map, x); })).cwiseAbs().maxCoeff(), 1e-6);
  }
}

TEST(FilterModel, KeyframeAndCrossJacobians) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const PoseBlock kf = random_pose(rng), mk = random_pose(rng, 20.0), ms = random_pose(rng, 20.0);
    // Point in front of the keyframe, expressed in map s, then moved to map k.
    const Vec3 f_s = point_in_front(rng, RigidTransform(kf.q, kf.p));
    const RigidTransform k_T_s = compose(RigidTransform(mk.q, mk.p), RigidTransform(ms.q, ms.p).inverse());
    const Vec3 f_k = transform_point(k_T_s, f_s);

    Mat26 jk;
    Mat23 jf;
    model::keyframe(kf, f_s, &jk, &jf);
    EXPECT_LT((jk - numeric_pose(kf, [&](const PoseBlock& b) { return model::keyframe(b, f_s, nullptr, nullptr).z; }))
                  .cwiseAbs()
                  .maxCoeff(),
              1e-6);
    EXPECT_LT((jf - numeric_point(f_s, [&](const Vec3& x) { return model::keyframe(kf, x, nullptr, nullptr).z; }))
                  .cwiseAbs()
                  .maxCoeff(),
              1e-6);

    Mat26 jmk, jms, jkc;
    Mat23 jfc;
    const auto pred = model::cross_keyframe(mk, ms, kf, f_k, &jmk, &jms, &jkc, &jfc);
    EXPECT_LT((pred.z - model::keyframe(kf, f_s, nullptr, nullptr).z).norm(), 1e-9);
    auto z = [&](const PoseBlock& a, const PoseBlock& b, const PoseBlock& c, const Vec3& x) {
      return model::cross_keyframe(a, b, c, x, nullptr, nullptr, nullptr, nullptr).z;
    };
    EXPECT_LT((jmk - numeric_pose(mk, [&](const PoseBlock& b) { return z(b, ms, kf, f_k); })).cwiseAbs().maxCoeff(), 1e-6);
    EXPECT_LT((jms - numeric_pose(ms, [&](const PoseBlock& b) { return z(mk, b, kf, f_k); })).cwiseAbs().maxCoeff(), 1e-6);
    EXPECT_LT((jkc - numeric_pose(kf, [&](const PoseBlock& b) { return z(mk, ms, b, f_k); })).cwiseAbs().maxCoeff(), 1e-6);
    EXPECT_LT((jfc - numeric_point(f_k, [&](const Vec3& x) { return z(mk, ms, kf, x); })).cwiseAbs().maxCoeff(), 1e-6);
  }
}

TEST(FilterPropagate, StaticImuKeepsPose) {
  MultiMapFilter f(FilterConfig{}, test_rig());
  f.initialize(level_state(), static_sample(0.0));
  drive(f, 200);
  EXPECT_NEAR(f.imu().timestamp, 1.0, 1e-12);
  EXPECT_LT(f.imu().p.norm(), 1e-9);
  EXPECT_LT(f.imu().v.norm(), 1e-9);
  EXPECT_LT(f.imu().q_il.angle(), 1e-9);
}

TEST(FilterPropagate, ZeroNoiseCircleTracksTruth) {
  sim::TrajectoryConfig tc;
  tc.kind = sim::TrajectoryKind::kCircle;
  tc.duration = 10.0;
  const sim::TrajectoryData data = sim::generate_trajectory(tc);
  const sim::TrajectoryModel model(tc);
  const sim::BodyState s0 = model.evaluate(0.0);
  ImuState init;
  init.q_il = s0.pose.rotation.inverse();
  init.p = s0.pose.translation;
  init.v = s0.velocity;
  MultiMapFilter f(FilterConfig{}, test_rig());
  f.initialize(init, data.imu.front());
  for (std::size_t k = 1; k < data.imu.size(); ++k) f.propagate(data.imu[k]);
  const sim::BodyState end = model.evaluate(f.imu().timestamp);
  EXPECT_NEAR(f.imu().timestamp, 10.0, 1e-9);
  EXPECT_LT((f.imu().p - end.pose.translation).norm(), 1e-5);
  EXPECT_LT((f.imu().q_il.inverse() * end.pose.rotation.inverse()).angle(), 1e-6);
}

TEST(FilterPropagate, MapStateUntouchedAndTimeMustIncrease) {
  const CameraRig rig = test_rig();
  MultiMapFilter f(FilterConfig{}, rig);
  f.initialize(level_state(), static_sample(0.0));
  f.register_map(3, YawPose(0.4, Vec3(1, 2, 3)), Eigen::Matrix4d::Identity() * 1e-4);
  map::MapKeyframe kf;
  kf.id = 9;
  kf.pose = RigidTransform(Rotation::exp(Vec3(0.1, 0.2, 0.3)), Vec3(4, 5, 6));
  ASSERT_TRUE(f.lift_keyframe(3, kf));
  const MapTransform m0 = f.maps().at(3);
  const NuisanceKeyframe k0 = f.nuisance().at({3, 9});
  const auto n = f.nuisance_indices();
  const MatX pnn0 = f.covariance()(n, n);
  drive(f, 50, Vec3(0.1, -0.2, 0.3));
  const MapTransform& m1 = f.maps().at(3);
  const NuisanceKeyframe& k1 = f.nuisance().at({3, 9});
  EXPECT_EQ(m0.q_gl.jpl(), m1.q_gl.jpl());
  EXPECT_EQ(m0.p, m1.p);
  EXPECT_EQ(k0.q_gk.jpl(), k1.q_gk.jpl());
  EXPECT_EQ(k0.p, k1.p);
  EXPECT_TRUE(f.covariance()(n, n) == pnn0);
  EXPECT_THROW(f.propagate(static_sample(f.imu().timestamp)), Error);
}

TEST(FilterClone, DuplicatesPoseAndKeepsWindow) {
  FilterConfig cfg;
  cfg.window_size = 5;
  MultiMapFilter f(cfg, test_rig());
  ImuState s = level_state();
  s.p = Vec3(1, 2, 3);
  f.initialize(s, static_sample(0.0));
  f.clone_and_marginalize();
  ASSERT_EQ(f.clones().size(), 1u);
  EXPECT_EQ(f.clones().back().p, f.imu().p);
  EXPECT_EQ(f.clones().back().q_il.jpl(), f.imu().q_il.jpl());
  const int c = f.clones().back().offset;
  EXPECT_TRUE(f.covariance().block(c, c, 3, 3) == f.covariance().block(0, 0, 3, 3));
  EXPECT_TRUE(f.covariance().block(c + 3, c + 3, 3, 3) == f.covariance().block(6, 6, 3, 3));
  for (int k = 0; k < 1000; ++k) {
    drive(f, 1);
    f.clone_and_marginalize();
    ASSERT_LE(static_cast<int>(f.clones().size()), cfg.window_size);
  }
  EXPECT_EQ(f.dimension(), 15 + 6 * cfg.window_size);
}

TEST(FilterClone, DimensionBookkeepingUnderRandomCycles) {
  std::mt19937_64 rng(4);
  FilterConfig cfg;
  cfg.window_size = 6;
  cfg.max_nuisance_keyframes = 1000;
  MultiMapFilter f(cfg, test_rig());
  f.initialize(level_state(), static_sample(0.0));
  int maps = 0, kfs = 0;
  for (int cycle = 0; cycle < 100; ++cycle) {
    drive(f, 1 + static_cast<int>(rng() % 3));
    f.clone_and_marginalize();
    if (rng() % 10 == 0) f.register_map(maps++, YawPose(0.1 * cycle, Vec3::Zero()), Eigen::Matrix4d::Identity() * 1e-3);
    if (maps > 0 && rng() % 4 == 0) {
      map::MapKeyframe kf;
      kf.id = kfs++;
      f.lift_keyframe(0, kf);
    }
    const int expected = 15 + 6 * static_cast<int>(f.clones().size()) + 6 * maps + 6 * kfs;
    ASSERT_EQ(f.dimension(), expected);
    // Offsets tile the state without overlap.
    std::vector<int> owner(f.dimension(), 0);
    for (int i = 0; i < 15; ++i) ++owner[i];
    for (const auto& c : f.clones())
      for (int i = 0; i < 6; ++i) ++owner[c.offset + i];
    for (const auto& [id, m] : f.maps())
      for (int i = 0; i < 6; ++i) ++owner[m.offset + i];
    for (const auto& [key, k] : f.nuisance())
      for (int i = 0; i < 6; ++i) ++owner[k.offset + i];
    for (int o : owner) ASSERT_EQ(o, 1);
    ASSERT_TRUE(covariance_healthy(f));
  }
}

TEST(FilterLocal, ZeroResidualFeaturesLeaveStateUnchanged) {
  std::mt19937_64 rng(5);
  const CameraRig rig = test_rig();
  MultiMapFilter f(FilterConfig{}, rig);
  ImuState s = level_state();
  s.v = Vec3(1.0, 0.0, 0.0);
  f.initialize(s, static_sample(0.0));
  for (int k = 0; k < 5; ++k) {
    drive(f, 20, Vec3(0, 0, 0.05));
    f.clone_and_marginalize();
  }
  std::vector<FeatureTrack> tracks;
  std::uniform_real_distribution<double> u(-2.0, 2.0);
  for (int i = 0; i < 15; ++i) tracks.push_back(exact_track(f, rig, Vec3(8.0, u(rng), u(rng)), i));
  const ImuState before = f.imu();
  const auto clones = f.clones();
  const UpdateStats st = f.update_local(tracks);
  EXPECT_EQ(st.features_used, 15);
  EXPECT_LT((f.imu().p - before.p).norm(), 1e-10);
  EXPECT_LT((f.imu().v - before.v).norm(), 1e-10);
  EXPECT_LT((f.imu().q_il * before.q_il.inverse()).angle(), 1e-10);
  for (std::size_t k = 0; k < clones.size(); ++k) EXPECT_LT((f.clones()[k].p - clones[k].p).norm(), 1e-10);
  EXPECT_LT(f.max_nullspace_residual(), 1e-10);
  EXPECT_TRUE(covariance_healthy(f));
}

TEST(FilterLocal, NullspaceHasDimensionTwoNMinusThree) {
  std::mt19937_64 rng(6);
  for (int n = 2; n <= 11; ++n) {
    MatX hf = MatX::Random(2 * n, 3);
    const Eigen::HouseholderQR<MatX> qr(hf);
    const MatX q = qr.householderQ();
    const MatX nsp = q.rightCols(2 * n - 3);
    EXPECT_EQ(nsp.cols(), 2 * n - 3);
    EXPECT_LT((nsp.transpose() * hf).cwiseAbs().maxCoeff(), 1e-10);
  }
}

TEST(FilterMap, RegistrationErrors) {
  const CameraRig rig = test_rig();
  MultiMapFilter f(FilterConfig{}, rig);
  f.initialize(level_state(), static_sample(0.0));
  f.clone_and_marginalize();
  const map::MapBundle bundle = exact_map(1, {RigidTransform::identity()}, {Vec3(0, 0, 5)});
  MapObservation obs;
  obs.map_id = 1;
  obs.timestamp = 0.0;
  EXPECT_THROW(f.update_map(obs, bundle), UnknownMapError);
  EXPECT_THROW(f.current_pose_in_map(1), UnknownMapError);
  const int d0 = f.dimension();
  f.register_map(1, YawPose(0.0, Vec3::Zero()), Eigen::Matrix4d::Identity() * 1e-4);
  EXPECT_EQ(f.dimension(), d0 + 6);
  EXPECT_THROW(f.register_map(1, YawPose(0.0, Vec3::Zero()), Eigen::Matrix4d::Identity()), Error);
  EXPECT_NO_THROW(f.update_map(obs, bundle));
}

TEST(FilterMap, RegistrationSeedsTransformFromQueryPose) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 10; ++trial) {
    MultiMapFilter f(FilterConfig{}, test_rig());
    ImuState s = level_state();
    const PoseBlock pose = random_pose(rng);
    s.q_il = pose.q;
    s.p = pose.p;
    f.initialize(s, static_sample(0.0));
    const YawPose g_T_q(0.3 * trial - 1.0, Vec3(10, -4, 2));
    f.register_map(0, g_T_q, Eigen::Matrix4d::Identity() * 1e-4);
    // The IMU in G must carry the query yaw and position with the filter's tilt.
    const RigidTransform g_T_i = f.current_pose_in_map(0);
    const YawTilt yt = split_yaw_tilt(g_T_i.rotation);
    const YawTilt local = split_yaw_tilt(f.local_pose().rotation);
    EXPECT_NEAR(wrap_angle(yt.yaw - g_T_q.yaw), 0.0, 1e-9);
    EXPECT_LT((g_T_i.translation - g_T_q.translation).norm(), 1e-9);
    EXPECT_LT((yt.tilt * local.tilt.inverse()).angle(), 1e-9);
    // Map transform stays gravity aligned.
    EXPECT_LT(std::abs(f.map_transform(0).rotation.matrix()(2, 2) - 1.0), 1e-9);
    EXPECT_TRUE(covariance_healthy(f));
  }
}

TEST(FilterMap, PoseInMapIsMatrixProduct) {
  std::mt19937_64 rng(8);
  MultiMapFilter f(FilterConfig{}, test_rig());
  ImuState s = level_state();
  const PoseBlock pose = random_pose(rng);
  s.q_il = pose.q;
  s.p = pose.p;
  f.initialize(s, static_sample(0.0));
  f.register_map(2, YawPose(1.2, Vec3(3, 4, 5)), Eigen::Matrix4d::Identity() * 1e-4);
  const Mat4 expected = f.map_transform(2).matrix() * f.local_pose().matrix();
  EXPECT_LT((f.current_pose_in_map(2).matrix() - expected).cwiseAbs().maxCoeff(), 1e-12);

  MultiMapFilter g(FilterConfig{}, test_rig());
  g.initialize(level_state(), static_sample(0.0));
  g.register_map(0, YawPose(0.0, Vec3::Zero()), Eigen::Matrix4d::Identity() * 1e-4);
  EXPECT_LT((g.current_pose_in_map(0).matrix() - Mat4::Identity()).cwiseAbs().maxCoeff(), 1e-12);
}

namespace {

// A filter at the map origin with two keyframes and landmarks ahead, plus an
// observation built from the filter's own estimates (zero residual).
struct MapFixture {
  CameraRig rig = test_rig();
  map::MapBundle bundle;
  MultiMapFilter filt{FilterConfig{}, rig};
  MapObservation obs;

  explicit MapFixture(std::mt19937_64& rng, double kf_offset = 0.0) {
    filt.initialize(level_state(), static_sample(0.0));
    drive(filt, 10);
    filt.clone_and_marginalize();
    filt.register_map(1, YawPose(0.2, Vec3(1, 1, 0)), Eigen::Matrix4d::Identity() * 1e-4);
    const RigidTransform g_T_cam = compose(filt.current_pose_in_map(1), rig[0].imu_T_cam);
    std::vector<Vec3> pts;
    for (int i = 0; i < 20; ++i) pts.push_back(point_in_front(rng, g_T_cam));
    const RigidTransform kf0 = compose(g_T_cam, RigidTransform(Rotation::identity(), Vec3(0.5, 0, -1.0 + kf_offset)));
    const RigidTransform kf1 = compose(g_T_cam, RigidTransform(Rotation::identity(), Vec3(-0.5, 0.1, -2.0)));
    bundle = exact_map(1, {kf0, kf1}, pts);
    obs.map_id = 1;
    obs.timestamp = filt.imu().timestamp;
    const Clone& c = filt.clones().back();
    const MapTransform& m = filt.maps().at(1);
    for (int i = 0; i < 20; ++i) {
      const auto pred = model::map_camera({c.q_il, c.p}, {m.q_gl, m.p}, rig[0].imu_T_cam, pts[i], nullptr, nullptr,
                                          nullptr);
      MapFeature mf;
      mf.camera_id = 0;
      mf.landmark_id = i;
      mf.point = pts[i];
      mf.pixel = rig[0].project_unchecked(Vec3(pred.z.x(), pred.z.y(), 1.0));
      obs.features.push_back(mf);
    }
  }
};

}  // namespace

TEST(FilterMap, ZeroResidualObservationLeavesStateUnchanged) {
  std::mt19937_64 rng(9);
  MapFixture fx(rng);
  const ImuState before = fx.filt.imu();
  const MapTransform m0 = fx.filt.maps().at(1);
  const UpdateStats st = fx.filt.update_map(fx.obs, fx.bundle);
  EXPECT_EQ(st.features_used, 20);
  EXPECT_LT((fx.filt.imu().p - before.p).norm(), 1e-10);
  EXPECT_LT((fx.filt.maps().at(1).p - m0.p).norm(), 1e-10);
  EXPECT_LT((fx.filt.maps().at(1).q_gl * m0.q_gl.inverse()).angle(), 1e-10);
  for (const auto& [key, k] : fx.filt.nuisance()) {
    const map::MapKeyframe* kf = fx.bundle.find_keyframe(key.second);
    EXPECT_EQ(k.q_gk.jpl(), kf->pose.rotation.jpl());
    EXPECT_EQ(k.p, kf->pose.translation);
  }
  EXPECT_LT(fx.filt.max_nullspace_residual(), 1e-10);
}

TEST(FilterMap, SchmidtContractHoldsOnInformativeUpdates) {
  std::mt19937_64 rng(10);
  // Keyframe 0 is displaced so residuals are nonzero and the update moves the state.
  MapFixture fx(rng, 0.05);
  // First update lifts the keyframes; snapshot after it, then update again.
  fx.filt.update_map(fx.obs, fx.bundle);
  ASSERT_FALSE(fx.filt.nuisance().empty());
  for (int rep = 0; rep < 3; ++rep) {
    const auto nuis = fx.filt.nuisance();
    const auto n = fx.filt.nuisance_indices();
    const MatX pnn = fx.filt.covariance()(n, n);
    const Vec3 p_before = fx.filt.imu().p;
    fx.filt.update_map(fx.obs, fx.bundle);
    for (const auto& [key, k] : fx.filt.nuisance()) {
      EXPECT_EQ(k.q_gk.jpl(), nuis.at(key).q_gk.jpl());
      EXPECT_EQ(k.p, nuis.at(key).p);
    }
    EXPECT_TRUE(fx.filt.covariance()(n, n) == pnn);
    if (rep == 0) EXPECT_GT((fx.filt.imu().p - p_before).norm(), 0.0);
    EXPECT_TRUE(covariance_healthy(fx.filt));
  }
}

TEST(FilterMap, ZeroSigmaModeSkipsNuisance) {
  std::mt19937_64 rng(11);
  MapFixture fx(rng);
  FilterConfig cfg;
  cfg.keyframe_position_sigma = 0.0;
  cfg.keyframe_rotation_sigma = 0.0;
  MultiMapFilter f(cfg, fx.rig);
  f.initialize(level_state(), static_sample(0.0));
  drive(f, 10);
  f.clone_and_marginalize();
  f.register_map(1, YawPose(0.2, Vec3(1, 1, 0)), Eigen::Matrix4d::Identity() * 1e-4);
  const int d = f.dimension();
  const UpdateStats st = f.update_map(fx.obs, fx.bundle);
  EXPECT_EQ(st.features_used, 20);
  EXPECT_EQ(f.dimension(), d);
  EXPECT_TRUE(f.nuisance().empty());
}

TEST(FilterMap, GateRejectsGrossOutlier) {
  std::mt19937_64 rng(12);
  MapFixture fx(rng);
  fx.obs.features[3].pixel += Vec2(80.0, -60.0);
  const UpdateStats st = fx.filt.update_map(fx.obs, fx.bundle);
  EXPECT_EQ(st.features_rejected, 1);
  EXPECT_EQ(fx.filt.gate_rejections(), 1);
}

TEST(FilterFuzz, CovarianceHealthAndNullspaceOverThousandSteps) {
  std::mt19937_64 rng(13);
  const CameraRig rig = test_rig(2);
  FilterConfig cfg;
  cfg.window_size = 8;
  MultiMapFilter f(cfg, rig);
  ImuState s = level_state();
  s.v = Vec3(0.5, 0.0, 0.0);
  f.initialize(s, static_sample(0.0));
  std::normal_distribution<double> n(0.0, 1.0);
  std::uniform_real_distribution<double> u(-2.0, 2.0);
  int updates = 0;
  for (int step = 1; step <= 1000; ++step) {
    ImuSample smp = static_sample(f.imu().timestamp + 0.005);
    smp.gyro = 0.05 * Vec3(n(rng), n(rng), n(rng));
    smp.accel += 0.2 * Vec3(n(rng), n(rng), n(rng));
    f.propagate(smp);
    if (step % 20 == 0) {
      f.clone_and_marginalize();
      if (f.clones().size() >= 3) {
        std::vector<FeatureTrack> tracks;
        for (int i = 0; i < 8; ++i) {
          FeatureTrack t = exact_track(f, rig, Vec3(6.0 + u(rng), u(rng), u(rng)), step * 10 + i);
          for (auto& o : t.observations) o.normalized += 0.002 * Vec2(n(rng), n(rng));
          tracks.push_back(t);
        }
        f.update_local(tracks);
        ++updates;
      }
      if (step == 200) f.register_map(0, YawPose(0.5, Vec3(2, 0, 0)), Eigen::Matrix4d::Identity() * 1e-3);
    }
    ASSERT_TRUE(covariance_healthy(f)) << "step " << step;
  }
  EXPECT_GT(updates, 40);
  EXPECT_LT(f.max_nullspace_residual(), 1e-10);
}
