#include "vilo/sim.hpp"

#include "vilo/error.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>

namespace vilo::sim {

TrajectoryKind parse_trajectory_kind(const std::string& name) {
  if (name == "static") return TrajectoryKind::kStatic;
  if (name == "line") return TrajectoryKind::kLine;
  if (name == "circle") return TrajectoryKind::kCircle;
  if (name == "figure_eight") return TrajectoryKind::kFigureEight;
  throw Error("unknown trajectory kind '" + name + "'");
}

std::string to_string(TrajectoryKind kind) {
  switch (kind) {
    case TrajectoryKind::kStatic: return "static";
    case TrajectoryKind::kLine: return "line";
    case TrajectoryKind::kCircle: return "circle";
    case TrajectoryKind::kFigureEight: return "figure_eight";
  }
  return "unknown";
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  // splitmix64 over the pair
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

double sample_beta(std::mt19937_64& rng, double a, double b) {
  std::gamma_distribution<double> ga(a, 1.0), gb(b, 1.0);
  const double x = ga(rng);
  const double y = gb(rng);
  return x / (x + y);
}

TrajectoryModel::TrajectoryModel(const TrajectoryConfig& cfg) : cfg_(cfg) {}

BodyState TrajectoryModel::evaluate(double t) const {
  Vec3 p = Vec3::Zero(), v = Vec3::Zero(), a = Vec3::Zero();
  double heading = cfg_.initial_yaw;
  double heading_rate = 0.0;
  const double w = cfg_.angular_rate;
  const double r = cfg_.radius;

  switch (cfg_.kind) {
    case TrajectoryKind::kStatic:
      break;
    case TrajectoryKind::kLine: {
      const Vec3 dir(std::cos(cfg_.initial_yaw), std::sin(cfg_.initial_yaw), 0.0);
      p = cfg_.speed * t * dir;
      v = cfg_.speed * dir;
      break;
    }
    case TrajectoryKind::kCircle: {
      const double s = std::sin(w * t), c = std::cos(w * t);
      p = Vec3(r * s, r * (1.0 - c), 0.0);
      v = Vec3(r * w * c, r * w * s, 0.0);
      a = Vec3(-r * w * w * s, r * w * w * c, 0.0);
      heading = cfg_.initial_yaw + w * t;
      heading_rate = w;
      break;
    }
    case TrajectoryKind::kFigureEight: {
      const double s1 = std::sin(w * t), c1 = std::cos(w * t);
      const double s2 = std::sin(2.0 * w * t), c2 = std::cos(2.0 * w * t);
      p = Vec3(r * s1, 0.5 * r * s2, 0.0);
      v = Vec3(r * w * c1, r * w * c2, 0.0);
      a = Vec3(-r * w * w * s1, -2.0 * r * w * w * s2, 0.0);
      heading = std::atan2(v.y(), v.x());
      heading_rate = (v.x() * a.y() - v.y() * a.x()) / v.head<2>().squaredNorm();
      break;
    }
  }
  // Rotate the planar pattern so it starts along initial_yaw.
  if (cfg_.kind == TrajectoryKind::kFigureEight) {
    const Mat3 rz = yaw_rotation(cfg_.initial_yaw).matrix();
    p = rz * p;
    v = rz * v;
    a = rz * a;
    heading += cfg_.initial_yaw;
  } else if (cfg_.kind == TrajectoryKind::kCircle) {
    const Mat3 rz = yaw_rotation(cfg_.initial_yaw).matrix();
    p = rz * p;
    v = rz * v;
    a = rz * a;
  }
  p.z() += cfg_.height;

  double roll = 0.0, pitch = 0.0, roll_rate = 0.0, pitch_rate = 0.0;
  if (cfg_.wobble_amplitude > 0.0) {
    const double om = 2.0 * kPi * cfg_.wobble_frequency;
    const double amp = cfg_.wobble_amplitude;
    roll = amp * std::sin(om * t);
    roll_rate = amp * om * std::cos(om * t);
    pitch = amp * std::sin(1.3 * om * t + 0.5);
    pitch_rate = 1.3 * amp * om * std::cos(1.3 * om * t + 0.5);
  }

  BodyState st;
  st.timestamp = t;
  st.pose.rotation = yaw_rotation(heading) * Rotation::about_axis(Vec3::UnitY(), pitch) *
                     Rotation::about_axis(Vec3::UnitX(), roll);
  st.pose.translation = p;
  st.velocity = v;
  st.acceleration = a;
  // Body rates for R = Rz(yaw) Ry(pitch) Rx(roll)
  const double sr = std::sin(roll), cr = std::cos(roll), sp = std::sin(pitch), cp = std::cos(pitch);
  st.body_rate = Vec3(roll_rate - heading_rate * sp, pitch_rate * cr + heading_rate * cp * sr,
                      -pitch_rate * sr + heading_rate * cp * cr);
  return st;
}

ImuSample TrajectoryModel::imu_at(double t) const {
  const BodyState st = evaluate(t);
  ImuSample s;
  s.timestamp = t;
  s.gyro = st.body_rate;
  s.accel = st.pose.rotation.matrix().transpose() * (st.acceleration - gravity_vector());
  return s;
}

TrajectoryData generate_trajectory(const TrajectoryConfig& cfg) {
  if (!(cfg.duration > 0.0)) throw Error("trajectory duration must be positive");
  if (!(cfg.imu_rate > 0.0)) throw Error("trajectory rate must be positive");
  TrajectoryModel model(cfg);
  TrajectoryData out;
  const auto n = static_cast<std::size_t>(std::llround(cfg.duration * cfg.imu_rate));
  out.samples.reserve(n + 1);
  out.imu.reserve(n + 1);
  for (std::size_t i = 0; i <= n; ++i) {
    const double t = static_cast<double>(i) / cfg.imu_rate;
    out.samples.push_back(model.evaluate(t));
    out.imu.push_back(model.imu_at(t));
  }
  return out;
}

std::vector<ImuSample> corrupt_imu(const std::vector<ImuSample>& stream, const ImuNoise& noise, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n01(0.0, 1.0);
  auto draw = [&]() { return Vec3(n01(rng), n01(rng), n01(rng)); };

  std::vector<ImuSample> out = stream;
  Vec3 bg = noise.gyro_bias;
  Vec3 ba = noise.accel_bias;
  for (std::size_t i = 0; i < out.size(); ++i) {
    double dt = 0.0;
    if (i + 1 < out.size()) dt = out[i + 1].timestamp - out[i].timestamp;
    else if (i > 0) dt = out[i].timestamp - out[i - 1].timestamp;
    // Draw all six channels every sample so the stream layout does not depend on which sigmas are zero.
    const Vec3 ng = draw(), na = draw(), nwg = draw(), nwa = draw();
    out[i].gyro += bg + noise.gyro_noise * ng;
    out[i].accel += ba + noise.accel_noise * na;
    const double sqrt_dt = std::sqrt(std::max(dt, 0.0));
    bg += noise.gyro_walk * sqrt_dt * nwg;
    ba += noise.accel_walk * sqrt_dt * nwa;
  }
  return out;
}

CameraRig make_rig(const RigConfig& cfg) {
  if (cfg.num_cameras < 1 || cfg.num_cameras > 4) throw Error("rig supports 1 to 4 cameras");
  // Forward-looking camera: optical axis along body +x, image x to the right, image y down.
  Mat3 front;
  front.col(0) = Vec3(0, -1, 0);
  front.col(1) = Vec3(0, 0, -1);
  front.col(2) = Vec3(1, 0, 0);
  const Rotation r_front = Rotation::from_matrix(front);
  const double yaws[4] = {0.0, 0.5 * kPi, -0.5 * kPi, kPi};
  const Vec3 offsets[4] = {Vec3(0.2, 0.0, 0.1), Vec3(0.0, 0.2, 0.1), Vec3(0.0, -0.2, 0.1), Vec3(-0.2, 0.0, 0.1)};
  CameraRig rig;
  for (int k = 0; k < cfg.num_cameras; ++k) {
    CameraModel c;
    c.id = k;
    c.K = cfg.K;
    c.width = cfg.width;
    c.height = cfg.height;
    c.imu_T_cam = RigidTransform(yaw_rotation(yaws[k]) * r_front, offsets[k]);
    c.validate();
    rig.push_back(c);
  }
  return rig;
}

// ---------------------------------------------------------------------------

RigidTransform Scenario::true_map_T_local(std::size_t i) const { return compose(map_T_gt.at(i), gt_T_local); }

BodyState Scenario::truth_at(double t) const { return TrajectoryModel(config.trajectory).evaluate(t); }

std::size_t Scenario::map_index(int map_id) const {
  for (std::size_t i = 0; i < maps.size(); ++i) {
    if (maps[i].id() == map_id) return i;
  }
  throw UnknownMapError("scenario has no map " + std::to_string(map_id));
}

namespace {

Vec2 truncated_noise(std::mt19937_64& rng, double sigma) {
  std::normal_distribution<double> n(0.0, sigma);
  if (sigma <= 0.0) return Vec2::Zero();
  for (;;) {
    Vec2 e(n(rng), n(rng));
    if (e.norm() <= 3.0 * sigma) return e;
  }
}

std::vector<Vec3> generate_environment(const TrajectoryModel& model, const EnvironmentConfig& env, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  auto uni = [&](double lo, double hi) { return lo + (hi - lo) * u01(rng); };
  std::vector<Vec3> pts;
  const double duration = model.config().duration;
  const double spacing = 1.0 / env.points_per_meter;

  double length = 0.0;
  Vec3 prev = model.evaluate(0.0).pose.translation;
  const double step = 0.01;
  for (double t = step; t <= duration + 1e-9; t += step) {
    Vec3 cur = model.evaluate(t).pose.translation;
    length += (cur - prev).norm();
    prev = cur;
  }

  if (length < 1.0) {
    // Stationary body: a shell of points around it.
    const BodyState st = model.evaluate(0.0);
    const int n = std::max(1, static_cast<int>(2.0 * kPi * env.max_offset * env.points_per_meter));
    for (int i = 0; i < n; ++i) {
      const double az = uni(-kPi, kPi);
      const double d = uni(env.min_offset, env.max_offset);
      pts.emplace_back(st.pose.translation.x() + d * std::cos(az), st.pose.translation.y() + d * std::sin(az),
                       uni(env.min_height, env.max_height));
    }
    return pts;
  }

  // Pad the ends so the first and last frames still see structure.
  const double pad = env.max_offset;
  double next_at = -pad;
  length = 0.0;
  prev = model.evaluate(0.0).pose.translation;
  auto emit = [&](const Vec3& p, const Vec3& dir) {
    const Vec3 left(-dir.y(), dir.x(), 0.0);
    for (double side : {-1.0, 1.0}) {
      const double off = uni(env.min_offset, env.max_offset);
      const double along = uni(-0.5 * spacing, 0.5 * spacing);
      Vec3 q = p + side * off * left + along * dir;
      q.z() = uni(env.min_height, env.max_height);
      pts.push_back(q);
    }
  };
  {
    const BodyState s0 = model.evaluate(0.0);
    const Vec3 dir0 = s0.velocity.head<2>().norm() > 1e-9 ? Vec3(s0.velocity.normalized()) : Vec3::UnitX();
    for (; next_at < 0.0; next_at += spacing) emit(s0.pose.translation + next_at * dir0, dir0);
  }
  for (double t = step; t <= duration + 1e-9; t += step) {
    const BodyState st = model.evaluate(t);
    length += (st.pose.translation - prev).norm();
    prev = st.pose.translation;
    const Vec3 dir = st.velocity.head<2>().norm() > 1e-9 ? Vec3(st.velocity.normalized()) : Vec3::UnitX();
    while (next_at <= length) {
      emit(st.pose.translation - (length - next_at) * dir, dir);
      next_at += spacing;
    }
  }
  {
    const BodyState se = model.evaluate(duration);
    const Vec3 dir = se.velocity.head<2>().norm() > 1e-9 ? Vec3(se.velocity.normalized()) : Vec3::UnitX();
    for (double extra = spacing; extra < pad; extra += spacing) emit(se.pose.translation + extra * dir, dir);
  }
  return pts;
}

// Environment indices visible from `cam` at body pose GT_T_I, closest first.
std::vector<std::pair<double, int>> visible_points(const std::vector<Vec3>& env, const RigidTransform& gt_T_imu,
                                                   const CameraModel& cam, double max_range) {
  const RigidTransform cam_T_gt = compose(gt_T_imu, cam.imu_T_cam).inverse();
  std::vector<std::pair<double, int>> out;
  for (std::size_t i = 0; i < env.size(); ++i) {
    const Vec3 pc = transform_point(cam_T_gt, env[i]);
    const double range = pc.norm();
    if (range > max_range) continue;
    // Keep a margin inside the image so noisy pixels stay in bounds.
    auto u = cam.project(pc, 0.5);
    if (!u) continue;
    if (u->x() < 4.0 || u->y() < 4.0 || u->x() > cam.width - 4.0 || u->y() > cam.height - 4.0) continue;
    out.emplace_back(range, static_cast<int>(i));
  }
  std::sort(out.begin(), out.end());
  return out;
}

RigidTransform random_yaw_transform(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> yaw(-kPi, kPi), xy(-50.0, 50.0), z(-3.0, 3.0);
  const double a = yaw(rng);
  const Vec3 t(xy(rng), xy(rng), z(rng));
  return YawPose(a, t).to_rigid();
}

Correspondence make_outlier(const std::vector<Vec3>& map_points, const std::vector<Vec3>& true_points,
                            const RigidTransform& cam_T_gt, const CameraModel& cam, int map_id, int exclude,
                            double pixel_sigma, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> ux(0.0, cam.width), uy(0.0, cam.height);
  std::uniform_int_distribution<int> pick(0, static_cast<int>(map_points.size()) - 1);
  const double min_sep = std::max(6.0 * pixel_sigma, 10.0);
  Correspondence c;
  c.camera_id = cam.id;
  c.map_id = map_id;
  c.inlier = false;
  for (int attempt = 0; attempt < 1000; ++attempt) {
    int idx = pick(rng);
    if (idx == exclude && map_points.size() > 1) continue;
    Vec2 px(ux(rng), uy(rng));
    // Reject draws that accidentally agree with the true geometry.
    const Vec3 pc = transform_point(cam_T_gt, true_points[idx]);
    if (pc.z() > 0.0 && (cam.project_unchecked(pc) - px).norm() < min_sep) continue;
    c.landmark_id = idx;
    c.pixel = px;
    c.point = map_points[idx];
    return c;
  }
  throw Error("could not draw an outlier correspondence");
}

}  // namespace

std::vector<Correspondence> generate_correspondences(const Scenario& scenario, double timestamp, std::size_t map_index,
                                                     const CorrespondenceConfig& cfg, std::uint64_t seed) {
  if (!(cfg.outlier_rate >= 0.0 && cfg.outlier_rate < 1.0)) throw Error("outlier rate must be in [0, 1)");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  const map::MapBundle& m = scenario.maps.at(map_index);
  const auto& lm_env = scenario.map_landmark_env.at(map_index);

  std::vector<Vec3> map_points(m.landmarks().size()), true_points(m.landmarks().size());
  for (std::size_t j = 0; j < m.landmarks().size(); ++j) {
    map_points[j] = m.landmarks()[j].position;
    true_points[j] = scenario.environment[lm_env[j]];
  }
  const BodyState truth = scenario.truth_at(timestamp);

  std::vector<Correspondence> out;
  for (const auto& cam : scenario.rig) {
    auto vis = visible_points(true_points, truth.pose, cam, cfg.max_range);
    if (vis.empty()) continue;
    std::vector<int> pool;
    for (auto& [range, idx] : vis) pool.push_back(idx);
    std::shuffle(pool.begin(), pool.end(), rng);
    const RigidTransform cam_T_gt = compose(truth.pose, cam.imu_T_cam).inverse();
    std::size_t next = 0;
    for (int slot = 0; slot < cfg.max_per_camera; ++slot) {
      const bool outlier = u01(rng) < cfg.outlier_rate;
      if (outlier) {
        Correspondence c = make_outlier(map_points, true_points, cam_T_gt, cam, m.id(), -1, cfg.pixel_sigma, rng);
        c.weight = sample_beta(rng, cfg.outlier_weight_a, cfg.outlier_weight_b);
        out.push_back(c);
        continue;
      }
      if (next >= pool.size()) continue;
      const int idx = pool[next++];
      const Vec3 pc = transform_point(cam_T_gt, true_points[idx]);
      Vec2 px;
      do {
        px = cam.project_unchecked(pc) + truncated_noise(rng, cfg.pixel_sigma);
      } while (!cam.inside(px));
      Correspondence c;
      c.camera_id = cam.id;
      c.map_id = m.id();
      c.landmark_id = m.landmarks()[idx].id;
      c.pixel = px;
      c.point = map_points[idx];
      c.weight = sample_beta(rng, cfg.inlier_weight_a, cfg.inlier_weight_b);
      c.inlier = true;
      out.push_back(c);
    }
  }
  return out;
}

PointSet random_visible_points(const RigidTransform& map_T_imu, const CameraModel& camera, int count, double min_depth,
                               double max_depth, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> ux(0.0, camera.width), uy(0.0, camera.height), ud(min_depth, max_depth);
  const RigidTransform map_T_cam = compose(map_T_imu, camera.imu_T_cam);
  PointSet out;
  out.points.reserve(count);
  for (int i = 0; i < count; ++i) {
    const Vec2 px(ux(rng), uy(rng));
    const Vec3 pc = ud(rng) * camera.normalized(px);
    out.points.push_back(transform_point(map_T_cam, pc));
  }
  return out;
}

std::vector<Correspondence> make_correspondences(const PointSet& points, const RigidTransform& map_T_imu,
                                                 const CameraModel& camera, int map_id, int inliers, int outliers,
                                                 double pixel_sigma, std::mt19937_64& rng,
                                                 const CorrespondenceConfig& weights) {
  if (static_cast<int>(points.points.size()) < inliers) throw Error("not enough points for the requested inliers");
  const RigidTransform cam_T_map = compose(map_T_imu, camera.imu_T_cam).inverse();
  std::vector<Correspondence> out;
  for (int i = 0; i < inliers; ++i) {
    const Vec3 pc = transform_point(cam_T_map, points.points[i]);
    Vec2 px;
    int guard = 0;
    do {
      px = camera.project_unchecked(pc) + truncated_noise(rng, pixel_sigma);
    } while (!camera.inside(px) && ++guard < 100);
    Correspondence c;
    c.camera_id = camera.id;
    c.map_id = map_id;
    c.landmark_id = i;
    c.pixel = px;
    c.point = points.points[i];
    c.weight = sample_beta(rng, weights.inlier_weight_a, weights.inlier_weight_b);
    c.inlier = true;
    out.push_back(c);
  }
  for (int i = 0; i < outliers; ++i) {
    Correspondence c = make_outlier(points.points, points.points, cam_T_map, camera, map_id, -1, pixel_sigma, rng);
    c.weight = sample_beta(rng, weights.outlier_weight_a, weights.outlier_weight_b);
    out.push_back(c);
  }
  return out;
}

Scenario generate_scenario(const ScenarioConfig& cfg) {
  Scenario sc;
  sc.config = cfg;
  const TrajectoryModel model(cfg.trajectory);
  TrajectoryData traj = generate_trajectory(cfg.trajectory);
  sc.ground_truth = std::move(traj.samples);
  sc.imu = corrupt_imu(traj.imu, cfg.imu_noise, derive_seed(cfg.seed, 1));
  sc.rig = make_rig(cfg.rig);

  std::mt19937_64 env_rng(derive_seed(cfg.seed, 2));
  sc.environment = generate_environment(model, cfg.environment, env_rng);

  const BodyState start = model.evaluate(0.0);
  sc.gt_T_local = YawPose(split_yaw_tilt(start.pose.rotation).yaw, start.pose.translation).to_rigid();

  // Maps: keyframes along the recorded segment, seen through camera 0.
  std::mt19937_64 map_rng(derive_seed(cfg.seed, 3));
  std::normal_distribution<double> n01(0.0, 1.0);
  const double duration = cfg.trajectory.duration;
  std::map<int, std::vector<std::pair<int, int>>> env_to_map_landmarks;
  for (std::size_t mi = 0; mi < cfg.maps.size(); ++mi) {
    const MapConfig& mc = cfg.maps[mi];
    const int map_id = static_cast<int>(mi) + 1;
    const RigidTransform map_T_gt = random_yaw_transform(map_rng);
    const CameraModel& cam0 = sc.rig.front();

    std::vector<map::MapKeyframe> keyframes;
    std::vector<int> lm_env;
    std::map<int, int> env_to_lm;
    std::vector<std::vector<int>> observers;
    const double t0 = mc.start_fraction * duration, t1 = mc.end_fraction * duration;
    int kf_id = 0;
    for (double t = t0; t <= t1 + 1e-9; t += mc.keyframe_interval) {
      const BodyState st = model.evaluate(t);
      const RigidTransform gt_T_cam = compose(st.pose, cam0.imu_T_cam);
      auto vis = visible_points(sc.environment, st.pose, cam0, cfg.correspondences.max_range);
      std::shuffle(vis.begin(), vis.end(), map_rng);
      if (static_cast<int>(vis.size()) > mc.max_observations_per_keyframe) vis.resize(mc.max_observations_per_keyframe);
      std::sort(vis.begin(), vis.end(), [](const auto& a, const auto& b) { return a.second < b.second; });

      map::MapKeyframe kf;
      kf.id = kf_id++;
      const RigidTransform cam_T_gt = gt_T_cam.inverse();
      for (auto& [range, env_idx] : vis) {
        auto [it, inserted] = env_to_lm.emplace(env_idx, static_cast<int>(lm_env.size()));
        if (inserted) {
          lm_env.push_back(env_idx);
          observers.emplace_back();
        }
        observers[it->second].push_back(kf.id);
        const Vec3 pc = transform_point(cam_T_gt, sc.environment[env_idx]);
        Vec2 nrm(pc.x() / pc.z(), pc.y() / pc.z());
        nrm += mc.keyframe_obs_sigma * Vec2(n01(map_rng), n01(map_rng));
        kf.observations.push_back({it->second, nrm});
      }
      RigidTransform pose = compose(map_T_gt, gt_T_cam);
      const Vec3 dtheta = mc.keyframe_rotation_sigma * Vec3(n01(map_rng), n01(map_rng), n01(map_rng));
      const Vec3 dpos = mc.keyframe_position_sigma * Vec3(n01(map_rng), n01(map_rng), n01(map_rng));
      pose.rotation = Rotation::exp(dtheta) * pose.rotation;
      pose.translation += dpos;
      kf.pose = pose;
      keyframes.push_back(std::move(kf));
    }
    std::vector<map::Landmark> landmarks;
    for (std::size_t j = 0; j < lm_env.size(); ++j) {
      map::Landmark lm;
      lm.id = static_cast<int>(j);
      lm.position = transform_point(map_T_gt, sc.environment[lm_env[j]]) +
                    mc.landmark_sigma * Vec3(n01(map_rng), n01(map_rng), n01(map_rng));
      lm.observers = observers[j];
      landmarks.push_back(std::move(lm));
      env_to_map_landmarks[lm_env[j]].emplace_back(map_id, static_cast<int>(j));
    }
    sc.maps.emplace_back(map_id, std::move(keyframes), std::move(landmarks));
    sc.map_landmark_env.push_back(std::move(lm_env));
    sc.map_T_gt.push_back(map_T_gt);
  }
  for (const auto& [env_idx, entries] : env_to_map_landmarks) {
    for (std::size_t a = 0; a < entries.size(); ++a) {
      for (std::size_t b = a + 1; b < entries.size(); ++b) {
        sc.associations.push_back({entries[a].first, entries[a].second, entries[b].first, entries[b].second});
      }
    }
  }

  // Camera frames: persistent local tracks plus periodic map correspondences.
  std::mt19937_64 track_rng(derive_seed(cfg.seed, 4));
  std::vector<std::set<int>> tracked(sc.rig.size());
  const auto n_frames = static_cast<std::size_t>(std::floor(duration * cfg.camera_rate + 1e-9));
  double last_query = -1e9;
  for (std::size_t k = 0; k <= n_frames; ++k) {
    Frame fr;
    fr.timestamp = static_cast<double>(k) / cfg.camera_rate;
    const BodyState st = model.evaluate(fr.timestamp);
    for (std::size_t c = 0; c < sc.rig.size(); ++c) {
      const CameraModel& cam = sc.rig[c];
      auto vis = visible_points(sc.environment, st.pose, cam, cfg.max_track_range);
      std::set<int> keep;
      std::vector<int> fresh;
      for (auto& [range, idx] : vis) {
        if (tracked[c].count(idx)) keep.insert(idx);
        else fresh.push_back(idx);
      }
      std::shuffle(fresh.begin(), fresh.end(), track_rng);
      for (int idx : fresh) {
        if (static_cast<int>(keep.size()) >= cfg.max_tracks_per_camera) break;
        keep.insert(idx);
      }
      const RigidTransform cam_T_gt = compose(st.pose, cam.imu_T_cam).inverse();
      for (int idx : keep) {
        const Vec3 pc = transform_point(cam_T_gt, sc.environment[idx]);
        Vec2 px = cam.project_unchecked(pc) + truncated_noise(track_rng, cfg.feature_pixel_sigma);
        fr.tracks.push_back({idx, cam.id, px});
      }
      tracked[c] = std::move(keep);
    }
    if (fr.timestamp - last_query >= cfg.map_query_period - 1e-9) {
      last_query = fr.timestamp;
      for (std::size_t mi = 0; mi < sc.maps.size(); ++mi) {
        auto corrs = generate_correspondences(sc, fr.timestamp, mi, cfg.correspondences,
                                              derive_seed(cfg.seed, 1000 + 97 * k + mi));
        int inl = 0;
        for (const auto& c : corrs) inl += c.inlier ? 1 : 0;
        // Retrieval only returns a map when some of it is actually in view.
        if (inl < 3) continue;
        fr.correspondences.insert(fr.correspondences.end(), corrs.begin(), corrs.end());
      }
    }
    sc.frames.push_back(std::move(fr));
  }
  return sc;
}

}  // namespace vilo::sim
