#include "vilo/harness.hpp"

#include "vilo/error.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

namespace vilo::harness {

namespace {

using Clock = std::chrono::steady_clock;
using filter::FeatureTrack;
using filter::MultiMapFilter;
using filter::TrackObservation;
using sim::Correspondence;

constexpr double kTimeEps = 1e-9;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

bool contains(const std::vector<int>& v, int x) { return std::find(v.begin(), v.end(), x) != v.end(); }

// Linear interpolation of two readings at time t.
sim::ImuSample interpolate(const sim::ImuSample& a, const sim::ImuSample& b, double t) {
  const double s = (t - a.timestamp) / (b.timestamp - a.timestamp);
  sim::ImuSample out;
  out.timestamp = t;
  out.gyro = a.gyro + s * (b.gyro - a.gyro);
  out.accel = a.accel + s * (b.accel - a.accel);
  return out;
}

class Pipeline {
 public:
  Pipeline(const sim::Scenario& sc, const PipelineConfig& cfg) : sc_(sc), cfg_(cfg), filt_(filter_config(), sc.rig) {
    const int ncam = static_cast<int>(sc.rig.size());
    num_cameras_ = cfg.num_cameras > 0 ? std::min(cfg.num_cameras, ncam) : ncam;
    for (const auto& a : sc.associations) {
      links_[{a.map_a, a.landmark_a}].push_back({a.map_b, a.landmark_b});
      links_[{a.map_b, a.landmark_b}].push_back({a.map_a, a.landmark_a});
    }
  }

  RunLog run() {
    const auto t0 = Clock::now();
    if (sc_.imu.empty()) throw InsufficientDataError("scenario has no IMU readings");
    seed_filter();
    for (std::size_t fi = 0; fi < sc_.frames.size(); ++fi) step(fi);
    log_.gate_rejections = filt_.gate_rejections();
    log_.max_nullspace_residual = filt_.max_nullspace_residual();
    log_.wall_time_s = seconds_since(t0);
    return std::move(log_);
  }

 private:
  filter::FilterConfig filter_config() const {
    filter::FilterConfig fc = cfg_.filter;
    if (cfg_.imu_noise_from_scenario) {
      const sim::ImuNoise& n = sc_.config.imu_noise;
      fc.gyro_noise = n.gyro_noise;
      fc.accel_noise = n.accel_noise;
      fc.gyro_walk = n.gyro_walk;
      fc.accel_walk = n.accel_walk;
      fc.imu_rate = sc_.config.trajectory.imu_rate;
    }
    return fc;
  }

  bool use_camera(int id) const { return id < num_cameras_; }
  bool use_map(int id) const { return cfg_.map_ids.empty() || contains(cfg_.map_ids, id); }

  // The VIO block starts at the true state expressed in the local frame.
  void seed_filter() {
    const sim::ImuSample& first = sc_.imu.front();
    const sim::BodyState s0 = sc_.truth_at(first.timestamp);
    const RigidTransform l_T_gt = sc_.gt_T_local.inverse();
    const RigidTransform l_T_i = compose(l_T_gt, s0.pose);
    filter::ImuState st;
    st.timestamp = first.timestamp;
    st.q_il = l_T_i.rotation.inverse();
    st.p = l_T_i.translation;
    st.v = l_T_gt.rotation.rotate(s0.velocity);
    filt_.initialize(st, first);
    imu_idx_ = 1;
  }

  void propagate_to(double t) {
    while (imu_idx_ < sc_.imu.size() && sc_.imu[imu_idx_].timestamp <= t + kTimeEps) filt_.propagate(sc_.imu[imu_idx_++]);
    const double now = filt_.imu().timestamp;
    if (now < t - kTimeEps) {
      if (imu_idx_ >= sc_.imu.size()) throw InsufficientDataError("IMU stream ends before the camera frame");
      filt_.propagate(interpolate(sc_.imu[imu_idx_ - 1], sc_.imu[imu_idx_], t));
    }
  }

  void step(std::size_t fi) {
    const sim::Frame& fr = sc_.frames[fi];
    propagate_to(fr.timestamp);
    if (filt_.clones().empty() || filt_.clones().back().timestamp < filt_.imu().timestamp - kTimeEps)
      filt_.clone_and_marginalize();
    const double tc = filt_.clones().back().timestamp;
    prune_tracks();

    // Tracks that ended before this frame.
    std::set<int> seen;
    for (const auto& o : fr.tracks) {
      if (use_camera(o.camera_id)) seen.insert(o.feature_id);
    }
    std::vector<FeatureTrack> ready;
    for (auto it = tracks_.begin(); it != tracks_.end();) {
      if (seen.count(it->first)) {
        ++it;
        continue;
      }
      if (static_cast<int>(it->second.size()) >= cfg_.min_track_length) ready.push_back({it->first, it->second});
      it = tracks_.erase(it);
    }
    for (const auto& o : fr.tracks) {
      if (!use_camera(o.camera_id)) continue;
      const Vec3 n = camera_by_id(sc_.rig, o.camera_id).normalized(o.pixel);
      tracks_[o.feature_id].push_back({tc, o.camera_id, n.head<2>()});
    }
    local_update(ready);

    if (!fr.correspondences.empty()) map_step(fi, tc);

    // Tracks through the oldest clone lose it at the next frame: use them now.
    if (static_cast<int>(filt_.clones().size()) >= filt_.config().window_size) {
      const double oldest = filt_.clones().front().timestamp;
      ready.clear();
      for (auto it = tracks_.begin(); it != tracks_.end();) {
        if (std::abs(it->second.front().timestamp - oldest) < kTimeEps &&
            static_cast<int>(it->second.size()) >= cfg_.min_track_length) {
          ready.push_back({it->first, it->second});
          it = tracks_.erase(it);
        } else {
          ++it;
        }
      }
      local_update(ready);
    }

    filt_.log_pose(log_.poses);
    ++log_.frames;
  }

  void prune_tracks() {
    const double oldest = filt_.clones().front().timestamp;
    for (auto it = tracks_.begin(); it != tracks_.end();) {
      auto& obs = it->second;
      obs.erase(std::remove_if(obs.begin(), obs.end(),
                               [&](const TrackObservation& o) { return o.timestamp < oldest - kTimeEps; }),
                obs.end());
      it = obs.empty() ? tracks_.erase(it) : std::next(it);
    }
  }

  void local_update(const std::vector<FeatureTrack>& ready) {
    if (ready.empty()) return;
    log_.local_features += filt_.update_local(ready).features_used;
  }

  void map_step(std::size_t fi, double tc) {
    std::map<int, std::vector<Correspondence>> by_map;
    for (const auto& c : sc_.frames[fi].correspondences) {
      if (use_camera(c.camera_id) && use_map(c.map_id)) by_map[c.map_id].push_back(c);
    }
    for (auto& [map_id, corrs] : by_map) {
      // Tilt comes from the filter, the query frame Q is the level IMU frame.
      const YawTilt yt = split_yaw_tilt(filt_.imu().q_il.inverse());
      const solvers::QueryGeometry q{yt.tilt, sc_.rig};
      const std::size_t mi = sc_.map_index(map_id);
      const RigidTransform true_map_T_imu = compose(sc_.map_T_gt[mi], sc_.truth_at(tc).pose);
      const RigidTransform q_T_i(yt.tilt, Vec3::Zero());

      if (!filt_.has_map(map_id)) {
        register_map(map_id, corrs, q, q_T_i, true_map_T_imu, tc);
        continue;
      }
      if (cfg_.mode == Mode::kLocalOnly) continue;

      MatchRecord rec;
      rec.map_id = map_id;
      rec.timestamp = tc;
      rec.correspondences = static_cast<int>(corrs.size());
      solvers::RansacConfig rc = cfg_.ransac;
      rc.seed = sim::derive_seed(sc_.config.seed, 100000 + 64 * fi + static_cast<std::uint64_t>(map_id));
      solvers::MatchResult m;
      try {
        m = solvers::ransac_pose(corrs, rc, q);
      } catch (const Error&) {
        log_.matches.push_back(rec);
        continue;
      }
      rec.ok = true;
      rec.inliers = static_cast<int>(m.inliers.size());
      for (int i : m.inliers) (corrs[i].inlier ? rec.true_inliers_kept : rec.outliers_kept)++;
      rec.error = metrics::alignment_error(compose(m.pose.to_rigid(), q_T_i), true_map_T_imu);
      log_.matches.push_back(rec);

      filter::MapObservation obs;
      obs.map_id = map_id;
      obs.timestamp = tc;
      for (int i : m.inliers) {
        const Correspondence& c = corrs[i];
        filter::MapFeature f;
        f.camera_id = c.camera_id;
        f.pixel = c.pixel;
        f.landmark_id = c.landmark_id;
        f.point = c.point;
        if (cfg_.cross_map) attach_cross_link(map_id, f);
        obs.features.push_back(f);
      }
      std::map<int, const map::MapBundle*> others;
      for (int id : filt_.map_ids()) {
        if (id != map_id) others[id] = &sc_.maps[sc_.map_index(id)];
      }
      log_.map_features += filt_.update_map(obs, sc_.maps[mi], others).features_used;
    }
  }

  void attach_cross_link(int map_id, filter::MapFeature& f) const {
    const auto it = links_.find({map_id, f.landmark_id});
    if (it == links_.end()) return;
    for (const auto& [other, lm] : it->second) {
      if (other != map_id && filt_.has_map(other) && use_map(other)) {
        f.cross_map_id = other;
        f.cross_landmark_id = lm;
        return;
      }
    }
  }

  void register_map(int map_id, const std::vector<Correspondence>& corrs, const solvers::QueryGeometry& q,
                    const RigidTransform& q_T_i, const RigidTransform& true_map_T_imu, double tc) {
    init::InitResult res;
    try {
      res = init::initialize(corrs, cfg_.init, q);
    } catch (const Error& e) {
      log_.init_failures.push_back("map " + std::to_string(map_id) + " at t=" + std::to_string(tc) + ": " + e.what());
      return;
    }
    filt_.register_map(map_id, res.refined, res.covariance);
    Registration r;
    r.map_id = map_id;
    r.timestamp = tc;
    r.correspondences = static_cast<int>(corrs.size());
    r.inliers = static_cast<int>(res.translation_inliers.size());
    int truth = 0, kept = 0;
    for (const auto& c : corrs) truth += c.inlier;
    for (int i : res.translation_inliers) kept += corrs[i].inlier;
    r.inlier_recall = truth > 0 ? static_cast<double>(kept) / truth : 1.0;
    r.error = metrics::alignment_error(compose(res.refined.to_rigid(), q_T_i), true_map_T_imu);
    r.wall_time_s = res.wall_time_s;
    log_.registrations.push_back(r);
  }

  const sim::Scenario& sc_;
  PipelineConfig cfg_;
  MultiMapFilter filt_;
  int num_cameras_ = 1;
  std::size_t imu_idx_ = 1;
  std::map<int, std::vector<TrackObservation>> tracks_;
  std::map<std::pair<int, int>, std::vector<std::pair<int, int>>> links_;
  RunLog log_;
};

double nan() { return std::numeric_limits<double>::quiet_NaN(); }

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, v);
  return buf;
}

double mean_of(const std::vector<double>& v) {
  if (v.empty()) return nan();
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

// Deviations are taken about the first element so that equal values give
// exactly zero.
double std_of(const std::vector<double>& v) {
  if (v.empty()) return nan();
  double s = 0.0, s2 = 0.0;
  for (double x : v) {
    s += x - v.front();
    s2 += (x - v.front()) * (x - v.front());
  }
  const double n = static_cast<double>(v.size());
  return std::sqrt(std::max(s2 / n - (s / n) * (s / n), 0.0));
}

}  // namespace

Mode parse_mode(const std::string& name) {
  if (name == "map-aided") return Mode::kMapAided;
  if (name == "local-only") return Mode::kLocalOnly;
  throw Error("unknown mode '" + name + "' (map-aided, local-only)");
}

std::string to_string(Mode mode) { return mode == Mode::kMapAided ? "map-aided" : "local-only"; }

RunLog localize(const sim::Scenario& scenario, const PipelineConfig& cfg) { return Pipeline(scenario, cfg).run(); }

sim::Scenario truncate_scenario(const sim::Scenario& scenario, double fraction) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw Error("truncation fraction must be in (0, 1]");
  sim::Scenario out = scenario;
  const auto n = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(scenario.frames.size()) - 1e-9));
  out.frames.resize(std::max<std::size_t>(n, 1));
  // Keep the first reading at or after the last frame so it can be interpolated.
  const double t_end = out.frames.back().timestamp;
  std::size_t keep = 0;
  while (keep < out.imu.size() && out.imu[keep].timestamp < t_end - kTimeEps) ++keep;
  out.imu.resize(std::min(keep + 1, out.imu.size()));
  return out;
}

// ---------------------------------------------------------------------------

metrics::Trajectory local_trajectory(const RunLog& log) {
  metrics::Trajectory t;
  t.frame = "local";
  for (const auto& r : log.poses) {
    if (t.empty() || r.timestamp > t.samples.back().timestamp) t.push(r.timestamp, r.local_T_imu);
  }
  return t;
}

metrics::Trajectory map_trajectory(const RunLog& log, int map_id) {
  metrics::Trajectory t;
  t.frame = "map" + std::to_string(map_id);
  for (const auto& r : log.poses) {
    if (r.map_id == map_id) t.push(r.timestamp, r.map_T_imu);
  }
  return t;
}

metrics::Trajectory truth_trajectory(const sim::Scenario& scenario, const metrics::Trajectory& est) {
  metrics::Trajectory t;
  t.frame = "gt";
  for (const auto& s : est.samples) t.push(s.timestamp, scenario.truth_at(s.timestamp).pose);
  return t;
}

metrics::Trajectory truth_in_map(const sim::Scenario& scenario, const metrics::Trajectory& est, int map_id) {
  const RigidTransform& m_T_gt = scenario.map_T_gt.at(scenario.map_index(map_id));
  metrics::Trajectory t;
  t.frame = "map" + std::to_string(map_id);
  for (const auto& s : est.samples) t.push(s.timestamp, compose(m_T_gt, scenario.truth_at(s.timestamp).pose));
  return t;
}

RunMetrics evaluate_run(const sim::Scenario& scenario, const RunLog& log, bool include_map_quality) {
  RunMetrics out;
  const metrics::Trajectory local = local_trajectory(log);
  out.local_error = local.size() >= 2 ? metrics::local_trajectory_error(local, truth_trajectory(scenario, local)) : nan();

  const double duration = scenario.config.trajectory.duration;
  std::set<int> ids;
  for (const auto& r : log.poses) {
    if (r.map_id >= 0) ids.insert(r.map_id);
  }
  for (int id : ids) {
    const metrics::Trajectory est = map_trajectory(log, id);
    const metrics::Trajectory gt = truth_in_map(scenario, est, id);
    MapErrorStats st;
    st.map_id = id;
    st.samples = est.size();
    st.rmse = metrics::map_trajectory_error(est, gt);
    st.q2_max = st.q4_max = nan();
    double q2_sq = 0.0, q4_sq = 0.0;
    std::size_t q2_n = 0, q4_n = 0;
    for (std::size_t i = 0; i < est.size(); ++i) {
      const double t = est.samples[i].timestamp;
      const double e = (est.samples[i].pose.translation - gt.samples[i].pose.translation).norm();
      st.times.push_back(t);
      st.errors.push_back(e);
      st.max = std::max(st.max, e);
      const double f = t / duration;
      if (f >= 0.25 && f < 0.5) {
        st.q2_max = std::isnan(st.q2_max) ? e : std::max(st.q2_max, e);
        q2_sq += e * e;
        ++q2_n;
      }
      if (f >= 0.75) {
        st.q4_max = std::isnan(st.q4_max) ? e : std::max(st.q4_max, e);
        q4_sq += e * e;
        ++q4_n;
      }
    }
    st.q2_rmse = q2_n ? std::sqrt(q2_sq / q2_n) : nan();
    st.q4_rmse = q4_n ? std::sqrt(q4_sq / q4_n) : nan();
    st.mean = mean_of(st.errors);
    st.std = std_of(st.errors);
    out.map_errors[id] = std::move(st);
  }

  if (include_map_quality) {
    for (std::size_t mi = 0; mi < scenario.maps.size(); ++mi) {
      const map::MapBundle& m = scenario.maps[mi];
      const sim::MapConfig& mc = scenario.config.maps.at(mi);
      // Keyframe times follow the generator's schedule.
      metrics::Trajectory est, gt;
      double t = mc.start_fraction * duration;
      for (const auto& kf : m.keyframes()) {
        est.push(t, kf.pose);
        gt.push(t, compose(scenario.truth_at(t).pose, scenario.rig.front().imu_T_cam));
        t += mc.keyframe_interval;
      }
      try {
        out.mapping_keyframe_error[m.id()] = metrics::mapping_keyframe_error(est, gt);
        metrics::PointCloud recon, truth;
        for (const auto& lm : m.landmarks()) {
          recon.push_back(lm.position);
          truth.push_back(scenario.environment.at(scenario.map_landmark_env[mi].at(lm.id)));
        }
        metrics::IcpConfig icp;
        icp.initial = metrics::align_se3(est, gt);
        out.mapping_point_error[m.id()] = metrics::mapping_point_error(recon, truth, icp).rmse;
      } catch (const Error&) {
        out.mapping_keyframe_error[m.id()] = nan();
        out.mapping_point_error[m.id()] = nan();
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

namespace {

RunResult execute(const sim::Scenario& scenario, const PipelineConfig& pc, std::uint64_t seed, double w,
                  const std::string& mode, bool map_quality) {
  RunResult r;
  r.seed = seed;
  r.outlier_rate = w;
  r.mode = mode;
  try {
    r.log = localize(scenario, pc);
    r.metrics = evaluate_run(scenario, r.log, map_quality);
    if (r.log.registrations.empty()) {
      r.failure = "no map registered";
    } else {
      r.ok = true;
    }
  } catch (const std::exception& e) {
    r.failure = e.what();
  }
  return r;
}

sim::ScenarioConfig scenario_for(const ExperimentConfig& cfg, std::uint64_t seed, double w) {
  sim::ScenarioConfig sc = cfg.scenario;
  sc.seed = seed;
  sc.correspondences.outlier_rate = w;
  return sc;
}

std::string run_tag(const RunResult& r) {
  std::string tag = "seed" + std::to_string(r.seed) + "_w" + fmt("%.3f", r.outlier_rate);
  if (!r.mode.empty()) tag += "_" + r.mode;
  return tag;
}

bool registration_ok(const Registration& r) { return r.error.translation <= 0.05 && r.error.rotation <= 0.5 * kPi / 180.0; }
bool match_ok(const MatchRecord& m) {
  return m.ok && m.error.translation <= 0.05 && m.error.rotation <= 0.5 * kPi / 180.0;
}

void write_runs_csv(std::ostream& os, const std::vector<RunResult>& runs) {
  os << "seed,outlier_rate,mode,ok,failure,frames,local_error,map_id,map_rmse,map_mean,map_std,map_max,q2_rmse,q4_rmse,q2_max,q4_max,"
        "mapping_keyframe_error,mapping_point_error,registrations,init_success,init_recall,match_calls,match_success,"
        "local_features,map_features,gate_rejections\n";
  for (const auto& r : runs) {
    int reg_ok = 0, match_good = 0;
    double recall = 0.0;
    for (const auto& g : r.log.registrations) {
      reg_ok += registration_ok(g);
      recall += g.inlier_recall;
    }
    for (const auto& m : r.log.matches) match_good += match_ok(m);
    const double mean_recall = r.log.registrations.empty() ? nan() : recall / r.log.registrations.size();
    auto row = [&](int map_id, const MapErrorStats* st) {
      auto failure = r.failure;
      std::replace(failure.begin(), failure.end(), ',', ';');
      const auto kf = r.metrics.mapping_keyframe_error.find(map_id);
      const auto pt = r.metrics.mapping_point_error.find(map_id);
      os << r.seed << ',' << fmt("%.6g", r.outlier_rate) << ',' << r.mode << ',' << (r.ok ? 1 : 0) << ',' << failure
         << ',' << r.log.frames << ',' << fmt("%.9g", r.metrics.local_error) << ',' << map_id << ','
         << fmt("%.9g", st ? st->rmse : nan()) << ',' << fmt("%.9g", st ? st->mean : nan()) << ','
         << fmt("%.9g", st ? st->std : nan()) << ',' << fmt("%.9g", st ? st->max : nan()) << ','
         << fmt("%.9g", st ? st->q2_rmse : nan()) << ',' << fmt("%.9g", st ? st->q4_rmse : nan()) << ','
         << fmt("%.9g", st ? st->q2_max : nan()) << ',' << fmt("%.9g", st ? st->q4_max : nan()) << ','
         << fmt("%.9g", kf == r.metrics.mapping_keyframe_error.end() ? nan() : kf->second) << ','
         << fmt("%.9g", pt == r.metrics.mapping_point_error.end() ? nan() : pt->second) << ','
         << r.log.registrations.size() << ',' << reg_ok << ',' << fmt("%.6g", mean_recall) << ','
         << r.log.matches.size() << ',' << match_good << ',' << r.log.local_features << ',' << r.log.map_features << ','
         << r.log.gate_rejections << '\n';
    };
    if (r.metrics.map_errors.empty()) row(-1, nullptr);
    for (const auto& [id, st] : r.metrics.map_errors) row(id, &st);
  }
}

// Wall times only appear when `timing` is set, so the archived summary stays
// reproducible.
std::string sweep_summary(const ExperimentConfig& cfg, const std::vector<RunResult>& runs, bool timing) {
  std::ostringstream os;
  os << "experiment " << cfg.name << ", mode " << to_string(cfg.pipeline.mode) << "\n";
  os << "w_bar   runs  failed  init_ok/reg  init_recall  match_ok/calls  local_err  map_rmse  map_std"
     << (timing ? "   init_ms(max)" : "") << "\n";
  for (double w : cfg.outlier_rates) {
    int n = 0, failed = 0, regs = 0, reg_ok = 0, calls = 0, match_good = 0;
    std::vector<double> recall, init_ms, local_err, map_rmse, map_std;
    for (const auto& r : runs) {
      if (r.outlier_rate != w) continue;
      ++n;
      if (!r.ok) ++failed;
      for (const auto& g : r.log.registrations) {
        ++regs;
        reg_ok += registration_ok(g);
        recall.push_back(g.inlier_recall);
        init_ms.push_back(1e3 * g.wall_time_s);
      }
      for (const auto& m : r.log.matches) {
        ++calls;
        match_good += match_ok(m);
      }
      if (!r.ok) continue;
      local_err.push_back(r.metrics.local_error);
      for (const auto& [id, st] : r.metrics.map_errors) {
        map_rmse.push_back(st.rmse);
        map_std.push_back(st.std);
      }
    }
    const double max_ms = init_ms.empty() ? nan() : *std::max_element(init_ms.begin(), init_ms.end());
    char line[256];
    std::snprintf(line, sizeof(line), "%-7.3f %-5d %-7d %4d/%-7d %-12.4f %5d/%-8d %-10.4f %-9.4f %-9.4f", w, n, failed,
                  reg_ok, regs, mean_of(recall), match_good, calls, mean_of(local_err), mean_of(map_rmse),
                  mean_of(map_std));
    os << line;
    if (timing) os << fmt("   %.2f", max_ms);
    os << "\n";
  }
  for (const auto& r : runs) {
    if (!r.ok) os << "failed " << run_tag(r) << ": " << r.failure << "\n";
  }
  return os.str();
}

void write_outputs(const ExperimentConfig& cfg, const std::vector<RunResult>& runs, const std::string& summary,
                   const std::string& csv_name) {
  if (cfg.output_dir.empty()) return;
  namespace fs = std::filesystem;
  fs::create_directories(cfg.output_dir / "poses");
  {
    std::ofstream os(cfg.output_dir / "config.json");
    os << dump_experiment(cfg) << '\n';
  }
  {
    std::ofstream os(cfg.output_dir / csv_name);
    write_runs_csv(os, runs);
  }
  for (const auto& r : runs) {
    std::ofstream os(cfg.output_dir / "poses" / (run_tag(r) + ".jsonl"));
    write_pose_log_jsonl(os, r.log.poses);
  }
  {
    std::ofstream os(cfg.output_dir / "summary.txt");
    os << summary;
  }
  // Wall-clock figures differ between invocations and live apart from the report.
  std::ofstream os(cfg.output_dir / "timing.csv");
  os << "run,wall_time_s,init_calls,init_max_s\n";
  for (const auto& r : runs) {
    double init_max = 0.0;
    for (const auto& g : r.log.registrations) init_max = std::max(init_max, g.wall_time_s);
    os << run_tag(r) << ',' << fmt("%.6f", r.log.wall_time_s) << ',' << r.log.registrations.size() << ','
       << fmt("%.6f", init_max) << '\n';
  }
}

}  // namespace

SweepReport run_scenario(const ExperimentConfig& cfg) {
  if (cfg.seeds.empty() || cfg.outlier_rates.empty()) throw ConfigError("seeds and outlier_rates must be non-empty");
  SweepReport rep;
  for (std::uint64_t seed : cfg.seeds) {
    for (double w : cfg.outlier_rates) {
      try {
        const sim::Scenario sc = sim::generate_scenario(scenario_for(cfg, seed, w));
        rep.runs.push_back(execute(sc, cfg.pipeline, seed, w, to_string(cfg.pipeline.mode), true));
      } catch (const std::exception& e) {
        RunResult r;
        r.seed = seed;
        r.outlier_rate = w;
        r.mode = to_string(cfg.pipeline.mode);
        r.failure = std::string("scenario: ") + e.what();
        rep.runs.push_back(std::move(r));
      }
    }
  }
  std::stable_sort(rep.runs.begin(), rep.runs.end(), [](const RunResult& a, const RunResult& b) {
    return std::tie(a.seed, a.outlier_rate) < std::tie(b.seed, b.outlier_rate);
  });
  rep.summary = sweep_summary(cfg, rep.runs, true);
  write_outputs(cfg, rep.runs, sweep_summary(cfg, rep.runs, false), "runs.csv");
  return rep;
}

std::pair<double, double> run_error_mean_std(const RunResult& run) {
  std::vector<double> all;
  for (const auto& [id, st] : run.metrics.map_errors) all.insert(all.end(), st.errors.begin(), st.errors.end());
  return {mean_of(all), std_of(all)};
}

CompareReport compare_modes(const ExperimentConfig& cfg) {
  if (cfg.seeds.empty() || cfg.outlier_rates.empty()) throw ConfigError("seeds and outlier_rates must be non-empty");
  if (cfg.modes.empty()) throw ConfigError("compare needs at least one mode");
  CompareReport rep;
  const double w = cfg.outlier_rates.front();
  for (std::uint64_t seed : cfg.seeds) {
    std::optional<sim::Scenario> sc;
    std::string scenario_error;
    try {
      sc = sim::generate_scenario(scenario_for(cfg, seed, w));
    } catch (const std::exception& e) {
      scenario_error = e.what();
    }
    for (const auto& m : cfg.modes) {
      if (!sc) {
        RunResult r;
        r.seed = seed;
        r.outlier_rate = w;
        r.mode = m.name;
        r.failure = "scenario: " + scenario_error;
        rep.runs.push_back(std::move(r));
        continue;
      }
      PipelineConfig pc = cfg.pipeline;
      pc.mode = m.mode;
      pc.map_ids = m.map_ids;
      pc.num_cameras = m.num_cameras;
      rep.runs.push_back(execute(*sc, pc, seed, w, m.name, false));
    }
  }
  std::ostringstream os;
  os << "experiment " << cfg.name << ", w_bar " << fmt("%.3f", w) << ", " << cfg.seeds.size() << " seeds\n";
  os << "mode                  runs  failed  mean_err   mean_std\n";
  for (const auto& m : cfg.modes) {
    ModeSummary s;
    s.name = m.name;
    std::vector<double> means, stds;
    for (const auto& r : rep.runs) {
      if (r.mode != m.name) continue;
      ++s.runs;
      if (!r.ok) {
        ++s.failures;
        continue;
      }
      const auto [mean, sd] = run_error_mean_std(r);
      means.push_back(mean);
      stds.push_back(sd);
    }
    s.mean_error = mean_of(means);
    s.mean_std = mean_of(stds);
    char line[160];
    std::snprintf(line, sizeof(line), "%-21s %-5d %-7d %-10.4f %-10.4f\n", s.name.c_str(), s.runs, s.failures,
                  s.mean_error, s.mean_std);
    os << line;
    rep.modes.push_back(s);
  }
  rep.summary = os.str();
  write_outputs(cfg, rep.runs, rep.summary, "modes.csv");
  return rep;
}

// ---------------------------------------------------------------------------

namespace {

struct BenchInstance {
  YawPose truth;  // G_T_Q
  solvers::QueryGeometry q;
  std::vector<Correspondence> corrs;
};

// A tilted single-camera query with `inliers` true and `outliers` wrong matches, shuffled.
BenchInstance bench_instance(std::mt19937_64& rng, int inliers, int outliers, double sigma) {
  std::uniform_real_distribution<double> yaw(-kPi, kPi), pos(-20.0, 20.0), tilt(-0.1, 0.1);
  const Rotation r = yaw_rotation(yaw(rng)) * Rotation::about_axis(Vec3::UnitY(), tilt(rng)) *
                     Rotation::about_axis(Vec3::UnitX(), tilt(rng));
  const RigidTransform map_T_imu(r, Vec3(pos(rng), pos(rng), 0.1 * pos(rng)));
  const YawTilt yt = split_yaw_tilt(r);
  BenchInstance b;
  b.q.tilt = yt.tilt;
  b.q.rig = sim::make_rig(sim::RigConfig{});
  b.truth = YawPose(yt.yaw, map_T_imu.translation);
  const auto& cam = b.q.rig.front();
  const auto pts = sim::random_visible_points(map_T_imu, cam, std::max(inliers, 1) + 20, 3.0, 10.0, rng);
  b.corrs = sim::make_correspondences(pts, map_T_imu, cam, 1, inliers, outliers, sigma, rng);
  std::shuffle(b.corrs.begin(), b.corrs.end(), rng);
  return b;
}

metrics::PoseError yaw_pose_error(const YawPose& est, const YawPose& truth) {
  return metrics::alignment_error(est.to_rigid(), truth.to_rigid());
}

}  // namespace

std::vector<InitCaseResult> init_bench(const InitBenchConfig& cfg) {
  std::vector<InitCaseResult> out;
  for (std::size_t ci = 0; ci < cfg.cases.size(); ++ci) {
    const InitCase& c = cfg.cases[ci];
    InitCaseResult res;
    res.c = c;
    const int inliers = static_cast<int>(std::lround(c.inlier_rate * c.n));
    double recall_sum = 0.0;
    for (int trial = 0; trial < cfg.trials; ++trial) {
      std::mt19937_64 rng(sim::derive_seed(cfg.seed, 1000003ull * ci + static_cast<std::uint64_t>(trial)));
      const BenchInstance b = bench_instance(rng, inliers, c.n - inliers, cfg.pixel_sigma);
      ++res.trials;
      std::vector<init::InitResult> reps;
      try {
        for (int k = 0; k < std::max(cfg.repeats, 1); ++k) reps.push_back(init::initialize(b.corrs, cfg.init, b.q));
      } catch (const Error&) {
        ++res.failures;
        continue;
      }
      const init::InitResult& first = reps.front();
      std::vector<double> yaws, xs, ys, zs;
      for (const auto& r : reps) {
        res.max_wall_time_s = std::max(res.max_wall_time_s, r.wall_time_s);
        if (r.refined.yaw != first.refined.yaw || r.refined.translation != first.refined.translation ||
            r.translation_inliers != first.translation_inliers)
          res.bit_identical = false;
        yaws.push_back(r.refined.yaw);
        xs.push_back(r.refined.translation.x());
        ys.push_back(r.refined.translation.y());
        zs.push_back(r.refined.translation.z());
      }
      for (const auto* v : {&yaws, &xs, &ys, &zs}) res.max_repeat_std = std::max(res.max_repeat_std, std_of(*v));
      const metrics::PoseError e = yaw_pose_error(first.refined, b.truth);
      res.max_translation_error = std::max(res.max_translation_error, e.translation);
      res.max_rotation_error = std::max(res.max_rotation_error, e.rotation);
      if (e.translation <= cfg.success_translation && e.rotation <= cfg.success_rotation) ++res.successes;
      int truth = 0, kept = 0;
      for (const auto& cr : b.corrs) truth += cr.inlier;
      for (int i : first.translation_inliers) kept += b.corrs[i].inlier;
      recall_sum += truth > 0 ? static_cast<double>(kept) / truth : 1.0;
      if (kept == truth) ++res.full_recall;
    }
    res.mean_recall = res.trials > res.failures ? recall_sum / (res.trials - res.failures) : 0.0;
    out.push_back(res);
  }
  return out;
}

std::vector<MatchCaseResult> match_bench(const MatchBenchConfig& cfg) {
  std::vector<MatchCaseResult> out;
  for (std::size_t ci = 0; ci < cfg.cases.size(); ++ci) {
    const MatchCase& c = cfg.cases[ci];
    MatchCaseResult res;
    res.c = c;
    res.predicted = solvers::ransac_success_probability(c.inlier_rate, c.sample_size, c.iterations);
    const auto t0 = Clock::now();
    const int inliers = static_cast<int>(std::lround(c.inlier_rate * cfg.correspondences));
    for (int trial = 0; trial < cfg.trials; ++trial) {
      std::mt19937_64 rng(sim::derive_seed(cfg.seed, 1000003ull * ci + static_cast<std::uint64_t>(trial)));
      const BenchInstance b = bench_instance(rng, inliers, cfg.correspondences - inliers, cfg.pixel_sigma);
      solvers::RansacConfig rc;
      rc.iterations = c.iterations;
      rc.sample_size = c.sample_size;
      rc.seed = sim::derive_seed(cfg.seed, 7000000ull + 1000003ull * ci + static_cast<std::uint64_t>(trial));
      ++res.trials;
      try {
        const solvers::MatchResult m = solvers::ransac_pose(b.corrs, rc, b.q);
        const metrics::PoseError e = yaw_pose_error(m.pose, b.truth);
        if (e.translation <= cfg.success_translation && e.rotation <= cfg.success_rotation) ++res.successes;
      } catch (const Error&) {
      }
    }
    res.empirical = static_cast<double>(res.successes) / std::max(res.trials, 1);
    res.wall_time_s = seconds_since(t0);
    out.push_back(res);
  }
  return out;
}

}  // namespace vilo::harness
