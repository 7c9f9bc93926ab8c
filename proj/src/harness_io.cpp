#include "vilo/harness.hpp"

#include <json.hpp>

#include <fstream>
#include <set>
#include <sstream>
#include <type_traits>

namespace vilo::harness {

namespace {

using json = nlohmann::json;

std::string harness_to_string(sim::TrajectoryKind k) { return sim::to_string(k); }
std::string harness_to_string(Mode m) { return to_string(m); }

// Each config struct lists its fields once; readers and writers visit them.

template <class V>
void fields(V& v, Intrinsics& x) {
  v("fx", x.fx);
  v("fy", x.fy);
  v("cx", x.cx);
  v("cy", x.cy);
}

template <class V>
void fields(V& v, sim::TrajectoryConfig& x) {
  v("kind", x.kind);
  v("duration", x.duration);
  v("imu_rate", x.imu_rate);
  v("speed", x.speed);
  v("radius", x.radius);
  v("angular_rate", x.angular_rate);
  v("height", x.height);
  v("initial_yaw", x.initial_yaw);
  v("wobble_amplitude", x.wobble_amplitude);
  v("wobble_frequency", x.wobble_frequency);
}

template <class V>
void fields(V& v, sim::RigConfig& x) {
  v("num_cameras", x.num_cameras);
  v("intrinsics", x.K);
  v("width", x.width);
  v("height", x.height);
}

template <class V>
void fields(V& v, sim::EnvironmentConfig& x) {
  v("points_per_meter", x.points_per_meter);
  v("min_offset", x.min_offset);
  v("max_offset", x.max_offset);
  v("min_height", x.min_height);
  v("max_height", x.max_height);
}

template <class V>
void fields(V& v, sim::MapConfig& x) {
  v("start_fraction", x.start_fraction);
  v("end_fraction", x.end_fraction);
  v("keyframe_interval", x.keyframe_interval);
  v("max_observations_per_keyframe", x.max_observations_per_keyframe);
  v("landmark_sigma", x.landmark_sigma);
  v("keyframe_position_sigma", x.keyframe_position_sigma);
  v("keyframe_rotation_sigma", x.keyframe_rotation_sigma);
  v("keyframe_obs_sigma", x.keyframe_obs_sigma);
}

template <class V>
void fields(V& v, sim::ImuNoise& x) {
  v("gyro_noise", x.gyro_noise);
  v("accel_noise", x.accel_noise);
  v("gyro_walk", x.gyro_walk);
  v("accel_walk", x.accel_walk);
  v("gyro_bias", x.gyro_bias);
  v("accel_bias", x.accel_bias);
}

template <class V>
void fields(V& v, sim::CorrespondenceConfig& x) {
  v("outlier_rate", x.outlier_rate);
  v("pixel_sigma", x.pixel_sigma);
  v("max_per_camera", x.max_per_camera);
  v("max_range", x.max_range);
  v("inlier_weight_a", x.inlier_weight_a);
  v("inlier_weight_b", x.inlier_weight_b);
  v("outlier_weight_a", x.outlier_weight_a);
  v("outlier_weight_b", x.outlier_weight_b);
}

template <class V>
void fields(V& v, sim::ScenarioConfig& x) {
  v("trajectory", x.trajectory);
  v("rig", x.rig);
  v("environment", x.environment);
  v("maps", x.maps);
  v("imu_noise", x.imu_noise);
  v("correspondences", x.correspondences);
  v("camera_rate", x.camera_rate);
  v("map_query_period", x.map_query_period);
  v("feature_pixel_sigma", x.feature_pixel_sigma);
  v("max_tracks_per_camera", x.max_tracks_per_camera);
  v("max_track_range", x.max_track_range);
  v("seed", x.seed);
}

template <class V>
void fields(V& v, filter::FilterConfig& x) {
  v("window_size", x.window_size);
  v("gyro_noise", x.gyro_noise);
  v("accel_noise", x.accel_noise);
  v("gyro_walk", x.gyro_walk);
  v("accel_walk", x.accel_walk);
  v("imu_rate", x.imu_rate);
  v("init_attitude_sigma", x.init_attitude_sigma);
  v("init_velocity_sigma", x.init_velocity_sigma);
  v("init_position_sigma", x.init_position_sigma);
  v("init_gyro_bias_sigma", x.init_gyro_bias_sigma);
  v("init_accel_bias_sigma", x.init_accel_bias_sigma);
  v("pixel_sigma", x.pixel_sigma);
  v("map_pixel_sigma", x.map_pixel_sigma);
  v("map_noise_inflation", x.map_noise_inflation);
  v("keyframe_obs_sigma", x.keyframe_obs_sigma);
  v("chi2_confidence", x.chi2_confidence);
  v("chi2_gate", x.chi2_gate);
  v("keyframe_position_sigma", x.keyframe_position_sigma);
  v("keyframe_rotation_sigma", x.keyframe_rotation_sigma);
  v("max_nuisance_keyframes", x.max_nuisance_keyframes);
  v("max_anchor_keyframes", x.max_anchor_keyframes);
  v("registration_inflation", x.registration_inflation);
  v("registration_yaw_floor", x.registration_yaw_floor);
  v("registration_position_floor", x.registration_position_floor);
  v("registration_tilt_sigma", x.registration_tilt_sigma);
  v("min_triangulation_depth", x.min_triangulation_depth);
  v("max_triangulation_residual", x.max_triangulation_residual);
}

template <class V>
void fields(V& v, init::InitConfig& x) {
  v("pixel_sigma", x.pixel_sigma);
  v("yaw_step", x.yaw_step);
  v("yaw_slack_fraction", x.yaw_slack_fraction);
  v("bound_scale", x.bound_scale);
  v("linearization_margin", x.linearization_margin);
  v("yaw_margin", x.yaw_margin);
  v("compatibility_gate", x.compatibility_gate);
  v("final_threshold_sigmas", x.final_threshold_sigmas);
  v("min_inliers", x.min_inliers);
}

template <class V>
void fields(V& v, solvers::RansacConfig& x) {
  v("iterations", x.iterations);
  v("threshold_px", x.threshold_px);
  v("min_inliers", x.min_inliers);
  v("use_weights", x.use_weights);
  v("seed", x.seed);
  v("sample_size", x.sample_size);
  v("polish", x.polish);
  v("pixel_sigma", x.pixel_sigma);
}

template <class V>
void fields(V& v, PipelineConfig& x) {
  v("mode", x.mode);
  v("map_ids", x.map_ids);
  v("num_cameras", x.num_cameras);
  v("cross_map", x.cross_map);
  v("min_track_length", x.min_track_length);
  v("imu_noise_from_scenario", x.imu_noise_from_scenario);
  v("filter", x.filter);
  v("initializer", x.init);
  v("ransac", x.ransac);
}

template <class V>
void fields(V& v, ModeSpec& x) {
  v("name", x.name);
  v("mode", x.mode);
  v("map_ids", x.map_ids);
  v("num_cameras", x.num_cameras);
}

template <class V>
void fields(V& v, ExperimentConfig& x) {
  v("name", x.name);
  v("output_dir", x.output_dir);
  v("seeds", x.seeds);
  v("outlier_rates", x.outlier_rates);
  v("scenario", x.scenario);
  v("pipeline", x.pipeline);
  v("modes", x.modes);
}

template <class V>
void fields(V& v, InitCase& x) {
  v("n", x.n);
  v("inlier_rate", x.inlier_rate);
}

template <class V>
void fields(V& v, InitBenchConfig& x) {
  v("cases", x.cases);
  v("trials", x.trials);
  v("repeats", x.repeats);
  v("pixel_sigma", x.pixel_sigma);
  v("seed", x.seed);
  v("success_translation", x.success_translation);
  v("success_rotation", x.success_rotation);
  v("initializer", x.init);
}

template <class V>
void fields(V& v, MatchCase& x) {
  v("inlier_rate", x.inlier_rate);
  v("sample_size", x.sample_size);
  v("iterations", x.iterations);
}

template <class V>
void fields(V& v, MatchBenchConfig& x) {
  v("cases", x.cases);
  v("trials", x.trials);
  v("correspondences", x.correspondences);
  v("pixel_sigma", x.pixel_sigma);
  v("seed", x.seed);
  v("success_translation", x.success_translation);
  v("success_rotation", x.success_rotation);
}

template <class T>
struct is_vector : std::false_type {};
template <class T>
struct is_vector<std::vector<T>> : std::true_type {};

template <class T>
void read_value(const json& j, T& out, const std::string& path);

struct Reader {
  const json& j;
  std::string path;
  std::set<std::string> seen;
  template <class T>
  void operator()(const char* key, T& out) {
    const auto it = j.find(key);
    if (it == j.end()) return;
    seen.insert(key);
    read_value(*it, out, path + "." + key);
  }
};

template <class T>
void read_value(const json& j, T& out, const std::string& path) {
  auto expect = [&](bool ok, const char* what) {
    if (!ok) throw ConfigError(path + ": expected " + what);
  };
  if constexpr (std::is_same_v<T, bool>) {
    expect(j.is_boolean(), "a boolean");
    out = j.get<bool>();
  } else if constexpr (std::is_same_v<T, std::uint64_t>) {
    expect(j.is_number_unsigned(), "a non-negative integer");
    out = j.get<std::uint64_t>();
  } else if constexpr (std::is_integral_v<T>) {
    expect(j.is_number_integer(), "an integer");
    out = j.get<T>();
  } else if constexpr (std::is_floating_point_v<T>) {
    expect(j.is_number(), "a number");
    out = j.get<T>();
  } else if constexpr (std::is_same_v<T, std::string>) {
    expect(j.is_string(), "a string");
    out = j.get<std::string>();
  } else if constexpr (std::is_same_v<T, std::filesystem::path>) {
    expect(j.is_string(), "a path string");
    out = j.get<std::string>();
  } else if constexpr (std::is_same_v<T, sim::TrajectoryKind>) {
    expect(j.is_string(), "a trajectory kind");
    try {
      out = sim::parse_trajectory_kind(j.get<std::string>());
    } catch (const Error& e) {
      throw ConfigError(path + ": " + e.what());
    }
  } else if constexpr (std::is_same_v<T, Mode>) {
    expect(j.is_string(), "a mode");
    try {
      out = parse_mode(j.get<std::string>());
    } catch (const Error& e) {
      throw ConfigError(path + ": " + e.what());
    }
  } else if constexpr (std::is_same_v<T, Vec3>) {
    expect(j.is_array() && j.size() == 3, "an array of 3 numbers");
    for (int k = 0; k < 3; ++k) read_value(j[k], out[k], path + "[" + std::to_string(k) + "]");
  } else if constexpr (is_vector<T>::value) {
    expect(j.is_array(), "an array");
    out.clear();
    for (std::size_t k = 0; k < j.size(); ++k) {
      typename T::value_type item{};
      read_value(j[k], item, path + "[" + std::to_string(k) + "]");
      out.push_back(std::move(item));
    }
  } else {
    expect(j.is_object(), "an object");
    Reader r{j, path, {}};
    fields(r, out);
    for (const auto& [key, value] : j.items()) {
      if (!r.seen.count(key)) throw ConfigError(path + ": unknown key '" + key + "'");
    }
  }
}

template <class T>
json write_value(const T& x);

struct Writer {
  json& j;
  template <class T>
  void operator()(const char* key, T& x) {
    j[key] = write_value(x);
  }
};

template <class T>
json write_value(const T& x) {
  if constexpr (std::is_same_v<T, bool> || std::is_arithmetic_v<T> || std::is_same_v<T, std::string>) {
    return x;
  } else if constexpr (std::is_same_v<T, std::filesystem::path>) {
    return x.string();
  } else if constexpr (std::is_same_v<T, sim::TrajectoryKind> || std::is_same_v<T, Mode>) {
    return harness_to_string(x);
  } else if constexpr (std::is_same_v<T, Vec3>) {
    return json::array({x[0], x[1], x[2]});
  } else if constexpr (is_vector<T>::value) {
    json a = json::array();
    for (const auto& item : x) a.push_back(write_value(item));
    return a;
  } else {
    json j = json::object();
    Writer w{j};
    fields(w, const_cast<T&>(x));
    return j;
  }
}

json parse_json(const std::string& text, const std::string& what) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(what + ": " + e.what());
  }
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw Error("cannot read " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

// ---------------------------------------------------------------------------
// Scenario data

json pose_json(const RigidTransform& t) {
  const Vec4& q = t.rotation.jpl();
  const Vec3& p = t.translation;
  return json::array({q[0], q[1], q[2], q[3], p[0], p[1], p[2]});
}

RigidTransform pose_from(const json& j) {
  if (!j.is_array() || j.size() != 7) throw ParseError(0, "pose", "expected [qx, qy, qz, qw, x, y, z]");
  return {Rotation::from_jpl(Vec4(j[0].get<double>(), j[1].get<double>(), j[2].get<double>(), j[3].get<double>())),
          Vec3(j[4].get<double>(), j[5].get<double>(), j[6].get<double>())};
}

json vec_json(const Vec3& v) { return json::array({v[0], v[1], v[2]}); }
Vec3 vec_from(const json& j) { return {j.at(0).get<double>(), j.at(1).get<double>(), j.at(2).get<double>()}; }

constexpr const char* kScenarioFormat = "vilo-scenario";
constexpr int kScenarioVersion = 1;

}  // namespace

ExperimentConfig parse_experiment(const std::string& json_text) {
  const json j = parse_json(json_text, "experiment config");
  ExperimentConfig cfg;
  read_value(j, cfg, "experiment");
  if (cfg.seeds.empty()) throw ConfigError("experiment.seeds: must be non-empty");
  if (cfg.outlier_rates.empty()) throw ConfigError("experiment.outlier_rates: must be non-empty");
  for (double w : cfg.outlier_rates) {
    if (!(w >= 0.0 && w < 1.0)) throw ConfigError("experiment.outlier_rates: values must be in [0, 1)");
  }
  if (cfg.scenario.maps.empty()) throw ConfigError("experiment.scenario.maps: must be non-empty");
  return cfg;
}

ExperimentConfig load_experiment(const std::filesystem::path& path) { return parse_experiment(read_file(path)); }

std::string dump_experiment(const ExperimentConfig& cfg) { return write_value(cfg).dump(2); }

InitBenchConfig parse_init_bench(const std::string& json_text) {
  InitBenchConfig cfg;
  read_value(parse_json(json_text, "init-bench config"), cfg, "init_bench");
  if (cfg.cases.empty()) throw ConfigError("init_bench.cases: must be non-empty");
  return cfg;
}

MatchBenchConfig parse_match_bench(const std::string& json_text) {
  MatchBenchConfig cfg;
  read_value(parse_json(json_text, "match-bench config"), cfg, "match_bench");
  if (cfg.cases.empty()) throw ConfigError("match_bench.cases: must be non-empty");
  return cfg;
}

std::string dump_scenario(const sim::Scenario& sc) {
  json j;
  j["format"] = kScenarioFormat;
  j["version"] = kScenarioVersion;
  j["config"] = write_value(sc.config);

  json gt = json::array();
  for (const auto& s : sc.ground_truth) {
    json row = json::array({s.timestamp});
    for (const auto& v : pose_json(s.pose)) row.push_back(v);
    for (const Vec3* v : {&s.velocity, &s.acceleration, &s.body_rate})
      for (int k = 0; k < 3; ++k) row.push_back((*v)[k]);
    gt.push_back(row);
  }
  j["ground_truth"] = std::move(gt);

  json imu = json::array();
  for (const auto& s : sc.imu)
    imu.push_back(json::array({s.timestamp, s.gyro[0], s.gyro[1], s.gyro[2], s.accel[0], s.accel[1], s.accel[2]}));
  j["imu"] = std::move(imu);

  json rig = json::array();
  for (const auto& c : sc.rig) {
    rig.push_back({{"id", c.id},
                   {"intrinsics", write_value(c.K)},
                   {"width", c.width},
                   {"height", c.height},
                   {"imu_T_cam", pose_json(c.imu_T_cam)}});
  }
  j["rig"] = std::move(rig);

  json env = json::array();
  for (const auto& p : sc.environment) env.push_back(vec_json(p));
  j["environment"] = std::move(env);

  json maps = json::array();
  for (const auto& m : sc.maps) {
    json kfs = json::array();
    for (const auto& kf : m.keyframes()) {
      json obs = json::array();
      for (const auto& o : kf.observations) obs.push_back(json::array({o.landmark_id, o.normalized[0], o.normalized[1]}));
      kfs.push_back({{"id", kf.id}, {"pose", pose_json(kf.pose)}, {"observations", std::move(obs)}});
    }
    json lms = json::array();
    for (const auto& lm : m.landmarks())
      lms.push_back({{"id", lm.id}, {"position", vec_json(lm.position)}, {"observers", lm.observers}});
    maps.push_back({{"id", m.id()}, {"keyframes", std::move(kfs)}, {"landmarks", std::move(lms)}});
  }
  j["maps"] = std::move(maps);
  j["map_landmark_env"] = sc.map_landmark_env;
  json mtg = json::array();
  for (const auto& t : sc.map_T_gt) mtg.push_back(pose_json(t));
  j["map_T_gt"] = std::move(mtg);
  j["gt_T_local"] = pose_json(sc.gt_T_local);

  json assoc = json::array();
  for (const auto& a : sc.associations) assoc.push_back(json::array({a.map_a, a.landmark_a, a.map_b, a.landmark_b}));
  j["associations"] = std::move(assoc);

  json frames = json::array();
  for (const auto& f : sc.frames) {
    json tracks = json::array();
    for (const auto& o : f.tracks) tracks.push_back(json::array({o.feature_id, o.camera_id, o.pixel[0], o.pixel[1]}));
    json corrs = json::array();
    for (const auto& c : f.correspondences) {
      corrs.push_back(json::array({c.camera_id, c.map_id, c.landmark_id, c.pixel[0], c.pixel[1], c.point[0],
                                   c.point[1], c.point[2], c.weight, c.inlier}));
    }
    frames.push_back({{"t", f.timestamp}, {"tracks", std::move(tracks)}, {"correspondences", std::move(corrs)}});
  }
  j["frames"] = std::move(frames);
  return j.dump();
}

sim::Scenario parse_scenario(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ParseError(0, "scenario", e.what());
  }
  if (j.value("format", "") != kScenarioFormat) throw ParseError(0, "format", "not a scenario file");
  if (j.value("version", 0) != kScenarioVersion)
    throw ParseError(0, "version", "unsupported scenario version " + j.value("version", json(0)).dump());

  sim::Scenario sc;
  try {
    read_value(j.at("config"), sc.config, "scenario.config");
    for (const auto& r : j.at("ground_truth")) {
      sim::BodyState s;
      s.timestamp = r.at(0).get<double>();
      s.pose = pose_from(json::array({r[1], r[2], r[3], r[4], r[5], r[6], r[7]}));
      s.velocity = Vec3(r.at(8).get<double>(), r.at(9).get<double>(), r.at(10).get<double>());
      s.acceleration = Vec3(r.at(11).get<double>(), r.at(12).get<double>(), r.at(13).get<double>());
      s.body_rate = Vec3(r.at(14).get<double>(), r.at(15).get<double>(), r.at(16).get<double>());
      sc.ground_truth.push_back(s);
    }
    for (const auto& r : j.at("imu")) {
      sim::ImuSample s;
      s.timestamp = r.at(0).get<double>();
      s.gyro = Vec3(r.at(1).get<double>(), r.at(2).get<double>(), r.at(3).get<double>());
      s.accel = Vec3(r.at(4).get<double>(), r.at(5).get<double>(), r.at(6).get<double>());
      sc.imu.push_back(s);
    }
    for (const auto& r : j.at("rig")) {
      CameraModel c;
      c.id = r.at("id").get<int>();
      read_value(r.at("intrinsics"), c.K, "scenario.rig.intrinsics");
      c.width = r.at("width").get<int>();
      c.height = r.at("height").get<int>();
      c.imu_T_cam = pose_from(r.at("imu_T_cam"));
      c.validate();
      sc.rig.push_back(c);
    }
    for (const auto& p : j.at("environment")) sc.environment.push_back(vec_from(p));
    for (const auto& m : j.at("maps")) {
      std::vector<map::MapKeyframe> kfs;
      for (const auto& k : m.at("keyframes")) {
        map::MapKeyframe kf;
        kf.id = k.at("id").get<int>();
        kf.pose = pose_from(k.at("pose"));
        for (const auto& o : k.at("observations"))
          kf.observations.push_back({o.at(0).get<int>(), Vec2(o.at(1).get<double>(), o.at(2).get<double>())});
        kfs.push_back(std::move(kf));
      }
      std::vector<map::Landmark> lms;
      for (const auto& l : m.at("landmarks"))
        lms.push_back({l.at("id").get<int>(), vec_from(l.at("position")), l.at("observers").get<std::vector<int>>()});
      sc.maps.emplace_back(m.at("id").get<int>(), std::move(kfs), std::move(lms));
    }
    sc.map_landmark_env = j.at("map_landmark_env").get<std::vector<std::vector<int>>>();
    for (const auto& t : j.at("map_T_gt")) sc.map_T_gt.push_back(pose_from(t));
    sc.gt_T_local = pose_from(j.at("gt_T_local"));
    for (const auto& a : j.at("associations"))
      sc.associations.push_back({a.at(0).get<int>(), a.at(1).get<int>(), a.at(2).get<int>(), a.at(3).get<int>()});
    for (const auto& f : j.at("frames")) {
      sim::Frame fr;
      fr.timestamp = f.at("t").get<double>();
      for (const auto& o : f.at("tracks"))
        fr.tracks.push_back({o.at(0).get<int>(), o.at(1).get<int>(), Vec2(o.at(2).get<double>(), o.at(3).get<double>())});
      for (const auto& c : f.at("correspondences")) {
        sim::Correspondence cr;
        cr.camera_id = c.at(0).get<int>();
        cr.map_id = c.at(1).get<int>();
        cr.landmark_id = c.at(2).get<int>();
        cr.pixel = Vec2(c.at(3).get<double>(), c.at(4).get<double>());
        cr.point = Vec3(c.at(5).get<double>(), c.at(6).get<double>(), c.at(7).get<double>());
        cr.weight = c.at(8).get<double>();
        cr.inlier = c.at(9).get<bool>();
        fr.correspondences.push_back(cr);
      }
      sc.frames.push_back(std::move(fr));
    }
  } catch (const json::exception& e) {
    throw ParseError(0, "scenario", e.what());
  } catch (const ConfigError& e) {
    throw ParseError(0, "config", e.what());
  }
  if (sc.map_T_gt.size() != sc.maps.size() || sc.map_landmark_env.size() != sc.maps.size())
    throw ParseError(0, "maps", "map tables have different lengths");
  return sc;
}

void save_scenario(const sim::Scenario& scenario, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw Error("cannot write " + path.string());
  os << dump_scenario(scenario) << '\n';
}

sim::Scenario load_scenario(const std::filesystem::path& path) { return parse_scenario(read_file(path)); }

// ---------------------------------------------------------------------------
// Pose logs

namespace {

std::string fmt17(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

void write_pose_log_jsonl(std::ostream& os, const std::vector<filter::PoseRecord>& poses) {
  for (const auto& r : poses) {
    json j;
    j["t"] = r.timestamp;
    j["map_id"] = r.map_id;
    j["map_T_imu"] = pose_json(r.map_T_imu);
    j["local_T_imu"] = pose_json(r.local_T_imu);
    j["cov_trace"] = r.covariance_trace;
    os << j.dump() << '\n';
  }
}

void write_pose_log_csv(std::ostream& os, const std::vector<filter::PoseRecord>& poses) {
  os << "t,map_id,qx,qy,qz,qw,x,y,z,local_qx,local_qy,local_qz,local_qw,local_x,local_y,local_z,cov_trace\n";
  for (const auto& r : poses) {
    os << fmt17(r.timestamp) << ',' << r.map_id;
    for (const RigidTransform* t : {&r.map_T_imu, &r.local_T_imu}) {
      for (int k = 0; k < 4; ++k) os << ',' << fmt17(t->rotation.jpl()[k]);
      for (int k = 0; k < 3; ++k) os << ',' << fmt17(t->translation[k]);
    }
    os << ',' << fmt17(r.covariance_trace) << '\n';
  }
}

std::vector<filter::PoseRecord> read_pose_log_jsonl(std::istream& is) {
  std::vector<filter::PoseRecord> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const json j = json::parse(line);
      filter::PoseRecord r;
      r.timestamp = j.at("t").get<double>();
      r.map_id = j.at("map_id").get<int>();
      r.map_T_imu = pose_from(j.at("map_T_imu"));
      r.local_T_imu = pose_from(j.at("local_T_imu"));
      r.covariance_trace = j.at("cov_trace").get<double>();
      out.push_back(r);
    } catch (const json::exception& e) {
      throw ParseError(line_no, "pose record", e.what());
    } catch (const ParseError& e) {
      throw ParseError(line_no, e.field(), e.what());
    }
  }
  return out;
}

}  // namespace vilo::harness
