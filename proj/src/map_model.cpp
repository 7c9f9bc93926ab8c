#include "vilo/map_model.hpp"

#include "vilo/error.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <istream>
#include <ostream>
#include <set>
#include <sstream>

namespace vilo::map {

namespace {

constexpr const char* kMagic = "VILOMAP";
constexpr int kVersion = 1;

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

MapBundle::MapBundle(int id, std::vector<MapKeyframe> keyframes, std::vector<Landmark> landmarks)
    : id_(id), keyframes_(std::move(keyframes)), landmarks_(std::move(landmarks)) {
  const std::string where = "map " + std::to_string(id_) + ": ";
  for (std::size_t i = 0; i < keyframes_.size(); ++i) {
    if (!kf_index_.emplace(keyframes_[i].id, i).second)
      throw InvariantError(where + "duplicate keyframe id " + std::to_string(keyframes_[i].id));
    if (std::abs(keyframes_[i].pose.rotation.jpl().norm() - 1.0) > 1e-9)
      throw InvariantError(where + "keyframe " + std::to_string(keyframes_[i].id) + " has a non-unit rotation");
  }
  for (std::size_t i = 0; i < landmarks_.size(); ++i) {
    const auto& lm = landmarks_[i];
    if (!lm_index_.emplace(lm.id, i).second) throw InvariantError(where + "duplicate landmark id " + std::to_string(lm.id));
    if (lm.observers.empty()) throw InvariantError(where + "landmark " + std::to_string(lm.id) + " has no observing keyframe");
    if (!lm.position.allFinite()) throw InvariantError(where + "landmark " + std::to_string(lm.id) + " is not finite");
    for (int kf : lm.observers) {
      if (!kf_index_.count(kf))
        throw InvariantError(where + "landmark " + std::to_string(lm.id) + " references missing keyframe " + std::to_string(kf));
    }
  }
  // Keyframe observations and landmark observer lists must describe the same edges.
  std::set<std::pair<int, int>> from_kf, from_lm;
  for (const auto& kf : keyframes_) {
    for (const auto& ob : kf.observations) {
      if (!lm_index_.count(ob.landmark_id))
        throw InvariantError(where + "keyframe " + std::to_string(kf.id) + " observes missing landmark " +
                             std::to_string(ob.landmark_id));
      if (!from_kf.emplace(kf.id, ob.landmark_id).second)
        throw InvariantError(where + "keyframe " + std::to_string(kf.id) + " observes landmark " +
                             std::to_string(ob.landmark_id) + " twice");
    }
  }
  for (const auto& lm : landmarks_) {
    for (int kf : lm.observers) from_lm.emplace(kf, lm.id);
  }
  if (from_kf != from_lm) throw InvariantError(where + "keyframe observations disagree with landmark observer lists");
}

const MapKeyframe* MapBundle::find_keyframe(int id) const {
  auto it = kf_index_.find(id);
  return it == kf_index_.end() ? nullptr : &keyframes_[it->second];
}

const Landmark* MapBundle::find_landmark(int id) const {
  auto it = lm_index_.find(id);
  return it == lm_index_.end() ? nullptr : &landmarks_[it->second];
}

const KeyframeObservation* MapBundle::find_observation(int keyframe_id, int landmark_id) const {
  const MapKeyframe* kf = find_keyframe(keyframe_id);
  if (!kf) return nullptr;
  for (const auto& ob : kf->observations) {
    if (ob.landmark_id == landmark_id) return &ob;
  }
  return nullptr;
}

void write_map(std::ostream& os, const MapBundle& map) {
  os << kMagic << ' ' << kVersion << '\n';
  os << "map " << map.id() << ' ' << map.keyframes().size() << ' ' << map.landmarks().size() << '\n';
  for (const auto& kf : map.keyframes()) {
    const Vec4& q = kf.pose.rotation.jpl();
    const Vec3& p = kf.pose.translation;
    os << "kf " << kf.id;
    for (int i = 0; i < 4; ++i) os << ' ' << fmt(q[i]);
    for (int i = 0; i < 3; ++i) os << ' ' << fmt(p[i]);
    os << ' ' << kf.observations.size() << '\n';
    for (const auto& ob : kf.observations) {
      os << "obs " << ob.landmark_id << ' ' << fmt(ob.normalized.x()) << ' ' << fmt(ob.normalized.y()) << '\n';
    }
  }
  for (const auto& lm : map.landmarks()) {
    os << "lm " << lm.id;
    for (int i = 0; i < 3; ++i) os << ' ' << fmt(lm.position[i]);
    os << ' ' << lm.observers.size();
    for (int kf : lm.observers) os << ' ' << kf;
    os << '\n';
  }
}

namespace {

class LineReader {
 public:
  explicit LineReader(std::istream& is) : is_(is) {}

  // Next non-empty, non-comment line split into tokens.
  bool next() {
    std::string line;
    while (std::getline(is_, line)) {
      ++line_no_;
      if (line.empty() || line[0] == '#') continue;
      tokens_.clear();
      std::istringstream ss(line);
      std::string tok;
      while (ss >> tok) tokens_.push_back(tok);
      if (!tokens_.empty()) {
        pos_ = 0;
        return true;
      }
    }
    return false;
  }

  void expect_tag(const char* tag) {
    if (tokens_.empty() || tokens_[0] != tag) fail("record", std::string("expected '") + tag + "' record");
    pos_ = 1;
  }

  const std::string& tag() const { return tokens_.front(); }

  template <typename T>
  T take(const char* field) {
    if (pos_ >= tokens_.size()) fail(field, "missing value");
    const std::string& s = tokens_[pos_++];
    T v{};
    if constexpr (std::is_floating_point_v<T>) {
      char* end = nullptr;
      v = std::strtod(s.c_str(), &end);
      if (end != s.c_str() + s.size()) fail(field, "not a number: '" + s + "'");
    } else {
      auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
      if (ec != std::errc() || ptr != s.data() + s.size()) fail(field, "not an integer: '" + s + "'");
    }
    return v;
  }

  void expect_end() {
    if (pos_ != tokens_.size()) fail("record", "unexpected trailing token '" + tokens_[pos_] + "'");
  }

  [[noreturn]] void fail(const std::string& field, const std::string& what) const { throw ParseError(line_no_, field, what); }
  std::size_t line() const { return line_no_; }

 private:
  std::istream& is_;
  std::vector<std::string> tokens_;
  std::size_t pos_ = 0;
  std::size_t line_no_ = 0;
};

}  // namespace

MapBundle read_map(std::istream& is) {
  LineReader r(is);
  if (!r.next()) throw ParseError(0, "header", "empty map file");
  r.expect_tag(kMagic);
  const int version = r.take<int>("version");
  if (version != kVersion) r.fail("version", "unsupported version " + std::to_string(version));
  r.expect_end();

  if (!r.next()) r.fail("map", "missing map record");
  r.expect_tag("map");
  const int id = r.take<int>("map_id");
  const auto n_kf = r.take<std::size_t>("keyframe_count");
  const auto n_lm = r.take<std::size_t>("landmark_count");
  r.expect_end();

  std::vector<MapKeyframe> keyframes;
  keyframes.reserve(n_kf);
  for (std::size_t i = 0; i < n_kf; ++i) {
    if (!r.next()) r.fail("kf", "expected " + std::to_string(n_kf) + " keyframes, found " + std::to_string(i));
    r.expect_tag("kf");
    MapKeyframe kf;
    kf.id = r.take<int>("kf_id");
    Vec4 q;
    for (int k = 0; k < 4; ++k) q[k] = r.take<double>("kf_q");
    Vec3 p;
    for (int k = 0; k < 3; ++k) p[k] = r.take<double>("kf_p");
    if (!(q.norm() > 0.5)) r.fail("kf_q", "quaternion is not unit norm");
    kf.pose = RigidTransform(Rotation::from_jpl(q), p);
    const auto n_obs = r.take<std::size_t>("kf_obs_count");
    r.expect_end();
    for (std::size_t j = 0; j < n_obs; ++j) {
      if (!r.next()) r.fail("obs", "truncated observation list");
      r.expect_tag("obs");
      KeyframeObservation ob;
      ob.landmark_id = r.take<int>("obs_landmark");
      ob.normalized.x() = r.take<double>("obs_x");
      ob.normalized.y() = r.take<double>("obs_y");
      r.expect_end();
      kf.observations.push_back(ob);
    }
    keyframes.push_back(std::move(kf));
  }

  std::vector<Landmark> landmarks;
  landmarks.reserve(n_lm);
  for (std::size_t i = 0; i < n_lm; ++i) {
    if (!r.next()) r.fail("lm", "expected " + std::to_string(n_lm) + " landmarks, found " + std::to_string(i));
    r.expect_tag("lm");
    Landmark lm;
    lm.id = r.take<int>("lm_id");
    for (int k = 0; k < 3; ++k) lm.position[k] = r.take<double>("lm_position");
    const auto n_obs = r.take<std::size_t>("lm_observer_count");
    for (std::size_t j = 0; j < n_obs; ++j) lm.observers.push_back(r.take<int>("lm_observer"));
    r.expect_end();
    landmarks.push_back(std::move(lm));
  }
  if (r.next()) r.fail("record", "unexpected record '" + r.tag() + "' after landmarks");
  return MapBundle(id, std::move(keyframes), std::move(landmarks));
}

void save_map(const MapBundle& map, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw Error("cannot open " + path.string() + " for writing");
  write_map(os, map);
}

MapBundle load_map(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw Error("cannot open " + path.string());
  return read_map(is);
}

std::vector<VisibleLandmark> landmarks_visible_from(const MapBundle& map, const RigidTransform& map_T_imu,
                                                    const CameraModel& camera, double max_range) {
  camera.validate();
  const RigidTransform cam_T_map = compose(map_T_imu, camera.imu_T_cam).inverse();
  std::vector<VisibleLandmark> out;
  for (const auto& lm : map.landmarks()) {
    const Vec3 pc = transform_point(cam_T_map, lm.position);
    if (pc.norm() > max_range) continue;
    auto u = camera.project(pc);
    if (!u) continue;
    out.push_back({lm.id, *u, Vec3(pc / pc.z())});
  }
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.landmark_id < b.landmark_id; });
  return out;
}

}  // namespace vilo::map
