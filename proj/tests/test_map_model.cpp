#include "vilo/error.hpp"
#include "vilo/map_model.hpp"

#include <gtest/gtest.h>

#include <Eigen/Geometry>

#include <random>
#include <set>
#include <sstream>

using namespace vilo;
using namespace vilo::map;

namespace {

MapBundle small_map() {
  std::vector<MapKeyframe> kfs(2);
  kfs[0].id = 10;
  kfs[0].pose = RigidTransform(yaw_rotation(0.3), Vec3(1.0, 2.0, 0.5));
  kfs[1].id = 11;
  kfs[1].pose = RigidTransform(Rotation::exp(Vec3(0.1, -0.2, 0.05)), Vec3(1.0 / 3.0, -2.0, 1e-7));
  std::vector<Landmark> lms;
  for (int i = 0; i < 5; ++i) {
    Landmark lm;
    lm.id = 100 + i;
    lm.position = Vec3(0.1 * i, std::sqrt(2.0) * i, 5.0 + i / 7.0);
    lm.observers = {10};
    kfs[0].observations.push_back({lm.id, Vec2(0.01 * i, -0.02 * i)});
    if (i % 2 == 0) {
      lm.observers.push_back(11);
      kfs[1].observations.push_back({lm.id, Vec2(1.0 / (i + 3), 0.5)});
    }
    lms.push_back(lm);
  }
  return MapBundle(3, std::move(kfs), std::move(lms));
}

std::string serialize(const MapBundle& m) {
  std::ostringstream os;
  write_map(os, m);
  return os.str();
}

}  // namespace

TEST(MapBundle, EmptyMapIsValid) {
  const MapBundle m(1, {}, {});
  std::istringstream is(serialize(m));
  const MapBundle back = read_map(is);
  EXPECT_EQ(back.id(), 1);
  EXPECT_TRUE(back.keyframes().empty());
  EXPECT_TRUE(back.landmarks().empty());
}

TEST(MapBundle, RoundTripIsByteIdentical) {
  const MapBundle m = small_map();
  const std::string first = serialize(m);
  std::istringstream is(first);
  const MapBundle back = read_map(is);
  EXPECT_EQ(serialize(back), first);
  ASSERT_EQ(back.keyframes().size(), 2u);
  ASSERT_EQ(back.landmarks().size(), 5u);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(back.keyframes()[i].pose.rotation.jpl(), m.keyframes()[i].pose.rotation.jpl());
    EXPECT_EQ(back.keyframes()[i].pose.translation, m.keyframes()[i].pose.translation);
  }
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_EQ(back.landmarks()[i].position, m.landmarks()[i].position);
    EXPECT_EQ(back.landmarks()[i].observers, m.landmarks()[i].observers);
  }
}

TEST(MapBundle, FileRoundTrip) {
  const MapBundle m = small_map();
  const auto path = std::filesystem::temp_directory_path() / "vilo_map_roundtrip.map";
  save_map(m, path);
  EXPECT_EQ(serialize(load_map(path)), serialize(m));
  std::filesystem::remove(path);
}

TEST(MapBundle, MissingObserverKeyframeIsRejected) {
  std::vector<MapKeyframe> kfs(1);
  kfs[0].id = 0;
  Landmark lm;
  lm.id = 0;
  lm.observers = {7};
  EXPECT_THROW(MapBundle(1, kfs, {lm}), InvariantError);
}

TEST(MapBundle, LandmarkWithoutObserverIsRejected) {
  Landmark lm;
  lm.id = 0;
  EXPECT_THROW(MapBundle(1, {}, {lm}), InvariantError);
}

TEST(MapBundle, DuplicateKeyframeIdIsRejected) {
  std::vector<MapKeyframe> kfs(2);
  EXPECT_THROW(MapBundle(1, kfs, {}), InvariantError);
}

TEST(MapBundle, ParseErrorReportsLineAndField) {
  std::string text = serialize(small_map());
  // Corrupt the first landmark position.
  const auto pos = text.find("lm 100 ");
  text.replace(pos, 7, "lm 100 abc ");
  std::istringstream is(text);
  try {
    read_map(is);
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.field(), "lm_position");
    std::size_t line = 1;
    for (std::size_t i = 0; i < pos; ++i) line += text[i] == '\n';
    EXPECT_EQ(e.line(), line);
  }
}

TEST(MapBundle, WrongHeaderIsParseError) {
  std::istringstream is("NOTAMAP 1\n");
  EXPECT_THROW(read_map(is), ParseError);
  std::istringstream is2("VILOMAP 2\nmap 1 0 0\n");
  EXPECT_THROW(read_map(is2), ParseError);
}

TEST(Visibility, BehindCameraExcluded) {
  CameraModel cam;
  Landmark lm{0, Vec3(0, 0, -5), {0}};
  MapKeyframe kf;
  kf.observations.push_back({0, Vec2::Zero()});
  const MapBundle m(1, {kf}, {lm});
  EXPECT_TRUE(landmarks_visible_from(m, RigidTransform::identity(), cam).empty());
}

TEST(Visibility, OpticalAxisProjectsToPrincipalPoint) {
  CameraModel cam;
  Landmark lm{0, Vec3(0, 0, 5), {0}};
  MapKeyframe kf;
  kf.observations.push_back({0, Vec2::Zero()});
  const MapBundle m(1, {kf}, {lm});
  const auto vis = landmarks_visible_from(m, RigidTransform::identity(), cam);
  ASSERT_EQ(vis.size(), 1u);
  EXPECT_EQ(vis[0].pixel, Vec2(cam.K.cx, cam.K.cy));
  EXPECT_EQ(vis[0].bearing, Vec3(0, 0, 1));
}

TEST(Visibility, MatchesBruteForceFilter) {
  std::mt19937_64 rng(21);
  std::uniform_real_distribution<double> u(-8.0, 8.0);
  CameraModel cam;
  cam.imu_T_cam = RigidTransform(Rotation::exp(Vec3(0.05, -0.1, 0.2)), Vec3(0.1, 0, 0));
  const RigidTransform pose(yaw_rotation(0.4), Vec3(1, -1, 0));
  for (int trial = 0; trial < 20; ++trial) {
    MapKeyframe kf;
    std::vector<Landmark> lms;
    for (int i = 0; i < 10; ++i) {
      lms.push_back({i, Vec3(u(rng), u(rng), u(rng)), {0}});
      kf.observations.push_back({i, Vec2::Zero()});
    }
    const MapBundle m(1, {kf}, lms);
    // Oracle: full homogeneous projection, then frustum filter.
    const Mat4 cam_from_map = (pose.matrix() * cam.imu_T_cam.matrix()).inverse();
    Eigen::Matrix3d K;
    K << cam.K.fx, 0, cam.K.cx, 0, cam.K.fy, cam.K.cy, 0, 0, 1;
    std::set<int> expected;
    for (const auto& lm : lms) {
      const Vec3 pc = (cam_from_map * lm.position.homogeneous()).head<3>();
      if (pc.z() <= 0.1) continue;
      const Vec3 uvw = K * pc;
      const double x = uvw.x() / uvw.z(), y = uvw.y() / uvw.z();
      if (x < 0 || y < 0 || x > cam.width || y > cam.height) continue;
      expected.insert(lm.id);
    }
    std::set<int> got;
    for (const auto& v : landmarks_visible_from(m, pose, cam)) {
      got.insert(v.landmark_id);
      // Zero-noise projection is exact.
      const Vec3 pc = (cam_from_map * m.find_landmark(v.landmark_id)->position.homogeneous()).head<3>();
      const Vec3 uvw = K * pc;
      EXPECT_LT((v.pixel - uvw.hnormalized()).norm(), 1e-9);
      EXPECT_LT((cam.normalized(v.pixel) - v.bearing).norm(), 1e-12);
    }
    EXPECT_EQ(got, expected);
  }
}
