#include "vilo/harness.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

using namespace vilo;
namespace h = vilo::harness;
namespace fs = std::filesystem;

namespace {

sim::ScenarioConfig small_scenario(double duration = 12.0) {
  sim::ScenarioConfig c;
  c.trajectory.kind = sim::TrajectoryKind::kCircle;
  c.trajectory.duration = duration;
  c.rig.num_cameras = 2;
  c.maps = {sim::MapConfig{}, sim::MapConfig{}};
  c.maps[1].start_fraction = 0.1;
  c.imu_noise.gyro_noise = 1e-3;
  c.imu_noise.accel_noise = 1e-2;
  c.correspondences.outlier_rate = 0.3;
  return c;
}

sim::ScenarioConfig zero_noise_scenario() {
  sim::ScenarioConfig c = small_scenario(8.0);
  c.imu_noise = {};
  c.correspondences.outlier_rate = 0.0;
  c.correspondences.pixel_sigma = 0.0;
  c.feature_pixel_sigma = 0.0;
  return c;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

std::string pose_log_text(const h::RunLog& log) {
  std::ostringstream os;
  h::write_pose_log_jsonl(os, log.poses);
  return os.str();
}

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("vilo_test_" + name);
  fs::remove_all(p);
  return p;
}

}  // namespace

TEST(Harness, ModeNames) {
  EXPECT_EQ(h::parse_mode("map-aided"), h::Mode::kMapAided);
  EXPECT_EQ(h::parse_mode(h::to_string(h::Mode::kLocalOnly)), h::Mode::kLocalOnly);
  EXPECT_THROW(h::parse_mode("fused"), Error);
}

TEST(Harness, ZeroNoiseRunHasNegligibleErrors) {
  const sim::Scenario sc = sim::generate_scenario(zero_noise_scenario());
  const h::RunLog log = h::localize(sc, {});
  ASSERT_EQ(log.registrations.size(), 2u);
  for (const auto& r : log.registrations) {
    EXPECT_LT(r.error.translation, 1e-4);
    EXPECT_LT(r.error.rotation, 1e-4);
    EXPECT_EQ(r.inlier_recall, 1.0);
  }
  const h::RunMetrics m = h::evaluate_run(sc, log, true);
  EXPECT_LT(m.local_error, 1e-4);
  ASSERT_EQ(m.map_errors.size(), 2u);
  for (const auto& [id, st] : m.map_errors) {
    EXPECT_LT(st.rmse, 1e-4) << "map " << id;
    EXPECT_LT(st.max, 1e-4) << "map " << id;
  }
  for (const auto& [id, v] : m.mapping_keyframe_error) EXPECT_LT(v, 1e-4);
  for (const auto& [id, v] : m.mapping_point_error) EXPECT_LT(v, 1e-4);
}

TEST(Harness, RepeatedRunsAreIdentical) {
  const sim::Scenario sc = sim::generate_scenario(small_scenario());
  const h::RunLog a = h::localize(sc, {});
  const h::RunLog b = h::localize(sc, {});
  EXPECT_EQ(pose_log_text(a), pose_log_text(b));
  EXPECT_FALSE(a.poses.empty());
}

TEST(Harness, PoseLogOnlyDependsOnPastMeasurements) {
  const sim::Scenario sc = sim::generate_scenario(small_scenario());
  const sim::Scenario cut = h::truncate_scenario(sc, 0.6);
  EXPECT_EQ(cut.frames.size(), static_cast<std::size_t>(std::ceil(0.6 * sc.frames.size())));
  EXPECT_GE(cut.imu.back().timestamp, cut.frames.back().timestamp);
  const std::string full = pose_log_text(h::localize(sc, {}));
  const std::string part = pose_log_text(h::localize(cut, {}));
  ASSERT_FALSE(part.empty());
  EXPECT_EQ(full.substr(0, part.size()), part);
  EXPECT_LT(part.size(), full.size());
}

TEST(Harness, TruncateRejectsBadFraction) {
  const sim::Scenario sc = sim::generate_scenario(small_scenario(3.0));
  EXPECT_THROW(h::truncate_scenario(sc, 0.0), Error);
  EXPECT_THROW(h::truncate_scenario(sc, 1.5), Error);
}

TEST(Harness, MapErrorMatchesMetricsModule) {
  const sim::Scenario sc = sim::generate_scenario(small_scenario());
  const h::RunLog log = h::localize(sc, {});
  const h::RunMetrics m = h::evaluate_run(sc, log);
  for (const auto& [id, st] : m.map_errors) {
    const metrics::Trajectory est = h::map_trajectory(log, id);
    const metrics::Trajectory gt = h::truth_in_map(sc, est, id);
    EXPECT_NEAR(st.rmse, metrics::map_trajectory_error(est, gt), 1e-12);
    EXPECT_EQ(st.samples, est.size());
  }
  const metrics::Trajectory local = h::local_trajectory(log);
  EXPECT_NEAR(m.local_error, metrics::local_trajectory_error(local, h::truth_trajectory(sc, local)), 1e-12);
}

TEST(Harness, CrossMapLinksKeepMapsConsistent) {
  // Both maps share the world; after fusion the two map-frame estimates agree
  // with their own truth, so they agree with each other through map_T_gt.
  const sim::Scenario sc = sim::generate_scenario(small_scenario(20.0));
  h::PipelineConfig pc;
  pc.cross_map = true;
  const h::RunLog log = h::localize(sc, pc);
  const h::RunMetrics m = h::evaluate_run(sc, log);
  ASSERT_EQ(m.map_errors.size(), 2u);
  for (const auto& [id, st] : m.map_errors) EXPECT_LT(st.rmse, 0.1) << "map " << id;
  const auto& e1 = m.map_errors.at(1).errors;
  const auto& e2 = m.map_errors.at(2).errors;
  ASSERT_EQ(e1.size(), e2.size());
  EXPECT_LT(std::abs(e1.back() - e2.back()), 0.05);
}

TEST(Harness, LocalOnlyStopsMapUpdatesAfterRegistration) {
  const sim::Scenario sc = sim::generate_scenario(small_scenario());
  h::PipelineConfig pc;
  pc.mode = h::Mode::kLocalOnly;
  const h::RunLog log = h::localize(sc, pc);
  EXPECT_EQ(log.registrations.size(), 2u);
  EXPECT_EQ(log.map_features, 0);
  EXPECT_TRUE(log.matches.empty());
}

TEST(Harness, MapSubsetAndCameraSubset) {
  const sim::Scenario sc = sim::generate_scenario(small_scenario());
  h::PipelineConfig pc;
  pc.map_ids = {2};
  pc.num_cameras = 1;
  const h::RunLog log = h::localize(sc, pc);
  ASSERT_EQ(log.registrations.size(), 1u);
  EXPECT_EQ(log.registrations[0].map_id, 2);
  for (const auto& p : log.poses) EXPECT_EQ(p.map_id, 2);
}

TEST(Harness, OutlierSweepShowsMonotoneMatchDecline) {
  // Few RANSAC iterations make matching success sensitive to w_bar. The
  // solver-level Monte-Carlo bench at the same inlier rates is the oracle for
  // the ordering.
  h::ExperimentConfig cfg;
  cfg.seeds = {3};
  cfg.outlier_rates = {0.6, 0.7, 0.8};
  cfg.scenario = small_scenario(40.0);
  cfg.scenario.correspondences.max_per_camera = 60;
  cfg.pipeline.ransac.iterations = 8;
  const h::SweepReport rep = h::run_scenario(cfg);
  ASSERT_EQ(rep.runs.size(), 3u);
  std::vector<double> rate;
  for (const auto& r : rep.runs) {
    int ok = 0;
    for (const auto& m : r.log.matches) ok += m.ok && m.error.translation <= 0.05 && m.error.rotation <= 0.5 * kPi / 180;
    ASSERT_FALSE(r.log.matches.empty());
    rate.push_back(static_cast<double>(ok) / r.log.matches.size());
  }

  h::MatchBenchConfig mb;
  mb.trials = 300;
  mb.cases = {{0.4, 2, 8}, {0.3, 2, 8}, {0.2, 2, 8}};
  const auto oracle = h::match_bench(mb);
  for (std::size_t i = 0; i + 1 < 3; ++i) {
    EXPECT_GT(oracle[i].empirical, oracle[i + 1].empirical);
    EXPECT_GT(rate[i], rate[i + 1]) << "w_bar " << cfg.outlier_rates[i];
  }
}

TEST(Harness, FailedRunIsRecordedAndSweepContinues) {
  h::ExperimentConfig cfg;
  cfg.seeds = {1, 2};
  cfg.outlier_rates = {0.2};
  cfg.scenario = small_scenario(4.0);
  cfg.pipeline.map_ids = {7};  // no such map: nothing ever registers
  const h::SweepReport rep = h::run_scenario(cfg);
  ASSERT_EQ(rep.runs.size(), 2u);
  for (const auto& r : rep.runs) {
    EXPECT_FALSE(r.ok);
    EXPECT_FALSE(r.failure.empty());
  }
  EXPECT_NE(rep.summary.find("failed"), std::string::npos);
}

TEST(Harness, ReportFilesAreReproducible) {
  h::ExperimentConfig cfg;
  cfg.seeds = {2, 1};
  cfg.outlier_rates = {0.3};
  cfg.scenario = small_scenario(5.0);
  cfg.output_dir = scratch_dir("repro");
  h::run_scenario(cfg);
  std::map<std::string, std::string> first;
  for (const auto& e : fs::recursive_directory_iterator(cfg.output_dir))
    if (e.is_regular_file()) first[fs::relative(e.path(), cfg.output_dir).string()] = slurp(e.path());
  ASSERT_TRUE(first.count("config.json"));
  ASSERT_TRUE(first.count("runs.csv"));
  ASSERT_TRUE(first.count("summary.txt"));
  ASSERT_TRUE(first.count("poses/seed1_w0.300_map-aided.jsonl"));
  h::run_scenario(cfg);
  for (const auto& [name, text] : first) {
    if (name == "timing.csv") continue;
    EXPECT_EQ(slurp(cfg.output_dir / name), text) << name;
  }
  // Rows come out sorted by seed.
  const std::string csv = first["runs.csv"];
  EXPECT_LT(csv.find("\n1,"), csv.find("\n2,"));
  // The archived config reproduces the experiment.
  const h::ExperimentConfig back = h::load_experiment(cfg.output_dir / "config.json");
  EXPECT_EQ(h::dump_experiment(back), h::dump_experiment(cfg));
  fs::remove_all(cfg.output_dir);
}

TEST(Harness, IdenticalModesGiveIdenticalColumns) {
  h::ExperimentConfig cfg;
  cfg.seeds = {1, 2};
  cfg.scenario = small_scenario(5.0);
  cfg.modes = {{"a", h::Mode::kMapAided, {}, 0}, {"b", h::Mode::kMapAided, {}, 0}};
  const h::CompareReport rep = h::compare_modes(cfg);
  ASSERT_EQ(rep.modes.size(), 2u);
  EXPECT_EQ(rep.modes[0].mean_error, rep.modes[1].mean_error);
  EXPECT_EQ(rep.modes[0].mean_std, rep.modes[1].mean_std);
  ASSERT_EQ(rep.runs.size(), 4u);
  EXPECT_EQ(pose_log_text(rep.runs[0].log), pose_log_text(rep.runs[1].log));
}

TEST(HarnessIo, ExperimentRoundTripAndDefaults) {
  h::ExperimentConfig cfg;
  cfg.name = "sweep";
  cfg.seeds = {4, 5};
  cfg.outlier_rates = {0.6, 0.7};
  cfg.scenario = small_scenario();
  cfg.scenario.trajectory.kind = sim::TrajectoryKind::kFigureEight;
  cfg.scenario.imu_noise.gyro_bias = Vec3(1e-3, -2e-3, 3e-3);
  cfg.pipeline.mode = h::Mode::kLocalOnly;
  cfg.pipeline.filter.window_size = 7;
  cfg.pipeline.init.yaw_step = 0.01;
  cfg.modes = {{"one", h::Mode::kMapAided, {1}, 1}};
  const std::string text = h::dump_experiment(cfg);
  const h::ExperimentConfig back = h::parse_experiment(text);
  EXPECT_EQ(h::dump_experiment(back), text);
  EXPECT_EQ(back.scenario.trajectory.kind, sim::TrajectoryKind::kFigureEight);
  EXPECT_EQ(back.pipeline.filter.window_size, 7);
  EXPECT_EQ(back.scenario.imu_noise.gyro_bias, cfg.scenario.imu_noise.gyro_bias);

  // Omitted keys keep their defaults.
  const h::ExperimentConfig sparse =
      h::parse_experiment(R"({"seeds": [9], "outlier_rates": [0.5], "scenario": {"maps": [{}]}})");
  EXPECT_EQ(sparse.seeds, std::vector<std::uint64_t>{9});
  EXPECT_EQ(sparse.pipeline.filter.window_size, filter::FilterConfig{}.window_size);
}

TEST(HarnessIo, SchemaViolationsAreRejected) {
  const std::string maps = R"("scenario": {"maps": [{}]})";
  EXPECT_THROW(h::parse_experiment(R"({"seeds": [1], "outlier_rates": [0.3], "bogus": 1, )" + maps + "}"),
               h::ConfigError);
  EXPECT_THROW(h::parse_experiment(R"({"seeds": [1], "outlier_rates": [0.3], "pipeline": {"filter": {"windw": 3}}, )" +
                                   maps + "}"),
               h::ConfigError);
  EXPECT_THROW(h::parse_experiment(R"({"seeds": "1", "outlier_rates": [0.3], )" + maps + "}"), h::ConfigError);
  EXPECT_THROW(h::parse_experiment(R"({"seeds": [], "outlier_rates": [0.3], )" + maps + "}"), h::ConfigError);
  EXPECT_THROW(h::parse_experiment(R"({"seeds": [1], "outlier_rates": [], )" + maps + "}"), h::ConfigError);
  EXPECT_THROW(h::parse_experiment(R"({"seeds": [1], "outlier_rates": [1.2], )" + maps + "}"), h::ConfigError);
  EXPECT_THROW(h::parse_experiment(R"({"seeds": [1], "outlier_rates": [0.3], "scenario": {"maps": []}})"),
               h::ConfigError);
  EXPECT_THROW(h::parse_experiment(R"({"seeds": [1], "outlier_rates": [0.3], "pipeline": {"mode": "x"}, )" + maps +
                                   "}"),
               h::ConfigError);
  EXPECT_THROW(h::parse_experiment("{not json"), h::ConfigError);
  EXPECT_THROW(h::parse_match_bench(R"({"cases": []})"), h::ConfigError);
  EXPECT_NO_THROW(h::parse_init_bench(R"({"cases": [{"n": 26, "inlier_rate": 0.82}], "repeats": 3})"));
}

TEST(HarnessIo, ScenarioRoundTripReproducesRun) {
  const sim::Scenario sc = sim::generate_scenario(small_scenario(4.0));
  const fs::path path = scratch_dir("scenario.json");
  h::save_scenario(sc, path);
  const sim::Scenario back = h::load_scenario(path);
  EXPECT_EQ(h::dump_scenario(back), h::dump_scenario(sc));
  EXPECT_EQ(pose_log_text(h::localize(back, {})), pose_log_text(h::localize(sc, {})));
  fs::remove(path);

  EXPECT_THROW(h::parse_scenario("{}"), ParseError);
  EXPECT_THROW(h::parse_scenario(R"({"format": "vilo-scenario", "version": 99})"), ParseError);
}

TEST(HarnessIo, PoseLogRoundTrip) {
  const sim::Scenario sc = sim::generate_scenario(small_scenario(3.0));
  const h::RunLog log = h::localize(sc, {});
  std::stringstream ss;
  h::write_pose_log_jsonl(ss, log.poses);
  const auto back = h::read_pose_log_jsonl(ss);
  ASSERT_EQ(back.size(), log.poses.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    EXPECT_EQ(back[i].timestamp, log.poses[i].timestamp);
    EXPECT_EQ(back[i].map_id, log.poses[i].map_id);
    EXPECT_EQ(back[i].map_T_imu.translation, log.poses[i].map_T_imu.translation);
    EXPECT_EQ(back[i].local_T_imu.rotation.jpl(), log.poses[i].local_T_imu.rotation.jpl());
  }
  std::ostringstream csv;
  h::write_pose_log_csv(csv, log.poses);
  const std::string text = csv.str();
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), static_cast<long>(log.poses.size() + 1));

  std::istringstream bad("{\"t\": 1}\n");
  EXPECT_THROW(h::read_pose_log_jsonl(bad), ParseError);
}

TEST(Bench, InitBenchSmallCaseIsExactAndRepeatable) {
  h::InitBenchConfig cfg;
  cfg.cases = {{30, 0.7}};
  cfg.trials = 5;
  cfg.repeats = 3;
  const auto res = h::init_bench(cfg);
  ASSERT_EQ(res.size(), 1u);
  EXPECT_EQ(res[0].trials, 5);
  EXPECT_EQ(res[0].successes, 5);
  EXPECT_TRUE(res[0].bit_identical);
  EXPECT_EQ(res[0].max_repeat_std, 0.0);
}

TEST(Bench, MatchBenchWithCertainSuccess) {
  h::MatchBenchConfig cfg;
  cfg.cases = {{1.0, 2, 1}};
  cfg.trials = 20;
  const auto res = h::match_bench(cfg);
  EXPECT_EQ(res[0].predicted, 1.0);
  EXPECT_EQ(res[0].empirical, 1.0);
}
