#pragma once

#include "vilo/error.hpp"
#include "vilo/filter.hpp"
#include "vilo/initializer.hpp"
#include "vilo/metrics.hpp"
#include "vilo/sim.hpp"
#include "vilo/solvers.hpp"

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace vilo::harness {

// ---------------------------------------------------------------------------
// Localization pipeline

enum class Mode {
  kMapAided,   // register every map, then map updates at each query frame
  kLocalOnly,  // register each map once, VIO only afterwards
};

Mode parse_mode(const std::string& name);
std::string to_string(Mode mode);

struct PipelineConfig {
  Mode mode = Mode::kMapAided;
  std::vector<int> map_ids;  // maps the pipeline may use; empty means all
  int num_cameras = 0;       // use cameras with id < num_cameras; 0 means all
  bool cross_map = true;     // attach cross-map links from the scenario association table
  int min_track_length = 3;  // observations before a local feature is used
  // Copy IMU noise densities and rate from the scenario into the filter.
  bool imu_noise_from_scenario = true;
  filter::FilterConfig filter;
  init::InitConfig init;
  solvers::RansacConfig ransac;
};

struct Registration {
  int map_id = 0;
  double timestamp = 0.0;
  int correspondences = 0;
  int inliers = 0;
  double inlier_recall = 0.0;  // ground-truth inliers kept by the initializer
  metrics::PoseError error;    // G_T_I from the initializer vs truth
  double wall_time_s = 0.0;
};

struct MatchRecord {
  int map_id = 0;
  double timestamp = 0.0;
  bool ok = false;
  int correspondences = 0;
  int inliers = 0;
  int true_inliers_kept = 0;
  int outliers_kept = 0;
  metrics::PoseError error;
};

struct RunLog {
  std::vector<filter::PoseRecord> poses;  // one batch per camera frame
  std::vector<Registration> registrations;
  std::vector<std::string> init_failures;
  std::vector<MatchRecord> matches;
  int frames = 0;
  int local_features = 0;
  int map_features = 0;
  int gate_rejections = 0;
  double max_nullspace_residual = 0.0;
  double wall_time_s = 0.0;  // excluded from every serialized log
};

// Runs the filter over the scenario frame by frame. Every logged pose depends
// only on the measurements up to its timestamp.
RunLog localize(const sim::Scenario& scenario, const PipelineConfig& cfg);

// First `fraction` of the camera frames and the IMU readings up to the last of them.
sim::Scenario truncate_scenario(const sim::Scenario& scenario, double fraction);

// ---------------------------------------------------------------------------
// Evaluation

struct MapErrorStats {
  int map_id = 0;
  std::size_t samples = 0;
  double rmse = 0.0;  // no-alignment map-frame error
  double mean = 0.0;
  double std = 0.0;
  double max = 0.0;
  // Error inside the second and fourth run quarters (fractions of the
  // scenario duration). NaN when no sample falls into the quarter.
  double q2_rmse = 0.0;
  double q4_rmse = 0.0;
  double q2_max = 0.0;
  double q4_max = 0.0;
  std::vector<double> times;
  std::vector<double> errors;  // |p_est - p_true| per logged pose
};

struct RunMetrics {
  double local_error = 0.0;  // first-frame aligned
  std::map<int, MapErrorStats> map_errors;
  // Map quality, per map id: keyframe ATE and ICP point RMSE.
  std::map<int, double> mapping_keyframe_error;
  std::map<int, double> mapping_point_error;
};

// Pose log split into trajectories: the local one and one per map.
metrics::Trajectory local_trajectory(const RunLog& log);
metrics::Trajectory map_trajectory(const RunLog& log, int map_id);
// Ground truth sampled at the timestamps of `est`, in GT or map `map_id` frames.
metrics::Trajectory truth_trajectory(const sim::Scenario& scenario, const metrics::Trajectory& est);
metrics::Trajectory truth_in_map(const sim::Scenario& scenario, const metrics::Trajectory& est, int map_id);

RunMetrics evaluate_run(const sim::Scenario& scenario, const RunLog& log, bool include_map_quality = false);

// ---------------------------------------------------------------------------
// Experiments

struct ModeSpec {
  std::string name;
  Mode mode = Mode::kMapAided;
  std::vector<int> map_ids;
  int num_cameras = 0;
};

struct ExperimentConfig {
  std::string name = "experiment";
  std::filesystem::path output_dir;  // empty: nothing written
  std::vector<std::uint64_t> seeds{1};
  std::vector<double> outlier_rates{0.3};  // w_bar sweep, overrides the scenario value
  sim::ScenarioConfig scenario;
  PipelineConfig pipeline;
  std::vector<ModeSpec> modes;  // compare only
};

struct RunResult {
  std::uint64_t seed = 0;
  double outlier_rate = 0.0;
  std::string mode;
  bool ok = false;
  std::string failure;
  RunLog log;
  RunMetrics metrics;
};

struct SweepReport {
  std::vector<RunResult> runs;  // sorted by (seed, outlier rate, mode)
  std::string summary;          // human-readable table
};

// Every (seed, w_bar) pair with the pipeline config. A failed run is recorded
// and the sweep continues. Writes the config snapshot, per-run pose logs,
// runs.csv and summary.txt when output_dir is set.
SweepReport run_scenario(const ExperimentConfig& cfg);

struct ModeSummary {
  std::string name;
  int runs = 0;
  int failures = 0;
  double mean_error = 0.0;  // over runs of the per-run mean map-frame error
  double mean_std = 0.0;    // over runs of the per-run error std
};

struct CompareReport {
  std::vector<RunResult> runs;
  std::vector<ModeSummary> modes;
  std::string summary;
};

// Same scenario per seed for every mode (first w_bar of the sweep).
CompareReport compare_modes(const ExperimentConfig& cfg);

// Per-run scalars used by comparisons: mean and std over all map-frame errors
// of the run, each map evaluated in its own frame.
std::pair<double, double> run_error_mean_std(const RunResult& run);

// ---------------------------------------------------------------------------
// Solver benches on single-frame synthetic problems

struct InitCase {
  int n = 50;                 // correspondences
  double inlier_rate = 0.6;   // w
};

struct InitBenchConfig {
  std::vector<InitCase> cases{{50, 0.6}};
  int trials = 20;         // random instances per case
  int repeats = 1;         // identical re-runs per instance
  double pixel_sigma = 1.0;
  std::uint64_t seed = 1;
  double success_translation = 0.05;  // m
  double success_rotation = 0.5 * kPi / 180.0;
  init::InitConfig init;
};

struct InitCaseResult {
  InitCase c;
  int trials = 0;
  int successes = 0;
  int failures = 0;          // exceptions
  int full_recall = 0;       // instances keeping every true inlier
  double mean_recall = 0.0;
  double max_repeat_std = 0.0;  // largest per-instance std over repeats (m, rad mixed)
  bool bit_identical = true;
  double max_wall_time_s = 0.0;
  double max_translation_error = 0.0;
  double max_rotation_error = 0.0;
};

std::vector<InitCaseResult> init_bench(const InitBenchConfig& cfg);

struct MatchCase {
  double inlier_rate = 0.5;  // w
  int sample_size = 2;       // n
  int iterations = 10;       // k
};

struct MatchBenchConfig {
  std::vector<MatchCase> cases{{0.5, 2, 10}};
  int trials = 1000;
  int correspondences = 300;
  double pixel_sigma = 0.0;
  std::uint64_t seed = 1;
  double success_translation = 0.05;
  double success_rotation = 0.5 * kPi / 180.0;
};

struct MatchCaseResult {
  MatchCase c;
  int trials = 0;
  int successes = 0;
  double empirical = 0.0;
  double predicted = 0.0;  // 1 - (1 - w^n)^k
  double wall_time_s = 0.0;
};

std::vector<MatchCaseResult> match_bench(const MatchBenchConfig& cfg);

// ---------------------------------------------------------------------------
// Serialization, see docs/formats.md

// Schema-checked JSON. Unknown keys and wrong types raise ConfigError.
class ConfigError : public Error {
 public:
  using Error::Error;
};

ExperimentConfig load_experiment(const std::filesystem::path& path);
ExperimentConfig parse_experiment(const std::string& json_text);
// Full config with every default filled in.
std::string dump_experiment(const ExperimentConfig& cfg);

InitBenchConfig parse_init_bench(const std::string& json_text);
MatchBenchConfig parse_match_bench(const std::string& json_text);

void save_scenario(const sim::Scenario& scenario, const std::filesystem::path& path);
sim::Scenario load_scenario(const std::filesystem::path& path);
std::string dump_scenario(const sim::Scenario& scenario);
sim::Scenario parse_scenario(const std::string& json_text);

// Pose log: one JSON object per line, or CSV with a header row.
void write_pose_log_jsonl(std::ostream& os, const std::vector<filter::PoseRecord>& poses);
void write_pose_log_csv(std::ostream& os, const std::vector<filter::PoseRecord>& poses);
std::vector<filter::PoseRecord> read_pose_log_jsonl(std::istream& is);

}  // namespace vilo::harness
