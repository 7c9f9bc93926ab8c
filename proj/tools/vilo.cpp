// Command-line front end for the experiment harness.
//
//   vilo simulate    --config exp.json [--seed S] [--outlier-rate W] --out scenario.json
//   vilo localize    --scenario scenario.json [--config exp.json] --out poses.jsonl [--csv poses.csv]
//   vilo localize    --config exp.json                  (full seed x w_bar sweep)
//   vilo evaluate    --scenario scenario.json --poses poses.jsonl [--map-quality]
//                    [--export-local traj.txt] [--export-map ID traj.txt]
//   vilo evaluate    --est est.txt --gt gt.txt --metric local|map|ate
//   vilo init-bench  [--config bench.json]
//   vilo match-bench [--config bench.json] [--tolerance 0.03]
//   vilo compare     --config exp.json
//
// Exit codes: 0 all checked properties hold, 1 a property failed, 2 usage or
// input error.

#include "vilo/harness.hpp"

#include <CLI11.hpp>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

namespace h = vilo::harness;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw vilo::Error("cannot read " + path);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

double deg(double rad) { return rad * 180.0 / vilo::kPi; }

int cmd_simulate(const std::string& config, std::optional<std::uint64_t> seed, std::optional<double> w,
                 const std::string& out) {
  const h::ExperimentConfig cfg = h::load_experiment(config);
  vilo::sim::ScenarioConfig sc = cfg.scenario;
  sc.seed = seed.value_or(cfg.seeds.front());
  sc.correspondences.outlier_rate = w.value_or(cfg.outlier_rates.front());
  const vilo::sim::Scenario s = vilo::sim::generate_scenario(sc);
  h::save_scenario(s, out);
  std::size_t corrs = 0;
  for (const auto& f : s.frames) corrs += f.correspondences.size();
  std::printf("scenario: %zu frames, %zu imu samples, %zu maps, %zu map correspondences -> %s\n", s.frames.size(),
              s.imu.size(), s.maps.size(), corrs, out.c_str());
  return 0;
}

int cmd_localize_one(const std::string& scenario, const std::string& config, const std::string& out,
                     const std::string& csv) {
  const vilo::sim::Scenario sc = h::load_scenario(scenario);
  h::PipelineConfig pc;
  if (!config.empty()) pc = h::load_experiment(config).pipeline;
  const h::RunLog log = h::localize(sc, pc);
  if (!out.empty()) {
    std::ofstream os(out);
    h::write_pose_log_jsonl(os, log.poses);
  }
  if (!csv.empty()) {
    std::ofstream os(csv);
    h::write_pose_log_csv(os, log.poses);
  }
  std::printf("frames %d, poses %zu, registrations %zu, init failures %zu, wall %.2f s\n", log.frames,
              log.poses.size(), log.registrations.size(), log.init_failures.size(), log.wall_time_s);
  for (const auto& r : log.registrations) {
    std::printf("  map %d registered at t=%.2f: %d/%d inliers, recall %.3f, error %.4f m / %.3f deg\n", r.map_id,
                r.timestamp, r.inliers, r.correspondences, r.inlier_recall, r.error.translation, deg(r.error.rotation));
  }
  for (const auto& f : log.init_failures) std::printf("  init failure: %s\n", f.c_str());
  return log.registrations.empty() ? 1 : 0;
}

int cmd_sweep(const std::string& config) {
  const h::SweepReport rep = h::run_scenario(h::load_experiment(config));
  std::fputs(rep.summary.c_str(), stdout);
  int failed = 0;
  for (const auto& r : rep.runs) failed += !r.ok;
  return failed ? 1 : 0;
}

void export_traj(const vilo::metrics::Trajectory& t, const std::string& path) {
  vilo::metrics::save_trajectory(t, path);
  std::printf("wrote %zu poses to %s\n", t.size(), path.c_str());
}

int cmd_evaluate(const std::string& scenario, const std::string& poses, bool map_quality,
                 const std::string& export_local, const std::vector<std::string>& export_map, const std::string& est,
                 const std::string& gt, const std::string& metric) {
  namespace m = vilo::metrics;
  if (!est.empty() || !gt.empty()) {
    if (est.empty() || gt.empty()) throw CLI::ValidationError("--est and --gt go together");
    const m::Trajectory e = m::load_trajectory(est, "est");
    const m::Trajectory g = m::load_trajectory(gt, "gt");
    double v = 0.0;
    if (metric == "local")
      v = m::local_trajectory_error(e, g);
    else if (metric == "map")
      v = m::map_trajectory_error(e, g);
    else if (metric == "ate")
      v = m::mapping_keyframe_error(e, g);
    else
      throw CLI::ValidationError("--metric must be local, map or ate");
    std::printf("%s %.9g\n", metric.c_str(), v);
    return 0;
  }
  if (scenario.empty() || poses.empty()) throw CLI::ValidationError("need --scenario and --poses, or --est and --gt");
  const vilo::sim::Scenario sc = h::load_scenario(scenario);
  h::RunLog log;
  {
    std::ifstream is(poses);
    if (!is) throw vilo::Error("cannot read " + poses);
    log.poses = h::read_pose_log_jsonl(is);
  }
  const h::RunMetrics rm = h::evaluate_run(sc, log, map_quality);
  std::printf("local_error %.6f\n", rm.local_error);
  for (const auto& [id, st] : rm.map_errors) {
    std::printf("map %d: samples %zu rmse %.6f mean %.6f std %.6f max %.6f q2_rmse %.6f q4_rmse %.6f\n",
                id, st.samples, st.rmse, st.mean, st.std, st.max, st.q2_rmse, st.q4_rmse);
  }
  for (const auto& [id, v] : rm.mapping_keyframe_error) std::printf("map %d keyframe_ate %.6f\n", id, v);
  for (const auto& [id, v] : rm.mapping_point_error) std::printf("map %d point_rmse %.6f\n", id, v);
  if (!export_local.empty()) export_traj(h::local_trajectory(log), export_local);
  if (!export_map.empty()) {
    if (export_map.size() != 2) throw CLI::ValidationError("--export-map takes ID PATH");
    export_traj(h::map_trajectory(log, std::stoi(export_map[0])), export_map[1]);
  }
  return 0;
}

int cmd_init_bench(const std::string& config, double max_seconds) {
  const h::InitBenchConfig cfg = config.empty() ? h::InitBenchConfig{} : h::parse_init_bench(slurp(config));
  bool ok = true;
  std::printf("%6s %6s %7s %8s %8s %10s %10s %9s %9s %5s\n", "N", "w", "trials", "success", "recall", "max_t_m",
              "max_r_deg", "rep_std", "max_ms", "bits");
  for (const auto& r : h::init_bench(cfg)) {
    std::printf("%6d %6.2f %7d %8d %8.4f %10.2e %10.2e %9.1e %9.2f %5s\n", r.c.n, r.c.inlier_rate, r.trials,
                r.successes, r.mean_recall, r.max_translation_error, deg(r.max_rotation_error), r.max_repeat_std,
                1e3 * r.max_wall_time_s, r.bit_identical ? "yes" : "no");
    ok = ok && r.successes == r.trials && r.full_recall == r.trials && r.bit_identical && r.max_repeat_std == 0.0 &&
         r.max_wall_time_s <= max_seconds;
  }
  return ok ? 0 : 1;
}

int cmd_match_bench(const std::string& config, double tolerance) {
  const h::MatchBenchConfig cfg = config.empty() ? h::MatchBenchConfig{} : h::parse_match_bench(slurp(config));
  bool ok = true;
  std::printf("%6s %3s %5s %7s %10s %10s %8s %8s\n", "w", "n", "k", "trials", "empirical", "predicted", "diff",
              "time_s");
  for (const auto& r : h::match_bench(cfg)) {
    const double d = r.empirical - r.predicted;
    std::printf("%6.2f %3d %5d %7d %10.4f %10.4f %8.4f %8.3f\n", r.c.inlier_rate, r.c.sample_size, r.c.iterations,
                r.trials, r.empirical, r.predicted, d, r.wall_time_s);
    ok = ok && std::abs(d) <= tolerance;
  }
  return ok ? 0 : 1;
}

int cmd_compare(const std::string& config) {
  const h::CompareReport rep = h::compare_modes(h::load_experiment(config));
  std::fputs(rep.summary.c_str(), stdout);
  int failed = 0;
  for (const auto& m : rep.modes) failed += m.failures;
  return failed ? 1 : 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Map-based visual-inertial localization experiments"};
  app.require_subcommand(1);

  std::string config, scenario, out, csv, poses, export_local, est, gt, metric = "local";
  std::vector<std::string> export_map;
  std::optional<std::uint64_t> seed;
  std::optional<double> outlier_rate;
  bool map_quality = false;
  double tolerance = 0.03, max_seconds = 2.0;

  auto* sim = app.add_subcommand("simulate", "Generate a scenario from an experiment config");
  sim->add_option("--config", config, "Experiment JSON")->required()->check(CLI::ExistingFile);
  sim->add_option("--seed", seed, "Seed (default: first of the config)");
  sim->add_option("--outlier-rate", outlier_rate, "w_bar (default: first of the config)");
  sim->add_option("--out", out, "Scenario JSON to write")->required();

  auto* loc = app.add_subcommand("localize", "Run the filter on a scenario, or a full sweep from a config");
  loc->add_option("--scenario", scenario, "Scenario JSON")->check(CLI::ExistingFile);
  loc->add_option("--config", config, "Experiment JSON (pipeline settings; sweep when no scenario)")
      ->check(CLI::ExistingFile);
  loc->add_option("--out", out, "Pose log, JSON lines");
  loc->add_option("--csv", csv, "Pose log, CSV");

  auto* ev = app.add_subcommand("evaluate", "Score a pose log against its scenario, or two trajectory files");
  ev->add_option("--scenario", scenario, "Scenario JSON")->check(CLI::ExistingFile);
  ev->add_option("--poses", poses, "Pose log, JSON lines")->check(CLI::ExistingFile);
  ev->add_flag("--map-quality", map_quality, "Also score keyframe ATE and ICP point error of each map");
  ev->add_option("--export-local", export_local, "Write the local trajectory in trajectory format");
  ev->add_option("--export-map", export_map, "ID PATH: write the map-frame trajectory of map ID")->expected(2);
  ev->add_option("--est", est, "Estimated trajectory file")->check(CLI::ExistingFile);
  ev->add_option("--gt", gt, "Ground-truth trajectory file")->check(CLI::ExistingFile);
  ev->add_option("--metric", metric, "local, map or ate (with --est/--gt)");

  auto* ib = app.add_subcommand("init-bench", "Deterministic initializer accuracy, recall, repeatability, timing");
  ib->add_option("--config", config, "Bench JSON (default: one case)")->check(CLI::ExistingFile);
  ib->add_option("--max-seconds", max_seconds, "Per-call time limit")->capture_default_str();

  auto* mb = app.add_subcommand("match-bench", "RANSAC success rate against 1-(1-w^n)^k");
  mb->add_option("--config", config, "Bench JSON (default: one case)")->check(CLI::ExistingFile);
  mb->add_option("--tolerance", tolerance, "Allowed |empirical - predicted|")->capture_default_str();

  auto* cmp = app.add_subcommand("compare", "Paired-seed comparison of the modes listed in the config");
  cmp->add_option("--config", config, "Experiment JSON with a modes list")->required()->check(CLI::ExistingFile);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    // --help and --version exit 0, usage errors map to 2
    return app.exit(e) == 0 ? 0 : 2;
  }

  try {
    if (*sim) return cmd_simulate(config, seed, outlier_rate, out);
    if (*loc) {
      if (!scenario.empty()) return cmd_localize_one(scenario, config, out, csv);
      if (config.empty()) throw CLI::ValidationError("localize needs --scenario or --config");
      return cmd_sweep(config);
    }
    if (*ev) return cmd_evaluate(scenario, poses, map_quality, export_local, export_map, est, gt, metric);
    if (*ib) return cmd_init_bench(config, max_seconds);
    if (*mb) return cmd_match_bench(config, tolerance);
    if (*cmp) return cmd_compare(config);
  } catch (const CLI::Error& e) {
    app.exit(e);
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 2;
}
