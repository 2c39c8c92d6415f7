#pragma once

#include <cstdlib>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "mcs_calib/mcs_calib.hpp"

namespace mcs_calib::cli {

enum ExitCode : int { kOk = 0, kFailure = 1, kConfig = 2, kNotConverged = 3 };

/// Exit status for a library error: bad or missing inputs are configuration
/// problems, everything else is a run failure.
inline int exit_code_for(ErrorCode c) {
  switch (c) {
    case ErrorCode::kParseError:
    case ErrorCode::kNonMonotonicTimestamps:
    case ErrorCode::kUnknownFrame:
    case ErrorCode::kSensorOutsideMcsSpan:
    case ErrorCode::kIoError:
    case ErrorCode::kConfigError:
    case ErrorCode::kDegenerateParams:
    case ErrorCode::kEmptyStream:
      return kConfig;
    default:
      return kFailure;
  }
}

/// Command-line overrides; unset fields leave the config file value alone.
struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<double> lidar_noise;
  std::optional<double> pixel_noise;
  std::optional<double> max_linear_velocity;
  std::optional<double> max_angular_velocity;
  std::optional<double> crop_padding;
  std::optional<int> count;
  std::optional<int> threads;
  bool no_te = false;
};

/// Overrides are applied to the raw JSON before parsing, so the effective
/// config is exactly what gets echoed.
inline void apply_overrides(json& j, const Overrides& o, bool scenario) {
  if (o.seed) j["seed"] = *o.seed;
  if (o.max_linear_velocity) j["gates"]["max_linear_velocity"] = *o.max_linear_velocity;
  if (o.max_angular_velocity) j["gates"]["max_angular_velocity"] = *o.max_angular_velocity;
  if (o.crop_padding) j["gates"]["crop_padding"] = *o.crop_padding;
  if (o.no_te) j["solver"]["estimate_te"] = false;
  if (o.threads) j["solver"]["threads"] = *o.threads;
  if (scenario) {
    if (o.lidar_noise) j["lidar"]["range_noise"] = *o.lidar_noise;
    if (o.pixel_noise) j["camera"]["pixel_noise"] = *o.pixel_noise;
    if (o.count) {
      j["placements"]["count"] = *o.count;
      if (j["placements"].contains("poses")) j["placements"].erase("poses");
    }
  }
}

inline json read_config(const fs::path& p) {
  if (!fs::exists(p)) throw CalibError(ErrorCode::kConfigError, "config file not found: " + p.string());
  try {
    return read_json_file(p);
  } catch (const CalibError& e) {
    throw CalibError(ErrorCode::kConfigError, e.what());
  }
}

inline void make_out_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw CalibError(ErrorCode::kIoError, "cannot create " + dir.string() + ": " + ec.message());
}

inline void setup_logging() {
  auto logger = spdlog::get("calib");
  if (!logger) {
    logger = spdlog::stderr_color_mt("calib");
    spdlog::set_default_logger(logger);
  }
  logger->set_pattern("%Y-%m-%dT%H:%M:%S.%e level=%l %v");
  const char* env = std::getenv("CALIB_LOG");
  const std::string lvl = env ? env : "info";
  if (lvl == "error") {
    logger->set_level(spdlog::level::err);
  } else if (lvl == "debug") {
    logger->set_level(spdlog::level::debug);
  } else {
    logger->set_level(spdlog::level::info);
  }
}

inline Dataset load_dataset_checked(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw CalibError(ErrorCode::kConfigError, "dataset directory not found: " + dir.string());
  return load_dataset(dir);
}

inline int cmd_simulate(const fs::path& config, const fs::path& out, const Overrides& o) {
  json j = read_config(config);
  apply_overrides(j, o, true);
  const ScenarioConfig sc = parse_scenario(j, config.parent_path());
  spdlog::info("event=simulate sensors={} targets={} seed={}", sc.sensors.size(), sc.targets.size(), sc.seed);
  const Simulation sim = simulate(sc);
  make_out_dir(out);
  write_simulation(sim, out);
  write_file_atomic(out / "effective_config.json", j.dump(2) + "\n");
  std::size_t scans = 0, dets = 0;
  for (const auto& [id, v] : sim.dataset.scans) scans += v.size();
  for (const auto& [id, v] : sim.dataset.detections) dets += v.size();
  spdlog::info("event=simulate_done out={} instants={} scans={} detections={}", out.string(), sim.ledger.instants.size(),
               scans, dets);
  return kOk;
}

inline RunConfig load_run(const fs::path& config, const Overrides& o, json& effective) {
  effective = read_config(config);
  apply_overrides(effective, o, false);
  return parse_run_config(effective, config.parent_path());
}

inline int cmd_extract(const fs::path& config, const fs::path& data, const fs::path& out, const Overrides& o) {
  json eff;
  const RunConfig cfg = load_run(config, o, eff);
  const Dataset ds = load_dataset_checked(data);
  const ExtractionResult ex =
      extract_all(ds, cfg.robot_frame, cfg.sensors, cfg.targets, cfg.initial_extrinsics(), cfg.gates);
  make_out_dir(out);
  write_file_atomic(out / "measurements.jsonl", measurements_jsonl(ex.measurements));
  write_file_atomic(out / "extraction_log.csv", extraction_log_csv(ex.skipped));
  write_file_atomic(out / "effective_config.json", eff.dump(2) + "\n");
  spdlog::info("event=extract_done accepted={} skipped={}", ex.measurements.size(), ex.skipped.size());
  return kOk;
}

/// Noise levels and truth come from a simulator ledger next to the data.
inline void read_ledger(const fs::path& path, ReportInputs& in) {
  const json l = read_json_file(path);
  in.truth = ledger_extrinsics(l);
  if (l.contains("noise")) {
    in.noise.lidar_range_sigma_m = l["noise"].value("lidar_range_sigma_m", 0.0);
    in.noise.pixel_sigma_px = l["noise"].value("pixel_sigma_px", 0.0);
    in.noise.source = "simulation ledger " + path.filename().string();
  }
}

inline int cmd_calibrate(const fs::path& config, const fs::path& data, const fs::path& out,
                         const std::optional<fs::path>& measurements_path, const std::optional<fs::path>& ledger,
                         bool overlays, const Overrides& o) {
  json eff;
  const RunConfig cfg = load_run(config, o, eff);
  ExtractionResult ex;
  if (measurements_path) {
    ex.measurements = load_measurements(*measurements_path);
  } else {
    const Dataset ds = load_dataset_checked(data);
    ex = extract_all(ds, cfg.robot_frame, cfg.sensors, cfg.targets, cfg.initial_extrinsics(), cfg.gates);
    spdlog::info("event=extract_done accepted={} skipped={}", ex.measurements.size(), ex.skipped.size());
  }
  ReportInputs in;
  const fs::path ledger_path = ledger ? *ledger : data / "ledger.json";
  if (ledger || (!data.empty() && fs::exists(ledger_path))) read_ledger(ledger_path, in);

  const auto specs = cfg.spec_map();
  const auto intr = cfg.intrinsics();
  const CalibrationResult res = calibrate(ex.measurements, specs, initial_state(cfg), cfg.solver, intr, [&](const OuterTrace& t) {
    in.trace.push_back(t);
    std::cerr << outer_trace_to_json(t).dump() << "\n";
  });
  in.result = &res;
  in.measurements = &ex.measurements;
  in.specs = &specs;
  in.intrinsics = &intr;

  make_out_dir(out);
  write_report(in, out, overlays);
  if (!measurements_path) write_file_atomic(out / "extraction_log.csv", extraction_log_csv(ex.skipped));
  write_file_atomic(out / "effective_config.json", eff.dump(2) + "\n");
  spdlog::info("event=calibrate_done converged={} outer_iterations={} mean_euclidean_m={:.6g} mean_reprojection_px={:.6g}",
               res.state.converged, res.state.outer_iterations, res.errors.mean_euclidean_m,
               res.errors.mean_reprojection_px);
  for (const auto& id : res.state.unconstrained_sensors) spdlog::warn("event=unconstrained sensor={}", id);
  if (!res.state.converged) {
    spdlog::error("event=not_converged max_outer_iterations={} results written to {}", cfg.solver.max_outer_iterations,
                  out.string());
    return kNotConverged;
  }
  return kOk;
}

inline std::vector<int> parse_counts(const std::string& s) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stoi(tok, &used));
      if (used != tok.size()) throw std::invalid_argument(tok);
    } catch (const std::exception&) {
      throw CalibError(ErrorCode::kConfigError, "--counts expects comma-separated integers, got '" + s + "'");
    }
  }
  return out;
}

inline int cmd_study(const fs::path& config, const fs::path& out, const std::string& counts, int trials, double max_t,
                     double max_r, int threads, const Overrides& o) {
  json j = read_config(config);
  Overrides so = o;
  so.threads.reset();
  so.count.reset();
  apply_overrides(j, so, true);
  const ScenarioConfig sc = parse_scenario(j, config.parent_path());
  const std::vector<int> c = parse_counts(counts);
  spdlog::info("event=study counts={} trials={} threads={}", counts, trials, threads);
  const StudyResult r = run_perturbation_study(sc, trials, max_t, max_r, c, threads);
  make_out_dir(out);
  write_file_atomic(out / "study.csv", study_csv(r));
  write_file_atomic(out / "study_summary.csv", study_summary_csv(summarize_study(r)));
  json eff = j;
  eff["study"] = {{"counts", c}, {"trials", trials}, {"max_translation", max_t}, {"max_rotation_deg", max_r}};
  write_file_atomic(out / "effective_config.json", eff.dump(2) + "\n");
  std::size_t failed = 0;
  for (const auto& row : r.rows) {
    if (!row.error.empty()) {
      ++failed;
      spdlog::warn("event=trial_failed count={} trial={} error=\"{}\"", row.count, row.trial, row.error);
    }
  }
  spdlog::info("event=study_done rows={} failed={}", r.rows.size(), failed);
  return kOk;
}

inline int cmd_report(const fs::path& report, const std::optional<fs::path>& ledger, const std::optional<fs::path>& out) {
  if (!fs::exists(report)) throw CalibError(ErrorCode::kConfigError, "report not found: " + report.string());
  const LoadedReport r = load_report(report);
  json cmp = json::object();
  std::cout << "sensor        status        extrinsic [rx ry rz tx ty tz]\n";
  for (const auto& [id, v] : r.extrinsics) {
    std::printf("%-13s estimated     [%.6g %.6g %.6g %.6g %.6g %.6g]\n", id.c_str(), v[0], v[1], v[2], v[3], v[4], v[5]);
  }
  for (const auto& id : r.unconstrained) std::printf("%-13s unconstrained\n", id.c_str());
  if (ledger) {
    const auto errs = compare_report(r, ledger_extrinsics(read_json_file(*ledger)));
    for (const auto& [id, e] : errs) {
      std::printf("%-13s pose_error %.6g mm %.6g deg  relative %.6g mm %.6g deg\n", id.c_str(),
                  1000.0 * e.first.translational_m, e.first.rotational_deg, 1000.0 * e.second.translational_m,
                  e.second.rotational_deg);
      cmp[id] = {{"pose_error", pose_error_to_json(e.first)}, {"relative_pose_error", pose_error_to_json(e.second)}};
    }
  }
  std::printf("converged: %s\n", r.converged ? "yes" : "no");
  if (out) {
    make_out_dir(*out);
    write_file_atomic(*out / "comparison.json", cmp.dump(2) + "\n");
  }
  return kOk;
}

/// Entry point shared by the executable and the tests.
inline int run(int argc, const char* const* argv) {
  setup_logging();
  CLI::App app{"Extrinsic lidar/camera calibration against a motion capture system"};
  app.require_subcommand(1);

  Overrides o;
  std::string config, data, out, measurements, ledger, counts = "5,15,30", report_path;
  int trials = 5;
  int threads = default_thread_count();
  double max_t = 0.03, max_r = 5.0;
  bool overlays = false;

  auto add_common = [&](CLI::App* c) {
    c->add_option("-c,--config", config, "config file")->required();
    c->add_option("-o,--out", out, "output directory")->required();
    c->add_option("--seed", o.seed, "override the rng seed");
    c->add_option("--max-speed", o.max_linear_velocity, "override the linear velocity gate (m/s)");
    c->add_option("--max-angular-speed", o.max_angular_velocity, "override the angular velocity gate (rad/s)");
    c->add_option("--crop-padding", o.crop_padding, "override the crop padding (m)");
    c->add_flag("--no-te", o.no_te, "freeze target alignments at identity");
    c->add_option("--threads", threads, "worker threads")->check(CLI::PositiveNumber);
  };
  auto add_noise = [&](CLI::App* c) {
    c->add_option("--lidar-noise", o.lidar_noise, "override lidar range noise sigma (m)");
    c->add_option("--pixel-noise", o.pixel_noise, "override pixel noise sigma (px)");
  };

  CLI::App* sim = app.add_subcommand("simulate", "generate a synthetic dataset and ground-truth ledger");
  add_common(sim);
  add_noise(sim);
  sim->add_option("--count", o.count, "number of target placements");

  CLI::App* ext = app.add_subcommand("extract", "extract per-instant target measurements");
  add_common(ext);
  ext->add_option("-d,--data", data, "dataset directory")->required();

  CLI::App* cal = app.add_subcommand("calibrate", "extract and calibrate, writing report.json");
  add_common(cal);
  cal->add_option("-d,--data", data, "dataset directory");
  cal->add_option("-m,--measurements", measurements, "measurements.jsonl from extract (skips extraction)");
  cal->add_option("--ledger", ledger, "ground-truth ledger for pose errors (default: <data>/ledger.json if present)");
  cal->add_flag("--overlays", overlays, "write overlay_<n>.svg per camera measurement");

  CLI::App* st = app.add_subcommand("study", "perturbation study over measurement counts");
  add_common(st);
  add_noise(st);
  st->add_option("--counts", counts, "comma-separated measurement counts");
  st->add_option("--trials", trials, "trials per count")->check(CLI::Range(2, 100000));
  st->add_option("--max-trans", max_t, "max initial translation perturbation (m)");
  st->add_option("--max-rot", max_r, "max initial rotation perturbation (deg)");

  CLI::App* rep = app.add_subcommand("report", "print a saved report, optionally against a ledger");
  rep->add_option("-r,--report", report_path, "report.json")->required();
  rep->add_option("--ledger", ledger, "ground-truth ledger");
  rep->add_option("-o,--out", out, "write comparison.json here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfig;
  }

  try {
    if (*sim || *ext || *cal) o.threads = threads;
    const auto opt_path = [](const std::string& s) { return s.empty() ? std::nullopt : std::optional<fs::path>(s); };
    if (*sim) return cmd_simulate(config, out, o);
    if (*ext) return cmd_extract(config, data, out, o);
    if (*cal) {
      if (data.empty() && measurements.empty()) throw CalibError(ErrorCode::kConfigError, "calibrate needs --data or --measurements");
      return cmd_calibrate(config, data, out, opt_path(measurements), opt_path(ledger), overlays, o);
    }
    if (*st) return cmd_study(config, out, counts, trials, max_t, max_r, threads, o);
    if (*rep) return cmd_report(report_path, opt_path(ledger), opt_path(out));
  } catch (const CalibError& e) {
    spdlog::error("{}", e.what());
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    spdlog::error("unexpected: {}", e.what());
    return kFailure;
  }
  return kFailure;
}

}  // namespace mcs_calib::cli
