#pragma once

#include <cstdio>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mcs_calib/calibrator.hpp"
#include "mcs_calib/camera.hpp"
#include "mcs_calib/dataset.hpp"
#include "mcs_calib/error.hpp"
#include "mcs_calib/measurement.hpp"
#include "mcs_calib/target.hpp"

namespace mcs_calib {

/// Noise levels the data was generated with, echoed next to the errors.
struct NoiseAssumption {
  std::optional<double> lidar_range_sigma_m;
  std::optional<double> pixel_sigma_px;
  std::string source = "unspecified";
};

struct ReportInputs {
  const CalibrationResult* result = nullptr;
  std::vector<OuterTrace> trace;
  NoiseAssumption noise;
  std::optional<std::map<std::string, Pose>> truth;
  // Only needed for overlays.
  const std::vector<MeasurementSet>* measurements = nullptr;
  const std::map<std::string, TargetSpec>* specs = nullptr;
  const std::map<std::string, CameraIntrinsics>* intrinsics = nullptr;
};

inline json pose_error_to_json(const PoseError& e) {
  return {{"translation_m", e.translational_m}, {"rotation_deg", e.rotational_deg}};
}

inline json outer_trace_to_json(const OuterTrace& t) {
  return {{"iteration", t.iteration},
          {"cost", t.cost},
          {"initial_cost", t.initial_cost},
          {"max_translation_delta_m", t.max_translation_delta_m},
          {"max_rotation_delta_deg", t.max_rotation_delta_deg},
          {"pairs", t.pairs},
          {"stage", t.sliding ? "sliding" : "full"},
          {"inner_iterations", t.inner_iterations}};
}

inline json report_to_json(const ReportInputs& in) {
  if (!in.result) throw CalibError(ErrorCode::kConfigError, "report needs a calibration result");
  const CalibrationState& st = in.result->state;
  const ErrorReport& er = in.result->errors;
  json j;
  json sensors = json::object();
  for (const auto& [id, pose] : st.extrinsics) {
    json s;
    const auto it = er.sensors.find(id);
    const bool unconstrained =
        std::find(st.unconstrained_sensors.begin(), st.unconstrained_sensors.end(), id) != st.unconstrained_sensors.end() ||
        (it != er.sensors.end() && !it->second.constrained);
    if (it != er.sensors.end()) s["kind"] = to_string(it->second.kind);
    if (unconstrained) {
      s["status"] = "unconstrained";
    } else {
      s["status"] = "estimated";
      s["extrinsic"] = vec6_to_json(to_vec6(pose));
      s["extrinsic_pose"] = pose_to_json(pose);
    }
    if (it != er.sensors.end()) {
      const SensorErrors& e = it->second;
      const char* key = e.kind == SensorKind::kLidar ? "euclidean_m" : "reprojection_px";
      s["residual"] = {{"metric", key}, {"count", e.residual.count}, {"mean", e.residual.mean}, {"std", e.residual.stddev}};
      if (e.kind == SensorKind::kCamera) s["approx_rotation_deg"] = e.approx_rotation_deg;
    }
    if (in.truth && !unconstrained) {
      const auto t = in.truth->find(id);
      if (t != in.truth->end()) {
        s["pose_error"] = pose_error_to_json(pose_error(pose, t->second));
        s["relative_pose_error"] = pose_error_to_json(relative_pose_error(pose, t->second));
      }
    }
    sensors[id] = std::move(s);
  }
  j["sensors"] = std::move(sensors);
  json targets = json::object();
  for (const auto& [id, pose] : st.target_alignments) {
    targets[id] = {{"alignment", vec6_to_json(to_vec6(pose))}, {"alignment_pose", pose_to_json(pose)}};
  }
  j["target_alignments"] = std::move(targets);
  j["errors"] = {{"mean_euclidean_m", er.mean_euclidean_m},
                 {"mean_reprojection_px", er.mean_reprojection_px},
                 {"residual_count", er.residuals.size()},
                 {"dropped_behind_camera", er.dropped_behind_camera}};
  json noise = {{"source", in.noise.source}};
  noise["lidar_range_sigma_m"] = in.noise.lidar_range_sigma_m ? json(*in.noise.lidar_range_sigma_m) : json(nullptr);
  noise["pixel_sigma_px"] = in.noise.pixel_sigma_px ? json(*in.noise.pixel_sigma_px) : json(nullptr);
  j["noise_assumption"] = std::move(noise);
  j["convergence"] = {{"converged", st.converged},
                      {"correspondence_fixed_point", st.correspondence_fixed_point},
                      {"limit_cycle", st.limit_cycle},
                      {"outer_iterations", st.outer_iterations},
                      {"inner_iterations", st.inner_iterations},
                      {"cost_history", st.cost_history}};
  json trace = json::array();
  for (const auto& t : in.trace) trace.push_back(outer_trace_to_json(t));
  j["trace"] = std::move(trace);
  return j;
}

/// One row per accepted keypoint residual; r2 is empty for cameras.
inline std::string residuals_csv(const ErrorReport& er) {
  std::string s = "t,sensor,target,kind,measured_index,keypoint_index,r0,r1,r2,norm\n";
  char buf[128];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return std::string(buf);
  };
  for (const auto& r : er.residuals) {
    s += num(r.timestamp) + "," + r.sensor_id + "," + r.target_id + "," + to_string(r.kind) + "," +
         std::to_string(r.measured_index) + "," + std::to_string(r.keypoint_index) + "," + num(r.residual[0]) + "," +
         num(r.residual[1]) + "," + (r.residual.size() > 2 ? num(r.residual[2]) : std::string()) + "," + num(r.norm) + "\n";
  }
  return s;
}

/// Projected target outline (or keypoints when there is none) plus detected
/// pixels for one camera measurement.
inline std::string overlay_svg(const MeasurementSet& m, const TargetSpec& spec, const CalibrationState& st,
                               const CameraIntrinsics& c) {
  const Pose loop = st.extrinsics.at(m.sensor_id).inverse() * m.t_mr.inverse() * m.t_mt * st.target_alignment(m.target_id);
  std::string s;
  char buf[256];
  std::snprintf(buf, sizeof(buf),
                "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%d\" height=\"%d\" viewBox=\"0 0 %d %d\">\n", c.width,
                c.height, c.width, c.height);
  s += buf;
  s += "<rect width=\"100%\" height=\"100%\" fill=\"white\" stroke=\"black\"/>\n";
  auto polyline = [&](const std::vector<Vec3>& pts, bool closed) {
    std::string d;
    for (const auto& p : pts) {
      const auto px = project(c, loop * p);
      if (!px) return;
      std::snprintf(buf, sizeof(buf), "%.3f,%.3f ", px->x(), px->y());
      d += buf;
    }
    s += std::string("<") + (closed ? "polygon" : "polyline") + " points=\"" + d +
         "\" fill=\"none\" stroke=\"royalblue\" stroke-width=\"1.5\"/>\n";
  };
  for (const auto& o : spec.outlines) polyline(o, true);
  for (const auto& k : spec.camera_keypoints) {
    const auto px = project(c, loop * k);
    if (!px) continue;
    std::snprintf(buf, sizeof(buf), "<circle cx=\"%.3f\" cy=\"%.3f\" r=\"2\" fill=\"royalblue\"/>\n", px->x(), px->y());
    s += buf;
  }
  for (const auto& p : m.pixels) {
    std::snprintf(buf, sizeof(buf),
                  "<path d=\"M%.3f %.3fl6 6m0 -6l-6 6\" transform=\"translate(-3 -3)\" stroke=\"crimson\" stroke-width=\"1.5\"/>\n",
                  p.x(), p.y());
    s += buf;
  }
  std::snprintf(buf, sizeof(buf), "<text x=\"8\" y=\"18\" font-family=\"monospace\" font-size=\"14\">%s t=%.3f</text>\n",
                m.sensor_id.c_str(), m.timestamp);
  s += buf;
  s += "</svg>\n";
  return s;
}

/// report.json and residuals.csv, plus overlay_<n>.svg per camera measurement
/// when `overlays` is set. Returns the written paths.
inline std::vector<fs::path> write_report(const ReportInputs& in, const fs::path& dir, bool overlays = false) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw CalibError(ErrorCode::kIoError, "cannot create " + dir.string() + ": " + ec.message());
  std::vector<fs::path> written;
  write_file_atomic(dir / "report.json", report_to_json(in).dump(2) + "\n");
  written.push_back(dir / "report.json");
  write_file_atomic(dir / "residuals.csv", residuals_csv(in.result->errors));
  written.push_back(dir / "residuals.csv");
  if (overlays && in.measurements && in.specs && in.intrinsics) {
    std::size_t n = 0;
    for (const auto& m : *in.measurements) {
      if (m.kind != SensorKind::kCamera) continue;
      const auto spec = in.specs->find(m.target_id);
      const auto cam = in.intrinsics->find(m.sensor_id);
      if (spec == in.specs->end() || cam == in.intrinsics->end() || !in.result->state.extrinsics.count(m.sensor_id)) continue;
      const fs::path p = dir / ("overlay_" + std::to_string(n++) + ".svg");
      write_file_atomic(p, overlay_svg(m, spec->second, in.result->state, cam->second));
      written.push_back(p);
    }
  }
  return written;
}

struct LoadedReport {
  std::map<std::string, PoseVec6> extrinsics;
  std::map<std::string, PoseVec6> target_alignments;
  std::vector<std::string> unconstrained;
  bool converged = false;
  json raw;
};

inline LoadedReport load_report(const fs::path& path) {
  LoadedReport r;
  r.raw = read_json_file(path);
  const std::string where = path.filename().string();
  if (!r.raw.contains("sensors") || !r.raw["sensors"].is_object()) detail::parse_fail(where, "missing \"sensors\"");
  for (const auto& [id, s] : r.raw["sensors"].items()) {
    if (s.value("status", "") == "unconstrained") {
      r.unconstrained.push_back(id);
      continue;
    }
    if (!s.contains("extrinsic")) detail::parse_fail(where, "sensor '" + id + "' has no extrinsic");
    r.extrinsics[id] = detail::fixed_vector<6>(s["extrinsic"], where + ".sensors." + id);
  }
  if (r.raw.contains("target_alignments")) {
    for (const auto& [id, t] : r.raw["target_alignments"].items()) {
      r.target_alignments[id] = detail::fixed_vector<6>(t.at("alignment"), where + ".target_alignments." + id);
    }
  }
  if (r.raw.contains("convergence")) r.converged = r.raw["convergence"].value("converged", false);
  return r;
}

/// Pose errors of a saved report against ground-truth extrinsics.
inline std::map<std::string, std::pair<PoseError, PoseError>> compare_report(
    const LoadedReport& r, const std::map<std::string, Pose>& truth) {
  std::map<std::string, std::pair<PoseError, PoseError>> out;
  for (const auto& [id, v] : r.extrinsics) {
    const auto t = truth.find(id);
    if (t == truth.end()) continue;
    const Pose p = from_vec6(v);
    out[id] = {pose_error(p, t->second), relative_pose_error(p, t->second)};
  }
  return out;
}

}  // namespace mcs_calib
