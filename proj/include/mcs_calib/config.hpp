#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mcs_calib/calibrator.hpp"
#include "mcs_calib/dataset.hpp"
#include "mcs_calib/error.hpp"
#include "mcs_calib/extraction.hpp"
#include "mcs_calib/target.hpp"

namespace mcs_calib {

/// Everything `extract` and `calibrate` need besides the dataset.
struct RunConfig {
  std::string robot_frame = "robot";
  std::uint64_t seed = 0;
  std::vector<SensorSetup> sensors;
  std::vector<TargetSetup> targets;
  GateSettings gates;
  SolverSettings solver;

  std::map<std::string, TargetSpec> spec_map() const {
    std::map<std::string, TargetSpec> m;
    for (const auto& t : targets) m[t.id] = t.spec;
    return m;
  }
  std::map<std::string, CameraIntrinsics> intrinsics() const {
    std::map<std::string, CameraIntrinsics> m;
    for (const auto& s : sensors) {
      if (s.kind == SensorKind::kCamera) m[s.id] = s.intrinsics;
    }
    return m;
  }
  std::map<std::string, Pose> initial_extrinsics() const {
    std::map<std::string, Pose> m;
    for (const auto& s : sensors) m[s.id] = s.initial_extrinsic;
    return m;
  }
};

namespace config_detail {

[[noreturn]] inline void fail(const std::string& where, const std::string& what) {
  throw CalibError(ErrorCode::kConfigError, where + ": " + what);
}

/// Rejects keys outside `allowed` so typos do not silently fall back to defaults.
inline void check_keys(const json& j, const std::string& where, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) fail(where, "expected an object");
  const std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& [k, v] : j.items()) {
    if (!ok.count(k)) fail(where, "unknown key \"" + k + "\"");
  }
}

inline double number(const json& j, const char* key, double fallback, const std::string& where) {
  if (!j.contains(key)) return fallback;
  if (!j[key].is_number()) fail(where, std::string("\"") + key + "\" must be a number");
  return j[key].get<double>();
}

inline int integer(const json& j, const char* key, int fallback, const std::string& where) {
  if (!j.contains(key)) return fallback;
  if (!j[key].is_number_integer()) fail(where, std::string("\"") + key + "\" must be an integer");
  return j[key].get<int>();
}

inline bool boolean(const json& j, const char* key, bool fallback, const std::string& where) {
  if (!j.contains(key)) return fallback;
  if (!j[key].is_boolean()) fail(where, std::string("\"") + key + "\" must be true or false");
  return j[key].get<bool>();
}

inline std::string string(const json& j, const char* key, const std::string& where) {
  if (!j.contains(key) || !j[key].is_string()) fail(where, std::string("missing string \"") + key + "\"");
  return j[key].get<std::string>();
}

}  // namespace config_detail

/// Accepts {"q": [w,x,y,z], "p": [x,y,z]} or a 6-vector [rx,ry,rz,tx,ty,tz].
inline Pose pose_from_config(const json& j, const std::string& where) {
  try {
    if (j.is_array()) return from_vec6(detail::fixed_vector<6>(j, where));
    return detail::pose_from_json(j, where);
  } catch (const CalibError& e) {
    throw CalibError(ErrorCode::kConfigError, e.what());
  }
}

inline std::vector<Vec3> points_from_config(const json& j, const std::string& where) {
  try {
    return detail::vector_list<3>(j, where);
  } catch (const CalibError& e) {
    throw CalibError(ErrorCode::kConfigError, e.what());
  }
}

inline json intrinsics_to_json(const CameraIntrinsics& c) {
  return {{"fx", c.fx}, {"fy", c.fy}, {"cx", c.cx}, {"cy", c.cy}, {"k1", c.k1},       {"k2", c.k2},
          {"p1", c.p1}, {"p2", c.p2}, {"width", c.width}, {"height", c.height}};
}

inline CameraIntrinsics intrinsics_from_json(const json& j, const std::string& where) {
  using namespace config_detail;
  check_keys(j, where, {"fx", "fy", "cx", "cy", "k1", "k2", "p1", "p2", "width", "height"});
  CameraIntrinsics c;
  c.fx = number(j, "fx", 0, where);
  c.fy = number(j, "fy", 0, where);
  c.cx = number(j, "cx", 0, where);
  c.cy = number(j, "cy", 0, where);
  c.k1 = number(j, "k1", 0, where);
  c.k2 = number(j, "k2", 0, where);
  c.p1 = number(j, "p1", 0, where);
  c.p2 = number(j, "p2", 0, where);
  c.width = integer(j, "width", 0, where);
  c.height = integer(j, "height", 0, where);
  if (!c.valid()) fail(where, "intrinsics need positive fx, fy, width, height");
  return c;
}

inline json lidar_fov_to_json(const LidarFov& f) {
  return {{"min_azimuth_deg", f.min_azimuth_deg},     {"max_azimuth_deg", f.max_azimuth_deg},
          {"min_elevation_deg", f.min_elevation_deg}, {"max_elevation_deg", f.max_elevation_deg},
          {"min_range", f.min_range},                 {"max_range", f.max_range}};
}

inline LidarFov lidar_fov_from_json(const json& j, const std::string& where) {
  using namespace config_detail;
  check_keys(j, where,
             {"min_azimuth_deg", "max_azimuth_deg", "min_elevation_deg", "max_elevation_deg", "min_range", "max_range"});
  LidarFov f;
  f.min_azimuth_deg = number(j, "min_azimuth_deg", f.min_azimuth_deg, where);
  f.max_azimuth_deg = number(j, "max_azimuth_deg", f.max_azimuth_deg, where);
  f.min_elevation_deg = number(j, "min_elevation_deg", f.min_elevation_deg, where);
  f.max_elevation_deg = number(j, "max_elevation_deg", f.max_elevation_deg, where);
  f.min_range = number(j, "min_range", f.min_range, where);
  f.max_range = number(j, "max_range", f.max_range, where);
  if (!f.valid()) fail(where, "invalid lidar field of view");
  return f;
}

/// `extrinsic_key` names the pose field ("initial_extrinsic" in run
/// configs, "extrinsic" in scenarios).
inline SensorSetup sensor_from_json(const json& j, const std::string& where, const char* extrinsic_key) {
  using namespace config_detail;
  check_keys(j, where, {"id", "type", "intrinsics", "fov", "angular_resolution_deg", extrinsic_key});
  SensorSetup s;
  s.id = string(j, "id", where);
  const std::string type = string(j, "type", where);
  if (type == "lidar") {
    s.kind = SensorKind::kLidar;
    if (j.contains("fov")) s.lidar_fov = lidar_fov_from_json(j["fov"], where + ".fov");
  } else if (type == "camera") {
    s.kind = SensorKind::kCamera;
    if (!j.contains("intrinsics")) fail(where, "camera '" + s.id + "' needs \"intrinsics\"");
    s.intrinsics = intrinsics_from_json(j["intrinsics"], where + ".intrinsics");
  } else {
    fail(where, "type must be \"lidar\" or \"camera\"");
  }
  s.angular_resolution_deg = number(j, "angular_resolution_deg", s.angular_resolution_deg, where);
  if (!(s.angular_resolution_deg > 0)) fail(where, "angular_resolution_deg must be positive");
  if (j.contains(extrinsic_key)) s.initial_extrinsic = pose_from_config(j[extrinsic_key], where + "." + extrinsic_key);
  return s;
}

inline json sensor_to_json(const SensorSetup& s, const char* extrinsic_key) {
  json j{{"id", s.id}, {"type", to_string(s.kind)}, {"angular_resolution_deg", s.angular_resolution_deg}};
  if (s.kind == SensorKind::kCamera) {
    j["intrinsics"] = intrinsics_to_json(s.intrinsics);
  } else {
    j["fov"] = lidar_fov_to_json(s.lidar_fov);
  }
  j[extrinsic_key] = pose_to_json(s.initial_extrinsic);
  return j;
}

/// Target description. Relative file paths resolve against base_dir.
/// Extra keys listed in `extra` are tolerated (scenario-only fields).
inline TargetSetup target_from_json(const json& j, const std::string& where, const fs::path& base_dir,
                                    std::initializer_list<const char*> extra = {}) {
  using namespace config_detail;
  std::vector<const char*> allowed = {"id",           "frame",         "type",        "params",
                                      "template_density", "template_file", "lidar_keypoints_file",
                                      "lidar_unique", "camera_keypoints", "camera_unique"};
  allowed.insert(allowed.end(), extra.begin(), extra.end());
  if (!j.is_object()) fail(where, "expected an object");
  for (const auto& [k, v] : j.items()) {
    if (std::find_if(allowed.begin(), allowed.end(), [&](const char* a) { return k == a; }) == allowed.end()) {
      fail(where, "unknown key \"" + k + "\"");
    }
  }
  TargetSetup t;
  t.id = string(j, "id", where);
  t.frame = j.contains("frame") ? string(j, "frame", where) : t.id;
  const std::string type = string(j, "type", where);
  const double density = number(j, "template_density", kDefaultTemplateDensity, where);
  const json params = j.contains("params") ? j["params"] : json::object();
  const std::string pw = where + ".params";
  try {
    if (type == "diamond") {
      check_keys(params, pw,
                 {"board_width", "board_height", "rows", "cols", "square_size", "thickness", "corner_keypoints"});
      DiamondParams p;
      p.board_width = number(params, "board_width", p.board_width, pw);
      p.board_height = number(params, "board_height", p.board_height, pw);
      p.rows = integer(params, "rows", p.rows, pw);
      p.cols = integer(params, "cols", p.cols, pw);
      p.square_size = number(params, "square_size", p.square_size, pw);
      p.thickness = number(params, "thickness", p.thickness, pw);
      p.corner_keypoints = boolean(params, "corner_keypoints", p.corner_keypoints, pw);
      t.spec = make_diamond(p, density);
    } else if (type == "cylinder") {
      check_keys(params, pw, {"radius", "length", "rim_samples"});
      CylinderParams p;
      p.radius = number(params, "radius", p.radius, pw);
      p.length = number(params, "length", p.length, pw);
      p.rim_samples = integer(params, "rim_samples", p.rim_samples, pw);
      t.spec = make_cylinder(p, density);
    } else if (type == "custom") {
      if (!j.contains("template_file")) fail(where, "custom target needs \"template_file\"");
      auto resolve = [&](const std::string& f) { return (base_dir / f).string(); };
      std::vector<Vec3> tmpl = load_point_list(resolve(string(j, "template_file", where)));
      std::vector<Vec3> lidar_kp;
      if (j.contains("lidar_keypoints_file")) lidar_kp = load_point_list(resolve(string(j, "lidar_keypoints_file", where)));
      std::vector<Vec3> cam_kp;
      if (j.contains("camera_keypoints")) cam_kp = points_from_config(j["camera_keypoints"], where + ".camera_keypoints");
      t.spec = make_custom(t.id, std::move(tmpl), std::move(lidar_kp), boolean(j, "lidar_unique", false, where),
                           std::move(cam_kp), boolean(j, "camera_unique", false, where));
    } else {
      fail(where, "type must be diamond, cylinder or custom");
    }
  } catch (const CalibError& e) {
    if (e.code() == ErrorCode::kDegenerateParams) throw CalibError(ErrorCode::kConfigError, where + ": " + e.what());
    throw;
  }
  t.spec.name = t.id;
  t.source = j;
  for (const char* k : extra) t.source.erase(k);
  return t;
}

inline GateSettings gates_from_json(const json& j, const std::string& where) {
  using namespace config_detail;
  check_keys(j, where,
             {"fov_fraction", "velocity_dt", "max_linear_velocity", "max_angular_velocity", "crop_padding",
              "cluster_safety_factor", "cluster_tolerance_floor", "min_cluster_size", "w_pose", "w_volume",
              "reject_distance"});
  GateSettings g;
  g.fov_fraction = number(j, "fov_fraction", g.fov_fraction, where);
  g.velocity_dt = number(j, "velocity_dt", g.velocity_dt, where);
  g.max_linear_velocity = number(j, "max_linear_velocity", g.max_linear_velocity, where);
  g.max_angular_velocity = number(j, "max_angular_velocity", g.max_angular_velocity, where);
  g.crop_padding = number(j, "crop_padding", g.crop_padding, where);
  g.cluster_safety_factor = number(j, "cluster_safety_factor", g.cluster_safety_factor, where);
  g.cluster_tolerance_floor = number(j, "cluster_tolerance_floor", g.cluster_tolerance_floor, where);
  const int min_size = integer(j, "min_cluster_size", static_cast<int>(g.min_cluster_size), where);
  if (min_size < 1) fail(where, "min_cluster_size must be at least 1");
  g.min_cluster_size = static_cast<std::size_t>(min_size);
  g.weights.w_pose = number(j, "w_pose", g.weights.w_pose, where);
  g.weights.w_volume = number(j, "w_volume", g.weights.w_volume, where);
  g.reject_distance = number(j, "reject_distance", g.reject_distance, where);
  try {
    g.validate();
  } catch (const CalibError& e) {
    fail(where, e.what());
  }
  return g;
}

inline json gates_to_json(const GateSettings& g) {
  return {{"fov_fraction", g.fov_fraction},
          {"velocity_dt", g.velocity_dt},
          {"max_linear_velocity", g.max_linear_velocity},
          {"max_angular_velocity", g.max_angular_velocity},
          {"crop_padding", g.crop_padding},
          {"cluster_safety_factor", g.cluster_safety_factor},
          {"cluster_tolerance_floor", g.cluster_tolerance_floor},
          {"min_cluster_size", g.min_cluster_size},
          {"w_pose", g.weights.w_pose},
          {"w_volume", g.weights.w_volume},
          {"reject_distance", g.reject_distance}};
}

inline SolverSettings solver_from_json(const json& j, const std::string& where) {
  using namespace config_detail;
  check_keys(j, where,
             {"lm_init_lambda", "lm_lambda_up", "lm_lambda_down", "lm_max_lambda", "max_inner_iterations",
              "inner_cost_tolerance", "max_outer_iterations", "outer_cost_tolerance", "outer_translation_tolerance",
              "outer_rotation_tolerance_deg", "loss", "huber_delta", "estimate_te", "sliding_stage", "te_prior_rotation_weight",
              "te_prior_translation_weight", "analytic_jacobians", "fd_step", "rank_condition_threshold",
              "check_rank", "max_dist_3d", "max_dist_2d", "centroid_refine_iterations", "threads"});
  SolverSettings s;
  s.lm_init_lambda = number(j, "lm_init_lambda", s.lm_init_lambda, where);
  s.lm_lambda_up = number(j, "lm_lambda_up", s.lm_lambda_up, where);
  s.lm_lambda_down = number(j, "lm_lambda_down", s.lm_lambda_down, where);
  s.lm_max_lambda = number(j, "lm_max_lambda", s.lm_max_lambda, where);
  s.max_inner_iterations = integer(j, "max_inner_iterations", s.max_inner_iterations, where);
  s.inner_cost_tolerance = number(j, "inner_cost_tolerance", s.inner_cost_tolerance, where);
  s.max_outer_iterations = integer(j, "max_outer_iterations", s.max_outer_iterations, where);
  s.outer_cost_tolerance = number(j, "outer_cost_tolerance", s.outer_cost_tolerance, where);
  s.outer_translation_tolerance = number(j, "outer_translation_tolerance", s.outer_translation_tolerance, where);
  s.outer_rotation_tolerance_deg = number(j, "outer_rotation_tolerance_deg", s.outer_rotation_tolerance_deg, where);
  if (j.contains("loss")) {
    const std::string loss = string(j, "loss", where);
    if (loss == "none") {
      s.loss = LossKind::kNone;
    } else if (loss == "huber") {
      s.loss = LossKind::kHuber;
    } else {
      fail(where, "loss must be \"none\" or \"huber\"");
    }
  }
  s.huber_delta = number(j, "huber_delta", s.huber_delta, where);
  s.estimate_te = boolean(j, "estimate_te", s.estimate_te, where);
  s.sliding_stage = boolean(j, "sliding_stage", s.sliding_stage, where);
  s.te_prior_rotation_weight = number(j, "te_prior_rotation_weight", s.te_prior_rotation_weight, where);
  s.te_prior_translation_weight = number(j, "te_prior_translation_weight", s.te_prior_translation_weight, where);
  s.analytic_jacobians = boolean(j, "analytic_jacobians", s.analytic_jacobians, where);
  s.fd_step = number(j, "fd_step", s.fd_step, where);
  s.rank_condition_threshold = number(j, "rank_condition_threshold", s.rank_condition_threshold, where);
  s.check_rank = boolean(j, "check_rank", s.check_rank, where);
  s.correspondence_3d.max_distance = number(j, "max_dist_3d", s.correspondence_3d.max_distance, where);
  s.correspondence_2d.max_distance = number(j, "max_dist_2d", s.correspondence_2d.max_distance, where);
  const int refine = integer(j, "centroid_refine_iterations", s.correspondence_3d.refine_iterations, where);
  if (refine < 0) fail(where, "centroid_refine_iterations must be >= 0");
  s.correspondence_3d.refine_iterations = refine;
  s.correspondence_2d.refine_iterations = refine;
  s.threads = integer(j, "threads", s.threads, where);
  try {
    s.validate();
  } catch (const CalibError& e) {
    fail(where, e.what());
  }
  return s;
}

inline json solver_to_json(const SolverSettings& s) {
  return {{"lm_init_lambda", s.lm_init_lambda},
          {"lm_lambda_up", s.lm_lambda_up},
          {"lm_lambda_down", s.lm_lambda_down},
          {"lm_max_lambda", s.lm_max_lambda},
          {"max_inner_iterations", s.max_inner_iterations},
          {"inner_cost_tolerance", s.inner_cost_tolerance},
          {"max_outer_iterations", s.max_outer_iterations},
          {"outer_cost_tolerance", s.outer_cost_tolerance},
          {"outer_translation_tolerance", s.outer_translation_tolerance},
          {"outer_rotation_tolerance_deg", s.outer_rotation_tolerance_deg},
          {"loss", s.loss == LossKind::kHuber ? "huber" : "none"},
          {"huber_delta", s.huber_delta},
          {"estimate_te", s.estimate_te},
          {"sliding_stage", s.sliding_stage},
          {"te_prior_rotation_weight", s.te_prior_rotation_weight},
          {"te_prior_translation_weight", s.te_prior_translation_weight},
          {"analytic_jacobians", s.analytic_jacobians},
          {"fd_step", s.fd_step},
          {"rank_condition_threshold", s.rank_condition_threshold},
          {"check_rank", s.check_rank},
          {"max_dist_3d", s.correspondence_3d.max_distance},
          {"max_dist_2d", s.correspondence_2d.max_distance},
          {"centroid_refine_iterations", s.correspondence_3d.refine_iterations},
          {"threads", s.threads}};
}

inline RunConfig parse_run_config(const json& j, const fs::path& base_dir = ".") {
  using namespace config_detail;
  check_keys(j, "config", {"robot_frame", "seed", "sensors", "targets", "gates", "solver"});
  RunConfig c;
  c.robot_frame = j.contains("robot_frame") ? string(j, "robot_frame", "config") : c.robot_frame;
  if (j.contains("seed")) {
    if (!j["seed"].is_number_unsigned() && !j["seed"].is_number_integer()) fail("config", "seed must be an integer");
    c.seed = j["seed"].get<std::uint64_t>();
  }
  if (!j.contains("sensors") || !j["sensors"].is_array() || j["sensors"].empty()) fail("config", "needs a non-empty \"sensors\" list");
  if (!j.contains("targets") || !j["targets"].is_array() || j["targets"].empty()) fail("config", "needs a non-empty \"targets\" list");
  std::set<std::string> ids;
  for (std::size_t i = 0; i < j["sensors"].size(); ++i) {
    c.sensors.push_back(sensor_from_json(j["sensors"][i], "sensors[" + std::to_string(i) + "]", "initial_extrinsic"));
    if (!ids.insert(c.sensors.back().id).second) fail("config", "duplicate sensor id '" + c.sensors.back().id + "'");
  }
  ids.clear();
  for (std::size_t i = 0; i < j["targets"].size(); ++i) {
    c.targets.push_back(target_from_json(j["targets"][i], "targets[" + std::to_string(i) + "]", base_dir));
    if (!ids.insert(c.targets.back().id).second) fail("config", "duplicate target id '" + c.targets.back().id + "'");
  }
  if (j.contains("gates")) c.gates = gates_from_json(j["gates"], "gates");
  if (j.contains("solver")) c.solver = solver_from_json(j["solver"], "solver");
  return c;
}

inline json run_config_to_json(const RunConfig& c) {
  json sensors = json::array();
  for (const auto& s : c.sensors) sensors.push_back(sensor_to_json(s, "initial_extrinsic"));
  json targets = json::array();
  for (const auto& t : c.targets) targets.push_back(t.source);
  return {{"robot_frame", c.robot_frame}, {"seed", c.seed},           {"sensors", sensors},
          {"targets", targets},           {"gates", gates_to_json(c.gates)}, {"solver", solver_to_json(c.solver)}};
}

inline RunConfig load_run_config(const fs::path& path) {
  json j;
  try {
    j = read_json_file(path);
  } catch (const CalibError& e) {
    throw CalibError(ErrorCode::kConfigError, e.what());
  }
  return parse_run_config(j, path.parent_path());
}

}  // namespace mcs_calib
