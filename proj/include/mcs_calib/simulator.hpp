#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "mcs_calib/camera.hpp"
#include "mcs_calib/config.hpp"
#include "mcs_calib/dataset.hpp"
#include "mcs_calib/error.hpp"
#include "mcs_calib/kdtree.hpp"
#include "mcs_calib/pipeline.hpp"
#include "mcs_calib/random.hpp"
#include "mcs_calib/se3.hpp"
#include "mcs_calib/target.hpp"

namespace mcs_calib {

struct LidarModel {
  int rings = 16;
  double min_elevation_deg = -15.0;
  double max_elevation_deg = 15.0;
  double azimuth_resolution_deg = 0.35;
  double range_noise = 0.01;  ///< m, along the ray
  /// Move each target return onto the nearest template point before noise.
  bool quantize_to_template = true;
};

/// Static box obstacle; pose in the robot frame, full edge lengths.
struct Decoy {
  Pose pose;
  Vec3 size = Vec3::Constant(0.2);
};

struct PlacementSettings {
  int count = 5;
  double min_range = 1.5;
  double max_range = 3.0;
  double max_tilt_deg = 35.0;
  double max_roll_deg = 20.0;
  double cone_deg = 6.0;
  double dwell_s = 1.0;
  double transit_s = 1.0;
  /// Physical target poses in the robot frame; overrides random sampling.
  std::vector<Pose> poses;
};

struct ScenarioTarget {
  TargetSetup setup;
  /// True surface = declared target frame * injected_offset.
  Pose injected_offset;
};

struct ScenarioConfig {
  std::uint64_t seed = 1;
  std::string robot_frame = "robot";
  Pose robot_pose;                   ///< T_MR, static
  std::vector<SensorSetup> sensors;  ///< initial_extrinsic holds the ground truth
  std::vector<ScenarioTarget> targets;
  PlacementSettings placements;
  LidarModel lidar;
  double pixel_noise = 0.5;
  std::vector<Decoy> decoys;
  double mcs_rate_hz = 200.0;
  bool mcs_jitter = false;
  double mcs_jitter_sigma = 0.00015;
  /// Also emit records halfway through every transit (moving target).
  bool transit_records = false;
  double initial_max_translation = 0.03;
  double initial_max_rotation_deg = 5.0;
  GateSettings gates;
  SolverSettings solver;

  void validate() const {
    auto fail = [](const std::string& m) { throw CalibError(ErrorCode::kConfigError, "scenario: " + m); };
    if (sensors.empty()) fail("needs at least one sensor");
    if (targets.empty()) fail("needs at least one target");
    if (placements.poses.empty() && placements.count < 1) fail("placement count must be >= 1");
    if (!(placements.min_range > 0 && placements.max_range >= placements.min_range)) fail("bad placement range");
    if (!(placements.dwell_s > 0 && placements.transit_s > 0)) fail("dwell and transit must be positive");
    if (!(mcs_rate_hz > 0)) fail("MCS rate must be positive");
    if (!(lidar.rings >= 1 && lidar.azimuth_resolution_deg > 0)) fail("bad lidar beam grid");
    if (lidar.range_noise < 0 || pixel_noise < 0 || mcs_jitter_sigma < 0) fail("noise must be >= 0");
    for (const auto& t : targets) {
      if (t.setup.spec.kind == TargetKind::kCustom) fail("target '" + t.setup.id + "': only diamond and cylinder targets can be simulated");
    }
  }
};

struct GroundTruthLedger {
  struct Instant {
    double t = 0.0;
    std::string target_id;
    Pose t_mt;         ///< declared frame, as emitted by the MCS
    Pose t_rt_actual;  ///< true surface frame in the robot frame
  };
  struct Emitted {
    double t = 0.0;
    std::string sensor_id;
    std::string target_id;
    std::vector<Vec3> points;  ///< pre-noise, sensor frame
    std::vector<Vec2> pixels;  ///< pre-noise
    std::vector<int> ids;
  };
  std::map<std::string, Pose> extrinsics;
  std::map<std::string, Pose> injected_offsets;
  std::vector<Instant> instants;
  std::vector<Emitted> emitted;
  std::map<std::string, int> expected_observations;
  double lidar_range_noise = 0.0;
  double pixel_noise = 0.0;
  std::uint64_t seed = 0;
};

struct Simulation {
  Dataset dataset;
  GroundTruthLedger ledger;
  RunConfig run_config;
};

// ---------------------------------------------------------------------------
// Ray casting

namespace sim_detail {

/// Ray parameter of the first hit with s > min_s, if any. Ray in target frame.
inline std::optional<double> ray_diamond(const Vec3& o, const Vec3& d, double hw, double hh, double min_s) {
  if (std::abs(d.z()) < 1e-12) return std::nullopt;
  const double s = -o.z() / d.z();
  if (s <= min_s) return std::nullopt;
  const Vec3 h = o + s * d;
  if (std::abs(h.x()) / hw + std::abs(h.y()) / hh > 1.0) return std::nullopt;
  return s;
}

inline std::optional<double> ray_cylinder(const Vec3& o, const Vec3& d, double r, double len, double min_s) {
  const double a = d.x() * d.x() + d.y() * d.y();
  if (a < 1e-15) return std::nullopt;
  const double b = 2.0 * (o.x() * d.x() + o.y() * d.y());
  const double c = o.x() * o.x() + o.y() * o.y() - r * r;
  const double disc = b * b - 4.0 * a * c;
  if (disc < 0.0) return std::nullopt;
  const double sq = std::sqrt(disc);
  for (double s : {(-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a)}) {
    if (s <= min_s) continue;
    if (std::abs(o.z() + s * d.z()) <= 0.5 * len) return s;
  }
  return std::nullopt;
}

inline std::optional<double> ray_box(const Vec3& o, const Vec3& d, const Vec3& half, double min_s) {
  double lo = -std::numeric_limits<double>::infinity();
  double hi = std::numeric_limits<double>::infinity();
  for (int a = 0; a < 3; ++a) {
    if (std::abs(d[a]) < 1e-15) {
      if (std::abs(o[a]) > half[a]) return std::nullopt;
      continue;
    }
    double s0 = (-half[a] - o[a]) / d[a];
    double s1 = (half[a] - o[a]) / d[a];
    if (s0 > s1) std::swap(s0, s1);
    lo = std::max(lo, s0);
    hi = std::min(hi, s1);
  }
  if (lo > hi) return std::nullopt;
  if (lo > min_s) return lo;
  if (hi > min_s) return hi;
  return std::nullopt;
}

inline Vec3 boresight(SensorKind k) { return k == SensorKind::kCamera ? Vec3::UnitZ() : Vec3::UnitX(); }
inline Vec3 sensor_up(SensorKind k) { return k == SensorKind::kCamera ? Vec3(-Vec3::UnitY()) : Vec3::UnitZ(); }

/// Rotation taking the target's facing axis to -dir and its up axis towards `up`.
inline Mat3 facing_rotation(TargetKind kind, const Vec3& dir, const Vec3& up) {
  const Vec3 facing = -dir.normalized();
  Vec3 u = up - up.dot(facing) * facing;
  if (u.norm() < 1e-9) u = facing.unitOrthogonal();
  u.normalize();
  Mat3 r;
  if (kind == TargetKind::kCylinder) {
    // x faces the sensor, z (axis) points up.
    r.col(0) = facing;
    r.col(2) = u;
    r.col(1) = u.cross(facing);
  } else {
    // z (board normal) faces the sensor, y points up.
    r.col(2) = facing;
    r.col(1) = u;
    r.col(0) = u.cross(facing);
  }
  return r;
}

}  // namespace sim_detail

/// Random placement of `kind` in front of a sensor; returned in the sensor frame.
inline Pose sample_placement(const PlacementSettings& p, SensorKind sensor, TargetKind kind, Rng& rng) {
  const Vec3 b = sim_detail::boresight(sensor);
  const Vec3 up = sim_detail::sensor_up(sensor);
  const Vec3 side = up.cross(b);
  const double az = rng.uniform(-p.cone_deg, p.cone_deg) * kRadPerDeg;
  const double el = rng.uniform(-p.cone_deg, p.cone_deg) * kRadPerDeg;
  const Vec3 dir = (Eigen::AngleAxisd(el, side) * Eigen::AngleAxisd(az, up) * b).normalized();
  const double range = rng.uniform(p.min_range, p.max_range);
  Mat3 r = sim_detail::facing_rotation(kind, dir, up);
  // Tilt about a random axis perpendicular to the line of sight, then roll
  // about it.
  const double phi = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const Vec3 axis = (std::cos(phi) * side + std::sin(phi) * dir.cross(side).normalized()).normalized();
  const double tilt = rng.uniform(0.0, p.max_tilt_deg) * kRadPerDeg;
  const double roll = rng.uniform(-p.max_roll_deg, p.max_roll_deg) * kRadPerDeg;
  r = Eigen::AngleAxisd(tilt, axis).toRotationMatrix() * Eigen::AngleAxisd(roll, dir).toRotationMatrix() * r;
  return {Quat(r), range * dir};
}

namespace sim_detail {

struct SceneObject {
  enum class Shape { kDiamond, kCylinder, kBox } shape;
  Pose pose_in_robot;  ///< surface frame
  Vec3 dims;           ///< diamond: half w/h; cylinder: r, len; box: half size
  int target = -1;     ///< index into scenario targets, -1 for decoys
};

inline std::vector<SceneObject> scene_at(const ScenarioConfig& sc, const std::vector<Pose>& target_poses_in_robot) {
  std::vector<SceneObject> objs;
  for (std::size_t j = 0; j < sc.targets.size(); ++j) {
    const auto& t = sc.targets[j].setup;
    SceneObject o;
    o.pose_in_robot = target_poses_in_robot[j];
    o.target = static_cast<int>(j);
    const Aabb& box = t.spec.bounding_extent;
    if (t.spec.kind == TargetKind::kDiamond) {
      o.shape = SceneObject::Shape::kDiamond;
      o.dims = Vec3(box.max.x(), box.max.y(), 0.0);
    } else {
      o.shape = SceneObject::Shape::kCylinder;
      o.dims = Vec3(box.max.x(), box.extent().z(), 0.0);
    }
    objs.push_back(o);
  }
  for (const auto& d : sc.decoys) {
    objs.push_back({SceneObject::Shape::kBox, d.pose, 0.5 * d.size, -1});
  }
  return objs;
}

/// Nearest hit along a ray from the sensor origin, direction in the sensor frame.
struct Hit {
  double s = std::numeric_limits<double>::infinity();
  int object = -1;
};

struct PreparedObject {
  const SceneObject* obj;
  Pose sensor_in_object;
  Pose object_in_sensor;
};

inline Hit cast(const std::vector<PreparedObject>& objs, const Vec3& d_sensor, double min_s) {
  Hit best;
  for (std::size_t i = 0; i < objs.size(); ++i) {
    const auto& p = objs[i];
    const Vec3 o = p.sensor_in_object.translation;
    const Vec3 d = p.sensor_in_object.rotation * d_sensor;
    std::optional<double> s;
    switch (p.obj->shape) {
      case SceneObject::Shape::kDiamond: s = ray_diamond(o, d, p.obj->dims.x(), p.obj->dims.y(), min_s); break;
      case SceneObject::Shape::kCylinder: s = ray_cylinder(o, d, p.obj->dims.x(), p.obj->dims.y(), min_s); break;
      case SceneObject::Shape::kBox: s = ray_box(o, d, p.obj->dims, min_s); break;
    }
    if (s && *s < best.s) best = {*s, static_cast<int>(i)};
  }
  return best;
}

inline double smoothstep(double s) { return s * s * (3.0 - 2.0 * s); }

inline Pose blend(const Pose& a, const Pose& b, double s) {
  return {a.rotation.slerp(s, b.rotation), (1.0 - s) * a.translation + s * b.translation};
}

}  // namespace sim_detail

inline double placement_period(const PlacementSettings& p) { return p.dwell_s + p.transit_s; }

/// Observation instant i: the middle of the i-th dwell window.
inline double observation_time(const PlacementSettings& p, std::size_t i) {
  return 1.0 + static_cast<double>(i) * placement_period(p) + 0.5 * p.dwell_s;
}

/// Ground truth, noisy MCS streams, lidar scans and camera detections.
inline Simulation simulate(const ScenarioConfig& sc) {
  sc.validate();
  using namespace sim_detail;
  const std::size_t n_sensors = sc.sensors.size();
  const std::size_t n_targets = sc.targets.size();

  Simulation sim;
  GroundTruthLedger& led = sim.ledger;
  led.seed = sc.seed;
  led.lidar_range_noise = sc.lidar.range_noise;
  led.pixel_noise = sc.pixel_noise;
  for (const auto& s : sc.sensors) {
    led.extrinsics[s.id] = s.initial_extrinsic;
    led.expected_observations[s.id] = 0;
  }
  for (const auto& t : sc.targets) led.injected_offsets[t.setup.id] = t.injected_offset;

  std::vector<std::unique_ptr<KdTree<3>>> trees;
  for (const auto& t : sc.targets) {
    trees.push_back(std::make_unique<KdTree<3>>(std::span<const Vec3>(t.setup.spec.template_cloud)));
  }

  // Placements: physical surface poses in the robot frame.
  const std::size_t n = sc.placements.poses.empty() ? static_cast<std::size_t>(sc.placements.count)
                                                    : sc.placements.poses.size();
  std::vector<Pose> placed(n);
  std::vector<std::size_t> placed_target(n);
  Rng place_rng(mix_seed(sc.seed, 1));
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t j = i % n_targets;
    placed_target[i] = j;
    if (!sc.placements.poses.empty()) {
      placed[i] = sc.placements.poses[i];
      continue;
    }
    const auto& ref = sc.sensors[(i / n_targets) % n_sensors];
    const TargetSpec& spec = sc.targets[j].setup.spec;
    std::optional<Pose> fallback;
    bool found = false;
    for (int attempt = 0; attempt < 500 && !found; ++attempt) {
      const Pose t_rt = ref.initial_extrinsic * sample_placement(sc.placements, ref.kind, spec.kind, place_rng);
      bool all = true;
      bool ref_ok = false;
      for (const auto& s : sc.sensors) {
        const bool ok = gate_fov(s, s.initial_extrinsic.inverse() * t_rt, spec, 1.0);
        all = all && ok;
        if (&s == &ref) ref_ok = ok;
      }
      if (all) {
        placed[i] = t_rt;
        found = true;
      } else if (ref_ok && !fallback) {
        fallback = t_rt;
      }
    }
    if (!found) {
      if (!fallback) throw CalibError(ErrorCode::kConfigError, "no placement keeps the target inside sensor '" + ref.id + "' field of view");
      placed[i] = *fallback;
    }
  }

  const PlacementSettings& pl = sc.placements;
  const double period = placement_period(pl);
  auto parked = [&](std::size_t j) { return Pose::from_translation(Vec3(0.0, 0.0, 50.0 + 5.0 * static_cast<double>(j))); };
  auto pose_k = [&](std::size_t j, std::size_t k) { return placed_target[k] == j ? placed[k] : parked(j); };
  // Physical pose of target j in the robot frame at time t.
  auto target_at = [&](std::size_t j, double t) {
    const double rel = t - 1.0;
    if (rel <= 0.0) return pose_k(j, 0);
    const auto k = static_cast<std::size_t>(std::floor(rel / period));
    if (k >= n - 1) return pose_k(j, n - 1);
    const double local = rel - static_cast<double>(k) * period;
    if (local <= pl.dwell_s) return pose_k(j, k);
    return blend(pose_k(j, k), pose_k(j, k + 1), smoothstep((local - pl.dwell_s) / pl.transit_s));
  };
  auto declared = [&](std::size_t j, const Pose& physical_in_robot) {
    return sc.robot_pose * physical_in_robot * sc.targets[j].injected_offset.inverse();
  };

  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t j = placed_target[i];
    led.instants.push_back({observation_time(pl, i), sc.targets[j].setup.id, declared(j, placed[i]), placed[i]});
  }

  // MCS streams.
  const double t_end = observation_time(pl, n - 1) + 0.5 * pl.dwell_s + 1.0;
  const auto samples = static_cast<std::size_t>(std::ceil(t_end * sc.mcs_rate_hz)) + 1;
  Rng mcs_rng(mix_seed(sc.seed, 2));
  auto jitter = [&](const Pose& p) {
    if (!sc.mcs_jitter) return p;
    Vec3 dr, dt;
    for (int a = 0; a < 3; ++a) dt[a] = mcs_rng.normal(sc.mcs_jitter_sigma);
    for (int a = 0; a < 3; ++a) dr[a] = mcs_rng.normal(sc.mcs_jitter_sigma);
    return Pose(exp_rotation(dr) * p.rotation, p.translation + dt);
  };
  {
    std::vector<TimedPose> robot;
    std::vector<std::vector<TimedPose>> tgt(n_targets);
    for (std::size_t k = 0; k < samples; ++k) {
      const double t = static_cast<double>(k) / sc.mcs_rate_hz;
      robot.push_back({t, jitter(sc.robot_pose)});
      for (std::size_t j = 0; j < n_targets; ++j) tgt[j].push_back({t, jitter(declared(j, target_at(j, t)))});
    }
    sim.dataset.streams.emplace(sc.robot_frame, TimedPoseStream(std::move(robot)));
    for (std::size_t j = 0; j < n_targets; ++j) {
      sim.dataset.streams.emplace(sc.targets[j].setup.frame, TimedPoseStream(std::move(tgt[j])));
    }
  }

  // Sensor records.
  struct RecordTime {
    double t;
    std::optional<std::size_t> instant;
  };
  std::vector<RecordTime> times;
  for (std::size_t i = 0; i < n; ++i) {
    times.push_back({observation_time(pl, i), i});
    if (sc.transit_records && i + 1 < n) times.push_back({observation_time(pl, i) + 0.5 * pl.dwell_s + 0.5 * pl.transit_s, std::nullopt});
  }

  const double el_step = sc.lidar.rings > 1 ? (sc.lidar.max_elevation_deg - sc.lidar.min_elevation_deg) / (sc.lidar.rings - 1) : 0.0;
  const auto n_az = static_cast<int>(std::floor(360.0 / sc.lidar.azimuth_resolution_deg + 1e-9));

  for (std::size_t ri = 0; ri < times.size(); ++ri) {
    const double t = times[ri].t;
    std::vector<Pose> poses(n_targets);
    for (std::size_t j = 0; j < n_targets; ++j) poses[j] = target_at(j, t);
    const auto objects = scene_at(sc, poses);

    for (std::size_t si = 0; si < n_sensors; ++si) {
      const SensorSetup& sensor = sc.sensors[si];
      Rng rng(mix_seed(sc.seed, 1000 + 64 * ri + si));
      std::vector<PreparedObject> prepared;
      for (const auto& o : objects) {
        const Pose in_sensor = sensor.initial_extrinsic.inverse() * o.pose_in_robot;
        prepared.push_back({&o, in_sensor.inverse(), in_sensor});
      }

      if (sensor.kind == SensorKind::kLidar) {
        LidarScanRecord scan{t, sensor.id, {}};
        std::vector<std::vector<Vec3>> clean(n_targets);
        std::vector<std::set<std::size_t>> used(n_targets);
        for (int ring = 0; ring < sc.lidar.rings; ++ring) {
          const double el = (sc.lidar.min_elevation_deg + ring * el_step) * kRadPerDeg;
          for (int k = 0; k < n_az; ++k) {
            const double az = (-180.0 + k * sc.lidar.azimuth_resolution_deg) * kRadPerDeg;
            const Vec3 d(std::cos(el) * std::cos(az), std::cos(el) * std::sin(az), std::sin(el));
            const Hit hit = cast(prepared, d, sensor.lidar_fov.min_range);
            if (hit.object < 0 || hit.s > sensor.lidar_fov.max_range) continue;
            const PreparedObject& po = prepared[static_cast<std::size_t>(hit.object)];
            Vec3 p = hit.s * d;
            if (po.obj->target >= 0 && sc.lidar.quantize_to_template) {
              const auto j = static_cast<std::size_t>(po.obj->target);
              const Vec3 h = po.sensor_in_object * p;
              const std::size_t idx = trees[j]->nearest(h).index;
              if (!used[j].insert(idx).second) continue;
              p = po.object_in_sensor * sc.targets[j].setup.spec.template_cloud[idx];
            }
            if (!in_lidar_fov(sensor.lidar_fov, p)) continue;
            if (po.obj->target >= 0) clean[static_cast<std::size_t>(po.obj->target)].push_back(p);
            scan.points.push_back(p + rng.normal(sc.lidar.range_noise) * p.normalized());
          }
        }
        for (std::size_t j = 0; j < n_targets; ++j) {
          if (clean[j].empty()) continue;
          if (times[ri].instant && placed_target[*times[ri].instant] == j &&
              clean[j].size() >= sc.gates.min_cluster_size) {
            ++led.expected_observations[sensor.id];
          }
          led.emitted.push_back({t, sensor.id, sc.targets[j].setup.id, std::move(clean[j]), {}, {}});
        }
        sim.dataset.scans[sensor.id].push_back(std::move(scan));
      } else {
        const CameraIntrinsics& c = sensor.intrinsics;
        for (std::size_t j = 0; j < n_targets; ++j) {
          const TargetSpec& spec = sc.targets[j].setup.spec;
          CameraDetectionRecord det{t, sensor.id, {}, std::nullopt, sc.targets[j].setup.id};
          std::vector<int> ids;
          GroundTruthLedger::Emitted em{t, sensor.id, sc.targets[j].setup.id, {}, {}, {}};
          const Pose& in_cam = prepared[j].object_in_sensor;
          for (std::size_t k = 0; k < spec.camera_keypoints.size(); ++k) {
            const auto px = project(c, in_cam * spec.camera_keypoints[k]);
            if (!px) continue;
            const Vec2 noisy = *px + Vec2(rng.normal(sc.pixel_noise), rng.normal(sc.pixel_noise));
            if (noisy.x() < 0 || noisy.y() < 0 || noisy.x() >= c.width || noisy.y() >= c.height) continue;
            det.pixels.push_back(noisy);
            ids.push_back(static_cast<int>(k));
            em.pixels.push_back(*px);
          }
          if (det.pixels.empty()) continue;
          if (spec.camera_keypoints_unique) {
            det.keypoint_ids = ids;
            em.ids = ids;
          }
          if (times[ri].instant && placed_target[*times[ri].instant] == j) ++led.expected_observations[sensor.id];
          led.emitted.push_back(std::move(em));
          sim.dataset.detections[sensor.id].push_back(std::move(det));
        }
      }
    }
  }

  // Run configuration with perturbed initial extrinsics.
  RunConfig& rc = sim.run_config;
  rc.robot_frame = sc.robot_frame;
  rc.seed = sc.seed;
  rc.gates = sc.gates;
  rc.solver = sc.solver;
  for (std::size_t si = 0; si < n_sensors; ++si) {
    SensorSetup s = sc.sensors[si];
    s.initial_extrinsic = apply_perturbation(
        s.initial_extrinsic,
        sample_perturbation(sc.initial_max_translation, sc.initial_max_rotation_deg, mix_seed(sc.seed, 100 + si)));
    rc.sensors.push_back(std::move(s));
  }
  for (const auto& t : sc.targets) rc.targets.push_back(t.setup);
  return sim;
}

// ---------------------------------------------------------------------------
// Serialization

inline json ledger_to_json(const GroundTruthLedger& l) {
  json j;
  j["seed"] = l.seed;
  j["noise"] = {{"lidar_range_sigma_m", l.lidar_range_noise}, {"pixel_sigma_px", l.pixel_noise}};
  for (const auto& [id, p] : l.extrinsics) j["extrinsics"][id] = pose_to_json(p);
  for (const auto& [id, p] : l.injected_offsets) j["injected_offsets"][id] = pose_to_json(p);
  j["expected_observations"] = l.expected_observations;
  json inst = json::array();
  for (const auto& i : l.instants) {
    inst.push_back({{"t", i.t}, {"target", i.target_id}, {"t_mt", pose_to_json(i.t_mt)}, {"t_rt_actual", pose_to_json(i.t_rt_actual)}});
  }
  j["instants"] = std::move(inst);
  json em = json::array();
  for (const auto& e : l.emitted) {
    json pts = json::array();
    for (const auto& p : e.points) pts.push_back(vec_to_json(p));
    json px = json::array();
    for (const auto& p : e.pixels) px.push_back(vec_to_json(p));
    json row{{"t", e.t}, {"sensor", e.sensor_id}, {"target", e.target_id}};
    if (!e.points.empty()) row["points"] = std::move(pts);
    if (!e.pixels.empty()) row["pixels"] = std::move(px);
    if (!e.ids.empty()) row["ids"] = e.ids;
    em.push_back(std::move(row));
  }
  j["emitted"] = std::move(em);
  return j;
}

/// Extrinsics (ground truth) from a ledger.json.
inline std::map<std::string, Pose> ledger_extrinsics(const json& j) {
  std::map<std::string, Pose> out;
  if (!j.contains("extrinsics") || !j["extrinsics"].is_object()) {
    throw CalibError(ErrorCode::kParseError, "ledger has no \"extrinsics\"");
  }
  for (const auto& [id, p] : j["extrinsics"].items()) out[id] = detail::pose_from_json(p, "ledger.extrinsics." + id);
  return out;
}

inline void write_simulation(const Simulation& sim, const fs::path& dir) {
  save_dataset(sim.dataset, dir);
  write_file_atomic(dir / "ledger.json", ledger_to_json(sim.ledger).dump(1) + "\n");
  write_file_atomic(dir / "run_config.json", run_config_to_json(sim.run_config).dump(2) + "\n");
}

inline ScenarioConfig parse_scenario(const json& j, const fs::path& base_dir = ".") {
  using namespace config_detail;
  check_keys(j, "scenario",
             {"seed", "robot_frame", "robot_pose", "sensors", "targets", "placements", "lidar", "camera", "decoys",
              "mcs", "transit_records", "initial_perturbation", "gates", "solver"});
  ScenarioConfig sc;
  if (j.contains("seed")) {
    if (!j["seed"].is_number_integer()) fail("scenario", "seed must be an integer");
    sc.seed = j["seed"].get<std::uint64_t>();
  }
  if (j.contains("robot_frame")) sc.robot_frame = string(j, "robot_frame", "scenario");
  if (j.contains("robot_pose")) sc.robot_pose = pose_from_config(j["robot_pose"], "scenario.robot_pose");
  if (!j.contains("sensors") || !j["sensors"].is_array()) fail("scenario", "needs a \"sensors\" list");
  if (!j.contains("targets") || !j["targets"].is_array()) fail("scenario", "needs a \"targets\" list");
  for (std::size_t i = 0; i < j["sensors"].size(); ++i) {
    sc.sensors.push_back(sensor_from_json(j["sensors"][i], "scenario.sensors[" + std::to_string(i) + "]", "extrinsic"));
  }
  for (std::size_t i = 0; i < j["targets"].size(); ++i) {
    const std::string where = "scenario.targets[" + std::to_string(i) + "]";
    ScenarioTarget t;
    t.setup = target_from_json(j["targets"][i], where, base_dir, {"injected_offset"});
    if (j["targets"][i].contains("injected_offset")) {
      t.injected_offset = pose_from_config(j["targets"][i]["injected_offset"], where + ".injected_offset");
    }
    sc.targets.push_back(std::move(t));
  }
  if (j.contains("placements")) {
    const json& p = j["placements"];
    const std::string w = "scenario.placements";
    check_keys(p, w, {"count", "min_range", "max_range", "max_tilt_deg", "max_roll_deg", "cone_deg", "dwell_s", "transit_s", "poses"});
    auto& pl = sc.placements;
    pl.count = integer(p, "count", pl.count, w);
    pl.min_range = number(p, "min_range", pl.min_range, w);
    pl.max_range = number(p, "max_range", pl.max_range, w);
    pl.max_tilt_deg = number(p, "max_tilt_deg", pl.max_tilt_deg, w);
    pl.max_roll_deg = number(p, "max_roll_deg", pl.max_roll_deg, w);
    pl.cone_deg = number(p, "cone_deg", pl.cone_deg, w);
    pl.dwell_s = number(p, "dwell_s", pl.dwell_s, w);
    pl.transit_s = number(p, "transit_s", pl.transit_s, w);
    if (p.contains("poses")) {
      if (!p["poses"].is_array()) fail(w, "\"poses\" must be a list");
      for (std::size_t i = 0; i < p["poses"].size(); ++i) pl.poses.push_back(pose_from_config(p["poses"][i], w + ".poses[" + std::to_string(i) + "]"));
    }
  }
  if (j.contains("lidar")) {
    const json& l = j["lidar"];
    const std::string w = "scenario.lidar";
    check_keys(l, w, {"rings", "min_elevation_deg", "max_elevation_deg", "azimuth_resolution_deg", "range_noise", "quantize_to_template"});
    auto& m = sc.lidar;
    m.rings = integer(l, "rings", m.rings, w);
    m.min_elevation_deg = number(l, "min_elevation_deg", m.min_elevation_deg, w);
    m.max_elevation_deg = number(l, "max_elevation_deg", m.max_elevation_deg, w);
    m.azimuth_resolution_deg = number(l, "azimuth_resolution_deg", m.azimuth_resolution_deg, w);
    m.range_noise = number(l, "range_noise", m.range_noise, w);
    m.quantize_to_template = boolean(l, "quantize_to_template", m.quantize_to_template, w);
  }
  if (j.contains("camera")) {
    check_keys(j["camera"], "scenario.camera", {"pixel_noise"});
    sc.pixel_noise = number(j["camera"], "pixel_noise", sc.pixel_noise, "scenario.camera");
  }
  if (j.contains("decoys")) {
    if (!j["decoys"].is_array()) fail("scenario", "\"decoys\" must be a list");
    for (std::size_t i = 0; i < j["decoys"].size(); ++i) {
      const std::string w = "scenario.decoys[" + std::to_string(i) + "]";
      const json& d = j["decoys"][i];
      check_keys(d, w, {"pose", "size"});
      Decoy dec;
      if (d.contains("pose")) dec.pose = pose_from_config(d["pose"], w + ".pose");
      if (d.contains("size")) {
        try {
          dec.size = detail::fixed_vector<3>(d["size"], w + ".size");
        } catch (const CalibError& e) {
          throw CalibError(ErrorCode::kConfigError, e.what());
        }
      }
      if ((dec.size.array() <= 0).any()) fail(w, "size must be positive");
      sc.decoys.push_back(dec);
    }
  }
  if (j.contains("mcs")) {
    const json& m = j["mcs"];
    check_keys(m, "scenario.mcs", {"rate_hz", "jitter", "jitter_sigma"});
    sc.mcs_rate_hz = number(m, "rate_hz", sc.mcs_rate_hz, "scenario.mcs");
    sc.mcs_jitter = boolean(m, "jitter", sc.mcs_jitter, "scenario.mcs");
    sc.mcs_jitter_sigma = number(m, "jitter_sigma", sc.mcs_jitter_sigma, "scenario.mcs");
  }
  sc.transit_records = boolean(j, "transit_records", sc.transit_records, "scenario");
  if (j.contains("initial_perturbation")) {
    const json& p = j["initial_perturbation"];
    check_keys(p, "scenario.initial_perturbation", {"max_translation", "max_rotation_deg"});
    sc.initial_max_translation = number(p, "max_translation", sc.initial_max_translation, "scenario.initial_perturbation");
    sc.initial_max_rotation_deg = number(p, "max_rotation_deg", sc.initial_max_rotation_deg, "scenario.initial_perturbation");
  }
  if (j.contains("gates")) sc.gates = gates_from_json(j["gates"], "scenario.gates");
  if (j.contains("solver")) sc.solver = solver_from_json(j["solver"], "scenario.solver");
  sc.validate();
  return sc;
}

inline ScenarioConfig load_scenario(const fs::path& path) {
  json j;
  try {
    j = read_json_file(path);
  } catch (const CalibError& e) {
    throw CalibError(ErrorCode::kConfigError, e.what());
  }
  return parse_scenario(j, path.parent_path());
}

// ---------------------------------------------------------------------------
// Ablation and perturbation study

struct TeAblation {
  Simulation simulation;
  RunConfig with_te;
  RunConfig without_te;
};

/// Dataset whose true target surfaces sit at declared * injected_te, plus the
/// two run configurations (T_E estimated / frozen at identity).
inline TeAblation make_te_ablation(ScenarioConfig sc, const Pose& injected_te) {
  for (auto& t : sc.targets) t.injected_offset = injected_te;
  TeAblation out;
  out.simulation = simulate(sc);
  out.with_te = out.simulation.run_config;
  out.with_te.solver.estimate_te = true;
  out.without_te = out.simulation.run_config;
  out.without_te.solver.estimate_te = false;
  return out;
}

/// Mean error of the sensor-from-target loop inv(T_RS) * inv(T_MR) * T_MT * T_E
/// over the measurements of each sensor. With a single target and T_E free
/// only this product is pinned down by the data.
inline std::map<std::string, PoseError> loop_errors(const CalibrationState& st, const std::vector<MeasurementSet>& ms,
                                                    const GroundTruthLedger& truth) {
  std::map<std::string, PoseError> sum;
  std::map<std::string, int> n;
  for (const auto& m : ms) {
    const auto est_s = st.extrinsics.find(m.sensor_id);
    const auto tru_s = truth.extrinsics.find(m.sensor_id);
    const auto off = truth.injected_offsets.find(m.target_id);
    if (est_s == st.extrinsics.end() || tru_s == truth.extrinsics.end() || off == truth.injected_offsets.end()) continue;
    const Pose chain = m.t_mr.inverse() * m.t_mt;
    const PoseError e = relative_pose_error(est_s->second.inverse() * chain * st.target_alignment(m.target_id),
                                            tru_s->second.inverse() * chain * off->second);
    PoseError& acc = sum[m.sensor_id];
    acc.rotational_deg += e.rotational_deg;
    acc.translational_m += e.translational_m;
    ++n[m.sensor_id];
  }
  for (auto& [id, e] : sum) {
    e.rotational_deg /= n[id];
    e.translational_m /= n[id];
  }
  return sum;
}

struct StudyRow {
  int count = 0;
  int trial = 0;
  double trans_mm = std::numeric_limits<double>::quiet_NaN();
  double rot_deg = std::numeric_limits<double>::quiet_NaN();
  double euclidean_mm = std::numeric_limits<double>::quiet_NaN();
  double reproj_px = std::numeric_limits<double>::quiet_NaN();
  std::map<std::string, PoseError> per_sensor;
  /// Worst over sensors of the mean loop error, see loop_errors.
  double loop_trans_mm = std::numeric_limits<double>::quiet_NaN();
  double loop_rot_deg = std::numeric_limits<double>::quiet_NaN();
  std::map<std::string, PoseError> per_sensor_loop;
  bool converged = false;
  /// Every inner solve's accepted-step cost history was non-increasing.
  bool inner_cost_monotone = false;
  std::string error;
};

struct StudyResult {
  std::vector<std::string> sensor_ids;
  std::vector<StudyRow> rows;
};

/// One simulated dataset and one perturbed start per (count, trial). Pipeline
/// errors are recorded in the row and the study continues.
inline StudyResult run_perturbation_study(const ScenarioConfig& base, int n_trials, double max_trans,
                                          double max_rot_deg, const std::vector<int>& counts, int threads = 1) {
  if (n_trials < 2) throw CalibError(ErrorCode::kConfigError, "study needs at least 2 trials");
  if (counts.empty()) throw CalibError(ErrorCode::kConfigError, "study needs measurement counts");
  for (int c : counts) {
    if (c < 1) throw CalibError(ErrorCode::kConfigError, "measurement counts must be >= 1");
  }
  StudyResult res;
  for (const auto& s : base.sensors) res.sensor_ids.push_back(s.id);
  res.rows.resize(counts.size() * static_cast<std::size_t>(n_trials));
  parallel_for(res.rows.size(), threads, [&](std::size_t k) {
    const int count = counts[k / static_cast<std::size_t>(n_trials)];
    const int trial = static_cast<int>(k % static_cast<std::size_t>(n_trials));
    StudyRow& row = res.rows[k];
    row.count = count;
    row.trial = trial;
    try {
      ScenarioConfig sc = base;
      sc.placements.count = count;
      sc.placements.poses.clear();
      sc.seed = mix_seed(base.seed, 7919 * static_cast<std::uint64_t>(count) + static_cast<std::uint64_t>(trial));
      sc.initial_max_translation = max_trans;
      sc.initial_max_rotation_deg = max_rot_deg;
      sc.solver.threads = 1;
      const Simulation sim = simulate(sc);
      // Gates and crops use the nominal mounts; only the solver start is perturbed.
      const PipelineResult out = run_pipeline(sim.dataset, sim.run_config, sim.ledger.extrinsics);
      const auto& st = out.calibration.state;
      if (!st.unconstrained_sensors.empty()) row.error = "unconstrained sensor '" + st.unconstrained_sensors.front() + "'";
      row.converged = st.converged;
      row.inner_cost_monotone = true;
      for (const auto& h : st.inner_cost_histories) {
        for (std::size_t i = 1; i < h.size(); ++i) row.inner_cost_monotone = row.inner_cost_monotone && h[i] <= h[i - 1];
      }
      row.trans_mm = 0.0;
      row.rot_deg = 0.0;
      for (const auto& [id, truth] : sim.ledger.extrinsics) {
        const PoseError e = pose_error(st.extrinsics.at(id), truth);
        row.per_sensor[id] = e;
        row.trans_mm = std::max(row.trans_mm, 1000.0 * e.translational_m);
        row.rot_deg = std::max(row.rot_deg, e.rotational_deg);
      }
      row.per_sensor_loop = loop_errors(st, out.extraction.measurements, sim.ledger);
      row.loop_trans_mm = 0.0;
      row.loop_rot_deg = 0.0;
      for (const auto& [id, e] : row.per_sensor_loop) {
        row.loop_trans_mm = std::max(row.loop_trans_mm, 1000.0 * e.translational_m);
        row.loop_rot_deg = std::max(row.loop_rot_deg, e.rotational_deg);
      }
      row.euclidean_mm = 1000.0 * out.calibration.errors.mean_euclidean_m;
      row.reproj_px = out.calibration.errors.mean_reprojection_px;
    } catch (const std::exception& e) {
      row.error = e.what();
    }
  });
  return res;
}

inline std::string study_csv(const StudyResult& r) {
  std::string s = "count,trial,trans_mm,rot_deg,euclidean_mm,reproj_px";
  for (const auto& id : r.sensor_ids) s += "," + id + "_trans_mm," + id + "_rot_deg";
  for (const auto& id : r.sensor_ids) s += "," + id + "_loop_trans_mm," + id + "_loop_rot_deg";
  s += ",converged,error\n";
  char buf[64];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return std::string(buf);
  };
  for (const auto& row : r.rows) {
    s += std::to_string(row.count) + "," + std::to_string(row.trial) + "," + num(row.trans_mm) + "," +
         num(row.rot_deg) + "," + num(row.euclidean_mm) + "," + num(row.reproj_px);
    auto pair = [&](const std::map<std::string, PoseError>& m, const std::string& id) {
      const auto it = m.find(id);
      if (it == m.end()) return std::string(",nan,nan");
      return "," + num(1000.0 * it->second.translational_m) + "," + num(it->second.rotational_deg);
    };
    for (const auto& id : r.sensor_ids) s += pair(row.per_sensor, id);
    for (const auto& id : r.sensor_ids) s += pair(row.per_sensor_loop, id);
    std::string err = row.error;
    std::replace(err.begin(), err.end(), ',', ';');
    std::replace(err.begin(), err.end(), '\n', ' ');
    s += std::string(",") + (row.converged ? "1" : "0") + "," + err + "\n";
  }
  return s;
}

struct StudyCell {
  int count = 0;
  std::size_t trials = 0;
  ResidualStats trans_mm, rot_deg, euclidean_mm, reproj_px, loop_trans_mm, loop_rot_deg;
};

/// Mean and standard deviation per measurement count over successful trials.
inline std::vector<StudyCell> summarize_study(const StudyResult& r) {
  std::vector<StudyCell> out;
  std::vector<int> counts;
  for (const auto& row : r.rows) {
    if (std::find(counts.begin(), counts.end(), row.count) == counts.end()) counts.push_back(row.count);
  }
  for (int c : counts) {
    std::vector<double> t, rd, e, p, lt, lr;
    for (const auto& row : r.rows) {
      if (row.count != c || !row.error.empty()) continue;
      t.push_back(row.trans_mm);
      rd.push_back(row.rot_deg);
      lt.push_back(row.loop_trans_mm);
      lr.push_back(row.loop_rot_deg);
      if (std::isfinite(row.euclidean_mm)) e.push_back(row.euclidean_mm);
      if (std::isfinite(row.reproj_px)) p.push_back(row.reproj_px);
    }
    out.push_back({c, t.size(), summarize(t), summarize(rd), summarize(e), summarize(p), summarize(lt), summarize(lr)});
  }
  return out;
}

inline std::string study_summary_csv(const std::vector<StudyCell>& cells) {
  std::string s =
      "count,trials,trans_mm_mean,trans_mm_std,rot_deg_mean,rot_deg_std,euclidean_mm_mean,euclidean_mm_std,"
      "reproj_px_mean,reproj_px_std,loop_trans_mm_mean,loop_trans_mm_std,loop_rot_deg_mean,loop_rot_deg_std\n";
  char buf[512];
  for (const auto& c : cells) {
    std::snprintf(buf, sizeof(buf), "%d,%zu,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g\n", c.count,
                  c.trials, c.trans_mm.mean, c.trans_mm.stddev, c.rot_deg.mean, c.rot_deg.stddev, c.euclidean_mm.mean,
                  c.euclidean_mm.stddev, c.reproj_px.mean, c.reproj_px.stddev, c.loop_trans_mm.mean,
                  c.loop_trans_mm.stddev, c.loop_rot_deg.mean, c.loop_rot_deg.stddev);
    s += buf;
  }
  return s;
}

}  // namespace mcs_calib
