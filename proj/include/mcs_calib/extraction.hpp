#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

#include <Eigen/Eigenvalues>

#include "mcs_calib/camera.hpp"
#include "mcs_calib/dataset.hpp"
#include "mcs_calib/error.hpp"
#include "mcs_calib/kdtree.hpp"
#include "mcs_calib/measurement.hpp"
#include "mcs_calib/se3.hpp"
#include "mcs_calib/target.hpp"

namespace mcs_calib {

struct SensorSetup {
  std::string id;
  SensorKind kind = SensorKind::kLidar;
  CameraIntrinsics intrinsics;  ///< cameras
  LidarFov lidar_fov;           ///< lidars
  /// Coarsest angular spacing between returns (ring spacing on a VLP-16).
  double angular_resolution_deg = 2.0;
  Pose initial_extrinsic;  ///< T_RS guess
};

struct TargetSetup {
  std::string id;
  std::string frame;  ///< MCS body tracking the target
  TargetSpec spec;
  json source;  ///< description the spec was built from
};

struct ClusterScoreWeights {
  double w_pose = 1.0;     ///< per m
  double w_volume = 10.0;  ///< per m^3
};

struct GateSettings {
  double fov_fraction = 0.8;
  double velocity_dt = 0.05;
  double max_linear_velocity = 0.1;   ///< m/s
  double max_angular_velocity = 0.1;  ///< rad/s
  double crop_padding = 0.3;
  double cluster_safety_factor = 3.0;
  double cluster_tolerance_floor = 0.01;
  std::size_t min_cluster_size = 10;
  ClusterScoreWeights weights;
  double reject_distance = 0.5;

  void validate() const {
    const bool ok = fov_fraction >= 0 && fov_fraction <= 1 && velocity_dt > 0 && max_linear_velocity >= 0 &&
                    max_angular_velocity >= 0 && crop_padding >= 0 && cluster_safety_factor > 0 &&
                    cluster_tolerance_floor > 0 && weights.w_pose >= 0 && weights.w_volume >= 0 &&
                    (weights.w_pose > 0 || weights.w_volume > 0) && reject_distance > 0;
    if (!ok) throw CalibError(ErrorCode::kConfigError, "invalid gate settings");
  }
};

/// T_sensor<-target = inv(T_RS) * inv(T_MR) * T_MT.
inline Pose target_in_sensor(const Pose& t_rs, const Pose& t_mr, const Pose& t_mt) {
  return t_rs.inverse() * t_mr.inverse() * t_mt;
}

inline bool in_sensor_fov(const SensorSetup& sensor, const Vec3& p) {
  return sensor.kind == SensorKind::kCamera ? in_camera_fov(sensor.intrinsics, p) : in_lidar_fov(sensor.lidar_fov, p);
}

/// True when at least `fraction` of the 8 bounding-box corners are visible.
inline bool gate_fov(const SensorSetup& sensor, const Pose& t_st, const TargetSpec& spec, double fraction) {
  int visible = 0;
  for (int i = 0; i < 8; ++i) {
    if (in_sensor_fov(sensor, t_st * spec.bounding_extent.corner(i))) ++visible;
  }
  return visible >= 8.0 * fraction - 1e-9;
}

inline const TimedPoseStream& stream_for(const std::map<std::string, TimedPoseStream>& streams, const std::string& frame) {
  const auto it = streams.find(frame);
  if (it == streams.end()) throw CalibError(ErrorCode::kUnknownFrame, "no MCS stream '" + frame + "'");
  return it->second;
}

/// MCS pose of `frame` at t; MissingPose when t is outside the stream.
inline Pose mcs_pose(const std::map<std::string, TimedPoseStream>& streams, const std::string& frame, double t) {
  const auto& s = stream_for(streams, frame);
  if (!s.covers(t)) throw CalibError(ErrorCode::kMissingPose, "frame '" + frame + "' has no pose at t=" + std::to_string(t));
  return s.interpolate(t);
}

struct RelativeTwist {
  double linear = 0.0;   ///< m/s
  double angular = 0.0;  ///< rad/s
};

/// Central difference of inv(T_MR) * T_MT over [t - dt, t + dt].
inline RelativeTwist relative_twist(const std::map<std::string, TimedPoseStream>& streams, double t,
                                    const std::string& target_frame, const std::string& robot_frame, double dt) {
  auto rel = [&](double s) { return mcs_pose(streams, robot_frame, s).inverse() * mcs_pose(streams, target_frame, s); };
  const Pose a = rel(t - dt);
  const Pose b = rel(t + dt);
  return {(b.translation - a.translation).norm() / (2.0 * dt), (a.inverse() * b).angle() / (2.0 * dt)};
}

inline bool gate_velocity(const std::map<std::string, TimedPoseStream>& streams, double t,
                          const std::string& target_frame, const std::string& robot_frame, double max_lin,
                          double max_ang, double dt = 0.05) {
  const RelativeTwist tw = relative_twist(streams, t, target_frame, robot_frame, dt);
  return tw.linear <= max_lin && tw.angular <= max_ang;
}

/// Points inside the target box (inflated by padding) at the expected pose.
inline std::vector<Vec3> crop_to_target(const std::vector<Vec3>& scan, const Pose& expected_target_in_lidar,
                                        const TargetSpec& spec, double padding) {
  const Pose inv = expected_target_in_lidar.inverse();
  std::vector<Vec3> out;
  for (const auto& p : scan) {
    if (spec.bounding_extent.contains(inv * p, padding)) out.push_back(p);
  }
  return out;
}

inline double cluster_tolerance_for(double range, double angular_res_rad, double safety_factor = 3.0) {
  return safety_factor * range * angular_res_rad;
}

/// Connected components of the radius graph; clusters smaller than min_size
/// are dropped. Ordered by size (descending), then centroid lexicographically.
inline std::vector<std::vector<std::size_t>> euclidean_cluster(const std::vector<Vec3>& points, double tolerance,
                                                               std::size_t min_size) {
  if (!(tolerance > 0.0)) throw CalibError(ErrorCode::kDegenerateParams, "cluster tolerance must be positive");
  const KdTree<3> tree{std::span<const Vec3>(points)};
  std::vector<char> seen(points.size(), 0);
  std::vector<std::vector<std::size_t>> clusters;
  for (std::size_t seed = 0; seed < points.size(); ++seed) {
    if (seen[seed]) continue;
    std::vector<std::size_t> members{seed};
    seen[seed] = 1;
    for (std::size_t k = 0; k < members.size(); ++k) {
      for (std::size_t nb : tree.radius_search(points[members[k]], tolerance)) {
        if (!seen[nb]) {
          seen[nb] = 1;
          members.push_back(nb);
        }
      }
    }
    if (members.size() < min_size) continue;
    std::sort(members.begin(), members.end());
    clusters.push_back(std::move(members));
  }
  auto centroid = [&](const std::vector<std::size_t>& c) {
    Vec3 m = Vec3::Zero();
    for (auto i : c) m += points[i];
    return Vec3(m / static_cast<double>(c.size()));
  };
  std::vector<std::tuple<std::size_t, Vec3, std::size_t>> keys;
  for (std::size_t i = 0; i < clusters.size(); ++i) keys.emplace_back(clusters[i].size(), centroid(clusters[i]), i);
  std::sort(keys.begin(), keys.end(), [](const auto& a, const auto& b) {
    if (std::get<0>(a) != std::get<0>(b)) return std::get<0>(a) > std::get<0>(b);
    const Vec3& ca = std::get<1>(a);
    const Vec3& cb = std::get<1>(b);
    return std::lexicographical_compare(ca.data(), ca.data() + 3, cb.data(), cb.data() + 3);
  });
  std::vector<std::vector<std::size_t>> out;
  out.reserve(clusters.size());
  for (const auto& k : keys) out.push_back(std::move(clusters[std::get<2>(k)]));
  return out;
}

/// Box volume of a cluster. The thin axis comes from PCA of the points (so
/// attitude error does not inflate the thickness of flat targets); the other
/// two follow the expected target axes. Extents are floored at the target's
/// thinnest extent.
inline double cluster_volume(const std::vector<Vec3>& pts, const Pose& expected_target, const TargetSpec& spec) {
  if (pts.empty()) return 0.0;
  Vec3 mean = Vec3::Zero();
  for (const auto& p : pts) mean += p;
  mean /= static_cast<double>(pts.size());
  Mat3 cov = Mat3::Zero();
  for (const auto& p : pts) cov += (p - mean) * (p - mean).transpose();
  const Vec3 normal = Eigen::SelfAdjointEigenSolver<Mat3>(cov).eigenvectors().col(0).normalized();

  const Mat3 r = expected_target.rotation.toRotationMatrix();
  int replaced = 0;
  for (int a = 1; a < 3; ++a) {
    if (std::abs(r.col(a).dot(normal)) > std::abs(r.col(replaced).dot(normal))) replaced = a;
  }
  Mat3 axes;
  axes.col(replaced) = normal;
  const int a1 = (replaced + 1) % 3;
  const int a2 = (replaced + 2) % 3;
  axes.col(a1) = (r.col(a1) - r.col(a1).dot(normal) * normal).normalized();
  axes.col(a2) = normal.cross(axes.col(a1)).normalized();

  Vec3 lo = Vec3::Constant(std::numeric_limits<double>::infinity());
  Vec3 hi = -lo;
  for (const auto& p : pts) {
    const Vec3 q = axes.transpose() * (p - mean);
    lo = lo.cwiseMin(q);
    hi = hi.cwiseMax(q);
  }
  const double floor = spec.bounding_extent.extent().minCoeff();
  return (hi - lo).cwiseMax(floor).prod();
}

struct ClusterChoice {
  std::size_t index = 0;
  double score = 0.0;
  double distance = 0.0;
  double volume = 0.0;
};

/// Lowest weighted score wins; nullopt when nothing lies within
/// reject_distance of the expected box center.
inline std::optional<ClusterChoice> select_cluster(const std::vector<std::vector<Vec3>>& clusters,
                                                   const Pose& expected_target_in_lidar, const TargetSpec& spec,
                                                   const ClusterScoreWeights& w, double reject_distance = 0.5) {
  const Vec3 expected_center = expected_target_in_lidar * spec.bounding_extent.center();
  std::optional<ClusterChoice> best;
  for (std::size_t i = 0; i < clusters.size(); ++i) {
    if (clusters[i].empty()) continue;
    Vec3 c = Vec3::Zero();
    for (const auto& p : clusters[i]) c += p;
    c /= static_cast<double>(clusters[i].size());
    ClusterChoice choice;
    choice.index = i;
    choice.distance = (c - expected_center).norm();
    choice.volume = cluster_volume(clusters[i], expected_target_in_lidar, spec);
    choice.score = w.w_pose * choice.distance + w.w_volume * std::abs(choice.volume - spec.volume);
    if (choice.distance > reject_distance) continue;
    if (!best || choice.score < best->score) best = choice;
  }
  return best;
}

struct SkipRecord {
  double timestamp = 0.0;
  std::string sensor_id;
  std::string target_id;
  std::string reason;
};

struct ExtractionResult {
  std::vector<MeasurementSet> measurements;
  std::vector<SkipRecord> skipped;
};

/// Gates, crop, clustering and selection for every sensor record against
/// every target. Results are ordered by (timestamp, sensor, target).
inline ExtractionResult extract_all(const Dataset& ds, const std::string& robot_frame,
                                    const std::vector<SensorSetup>& sensors, const std::vector<TargetSetup>& targets,
                                    const std::map<std::string, Pose>& initial_extrinsics, const GateSettings& gates) {
  gates.validate();
  std::vector<std::string> frames{robot_frame};
  for (const auto& t : targets) frames.push_back(t.frame);
  require_frames(ds, frames);

  ExtractionResult out;
  auto skip = [&](double t, const std::string& s, const std::string& tg, const std::string& why) {
    out.skipped.push_back({t, s, tg, why});
  };

  for (const auto& sensor : sensors) {
    const auto ext = initial_extrinsics.find(sensor.id);
    const Pose t_rs = ext != initial_extrinsics.end() ? ext->second : sensor.initial_extrinsic;

    std::vector<double> stamps;
    if (sensor.kind == SensorKind::kLidar) {
      if (const auto it = ds.scans.find(sensor.id); it != ds.scans.end()) {
        for (const auto& s : it->second) stamps.push_back(s.timestamp);
      }
    } else if (const auto it = ds.detections.find(sensor.id); it != ds.detections.end()) {
      for (const auto& d : it->second) stamps.push_back(d.timestamp);
    }

    for (std::size_t ri = 0; ri < stamps.size(); ++ri) {
      const double t = stamps[ri];
      for (const auto& target : targets) {
        if (sensor.kind == SensorKind::kCamera) {
          const auto& det = ds.detections.at(sensor.id)[ri];
          if (det.target_id && *det.target_id != target.id) continue;
        }
        Pose t_mr, t_mt;
        try {
          t_mr = mcs_pose(ds.streams, robot_frame, t);
          t_mt = mcs_pose(ds.streams, target.frame, t);
        } catch (const CalibError& e) {
          if (e.code() != ErrorCode::kMissingPose) throw;
          skip(t, sensor.id, target.id, "missing_pose");
          continue;
        }
        const Pose t_st = target_in_sensor(t_rs, t_mr, t_mt);
        if (!gate_fov(sensor, t_st, target.spec, gates.fov_fraction)) {
          skip(t, sensor.id, target.id, "fov");
          continue;
        }
        bool slow = false;
        try {
          slow = gate_velocity(ds.streams, t, target.frame, robot_frame, gates.max_linear_velocity,
                               gates.max_angular_velocity, gates.velocity_dt);
        } catch (const CalibError& e) {
          if (e.code() != ErrorCode::kMissingPose) throw;
          skip(t, sensor.id, target.id, "missing_pose");
          continue;
        }
        if (!slow) {
          skip(t, sensor.id, target.id, "velocity");
          continue;
        }

        MeasurementSet m;
        m.timestamp = t;
        m.sensor_id = sensor.id;
        m.target_id = target.id;
        m.kind = sensor.kind;
        m.t_mt = t_mt;
        m.t_mr = t_mr;
        if (sensor.kind == SensorKind::kLidar) {
          const auto& scan = ds.scans.at(sensor.id)[ri];
          const auto cropped = crop_to_target(scan.points, t_st, target.spec, gates.crop_padding);
          if (cropped.empty()) {
            skip(t, sensor.id, target.id, "crop_empty");
            continue;
          }
          const double tol = std::max(gates.cluster_tolerance_floor,
                                      cluster_tolerance_for(t_st.translation.norm(),
                                                            sensor.angular_resolution_deg * kRadPerDeg,
                                                            gates.cluster_safety_factor));
          const auto idx = euclidean_cluster(cropped, tol, gates.min_cluster_size);
          std::vector<std::vector<Vec3>> clusters;
          for (const auto& c : idx) {
            std::vector<Vec3> pts;
            pts.reserve(c.size());
            for (auto i : c) pts.push_back(cropped[i]);
            clusters.push_back(std::move(pts));
          }
          if (clusters.empty()) {
            skip(t, sensor.id, target.id, "no_cluster");
            continue;
          }
          const auto choice = select_cluster(clusters, t_st, target.spec, gates.weights, gates.reject_distance);
          if (!choice) {
            skip(t, sensor.id, target.id, "cluster_rejected");
            continue;
          }
          m.lidar_points = std::move(clusters[choice->index]);
        } else {
          const auto& det = ds.detections.at(sensor.id)[ri];
          const auto& c = sensor.intrinsics;
          for (std::size_t i = 0; i < det.pixels.size(); ++i) {
            const Vec2& px = det.pixels[i];
            if (px.x() < 0 || px.y() < 0 || px.x() >= c.width || px.y() >= c.height) continue;
            m.pixels.push_back(px);
            if (det.keypoint_ids) m.keypoint_ids.push_back((*det.keypoint_ids)[i]);
          }
          if (m.pixels.empty()) {
            skip(t, sensor.id, target.id, "empty");
            continue;
          }
        }
        out.measurements.push_back(std::move(m));
      }
    }
  }
  std::stable_sort(out.measurements.begin(), out.measurements.end(), [](const MeasurementSet& a, const MeasurementSet& b) {
    return std::tie(a.timestamp, a.sensor_id, a.target_id) < std::tie(b.timestamp, b.sensor_id, b.target_id);
  });
  std::stable_sort(out.skipped.begin(), out.skipped.end(), [](const SkipRecord& a, const SkipRecord& b) {
    return std::tie(a.timestamp, a.sensor_id, a.target_id) < std::tie(b.timestamp, b.sensor_id, b.target_id);
  });
  return out;
}

inline std::string extraction_log_csv(const std::vector<SkipRecord>& skipped) {
  std::string s = "timestamp,sensor,target,reason\n";
  char buf[64];
  for (const auto& r : skipped) {
    std::snprintf(buf, sizeof(buf), "%.9f", r.timestamp);
    s += std::string(buf) + "," + r.sensor_id + "," + r.target_id + "," + r.reason + "\n";
  }
  return s;
}

// ---------------------------------------------------------------------------
// Measurement serialization (measurements.jsonl)

inline json measurement_to_json(const MeasurementSet& m) {
  json j{{"t", m.timestamp},
         {"sensor", m.sensor_id},
         {"target", m.target_id},
         {"kind", to_string(m.kind)},
         {"t_mt", pose_to_json(m.t_mt)},
         {"t_mr", pose_to_json(m.t_mr)}};
  json pts = json::array();
  if (m.kind == SensorKind::kLidar) {
    for (const auto& p : m.lidar_points) pts.push_back(vec_to_json(p));
    j["points"] = std::move(pts);
  } else {
    for (const auto& p : m.pixels) pts.push_back(vec_to_json(p));
    j["pixels"] = std::move(pts);
    if (m.has_ids()) j["ids"] = m.keypoint_ids;
  }
  return j;
}

inline std::string measurements_jsonl(const std::vector<MeasurementSet>& ms) {
  std::string s;
  for (const auto& m : ms) s += measurement_to_json(m).dump() + "\n";
  return s;
}

inline std::vector<MeasurementSet> load_measurements(const fs::path& path) {
  std::vector<MeasurementSet> out;
  detail::for_each_json_line(path, [&](const json& j, const std::string& where) {
    MeasurementSet m;
    m.timestamp = detail::stamp_field(j, where);
    for (const char* key : {"sensor", "target", "kind", "t_mt", "t_mr"}) {
      if (!j.contains(key)) detail::parse_fail(where, std::string("missing \"") + key + "\"");
    }
    m.sensor_id = j["sensor"].get<std::string>();
    m.target_id = j["target"].get<std::string>();
    const std::string kind = j["kind"].get<std::string>();
    if (kind != "lidar" && kind != "camera") detail::parse_fail(where, "kind must be lidar or camera");
    m.kind = kind == "lidar" ? SensorKind::kLidar : SensorKind::kCamera;
    m.t_mt = detail::pose_from_json(j["t_mt"], where);
    m.t_mr = detail::pose_from_json(j["t_mr"], where);
    if (m.kind == SensorKind::kLidar) {
      if (!j.contains("points")) detail::parse_fail(where, "missing \"points\"");
      m.lidar_points = detail::vector_list<3>(j["points"], where);
    } else {
      if (!j.contains("pixels")) detail::parse_fail(where, "missing \"pixels\"");
      m.pixels = detail::vector_list<2>(j["pixels"], where);
      if (j.contains("ids")) m.keypoint_ids = j["ids"].get<std::vector<int>>();
    }
    out.push_back(std::move(m));
  });
  return out;
}

}  // namespace mcs_calib
