#pragma once

#include <string>
#include <vector>

#include "mcs_calib/se3.hpp"

namespace mcs_calib {

enum class SensorKind { kLidar, kCamera };

inline std::string to_string(SensorKind k) { return k == SensorKind::kLidar ? "lidar" : "camera"; }

/// One accepted target observation by one sensor, with the MCS poses
/// interpolated to the observation time.
struct MeasurementSet {
  double timestamp = 0.0;
  std::string sensor_id;
  std::string target_id;
  SensorKind kind = SensorKind::kLidar;
  std::vector<Vec3> lidar_points;  ///< sensor frame (m), lidar only
  std::vector<Vec2> pixels;        ///< camera only
  std::vector<int> keypoint_ids;   ///< parallel to pixels when known
  Pose t_mt;                       ///< target -> map
  Pose t_mr;                       ///< robot -> map

  bool has_ids() const { return !keypoint_ids.empty() && keypoint_ids.size() == pixels.size(); }
  std::size_t size() const { return kind == SensorKind::kLidar ? lidar_points.size() : pixels.size(); }
};

}  // namespace mcs_calib
