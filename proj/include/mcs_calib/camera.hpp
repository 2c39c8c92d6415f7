#pragma once

#include <cmath>
#include <optional>

#include "mcs_calib/se3.hpp"

namespace mcs_calib {

/// Pinhole intrinsics with 4-parameter radial-tangential distortion
/// (k1, k2, p1, p2) applied in normalized image coordinates.
struct CameraIntrinsics {
  double fx = 0.0;
  double fy = 0.0;
  double cx = 0.0;
  double cy = 0.0;
  double k1 = 0.0;
  double k2 = 0.0;
  double p1 = 0.0;
  double p2 = 0.0;
  int width = 0;
  int height = 0;

  bool valid() const { return fx > 0.0 && fy > 0.0 && width > 0 && height > 0; }

  /// Horizontal field of view in degrees for an undistorted camera.
  double horizontal_fov_deg() const {
    return 2.0 * std::atan2(0.5 * width, fx) * kDegPerRad;
  }
};

/// Points with depth at or below this are reported as behind the camera.
inline constexpr double kMinProjectionDepth = 1e-6;

inline Vec2 distort(const CameraIntrinsics& c, const Vec2& n) {
  const double x = n.x();
  const double y = n.y();
  const double r2 = x * x + y * y;
  const double radial = 1.0 + c.k1 * r2 + c.k2 * r2 * r2;
  return {x * radial + 2.0 * c.p1 * x * y + c.p2 * (r2 + 2.0 * x * x),
          y * radial + c.p1 * (r2 + 2.0 * y * y) + 2.0 * c.p2 * x * y};
}

/// d(distorted)/d(normalized).
inline Eigen::Matrix2d distort_jacobian(const CameraIntrinsics& c, const Vec2& n) {
  const double x = n.x();
  const double y = n.y();
  const double r2 = x * x + y * y;
  const double radial = 1.0 + c.k1 * r2 + c.k2 * r2 * r2;
  const double dradial_dr2 = c.k1 + 2.0 * c.k2 * r2;
  Eigen::Matrix2d j;
  j(0, 0) = radial + 2.0 * x * x * dradial_dr2 + 2.0 * c.p1 * y + 6.0 * c.p2 * x;
  j(0, 1) = 2.0 * x * y * dradial_dr2 + 2.0 * c.p1 * x + 2.0 * c.p2 * y;
  j(1, 0) = 2.0 * x * y * dradial_dr2 + 2.0 * c.p1 * x + 2.0 * c.p2 * y;
  j(1, 1) = radial + 2.0 * y * y * dradial_dr2 + 6.0 * c.p1 * y + 2.0 * c.p2 * x;
  return j;
}

/// Pixel coordinates of a camera-frame point, or nullopt when the point is
/// not in front of the camera.
inline std::optional<Vec2> project(const CameraIntrinsics& c, const Vec3& p) {
  if (p.z() <= kMinProjectionDepth) return std::nullopt;
  const Vec2 d = distort(c, Vec2(p.x() / p.z(), p.y() / p.z()));
  return Vec2(c.fx * d.x() + c.cx, c.fy * d.y() + c.cy);
}

/// d(pixel)/d(point). Caller guarantees the point is in front.
inline Eigen::Matrix<double, 2, 3> project_jacobian(const CameraIntrinsics& c, const Vec3& p) {
  const double iz = 1.0 / p.z();
  const Vec2 n(p.x() * iz, p.y() * iz);
  Eigen::Matrix<double, 2, 3> dn;
  dn << iz, 0.0, -n.x() * iz, 0.0, iz, -n.y() * iz;
  Eigen::Matrix2d f = Eigen::Matrix2d::Zero();
  f(0, 0) = c.fx;
  f(1, 1) = c.fy;
  return f * distort_jacobian(c, n) * dn;
}

/// Inverts the distortion by Gauss-Newton; returns normalized coordinates.
inline Vec2 undistort_normalized(const CameraIntrinsics& c, const Vec2& distorted, int iterations = 20) {
  Vec2 n = distorted;
  for (int i = 0; i < iterations; ++i) {
    const Vec2 r = distort(c, n) - distorted;
    if (r.norm() < 1e-15) break;
    n -= distort_jacobian(c, n).lu().solve(r);
  }
  return n;
}

inline Vec2 pixel_to_normalized(const CameraIntrinsics& c, const Vec2& px) {
  return undistort_normalized(c, Vec2((px.x() - c.cx) / c.fx, (px.y() - c.cy) / c.fy));
}

/// Margin shrinks the accepted region on every side.
inline bool in_camera_fov(const CameraIntrinsics& c, const Vec3& p, double margin_px = 0.0) {
  const auto px = project(c, p);
  if (!px) return false;
  return px->x() >= margin_px && px->x() < c.width - margin_px && px->y() >= margin_px &&
         px->y() < c.height - margin_px;
}

struct LidarFov {
  double min_azimuth_deg = -180.0;
  double max_azimuth_deg = 180.0;
  double min_elevation_deg = -15.0;
  double max_elevation_deg = 15.0;
  double min_range = 0.3;
  double max_range = 100.0;

  bool valid() const {
    return min_azimuth_deg < max_azimuth_deg && min_elevation_deg < max_elevation_deg &&
           min_range > 0.0 && min_range < max_range;
  }
};

/// Spherical containment: azimuth about +z from +x, elevation from the xy plane.
inline bool in_lidar_fov(const LidarFov& fov, const Vec3& p) {
  const double range = p.norm();
  if (range < fov.min_range || range > fov.max_range) return false;
  const double elevation = std::atan2(p.z(), std::hypot(p.x(), p.y())) * kDegPerRad;
  if (elevation < fov.min_elevation_deg || elevation > fov.max_elevation_deg) return false;
  const double span = fov.max_azimuth_deg - fov.min_azimuth_deg;
  if (span >= 360.0) return true;
  double azimuth = std::atan2(p.y(), p.x()) * kDegPerRad;
  // Bring azimuth into [min, min + 360).
  azimuth = fov.min_azimuth_deg + std::fmod(std::fmod(azimuth - fov.min_azimuth_deg, 360.0) + 360.0, 360.0);
  return azimuth <= fov.max_azimuth_deg;
}

}  // namespace mcs_calib
