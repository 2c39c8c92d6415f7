#pragma once

#include <array>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Eigenvalues>

#include "mcs_calib/error.hpp"
#include "mcs_calib/kdtree.hpp"
#include "mcs_calib/random.hpp"
#include "mcs_calib/se3.hpp"

namespace mcs_calib {

struct Aabb {
  Vec3 min = Vec3::Zero();
  Vec3 max = Vec3::Zero();

  bool contains(const Vec3& p, double padding = 0.0) const {
    return (p.array() >= min.array() - padding).all() && (p.array() <= max.array() + padding).all();
  }
  Vec3 extent() const { return max - min; }
  Vec3 center() const { return 0.5 * (min + max); }
  double volume() const { return extent().prod(); }

  /// Corner i in [0, 8): bit k selects max along axis k.
  Vec3 corner(int i) const {
    return {(i & 1) ? max.x() : min.x(), (i & 2) ? max.y() : min.y(), (i & 4) ? max.z() : min.z()};
  }
};

enum class TargetKind { kDiamond, kCylinder, kCustom };

/// Calibration target geometry expressed in the target frame.
struct TargetSpec {
  std::string name;
  TargetKind kind = TargetKind::kCustom;
  std::vector<Vec3> lidar_keypoints;
  std::vector<Vec3> camera_keypoints;
  std::vector<Vec3> template_cloud;
  /// Surface normals parallel to lidar_keypoints; empty when unknown.
  std::vector<Vec3> lidar_keypoint_normals;
  /// In-surface outward direction for keypoints on the target rim, zero
  /// elsewhere; parallel to lidar_keypoints when present.
  std::vector<Vec3> lidar_keypoint_edge_normals;
  bool lidar_keypoints_unique = false;
  bool camera_keypoints_unique = false;
  Aabb bounding_extent;
  double volume = 0.0;
  /// Closed polylines (target frame) drawn in camera overlays.
  std::vector<std::vector<Vec3>> outlines;

  Vec3 template_centroid() const {
    Vec3 c = Vec3::Zero();
    for (const auto& p : template_cloud) c += p;
    return template_cloud.empty() ? c : Vec3(c / static_cast<double>(template_cloud.size()));
  }
};

struct DiamondParams {
  double board_width = 1.0;
  double board_height = 1.0;
  int rows = 5;  ///< checkerboard squares along y
  int cols = 5;  ///< checkerboard squares along x
  double square_size = 0.1;
  double thickness = 0.02;
  bool corner_keypoints = false;  ///< use the 4 diamond corners as lidar keypoints
};

struct CylinderParams {
  double radius = 0.1;
  double length = 1.0;
  int rim_samples = 36;
};

inline constexpr double kDefaultTemplateDensity = 1e4;

namespace detail {

/// Keypoints closer than this many template spacings to the rim count as rim.
inline constexpr double kRimWidthSpacings = 2.0;

/// Stratified sampling of exactly `count` points in the unit square: a
/// jittered n x n grid (n^2 >= count) from which count cells are kept.
inline std::vector<Vec2> stratified_unit_square(std::size_t count, std::uint64_t seed, double jitter) {
  const auto n = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(count))));
  std::vector<std::size_t> cells(n * n);
  for (std::size_t i = 0; i < cells.size(); ++i) cells[i] = i;
  Rng rng(seed);
  // Partial Fisher-Yates: the first `count` entries become a uniform subset.
  for (std::size_t i = 0; i < count; ++i) std::swap(cells[i], cells[i + rng.index(cells.size() - i)]);
  std::sort(cells.begin(), cells.begin() + static_cast<std::ptrdiff_t>(count));
  std::vector<Vec2> out;
  out.reserve(count);
  const double step = 1.0 / static_cast<double>(n);
  for (std::size_t k = 0; k < count; ++k) {
    const double iu = static_cast<double>(cells[k] % n);
    const double iv = static_cast<double>(cells[k] / n);
    out.emplace_back((iu + 0.5 + jitter * (rng.uniform() - 0.5)) * step,
                     (iv + 0.5 + jitter * (rng.uniform() - 0.5)) * step);
  }
  return out;
}

inline std::uint64_t param_seed(std::initializer_list<double> values) {
  std::uint64_t h = 0x12345678abcdefULL;
  for (double v : values) h = mix_seed(h, static_cast<std::uint64_t>(std::llround(v * 1e9)));
  return h;
}

}  // namespace detail

/// Diamond board (corners on the x and y axes) with a centered checkerboard.
/// Target frame: origin at the board center, z along the board normal.
inline TargetSpec make_diamond(const DiamondParams& p, double template_density = kDefaultTemplateDensity) {
  if (!(p.board_width > 0 && p.board_height > 0 && p.rows > 1 && p.cols > 1 && p.square_size > 0 &&
        p.thickness > 0 && template_density > 0)) {
    throw CalibError(ErrorCode::kDegenerateParams, "diamond parameters must be positive, rows/cols > 1");
  }
  const double hw = 0.5 * p.board_width;
  const double hh = 0.5 * p.board_height;
  const double cb_hx = 0.5 * p.cols * p.square_size;
  const double cb_hy = 0.5 * p.rows * p.square_size;
  if (cb_hx / hw + cb_hy / hh > 1.0 + 1e-12) {
    throw CalibError(ErrorCode::kDegenerateParams, "checkerboard does not fit inside the diamond");
  }

  TargetSpec spec;
  spec.name = "diamond";
  spec.kind = TargetKind::kDiamond;

  for (int r = 1; r < p.rows; ++r) {
    for (int c = 1; c < p.cols; ++c) {
      spec.camera_keypoints.emplace_back(c * p.square_size - cb_hx, r * p.square_size - cb_hy, 0.0);
    }
  }
  spec.camera_keypoints_unique = true;

  // The unit square maps affinely onto the diamond, so stratified samples in
  // (u, v) stay uniform over the board area.
  const double area = p.board_width * p.board_height / 2.0;
  const auto count = static_cast<std::size_t>(std::llround(template_density * area));
  const auto uv = detail::stratified_unit_square(
      std::max<std::size_t>(count, 1),
      detail::param_seed({p.board_width, p.board_height, template_density}), 0.4);
  spec.template_cloud.reserve(uv.size());
  for (const auto& s : uv) {
    spec.template_cloud.emplace_back((s.x() - s.y()) * hw, (s.x() + s.y() - 1.0) * hh, 0.0);
  }

  const std::vector<Vec3> corners = {{hw, 0, 0}, {0, hh, 0}, {-hw, 0, 0}, {0, -hh, 0}};
  if (p.corner_keypoints) {
    spec.lidar_keypoints = corners;
    spec.lidar_keypoints_unique = false;
  } else {
    spec.lidar_keypoints = spec.template_cloud;
    spec.lidar_keypoint_normals.assign(spec.lidar_keypoints.size(), Vec3::UnitZ());
    spec.lidar_keypoints_unique = false;
    const Vec3 grad(1.0 / hw, 1.0 / hh, 0.0);
    const double margin = detail::kRimWidthSpacings / std::sqrt(template_density);
    for (const auto& k : spec.lidar_keypoints) {
      const double to_edge = (1.0 - std::abs(k.x()) / hw - std::abs(k.y()) / hh) / grad.norm();
      const Vec3 out(std::copysign(1.0 / hw, k.x()), std::copysign(1.0 / hh, k.y()), 0.0);
      spec.lidar_keypoint_edge_normals.push_back(to_edge < margin ? Vec3(out.normalized()) : Vec3::Zero());
    }
  }

  spec.bounding_extent = {Vec3(-hw, -hh, -0.5 * p.thickness), Vec3(hw, hh, 0.5 * p.thickness)};
  spec.volume = spec.bounding_extent.volume();
  spec.outlines.push_back(corners);
  spec.outlines.push_back({{-cb_hx, -cb_hy, 0}, {cb_hx, -cb_hy, 0}, {cb_hx, cb_hy, 0}, {-cb_hx, cb_hy, 0}});
  return spec;
}

/// Cylinder lateral surface; axis along target z through the origin.
inline TargetSpec make_cylinder(const CylinderParams& p, double template_density = kDefaultTemplateDensity) {
  if (!(p.radius > 0 && p.length > 0 && p.rim_samples >= 3 && template_density > 0)) {
    throw CalibError(ErrorCode::kDegenerateParams, "cylinder radius/length must be positive");
  }
  TargetSpec spec;
  spec.name = "cylinder";
  spec.kind = TargetKind::kCylinder;

  const double spacing = 1.0 / std::sqrt(template_density);
  const auto n_theta = std::max<long>(8, std::lround(2.0 * std::numbers::pi * p.radius / spacing));
  const auto n_z = std::max<long>(2, std::lround(p.length / spacing));
  Rng rng(detail::param_seed({p.radius, p.length, template_density}));
  const double jitter = 0.4;
  for (long iz = 0; iz < n_z; ++iz) {
    for (long it = 0; it < n_theta; ++it) {
      const double theta = 2.0 * std::numbers::pi * (it + 0.5 + jitter * (rng.uniform() - 0.5)) / n_theta;
      const double z = p.length * ((iz + 0.5 + jitter * (rng.uniform() - 0.5)) / n_z - 0.5);
      spec.template_cloud.emplace_back(p.radius * std::cos(theta), p.radius * std::sin(theta), z);
      spec.lidar_keypoint_normals.emplace_back(std::cos(theta), std::sin(theta), 0.0);
    }
  }
  spec.lidar_keypoints = spec.template_cloud;
  spec.lidar_keypoints_unique = false;
  const double margin = detail::kRimWidthSpacings * spacing;
  for (const auto& k : spec.lidar_keypoints) {
    spec.lidar_keypoint_edge_normals.push_back(std::abs(k.z()) > 0.5 * p.length - margin
                                                   ? Vec3(0.0, 0.0, std::copysign(1.0, k.z()))
                                                   : Vec3::Zero());
  }

  for (double z : {-0.5 * p.length, 0.5 * p.length}) {
    std::vector<Vec3> ring;
    for (int i = 0; i < p.rim_samples; ++i) {
      const double theta = 2.0 * std::numbers::pi * i / p.rim_samples;
      ring.emplace_back(p.radius * std::cos(theta), p.radius * std::sin(theta), z);
    }
    spec.camera_keypoints.insert(spec.camera_keypoints.end(), ring.begin(), ring.end());
    spec.outlines.push_back(std::move(ring));
  }
  spec.camera_keypoints_unique = false;

  spec.bounding_extent = {Vec3(-p.radius, -p.radius, -0.5 * p.length), Vec3(p.radius, p.radius, 0.5 * p.length)};
  spec.volume = std::numbers::pi * p.radius * p.radius * p.length;
  return spec;
}

/// Normals from the smallest principal axis of the k nearest neighbors.
inline std::vector<Vec3> estimate_normals(const std::vector<Vec3>& cloud, std::size_t k = 10) {
  std::vector<Vec3> normals(cloud.size(), Vec3::UnitZ());
  if (cloud.size() < 3) return normals;
  KdTree<3> tree{std::span<const Vec3>(cloud)};
  // Grow the radius until about k neighbors are found.
  Aabb box{cloud.front(), cloud.front()};
  for (const auto& p : cloud) {
    box.min = box.min.cwiseMin(p);
    box.max = box.max.cwiseMax(p);
  }
  const double diag = box.extent().norm();
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    double radius = diag / std::sqrt(static_cast<double>(cloud.size())) * 2.0;
    std::vector<std::size_t> nb = tree.radius_search(cloud[i], radius);
    while (nb.size() < std::min(k, cloud.size()) && radius < diag * 2.0) {
      radius *= 1.5;
      nb = tree.radius_search(cloud[i], radius);
    }
    Vec3 mean = Vec3::Zero();
    for (auto j : nb) mean += cloud[j];
    mean /= static_cast<double>(nb.size());
    Mat3 cov = Mat3::Zero();
    for (auto j : nb) cov += (cloud[j] - mean) * (cloud[j] - mean).transpose();
    Eigen::SelfAdjointEigenSolver<Mat3> es(cov);
    normals[i] = es.eigenvectors().col(0).normalized();
  }
  return normals;
}

/// Whitespace-separated "x y z" lines; blank lines and '#' comments skipped.
inline std::vector<Vec3> load_point_list(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw CalibError(ErrorCode::kIoError, "cannot open " + path);
  std::vector<Vec3> pts;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    std::istringstream ss(line);
    Vec3 p;
    if (!(ss >> p.x() >> p.y() >> p.z()) || !p.allFinite()) {
      throw CalibError(ErrorCode::kParseError, path + ":" + std::to_string(line_no) + ": expected three finite numbers");
    }
    pts.push_back(p);
  }
  return pts;
}

/// Builds a target from an arbitrary template. Empty keypoint lists fall back
/// to the template (non-unique).
inline TargetSpec make_custom(std::string name, std::vector<Vec3> template_cloud, std::vector<Vec3> lidar_keypoints,
                              bool lidar_unique, std::vector<Vec3> camera_keypoints, bool camera_unique) {
  if (template_cloud.empty()) throw CalibError(ErrorCode::kDegenerateParams, "custom target has an empty template");
  TargetSpec spec;
  spec.name = std::move(name);
  spec.kind = TargetKind::kCustom;
  spec.template_cloud = std::move(template_cloud);
  if (lidar_keypoints.empty()) {
    spec.lidar_keypoints = spec.template_cloud;
    spec.lidar_keypoints_unique = false;
  } else {
    spec.lidar_keypoints = std::move(lidar_keypoints);
    spec.lidar_keypoints_unique = lidar_unique;
  }
  spec.camera_keypoints = camera_keypoints.empty() ? spec.template_cloud : std::move(camera_keypoints);
  spec.camera_keypoints_unique = camera_unique && !spec.camera_keypoints.empty();
  spec.lidar_keypoint_normals = estimate_normals(spec.lidar_keypoints);

  Aabb box{spec.template_cloud.front(), spec.template_cloud.front()};
  for (const auto* set : {&spec.template_cloud, &spec.lidar_keypoints, &spec.camera_keypoints}) {
    for (const auto& p : *set) {
      box.min = box.min.cwiseMin(p);
      box.max = box.max.cwiseMax(p);
    }
  }
  // Flat templates still get a nominal thickness.
  for (int a = 0; a < 3; ++a) {
    if (box.max[a] - box.min[a] < 0.01) {
      const double c = 0.5 * (box.max[a] + box.min[a]);
      box.min[a] = c - 0.005;
      box.max[a] = c + 0.005;
    }
  }
  spec.bounding_extent = box;
  spec.volume = box.volume();
  return spec;
}

}  // namespace mcs_calib
