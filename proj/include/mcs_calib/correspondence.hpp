#pragma once

#include <optional>
#include <span>
#include <vector>

#include "mcs_calib/camera.hpp"
#include "mcs_calib/error.hpp"
#include "mcs_calib/kdtree.hpp"
#include "mcs_calib/se3.hpp"

namespace mcs_calib {

struct CorrespondencePair {
  std::size_t measured = 0;
  std::size_t keypoint = 0;
  /// Distance after centroid alignment (m or px).
  double distance = 0.0;

  bool operator==(const CorrespondencePair& o) const { return measured == o.measured && keypoint == o.keypoint; }
};

struct CorrespondenceSet {
  std::vector<CorrespondencePair> pairs;
  double max_pair_distance = 0.0;
};

struct CorrespondenceOptions {
  double max_distance = 0.05;
  /// Re-centering passes over the matched subset; 0 aligns the full-cloud
  /// centroids only.
  int refine_iterations = 30;
};

/// Centroid-aligned nearest-neighbor matching. The keypoints are shifted so
/// their centroid meets the measured centroid; the shift is then re-estimated
/// from the matched pairs until the assignment stops changing. Returned
/// indices refer to the unshifted keypoints.
///
/// `nearest(q)` returns the index into `keypoints` nearest to q.
template <int Dim, class Nearest>
CorrespondenceSet match_centroid_aligned(std::span<const Eigen::Matrix<double, Dim, 1>> measured,
                                         std::span<const Eigen::Matrix<double, Dim, 1>> keypoints,
                                         Nearest&& nearest, const CorrespondenceOptions& opt) {
  using P = Eigen::Matrix<double, Dim, 1>;
  if (measured.empty() || keypoints.empty()) throw CalibError(ErrorCode::kEmptyInput, "correspondence needs points");

  P c_meas = P::Zero();
  for (const auto& m : measured) c_meas += m;
  c_meas /= static_cast<double>(measured.size());
  P c_key = P::Zero();
  for (const auto& k : keypoints) c_key += k;
  c_key /= static_cast<double>(keypoints.size());

  const std::size_t n = measured.size();
  auto match = [&](const P& s, std::vector<std::size_t>& out) {
    for (std::size_t i = 0; i < n; ++i) out[i] = nearest(P(measured[i] - s));
  };
  struct Candidate {
    P shift;
    std::vector<std::size_t> assign;
    double cost;
  };
  auto refine = [&](P shift) {
    std::vector<std::size_t> assign(n), next(n);
    match(shift, assign);
    for (int it = 0; it < opt.refine_iterations; ++it) {
      P mean = P::Zero();
      for (std::size_t i = 0; i < n; ++i) mean += measured[i] - keypoints[assign[i]];
      mean /= static_cast<double>(n);
      match(mean, next);
      shift = mean;
      if (next == assign) break;
      assign.swap(next);
    }
    double cost = 0.0;
    for (std::size_t i = 0; i < n; ++i) cost += (measured[i] - shift - keypoints[assign[i]]).squaredNorm();
    return Candidate{shift, std::move(assign), cost};
  };
  // A partial view's centroid is biased against the full keypoint set, and on
  // flat targets the shift update barely moves it. Also start from the
  // current estimate and keep the tighter fit.
  Candidate best = refine(P::Zero());
  Candidate aligned = refine(P(c_meas - c_key));
  if (aligned.cost < best.cost) best = std::move(aligned);
  const P shift = best.shift;
  const std::vector<std::size_t>& assign = best.assign;

  CorrespondenceSet out;
  out.max_pair_distance = opt.max_distance;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = (measured[i] - shift - keypoints[assign[i]]).norm();
    if (d <= opt.max_distance) out.pairs.push_back({i, assign[i], d});
  }
  return out;
}

/// Kd-tree over a target's keypoints in the target frame; queries are
/// transformed into that frame instead of re-building per pose.
class KeypointIndex3d {
 public:
  explicit KeypointIndex3d(std::vector<Vec3> keypoints)
      : keypoints_(std::move(keypoints)), tree_(std::span<const Vec3>(keypoints_)) {}
  KeypointIndex3d(const KeypointIndex3d&) = delete;
  KeypointIndex3d& operator=(const KeypointIndex3d&) = delete;

  const std::vector<Vec3>& keypoints() const { return keypoints_; }
  const KdTree<3>& tree() const { return tree_; }

 private:
  std::vector<Vec3> keypoints_;
  KdTree<3> tree_;
};

/// 3D correspondences between measured lidar points and target keypoints
/// placed by `target_in_lidar`.
inline CorrespondenceSet correspond_3d(std::span<const Vec3> measured, const KeypointIndex3d& index,
                                       const Pose& target_in_lidar, const CorrespondenceOptions& opt) {
  if (index.keypoints().empty()) throw CalibError(ErrorCode::kEmptyInput, "no keypoints");
  std::vector<Vec3> transformed;
  transformed.reserve(index.keypoints().size());
  for (const auto& k : index.keypoints()) transformed.push_back(target_in_lidar * k);
  const Pose lidar_in_target = target_in_lidar.inverse();
  auto nearest = [&](const Vec3& q) { return index.tree().nearest(lidar_in_target * q).index; };
  return match_centroid_aligned<3>(measured, std::span<const Vec3>(transformed), nearest, opt);
}

inline CorrespondenceSet correspond_3d(std::span<const Vec3> measured, std::span<const Vec3> keypoints,
                                       const Pose& target_in_lidar, const CorrespondenceOptions& opt) {
  const KeypointIndex3d index(std::vector<Vec3>(keypoints.begin(), keypoints.end()));
  return correspond_3d(measured, index, target_in_lidar, opt);
}

/// 2D correspondences in pixel space. Known keypoint ids bypass the search.
inline CorrespondenceSet correspond_2d(std::span<const Vec2> pixels, std::span<const Vec3> keypoints,
                                       const Pose& target_in_camera, const CameraIntrinsics& intrinsics,
                                       const CorrespondenceOptions& opt,
                                       std::optional<std::span<const int>> ids = std::nullopt) {
  if (pixels.empty() || keypoints.empty()) throw CalibError(ErrorCode::kEmptyInput, "correspondence needs points");
  if (ids) {
    CorrespondenceSet out;
    out.max_pair_distance = opt.max_distance;
    for (std::size_t i = 0; i < pixels.size() && i < ids->size(); ++i) {
      const int id = (*ids)[i];
      if (id >= 0 && static_cast<std::size_t>(id) < keypoints.size()) {
        out.pairs.push_back({i, static_cast<std::size_t>(id), 0.0});
      }
    }
    return out;
  }

  std::vector<Vec2> projected;
  std::vector<std::size_t> original;
  for (std::size_t k = 0; k < keypoints.size(); ++k) {
    if (auto px = project(intrinsics, target_in_camera * keypoints[k])) {
      projected.push_back(*px);
      original.push_back(k);
    }
  }
  if (projected.empty()) throw CalibError(ErrorCode::kAllBehindCamera, "no keypoint projects in front of the camera");

  const KdTree<2> tree{std::span<const Vec2>(projected)};
  auto nearest = [&](const Vec2& q) { return tree.nearest(q).index; };
  CorrespondenceSet out = match_centroid_aligned<2>(pixels, std::span<const Vec2>(projected), nearest, opt);
  for (auto& p : out.pairs) p.keypoint = original[p.keypoint];
  return out;
}

}  // namespace mcs_calib
