#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Geometry>

#include "mcs_calib/error.hpp"
#include "mcs_calib/random.hpp"

namespace mcs_calib {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;
using Quat = Eigen::Quaterniond;

/// Angle-axis rotation (rad) in the first three entries, translation (m) in
/// the last three. This is also the layout of every solver parameter block.
using PoseVec6 = Eigen::Matrix<double, 6, 1>;

inline constexpr double kDegPerRad = 180.0 / std::numbers::pi;
inline constexpr double kRadPerDeg = std::numbers::pi / 180.0;

inline Mat3 skew(const Vec3& v) {
  Mat3 m;
  m << 0.0, -v.z(), v.y(), v.z(), 0.0, -v.x(), -v.y(), v.x(), 0.0;
  return m;
}

/// Rotation vector to unit quaternion.
inline Quat exp_rotation(const Vec3& omega) {
  const double theta = omega.norm();
  if (theta < 1e-12) {
    Quat q(1.0, 0.5 * omega.x(), 0.5 * omega.y(), 0.5 * omega.z());
    return q.normalized();
  }
  const Vec3 axis = omega / theta;
  const double s = std::sin(0.5 * theta);
  return Quat(std::cos(0.5 * theta), s * axis.x(), s * axis.y(), s * axis.z());
}

/// Unit quaternion to rotation vector with angle in [0, pi].
inline Vec3 log_rotation(const Quat& q_in) {
  Quat q = q_in.normalized();
  if (q.w() < 0.0) q.coeffs() = -q.coeffs();
  const Vec3 v = q.vec();
  const double n = v.norm();
  if (n < 1e-12) return 2.0 * v / q.w();
  const double theta = 2.0 * std::atan2(n, q.w());
  return theta * v / n;
}

/// Rigid transform x -> R x + t. The subscript convention T_AB maps points
/// expressed in frame B into frame A.
struct Pose {
  Quat rotation = Quat::Identity();
  Vec3 translation = Vec3::Zero();

  Pose() = default;
  /// Renormalizes only when the quaternion has drifted, so already-unit
  /// input is stored bit-for-bit.
  Pose(const Quat& q, const Vec3& t) : rotation(q), translation(t) {
    if (std::abs(rotation.squaredNorm() - 1.0) > 1e-14) rotation.normalize();
  }

  static Pose identity() { return {}; }
  static Pose from_translation(const Vec3& t) { return {Quat::Identity(), t}; }
  static Pose from_rotation(const Quat& q) { return {q, Vec3::Zero()}; }

  static Pose from_matrix(const Mat4& m) {
    return {Quat(Mat3(m.topLeftCorner<3, 3>())), m.topRightCorner<3, 1>()};
  }

  Mat4 matrix() const {
    Mat4 m = Mat4::Identity();
    m.topLeftCorner<3, 3>() = rotation.toRotationMatrix();
    m.topRightCorner<3, 1>() = translation;
    return m;
  }

  Vec3 operator*(const Vec3& x) const { return rotation * x + translation; }

  /// Applies rhs first, then *this.
  Pose operator*(const Pose& rhs) const {
    return {rotation * rhs.rotation, rotation * rhs.translation + translation};
  }

  Pose inverse() const {
    const Quat q_inv = rotation.conjugate();
    return {q_inv, -(q_inv * translation)};
  }

  /// Rotation angle in radians, in [0, pi].
  double angle() const { return log_rotation(rotation).norm(); }
};

inline Pose compose(const Pose& a, const Pose& b) { return a * b; }
inline Pose inverse(const Pose& p) { return p.inverse(); }
inline Vec3 transform_point(const Pose& p, const Vec3& x) { return p * x; }

inline PoseVec6 to_vec6(const Pose& p) {
  PoseVec6 v;
  v.head<3>() = log_rotation(p.rotation);
  v.tail<3>() = p.translation;
  return v;
}

inline Pose from_vec6(const PoseVec6& v) {
  return {exp_rotation(v.head<3>()), v.tail<3>()};
}

/// Left-multiplicative local update used by the solver:
/// (R, t) -> (exp(d_rot) R, exp(d_rot) t + d_trans).
inline Pose retract_left(const Pose& p, const PoseVec6& delta) {
  return from_vec6(delta) * p;
}

inline Pose rotation_x(double rad) { return Pose::from_rotation(Quat(Eigen::AngleAxisd(rad, Vec3::UnitX()))); }
inline Pose rotation_y(double rad) { return Pose::from_rotation(Quat(Eigen::AngleAxisd(rad, Vec3::UnitY()))); }
inline Pose rotation_z(double rad) { return Pose::from_rotation(Quat(Eigen::AngleAxisd(rad, Vec3::UnitZ()))); }

struct PoseError {
  double rotational_deg = 0.0;
  double translational_m = 0.0;
};

/// Difference of angle-axis magnitudes and of translation norms. Compares
/// magnitudes only; see relative_pose_error for the transform-level metric.
inline PoseError pose_error(const Pose& estimate, const Pose& truth) {
  return {std::abs(estimate.angle() - truth.angle()) * kDegPerRad,
          std::abs(estimate.translation.norm() - truth.translation.norm())};
}

/// Angle of inv(truth) * estimate and distance between translations.
inline PoseError relative_pose_error(const Pose& estimate, const Pose& truth) {
  const Pose d = truth.inverse() * estimate;
  return {d.angle() * kDegPerRad, (estimate.translation - truth.translation).norm()};
}

/// Uniform per-DOF perturbation. Rotation is Rz * Ry * Rx, i.e. the x
/// rotation is applied first.
inline Pose sample_perturbation(double max_trans, double max_rot_deg, std::uint64_t seed) {
  Rng rng(seed);
  Vec3 t;
  for (int i = 0; i < 3; ++i) t[i] = rng.uniform(-max_trans, max_trans);
  double ang[3];
  for (double& a : ang) a = rng.uniform(-max_rot_deg, max_rot_deg) * kRadPerDeg;
  const Pose r = rotation_z(ang[2]) * rotation_y(ang[1]) * rotation_x(ang[0]);
  return {r.rotation, t};
}

/// Rotation pre-multiplied, translation added per DOF.
inline Pose apply_perturbation(const Pose& truth, const Pose& perturbation) {
  return {perturbation.rotation * truth.rotation, truth.translation + perturbation.translation};
}

struct TimedPose {
  double stamp = 0.0;
  Pose pose;
};

/// Time-ordered pose samples of one tracked body.
class TimedPoseStream {
 public:
  TimedPoseStream() = default;

  explicit TimedPoseStream(std::vector<TimedPose> samples) : samples_(std::move(samples)) {
    for (std::size_t i = 1; i < samples_.size(); ++i) {
      if (!(samples_[i].stamp > samples_[i - 1].stamp)) {
        throw CalibError(ErrorCode::kNonMonotonicTimestamps,
                         "sample " + std::to_string(i) + " at t=" + std::to_string(samples_[i].stamp));
      }
    }
  }

  const std::vector<TimedPose>& samples() const { return samples_; }
  bool empty() const { return samples_.empty(); }
  std::size_t size() const { return samples_.size(); }
  double first_stamp() const { return samples_.front().stamp; }
  double last_stamp() const { return samples_.back().stamp; }

  bool covers(double t) const {
    return !samples_.empty() && t >= samples_.front().stamp && t <= samples_.back().stamp;
  }

  /// Linear translation, slerp rotation between the bracketing samples.
  Pose interpolate(double t) const {
    if (samples_.empty()) throw CalibError(ErrorCode::kEmptyStream, "no samples");
    if (!covers(t)) {
      throw CalibError(ErrorCode::kOutOfRange,
                       "t=" + std::to_string(t) + " outside [" + std::to_string(first_stamp()) + ", " +
                           std::to_string(last_stamp()) + "]");
    }
    auto it = std::lower_bound(samples_.begin(), samples_.end(), t,
                               [](const TimedPose& s, double v) { return s.stamp < v; });
    if (it->stamp == t) return it->pose;
    const TimedPose& hi = *it;
    const TimedPose& lo = *(it - 1);
    const double s = (t - lo.stamp) / (hi.stamp - lo.stamp);
    return {lo.pose.rotation.slerp(s, hi.pose.rotation),
            (1.0 - s) * lo.pose.translation + s * hi.pose.translation};
  }

 private:
  std::vector<TimedPose> samples_;
};

inline Pose interpolate(const TimedPoseStream& stream, double t) { return stream.interpolate(t); }

}  // namespace mcs_calib
