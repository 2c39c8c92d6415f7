#pragma once

#include <algorithm>
#include <cmath>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include <Eigen/Core>

#include "mcs_calib/camera.hpp"
#include "mcs_calib/correspondence.hpp"
#include "mcs_calib/error.hpp"
#include "mcs_calib/lm.hpp"
#include "mcs_calib/measurement.hpp"
#include "mcs_calib/parallel.hpp"
#include "mcs_calib/se3.hpp"
#include "mcs_calib/target.hpp"

namespace mcs_calib {

enum class LossKind { kNone, kHuber };

struct SolverSettings {
  double lm_init_lambda = 1e-6;
  double lm_lambda_up = 10.0;
  double lm_lambda_down = 0.1;
  double lm_max_lambda = 1e12;
  int max_inner_iterations = 100;
  double inner_cost_tolerance = 1e-10;
  int max_outer_iterations = 100;
  double outer_cost_tolerance = 1e-8;
  double outer_translation_tolerance = 1e-6;  ///< m
  double outer_rotation_tolerance_deg = 1e-5;
  LossKind loss = LossKind::kNone;
  double huber_delta = 0.03;

  bool estimate_te = true;
  /// Before the full point-to-point solve, run the outer loop with lidar
  /// residuals on surface keypoints reduced to their normal (and rim)
  /// components, so pairs on a sampled surface do not hold the target in
  /// place while the rim pulls it into alignment.
  bool sliding_stage = true;
  double te_prior_rotation_weight = 10.0;     ///< per rad
  double te_prior_translation_weight = 10.0;  ///< per m

  bool analytic_jacobians = false;
  double fd_step = 1e-6;
  double rank_condition_threshold = 1e12;
  bool check_rank = true;

  CorrespondenceOptions correspondence_3d{0.05, 30};
  CorrespondenceOptions correspondence_2d{20.0, 30};
  int threads = 1;

  LmSettings lm() const {
    LmSettings s;
    s.init_lambda = lm_init_lambda;
    s.lambda_up = lm_lambda_up;
    s.lambda_down = lm_lambda_down;
    s.max_lambda = lm_max_lambda;
    s.max_iterations = max_inner_iterations;
    s.relative_tolerance = inner_cost_tolerance;
    return s;
  }

  void validate() const {
    const bool ok = lm_init_lambda > 0 && lm_lambda_up > 1 && lm_lambda_down > 0 && lm_lambda_down < 1 &&
                    lm_max_lambda > lm_init_lambda && max_inner_iterations > 0 && inner_cost_tolerance > 0 &&
                    max_outer_iterations > 0 && outer_cost_tolerance > 0 && outer_translation_tolerance > 0 &&
                    outer_rotation_tolerance_deg > 0 && huber_delta > 0 && te_prior_rotation_weight >= 0 &&
                    te_prior_translation_weight >= 0 && fd_step > 0 && rank_condition_threshold > 1 &&
                    correspondence_3d.max_distance > 0 && correspondence_2d.max_distance > 0;
    if (!ok) throw CalibError(ErrorCode::kConfigError, "solver settings must be positive (lambda factors: up > 1 > down)");
  }
};

struct CalibrationState {
  std::map<std::string, Pose> extrinsics;         ///< T_RS per sensor
  std::map<std::string, Pose> target_alignments;  ///< T_E per target
  int outer_iterations = 0;
  int inner_iterations = 0;
  std::vector<double> cost_history;  ///< final cost of every outer iteration
  std::vector<std::vector<double>> inner_cost_histories;
  bool converged = false;
  bool correspondence_fixed_point = false;
  /// Stopped on a periodic correspondence orbit rather than a fixed point.
  bool limit_cycle = false;
  std::vector<std::string> unconstrained_sensors;
  std::size_t dropped_behind_camera = 0;

  Pose target_alignment(const std::string& id) const {
    const auto it = target_alignments.find(id);
    return it == target_alignments.end() ? Pose() : it->second;
  }
};

/// One keypoint correspondence of one measurement.
struct ResidualBlock {
  SensorKind kind = SensorKind::kLidar;
  std::string sensor_id;
  std::string target_id;
  std::size_t measurement = 0;
  std::size_t measured_index = 0;
  std::size_t keypoint_index = 0;
  Vec3 keypoint = Vec3::Zero();  ///< target frame
  Vec3 measured_point = Vec3::Zero();
  Vec2 measured_pixel = Vec2::Zero();
  Pose t_mt;
  Pose t_mr;
  Pose robot_from_target;  ///< inv(T_MR) * T_MT
  /// Target-frame surface normal for non-unique lidar keypoints.
  std::optional<Vec3> normal;
  /// In-surface rim direction; pins sliding across the target edge.
  std::optional<Vec3> edge_normal;
  /// Sensor-frame rows the lidar residual is reduced to (sliding stage).
  std::optional<Eigen::Matrix<double, Eigen::Dynamic, 3, 0, 2, 3>> projection;
  const CameraIntrinsics* intrinsics = nullptr;

  int dim() const { return kind == SensorKind::kLidar ? 3 : 2; }
};

using ResidualVec = Eigen::Matrix<double, Eigen::Dynamic, 1, 0, 3, 1>;
using BlockJacobian = Eigen::Matrix<double, Eigen::Dynamic, 12, 0, 3, 12>;

inline void apply_projection(const ResidualBlock& b, ResidualVec& r) {
  if (b.projection) r = ResidualVec(*b.projection * r);
}

inline void apply_projection(const ResidualBlock& b, BlockJacobian& J) {
  if (b.projection) J = BlockJacobian(*b.projection * J);
}

inline ResidualBlock make_block(SensorKind kind, const Pose& t_mt, const Pose& t_mr, const Vec3& keypoint) {
  ResidualBlock b;
  b.kind = kind;
  b.t_mt = t_mt;
  b.t_mr = t_mr;
  b.robot_from_target = t_mr.inverse() * t_mt;
  b.keypoint = keypoint;
  return b;
}

/// p_L - inv(T_RL) * inv(T_MR) * T_MT * T_E * k.
inline Vec3 lidar_residual(const Pose& t_rl, const Pose& t_e, const ResidualBlock& b) {
  return b.measured_point - t_rl.inverse() * (b.robot_from_target * (t_e * b.keypoint));
}

/// rho - pi(inv(T_RC) * inv(T_MR) * T_MT * T_E * k); nullopt when the point
/// lands behind the camera.
inline std::optional<Vec2> camera_residual(const Pose& t_rc, const Pose& t_e, const ResidualBlock& b) {
  const auto px = project(*b.intrinsics, t_rc.inverse() * (b.robot_from_target * (t_e * b.keypoint)));
  if (!px) return std::nullopt;
  return Vec2(b.measured_pixel - *px);
}

inline Vec3 lidar_residual(const CalibrationState& s, const ResidualBlock& b) {
  return lidar_residual(s.extrinsics.at(b.sensor_id), s.target_alignment(b.target_id), b);
}

inline std::optional<Vec2> camera_residual(const CalibrationState& s, const ResidualBlock& b) {
  return camera_residual(s.extrinsics.at(b.sensor_id), s.target_alignment(b.target_id), b);
}

inline bool evaluate_residual(const Pose& t_rs, const Pose& t_e, const ResidualBlock& b, ResidualVec& r) {
  if (b.kind == SensorKind::kLidar) {
    r = lidar_residual(t_rs, t_e, b);
    return true;
  }
  const auto c = camera_residual(t_rs, t_e, b);
  if (!c) return false;
  r = *c;
  return true;
}

/// Central differences on the left-multiplicative update of both poses.
/// Columns 0-5: sensor extrinsic, 6-11: target alignment.
inline bool numeric_jacobian(const Pose& t_rs, const Pose& t_e, const ResidualBlock& b, double h, BlockJacobian& J) {
  J.resize(b.dim(), 12);
  ResidualVec rp, rm;
  for (int k = 0; k < 12; ++k) {
    PoseVec6 d = PoseVec6::Zero();
    d[k % 6] = h;
    bool ok;
    if (k < 6) {
      ok = evaluate_residual(retract_left(t_rs, d), t_e, b, rp) && evaluate_residual(retract_left(t_rs, -d), t_e, b, rm);
    } else {
      ok = evaluate_residual(t_rs, retract_left(t_e, d), b, rp) && evaluate_residual(t_rs, retract_left(t_e, -d), b, rm);
    }
    if (!ok) return false;
    J.col(k) = (rp - rm) / (2.0 * h);
  }
  return true;
}

/// Closed-form chain-rule Jacobian; same layout as numeric_jacobian.
inline bool analytic_jacobian(const Pose& t_rs, const Pose& t_e, const ResidualBlock& b, BlockJacobian& J) {
  const Vec3 q = t_e * b.keypoint;
  const Vec3 w = b.robot_from_target * q;
  const Mat3 rst = t_rs.rotation.toRotationMatrix().transpose();
  const Mat3 ra = b.robot_from_target.rotation.toRotationMatrix();
  // d(point in sensor frame)/d(parameters)
  Eigen::Matrix<double, 3, 12> dy;
  dy.block<3, 3>(0, 0) = rst * skew(w);
  dy.block<3, 3>(0, 3) = -rst;
  dy.block<3, 3>(0, 6) = -rst * ra * skew(q);
  dy.block<3, 3>(0, 9) = rst * ra;
  if (b.kind == SensorKind::kLidar) {
    J = -dy;
    return true;
  }
  const Vec3 y = t_rs.inverse() * w;
  if (y.z() <= kMinProjectionDepth) return false;
  J = -project_jacobian(*b.intrinsics, y) * dy;
  return true;
}

namespace detail {

inline Eigen::Matrix<double, 6, 1> alignment_prior(const Pose& t_e, double wr, double wt) {
  Eigen::Matrix<double, 6, 1> r;
  r.head<3>() = wr * log_rotation(t_e.rotation);
  r.tail<3>() = wt * t_e.translation;
  return r;
}

}  // namespace detail

/// Stacked least-squares problem over the sensor extrinsics and target
/// alignments referenced by a fixed set of residual blocks.
class CalibrationProblem {
 public:
  using State = std::vector<Pose>;

  CalibrationProblem(const CalibrationState& state, const std::vector<ResidualBlock>& blocks, const SolverSettings& s)
      : blocks_(blocks), settings_(s) {
    std::set<std::string> sensors, targets;
    for (const auto& b : blocks) {
      sensors.insert(b.sensor_id);
      targets.insert(b.target_id);
    }
    std::map<std::string, int> sensor_index, target_index;
    for (const auto& id : sensors) {
      const auto it = state.extrinsics.find(id);
      if (it == state.extrinsics.end()) throw CalibError(ErrorCode::kConfigError, "no initial extrinsic for '" + id + "'");
      sensor_index[id] = static_cast<int>(params_.size());
      params_.push_back(it->second);
      for (const char* c : {"rx", "ry", "rz", "tx", "ty", "tz"}) labels_.push_back("sensor:" + id + "/" + c);
    }
    if (s.estimate_te) {
      for (const auto& id : targets) {
        target_index[id] = static_cast<int>(params_.size());
        prior_params_.push_back(static_cast<int>(params_.size()));
        params_.push_back(state.target_alignment(id));
        for (const char* c : {"rx", "ry", "rz", "tx", "ty", "tz"}) labels_.push_back("target:" + id + "/" + c);
      }
    }
    for (const auto& b : blocks) {
      sensor_param_.push_back(sensor_index.at(b.sensor_id));
      target_param_.push_back(s.estimate_te ? target_index.at(b.target_id) : -1);
      fixed_alignment_.push_back(state.target_alignment(b.target_id));
    }
  }

  int dim() const { return 6 * static_cast<int>(params_.size()); }
  State state() const { return params_; }
  void set_state(const State& s) { params_ = s; }
  const std::vector<std::string>& labels() const { return labels_; }

  void apply_step(const Eigen::VectorXd& delta) {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      params_[i] = retract_left(params_[i], PoseVec6(delta.segment<6>(static_cast<Eigen::Index>(6 * i))));
    }
  }

  /// Writes the parameters back into `out`.
  void export_state(CalibrationState& out) const {
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      out.extrinsics[blocks_[i].sensor_id] = params_[static_cast<std::size_t>(sensor_param_[i])];
      if (target_param_[i] >= 0) {
        out.target_alignments[blocks_[i].target_id] = params_[static_cast<std::size_t>(target_param_[i])];
      }
    }
  }

  double cost() const {
    const std::size_t chunks = chunk_count();
    std::vector<double> partial(chunks, 0.0);
    parallel_for(chunks, settings_.threads, [&](std::size_t c) {
      ResidualVec r;
      double sum = 0.0;
      for (std::size_t i = c * kChunk; i < std::min(blocks_.size(), (c + 1) * kChunk); ++i) {
        if (!evaluate_residual(sensor_pose(i), alignment_pose(i), blocks_[i], r)) {
          sum = std::numeric_limits<double>::infinity();
          break;
        }
        apply_projection(blocks_[i], r);
        sum += loss(r.norm()).first;
      }
      partial[c] = sum;
    });
    double total = prior_cost();
    for (double p : partial) total += p;
    return total;
  }

  double linearize(Eigen::MatrixXd& H, Eigen::VectorXd& g) const { return accumulate(H, g, false); }

  /// Normal matrix used for the observability check: lidar rows against
  /// non-unique keypoints keep only their component along the surface
  /// normal, since sliding along the surface is not measured, plus the
  /// component across the edge for rim keypoints.
  Eigen::MatrixXd observability_matrix() const {
    Eigen::MatrixXd H;
    Eigen::VectorXd g;
    accumulate(H, g, true);
    return H;
  }

  /// Jacobian of block i at the current state, through the configured path.
  bool block_jacobian(std::size_t i, BlockJacobian& J) const {
    return settings_.analytic_jacobians ? analytic_jacobian(sensor_pose(i), alignment_pose(i), blocks_[i], J)
                                        : numeric_jacobian(sensor_pose(i), alignment_pose(i), blocks_[i],
                                                           settings_.fd_step, J);
  }

 private:
  static constexpr std::size_t kChunk = 256;

  std::size_t chunk_count() const { return (blocks_.size() + kChunk - 1) / kChunk; }
  const Pose& sensor_pose(std::size_t i) const { return params_[static_cast<std::size_t>(sensor_param_[i])]; }
  const Pose& alignment_pose(std::size_t i) const {
    return target_param_[i] >= 0 ? params_[static_cast<std::size_t>(target_param_[i])] : fixed_alignment_[i];
  }

  /// (cost, IRLS weight) for a residual of norm s.
  std::pair<double, double> loss(double s) const {
    if (settings_.loss == LossKind::kHuber && s > settings_.huber_delta) {
      const double d = settings_.huber_delta;
      return {d * (s - 0.5 * d), d / s};
    }
    return {0.5 * s * s, 1.0};
  }

  double prior_cost() const {
    double c = 0.0;
    for (int p : prior_params_) {
      c += 0.5 * detail::alignment_prior(params_[static_cast<std::size_t>(p)], settings_.te_prior_rotation_weight,
                                         settings_.te_prior_translation_weight)
                     .squaredNorm();
    }
    return c;
  }

  double accumulate(Eigen::MatrixXd& H, Eigen::VectorXd& g, bool observability) const {
    const int n = dim();
    const std::size_t chunks = chunk_count();
    std::vector<Eigen::MatrixXd> Hs(chunks);
    std::vector<Eigen::VectorXd> gs(chunks);
    std::vector<double> costs(chunks, 0.0);
    parallel_for(chunks, settings_.threads, [&](std::size_t c) {
      Eigen::MatrixXd Hc = Eigen::MatrixXd::Zero(n, n);
      Eigen::VectorXd gc = Eigen::VectorXd::Zero(n);
      double cost = 0.0;
      BlockJacobian J;
      ResidualVec r;
      for (std::size_t i = c * kChunk; i < std::min(blocks_.size(), (c + 1) * kChunk); ++i) {
        const auto& b = blocks_[i];
        if (!evaluate_residual(sensor_pose(i), alignment_pose(i), b, r) || !block_jacobian(i, J)) {
          cost = std::numeric_limits<double>::infinity();
          continue;
        }
        apply_projection(b, r);
        apply_projection(b, J);
        double w = 1.0;
        if (observability) {
          if (b.normal && !b.projection) {
            const Pose loop = sensor_pose(i).inverse() * b.robot_from_target * alignment_pose(i);
            Eigen::Matrix<double, Eigen::Dynamic, 3, 0, 2, 3> dirs(b.edge_normal ? 2 : 1, 3);
            dirs.row(0) = (loop.rotation * *b.normal).transpose();
            if (b.edge_normal) dirs.row(1) = (loop.rotation * *b.edge_normal).transpose();
            BlockJacobian rows = dirs * J;
            J = rows;
          }
        } else {
          const auto [rho, weight] = loss(r.norm());
          cost += rho;
          w = weight;
        }
        const Eigen::Matrix<double, 12, 12> JtJ = w * J.transpose() * J;
        Eigen::Matrix<double, 12, 1> Jtr = Eigen::Matrix<double, 12, 1>::Zero();
        if (!observability) Jtr = w * J.transpose() * r;
        const int sp = 6 * sensor_param_[i];
        const int tp = 6 * target_param_[i];
        Hc.block<6, 6>(sp, sp) += JtJ.topLeftCorner<6, 6>();
        gc.segment<6>(sp) += Jtr.head<6>();
        if (target_param_[i] >= 0) {
          Hc.block<6, 6>(sp, tp) += JtJ.topRightCorner<6, 6>();
          Hc.block<6, 6>(tp, sp) += JtJ.bottomLeftCorner<6, 6>();
          Hc.block<6, 6>(tp, tp) += JtJ.bottomRightCorner<6, 6>();
          gc.segment<6>(tp) += Jtr.tail<6>();
        }
      }
      Hs[c] = std::move(Hc);
      gs[c] = std::move(gc);
      costs[c] = cost;
    });
    H = Eigen::MatrixXd::Zero(n, n);
    g = Eigen::VectorXd::Zero(n);
    double cost = 0.0;
    for (std::size_t c = 0; c < chunks; ++c) {
      H += Hs[c];
      g += gs[c];
      cost += costs[c];
    }

    const double h = settings_.fd_step;
    const double wr = settings_.te_prior_rotation_weight;
    const double wt = settings_.te_prior_translation_weight;
    for (int p : prior_params_) {
      const Pose& te = params_[static_cast<std::size_t>(p)];
      const Eigen::Matrix<double, 6, 1> r = detail::alignment_prior(te, wr, wt);
      Eigen::Matrix<double, 6, 6> J;
      for (int k = 0; k < 6; ++k) {
        PoseVec6 d = PoseVec6::Zero();
        d[k] = h;
        J.col(k) = (detail::alignment_prior(retract_left(te, d), wr, wt) -
                    detail::alignment_prior(retract_left(te, -d), wr, wt)) /
                   (2.0 * h);
      }
      H.block<6, 6>(6 * p, 6 * p) += J.transpose() * J;
      g.segment<6>(6 * p) += J.transpose() * r;
      cost += 0.5 * r.squaredNorm();
    }
    return cost;
  }

  const std::vector<ResidualBlock>& blocks_;
  SolverSettings settings_;
  std::vector<Pose> params_;
  std::vector<std::string> labels_;
  std::vector<int> sensor_param_;
  std::vector<int> target_param_;
  std::vector<Pose> fixed_alignment_;
  std::vector<int> prior_params_;
};

struct InnerResult {
  CalibrationState state;
  LmResult lm;
};

/// One LM solve with fixed correspondences. Throws RankDeficientError when
/// the problem is not observable, Diverged when damping runs away.
inline InnerResult solve_inner(const CalibrationState& state, const std::vector<ResidualBlock>& blocks,
                               const SolverSettings& s) {
  if (blocks.empty()) throw CalibError(ErrorCode::kNoMeasurements, "no residual blocks");
  CalibrationProblem problem(state, blocks, s);
  if (s.check_rank) check_conditioning(problem.observability_matrix(), s.rank_condition_threshold, problem.labels());
  InnerResult out{state, levenberg_marquardt(problem, s.lm())};
  problem.export_state(out.state);
  out.state.inner_iterations += out.lm.iterations;
  out.state.inner_cost_histories.push_back(out.lm.cost_history);
  return out;
}

// ---------------------------------------------------------------------------
// Outer loop

/// Kd-tree indices over each target's lidar keypoints.
class KeypointIndexCache {
 public:
  const KeypointIndex3d& get(const std::string& target, const TargetSpec& spec) {
    auto& slot = cache_[target];
    if (!slot) slot = std::make_unique<KeypointIndex3d>(spec.lidar_keypoints);
    return *slot;
  }

 private:
  std::map<std::string, std::unique_ptr<KeypointIndex3d>> cache_;
};

using PairKey = std::tuple<std::size_t, std::size_t, std::size_t>;

struct BlockSet {
  std::vector<ResidualBlock> blocks;
  std::vector<PairKey> pairs;
  std::size_t dropped_behind_camera = 0;
};

/// Correspondences for every measurement at the given state.
inline BlockSet build_blocks(const CalibrationState& state, const std::vector<MeasurementSet>& measurements,
                             const std::map<std::string, TargetSpec>& specs,
                             const std::map<std::string, CameraIntrinsics>& intrinsics, const SolverSettings& s,
                             KeypointIndexCache& cache, bool sliding = false) {
  BlockSet out;
  for (std::size_t mi = 0; mi < measurements.size(); ++mi) {
    const auto& m = measurements[mi];
    const auto spec_it = specs.find(m.target_id);
    if (spec_it == specs.end()) throw CalibError(ErrorCode::kConfigError, "unknown target '" + m.target_id + "'");
    const TargetSpec& spec = spec_it->second;
    const auto ext_it = state.extrinsics.find(m.sensor_id);
    if (ext_it == state.extrinsics.end()) throw CalibError(ErrorCode::kConfigError, "unknown sensor '" + m.sensor_id + "'");
    const Pose loop = ext_it->second.inverse() * m.t_mr.inverse() * m.t_mt * state.target_alignment(m.target_id);
    if (m.size() == 0) continue;

    ResidualBlock proto = make_block(m.kind, m.t_mt, m.t_mr, Vec3::Zero());
    proto.sensor_id = m.sensor_id;
    proto.target_id = m.target_id;
    proto.measurement = mi;

    if (m.kind == SensorKind::kLidar) {
      if (spec.lidar_keypoints.empty()) continue;
      const auto corr = correspond_3d(m.lidar_points, cache.get(m.target_id, spec), loop, s.correspondence_3d);
      const bool normals = !spec.lidar_keypoints_unique && spec.lidar_keypoint_normals.size() == spec.lidar_keypoints.size();
      for (const auto& p : corr.pairs) {
        ResidualBlock b = proto;
        b.measured_index = p.measured;
        b.keypoint_index = p.keypoint;
        b.keypoint = spec.lidar_keypoints[p.keypoint];
        b.measured_point = m.lidar_points[p.measured];
        if (normals) {
          b.normal = spec.lidar_keypoint_normals[p.keypoint];
          if (spec.lidar_keypoint_edge_normals.size() == spec.lidar_keypoints.size() &&
              !spec.lidar_keypoint_edge_normals[p.keypoint].isZero()) {
            b.edge_normal = spec.lidar_keypoint_edge_normals[p.keypoint];
          }
          if (sliding) {
            Eigen::Matrix<double, Eigen::Dynamic, 3, 0, 2, 3> rows(b.edge_normal ? 2 : 1, 3);
            rows.row(0) = (loop.rotation * *b.normal).transpose();
            if (b.edge_normal) rows.row(1) = (loop.rotation * *b.edge_normal).transpose();
            b.projection = rows;
          }
        }
        out.blocks.push_back(std::move(b));
        out.pairs.emplace_back(mi, p.measured, p.keypoint);
      }
    } else {
      const auto in_it = intrinsics.find(m.sensor_id);
      if (in_it == intrinsics.end()) throw CalibError(ErrorCode::kConfigError, "no intrinsics for camera '" + m.sensor_id + "'");
      if (spec.camera_keypoints.empty()) continue;
      std::optional<std::span<const int>> ids;
      if (m.has_ids() && spec.camera_keypoints_unique) ids = std::span<const int>(m.keypoint_ids);
      CorrespondenceSet corr;
      try {
        corr = correspond_2d(m.pixels, spec.camera_keypoints, loop, in_it->second, s.correspondence_2d, ids);
      } catch (const CalibError& e) {
        if (e.code() != ErrorCode::kAllBehindCamera) throw;
        out.dropped_behind_camera += m.pixels.size();
        continue;
      }
      for (const auto& p : corr.pairs) {
        if (!project(in_it->second, loop * spec.camera_keypoints[p.keypoint])) {
          ++out.dropped_behind_camera;
          continue;
        }
        ResidualBlock b = proto;
        b.measured_index = p.measured;
        b.keypoint_index = p.keypoint;
        b.keypoint = spec.camera_keypoints[p.keypoint];
        b.measured_pixel = m.pixels[p.measured];
        b.intrinsics = &in_it->second;
        out.blocks.push_back(std::move(b));
        out.pairs.emplace_back(mi, p.measured, p.keypoint);
      }
    }
  }
  return out;
}

struct ResidualRecord {
  double timestamp = 0.0;
  std::string sensor_id;
  std::string target_id;
  SensorKind kind = SensorKind::kLidar;
  std::size_t measured_index = 0;
  std::size_t keypoint_index = 0;
  Eigen::VectorXd residual;
  double norm = 0.0;
};

struct ResidualStats {
  std::size_t count = 0;
  double mean = 0.0;
  double stddev = 0.0;
};

inline ResidualStats summarize(const std::vector<double>& values) {
  ResidualStats s;
  s.count = values.size();
  if (values.empty()) return s;
  for (double v : values) s.mean += v;
  s.mean /= static_cast<double>(values.size());
  for (double v : values) s.stddev += (v - s.mean) * (v - s.mean);
  s.stddev = std::sqrt(s.stddev / static_cast<double>(values.size()));
  return s;
}

struct SensorErrors {
  SensorKind kind = SensorKind::kLidar;
  ResidualStats residual;  ///< Euclidean (m) for lidar, reprojection (px) for cameras
  /// Cameras only: (horizontal FOV / width) * mean reprojection error.
  double approx_rotation_deg = 0.0;
  std::optional<PoseError> pose_error;
  std::optional<PoseError> relative_error;
  bool constrained = true;
};

struct ErrorReport {
  std::map<std::string, SensorErrors> sensors;
  std::vector<ResidualRecord> residuals;
  double mean_euclidean_m = 0.0;
  double mean_reprojection_px = 0.0;
  std::size_t dropped_behind_camera = 0;
};

inline double approx_rotation_from_pixels(const CameraIntrinsics& c, double mean_px) {
  return c.horizontal_fov_deg() / c.width * mean_px;
}

/// Residual statistics at `state` with correspondences recomputed there, plus
/// pose errors against `truth` when given.
inline ErrorReport evaluate_errors(const CalibrationState& state,
                                   const std::optional<std::map<std::string, Pose>>& truth,
                                   const std::vector<MeasurementSet>& measurements,
                                   const std::map<std::string, TargetSpec>& specs,
                                   const std::map<std::string, CameraIntrinsics>& intrinsics, const SolverSettings& s) {
  ErrorReport rep;
  KeypointIndexCache cache;
  const BlockSet set = build_blocks(state, measurements, specs, intrinsics, s, cache);
  rep.dropped_behind_camera = set.dropped_behind_camera;
  std::map<std::string, std::vector<double>> norms;
  std::vector<double> all_lidar, all_camera;
  for (const auto& b : set.blocks) {
    ResidualVec r;
    if (!evaluate_residual(state.extrinsics.at(b.sensor_id), state.target_alignment(b.target_id), b, r)) {
      ++rep.dropped_behind_camera;
      continue;
    }
    ResidualRecord rec;
    rec.timestamp = measurements[b.measurement].timestamp;
    rec.sensor_id = b.sensor_id;
    rec.target_id = b.target_id;
    rec.kind = b.kind;
    rec.measured_index = b.measured_index;
    rec.keypoint_index = b.keypoint_index;
    rec.residual = r;
    rec.norm = r.norm();
    norms[b.sensor_id].push_back(rec.norm);
    (b.kind == SensorKind::kLidar ? all_lidar : all_camera).push_back(rec.norm);
    rep.residuals.push_back(std::move(rec));
  }
  for (const auto& m : measurements) rep.sensors[m.sensor_id].kind = m.kind;
  for (const auto& [id, pose] : state.extrinsics) {
    auto& e = rep.sensors[id];
    e.constrained = norms.count(id) > 0;
    if (e.constrained) e.residual = summarize(norms[id]);
    if (e.kind == SensorKind::kCamera) {
      const auto it = intrinsics.find(id);
      if (it != intrinsics.end() && it->second.valid()) e.approx_rotation_deg = approx_rotation_from_pixels(it->second, e.residual.mean);
    }
    if (truth) {
      const auto t = truth->find(id);
      if (t != truth->end()) {
        e.pose_error = pose_error(pose, t->second);
        e.relative_error = relative_pose_error(pose, t->second);
      }
    }
  }
  rep.mean_euclidean_m = summarize(all_lidar).mean;
  rep.mean_reprojection_px = summarize(all_camera).mean;
  return rep;
}

struct OuterTrace {
  int iteration = 0;
  double cost = 0.0;
  double initial_cost = 0.0;
  double max_translation_delta_m = 0.0;
  double max_rotation_delta_deg = 0.0;
  std::size_t pairs = 0;
  int inner_iterations = 0;
  bool sliding = false;
};

using TraceFn = std::function<void(const OuterTrace&)>;

/// Longest correspondence cycle the outer loop recognizes.
inline constexpr std::size_t kMaxCyclePeriod = 64;

struct CalibrationResult {
  CalibrationState state;
  ErrorReport errors;
};

/// Alternates correspondence search and LM until the cost or every parameter
/// block stops changing. Non-convergence is flagged in state.converged.
inline CalibrationResult calibrate(const std::vector<MeasurementSet>& measurements,
                                   const std::map<std::string, TargetSpec>& specs, const CalibrationState& initial,
                                   const SolverSettings& s, const std::map<std::string, CameraIntrinsics>& intrinsics,
                                   const TraceFn& trace = {}) {
  s.validate();
  CalibrationState state = initial;
  state.cost_history.clear();
  state.inner_cost_histories.clear();
  state.outer_iterations = 0;
  state.inner_iterations = 0;
  state.converged = false;
  state.correspondence_fixed_point = false;
  state.limit_cycle = false;
  state.unconstrained_sensors.clear();

  std::set<std::string> observed;
  for (const auto& m : measurements) {
    if (!state.extrinsics.count(m.sensor_id)) {
      throw CalibError(ErrorCode::kConfigError, "measurement from unconfigured sensor '" + m.sensor_id + "'");
    }
    if (m.size() > 0) observed.insert(m.sensor_id);
    if (!state.target_alignments.count(m.target_id)) state.target_alignments[m.target_id] = Pose();
  }
  for (const auto& [id, pose] : state.extrinsics) {
    if (!observed.count(id)) state.unconstrained_sensors.push_back(id);
  }
  if (observed.empty()) throw CalibError(ErrorCode::kNoMeasurements, "no sensor has accepted measurements");

  KeypointIndexCache cache;
  // Recent (pairs, post-solve state, cost) per outer iteration, for cycle detection.
  struct Visited {
    std::vector<PairKey> pairs;
    CalibrationState state;
    double cost;
  };
  std::deque<Visited> history;
  std::vector<PairKey> previous_pairs;
  double previous_cost = std::numeric_limits<double>::quiet_NaN();
  bool sliding = s.sliding_stage;
  auto same_state = [&](const CalibrationState& a, const CalibrationState& b) {
    for (const auto& [id, p] : a.extrinsics) {
      const PoseError d = relative_pose_error(p, b.extrinsics.at(id));
      if (!(d.translational_m < s.outer_translation_tolerance && d.rotational_deg < s.outer_rotation_tolerance_deg)) return false;
    }
    for (const auto& [id, p] : a.target_alignments) {
      const PoseError d = relative_pose_error(p, b.target_alignment(id));
      if (!(d.translational_m < s.outer_translation_tolerance && d.rotational_deg < s.outer_rotation_tolerance_deg)) return false;
    }
    return true;
  };
  for (int it = 1; it <= s.max_outer_iterations; ++it) {
    BlockSet set = build_blocks(state, measurements, specs, intrinsics, s, cache, sliding);
    if (set.blocks.empty()) throw CalibError(ErrorCode::kNoMeasurements, "no correspondences within the distance limits");
    state.dropped_behind_camera = set.dropped_behind_camera;

    const CalibrationState before = state;
    InnerResult inner = solve_inner(state, set.blocks, s);
    state = std::move(inner.state);
    state.outer_iterations = it;
    state.cost_history.push_back(inner.lm.final_cost);

    OuterTrace tr;
    tr.iteration = it;
    tr.cost = inner.lm.final_cost;
    tr.initial_cost = inner.lm.initial_cost;
    tr.pairs = set.blocks.size();
    tr.inner_iterations = inner.lm.iterations;
    tr.sliding = sliding;
    auto track = [&](const Pose& a, const Pose& b) {
      const PoseError d = relative_pose_error(a, b);
      tr.max_translation_delta_m = std::max(tr.max_translation_delta_m, d.translational_m);
      tr.max_rotation_delta_deg = std::max(tr.max_rotation_delta_deg, d.rotational_deg);
    };
    for (const auto& [id, p] : state.extrinsics) track(p, before.extrinsics.at(id));
    for (const auto& [id, p] : state.target_alignments) track(p, before.target_alignment(id));
    if (trace) trace(tr);

    state.correspondence_fixed_point = set.pairs == previous_pairs;
    // Same pairs and state as `period` iterations ago: the loop is on a
    // periodic orbit and cannot make progress.
    std::size_t period = 0;
    if (!state.correspondence_fixed_point) {
      for (std::size_t p = 2; p <= history.size() && !period; ++p) {
        const Visited& v = history[history.size() - p];
        if (v.pairs == set.pairs && same_state(state, v.state)) period = p;
      }
    }
    previous_pairs = set.pairs;
    history.push_back({std::move(set.pairs), state, tr.cost});
    if (history.size() > kMaxCyclePeriod) history.pop_front();

    if (period && !sliding) {
      // Keep the cheapest state on the orbit.
      const Visited* best = &history.back();
      for (std::size_t k = 1; k < period; ++k) {
        const Visited& v = history[history.size() - 1 - k];
        if (v.cost < best->cost) best = &v;
      }
      if (best != &history.back()) {
        CalibrationState kept = best->state;
        kept.outer_iterations = state.outer_iterations;
        kept.inner_iterations = state.inner_iterations;
        kept.cost_history = std::move(state.cost_history);
        kept.inner_cost_histories = std::move(state.inner_cost_histories);
        kept.dropped_behind_camera = state.dropped_behind_camera;
        state = std::move(kept);
      }
      state.limit_cycle = true;
      state.converged = true;
      break;
    }

    const bool cost_done = tr.cost <= 1e-30 || (std::isfinite(previous_cost) &&
                                                std::abs(tr.cost - previous_cost) <
                                                    s.outer_cost_tolerance * std::max(tr.cost, 1e-300));
    const bool params_done = tr.max_translation_delta_m < s.outer_translation_tolerance &&
                             tr.max_rotation_delta_deg < s.outer_rotation_tolerance_deg;
    previous_cost = tr.cost;
    if (sliding && (period || cost_done || params_done)) {
      sliding = false;
      previous_cost = std::numeric_limits<double>::quiet_NaN();
      history.clear();
      continue;
    }
    if (cost_done || params_done) {
      state.converged = true;
      break;
    }
  }

  CalibrationResult out;
  out.errors = evaluate_errors(state, std::nullopt, measurements, specs, intrinsics, s);
  out.state = std::move(state);
  return out;
}

}  // namespace mcs_calib
