#pragma once

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <Eigen/Eigenvalues>

#include "mcs_calib/error.hpp"

namespace mcs_calib {

struct LmSettings {
  double init_lambda = 1e-6;
  double lambda_up = 10.0;
  double lambda_down = 0.1;
  double max_lambda = 1e12;
  int max_iterations = 100;
  /// Stop when an accepted step lowers the cost by less than this fraction.
  double relative_tolerance = 1e-10;
  double absolute_tolerance = 1e-30;
  double gradient_tolerance = 1e-14;
};

enum class LmStatus { kConverged, kMaxIterations, kStalled };

struct LmResult {
  LmStatus status = LmStatus::kMaxIterations;
  int iterations = 0;  ///< accepted steps
  int evaluations = 0;
  double initial_cost = 0.0;
  double final_cost = 0.0;
  std::vector<double> cost_history;  ///< initial cost, then one entry per accepted step
};

/// Problem interface:
///   double linearize(Eigen::MatrixXd& H, Eigen::VectorXd& g)  // J^T J, J^T r; returns cost
///   double cost()
///   State state();  void set_state(const State&);
///   void apply_step(const Eigen::VectorXd& delta)
///   int dim()
/// Cost is 0.5 * sum |r|^2 (or its robust counterpart).
template <class Problem>
LmResult levenberg_marquardt(Problem& problem, const LmSettings& s) {
  const int n = problem.dim();
  Eigen::MatrixXd H(n, n);
  Eigen::VectorXd g(n);
  LmResult res;
  double cost = problem.linearize(H, g);
  ++res.evaluations;
  res.initial_cost = cost;
  res.cost_history.push_back(cost);
  if (!std::isfinite(cost)) throw CalibError(ErrorCode::kDiverged, "initial cost is not finite");

  double lambda = s.init_lambda;
  while (res.iterations < s.max_iterations) {
    if (cost <= s.absolute_tolerance || g.lpNorm<Eigen::Infinity>() <= s.gradient_tolerance) {
      res.status = LmStatus::kConverged;
      break;
    }
    const Eigen::VectorXd diag = H.diagonal().cwiseMax(1e-12 * std::max(1.0, H.diagonal().maxCoeff()));
    Eigen::MatrixXd A = H;
    A.diagonal() += lambda * diag;
    const Eigen::VectorXd delta = A.ldlt().solve(-g);

    const auto saved = problem.state();
    problem.apply_step(delta);
    const double new_cost = problem.cost();
    ++res.evaluations;
    if (delta.allFinite() && std::isfinite(new_cost) && new_cost < cost) {
      const double decrease = (cost - new_cost) / std::max(cost, std::numeric_limits<double>::min());
      ++res.iterations;
      res.cost_history.push_back(new_cost);
      lambda = std::max(lambda * s.lambda_down, 1e-15);
      cost = new_cost;
      if (decrease < s.relative_tolerance) {
        res.status = LmStatus::kConverged;
        break;
      }
      cost = std::min(cost, problem.linearize(H, g));
      ++res.evaluations;
    } else {
      problem.set_state(saved);
      lambda *= s.lambda_up;
      if (lambda > s.max_lambda) {
        // No descent direction left at machine precision.
        if (res.iterations == 0 && g.norm() > 1e-6 * std::max(1.0, cost)) {
          throw CalibError(ErrorCode::kDiverged, "damping exceeded " + std::to_string(s.max_lambda));
        }
        res.status = LmStatus::kStalled;
        break;
      }
    }
  }
  res.final_cost = cost;
  return res;
}

/// Raised when the normal equations are numerically singular. Carries an
/// orthonormal basis of the near-null subspace.
class RankDeficientError : public CalibError {
 public:
  RankDeficientError(const std::string& what, Eigen::MatrixXd null_space, std::vector<std::string> labels,
                     double condition)
      : CalibError(ErrorCode::kRankDeficient, what),
        null_space_(std::move(null_space)),
        labels_(std::move(labels)),
        condition_(condition) {}

  const Eigen::MatrixXd& null_space() const { return null_space_; }
  const std::vector<std::string>& labels() const { return labels_; }
  double condition() const { return condition_; }

 private:
  Eigen::MatrixXd null_space_;
  std::vector<std::string> labels_;
  double condition_;
};

/// Throws RankDeficientError when lambda_max / lambda_min of the symmetric
/// matrix H exceeds `threshold`.
inline void check_conditioning(const Eigen::MatrixXd& H, double threshold, const std::vector<std::string>& labels) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(H);
  const Eigen::VectorXd& ev = es.eigenvalues();
  const double lmax = ev.maxCoeff();
  if (!(lmax > 0.0)) {
    throw RankDeficientError("normal equations are zero", Eigen::MatrixXd::Identity(H.rows(), H.cols()), labels,
                             std::numeric_limits<double>::infinity());
  }
  const double cut = lmax / threshold;
  std::vector<int> weak;
  for (int i = 0; i < ev.size(); ++i) {
    if (ev[i] < cut) weak.push_back(i);
  }
  if (weak.empty()) return;
  Eigen::MatrixXd basis(H.rows(), static_cast<Eigen::Index>(weak.size()));
  for (std::size_t k = 0; k < weak.size(); ++k) basis.col(static_cast<Eigen::Index>(k)) = es.eigenvectors().col(weak[k]);
  const double lmin = std::max(ev.minCoeff(), 0.0);
  const double cond = lmin > 0.0 ? lmax / lmin : std::numeric_limits<double>::infinity();

  const Eigen::VectorXd dir = es.eigenvectors().col(weak.front());
  Eigen::Index top = 0;
  dir.cwiseAbs().maxCoeff(&top);
  std::string msg = "condition estimate " + std::to_string(cond) + " over " + std::to_string(threshold) + "; " +
                    std::to_string(weak.size()) + " near-null direction(s), weakest dominated by " +
                    (static_cast<std::size_t>(top) < labels.size() ? labels[static_cast<std::size_t>(top)]
                                                                   : std::to_string(top));
  throw RankDeficientError(msg, std::move(basis), labels, cond);
}

}  // namespace mcs_calib
