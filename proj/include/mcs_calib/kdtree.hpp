#pragma once

#include <algorithm>
#include <cstddef>
#include <limits>
#include <numeric>
#include <span>
#include <vector>

#include <Eigen/Core>

namespace mcs_calib {

/// Static kd-tree over a borrowed point array. Ties in nearest() resolve to
/// the lowest index so results match a brute-force scan.
template <int Dim>
class KdTree {
 public:
  using Point = Eigen::Matrix<double, Dim, 1>;

  struct Neighbor {
    std::size_t index = 0;
    double squared_distance = std::numeric_limits<double>::infinity();
  };

  KdTree() = default;

  explicit KdTree(std::span<const Point> points) : points_(points), order_(points.size()) {
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    nodes_.reserve(points.size());
    if (!points.empty()) root_ = build(0, points.size(), 0);
  }

  std::size_t size() const { return points_.size(); }

  Neighbor nearest(const Point& query) const {
    Neighbor best;
    if (root_ >= 0) nearest_impl(root_, query, best);
    return best;
  }

  /// Indices within radius (inclusive), ascending.
  std::vector<std::size_t> radius_search(const Point& query, double radius) const {
    std::vector<std::size_t> out;
    if (root_ >= 0) radius_impl(root_, query, radius * radius, out);
    std::sort(out.begin(), out.end());
    return out;
  }

 private:
  struct Node {
    std::size_t point = 0;
    int axis = 0;
    int left = -1;
    int right = -1;
  };

  int build(std::size_t begin, std::size_t end, int depth) {
    if (begin >= end) return -1;
    // Split on the axis of largest spread.
    Point lo = points_[order_[begin]];
    Point hi = lo;
    for (std::size_t i = begin + 1; i < end; ++i) {
      lo = lo.cwiseMin(points_[order_[i]]);
      hi = hi.cwiseMax(points_[order_[i]]);
    }
    int axis = 0;
    (hi - lo).maxCoeff(&axis);
    const std::size_t mid = begin + (end - begin) / 2;
    std::nth_element(order_.begin() + begin, order_.begin() + mid, order_.begin() + end,
                     [&](std::size_t a, std::size_t b) { return points_[a][axis] < points_[b][axis]; });
    const int id = static_cast<int>(nodes_.size());
    nodes_.push_back({order_[mid], axis, -1, -1});
    const int left = build(begin, mid, depth + 1);
    const int right = build(mid + 1, end, depth + 1);
    nodes_[id].left = left;
    nodes_[id].right = right;
    return id;
  }

  void nearest_impl(int id, const Point& q, Neighbor& best) const {
    const Node& n = nodes_[id];
    const Point& p = points_[n.point];
    const double d2 = (p - q).squaredNorm();
    if (d2 < best.squared_distance || (d2 == best.squared_distance && n.point < best.index)) {
      best = {n.point, d2};
    }
    const double diff = q[n.axis] - p[n.axis];
    const int first = diff < 0.0 ? n.left : n.right;
    const int second = diff < 0.0 ? n.right : n.left;
    if (first >= 0) nearest_impl(first, q, best);
    if (second >= 0 && diff * diff <= best.squared_distance) nearest_impl(second, q, best);
  }

  void radius_impl(int id, const Point& q, double r2, std::vector<std::size_t>& out) const {
    const Node& n = nodes_[id];
    const Point& p = points_[n.point];
    if ((p - q).squaredNorm() <= r2) out.push_back(n.point);
    const double diff = q[n.axis] - p[n.axis];
    if (n.left >= 0 && (diff <= 0.0 || diff * diff <= r2)) radius_impl(n.left, q, r2, out);
    if (n.right >= 0 && (diff >= 0.0 || diff * diff <= r2)) radius_impl(n.right, q, r2, out);
  }

  std::span<const Point> points_;
  std::vector<std::size_t> order_;
  std::vector<Node> nodes_;
  int root_ = -1;
};

/// Linear-scan nearest neighbor with the same tie rule as KdTree.
template <int Dim>
typename KdTree<Dim>::Neighbor brute_force_nearest(std::span<const Eigen::Matrix<double, Dim, 1>> points,
                                                   const Eigen::Matrix<double, Dim, 1>& query) {
  typename KdTree<Dim>::Neighbor best;
  for (std::size_t i = 0; i < points.size(); ++i) {
    const double d2 = (points[i] - query).squaredNorm();
    if (d2 < best.squared_distance) best = {i, d2};
  }
  return best;
}

}  // namespace mcs_calib
