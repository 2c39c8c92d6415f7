#include <gtest/gtest.h>

#include <cmath>

#include "mcs_calib/camera.hpp"
#include "mcs_calib/random.hpp"

using namespace mcs_calib;

namespace {

CameraIntrinsics pinhole(double f, double cx, double cy) {
  CameraIntrinsics c;
  c.fx = f;
  c.fy = f;
  c.cx = cx;
  c.cy = cy;
  c.width = 720;
  c.height = 540;
  return c;
}

CameraIntrinsics distorted() {
  CameraIntrinsics c = pinhole(620, 360, 270);
  c.fy = 610;
  c.k1 = -0.21;
  c.k2 = 0.05;
  c.p1 = 0.001;
  c.p2 = -0.002;
  return c;
}

}  // namespace

TEST(Project, OpticalAxisHitsPrincipalPoint) {
  const auto px = project(pinhole(500, 320, 240), Vec3(0, 0, 1));
  ASSERT_TRUE(px);
  EXPECT_EQ(*px, Vec2(320, 240));
}

TEST(Project, SimilarTriangles) {
  const auto px = project(pinhole(500, 0, 0), Vec3(0.1, 0, 1));
  ASSERT_TRUE(px);
  EXPECT_NEAR(px->x(), 50.0, 1e-12);
  EXPECT_NEAR(px->y(), 0.0, 1e-12);
}

TEST(Project, RadialTermLonghand) {
  CameraIntrinsics c = pinhole(500, 0, 0);
  c.k1 = -0.2;
  const auto px = project(c, Vec3(0.3, 0, 1));
  ASSERT_TRUE(px);
  // x_d = x (1 + k1 r^2), r = x = 0.3.
  const double x = 0.3;
  const double oracle = 500.0 * x * (1.0 + (-0.2) * x * x);
  EXPECT_NEAR(px->x(), oracle, 1e-9);
  EXPECT_NEAR(px->y(), 0.0, 1e-12);
}

TEST(Project, TangentialTermsLonghand) {
  CameraIntrinsics c = pinhole(400, 10, 20);
  c.fy = 410;
  c.k1 = 0.1;
  c.k2 = -0.03;
  c.p1 = 0.002;
  c.p2 = -0.004;
  const Vec3 p(0.2, -0.1, 1.6);
  const double x = 0.2 / 1.6, y = -0.1 / 1.6;
  const double r2 = x * x + y * y;
  const double xd = x * (1 + 0.1 * r2 - 0.03 * r2 * r2) + 2 * 0.002 * x * y + (-0.004) * (r2 + 2 * x * x);
  const double yd = y * (1 + 0.1 * r2 - 0.03 * r2 * r2) + 0.002 * (r2 + 2 * y * y) + 2 * (-0.004) * x * y;
  const auto px = project(c, p);
  ASSERT_TRUE(px);
  EXPECT_NEAR(px->x(), 400 * xd + 10, 1e-9);
  EXPECT_NEAR(px->y(), 410 * yd + 20, 1e-9);
}

TEST(Project, ZeroDistortionIsPinhole) {
  Rng rng(1);
  const CameraIntrinsics c = pinhole(733, 351, 262);
  for (int i = 0; i < 200; ++i) {
    const Vec3 p(rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(0.1, 5));
    const auto px = project(c, p);
    ASSERT_TRUE(px);
    EXPECT_EQ(px->x(), c.fx * (p.x() / p.z()) + c.cx);
    EXPECT_EQ(px->y(), c.fy * (p.y() / p.z()) + c.cy);
  }
}

TEST(Project, BehindCamera) {
  const CameraIntrinsics c = pinhole(500, 0, 0);
  EXPECT_FALSE(project(c, Vec3(0, 0, -1)));
  EXPECT_FALSE(project(c, Vec3(0.1, 0, 0)));
  EXPECT_FALSE(project(c, Vec3(0, 0, kMinProjectionDepth)));
  EXPECT_TRUE(project(c, Vec3(0, 0, 2 * kMinProjectionDepth)));
}

TEST(Project, JacobianMatchesCentralDifference) {
  Rng rng(2);
  const CameraIntrinsics c = distorted();
  for (int i = 0; i < 200; ++i) {
    const Vec3 p(rng.uniform(-0.5, 0.5), rng.uniform(-0.4, 0.4), rng.uniform(0.8, 4));
    const Eigen::Matrix<double, 2, 3> analytic = project_jacobian(c, p);
    Eigen::Matrix<double, 2, 3> numeric;
    const double h = 1e-6;
    for (int k = 0; k < 3; ++k) {
      Vec3 d = Vec3::Zero();
      d[k] = h;
      numeric.col(k) = (*project(c, p + d) - *project(c, p - d)) / (2 * h);
    }
    EXPECT_LT((analytic - numeric).norm(), 1e-6 * analytic.norm());
  }
}

TEST(Undistort, RoundTrip) {
  Rng rng(3);
  for (double k1 : {-0.3, -0.1, 0.0, 0.15, 0.3}) {
    CameraIntrinsics c = distorted();
    c.k1 = k1;
    for (int i = 0; i < 100; ++i) {
      const Vec2 n(rng.uniform(-0.45, 0.45), rng.uniform(-0.35, 0.35));
      EXPECT_LT((undistort_normalized(c, distort(c, n)) - n).norm(), 1e-8);
    }
  }
}

TEST(Undistort, PixelToNormalized) {
  const CameraIntrinsics c = distorted();
  const Vec3 p(0.3, -0.2, 1.7);
  const Vec2 n = pixel_to_normalized(c, *project(c, p));
  EXPECT_LT((n - Vec2(p.x() / p.z(), p.y() / p.z())).norm(), 1e-10);
}

TEST(CameraFov, Containment) {
  const CameraIntrinsics c = pinhole(500, 360, 270);
  EXPECT_TRUE(in_camera_fov(c, Vec3(0, 0, 1)));
  EXPECT_FALSE(in_camera_fov(c, Vec3(0, 0, -1)));
  // u = 500 x + 360 = width + 5.
  const Vec3 outside((720 + 5 - 360) / 500.0, 0, 1);
  EXPECT_FALSE(in_camera_fov(c, outside));
  EXPECT_FALSE(in_camera_fov(c, outside, 10));
  const Vec3 near_edge((720 - 5 - 360) / 500.0, 0, 1);
  EXPECT_TRUE(in_camera_fov(c, near_edge));
  EXPECT_FALSE(in_camera_fov(c, near_edge, 10));
}

TEST(CameraFov, HalfOpenImageBounds) {
  const CameraIntrinsics c = pinhole(500, 0, 0);
  EXPECT_TRUE(in_camera_fov(c, Vec3(0, 0, 1)));
  EXPECT_FALSE(in_camera_fov(c, Vec3(720 / 500.0, 0.1, 1)));
}

TEST(CameraIntrinsics, HorizontalFov) {
  const CameraIntrinsics c = pinhole(500, 250, 250);
  CameraIntrinsics square = c;
  square.width = 1000;
  EXPECT_NEAR(square.horizontal_fov_deg(), 90.0, 1e-12);
  EXPECT_TRUE(c.valid());
  EXPECT_FALSE(CameraIntrinsics{}.valid());
}

TEST(LidarFov, Containment) {
  LidarFov fov;
  fov.min_azimuth_deg = -60;
  fov.max_azimuth_deg = 60;
  fov.min_range = 1;
  fov.max_range = 10;
  EXPECT_TRUE(in_lidar_fov(fov, Vec3(5.5, 0, 0)));
  EXPECT_FALSE(in_lidar_fov(fov, Vec3(10.5, 0, 0)));
  EXPECT_FALSE(in_lidar_fov(fov, Vec3(0.5, 0, 0)));
  EXPECT_FALSE(in_lidar_fov(fov, Vec3(-5, 0, 0)));
  EXPECT_FALSE(in_lidar_fov(fov, Vec3(5, 0, 5)));
  const double el = 14.0 * kRadPerDeg;
  EXPECT_TRUE(in_lidar_fov(fov, Vec3(5 * std::cos(el), 0, 5 * std::sin(el))));
}

TEST(LidarFov, FullCircle) {
  LidarFov fov;
  Rng rng(4);
  for (int i = 0; i < 500; ++i) {
    const double az = rng.uniform(-std::numbers::pi, std::numbers::pi);
    const double el = rng.uniform(-14.9, 14.9) * kRadPerDeg;
    const double r = rng.uniform(0.5, 50);
    EXPECT_TRUE(in_lidar_fov(fov, r * Vec3(std::cos(el) * std::cos(az), std::cos(el) * std::sin(az), std::sin(el))));
  }
}

TEST(LidarFov, WrappedAzimuthWindow) {
  LidarFov fov;
  fov.min_azimuth_deg = 150;
  fov.max_azimuth_deg = 210;
  EXPECT_TRUE(in_lidar_fov(fov, Vec3(-5, 0, 0)));
  EXPECT_TRUE(in_lidar_fov(fov, Vec3(-5, -1, 0)));
  EXPECT_FALSE(in_lidar_fov(fov, Vec3(5, 0, 0)));
  EXPECT_TRUE(fov.valid());
  LidarFov bad;
  bad.min_range = 0;
  EXPECT_FALSE(bad.valid());
}
