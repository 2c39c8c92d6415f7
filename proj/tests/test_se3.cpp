#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <vector>

#include "mcs_calib/random.hpp"
#include "mcs_calib/se3.hpp"

using namespace mcs_calib;

namespace {

Pose random_pose(Rng& rng, double max_angle = std::numbers::pi - 0.1) {
  Vec3 axis(rng.normal(), rng.normal(), rng.normal());
  axis.normalize();
  const double angle = rng.uniform(0.0, max_angle);
  const Vec3 t(rng.uniform(-5, 5), rng.uniform(-5, 5), rng.uniform(-5, 5));
  return {Quat(Eigen::AngleAxisd(angle, axis)), t};
}

double rotation_gap(const Pose& a, const Pose& b) { return (a.inverse() * b).angle(); }
double translation_gap(const Pose& a, const Pose& b) { return (a.translation - b.translation).norm(); }

}  // namespace

TEST(Pose, IdentityComposition) {
  Rng rng(1);
  const Pose p = random_pose(rng);
  const Pose q = compose(Pose::identity(), p);
  EXPECT_LT(rotation_gap(p, q), 1e-15);
  EXPECT_LT(translation_gap(p, q), 1e-15);
}

TEST(Pose, QuarterTurnMovesXOntoY) {
  const Vec3 y = transform_point(rotation_z(std::numbers::pi / 2), Vec3(1, 0, 0));
  EXPECT_NEAR(y.x(), 0.0, 1e-15);
  EXPECT_NEAR(y.y(), 1.0, 1e-15);
  EXPECT_NEAR(y.z(), 0.0, 1e-15);
}

TEST(Pose, InverseOfTranslation) {
  const Pose p = inverse(Pose::from_translation(Vec3(0, 0, 1)));
  EXPECT_EQ(p.translation, Vec3(0, 0, -1));
  EXPECT_LT(p.angle(), 1e-15);
  EXPECT_LT(inverse(Pose::identity()).angle(), 1e-15);
}

TEST(Pose, GroupAxiomsOnRandomPoses) {
  Rng rng(2);
  for (int i = 0; i < 1000; ++i) {
    const Pose a = random_pose(rng), b = random_pose(rng), c = random_pose(rng);
    const Pose e = compose(a, inverse(a));
    EXPECT_LT(e.angle(), 1e-12);
    EXPECT_LT(e.translation.norm(), 1e-12);
    const Pose l = compose(compose(a, b), c);
    const Pose r = compose(a, compose(b, c));
    EXPECT_LT(rotation_gap(l, r), 1e-12);
    EXPECT_LT(translation_gap(l, r), 1e-12);
    const Pose aa = inverse(inverse(a));
    EXPECT_LT(rotation_gap(a, aa), 1e-12);
    EXPECT_LT(translation_gap(a, aa), 1e-12);
    EXPECT_NEAR(a.rotation.norm(), 1.0, 1e-9);
    EXPECT_NEAR(l.rotation.norm(), 1.0, 1e-9);
  }
}

TEST(Pose, TransformMatchesHomogeneousMatrix) {
  Rng rng(3);
  for (int i = 0; i < 200; ++i) {
    const Pose p = random_pose(rng);
    const Vec3 x(rng.uniform(-3, 3), rng.uniform(-3, 3), rng.uniform(-3, 3));
    // Oracle: R and t assembled from the angle-axis, not from the quaternion.
    const Eigen::AngleAxisd aa(p.rotation);
    Mat4 m = Mat4::Identity();
    m.topLeftCorner<3, 3>() = aa.toRotationMatrix();
    m.topRightCorner<3, 1>() = p.translation;
    const Eigen::Vector4d h = m * x.homogeneous();
    EXPECT_LT((transform_point(p, x) - h.head<3>()).norm(), 1e-12);
  }
  EXPECT_EQ(transform_point(Pose::identity(), Vec3(1, 2, 3)), Vec3(1, 2, 3));
  EXPECT_EQ(transform_point(Pose::from_translation(Vec3(1, 0, 0)), Vec3::Zero()), Vec3(1, 0, 0));
}

TEST(PoseVec6, RoundTrip) {
  Rng rng(4);
  for (int i = 0; i < 1000; ++i) {
    Vec3 axis(rng.normal(), rng.normal(), rng.normal());
    axis.normalize();
    PoseVec6 v;
    v.head<3>() = rng.uniform(1e-6, std::numbers::pi - 0.1) * axis;
    v.tail<3>() = Vec3(rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-2, 2));
    EXPECT_LT((to_vec6(from_vec6(v)) - v).norm(), 1e-10);
  }
}

TEST(PoseVec6, SmallAngleRoundTrip) {
  PoseVec6 v;
  v << 1e-13, -2e-13, 3e-14, 0.1, 0.2, 0.3;
  EXPECT_LT((to_vec6(from_vec6(v)) - v).norm(), 1e-18);
}

TEST(PoseVec6, RetractIsLeftMultiplication) {
  Rng rng(5);
  const Pose p = random_pose(rng);
  PoseVec6 d;
  d << 0.01, -0.02, 0.03, 0.1, 0.0, -0.1;
  const Pose q = retract_left(p, d);
  const Pose oracle = Pose(Quat(Eigen::AngleAxisd(d.head<3>().norm(), d.head<3>().normalized())), d.tail<3>()) * p;
  EXPECT_LT(rotation_gap(q, oracle), 1e-14);
  EXPECT_LT(translation_gap(q, oracle), 1e-14);
}

TEST(Interpolate, ExactAtSampleStamps) {
  Rng rng(6);
  std::vector<TimedPose> s;
  for (int i = 0; i < 5; ++i) s.push_back({0.1 * i, random_pose(rng)});
  const TimedPoseStream stream(s);
  for (const auto& sample : s) {
    const Pose p = interpolate(stream, sample.stamp);
    EXPECT_EQ(p.translation, sample.pose.translation);
    EXPECT_EQ(p.rotation.coeffs(), sample.pose.rotation.coeffs());
  }
}

TEST(Interpolate, MidpointTranslation) {
  const TimedPoseStream stream({{0.0, Pose()}, {1.0, Pose::from_translation(Vec3(0, 0, 2))}});
  EXPECT_LT((interpolate(stream, 0.5).translation - Vec3(0, 0, 1)).norm(), 1e-15);
}

TEST(Interpolate, MidpointRotationIsHalfAngle) {
  const TimedPoseStream stream({{0.0, Pose()}, {1.0, rotation_z(std::numbers::pi / 2)}});
  const Pose mid = interpolate(stream, 0.5);
  // Closed form: slerp halfway between identity and Rz(90) is Rz(45).
  const Quat oracle(std::cos(std::numbers::pi / 8), 0, 0, std::sin(std::numbers::pi / 8));
  EXPECT_LT(mid.rotation.angularDistance(oracle), 1e-10);
}

TEST(Interpolate, ContinuousOnSmoothStream) {
  std::vector<TimedPose> s;
  for (int i = 0; i <= 200; ++i) {
    const double t = 0.005 * i;
    s.push_back({t, Pose(Quat(Eigen::AngleAxisd(t, Vec3(1, 1, 0).normalized())), Vec3(std::sin(t), t, 0))});
  }
  const TimedPoseStream stream(s);
  Rng rng(7);
  for (int i = 0; i < 500; ++i) {
    const double t = rng.uniform(0.0, 1.0 - 1e-6);
    const Pose a = stream.interpolate(t), b = stream.interpolate(t + 1e-6);
    EXPECT_LT(rotation_gap(a, b), 1e-4);
    EXPECT_LT(translation_gap(a, b), 1e-4);
  }
}

TEST(Interpolate, Errors) {
  const TimedPoseStream empty;
  try {
    empty.interpolate(0.0);
    FAIL();
  } catch (const CalibError& e) {
    EXPECT_EQ(e.code(), ErrorCode::kEmptyStream);
  }
  const TimedPoseStream stream({{1.0, Pose()}, {2.0, Pose()}});
  for (double t : {0.999, 2.001}) {
    try {
      stream.interpolate(t);
      FAIL();
    } catch (const CalibError& e) {
      EXPECT_EQ(e.code(), ErrorCode::kOutOfRange);
    }
  }
  try {
    TimedPoseStream({{1.0, Pose()}, {1.0, Pose()}});
    FAIL();
  } catch (const CalibError& e) {
    EXPECT_EQ(e.code(), ErrorCode::kNonMonotonicTimestamps);
  }
}

TEST(SamplePerturbation, ZeroRangeIsIdentity) {
  const Pose p = sample_perturbation(0.0, 0.0, 99);
  EXPECT_EQ(p.translation, Vec3::Zero());
  EXPECT_EQ(p.angle(), 0.0);
}

TEST(SamplePerturbation, Deterministic) {
  const Pose a = sample_perturbation(0.03, 5.0, 12345);
  const Pose b = sample_perturbation(0.03, 5.0, 12345);
  EXPECT_EQ(a.translation, b.translation);
  EXPECT_EQ(a.rotation.coeffs(), b.rotation.coeffs());
}

TEST(SamplePerturbation, MonteCarloBounds) {
  Vec3 mean = Vec3::Zero();
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    const Pose p = sample_perturbation(0.03, 5.0, mix_seed(8, i));
    ASSERT_LE(p.translation.cwiseAbs().maxCoeff(), 0.03);
    // Per-axis angles each within 5 deg bound the total angle by sqrt(3) * 5.
    ASSERT_LE(p.angle() * kDegPerRad, std::sqrt(3.0) * 5.0 + 1e-9);
    mean += p.translation;
  }
  mean /= n;
  EXPECT_LT(mean.cwiseAbs().maxCoeff(), 0.001);
}

TEST(SamplePerturbation, RotationOrderXThenYThenZ) {
  Rng rng(mix_seed(77, 0));
  Vec3 t;
  for (int i = 0; i < 3; ++i) t[i] = rng.uniform(-0.01, 0.01);
  double a[3];
  for (double& v : a) v = rng.uniform(-4.0, 4.0) * kRadPerDeg;
  const Mat3 oracle = (Eigen::AngleAxisd(a[2], Vec3::UnitZ()) * Eigen::AngleAxisd(a[1], Vec3::UnitY()) *
                       Eigen::AngleAxisd(a[0], Vec3::UnitX()))
                          .toRotationMatrix();
  const Pose p = sample_perturbation(0.01, 4.0, mix_seed(77, 0));
  EXPECT_LT((p.rotation.toRotationMatrix() - oracle).norm(), 1e-14);
  EXPECT_LT((p.translation - t).norm(), 1e-16);
}

TEST(PoseError, Definitions) {
  Rng rng(9);
  const Pose p = random_pose(rng);
  const PoseError same = pose_error(p, p);
  EXPECT_EQ(same.rotational_deg, 0.0);
  EXPECT_EQ(same.translational_m, 0.0);

  const PoseError rz = pose_error(rotation_z(5.0 * kRadPerDeg), Pose());
  EXPECT_NEAR(rz.rotational_deg, 5.0, 1e-12);
  EXPECT_EQ(rz.translational_m, 0.0);

  const PoseError swap = pose_error(Pose::from_translation(Vec3(0, 1, 0)), Pose::from_translation(Vec3(1, 0, 0)));
  EXPECT_EQ(swap.translational_m, 0.0);
  EXPECT_NEAR(relative_pose_error(Pose::from_translation(Vec3(0, 1, 0)), Pose::from_translation(Vec3(1, 0, 0))).translational_m,
              std::sqrt(2.0), 1e-15);
}

TEST(PoseError, NonNegative) {
  Rng rng(10);
  for (int i = 0; i < 500; ++i) {
    const PoseError e = pose_error(random_pose(rng), random_pose(rng));
    EXPECT_GE(e.rotational_deg, 0.0);
    EXPECT_GE(e.translational_m, 0.0);
  }
}

TEST(Rng, SeededStreamsRepeat) {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next(), b.next());
  EXPECT_NE(mix_seed(1, 2), mix_seed(1, 3));
  EXPECT_NE(mix_seed(1, 2), mix_seed(2, 2));
}
