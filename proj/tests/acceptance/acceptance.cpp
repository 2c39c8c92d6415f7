// Acceptance checks: one PASS/FAIL line per criterion, tolerances pinned here.
#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "../test_support.hpp"

using namespace mcs_calib;
using namespace mcs_calib::testing;

namespace {

// Pinned tolerances.
constexpr double kExactTransM = 1e-6;
constexpr double kExactRotDeg = 1e-5;
constexpr double kExactSecondsPerTrial = 10.0;
constexpr double kLidarNoiseM = 0.01;
constexpr double kPixelNoisePx = 0.5;
constexpr double kNoisyLidarTransMm = 2.0;
constexpr double kNoisyLidarRotDeg = 0.02;
constexpr double kReprojLowRatio = 0.3;
constexpr double kReprojHighRatio = 1.0;
constexpr double kCameraRotDeg = 0.1;
constexpr double kNullCosine = 0.99;
constexpr double kCylinderTransMm = 2.0;
constexpr double kCylinderRotDeg = 0.05;
constexpr double kAblationRatio = 2.0;
constexpr double kJacobianRelTol = 1e-6;

int failures = 0;
bool all_inner_monotone = true;

void report(int id, bool pass, const std::string& detail) {
  std::printf("%s criterion %d: %s\n", pass ? "PASS" : "FAIL", id, detail.c_str());
  std::fflush(stdout);
  if (!pass) ++failures;
}

void info(const std::string& s) {
  std::printf("  info: %s\n", s.c_str());
  std::fflush(stdout);
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof(buf), f, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

struct LidarStats {
  double trans_mm = 0, rot_deg = 0, reproj_px = 0, camera_rot_deg = 0, loop_trans_mm = 0, loop_rot_deg = 0;
  std::size_t ok = 0, failed = 0;
};

LidarStats mean_over(const StudyResult& r, int count, const std::string& lidar, const std::string& camera = "") {
  LidarStats s;
  for (const auto& row : r.rows) {
    if (row.count != count) continue;
    if (!row.error.empty()) {
      ++s.failed;
      continue;
    }
    all_inner_monotone = all_inner_monotone && row.inner_cost_monotone;
    ++s.ok;
    if (!lidar.empty()) {
      s.trans_mm += 1000.0 * row.per_sensor.at(lidar).translational_m;
      s.rot_deg += row.per_sensor.at(lidar).rotational_deg;
      s.loop_trans_mm += 1000.0 * row.per_sensor_loop.at(lidar).translational_m;
      s.loop_rot_deg += row.per_sensor_loop.at(lidar).rotational_deg;
    }
    if (!camera.empty()) {
      s.reproj_px += row.reproj_px;
      s.camera_rot_deg += row.per_sensor.at(camera).rotational_deg;
    }
  }
  if (s.ok > 0) {
    const double n = static_cast<double>(s.ok);
    s.trans_mm /= n;
    s.rot_deg /= n;
    s.reproj_px /= n;
    s.camera_rot_deg /= n;
    s.loop_trans_mm /= n;
    s.loop_rot_deg /= n;
  }
  return s;
}

void criterion_1(std::vector<bool>& fixed_points) {
  const ScenarioConfig sc = rig_scenario(11, 5, 0.0, 0.0);
  const Simulation sim = simulate(sc);
  bool pass = true;
  double worst_t = 0, worst_r = 0, worst_s = 0;
  for (int k = 0; k < 20; ++k) {
    RunConfig cfg = sim.run_config;
    for (std::size_t si = 0; si < cfg.sensors.size(); ++si) {
      cfg.sensors[si].initial_extrinsic = apply_perturbation(
          sim.ledger.extrinsics.at(cfg.sensors[si].id),
          sample_perturbation(0.03, 5.0, mix_seed(1234, 16 * static_cast<std::uint64_t>(k) + si)));
    }
    const auto t0 = std::chrono::steady_clock::now();
    try {
      const PipelineResult out = run_pipeline(sim.dataset, cfg, sim.ledger.extrinsics);
      const double secs = seconds_since(t0);
      worst_s = std::max(worst_s, secs);
      for (const auto& [id, truth] : sim.ledger.extrinsics) {
        const PoseError e = pose_error(out.calibration.state.extrinsics.at(id), truth);
        worst_t = std::max(worst_t, e.translational_m);
        worst_r = std::max(worst_r, e.rotational_deg);
      }
      all_inner_monotone = all_inner_monotone && inner_costs_monotone(out.calibration.state);
      fixed_points.push_back(out.calibration.state.correspondence_fixed_point);
    } catch (const std::exception& e) {
      info(fmt("trial %d threw: %s", k, e.what()));
      pass = false;
    }
  }
  pass = pass && worst_t < kExactTransM && worst_r < kExactRotDeg && worst_s < kExactSecondsPerTrial;
  report(1, pass,
         fmt("exact recovery over 20 perturbed starts: worst %.3g m / %.3g deg (limits %g / %g), slowest trial %.2f s (limit %g)",
             worst_t, worst_r, kExactTransM, kExactRotDeg, worst_s, kExactSecondsPerTrial));
}

void criterion_2(int threads) {
  const ScenarioConfig sc = rig_scenario(21, 5, kLidarNoiseM, kPixelNoisePx);
  const StudyResult r = run_perturbation_study(sc, 5, 0.03, 5.0, {5, 30}, threads);
  const LidarStats s5 = mean_over(r, 5, "lidar");
  const LidarStats s30 = mean_over(r, 30, "lidar");
  info(fmt("noise assumption: lidar range sigma %.3g m along the ray, pixel sigma %.3g px, MCS noise-free", kLidarNoiseM,
           kPixelNoisePx));
  info(fmt("lidar at 5 measurements: %.4f mm / %.5f deg; at 30: %.4f mm / %.5f deg",
           s5.trans_mm, s5.rot_deg, s30.trans_mm, s30.rot_deg));
  info(fmt("lidar-from-target loop at 30 measurements: %.4f mm / %.5f deg", s30.loop_trans_mm, s30.loop_rot_deg));
  const bool pass = s5.failed == 0 && s30.failed == 0 && s30.ok == 5 && s30.trans_mm <= kNoisyLidarTransMm &&
                    s30.rot_deg <= kNoisyLidarRotDeg && s30.trans_mm <= s5.trans_mm && s30.rot_deg <= s5.rot_deg;
  report(2, pass,
         fmt("noisy lidar, 30 measurements x 5 trials: %.3f mm / %.4f deg (limits %g / %g); 30 <= 5 trend: %s",
             s30.trans_mm, s30.rot_deg, kNoisyLidarTransMm, kNoisyLidarRotDeg,
             (s30.trans_mm <= s5.trans_mm && s30.rot_deg <= s5.rot_deg) ? "yes" : "no"));
}

void criterion_3(int threads) {
  const ScenarioConfig sc = rig_scenario(31, 15, kLidarNoiseM, kPixelNoisePx);
  const StudyResult r = run_perturbation_study(sc, 5, 0.03, 5.0, {15}, threads);
  const LidarStats s = mean_over(r, 15, "", "camera");
  const double ratio = s.reproj_px / kPixelNoisePx;
  info(fmt("mean |reprojection| of an isotropic 2-D Gaussian is sigma*sqrt(pi/2) = %.3f sigma before fitting",
           std::sqrt(std::numbers::pi / 2.0)));
  const bool pass = s.failed == 0 && ratio >= kReprojLowRatio && ratio <= kReprojHighRatio && s.camera_rot_deg <= kCameraRotDeg;
  report(3, pass,
         fmt("camera sigma %.2f px, 15 measurements x 5 trials: reprojection %.4f px = %.3f sigma (band [%g, %g]), rotation %.4f deg (limit %g)",
             kPixelNoisePx, s.reproj_px, ratio, kReprojLowRatio, kReprojHighRatio, s.camera_rot_deg, kCameraRotDeg));
}

ScenarioConfig cylinder_scenario(std::uint64_t seed, int count) {
  ScenarioConfig sc;
  sc.seed = seed;
  sc.robot_pose = Pose(Quat(Eigen::AngleAxisd(-0.4, Vec3::UnitZ())), Vec3(0.5, -1.0, 0.4));
  sc.sensors = {rig_lidar()};
  sc.targets = {{cylinder_target(), Pose()}};
  sc.placements.count = count;
  sc.lidar.range_noise = kLidarNoiseM;
  return sc;
}

void criterion_4(int threads) {
  // (a) single measurement
  bool pass_a = false;
  std::string detail_a = "no RankDeficient raised";
  {
    const ScenarioConfig sc = cylinder_scenario(41, 1);
    const Simulation sim = simulate(sc);
    RunConfig cfg = sim.run_config;
    cfg.sensors[0].initial_extrinsic = sim.ledger.extrinsics.at("lidar");
    try {
      run_pipeline(sim.dataset, cfg);
    } catch (const RankDeficientError& e) {
      // Rotation about the cylinder axis line, written as a left perturbation
      // of the extrinsic: omega = a, v = c x a (robot frame).
      const Pose t_rt = sim.ledger.instants.at(0).t_rt_actual;
      const Vec3 a = t_rt.rotation * Vec3::UnitZ();
      const Vec3 c = t_rt.translation;
      Eigen::VectorXd d = Eigen::VectorXd::Zero(e.null_space().rows());
      const auto& labels = e.labels();
      const auto at = std::find(labels.begin(), labels.end(), "sensor:lidar/rx") - labels.begin();
      d.segment<3>(at) = a;
      d.segment<3>(at + 3) = c.cross(a);
      d.normalize();
      const double cosine = (e.null_space().transpose() * d).norm();
      pass_a = cosine > kNullCosine;
      detail_a = fmt("RankDeficient (condition %.3g, %ld near-null directions), cosine to axis rotation %.6f (limit %g)",
                     e.condition(), static_cast<long>(e.null_space().cols()), cosine, kNullCosine);
    } catch (const std::exception& e) {
      detail_a = std::string("unexpected error: ") + e.what();
    }
  }
  // (b) 15 measurements
  const StudyResult r = run_perturbation_study(cylinder_scenario(42, 15), 3, 0.03, 5.0, {15}, threads);
  const LidarStats s = mean_over(r, 15, "lidar");
  for (const auto& row : r.rows) {
    if (!row.error.empty()) info("cylinder trial failed: " + row.error);
  }
  const bool pass_b = s.failed == 0 && s.trans_mm <= kCylinderTransMm && s.rot_deg <= kCylinderRotDeg;
  report(4, pass_a && pass_b,
         "(a) " + detail_a + "; (b) 15 cylinder measurements x 3 trials, lidar sigma " + fmt("%.3g", kLidarNoiseM) +
             fmt(" m: %.3f mm / %.4f deg (limits %g / %g)", s.trans_mm, s.rot_deg, kCylinderTransMm, kCylinderRotDeg));
}

void criterion_5() {
  const ScenarioConfig sc = rig_scenario(51, 15, kLidarNoiseM, kPixelNoisePx);
  // 2 cm, split between the board plane and its normal.
  const Pose injected = Pose::from_translation(Vec3(0.01, 0.01, 0.02 / std::sqrt(2.0)));
  const TeAblation abl = make_te_ablation(sc, injected);
  try {
    const PipelineResult with = run_pipeline(abl.simulation.dataset, abl.with_te);
    const PipelineResult without = run_pipeline(abl.simulation.dataset, abl.without_te);
    all_inner_monotone = all_inner_monotone && inner_costs_monotone(with.calibration.state) &&
                         inner_costs_monotone(without.calibration.state);
    const double e_with = with.calibration.errors.mean_euclidean_m;
    const double e_without = without.calibration.errors.mean_euclidean_m;
    const Pose te = with.calibration.state.target_alignment("diamond");
    info(fmt("recovered alignment translation (%.4f, %.4f, %.4f) m vs injected (%.4f, %.4f, %.4f)", te.translation.x(),
             te.translation.y(), te.translation.z(), injected.translation.x(), injected.translation.y(),
             injected.translation.z()));
    const PoseError lw = pose_error(with.calibration.state.extrinsics.at("lidar"), abl.simulation.ledger.extrinsics.at("lidar"));
    const PoseError lo = pose_error(without.calibration.state.extrinsics.at("lidar"), abl.simulation.ledger.extrinsics.at("lidar"));
    info(fmt("lidar pose error with: %.3f mm / %.4f deg, without: %.3f mm / %.4f deg", 1000 * lw.translational_m,
             lw.rotational_deg, 1000 * lo.translational_m, lo.rotational_deg));
    const double ratio = e_without / e_with;
    {
      ScenarioConfig quiet = sc;
      quiet.lidar.range_noise = 0.002;
      const TeAblation q = make_te_ablation(quiet, injected);
      const double qw = run_pipeline(q.simulation.dataset, q.with_te).calibration.errors.mean_euclidean_m;
      const double qo = run_pipeline(q.simulation.dataset, q.without_te).calibration.errors.mean_euclidean_m;
      info(fmt("same offset at lidar sigma 0.002 m: %.5f m with vs %.5f m without, ratio %.2f", qw, qo, qo / qw));
    }
    report(5, ratio >= kAblationRatio,
           fmt("2 cm injected offset, lidar sigma %.3g m: mean Euclidean %.5f m with vs %.5f m without, ratio %.2f (limit %g)",
               kLidarNoiseM, e_with, e_without, ratio, kAblationRatio));
  } catch (const std::exception& e) {
    report(5, false, std::string("pipeline error: ") + e.what());
  }
}

std::vector<std::vector<std::size_t>> union_find_clusters(const std::vector<Vec3>& pts, double tol, std::size_t min_size) {
  std::vector<std::size_t> parent(pts.size());
  std::iota(parent.begin(), parent.end(), 0);
  std::function<std::size_t(std::size_t)> find = [&](std::size_t i) { return parent[i] == i ? i : parent[i] = find(parent[i]); };
  for (std::size_t i = 0; i < pts.size(); ++i) {
    for (std::size_t j = i + 1; j < pts.size(); ++j) {
      if ((pts[i] - pts[j]).norm() <= tol) parent[find(i)] = find(j);
    }
  }
  std::map<std::size_t, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < pts.size(); ++i) groups[find(i)].push_back(i);
  std::vector<std::vector<std::size_t>> out;
  for (auto& [root, g] : groups) {
    if (g.size() >= min_size) out.push_back(g);
  }
  return out;
}

std::vector<std::vector<std::size_t>> canonical(std::vector<std::vector<std::size_t>> c) {
  for (auto& g : c) std::sort(g.begin(), g.end());
  std::sort(c.begin(), c.end());
  return c;
}

void criterion_6() {
  Rng rng(606);
  int cluster_ok = 0;
  for (int k = 0; k < 100; ++k) {
    std::vector<Vec3> pts(500);
    for (auto& p : pts) p = Vec3(rng.uniform(0, 2), rng.uniform(0, 2), rng.uniform(0, 0.5));
    const double tol = rng.uniform(0.05, 0.15);
    const std::size_t min_size = 1 + static_cast<std::size_t>(rng.index(5));
    cluster_ok += canonical(euclidean_cluster(pts, tol, min_size)) == canonical(union_find_clusters(pts, tol, min_size));
  }

  int nns_ok = 0;
  for (int k = 0; k < 100; ++k) {
    std::vector<Vec3> keys(300), meas(120);
    for (auto& p : keys) p = Vec3(rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), rng.uniform(-0.02, 0.02));
    const Pose pose = from_vec6((PoseVec6() << rng.normal(0.3), rng.normal(0.3), rng.normal(0.3), rng.uniform(1, 3),
                                 rng.normal(0.5), rng.normal(0.5)).finished());
    for (auto& p : meas) p = pose * keys[rng.index(300)] + Vec3(rng.normal(0.01), rng.normal(0.01), rng.normal(0.01));
    CorrespondenceOptions opt;
    opt.max_distance = 0.1;
    const CorrespondenceSet tree = correspond_3d(meas, keys, pose, opt);
    std::vector<Vec3> placed;
    for (const auto& p : keys) placed.push_back(pose * p);
    auto brute = [&](const Vec3& q) {
      std::size_t best = 0;
      for (std::size_t i = 1; i < placed.size(); ++i) {
        if ((placed[i] - q).squaredNorm() < (placed[best] - q).squaredNorm()) best = i;
      }
      return best;
    };
    const CorrespondenceSet bf = match_centroid_aligned<3>(std::span<const Vec3>(meas), std::span<const Vec3>(placed), brute, opt);
    bool same = tree.pairs.size() == bf.pairs.size();
    for (std::size_t i = 0; same && i < tree.pairs.size(); ++i) {
      same = tree.pairs[i].measured == bf.pairs[i].measured && tree.pairs[i].keypoint == bf.pairs[i].keypoint;
    }
    nns_ok += same;
  }

  double worst_rel = 0.0;
  int jac_cases = 0;
  const CameraIntrinsics cam = rig_intrinsics();
  for (int k = 0; k < 100; ++k) {
    for (SensorKind kind : {SensorKind::kLidar, SensorKind::kCamera}) {
      const Pose t_mr = from_vec6((PoseVec6() << rng.normal(0.5), rng.normal(0.5), rng.normal(0.5), rng.normal(1),
                                   rng.normal(1), rng.normal(0.3)).finished());
      const Pose t_rs = kind == SensorKind::kCamera ? camera_optical_mount(Vec3(rng.normal(0.1), rng.normal(0.1), rng.normal(0.1))) *
                                                          from_vec6((PoseVec6() << rng.normal(0.05), rng.normal(0.05), rng.normal(0.05), 0, 0, 0).finished())
                                                    : from_vec6((PoseVec6() << rng.normal(0.2), rng.normal(0.2), rng.normal(0.2),
                                                                 rng.normal(0.2), rng.normal(0.2), rng.normal(0.2)).finished());
      const Pose t_e = from_vec6((PoseVec6() << rng.normal(0.02), rng.normal(0.02), rng.normal(0.02), rng.normal(0.02),
                                  rng.normal(0.02), rng.normal(0.02)).finished());
      // Target about 2.5 m ahead of the sensor.
      const Vec3 ahead = kind == SensorKind::kCamera ? Vec3(rng.normal(0.3), rng.normal(0.2), 2.5) : Vec3(2.5, rng.normal(0.3), rng.normal(0.2));
      const Pose t_st(exp_rotation(Vec3(rng.normal(0.4), rng.normal(0.4), rng.normal(0.4))), ahead);
      const Pose t_mt = t_mr * t_rs * t_st * t_e.inverse();
      ResidualBlock b = make_block(kind, t_mt, t_mr, Vec3(rng.uniform(-0.4, 0.4), rng.uniform(-0.4, 0.4), 0.0));
      if (kind == SensorKind::kCamera) b.intrinsics = &cam;
      b.measured_point = Vec3(2.5, 0.1, 0.0);
      b.measured_pixel = Vec2(300, 250);
      BlockJacobian ja, jn;
      if (!analytic_jacobian(t_rs, t_e, b, ja) || !numeric_jacobian(t_rs, t_e, b, 1e-6, jn)) continue;
      ++jac_cases;
      worst_rel = std::max(worst_rel, (ja - jn).norm() / std::max(ja.norm(), 1e-12));
    }
  }
  const bool pass = cluster_ok == 100 && nns_ok == 100 && jac_cases == 200 && worst_rel <= kJacobianRelTol;
  report(6, pass,
         fmt("clustering == union-find on %d/100, kd-tree correspondence == brute force on %d/100, analytic vs finite-difference Jacobian worst relative %.3g over %d blocks (limit %g)",
             cluster_ok, nns_ok, worst_rel, jac_cases, kJacobianRelTol));
}

void criterion_7(const std::vector<bool>& fixed_points) {
  const bool fixed = !fixed_points.empty() && std::all_of(fixed_points.begin(), fixed_points.end(), [](bool b) { return b; });

  const ScenarioConfig sc = rig_scenario(71, 5, kLidarNoiseM, kPixelNoisePx);
  const fs::path a = scratch_dir("det_a"), b = scratch_dir("det_b");
  std::string report_a, report_b, report_threads;
  for (const fs::path& dir : {a, b}) {
    const Simulation sim = simulate(sc);
    write_simulation(sim, dir);
    const Dataset ds = load_dataset(dir);
    const RunConfig cfg = load_run_config(dir / "run_config.json");
    const PipelineResult out = run_pipeline(ds, cfg);
    all_inner_monotone = all_inner_monotone && inner_costs_monotone(out.calibration.state);
    ReportInputs in;
    in.result = &out.calibration;
    (dir == a ? report_a : report_b) = report_to_json(in).dump();
    if (dir == b) {
      RunConfig threaded = cfg;
      threaded.solver.threads = 4;
      const PipelineResult out4 = run_pipeline(ds, threaded);
      ReportInputs in4;
      in4.result = &out4.calibration;
      report_threads = report_to_json(in4).dump();
    }
  }
  bool files_same = true;
  for (const auto& e : fs::directory_iterator(a)) {
    files_same = files_same && read_file(e.path()) == read_file(b / e.path().filename());
  }
  const bool det = files_same && report_a == report_b;
  fs::remove_all(a);
  fs::remove_all(b);
  report(7, all_inner_monotone && fixed && det,
         fmt("accepted-step cost monotone on all runs: %s; correspondence fixed point on zero-noise runs: %s (%zu runs); simulate->calibrate bit-identical across two runs: %s",
             all_inner_monotone ? "yes" : "no", fixed ? "yes" : "no", fixed_points.size(), det ? "yes" : "no"));
  info(std::string("report identical with 4 solver threads: ") + (report_threads == report_b ? "yes" : "no"));
}

void criterion_8() {
  // Decoy cube of half the target's bounding volume, centered 0.8 m from the
  // board center along its in-plane diagonal, which is turned horizontal.
  const TargetSetup diamond = diamond_target();
  const double side = std::cbrt(0.5 * diamond.spec.volume);
  int correct = 0, observed = 0;
  for (int trial = 0; trial < 100; ++trial) {
    Rng rng(mix_seed(808, static_cast<std::uint64_t>(trial)));
    ScenarioConfig sc;
    sc.seed = mix_seed(809, static_cast<std::uint64_t>(trial));
    const SensorSetup lidar = rig_lidar();
    sc.sensors = {lidar};
    sc.targets = {{diamond, Pose()}};
    const double range = rng.uniform(1.5, 2.5);
    const double az = rng.uniform(-20.0, 20.0) * kRadPerDeg;
    const Vec3 dir(std::cos(az), std::sin(az), 0.0);
    Mat3 facing = sim_detail::facing_rotation(TargetKind::kDiamond, dir, Vec3::UnitZ());
    const double roll = (45.0 + rng.uniform(-10.0, 10.0)) * kRadPerDeg;
    const Pose board_in_lidar(Quat(Eigen::AngleAxisd(roll, dir) * facing), range * dir);
    const Pose board = lidar.initial_extrinsic * board_in_lidar;
    sc.placements.poses = {board};
    const Vec3 diag = Vec3(1, 1, 0).normalized();
    sc.decoys = {{board * Pose::from_translation(0.8 * diag), Vec3::Constant(side)}};
    // Rolled 45 degrees, half the board's box corners leave the +-15 degree
    // band while the diamond itself stays inside it.
    sc.gates.fov_fraction = 0.5;
    const Simulation sim = simulate(sc);
    const ExtractionResult ex = extract_all(sim.dataset, sim.run_config.robot_frame, sim.run_config.sensors,
                                            sim.run_config.targets, sim.run_config.initial_extrinsics(), sim.run_config.gates);
    // Did the decoy return any points at all?
    std::size_t decoy_hits = 0;
    for (const auto& s : sim.dataset.scans.at("lidar")) {
      for (const auto& p : s.points) {
        const Vec3 q = (board_in_lidar * Pose::from_translation(0.8 * diag)).inverse() * p;
        decoy_hits += (q.cwiseAbs().array() <= 0.5 * side + 0.05).all();
      }
    }
    observed += decoy_hits > 0;
    if (ex.measurements.size() != 1) continue;
    bool ok = true;
    for (const auto& p : ex.measurements[0].lidar_points) {
      const Vec3 q = board_in_lidar.inverse() * p;
      ok = ok && std::abs(q.z()) < 0.06 && std::abs(q.x()) + std::abs(q.y()) < 0.56;
    }
    correct += ok;
  }

  // Velocity gate: target sliding at 0.5 m/s in front of a static robot.
  bool all_rejected = false;
  std::size_t instants = 0;
  {
    Dataset ds;
    std::vector<TimedPose> robot, target;
    const SensorSetup lidar = rig_lidar();
    const Pose start = lidar.initial_extrinsic * Pose(Quat(sim_detail::facing_rotation(TargetKind::kDiamond, Vec3::UnitX(), Vec3::UnitZ())), Vec3(2.0, -1.0, 0.0));
    for (int k = 0; k <= 800; ++k) {
      const double t = k / 200.0;
      robot.push_back({t, Pose()});
      target.push_back({t, Pose::from_translation(Vec3(0.0, 0.5 * t, 0.0)) * start});
    }
    ds.streams.emplace("robot", TimedPoseStream(robot));
    ds.streams.emplace("diamond_body", TimedPoseStream(target));
    for (double t = 0.5; t < 3.6; t += 0.25) {
      const Pose now = lidar.initial_extrinsic.inverse() * Pose::from_translation(Vec3(0.0, 0.5 * t, 0.0)) * start;
      LidarScanRecord scan{t, "lidar", {}};
      for (const auto& p : diamond.spec.template_cloud) {
        if (scan.points.size() < 400) scan.points.push_back(now * p);
      }
      ds.scans["lidar"].push_back(scan);
      ++instants;
    }
    GateSettings gates;
    gates.max_linear_velocity = 0.1;
    const ExtractionResult ex = extract_all(ds, "robot", {lidar}, {diamond}, {{"lidar", lidar.initial_extrinsic}}, gates);
    std::size_t velocity = 0;
    for (const auto& s : ex.skipped) velocity += s.reason == "velocity";
    all_rejected = ex.measurements.empty() && velocity == instants;
    info(fmt("velocity gate: %zu/%zu instants rejected for speed 0.5 m/s over limit %.2f m/s", velocity, instants,
             gates.max_linear_velocity));
  }
  report(8, correct == 100 && all_rejected,
         fmt("decoy (cube %.3f m, 0.8 m from target): correct cluster in %d/100 trials (decoy returned points in %d); moving target rejected at every instant: %s",
             side, correct, observed, all_rejected ? "yes" : "no"));
}

}  // namespace

// Optional arguments pick a subset of criteria, e.g. `acceptance 2 5`.
int main(int argc, char** argv) {
  std::vector<int> only;
  for (int i = 1; i < argc; ++i) only.push_back(std::atoi(argv[i]));
  const int threads = default_thread_count();
  std::printf("acceptance run, %d worker thread(s)\n", threads);
  std::vector<bool> fixed_points;
  const auto guard = [&](int id, auto&& fn) {
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) return;
    try {
      fn();
    } catch (const std::exception& e) {
      report(id, false, std::string("unexpected error: ") + e.what());
    }
  };
  guard(1, [&] { criterion_1(fixed_points); });
  guard(2, [&] { criterion_2(threads); });
  guard(3, [&] { criterion_3(threads); });
  guard(4, [&] { criterion_4(threads); });
  guard(5, [&] { criterion_5(); });
  guard(6, [&] { criterion_6(); });
  guard(7, [&] { criterion_7(fixed_points); });
  guard(8, [&] { criterion_8(); });
  std::printf("%d criterion(s) failed\n", failures);
  return failures == 0 ? 0 : 1;
}
