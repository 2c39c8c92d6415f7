#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mcs_calib/error.hpp"
#include "mcs_calib/se3.hpp"

namespace mcs_calib {

namespace fs = std::filesystem;
using nlohmann::json;

struct McsRecord {
  double timestamp = 0.0;
  std::string frame_id;
  Pose pose;
};

struct LidarScanRecord {
  double timestamp = 0.0;
  std::string sensor_id;
  std::vector<Vec3> points;
};

struct CameraDetectionRecord {
  double timestamp = 0.0;
  std::string sensor_id;
  std::vector<Vec2> pixels;
  /// Parallel to pixels; present only when the target keypoints are unique.
  std::optional<std::vector<int>> keypoint_ids;
  /// Restricts the detection to one target when set.
  std::optional<std::string> target_id;
};

/// One recording session: MCS trajectories plus raw sensor records.
struct Dataset {
  std::map<std::string, TimedPoseStream> streams;
  std::map<std::string, std::vector<LidarScanRecord>> scans;
  std::map<std::string, std::vector<CameraDetectionRecord>> detections;

  /// Latest first stamp and earliest last stamp over all streams.
  std::pair<double, double> mcs_span() const {
    double lo = -std::numeric_limits<double>::infinity();
    double hi = std::numeric_limits<double>::infinity();
    for (const auto& [id, s] : streams) {
      if (s.empty()) continue;
      lo = std::max(lo, s.first_stamp());
      hi = std::min(hi, s.last_stamp());
    }
    return {lo, hi};
  }
};

// ---------------------------------------------------------------------------
// JSON helpers

inline json vec_to_json(const Vec3& v) { return json::array({v.x(), v.y(), v.z()}); }
inline json vec_to_json(const Vec2& v) { return json::array({v.x(), v.y()}); }

inline json pose_to_json(const Pose& p) {
  return {{"q", {p.rotation.w(), p.rotation.x(), p.rotation.y(), p.rotation.z()}},
          {"p", vec_to_json(p.translation)}};
}

inline json vec6_to_json(const PoseVec6& v) {
  json a = json::array();
  for (int i = 0; i < 6; ++i) a.push_back(v[i]);
  return a;
}

namespace detail {

[[noreturn]] inline void parse_fail(const std::string& where, const std::string& what) {
  throw CalibError(ErrorCode::kParseError, where + ": " + what);
}

inline double finite_number(const json& j, const std::string& where) {
  if (!j.is_number()) parse_fail(where, "expected a number");
  const double v = j.get<double>();
  if (!std::isfinite(v)) parse_fail(where, "non-finite value");
  return v;
}

template <int N>
Eigen::Matrix<double, N, 1> fixed_vector(const json& j, const std::string& where) {
  if (!j.is_array() || j.size() != N) parse_fail(where, "expected an array of " + std::to_string(N) + " numbers");
  Eigen::Matrix<double, N, 1> v;
  for (int i = 0; i < N; ++i) v[i] = finite_number(j[i], where);
  return v;
}

inline Pose pose_from_json(const json& j, const std::string& where) {
  if (!j.is_object() || !j.contains("q") || !j.contains("p")) parse_fail(where, "pose needs \"q\" and \"p\"");
  const auto q = fixed_vector<4>(j["q"], where);
  if (q.norm() < 1e-9) parse_fail(where, "zero quaternion");
  return {Quat(q[0], q[1], q[2], q[3]), fixed_vector<3>(j["p"], where)};
}

template <int N>
std::vector<Eigen::Matrix<double, N, 1>> vector_list(const json& j, const std::string& where) {
  if (!j.is_array()) parse_fail(where, "expected a list");
  std::vector<Eigen::Matrix<double, N, 1>> out;
  out.reserve(j.size());
  for (const auto& e : j) out.push_back(fixed_vector<N>(e, where));
  return out;
}

template <class Fn>
void for_each_json_line(const fs::path& path, Fn&& fn) {
  std::ifstream in(path);
  if (!in) throw CalibError(ErrorCode::kIoError, "cannot open " + path.string());
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = path.filename().string() + ":" + std::to_string(line_no);
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      parse_fail(where, e.what());
    }
    if (!j.is_object()) parse_fail(where, "expected a JSON object");
    try {
      fn(j, where);
    } catch (const json::exception& e) {
      parse_fail(where, e.what());
    }
  }
}

inline double stamp_field(const json& j, const std::string& where) {
  if (!j.contains("t")) parse_fail(where, "missing \"t\"");
  return finite_number(j["t"], where);
}

}  // namespace detail

/// Writes through a temporary file and renames it into place.
inline void write_file_atomic(const fs::path& path, const std::string& content) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CalibError(ErrorCode::kIoError, "cannot write " + tmp.string());
    out << content;
    out.flush();
    if (!out) throw CalibError(ErrorCode::kIoError, "write failed for " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw CalibError(ErrorCode::kIoError, "rename to " + path.string() + " failed: " + ec.message());
}

inline json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw CalibError(ErrorCode::kIoError, "cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw CalibError(ErrorCode::kParseError, path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Loading

/// Reads mcs.jsonl plus every lidar_<id>.jsonl / camera_<id>.jsonl found in dir.
inline Dataset load_dataset(const fs::path& dir) {
  const fs::path mcs_path = dir / "mcs.jsonl";
  if (!fs::exists(mcs_path)) throw CalibError(ErrorCode::kIoError, "missing " + mcs_path.string());

  Dataset ds;
  std::map<std::string, std::vector<TimedPose>> samples;
  detail::for_each_json_line(mcs_path, [&](const json& j, const std::string& where) {
    const double t = detail::stamp_field(j, where);
    if (!j.contains("frame") || !j["frame"].is_string()) detail::parse_fail(where, "missing \"frame\"");
    const std::string frame = j["frame"].get<std::string>();
    auto& list = samples[frame];
    if (!list.empty() && !(t > list.back().stamp)) {
      throw CalibError(ErrorCode::kNonMonotonicTimestamps, where + ": frame '" + frame + "' stamp " +
                                                               std::to_string(t) + " not after " +
                                                               std::to_string(list.back().stamp));
    }
    list.push_back({t, detail::pose_from_json(j, where)});
  });
  for (auto& [frame, list] : samples) ds.streams.emplace(frame, TimedPoseStream(std::move(list)));

  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir)) files.push_back(entry.path());
  std::sort(files.begin(), files.end());
  for (const auto& path : files) {
    const std::string name = path.filename().string();
    if (path.extension() != ".jsonl") continue;
    const std::string stem = path.stem().string();
    if (name.rfind("lidar_", 0) == 0) {
      const std::string id = stem.substr(6);
      auto& scans = ds.scans[id];
      detail::for_each_json_line(path, [&](const json& j, const std::string& where) {
        LidarScanRecord r{detail::stamp_field(j, where), id, {}};
        if (!j.contains("points")) detail::parse_fail(where, "missing \"points\"");
        r.points = detail::vector_list<3>(j["points"], where);
        scans.push_back(std::move(r));
      });
    } else if (name.rfind("camera_", 0) == 0) {
      const std::string id = stem.substr(7);
      auto& dets = ds.detections[id];
      detail::for_each_json_line(path, [&](const json& j, const std::string& where) {
        CameraDetectionRecord r{detail::stamp_field(j, where), id, {}, std::nullopt, std::nullopt};
        if (!j.contains("pixels")) detail::parse_fail(where, "missing \"pixels\"");
        r.pixels = detail::vector_list<2>(j["pixels"], where);
        if (j.contains("ids")) {
          if (!j["ids"].is_array() || j["ids"].size() != r.pixels.size()) {
            detail::parse_fail(where, "\"ids\" must parallel \"pixels\"");
          }
          std::vector<int> ids = j["ids"].get<std::vector<int>>();
          std::set<int> unique(ids.begin(), ids.end());
          if (unique.size() != ids.size()) detail::parse_fail(where, "duplicate keypoint ids");
          r.keypoint_ids = std::move(ids);
        }
        if (j.contains("target")) r.target_id = j["target"].get<std::string>();
        dets.push_back(std::move(r));
      });
    }
  }

  if (ds.streams.empty()) return ds;
  const auto [lo, hi] = ds.mcs_span();
  auto check = [&](double t, const std::string& what) {
    if (t < lo || t > hi) {
      throw CalibError(ErrorCode::kSensorOutsideMcsSpan, what + " stamp " + std::to_string(t) +
                                                             " outside MCS span [" + std::to_string(lo) + ", " +
                                                             std::to_string(hi) + "]");
    }
  };
  for (const auto& [id, scans] : ds.scans) {
    for (const auto& s : scans) check(s.timestamp, "lidar_" + id);
  }
  for (const auto& [id, dets] : ds.detections) {
    for (const auto& d : dets) check(d.timestamp, "camera_" + id);
  }
  return ds;
}

/// Throws UnknownFrame when a referenced MCS frame has no samples.
inline void require_frames(const Dataset& ds, const std::vector<std::string>& frames) {
  for (const auto& f : frames) {
    const auto it = ds.streams.find(f);
    if (it == ds.streams.end() || it->second.empty()) {
      throw CalibError(ErrorCode::kUnknownFrame, "frame '" + f + "' not present in mcs.jsonl");
    }
  }
}

// ---------------------------------------------------------------------------
// Saving

inline void save_dataset(const Dataset& ds, const fs::path& dir) {
  fs::create_directories(dir);
  struct Row {
    double t;
    const std::string* frame;
    const Pose* pose;
  };
  std::vector<Row> rows;
  for (const auto& [frame, stream] : ds.streams) {
    for (const auto& s : stream.samples()) rows.push_back({s.stamp, &frame, &s.pose});
  }
  std::stable_sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) {
    return a.t < b.t || (a.t == b.t && *a.frame < *b.frame);
  });
  std::string out;
  for (const auto& r : rows) {
    json j = pose_to_json(*r.pose);
    j["t"] = r.t;
    j["frame"] = *r.frame;
    out += j.dump() + "\n";
  }
  write_file_atomic(dir / "mcs.jsonl", out);

  for (const auto& [id, scans] : ds.scans) {
    std::string s;
    for (const auto& scan : scans) {
      json pts = json::array();
      for (const auto& p : scan.points) pts.push_back(vec_to_json(p));
      s += json{{"t", scan.timestamp}, {"points", std::move(pts)}}.dump() + "\n";
    }
    write_file_atomic(dir / ("lidar_" + id + ".jsonl"), s);
  }
  for (const auto& [id, dets] : ds.detections) {
    std::string s;
    for (const auto& d : dets) {
      json px = json::array();
      for (const auto& p : d.pixels) px.push_back(vec_to_json(p));
      json j{{"t", d.timestamp}, {"pixels", std::move(px)}};
      if (d.keypoint_ids) j["ids"] = *d.keypoint_ids;
      if (d.target_id) j["target"] = *d.target_id;
      s += j.dump() + "\n";
    }
    write_file_atomic(dir / ("camera_" + id + ".jsonl"), s);
  }
}

}  // namespace mcs_calib
