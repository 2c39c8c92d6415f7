#pragma once

#include "mcs_calib/calibrator.hpp"
#include "mcs_calib/config.hpp"
#include "mcs_calib/dataset.hpp"
#include "mcs_calib/extraction.hpp"

namespace mcs_calib {

struct PipelineResult {
  ExtractionResult extraction;
  CalibrationResult calibration;
};

inline CalibrationState initial_state(const RunConfig& cfg) {
  CalibrationState s;
  s.extrinsics = cfg.initial_extrinsics();
  return s;
}

/// extract_all followed by calibrate, both driven by `cfg`.
/// Gates and crops with `gate_extrinsics`; the solver starts from the
/// configured initial extrinsics.
inline PipelineResult run_pipeline(const Dataset& ds, const RunConfig& cfg,
                                   const std::map<std::string, Pose>& gate_extrinsics, const TraceFn& trace = {}) {
  PipelineResult out;
  out.extraction = extract_all(ds, cfg.robot_frame, cfg.sensors, cfg.targets, gate_extrinsics, cfg.gates);
  out.calibration = calibrate(out.extraction.measurements, cfg.spec_map(), initial_state(cfg), cfg.solver,
                              cfg.intrinsics(), trace);
  return out;
}

inline PipelineResult run_pipeline(const Dataset& ds, const RunConfig& cfg, const TraceFn& trace = {}) {
  return run_pipeline(ds, cfg, cfg.initial_extrinsics(), trace);
}

}  // namespace mcs_calib
