#pragma once

#include "mcs_calib/calibrator.hpp"
#include "mcs_calib/camera.hpp"
#include "mcs_calib/config.hpp"
#include "mcs_calib/correspondence.hpp"
#include "mcs_calib/dataset.hpp"
#include "mcs_calib/error.hpp"
#include "mcs_calib/extraction.hpp"
#include "mcs_calib/kdtree.hpp"
#include "mcs_calib/lm.hpp"
#include "mcs_calib/measurement.hpp"
#include "mcs_calib/parallel.hpp"
#include "mcs_calib/pipeline.hpp"
#include "mcs_calib/random.hpp"
#include "mcs_calib/report.hpp"
#include "mcs_calib/se3.hpp"
#include "mcs_calib/simulator.hpp"
#include "mcs_calib/target.hpp"
