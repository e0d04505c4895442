#pragma once

// Umbrella header for the library (the HTTP server lives in serving.hpp).

#include "sscbm/alignment.hpp"
#include "sscbm/backbone.hpp"
#include "sscbm/checkpoint.hpp"
#include "sscbm/core.hpp"
#include "sscbm/dataset.hpp"
#include "sscbm/encoder.hpp"
#include "sscbm/evaluation.hpp"
#include "sscbm/config.hpp"
#include "sscbm/experiments.hpp"
#include "sscbm/intervention.hpp"
#include "sscbm/losses.hpp"
#include "sscbm/png.hpp"
#include "sscbm/pseudolabel.hpp"
#include "sscbm/random.hpp"
#include "sscbm/tensor_io.hpp"
#include "sscbm/training.hpp"
