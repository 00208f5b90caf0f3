#pragma once

// Umbrella header for the SPL pipeline library.

#include "spl/encoder.hpp"
#include "spl/errors.hpp"
#include "spl/geometry.hpp"
#include "spl/pipeline.hpp"
#include "spl/pole_detect.hpp"
#include "spl/pole_image.hpp"
#include "spl/retrieval.hpp"
#include "spl/rng.hpp"
#include "spl/session_io.hpp"
#include "spl/synth.hpp"
#include "spl/track_assoc.hpp"
