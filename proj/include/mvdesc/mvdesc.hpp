#pragma once

// Umbrella include for the full pipeline: geometry and local frames,
// differentiable multi-view rendering, the descriptor network, metric
// training, matching/registration metrics, and file formats.

#include "mvdesc/common.hpp"
#include "mvdesc/tensor.hpp"
#include "mvdesc/geometry.hpp"
#include "mvdesc/renderer.hpp"
#include "mvdesc/network.hpp"
#include "mvdesc/training.hpp"
#include "mvdesc/evaluation.hpp"
#include "mvdesc/io.hpp"
