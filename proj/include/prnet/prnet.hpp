// Umbrella header.
#pragma once

#include "prnet/autodiff.hpp"
#include "prnet/checkpoint.hpp"
#include "prnet/config.hpp"
#include "prnet/dataset.hpp"
#include "prnet/geometry.hpp"
#include "prnet/icp.hpp"
#include "prnet/matcher.hpp"
#include "prnet/mesh_io.hpp"
#include "prnet/networks.hpp"
#include "prnet/pipeline.hpp"
#include "prnet/procrustes.hpp"
#include "prnet/shapes.hpp"
#include "prnet/viz.hpp"
