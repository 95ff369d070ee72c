#pragma once

#include "ctseg/adam.hpp"
#include "ctseg/cascade.hpp"
#include "ctseg/checkpoint.hpp"
#include "ctseg/error.hpp"
#include "ctseg/metrics.hpp"
#include "ctseg/models.hpp"
#include "ctseg/ops.hpp"
#include "ctseg/parallel.hpp"
#include "ctseg/phantom.hpp"
#include "ctseg/tensor.hpp"
#include "ctseg/training.hpp"
#include "ctseg/viz3d.hpp"
#include "ctseg/volume_io.hpp"
