#pragma once

#include "taconv/basis.hpp"
#include "taconv/calibration.hpp"
#include "taconv/dataset.hpp"
#include "taconv/error.hpp"
#include "taconv/evaluation.hpp"
#include "taconv/grid.hpp"
#include "taconv/layers.hpp"
#include "taconv/network.hpp"
#include "taconv/ops.hpp"
#include "taconv/optim.hpp"
#include "taconv/perturbations.hpp"
#include "taconv/rng.hpp"
#include "taconv/tensor.hpp"
#include "taconv/train.hpp"
#include "taconv/transforms.hpp"
