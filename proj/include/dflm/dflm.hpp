#pragma once

#include "dflm/core.hpp"
#include "dflm/rng.hpp"
#include "dflm/parallel.hpp"
#include "dflm/timestep.hpp"
#include "dflm/field.hpp"
#include "dflm/sde.hpp"
#include "dflm/nn.hpp"
#include "dflm/problem.hpp"
#include "dflm/refsolver.hpp"
#include "dflm/train.hpp"
#include "dflm/config.hpp"
#include "dflm/io.hpp"
