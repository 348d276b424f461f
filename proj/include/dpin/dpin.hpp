#pragma once

#include "dpin/active.hpp"
#include "dpin/data.hpp"
#include "dpin/ensemble.hpp"
#include "dpin/error.hpp"
#include "dpin/gradcheck.hpp"
#include "dpin/losses.hpp"
#include "dpin/metrics.hpp"
#include "dpin/model.hpp"
#include "dpin/nnet.hpp"
#include "dpin/rng.hpp"
