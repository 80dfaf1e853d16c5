#pragma once

#include "safeatt/csv.hpp"
#include "safeatt/dataset.hpp"
#include "safeatt/error.hpp"
#include "safeatt/estimators.hpp"
#include "safeatt/normal.hpp"
#include "safeatt/nuisance.hpp"
#include "safeatt/rng.hpp"
#include "safeatt/serialize.hpp"
#include "safeatt/simulation.hpp"
#include "safeatt/sparse_solver.hpp"
