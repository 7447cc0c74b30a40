#pragma once

#include "core.hpp"
#include "rng.hpp"
#include "quadrature.hpp"
#include "density.hpp"
#include "density_json.hpp"
#include "drift.hpp"
#include "sde.hpp"
#include "schrodinger.hpp"
#include "time_series.hpp"
#include "score.hpp"
#include "diagnostics.hpp"
#include "config.hpp"
#include "experiments.hpp"
