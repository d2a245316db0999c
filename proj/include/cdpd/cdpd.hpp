#pragma once

// Umbrella header.

#include "cdpd/error.hpp"
#include "cdpd/quadrature.hpp"
#include "cdpd/survival_data.hpp"
#include "cdpd/models.hpp"
#include "cdpd/dpd.hpp"
#include "cdpd/optimize.hpp"
#include "cdpd/estimate.hpp"
#include "cdpd/asymptotics.hpp"
#include "cdpd/robustness.hpp"
#include "cdpd/parallel.hpp"
#include "cdpd/simulate.hpp"
