#pragma once

#include "riskctrl/ensemble.hpp"
#include "riskctrl/parallel.hpp"
#include "riskctrl/dynamics.hpp"
#include "riskctrl/expm.hpp"
#include "riskctrl/qubit.hpp"
#include "riskctrl/cost.hpp"
#include "riskctrl/risk.hpp"
#include "riskctrl/ensemble_problem.hpp"
#include "riskctrl/optimize.hpp"
#include "riskctrl/experiment.hpp"
