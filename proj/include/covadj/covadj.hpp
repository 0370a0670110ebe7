#pragma once

#include "aipw.hpp"
#include "analysis.hpp"
#include "csv.hpp"
#include "error.hpp"
#include "glm.hpp"
#include "mantel_haenszel.hpp"
#include "numeric.hpp"
#include "randomization.hpp"
#include "rng.hpp"
#include "simulate.hpp"
#include "survival.hpp"
#include "trial_data.hpp"
