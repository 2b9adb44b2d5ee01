#pragma once

#include "affagg/core.hpp"
#include "affagg/estimators.hpp"
#include "affagg/expweights.hpp"
#include "affagg/maurey.hpp"
#include "affagg/oracle.hpp"
#include "affagg/qagg.hpp"
#include "affagg/rng.hpp"
#include "affagg/stats.hpp"
