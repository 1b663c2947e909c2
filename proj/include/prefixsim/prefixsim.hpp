#pragma once

#include "prefixsim/analytics.hpp"
#include "prefixsim/engine.hpp"
#include "prefixsim/errors.hpp"
#include "prefixsim/experiment.hpp"
#include "prefixsim/radix_cache.hpp"
#include "prefixsim/scheduler.hpp"
#include "prefixsim/workload.hpp"
