#pragma once

#include "fedopt/error.hpp"
#include "fedopt/numerics.hpp"
#include "fedopt/random.hpp"
#include "fedopt/dataset.hpp"
#include "fedopt/io.hpp"
#include "fedopt/tasks.hpp"
#include "fedopt/partition.hpp"
#include "fedopt/local.hpp"
#include "fedopt/server.hpp"
#include "fedopt/sampling.hpp"
#include "fedopt/schedule.hpp"
#include "fedopt/theory.hpp"
#include "fedopt/orchestrator.hpp"
#include "fedopt/config.hpp"
