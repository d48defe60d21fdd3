#pragma once

#include "fedpoison/common.hpp"
#include "fedpoison/config.hpp"
#include "fedpoison/data.hpp"
#include "fedpoison/defense.hpp"
#include "fedpoison/grmp.hpp"
#include "fedpoison/model.hpp"
#include "fedpoison/run_io.hpp"
#include "fedpoison/scenario.hpp"
#include "fedpoison/sim.hpp"
