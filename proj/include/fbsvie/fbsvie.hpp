#pragma once

#include "fbsvie/adjoint.hpp"
#include "fbsvie/backward.hpp"
#include "fbsvie/cones.hpp"
#include "fbsvie/forward.hpp"
#include "fbsvie/lattice.hpp"
#include "fbsvie/scenario.hpp"
#include "fbsvie/verify.hpp"
