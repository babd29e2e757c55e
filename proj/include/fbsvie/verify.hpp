#pragma once

#include "fbsvie/verify/duality.hpp"
#include "fbsvie/verify/optimality.hpp"
#include "fbsvie/verify/variational.hpp"
