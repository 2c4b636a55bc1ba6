#pragma once

// Convenience header pulling in the whole library.

#include "coso/rng.hpp"
#include "coso/textmdp.hpp"
#include "coso/policy.hpp"
#include "coso/optim.hpp"
#include "coso/scm.hpp"
#include "coso/counterfactual.hpp"
#include "coso/coso_rl.hpp"
#include "coso/tabular_theory.hpp"
#include "coso/checkpoint.hpp"
#include "coso/harness.hpp"
