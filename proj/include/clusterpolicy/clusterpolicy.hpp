#pragma once

// Policy evaluation and learning for clustered data with within-cluster
// interference: additive inverse-propensity-weighting estimators, a doubly
// robust estimator, exact and surrogate linear-policy optimizers, and a
// seeded Monte-Carlo replication harness.

#include "clusterpolicy/crossfit.hpp"
#include "clusterpolicy/csv.hpp"
#include "clusterpolicy/data.hpp"
#include "clusterpolicy/errors.hpp"
#include "clusterpolicy/estimators.hpp"
#include "clusterpolicy/evaluate.hpp"
#include "clusterpolicy/learning.hpp"
#include "clusterpolicy/nuisance.hpp"
#include "clusterpolicy/optim.hpp"
#include "clusterpolicy/policy.hpp"
#include "clusterpolicy/propensity.hpp"
#include "clusterpolicy/rng.hpp"
#include "clusterpolicy/simulation.hpp"
