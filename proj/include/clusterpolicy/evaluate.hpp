#pragma once

#include <string>

#include "clusterpolicy/data.hpp"
#include "clusterpolicy/errors.hpp"
#include "clusterpolicy/estimators.hpp"
#include "clusterpolicy/nuisance.hpp"
#include "clusterpolicy/policy.hpp"
#include "clusterpolicy/propensity.hpp"

namespace clusterpolicy {

// ============================================================================
// Estimator selection by tag:
//   ipw | noint | addipw | addipw-matrix | poly:<beta> | addipw-cost:<c> | dr
// ============================================================================

inline ValueEstimate evaluate_estimator(const ClusterDataset& ds, const PropensityModel& model,
                                        const std::string& tag, const Policy& policy,
                                        const NuisanceConfig& dr_config = {}) {
    if (tag == "ipw") return value_ipw_standard(ds, model, policy);
    if (tag == "noint") return value_ipw_nointerference(ds, model, policy);
    if (tag == "addipw") return value_addipw(ds, model, policy);
    if (tag == "addipw-matrix") return value_addipw_via_matrix(ds, model, policy);
    if (tag.rfind("poly:", 0) == 0) {
        int beta = 0;
        try {
            beta = std::stoi(tag.substr(5));
        } catch (const std::exception&) {
            throw ValidationError("cannot parse interaction order in estimator tag '" + tag + "'");
        }
        return value_polyipw(ds, model, policy, beta);
    }
    if (tag.rfind("addipw-cost:", 0) == 0) {
        double cost = 0.0;
        try {
            cost = std::stod(tag.substr(12));
        } catch (const std::exception&) {
            throw ValidationError("cannot parse cost in estimator tag '" + tag + "'");
        }
        return value_with_cost(ds, model, policy, cost);
    }
    if (tag == "dr") {
        const auto nuisance = fit_nuisance(ds, model, dr_config);
        return value_dr(ds, model, policy, nuisance);
    }
    throw ValidationError("unknown estimator tag '" + tag + "'");
}

}  // namespace clusterpolicy
