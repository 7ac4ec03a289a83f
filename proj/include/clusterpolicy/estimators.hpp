#pragma once

#include <cmath>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "clusterpolicy/data.hpp"
#include "clusterpolicy/errors.hpp"
#include "clusterpolicy/policy.hpp"
#include "clusterpolicy/propensity.hpp"

namespace clusterpolicy {

// ============================================================================
// Policy value estimators. Every estimator produces one score per cluster;
// the value is the mean of the scores (clusters are the i.i.d. sampling
// unit, so the standard error is the sample SD of the scores over sqrt(n)).
// ============================================================================

struct ValueEstimate {
    std::string estimator;
    double value = 0.0;
    double se = 0.0;
    Eigen::VectorXd cluster_scores;

    int n() const { return static_cast<int>(cluster_scores.size()); }

    nlohmann::json to_json() const {
        return nlohmann::json{
            {"estimator", estimator}, {"value", value}, {"se", se}, {"n", n()}};
    }
};

namespace detail {

inline ValueEstimate make_estimate(std::string tag, Eigen::VectorXd scores) {
    ValueEstimate est;
    est.estimator = std::move(tag);
    est.cluster_scores = std::move(scores);
    const int n = est.n();
    // extended-precision accumulation keeps the reported value invariant to
    // the order in which clusters arrive
    long double sum = 0.0L;
    for (int i = 0; i < n; ++i) sum += est.cluster_scores[i];
    est.value = static_cast<double>(sum / n);
    if (n > 1) {
        long double ss = 0.0L;
        for (int i = 0; i < n; ++i) {
            const long double d = est.cluster_scores[i] - est.value;
            ss += d * d;
        }
        est.se = static_cast<double>(
            std::sqrt(ss / (n - 1)) / std::sqrt(static_cast<long double>(n)));
    }
    return est;
}

/// addIPW cluster weight: sum_j (1{A_ij = pi_ij}/e_j(pi_ij) - 1) + 1.
inline double additive_weight(const PropensityModel& model, const Cluster& cluster,
                              const Eigen::VectorXi& bits) {
    double w = 1.0;
    for (int j = 0; j < cluster.size(); ++j) {
        const double e = model.individual(cluster, j, bits[j]);
        w += (cluster.treatments[j] == bits[j] ? 1.0 / e : 0.0) - 1.0;
    }
    return w;
}

}  // namespace detail

// ----------------------------------------------------------------------------
// Standard IPW: whole-cluster match indicator over the joint propensity.
// ----------------------------------------------------------------------------
inline ValueEstimate value_ipw_standard(const ClusterDataset& ds, const PropensityModel& model,
                                        const Policy& policy) {
    Eigen::VectorXd scores(ds.n());
    for (int i = 0; i < ds.n(); ++i) {
        const Cluster& c = ds.clusters[i];
        const auto pa = policy_assignment(policy, c);
        const double joint = model.cluster_joint(c, pa.bits);
        const bool match = (c.treatments.array() == pa.bits.array()).all();
        scores[i] = match ? c.mean_outcome() / joint : 0.0;
    }
    return detail::make_estimate("ipw", std::move(scores));
}

// ----------------------------------------------------------------------------
// IPW ignoring interference: per-unit match indicators, averaged in-cluster.
// ----------------------------------------------------------------------------
inline ValueEstimate value_ipw_nointerference(const ClusterDataset& ds,
                                              const PropensityModel& model,
                                              const Policy& policy) {
    Eigen::VectorXd scores(ds.n());
    for (int i = 0; i < ds.n(); ++i) {
        const Cluster& c = ds.clusters[i];
        const auto pa = policy_assignment(policy, c);
        double s = 0.0;
        for (int j = 0; j < c.size(); ++j) {
            const double e = model.individual(c, j, pa.bits[j]);
            if (c.treatments[j] == pa.bits[j]) s += c.outcomes[j] / e;
        }
        scores[i] = s / c.size();
    }
    return detail::make_estimate("noint", std::move(scores));
}

// ----------------------------------------------------------------------------
// Additive IPW: cluster mean outcome times a weight that is a *sum* (not a
// product) of unit-level inverse-propensity terms.
// ----------------------------------------------------------------------------
inline ValueEstimate value_addipw(const ClusterDataset& ds, const PropensityModel& model,
                                  const Policy& policy) {
    Eigen::VectorXd scores(ds.n());
    for (int i = 0; i < ds.n(); ++i) {
        const Cluster& c = ds.clusters[i];
        const auto pa = policy_assignment(policy, c);
        scores[i] = c.mean_outcome() * detail::additive_weight(model, c, pa.bits);
    }
    return detail::make_estimate("addipw", std::move(scores));
}

// ----------------------------------------------------------------------------
// Cost-penalized additive IPW: addIPW score minus cost times the treated
// fraction the policy induces in the cluster.
// ----------------------------------------------------------------------------
inline ValueEstimate value_with_cost(const ClusterDataset& ds, const PropensityModel& model,
                                     const Policy& policy, double cost) {
    detail::require(cost >= 0.0, "treatment cost must be non-negative");
    Eigen::VectorXd scores(ds.n());
    for (int i = 0; i < ds.n(); ++i) {
        const Cluster& c = ds.clusters[i];
        const auto pa = policy_assignment(policy, c);
        const double treated = pa.bits.cast<double>().mean();
        scores[i] =
            c.mean_outcome() * detail::additive_weight(model, c, pa.bits) - cost * treated;
    }
    return detail::make_estimate("addipw-cost", std::move(scores));
}

// ----------------------------------------------------------------------------
// Closed-form inverse of E[A~ A~' | X] for the with-intercept treatment
// vector A~ = (1, A_1, ..., A_m) under factored propensities: corner
// 1 + sum_k e_k/(1-e_k), first row/column -1/(1-e_k), diagonal
// 1/(e_k (1-e_k)), remaining entries zero.
// ----------------------------------------------------------------------------
struct SigmaInverse {
    int m = 0;
    Eigen::MatrixXd entries;  // (m+1) x (m+1), symmetric
};

inline SigmaInverse sigma_inverse_closed_form(const PropensityModel& model,
                                              const Cluster& cluster) {
    const int m = cluster.size();
    SigmaInverse out;
    out.m = m;
    out.entries = Eigen::MatrixXd::Zero(m + 1, m + 1);
    double corner = 1.0;
    for (int k = 0; k < m; ++k) {
        const double e = model.prob_treated(cluster, k);
        corner += e / (1.0 - e);
        out.entries(0, k + 1) = out.entries(k + 1, 0) = -1.0 / (1.0 - e);
        out.entries(k + 1, k + 1) = 1.0 / (e * (1.0 - e));
    }
    out.entries(0, 0) = corner;
    return out;
}

/// Single-observation estimate of unit j's additive coefficient vector:
/// SigmaInverse * (1, A_i)' * Y_ij.
inline Eigen::VectorXd ghat_unit(const PropensityModel& model, const Cluster& cluster, int j) {
    detail::require(j >= 0 && j < cluster.size(), "unit index out of range");
    const auto sigma_inv = sigma_inverse_closed_form(model, cluster);
    Eigen::VectorXd a_tilde(cluster.size() + 1);
    a_tilde[0] = 1.0;
    a_tilde.tail(cluster.size()) = cluster.treatments.cast<double>();
    return sigma_inv.entries * a_tilde * cluster.outcomes[j];
}

// ----------------------------------------------------------------------------
// Additive IPW computed through the matrix route:
// (1/n) sum_i (1/M_i) sum_j pi~' SigmaInverse A~ Y_ij.
// Must agree with value_addipw on every input; kept as a separate code path
// so the identity can be checked numerically.
// ----------------------------------------------------------------------------
inline ValueEstimate value_addipw_via_matrix(const ClusterDataset& ds,
                                             const PropensityModel& model,
                                             const Policy& policy) {
    Eigen::VectorXd scores(ds.n());
    for (int i = 0; i < ds.n(); ++i) {
        const Cluster& c = ds.clusters[i];
        const auto pa = policy_assignment(policy, c);
        const auto sigma_inv = sigma_inverse_closed_form(model, c);
        Eigen::VectorXd a_tilde(c.size() + 1);
        a_tilde[0] = 1.0;
        a_tilde.tail(c.size()) = c.treatments.cast<double>();
        const Eigen::VectorXd siga = sigma_inv.entries * a_tilde;
        const double pi_sig_a = pa.with_intercept.dot(siga);
        double s = 0.0;
        for (int j = 0; j < c.size(); ++j) s += pi_sig_a * c.outcomes[j];
        scores[i] = s / c.size();
    }
    return detail::make_estimate("addipw-matrix", std::move(scores));
}

// ----------------------------------------------------------------------------
// Polynomial additive IPW: the cluster weight sums, over all index subsets U
// of size at most beta (including the empty set, which contributes 1), the
// product over U of the centered unit terms 1{A=pi}/e - 1. beta=1 recovers
// the additive IPW weight; beta=m recovers the standard IPW estimator.
// ----------------------------------------------------------------------------
inline ValueEstimate value_polyipw(const ClusterDataset& ds, const PropensityModel& model,
                                   const Policy& policy, int beta,
                                   bool allow_large_enumeration = false) {
    detail::require(beta >= 1, "interaction order beta must be >= 1");
    detail::require(beta <= ds.m_max, "interaction order beta exceeds the maximum cluster size");
    if (!allow_large_enumeration && ds.m_max > 25 && beta > 3) {
        throw ValidationError(
            "subset enumeration with m_max > 25 and beta > 3 refused; pass "
            "allow_large_enumeration to override");
    }
    Eigen::VectorXd scores(ds.n());
    std::vector<double> terms;
    std::vector<int> subset;
    for (int i = 0; i < ds.n(); ++i) {
        const Cluster& c = ds.clusters[i];
        const auto pa = policy_assignment(policy, c);
        const int m = c.size();
        terms.resize(m);
        for (int j = 0; j < m; ++j) {
            const double e = model.individual(c, j, pa.bits[j]);
            terms[j] = (c.treatments[j] == pa.bits[j] ? 1.0 / e : 0.0) - 1.0;
        }
        const int cap = std::min(beta, m);
        double weight = 1.0;  // empty subset
        subset.clear();
        // depth-first enumeration of subsets of {0..m-1} with size <= cap
        auto enumerate = [&](auto&& self, int start, double prod) -> void {
            for (int j = start; j < m; ++j) {
                const double next = prod * terms[j];
                weight += next;
                if (static_cast<int>(subset.size()) + 1 < cap) {
                    subset.push_back(j);
                    self(self, j + 1, next);
                    subset.pop_back();
                }
            }
        };
        enumerate(enumerate, 0, 1.0);
        scores[i] = c.mean_outcome() * weight;
    }
    return detail::make_estimate("poly:" + std::to_string(beta), std::move(scores));
}

}  // namespace clusterpolicy
