#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "clusterpolicy/data.hpp"
#include "clusterpolicy/errors.hpp"
#include "clusterpolicy/estimators.hpp"
#include "clusterpolicy/optim.hpp"
#include "clusterpolicy/policy.hpp"
#include "clusterpolicy/propensity.hpp"
#include "clusterpolicy/rng.hpp"

namespace clusterpolicy {

// ============================================================================
// Policy optimizers over the linear-threshold class, plus the finite-sample
// regret bound calculator.
// ============================================================================

struct LearnSpec {
    std::string objective = "addipw";  // addipw | noint | ipw
    int restarts = 20;
    double surrogate_temperature = 1.0;  // start of the annealing schedule {t, 0.3t, 0.1t}
    std::uint64_t seed = 0;
    double coefficient_box = 10.0;  // box for gamma on standardized covariates
    double cost = 0.0;

    void validate() const {
        detail::require(restarts >= 1, "restarts must be >= 1");
        detail::require(surrogate_temperature > 0.0, "surrogate temperature must be positive");
        detail::require(coefficient_box > 0.0, "coefficient box must be positive");
        detail::require(cost >= 0.0, "cost must be non-negative");
    }
};

struct LearnDiagnostics {
    int restarts_run = 0;
    int restarts_failed = 0;
    int total_iterations = 0;
    bool flat_objective = false;
    std::vector<double> restart_objectives;
    Eigen::VectorXd standardize_mean;  // surrogate only
    Eigen::VectorXd standardize_sd;
};

struct LearnedPolicy {
    Policy policy;
    double objective_value = 0.0;
    std::string method;  // "exact" | "surrogate"
    std::string objective_tag;
    double cost = 0.0;
    LearnDiagnostics diagnostics;

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["policy"] = policy.to_json();
        j["objective_value"] = objective_value;
        j["method"] = method;
        j["objective"] = objective_tag;
        j["cost"] = cost;
        nlohmann::json d;
        d["restarts_run"] = diagnostics.restarts_run;
        d["restarts_failed"] = diagnostics.restarts_failed;
        d["total_iterations"] = diagnostics.total_iterations;
        d["flat_objective"] = diagnostics.flat_objective;
        d["restart_objectives"] = diagnostics.restart_objectives;
        if (diagnostics.standardize_mean.size() > 0) {
            d["standardization"] = {
                {"mean", std::vector<double>(diagnostics.standardize_mean.data(),
                                             diagnostics.standardize_mean.data() +
                                                 diagnostics.standardize_mean.size())},
                {"sd", std::vector<double>(diagnostics.standardize_sd.data(),
                                           diagnostics.standardize_sd.data() +
                                               diagnostics.standardize_sd.size())}};
        }
        j["diagnostics"] = d;
        return j;
    }
};

// ----------------------------------------------------------------------------
// Objective evaluation by tag (the hard, thresholded objective).
// ----------------------------------------------------------------------------
inline double hard_objective(const ClusterDataset& ds, const PropensityModel& model,
                             const Policy& policy, const std::string& tag, double cost) {
    double value;
    if (tag == "addipw") {
        value = value_addipw(ds, model, policy).value;
    } else if (tag == "noint") {
        value = value_ipw_nointerference(ds, model, policy).value;
    } else if (tag == "ipw") {
        value = value_ipw_standard(ds, model, policy).value;
    } else {
        throw ValidationError("unknown learning objective '" + tag + "'");
    }
    if (cost > 0.0) {
        double treated = 0.0;
        for (const auto& c : ds.clusters)
            treated += policy_assignment(policy, c).bits.cast<double>().mean();
        value -= cost * treated / ds.n();
    }
    return value;
}

namespace detail {

// Per-unit linear gains: objective(pi) = base + (1/n) sum_u gain_u * pi_u,
// valid for the addipw and noint objectives (both linear in the unit labels).
struct UnitObjective {
    double base = 0.0;
    std::vector<double> gains;              // flattened unit order
    std::vector<Eigen::RowVectorXd> xrows;  // covariate row per unit
    std::vector<int> cluster_of;
    bool all_zero = true;
};

inline UnitObjective unit_linear_objective(const ClusterDataset& ds, const PropensityModel& model,
                                           const std::string& tag, double cost) {
    UnitObjective out;
    const double n = static_cast<double>(ds.n());
    double base = 0.0;
    for (int i = 0; i < ds.n(); ++i) {
        const Cluster& c = ds.clusters[i];
        const int m = c.size();
        const double ybar = c.mean_outcome();
        double base_i = (tag == "addipw") ? 1.0 : 0.0;
        for (int j = 0; j < m; ++j) {
            const double e1 = model.individual(c, j, 1);
            const double e0 = model.individual(c, j, 0);
            const double a = static_cast<double>(c.treatments[j]);
            double gain, keep;
            if (tag == "addipw") {
                keep = (1.0 - a) / e0 - 1.0;
                gain = ybar * (a / e1 - (1.0 - a) / e0);
                base_i += keep;
            } else if (tag == "noint") {
                keep = (1.0 - a) * c.outcomes[j] / e0 / m;
                gain = (a * c.outcomes[j] / e1 - (1.0 - a) * c.outcomes[j] / e0) / m;
                base_i += keep;
            } else {
                throw ValidationError("objective '" + tag + "' is not linear in unit labels");
            }
            gain -= cost / m;
            out.gains.push_back(gain / n);
            out.xrows.emplace_back(c.covariates.row(j));
            out.cluster_of.push_back(i);
            if (gain != 0.0) out.all_zero = false;
        }
        base += (tag == "addipw" ? ybar * base_i : base_i);
    }
    out.base = base / n;
    return out;
}

inline double binomial_guard(int n, int k) {
    double v = 1.0;
    for (int i = 0; i < k; ++i) {
        v *= static_cast<double>(n - i) / static_cast<double>(i + 1);
        if (v > 1e12) return v;
    }
    return v;
}

struct ExactCandidate {
    Eigen::VectorXd gamma;  // includes intercept, realizes the labeling via >= 0
    double objective = 0.0;
    long treated = 0;
    bool valid = false;
};

inline bool candidate_better(const ExactCandidate& a, const ExactCandidate& b) {
    if (!b.valid) return true;
    if (a.objective != b.objective) return a.objective > b.objective;
    if (a.treated != b.treated) return a.treated < b.treated;
    return std::lexicographical_compare(a.gamma.data(), a.gamma.data() + a.gamma.size(),
                                        b.gamma.data(), b.gamma.data() + b.gamma.size());
}

}  // namespace detail

// ----------------------------------------------------------------------------
// Exact maximizer over linear-threshold policies by hyperplane enumeration:
// every labeling a closed half-space can produce is realized by a hyperplane
// through at most p affinely independent data points (worked in the lifted
// space of (1, x) vectors), scored in both orientations with boundary points
// pushed to either side, plus the two constant policies. Desk-scale only.
// ----------------------------------------------------------------------------
inline LearnedPolicy learn_linear_exact(const ClusterDataset& ds, const PropensityModel& model,
                                        const std::string& objective_tag = "addipw",
                                        double cost = 0.0) {
    const int N = ds.total_units();
    const int d = ds.p + 1;
    if (detail::binomial_guard(N, d) > 1e8) {
        throw ValidationError(
            "exact enumeration guard exceeded (C(N, p+1) > 1e8); use the surrogate learner");
    }
    const auto obj = detail::unit_linear_objective(ds, model, objective_tag, cost);

    Eigen::MatrixXd lifted(N, d);
    for (int u = 0; u < N; ++u) {
        lifted(u, 0) = 1.0;
        lifted.row(u).tail(ds.p) = obj.xrows[static_cast<std::size_t>(u)];
    }
    // work inside the row space so degenerate configurations stay covered
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(lifted, Eigen::ComputeThinV);
    const double smax = svd.singularValues()[0];
    int r = 0;
    for (long k = 0; k < svd.singularValues().size(); ++k)
        if (svd.singularValues()[k] > 1e-12 * smax) ++r;
    const Eigen::MatrixXd V = svd.matrixV().leftCols(r);  // d x r
    const Eigen::MatrixXd reduced = lifted * V;           // N x r

    detail::ExactCandidate best;
    auto score_gamma = [&](const Eigen::VectorXd& gamma) {
        detail::ExactCandidate cand;
        cand.gamma = gamma;
        cand.valid = true;
        double total = obj.base;
        long treated = 0;
        for (int u = 0; u < N; ++u) {
            const double z = gamma.dot(lifted.row(u));
            if (z >= 0.0) {
                total += obj.gains[static_cast<std::size_t>(u)];
                ++treated;
            }
        }
        cand.objective = total;
        cand.treated = treated;
        if (detail::candidate_better(cand, best)) best = cand;
    };

    // constant policies
    {
        Eigen::VectorXd g = Eigen::VectorXd::Zero(d);
        g[0] = 1.0;
        score_gamma(g);
        g[0] = -1.0;
        score_gamma(g);
    }

    std::vector<int> subset(static_cast<std::size_t>(std::max(r - 1, 0)));
    Eigen::VectorXd z(N);
    auto try_direction = [&](const Eigen::VectorXd& w) {
        for (int sign = 0; sign < 2; ++sign) {
            Eigen::VectorXd gamma = V * (sign == 0 ? w : Eigen::VectorXd(-w));
            gamma /= gamma.norm();
            for (int u = 0; u < N; ++u) z[u] = gamma.dot(lifted.row(u));
            const double zmax = z.cwiseAbs().maxCoeff();
            const double tol = 1e-9 * std::max(1.0, zmax);
            double min_off = std::numeric_limits<double>::infinity();
            for (int u = 0; u < N; ++u) {
                const double az = std::abs(z[u]);
                if (az > tol) min_off = std::min(min_off, az);
            }
            const double eps = std::isfinite(min_off) ? 0.5 * min_off : 1.0;
            // boundary points to the treated side, then to the untreated side
            Eigen::VectorXd g_plus = gamma, g_minus = gamma;
            g_plus[0] += eps;
            g_minus[0] -= eps;
            score_gamma(g_plus);
            score_gamma(g_minus);
        }
    };

    if (r == 1) {
        try_direction(Eigen::VectorXd::Ones(1));
    } else {
        // choose r-1 units; the kernel of their reduced rows fixes the direction
        Eigen::MatrixXd rows(r - 1, r);
        auto recurse = [&](auto&& self, int start, int depth) -> void {
            if (depth == r - 1) {
                Eigen::JacobiSVD<Eigen::MatrixXd> ks(rows, Eigen::ComputeFullV);
                const double top = ks.singularValues()[0];
                if (ks.singularValues()[r - 2] <= 1e-10 * std::max(top, 1.0)) return;
                try_direction(ks.matrixV().col(r - 1));
                return;
            }
            for (int u = start; u <= N - (r - 1 - depth); ++u) {
                rows.row(depth) = reduced.row(u);
                subset[static_cast<std::size_t>(depth)] = u;
                self(self, u + 1, depth + 1);
            }
        };
        recurse(recurse, 0, 0);
    }

    LearnedPolicy out;
    out.method = "exact";
    out.objective_tag = objective_tag;
    out.cost = cost;
    out.policy = Policy::linear(best.gamma);
    out.objective_value = hard_objective(ds, model, out.policy, objective_tag, cost);
    out.diagnostics.flat_objective = obj.all_zero && cost == 0.0;
    return out;
}

// ----------------------------------------------------------------------------
// Smooth surrogate learners: the unit indicator 1(gamma0 + x'gamma >= 0) is
// replaced by sigmoid((gamma0 + x'gamma)/tau) and the smoothed objective is
// maximized by multi-restart quasi-Newton ascent with temperature annealing
// tau in {t, 0.3t, 0.1t}. Covariates are standardized first; the coefficient
// box applies on the standardized scale. The returned policy is deterministic
// (hard threshold) and the reported objective is always the hard one.
// ----------------------------------------------------------------------------
namespace detail {

struct Standardization {
    Eigen::VectorXd mean;
    Eigen::VectorXd sd;
};

inline Standardization standardize_stats(const ClusterDataset& ds) {
    Standardization st;
    st.mean = Eigen::VectorXd::Zero(ds.p);
    st.sd = Eigen::VectorXd::Zero(ds.p);
    const double n = static_cast<double>(ds.total_units());
    for (const auto& c : ds.clusters) st.mean += c.covariates.colwise().sum().transpose();
    st.mean /= n;
    for (const auto& c : ds.clusters) {
        for (int j = 0; j < c.size(); ++j) {
            const Eigen::VectorXd dlt = c.covariates.row(j).transpose() - st.mean;
            st.sd += dlt.cwiseProduct(dlt);
        }
    }
    st.sd = (st.sd / n).cwiseSqrt();
    for (int k = 0; k < ds.p; ++k)
        if (st.sd[k] <= 0.0) st.sd[k] = 1.0;
    return st;
}

/// Map coefficients on standardized covariates back to the raw scale.
inline Eigen::VectorXd destandardize_gamma(const Eigen::VectorXd& gamma,
                                           const Standardization& st) {
    Eigen::VectorXd raw(gamma.size());
    raw[0] = gamma[0];
    for (int k = 0; k + 1 < gamma.size(); ++k) {
        raw[k + 1] = gamma[k + 1] / st.sd[k];
        raw[0] -= gamma[k + 1] * st.mean[k] / st.sd[k];
    }
    return raw;
}

inline double stable_sigmoid(double z) {
    if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
    const double ez = std::exp(z);
    return ez / (1.0 + ez);
}

// Smoothed objective and gradient for objectives linear in the unit labels.
struct AdditiveSurrogate {
    const UnitObjective* obj;
    Eigen::MatrixXd lifted_std;  // N x (p+1), standardized with leading 1
    double tau = 1.0;

    double operator()(const Eigen::VectorXd& gamma, Eigen::VectorXd& grad) const {
        grad.setZero();
        double value = obj->base;
        for (long u = 0; u < lifted_std.rows(); ++u) {
            const double z = gamma.dot(lifted_std.row(u)) / tau;
            const double s = stable_sigmoid(z);
            const double g = obj->gains[static_cast<std::size_t>(u)];
            value += g * s;
            grad += (g * s * (1.0 - s) / tau) * lifted_std.row(u).transpose();
        }
        // minimize the negative
        grad = -grad;
        return -value;
    }
};

// Smoothed standard IPW objective: the whole-cluster match indicator becomes
// a product of per-unit sigmoids matched to the observed treatments.
struct ProductSurrogate {
    const ClusterDataset* ds;
    std::vector<double> cluster_factor;  // Ybar_i / e(A_i | X_i) / n
    std::vector<double> cost_per_unit;   // cost / (n * M_i)
    Eigen::MatrixXd lifted_std;
    std::vector<int> unit_offset;  // start row of each cluster in lifted_std
    double tau = 1.0;

    double operator()(const Eigen::VectorXd& gamma, Eigen::VectorXd& grad) const {
        grad.setZero();
        double value = 0.0;
        std::vector<double> match, pre, suf;
        for (int i = 0; i < ds->n(); ++i) {
            const Cluster& c = ds->clusters[i];
            const int m = c.size();
            const int off = unit_offset[static_cast<std::size_t>(i)];
            match.assign(static_cast<std::size_t>(m), 0.0);
            for (int j = 0; j < m; ++j) {
                const double z = gamma.dot(lifted_std.row(off + j)) / tau;
                const double s = stable_sigmoid(z);
                match[static_cast<std::size_t>(j)] =
                    c.treatments[j] == 1 ? s : 1.0 - s;
                value -= cost_per_unit[static_cast<std::size_t>(i)] * s;
                grad -= (cost_per_unit[static_cast<std::size_t>(i)] * s * (1.0 - s) / tau) *
                        lifted_std.row(off + j).transpose();
            }
            // prefix/suffix products avoid dividing by saturated sigmoids
            pre.assign(static_cast<std::size_t>(m) + 1, 1.0);
            suf.assign(static_cast<std::size_t>(m) + 1, 1.0);
            for (int j = 0; j < m; ++j)
                pre[static_cast<std::size_t>(j) + 1] =
                    pre[static_cast<std::size_t>(j)] * match[static_cast<std::size_t>(j)];
            for (int j = m - 1; j >= 0; --j)
                suf[static_cast<std::size_t>(j)] =
                    suf[static_cast<std::size_t>(j) + 1] * match[static_cast<std::size_t>(j)];
            const double f = cluster_factor[static_cast<std::size_t>(i)];
            value += f * pre[static_cast<std::size_t>(m)];
            for (int j = 0; j < m; ++j) {
                const double z = gamma.dot(lifted_std.row(off + j)) / tau;
                const double s = stable_sigmoid(z);
                const double others =
                    pre[static_cast<std::size_t>(j)] * suf[static_cast<std::size_t>(j) + 1];
                const double dmatch = c.treatments[j] == 1 ? 1.0 : -1.0;
                grad += (f * others * dmatch * s * (1.0 - s) / tau) *
                        lifted_std.row(off + j).transpose();
            }
        }
        grad = -grad;
        return -value;
    }
};

template <typename Surrogate>
LearnedPolicy run_surrogate(const ClusterDataset& ds, const PropensityModel& model,
                            const LearnSpec& spec, Surrogate surrogate, bool flat) {
    spec.validate();
    const int d = ds.p + 1;
    const auto st = standardize_stats(ds);
    // fill standardized lifted rows
    surrogate.lifted_std.resize(ds.total_units(), d);
    {
        int u = 0;
        for (const auto& c : ds.clusters) {
            for (int j = 0; j < c.size(); ++j, ++u) {
                surrogate.lifted_std(u, 0) = 1.0;
                for (int k = 0; k < ds.p; ++k)
                    surrogate.lifted_std(u, k + 1) = (c.covariates(j, k) - st.mean[k]) / st.sd[k];
            }
        }
    }

    LearnedPolicy out;
    out.method = "surrogate";
    out.objective_tag = spec.objective;
    out.cost = spec.cost;
    out.diagnostics.standardize_mean = st.mean;
    out.diagnostics.standardize_sd = st.sd;
    out.diagnostics.flat_objective = flat;

    Rng root(spec.seed);
    double best_obj = -std::numeric_limits<double>::infinity();
    Eigen::VectorXd best_gamma;
    const double taus[3] = {spec.surrogate_temperature, 0.3 * spec.surrogate_temperature,
                            0.1 * spec.surrogate_temperature};
    for (int restart = 0; restart < spec.restarts; ++restart) {
        Rng rng = root.child(static_cast<std::uint64_t>(restart));
        Eigen::VectorXd gamma = Eigen::VectorXd::Zero(d);
        if (restart > 0)
            for (int k = 0; k < d; ++k) gamma[k] = 4.0 * rng.uniform01() - 2.0;
        ++out.diagnostics.restarts_run;
        try {
            for (double tau : taus) {
                surrogate.tau = tau;
                auto res = lbfgs_minimize(
                    [&](const Eigen::VectorXd& x, Eigen::VectorXd& g) { return surrogate(x, g); },
                    gamma);
                gamma = res.x;
                out.diagnostics.total_iterations += res.iterations;
            }
            gamma = gamma.cwiseMax(-spec.coefficient_box).cwiseMin(spec.coefficient_box);
            const Eigen::VectorXd raw = destandardize_gamma(gamma, st);
            const Policy cand = Policy::linear(raw);
            const double hard = hard_objective(ds, model, cand, spec.objective, spec.cost);
            out.diagnostics.restart_objectives.push_back(hard);
            if (hard > best_obj) {
                best_obj = hard;
                best_gamma = raw;
            }
        } catch (const PositivityError&) {
            ++out.diagnostics.restarts_failed;
            out.diagnostics.restart_objectives.push_back(
                std::numeric_limits<double>::quiet_NaN());
        }
    }
    if (!std::isfinite(best_obj)) {
        throw FitError("all surrogate restarts failed (non-finite objective)");
    }
    out.policy = Policy::linear(best_gamma);
    out.objective_value = best_obj;
    return out;
}

}  // namespace detail

inline LearnedPolicy learn_linear_surrogate(const ClusterDataset& ds,
                                            const PropensityModel& model,
                                            const LearnSpec& spec) {
    detail::require(spec.objective == "addipw" || spec.objective == "noint",
                    "learn_linear_surrogate expects the addipw or noint objective");
    auto obj = std::make_shared<detail::UnitObjective>(
        detail::unit_linear_objective(ds, model, spec.objective, spec.cost));
    detail::AdditiveSurrogate surrogate;
    surrogate.obj = obj.get();
    auto learned =
        detail::run_surrogate(ds, model, spec, surrogate, obj->all_zero && spec.cost == 0.0);
    return learned;
}

inline LearnedPolicy learn_ipw_standard_surrogate(const ClusterDataset& ds,
                                                  const PropensityModel& model,
                                                  const LearnSpec& spec_in) {
    LearnSpec spec = spec_in;
    spec.objective = "ipw";
    detail::ProductSurrogate surrogate;
    surrogate.ds = &ds;
    bool flat = true;
    for (int i = 0; i < ds.n(); ++i) {
        const Cluster& c = ds.clusters[i];
        const double f = c.mean_outcome() / model.cluster_joint(c, c.treatments) / ds.n();
        surrogate.cluster_factor.push_back(f);
        surrogate.cost_per_unit.push_back(spec.cost / (static_cast<double>(ds.n()) * c.size()));
        surrogate.unit_offset.push_back(i == 0 ? 0
                                               : surrogate.unit_offset.back() +
                                                     ds.clusters[i - 1].size());
        if (f != 0.0) flat = false;
    }
    return detail::run_surrogate(ds, model, spec, surrogate, flat && spec.cost == 0.0);
}

/// Dispatch on the objective tag: product smoothing for the standard IPW
/// objective, unit-wise smoothing otherwise.
inline LearnedPolicy learn_surrogate(const ClusterDataset& ds, const PropensityModel& model,
                                     const LearnSpec& spec) {
    if (spec.objective == "ipw") return learn_ipw_standard_surrogate(ds, model, spec);
    return learn_linear_surrogate(ds, model, spec);
}

// ----------------------------------------------------------------------------
// Finite-sample regret bound:
//   4C/sqrt(n) + 4 c0 (B m_max / eta) sqrt(nu/n) + 2C sqrt((2/n) log(1/delta))
// with C = B [m_max (1/eta - 1) + 1]. c0 is an unknown universal constant and
// defaults to 1, so the output is a diagnostic scale, not a certified bound.
// ----------------------------------------------------------------------------
struct RegretBoundInputs {
    double outcome_bound = 1.0;  // B
    int m_max = 1;
    double eta = 0.5;
    double vc_dimension = 1.0;  // nu
    int n = 1;
    double delta = 0.05;
    double c0 = 1.0;

    void validate() const {
        detail::require(outcome_bound > 0.0, "outcome bound must be positive");
        detail::require(m_max >= 1, "m_max must be >= 1");
        detail::require(eta > 0.0 && eta <= 0.5, "eta must lie in (0, 0.5]");
        detail::require(vc_dimension > 0.0, "VC dimension must be positive");
        detail::require(n >= 1, "n must be >= 1");
        detail::require(delta > 0.0 && delta <= 1.0, "delta must lie in (0, 1]");
        detail::require(c0 > 0.0, "c0 must be positive");
    }
};

inline double compute_regret_bound(const RegretBoundInputs& in) {
    in.validate();
    const double C = in.outcome_bound * (in.m_max * (1.0 / in.eta - 1.0) + 1.0);
    const double n = static_cast<double>(in.n);
    return 4.0 * C / std::sqrt(n) +
           4.0 * in.c0 * (in.outcome_bound * in.m_max / in.eta) * std::sqrt(in.vc_dimension / n) +
           2.0 * C * std::sqrt(2.0 / n * std::log(1.0 / in.delta));
}

}  // namespace clusterpolicy
