#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "clusterpolicy/data.hpp"
#include "clusterpolicy/errors.hpp"
#include "clusterpolicy/estimators.hpp"
#include "clusterpolicy/propensity.hpp"
#include "clusterpolicy/rng.hpp"

namespace clusterpolicy {

// ============================================================================
// Outcome-model nuisance for the doubly robust estimator. The conditional
// mean of the outcome vector is modelled as G(X) * (1, A)' with G an
// m x (m+1) matrix function of the cluster covariates. G is fitted per
// cluster-size stratum; each entry g_{j,k}(x) is linear in a feature basis
// of the cluster covariates.
// ============================================================================

enum class GBasis { InterceptOnly, Unit, UnitAndMeans };

struct NuisanceConfig {
    GBasis basis = GBasis::UnitAndMeans;
    double ridge = 1e-4;
};

namespace detail {

inline int basis_dim(GBasis basis, int p) {
    switch (basis) {
        case GBasis::InterceptOnly: return 1;
        case GBasis::Unit: return 1 + p;
        case GBasis::UnitAndMeans: return 1 + 2 * p;
    }
    return 1;
}

/// Feature basis for unit j: (1 [, X_j] [, columnwise mean of X]).
inline Eigen::VectorXd g_basis(GBasis basis, const Cluster& c, int j) {
    const int p = c.dim();
    Eigen::VectorXd b(basis_dim(basis, p));
    b[0] = 1.0;
    if (basis != GBasis::InterceptOnly) b.segment(1, p) = c.covariates.row(j);
    if (basis == GBasis::UnitAndMeans) b.segment(1 + p, p) = c.covariates.colwise().mean();
    return b;
}

}  // namespace detail

/// Anything that can produce the m x (m+1) outcome-coefficient matrix for a
/// cluster. Fitted nuisances and test oracles share this surface.
struct GFunction {
    virtual ~GFunction() = default;
    virtual Eigen::MatrixXd eval(const Cluster& cluster) const = 0;
};

struct ZeroG final : GFunction {
    Eigen::MatrixXd eval(const Cluster& cluster) const override {
        return Eigen::MatrixXd::Zero(cluster.size(), cluster.size() + 1);
    }
};

class NuisanceFit final : public GFunction {
public:
    NuisanceFit(GBasis basis, PropensityModel sigma_model)
        : basis_(basis), sigma_model_(std::move(sigma_model)) {}

    GBasis basis() const { return basis_; }
    const PropensityModel& sigma_model() const { return sigma_model_; }

    bool covers_size(int m) const { return coef_.count(m) > 0; }

    /// theta_{j,k} stacked as rows of an (m+1) x b matrix for unit j.
    const Eigen::MatrixXd& unit_coefficients(int m, int j) const {
        return coef_.at(m).at(static_cast<std::size_t>(j));
    }

    void set_stratum(int m, std::vector<Eigen::MatrixXd> unit_coefs) {
        coef_[m] = std::move(unit_coefs);
    }

    Eigen::MatrixXd eval(const Cluster& cluster) const override {
        const int m = cluster.size();
        auto it = coef_.find(m);
        if (it == coef_.end()) {
            throw ValidationError("nuisance fit covers no stratum of cluster size " +
                                  std::to_string(m));
        }
        Eigen::MatrixXd G(m, m + 1);
        for (int j = 0; j < m; ++j) {
            const Eigen::VectorXd b = detail::g_basis(basis_, cluster, j);
            G.row(j) = (it->second[static_cast<std::size_t>(j)] * b).transpose();
        }
        return G;
    }

private:
    GBasis basis_;
    PropensityModel sigma_model_;
    std::map<int, std::vector<Eigen::MatrixXd>> coef_;
};

// ----------------------------------------------------------------------------
// Ridge-regularized least squares of unit outcomes on the interaction of the
// with-intercept treatment vector and the covariate basis, one regression per
// (cluster size, unit index). Requires at least m+2 clusters per stratum.
// ----------------------------------------------------------------------------
inline NuisanceFit fit_nuisance(const ClusterDataset& ds, const PropensityModel& model,
                                const NuisanceConfig& cfg = {}) {
    detail::require(cfg.ridge >= 0.0, "ridge penalty must be non-negative");
    std::map<int, std::vector<int>> strata;
    for (int i = 0; i < ds.n(); ++i) strata[ds.clusters[i].size()].push_back(i);
    for (const auto& [m, idx] : strata) {
        if (static_cast<int>(idx.size()) < m + 2) {
            throw FitError("stratum of cluster size " + std::to_string(m) + " has only " +
                           std::to_string(idx.size()) + " clusters; need at least " +
                           std::to_string(m + 2));
        }
    }

    NuisanceFit fit(cfg.basis, model);
    const int b = detail::basis_dim(cfg.basis, ds.p);
    for (const auto& [m, idx] : strata) {
        const int d = (m + 1) * b;
        const int nm = static_cast<int>(idx.size());
        // design rows are shared across units of a stratum
        Eigen::MatrixXd Z(nm, d);
        std::vector<Eigen::VectorXd> bases(static_cast<std::size_t>(nm) * m);
        for (int r = 0; r < nm; ++r) {
            const Cluster& c = ds.clusters[idx[static_cast<std::size_t>(r)]];
            for (int j = 0; j < m; ++j)
                bases[static_cast<std::size_t>(r) * m + j] = detail::g_basis(cfg.basis, c, j);
        }
        std::vector<Eigen::MatrixXd> unit_coefs(m);
        for (int j = 0; j < m; ++j) {
            Eigen::VectorXd y(nm);
            for (int r = 0; r < nm; ++r) {
                const Cluster& c = ds.clusters[idx[static_cast<std::size_t>(r)]];
                const Eigen::VectorXd& bj = bases[static_cast<std::size_t>(r) * m + j];
                Eigen::VectorXd a_tilde(m + 1);
                a_tilde[0] = 1.0;
                a_tilde.tail(m) = c.treatments.cast<double>();
                for (int k = 0; k <= m; ++k) Z.row(r).segment(k * b, b) = a_tilde[k] * bj;
                y[r] = c.outcomes[j];
            }
            Eigen::VectorXd theta;
            if (cfg.ridge == 0.0) {
                Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(Z);
                if (qr.rank() < d) {
                    throw FitError("singular design for cluster size " + std::to_string(m) +
                                   ", unit " + std::to_string(j + 1) +
                                   " with ridge=0; supply a positive ridge penalty");
                }
                theta = qr.solve(y);
            } else {
                Eigen::MatrixXd gram = Z.transpose() * Z;
                gram.diagonal().array() += cfg.ridge;
                theta = gram.ldlt().solve(Z.transpose() * y);
            }
            Eigen::MatrixXd coefs(m + 1, b);
            for (int k = 0; k <= m; ++k) coefs.row(k) = theta.segment(k * b, b).transpose();
            unit_coefs[static_cast<std::size_t>(j)] = std::move(coefs);
        }
        fit.set_stratum(m, std::move(unit_coefs));
    }
    return fit;
}

// ----------------------------------------------------------------------------
// Doubly robust policy value: outcome-model prediction plus an inverse-
// propensity-weighted residual correction,
//   score_i = w' [ G(X) + (Y - G(X) phi(A)) phi(A)' SigmaInverse ] phi(pi(X))
// with w the uniform in-cluster averaging weights. Consistent when either the
// outcome model or the propensity model is correct.
// ----------------------------------------------------------------------------
inline ValueEstimate value_dr(const ClusterDataset& ds, const PropensityModel& model,
                              const Policy& policy, const GFunction& outcome_model) {
    Eigen::VectorXd scores(ds.n());
    for (int i = 0; i < ds.n(); ++i) {
        const Cluster& c = ds.clusters[i];
        const int m = c.size();
        const auto pa = policy_assignment(policy, c);
        const Eigen::MatrixXd G = outcome_model.eval(c);
        detail::require(G.rows() == m && G.cols() == m + 1,
                        "outcome model returned a matrix of wrong shape");
        Eigen::VectorXd phi_a(m + 1);
        phi_a[0] = 1.0;
        phi_a.tail(m) = c.treatments.cast<double>();
        const auto sigma_inv = sigma_inverse_closed_form(model, c);
        const Eigen::VectorXd resid = c.outcomes - G * phi_a;
        const Eigen::VectorXd sig_phi_pi = sigma_inv.entries * pa.with_intercept;
        const double a_sig_pi = phi_a.dot(sig_phi_pi);
        // w' [G + resid phi(A)' SigmaInverse] phi(pi) with w = 1_m / m
        double s = 0.0;
        for (int j = 0; j < m; ++j)
            s += G.row(j).dot(pa.with_intercept) + resid[j] * a_sig_pi;
        scores[i] = s / m;
    }
    return detail::make_estimate("dr", std::move(scores));
}

inline ValueEstimate value_dr(const ClusterDataset& ds, const Policy& policy,
                              const NuisanceFit& nuisance) {
    return value_dr(ds, nuisance.sigma_model(), policy, nuisance);
}

/// Cross-fitted variant: G is fitted on out-of-fold clusters only, each
/// cluster is scored with the fold's held-out fit. Off by default elsewhere.
inline ValueEstimate value_dr_crossfit(const ClusterDataset& ds, const PropensityModel& model,
                                       const Policy& policy, const NuisanceConfig& cfg,
                                       int folds, std::uint64_t seed) {
    detail::require(folds >= 2, "cross-fitting needs at least two folds");
    detail::require(ds.n() >= folds, "more folds than clusters");
    std::vector<int> order(static_cast<std::size_t>(ds.n()));
    for (int i = 0; i < ds.n(); ++i) order[static_cast<std::size_t>(i)] = i;
    Rng rng(seed);
    for (int i = ds.n() - 1; i > 0; --i) {
        const int j = static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(i + 1)));
        std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
    }
    std::vector<int> fold_of(static_cast<std::size_t>(ds.n()));
    for (int r = 0; r < ds.n(); ++r) fold_of[static_cast<std::size_t>(order[r])] = r % folds;

    Eigen::VectorXd scores(ds.n());
    for (int k = 0; k < folds; ++k) {
        std::vector<Cluster> train;
        std::vector<int> eval_idx;
        for (int i = 0; i < ds.n(); ++i) {
            if (fold_of[static_cast<std::size_t>(i)] == k)
                eval_idx.push_back(i);
            else
                train.push_back(ds.clusters[i]);
        }
        const auto fit = fit_nuisance(ClusterDataset::from_clusters(std::move(train)), model, cfg);
        std::vector<Cluster> eval_clusters;
        for (int i : eval_idx) eval_clusters.push_back(ds.clusters[i]);
        const auto est =
            value_dr(ClusterDataset::from_clusters(std::move(eval_clusters)), model, policy, fit);
        for (std::size_t r = 0; r < eval_idx.size(); ++r)
            scores[eval_idx[r]] = est.cluster_scores[static_cast<long>(r)];
    }
    return detail::make_estimate("dr-crossfit", std::move(scores));
}

}  // namespace clusterpolicy
