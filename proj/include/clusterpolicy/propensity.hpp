#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "clusterpolicy/data.hpp"
#include "clusterpolicy/errors.hpp"

namespace clusterpolicy {

// ============================================================================
// Factored cluster-level propensity scores: treatments are conditionally
// independent across units given covariates, so the joint probability of a
// treatment vector is the product of per-unit probabilities. Every produced
// probability must lie in [eta, 1-eta]; violations raise, never clip.
// ============================================================================

enum class PropensityKind { Constant, Table, Logistic };

class PropensityModel {
public:
    static PropensityModel known_constant(double q, double eta = 0.01) {
        PropensityModel m(PropensityKind::Constant, eta);
        m.q_ = q;
        return m;
    }

    /// Per-unit probabilities ride the dataset (Cluster::pscores).
    static PropensityModel known_table(double eta = 0.01) {
        return PropensityModel(PropensityKind::Table, eta);
    }

    /// Logistic in unit-level covariates; coef[0] is the intercept.
    static PropensityModel fitted_logistic(Eigen::VectorXd coef, double eta = 0.01) {
        PropensityModel m(PropensityKind::Logistic, eta);
        m.coef_ = std::move(coef);
        return m;
    }

    PropensityKind kind() const { return kind_; }
    double eta() const { return eta_; }
    const Eigen::VectorXd& coefficients() const { return coef_; }

    /// Coefficients fitted separately per cluster size (optional refinement).
    void set_size_coefficients(std::map<int, Eigen::VectorXd> by_size) {
        by_size_ = std::move(by_size);
    }

    /// e_j(1 | X_i) for unit j of the given cluster.
    double prob_treated(const Cluster& cluster, int j) const {
        double e;
        switch (kind_) {
            case PropensityKind::Constant:
                e = q_;
                break;
            case PropensityKind::Table:
                detail::require(cluster.pscores.size() == cluster.size(),
                                "cluster '" + cluster.id +
                                    "' carries no propensity column required by the table model");
                e = cluster.pscores[j];
                break;
            case PropensityKind::Logistic: {
                const Eigen::VectorXd* c = &coef_;
                auto it = by_size_.find(cluster.size());
                if (it != by_size_.end()) c = &it->second;
                detail::require(c->size() == cluster.dim() + 1,
                                "logistic propensity model dimension mismatch");
                double z = (*c)[0];
                for (int k = 0; k < cluster.dim(); ++k) z += (*c)[k + 1] * cluster.covariates(j, k);
                e = 1.0 / (1.0 + std::exp(-z));
                break;
            }
        }
        if (!(e >= eta_ && e <= 1.0 - eta_)) {
            throw PositivityError("propensity " + std::to_string(e) + " for unit " +
                                  std::to_string(j + 1) + " of cluster '" + cluster.id +
                                  "' outside [" + std::to_string(eta_) + ", " +
                                  std::to_string(1.0 - eta_) + "]");
        }
        return e;
    }

    /// e_j(a | X_i); the two arms sum to one.
    double individual(const Cluster& cluster, int j, int a) const {
        detail::require(j >= 0 && j < cluster.size(), "unit index out of range");
        detail::require(a == 0 || a == 1, "treatment arm must be 0 or 1");
        const double e1 = prob_treated(cluster, j);
        return a == 1 ? e1 : 1.0 - e1;
    }

    /// Joint probability of an entire treatment vector (product across units).
    double cluster_joint(const Cluster& cluster, const Eigen::VectorXi& a) const {
        detail::require(a.size() == cluster.size(),
                        "treatment vector length != cluster size for cluster '" + cluster.id + "'");
        double prob = 1.0;
        for (int j = 0; j < cluster.size(); ++j) prob *= individual(cluster, j, a[j]);
        return prob;
    }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["eta"] = eta_;
        switch (kind_) {
            case PropensityKind::Constant:
                j["kind"] = "known_constant";
                j["q"] = q_;
                break;
            case PropensityKind::Table:
                j["kind"] = "known_table";
                break;
            case PropensityKind::Logistic: {
                j["kind"] = "fitted_logistic";
                j["intercept"] = coef_[0];
                j["slopes"] = std::vector<double>(coef_.data() + 1, coef_.data() + coef_.size());
                if (!by_size_.empty()) {
                    nlohmann::json bs;
                    for (const auto& [m, c] : by_size_) {
                        bs[std::to_string(m)] =
                            std::vector<double>(c.data(), c.data() + c.size());
                    }
                    j["by_size"] = bs;
                }
                break;
            }
        }
        return j;
    }

    static PropensityModel from_json(const nlohmann::json& j) {
        const double eta = j.value("eta", 0.01);
        const std::string kind = j.at("kind").get<std::string>();
        if (kind == "known_constant") return known_constant(j.at("q").get<double>(), eta);
        if (kind == "known_table") return known_table(eta);
        if (kind == "fitted_logistic") {
            auto slopes = j.at("slopes").get<std::vector<double>>();
            Eigen::VectorXd coef(slopes.size() + 1);
            coef[0] = j.at("intercept").get<double>();
            for (std::size_t k = 0; k < slopes.size(); ++k) coef[k + 1] = slopes[k];
            auto model = fitted_logistic(coef, eta);
            if (j.contains("by_size")) {
                std::map<int, Eigen::VectorXd> by_size;
                for (const auto& [key, val] : j.at("by_size").items()) {
                    auto v = val.get<std::vector<double>>();
                    by_size[std::stoi(key)] =
                        Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<long>(v.size()));
                }
                model.set_size_coefficients(std::move(by_size));
            }
            return model;
        }
        throw ValidationError("unknown propensity model kind '" + kind + "'");
    }

private:
    PropensityModel(PropensityKind kind, double eta) : kind_(kind), eta_(eta) {
        detail::require(eta > 0.0 && eta <= 0.5, "eta must lie in (0, 0.5]");
    }

    PropensityKind kind_;
    double eta_;
    double q_ = 0.5;
    Eigen::VectorXd coef_;
    std::map<int, Eigen::VectorXd> by_size_;
};

// ============================================================================
// Plug-in estimation: pooled maximum-likelihood logistic regression of A on
// unit-level covariates, Newton-Raphson on the pooled unit table.
// ============================================================================

struct PropensityFitConfig {
    int max_iter = 100;
    double tol = 1e-10;
    double eta = 0.01;
    bool stratify_by_size = false;  // additionally fit one model per cluster size
};

struct PropensityFitReport {
    bool converged = false;
    int iterations = 0;
    double loglik = 0.0;
    Eigen::VectorXd coef;
    Eigen::VectorXd se;  // from the inverse observed information
};

namespace detail {

inline Eigen::VectorXd logistic_mle(const Eigen::MatrixXd& design, const Eigen::VectorXd& resp,
                                    const PropensityFitConfig& cfg, PropensityFitReport* report) {
    const long n = design.rows();
    const long d = design.cols();
    const double sum_resp = resp.sum();
    if (sum_resp == 0.0 || sum_resp == static_cast<double>(n)) {
        throw FitError("separation: treatment is constant (all A=" +
                       std::to_string(resp[0] > 0.5 ? 1 : 0) + "), logistic MLE does not exist");
    }

    Eigen::VectorXd beta = Eigen::VectorXd::Zero(d);
    Eigen::MatrixXd info(d, d);
    double loglik = 0.0;
    int iter = 0;
    bool converged = false;
    for (; iter < cfg.max_iter; ++iter) {
        Eigen::VectorXd z = design * beta;
        Eigen::VectorXd mu = (1.0 + (-z.array()).exp()).inverse();
        Eigen::VectorXd w = mu.array() * (1.0 - mu.array());
        Eigen::VectorXd grad = design.transpose() * (resp - mu);
        info = design.transpose() * w.asDiagonal() * design;
        info.diagonal().array() += 1e-10;  // numerical floor only, not a penalty
        Eigen::VectorXd step = info.ldlt().solve(grad);
        beta += step;
        loglik = (resp.array() * z.array() - (1.0 + z.array().exp()).log()).sum();
        if (step.lpNorm<Eigen::Infinity>() < cfg.tol) {
            converged = true;
            ++iter;
            break;
        }
        if (beta.lpNorm<Eigen::Infinity>() > 30.0) {
            throw FitError("separation suspected: coefficient magnitude exceeded 30 after " +
                           std::to_string(iter + 1) + " iterations");
        }
    }
    if (!converged) {
        throw FitError("logistic regression did not converge after " +
                       std::to_string(cfg.max_iter) + " iterations");
    }
    if (report) {
        report->converged = true;
        report->iterations = iter;
        report->loglik = loglik;
        report->coef = beta;
        Eigen::MatrixXd cov = info.inverse();
        report->se = cov.diagonal().array().sqrt();
    }
    return beta;
}

}  // namespace detail

inline PropensityModel fit_propensity(const ClusterDataset& ds,
                                      const PropensityFitConfig& cfg = {},
                                      PropensityFitReport* report = nullptr) {
    detail::require(ds.n() >= 1, "cannot fit propensities on an empty dataset");
    const int p = ds.p;
    const int total = ds.total_units();
    Eigen::MatrixXd design(total, p + 1);
    Eigen::VectorXd resp(total);
    int row = 0;
    for (const auto& c : ds.clusters) {
        for (int j = 0; j < c.size(); ++j, ++row) {
            design(row, 0) = 1.0;
            design.row(row).tail(p) = c.covariates.row(j);
            resp[row] = static_cast<double>(c.treatments[j]);
        }
    }
    Eigen::VectorXd beta = detail::logistic_mle(design, resp, cfg, report);
    auto model = PropensityModel::fitted_logistic(beta, cfg.eta);

    if (cfg.stratify_by_size) {
        std::map<int, Eigen::VectorXd> by_size;
        std::map<int, std::vector<int>> rows_by_size;
        row = 0;
        for (const auto& c : ds.clusters)
            for (int j = 0; j < c.size(); ++j, ++row) rows_by_size[c.size()].push_back(row);
        for (const auto& [m, rows] : rows_by_size) {
            Eigen::MatrixXd sub(rows.size(), p + 1);
            Eigen::VectorXd subr(rows.size());
            for (std::size_t r = 0; r < rows.size(); ++r) {
                sub.row(static_cast<long>(r)) = design.row(rows[r]);
                subr[static_cast<long>(r)] = resp[rows[r]];
            }
            by_size[m] = detail::logistic_mle(sub, subr, cfg, nullptr);
        }
        model.set_size_coefficients(std::move(by_size));
    }
    return model;
}

/// Sample analogue of the inverse-propensity estimation gap: the average over
/// clusters of max over a in {0,1} of | sum_j (1/e_j(a) - 1/ehat_j(a)) |.
inline double propensity_error_metric(const PropensityModel& truth,
                                      const PropensityModel& fitted, const ClusterDataset& ds) {
    double total = 0.0;
    for (const auto& c : ds.clusters) {
        double gap[2] = {0.0, 0.0};
        for (int j = 0; j < c.size(); ++j) {
            for (int a = 0; a < 2; ++a) {
                gap[a] += 1.0 / truth.individual(c, j, a) - 1.0 / fitted.individual(c, j, a);
            }
        }
        total += std::max(std::abs(gap[0]), std::abs(gap[1]));
    }
    return total / static_cast<double>(ds.n());
}

}  // namespace clusterpolicy
