#pragma once

#include <cmath>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "clusterpolicy/data.hpp"
#include "clusterpolicy/errors.hpp"
#include "clusterpolicy/estimators.hpp"
#include "clusterpolicy/learning.hpp"
#include "clusterpolicy/policy.hpp"
#include "clusterpolicy/propensity.hpp"
#include "clusterpolicy/rng.hpp"

namespace clusterpolicy {

// ============================================================================
// K-fold cross-fitted, cost-penalized policy evaluation. Folds are drawn at
// the cluster level (clusters are the i.i.d. sampling unit). For every cost
// in the grid and every fold k, a policy is learned on the out-of-fold
// clusters with the cost-penalized objective; the held-out clusters are then
// scored with the cost-penalized additive IPW score. The cost penalty enters
// both the learning objective and the evaluation.
// ============================================================================

struct CrossfitSpec {
    int K = 5;
    std::vector<double> cost_grid{0.15, 0.20, 0.25};
    LearnSpec learner;                 // objective/restarts/temperature/box
    std::string method = "surrogate";  // surrogate | exact
    std::uint64_t seed = 0;            // fold-shuffle seed

    void validate() const {
        detail::require(K >= 2, "cross-fitting needs K >= 2 folds");
        for (double c : cost_grid) detail::require(c >= 0.0, "costs must be non-negative");
        detail::require(!cost_grid.empty(), "cost grid must be non-empty");
        learner.validate();
    }
};

struct CrossfitFold {
    int fold = 0;
    int clusters = 0;
    double value = 0.0;    // mean cost-penalized score of held-out clusters
    double treated = 0.0;  // mean within-cluster treated fraction, held-out
    Eigen::VectorXd coefficients;             // learned gamma, raw scale
    Eigen::VectorXd normalized_coefficients;  // gamma / |intercept|
    bool intercept_near_zero = false;
};

struct CrossfitRow {
    double cost = 0.0;
    double value = 0.0;               // pooled over all clusters (1/n weighting)
    double treated_proportion = 0.0;  // unweighted mean over clusters
    std::vector<CrossfitFold> folds;
};

struct CrossfitResult {
    std::vector<CrossfitRow> rows;
    std::vector<int> fold_of;  // cluster index -> evaluation fold

    nlohmann::json to_json() const {
        nlohmann::json jrows = nlohmann::json::array();
        for (const auto& row : rows) {
            nlohmann::json jfolds = nlohmann::json::array();
            for (const auto& f : row.folds) {
                jfolds.push_back(nlohmann::json{
                    {"fold", f.fold},
                    {"clusters", f.clusters},
                    {"value", f.value},
                    {"treated", f.treated},
                    {"coefficients",
                     std::vector<double>(f.coefficients.data(),
                                         f.coefficients.data() + f.coefficients.size())},
                    {"normalized_coefficients",
                     std::vector<double>(f.normalized_coefficients.data(),
                                         f.normalized_coefficients.data() +
                                             f.normalized_coefficients.size())},
                    {"intercept_near_zero", f.intercept_near_zero}});
            }
            jrows.push_back(nlohmann::json{{"cost", row.cost},
                                           {"value", row.value},
                                           {"treated_proportion", row.treated_proportion},
                                           {"folds", jfolds}});
        }
        return nlohmann::json{{"rows", jrows}};
    }
};

namespace detail {

inline std::vector<int> assign_folds(int n, int K, std::uint64_t seed) {
    require(n >= K, "fewer clusters than folds leaves a fold empty");
    std::vector<int> order(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
    Rng rng(seed);
    for (int i = n - 1; i > 0; --i) {
        const int j = static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(i + 1)));
        std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
    }
    std::vector<int> fold_of(static_cast<std::size_t>(n));
    for (int r = 0; r < n; ++r) fold_of[static_cast<std::size_t>(order[r])] = r % K;
    return fold_of;
}

}  // namespace detail

inline CrossfitResult crossfit_evaluate(const ClusterDataset& ds, const PropensityModel& model,
                                        const CrossfitSpec& spec) {
    spec.validate();
    CrossfitResult result;
    result.fold_of = detail::assign_folds(ds.n(), spec.K, spec.seed);

    // fold membership is shared across costs
    std::vector<std::vector<int>> fold_members(static_cast<std::size_t>(spec.K));
    for (int i = 0; i < ds.n(); ++i)
        fold_members[static_cast<std::size_t>(result.fold_of[static_cast<std::size_t>(i)])]
            .push_back(i);

    for (double cost : spec.cost_grid) {
        CrossfitRow row;
        row.cost = cost;
        double pooled = 0.0;
        double treated_total = 0.0;
        for (int k = 0; k < spec.K; ++k) {
            std::vector<Cluster> train;
            for (int i = 0; i < ds.n(); ++i)
                if (result.fold_of[static_cast<std::size_t>(i)] != k)
                    train.push_back(ds.clusters[i]);
            LearnedPolicy learned;
            try {
                const auto train_ds = ClusterDataset::from_clusters(std::move(train));
                LearnSpec ls = spec.learner;
                ls.cost = cost;
                // one learner seed for all folds: identical training folds
                // learn identical policies
                learned = spec.method == "exact"
                              ? learn_linear_exact(train_ds, model, ls.objective, cost)
                              : learn_surrogate(train_ds, model, ls);
            } catch (const std::exception& ex) {
                throw FitError("fold " + std::to_string(k) + " failed to train: " + ex.what());
            }

            CrossfitFold fold;
            fold.fold = k;
            fold.clusters = static_cast<int>(fold_members[static_cast<std::size_t>(k)].size());
            const Eigen::VectorXd gamma = learned.policy.as_linear().gamma;
            fold.coefficients = gamma;
            fold.intercept_near_zero = std::abs(gamma[0]) < 1e-12;
            fold.normalized_coefficients =
                fold.intercept_near_zero ? gamma : Eigen::VectorXd(gamma / std::abs(gamma[0]));

            double fold_value = 0.0, fold_treated = 0.0;
            for (int i : fold_members[static_cast<std::size_t>(k)]) {
                const Cluster& c = ds.clusters[i];
                const auto pa = policy_assignment(learned.policy, c);
                const double tf = pa.bits.cast<double>().mean();
                const double score =
                    c.mean_outcome() * detail::additive_weight(model, c, pa.bits) - cost * tf;
                fold_value += score;
                fold_treated += tf;
                pooled += score;
                treated_total += tf;
            }
            fold.value = fold.clusters > 0 ? fold_value / fold.clusters : 0.0;
            fold.treated = fold.clusters > 0 ? fold_treated / fold.clusters : 0.0;
            row.folds.push_back(std::move(fold));
        }
        row.value = pooled / ds.n();
        row.treated_proportion = treated_total / ds.n();
        result.rows.push_back(std::move(row));
    }
    return result;
}

}  // namespace clusterpolicy
