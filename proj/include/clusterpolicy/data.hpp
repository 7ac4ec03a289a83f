#pragma once

#include <algorithm>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "clusterpolicy/errors.hpp"

namespace clusterpolicy {

// ============================================================================
// Clustered data model. Units live in disjoint clusters; outcomes may depend
// on every treatment within the unit's own cluster and on nothing outside it.
// ============================================================================

struct Cluster {
    std::string id;
    Eigen::VectorXd outcomes;    // Y, length m
    Eigen::VectorXi treatments;  // A, length m, entries in {0,1}
    Eigen::MatrixXd covariates;  // X, m x p
    Eigen::VectorXd pscores;     // optional per-unit treatment probabilities, length 0 or m
    std::vector<std::string> unit_ids;  // optional, length 0 or m

    int size() const { return static_cast<int>(covariates.rows()); }
    int dim() const { return static_cast<int>(covariates.cols()); }

    double mean_outcome() const { return outcomes.mean(); }

    double treated_fraction() const {
        return treatments.cast<double>().mean();
    }

    void validate() const {
        const int m = size();
        detail::require(m >= 1, "cluster '" + id + "': cluster size must be >= 1");
        detail::require(outcomes.size() == m,
                        "cluster '" + id + "': outcomes length != cluster size");
        detail::require(treatments.size() == m,
                        "cluster '" + id + "': treatments length != cluster size");
        for (int j = 0; j < m; ++j) {
            detail::require(treatments[j] == 0 || treatments[j] == 1,
                            "cluster '" + id + "': treatment of unit " + std::to_string(j + 1) +
                                " is not binary");
        }
        detail::require(pscores.size() == 0 || pscores.size() == m,
                        "cluster '" + id + "': propensity column length != cluster size");
        detail::require(unit_ids.empty() || static_cast<int>(unit_ids.size()) == m,
                        "cluster '" + id + "': unit id count != cluster size");
        detail::require(outcomes.allFinite() && covariates.allFinite(),
                        "cluster '" + id + "': non-finite outcome or covariate");
    }
};

struct ClusterDataset {
    std::vector<Cluster> clusters;
    int p = 0;      // covariate dimension shared by all clusters
    int m_max = 0;  // maximum observed cluster size

    int n() const { return static_cast<int>(clusters.size()); }

    int total_units() const {
        int total = 0;
        for (const auto& c : clusters) total += c.size();
        return total;
    }

    bool has_pscores() const {
        return !clusters.empty() &&
               std::all_of(clusters.begin(), clusters.end(),
                           [](const Cluster& c) { return c.pscores.size() == c.size(); });
    }

    static ClusterDataset from_clusters(std::vector<Cluster> clusters) {
        detail::require(!clusters.empty(), "dataset must contain at least one cluster");
        ClusterDataset ds;
        ds.p = clusters.front().dim();
        for (const auto& c : clusters) {
            c.validate();
            detail::require(c.dim() == ds.p,
                            "cluster '" + c.id + "': covariate dimension " +
                                std::to_string(c.dim()) + " != shared dimension " +
                                std::to_string(ds.p));
            ds.m_max = std::max(ds.m_max, c.size());
        }
        ds.clusters = std::move(clusters);
        return ds;
    }
};

}  // namespace clusterpolicy
