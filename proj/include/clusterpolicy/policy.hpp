#pragma once

#include <array>
#include <string>
#include <variant>

#include <Eigen/Dense>
#include <json.hpp>

#include "clusterpolicy/data.hpp"
#include "clusterpolicy/errors.hpp"

namespace clusterpolicy {

// ============================================================================
// Deterministic individualized treatment rules: feature vector -> {0,1}.
// ============================================================================

/// Closed half-space rule 1(gamma0 + x'gamma >= 0). Points exactly on the
/// boundary are treated.
struct LinearPolicy {
    Eigen::VectorXd gamma;  // length p+1, gamma[0] is the intercept

    int decide(const Eigen::Ref<const Eigen::RowVectorXd>& x) const {
        double z = gamma[0];
        for (int k = 0; k + 1 < gamma.size(); ++k) z += gamma[k + 1] * x[k];
        return z >= 0.0 ? 1 : 0;
    }
    int required_dim() const { return static_cast<int>(gamma.size()) - 1; }
};

/// Depth-2 decision tree. Each split sends x right when x[feature] > threshold;
/// leaves hold the treatment bits in order (LL, LR, RL, RR).
struct TreePolicy {
    int root_feature = 0;
    double root_threshold = 0.0;
    int left_feature = 0;
    double left_threshold = 0.0;
    int right_feature = 0;
    double right_threshold = 0.0;
    std::array<int, 4> leaves{0, 0, 0, 0};

    int decide(const Eigen::Ref<const Eigen::RowVectorXd>& x) const {
        if (x[root_feature] > root_threshold) {
            return leaves[x[right_feature] > right_threshold ? 3 : 2];
        }
        return leaves[x[left_feature] > left_threshold ? 1 : 0];
    }
    int required_dim() const {
        return std::max({root_feature, left_feature, right_feature}) + 1;
    }
};

struct ConstantPolicy {
    int bit = 0;
    int decide(const Eigen::Ref<const Eigen::RowVectorXd>&) const { return bit; }
    int required_dim() const { return 0; }
};

class Policy {
public:
    Policy() : impl_(ConstantPolicy{0}) {}

    static Policy linear(Eigen::VectorXd gamma_with_intercept) {
        detail::require(gamma_with_intercept.size() >= 1,
                        "linear policy needs at least an intercept");
        return Policy(LinearPolicy{std::move(gamma_with_intercept)});
    }
    static Policy tree(TreePolicy t) {
        detail::require(t.root_feature >= 0 && t.left_feature >= 0 && t.right_feature >= 0,
                        "tree policy feature indices must be non-negative");
        for (int b : t.leaves)
            detail::require(b == 0 || b == 1, "tree policy leaves must be binary");
        return Policy(std::move(t));
    }
    static Policy constant(int bit) {
        detail::require(bit == 0 || bit == 1, "constant policy bit must be 0 or 1");
        return Policy(ConstantPolicy{bit});
    }

    int decide(const Eigen::Ref<const Eigen::RowVectorXd>& x) const {
        return std::visit([&](const auto& p) { return p.decide(x); }, impl_);
    }

    /// Smallest covariate dimension the rule can be applied to.
    int required_dim() const {
        return std::visit([](const auto& p) { return p.required_dim(); }, impl_);
    }

    std::string kind() const {
        if (std::holds_alternative<LinearPolicy>(impl_)) return "linear_threshold";
        if (std::holds_alternative<TreePolicy>(impl_)) return "tree_depth2";
        return "constant";
    }

    bool is_linear() const { return std::holds_alternative<LinearPolicy>(impl_); }
    const LinearPolicy& as_linear() const { return std::get<LinearPolicy>(impl_); }
    const TreePolicy& as_tree() const { return std::get<TreePolicy>(impl_); }
    const ConstantPolicy& as_constant() const { return std::get<ConstantPolicy>(impl_); }

    nlohmann::json to_json() const {
        nlohmann::json params;
        if (const auto* lin = std::get_if<LinearPolicy>(&impl_)) {
            params["coefficients"] =
                std::vector<double>(lin->gamma.data(), lin->gamma.data() + lin->gamma.size());
        } else if (const auto* tr = std::get_if<TreePolicy>(&impl_)) {
            params["root_feature"] = tr->root_feature;
            params["root_threshold"] = tr->root_threshold;
            params["left_feature"] = tr->left_feature;
            params["left_threshold"] = tr->left_threshold;
            params["right_feature"] = tr->right_feature;
            params["right_threshold"] = tr->right_threshold;
            params["leaves"] = tr->leaves;
        } else {
            params["value"] = std::get<ConstantPolicy>(impl_).bit;
        }
        return nlohmann::json{{"kind", kind()}, {"params", params}};
    }

    static Policy from_json(const nlohmann::json& j) {
        const std::string kind = j.at("kind").get<std::string>();
        const nlohmann::json& params = j.at("params");
        if (kind == "linear_threshold") {
            auto coef = params.at("coefficients").get<std::vector<double>>();
            return linear(Eigen::Map<const Eigen::VectorXd>(coef.data(),
                                                            static_cast<long>(coef.size())));
        }
        if (kind == "tree_depth2") {
            TreePolicy t;
            t.root_feature = params.at("root_feature").get<int>();
            t.root_threshold = params.at("root_threshold").get<double>();
            t.left_feature = params.at("left_feature").get<int>();
            t.left_threshold = params.at("left_threshold").get<double>();
            t.right_feature = params.at("right_feature").get<int>();
            t.right_threshold = params.at("right_threshold").get<double>();
            t.leaves = params.at("leaves").get<std::array<int, 4>>();
            return tree(t);
        }
        if (kind == "constant") return constant(params.at("value").get<int>());
        throw ValidationError("unknown policy kind '" + kind + "'");
    }

private:
    explicit Policy(std::variant<ConstantPolicy, LinearPolicy, TreePolicy> impl)
        : impl_(std::move(impl)) {}

    std::variant<ConstantPolicy, LinearPolicy, TreePolicy> impl_;
};

// ============================================================================
// Policy applied unit-wise within one cluster.
// ============================================================================

struct PolicyAssignment {
    Eigen::VectorXi bits;             // length m
    Eigen::VectorXd with_intercept;   // length m+1: (1, bits...)
};

inline PolicyAssignment policy_assignment(const Policy& policy, const Cluster& cluster) {
    detail::require(policy.required_dim() <= cluster.dim(),
                    "policy expects covariate dimension >= " +
                        std::to_string(policy.required_dim()) + " but cluster '" + cluster.id +
                        "' has dimension " + std::to_string(cluster.dim()));
    if (policy.is_linear()) {
        detail::require(policy.required_dim() == cluster.dim(),
                        "linear policy dimension " + std::to_string(policy.required_dim()) +
                            " != covariate dimension " + std::to_string(cluster.dim()));
    }
    const int m = cluster.size();
    PolicyAssignment out;
    out.bits.resize(m);
    out.with_intercept.resize(m + 1);
    out.with_intercept[0] = 1.0;
    for (int j = 0; j < m; ++j) {
        out.bits[j] = policy.decide(cluster.covariates.row(j));
        out.with_intercept[j + 1] = static_cast<double>(out.bits[j]);
    }
    return out;
}

}  // namespace clusterpolicy
