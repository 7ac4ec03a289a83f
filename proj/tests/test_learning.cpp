#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

#include "clusterpolicy/learning.hpp"
#include "clusterpolicy/rng.hpp"

#include "support/linear_realizability.hpp"

using namespace clusterpolicy;

namespace {

ClusterDataset random_instance(Rng& rng, int n, int m, int p) {
    std::vector<Cluster> clusters;
    for (int i = 0; i < n; ++i) {
        Cluster c;
        c.id = std::to_string(i + 1);
        c.covariates.resize(m, p);
        c.treatments.resize(m);
        c.outcomes.resize(m);
        c.pscores.resize(m);
        for (int j = 0; j < m; ++j) {
            for (int k = 0; k < p; ++k) c.covariates(j, k) = rng.normal();
            c.pscores[j] = 0.25 + 0.5 * rng.uniform01();
            c.treatments[j] = rng.bernoulli(c.pscores[j]);
            c.outcomes[j] = rng.normal();
        }
        clusters.push_back(std::move(c));
    }
    return ClusterDataset::from_clusters(std::move(clusters));
}

std::vector<int> unit_labels(const ClusterDataset& ds, const Policy& policy) {
    std::vector<int> labels;
    for (const auto& c : ds.clusters) {
        const auto pa = policy_assignment(policy, c);
        for (int j = 0; j < c.size(); ++j) labels.push_back(pa.bits[j]);
    }
    return labels;
}

}  // namespace

TEST_CASE("exact learner matches brute force over realizable labelings") {
    Rng rng(42);
    const auto model = PropensityModel::known_table(0.05);
    int instances = 0;
    for (int trial = 0; trial < 60; ++trial) {
        const int p = 1 + static_cast<int>(rng.uniform_index(2));
        const int n = 3 + static_cast<int>(rng.uniform_index(3));
        const int m = 2;  // N = 2n <= 10
        const auto ds = random_instance(rng, n, m, p);
        const double cost = trial % 3 == 0 ? 0.1 : 0.0;
        const std::string tag = trial % 4 == 0 ? "noint" : "addipw";
        const auto learned = learn_linear_exact(ds, model, tag, cost);
        const double oracle = cp_test::brute_force_optimum(ds, model, tag, cost);
        INFO("trial " << trial << " tag " << tag << " learner " << learned.objective_value
                      << " oracle " << oracle);
        CHECK(std::abs(learned.objective_value - oracle) < 1e-9);
        ++instances;
    }
    CHECK(instances >= 50);
}

TEST_CASE("exact learner returns treat-nobody when every gain is negative") {
    Rng rng(77);
    auto ds = random_instance(rng, 6, 2, 1);
    for (auto& c : ds.clusters) {
        c.treatments.setOnes();               // everyone observed treated
        c.outcomes = -c.outcomes.cwiseAbs();  // negative outcomes
    }
    const auto model = PropensityModel::known_table(0.05);
    const auto learned = learn_linear_exact(ds, model, "addipw", 0.0);
    const auto labels = unit_labels(ds, learned.policy);
    CHECK(std::all_of(labels.begin(), labels.end(), [](int b) { return b == 0; }));
    CHECK(learned.objective_value ==
          Catch::Approx(value_addipw(ds, model, Policy::constant(0)).value));
}

TEST_CASE("exact learner objective is internally consistent") {
    Rng rng(88);
    const auto ds = random_instance(rng, 5, 2, 2);
    const auto model = PropensityModel::known_table(0.05);
    const auto learned = learn_linear_exact(ds, model, "addipw", 0.2);
    const double treated = [&] {
        double t = 0.0;
        for (const auto& c : ds.clusters)
            t += policy_assignment(learned.policy, c).bits.cast<double>().mean();
        return t / ds.n();
    }();
    CHECK(learned.objective_value ==
          Catch::Approx(value_addipw(ds, model, learned.policy).value - 0.2 * treated)
              .margin(1e-9));
}

TEST_CASE("exact learner labelings are invariant to positive covariate scaling") {
    Rng rng(99);
    for (int trial = 0; trial < 10; ++trial) {
        const auto ds = random_instance(rng, 5, 2, 2);
        const auto model = PropensityModel::known_table(0.05);
        const auto learned = learn_linear_exact(ds, model, "addipw", 0.0);

        auto scaled = ds;
        const double c = 0.25 + 4.0 * rng.uniform01();
        for (auto& cl : scaled.clusters) cl.covariates *= c;
        const auto learned_scaled = learn_linear_exact(scaled, model, "addipw", 0.0);
        CHECK(unit_labels(ds, learned.policy) == unit_labels(scaled, learned_scaled.policy));
    }
}

TEST_CASE("exact learner refuses oversized instances") {
    Rng rng(111);
    const auto ds = random_instance(rng, 40, 10, 4);  // C(400, 5) is astronomical
    const auto model = PropensityModel::known_table(0.05);
    CHECK_THROWS_WITH(learn_linear_exact(ds, model, "addipw", 0.0),
                      Catch::Matchers::ContainsSubstring("surrogate"));
}

TEST_CASE("exact learner dominates the thresholded surrogate") {
    Rng rng(123);
    const auto model = PropensityModel::known_table(0.05);
    for (int trial = 0; trial < 8; ++trial) {
        const auto ds = random_instance(rng, 5, 2, 2);
        const auto exact = learn_linear_exact(ds, model, "addipw", 0.0);
        LearnSpec spec;
        spec.restarts = 6;
        spec.seed = 500 + static_cast<std::uint64_t>(trial);
        const auto surrogate = learn_linear_surrogate(ds, model, spec);
        CHECK(exact.objective_value >= surrogate.objective_value - 1e-9);
    }
}

TEST_CASE("surrogate with small temperature recovers the exact policy on separated data") {
    // one unit per cluster, gains with a wide margin at x = 0
    std::vector<Cluster> clusters;
    Rng rng(321);
    for (int i = 0; i < 8; ++i) {
        Cluster c;
        c.id = std::to_string(i + 1);
        c.covariates.resize(1, 1);
        c.covariates(0, 0) = (i < 4 ? -1.0 : 1.0) * (1.0 + rng.uniform01());
        c.treatments.resize(1);
        c.treatments << 1;
        c.outcomes.resize(1);
        c.outcomes << (i < 4 ? -2.0 : 2.0);  // treating is bad left, good right
        c.pscores = Eigen::VectorXd::Constant(1, 0.5);
        clusters.push_back(std::move(c));
    }
    const auto ds = ClusterDataset::from_clusters(std::move(clusters));
    const auto model = PropensityModel::known_table(0.05);
    const auto exact = learn_linear_exact(ds, model, "addipw", 0.0);
    LearnSpec spec;
    spec.restarts = 1;
    spec.surrogate_temperature = 0.1;
    const auto surrogate = learn_linear_surrogate(ds, model, spec);
    CHECK(unit_labels(ds, exact.policy) == unit_labels(ds, surrogate.policy));
    CHECK(surrogate.objective_value == Catch::Approx(exact.objective_value));
}

TEST_CASE("surrogate is deterministic given a seed") {
    Rng rng(432);
    const auto ds = random_instance(rng, 12, 3, 2);
    const auto model = PropensityModel::known_table(0.05);
    LearnSpec spec;
    spec.restarts = 5;
    spec.seed = 2024;
    const auto a = learn_linear_surrogate(ds, model, spec);
    const auto b = learn_linear_surrogate(ds, model, spec);
    CHECK(a.policy.as_linear().gamma == b.policy.as_linear().gamma);
    CHECK(a.objective_value == b.objective_value);
    const auto c = learn_ipw_standard_surrogate(ds, model, spec);
    const auto d = learn_ipw_standard_surrogate(ds, model, spec);
    CHECK(c.policy.as_linear().gamma == d.policy.as_linear().gamma);
}

TEST_CASE("all-zero outcomes flag a flat objective") {
    Rng rng(555);
    auto ds = random_instance(rng, 8, 2, 2);
    for (auto& c : ds.clusters) c.outcomes.setZero();
    const auto model = PropensityModel::known_table(0.05);
    LearnSpec spec;
    spec.restarts = 2;
    const auto learned = learn_linear_surrogate(ds, model, spec);
    CHECK(learned.diagnostics.flat_objective);
    CHECK(learned.objective_value == 0.0);
    const auto exact = learn_linear_exact(ds, model, "addipw", 0.0);
    CHECK(exact.diagnostics.flat_objective);
    const auto product = learn_ipw_standard_surrogate(ds, model, spec);
    CHECK(product.diagnostics.flat_objective);
}

TEST_CASE("m=1 data: product and unit-wise surrogates agree") {
    Rng rng(666);
    const auto ds = random_instance(rng, 20, 1, 2);
    const auto model = PropensityModel::known_table(0.05);
    LearnSpec spec;
    spec.restarts = 4;
    spec.seed = 7;
    const auto product = learn_ipw_standard_surrogate(ds, model, spec);
    LearnSpec noint_spec = spec;
    noint_spec.objective = "noint";
    const auto unitwise = learn_linear_surrogate(ds, model, noint_spec);
    CHECK(unit_labels(ds, product.policy) == unit_labels(ds, unitwise.policy));
}

TEST_CASE("single matching cluster: hard IPW objective is Ybar over the joint propensity") {
    Cluster c;
    c.id = "1";
    c.outcomes.resize(2);
    c.outcomes << 2.0, 4.0;
    c.treatments.resize(2);
    c.treatments << 1, 1;
    c.covariates = Eigen::MatrixXd::Ones(2, 1);
    const auto ds = ClusterDataset::from_clusters({c});
    const auto model = PropensityModel::known_constant(0.4);
    CHECK(hard_objective(ds, model, Policy::constant(1), "ipw", 0.0) ==
          Catch::Approx(3.0 / 0.16));
}

TEST_CASE("analytic surrogate gradients match central differences") {
    Rng rng(777);
    const auto ds = random_instance(rng, 10, 3, 3);
    const auto model = PropensityModel::known_table(0.05);
    const int d = ds.p + 1;

    Eigen::MatrixXd lifted(ds.total_units(), d);
    {
        int u = 0;
        for (const auto& c : ds.clusters)
            for (int j = 0; j < c.size(); ++j, ++u) {
                lifted(u, 0) = 1.0;
                lifted.row(u).tail(ds.p) = c.covariates.row(j);
            }
    }

    auto check_gradient = [&](auto&& functor) {
        for (int point = 0; point < 10; ++point) {
            Eigen::VectorXd gamma(d);
            for (int k = 0; k < d; ++k) gamma[k] = 2.0 * rng.uniform01() - 1.0;
            Eigen::VectorXd grad(d);
            functor(gamma, grad);
            const double h = 1e-6;
            for (int k = 0; k < d; ++k) {
                Eigen::VectorXd hi = gamma, lo = gamma, scratch(d);
                hi[k] += h;
                lo[k] -= h;
                const double numeric = (functor(hi, scratch) - functor(lo, scratch)) / (2 * h);
                const double rel = std::abs(grad[k] - numeric) / std::max(std::abs(numeric), 1e-4);
                INFO("component " << k << " analytic " << grad[k] << " numeric " << numeric);
                CHECK(rel < 1e-5);
            }
        }
    };

    SECTION("unit-wise smoothed objective") {
        const auto obj = detail::unit_linear_objective(ds, model, "addipw", 0.1);
        detail::AdditiveSurrogate surrogate;
        surrogate.obj = &obj;
        surrogate.lifted_std = lifted;
        surrogate.tau = 0.7;
        check_gradient(surrogate);
    }
    SECTION("product smoothed objective") {
        detail::ProductSurrogate surrogate;
        surrogate.ds = &ds;
        int offset = 0;
        for (int i = 0; i < ds.n(); ++i) {
            const Cluster& c = ds.clusters[i];
            surrogate.cluster_factor.push_back(c.mean_outcome() /
                                               model.cluster_joint(c, c.treatments) / ds.n());
            surrogate.cost_per_unit.push_back(0.05 / (ds.n() * c.size()));
            surrogate.unit_offset.push_back(offset);
            offset += c.size();
        }
        surrogate.lifted_std = lifted;
        surrogate.tau = 0.7;
        check_gradient(surrogate);
    }
}

TEST_CASE("regret bound arithmetic") {
    SECTION("hand-computed value") {
        RegretBoundInputs in;
        in.outcome_bound = 1.0;
        in.m_max = 1;
        in.eta = 0.5;
        in.vc_dimension = 1.0;
        in.n = 4;
        in.delta = 1.0;  // log term vanishes
        in.c0 = 1.0;
        CHECK(compute_regret_bound(in) == Catch::Approx(8.0));
    }
    SECTION("quadrupling n halves the bound exactly") {
        RegretBoundInputs in;
        in.outcome_bound = 2.5;
        in.m_max = 12;
        in.eta = 0.2;
        in.vc_dimension = 5.0;
        in.n = 37;
        in.delta = 0.05;
        const double b1 = compute_regret_bound(in);
        in.n = 4 * 37;
        CHECK(compute_regret_bound(in) == b1 / 2.0);
    }
    SECTION("bound increases as eta decreases") {
        RegretBoundInputs in;
        in.outcome_bound = 1.0;
        in.m_max = 10;
        in.vc_dimension = 6.0;
        in.n = 100;
        in.delta = 0.05;
        double prev = 0.0;
        for (double eta : {0.5, 0.4, 0.3, 0.2, 0.1, 0.05}) {
            in.eta = eta;
            const double b = compute_regret_bound(in);
            CHECK(b > prev);
            prev = b;
        }
    }
    SECTION("validation") {
        RegretBoundInputs in;
        in.delta = 0.0;
        CHECK_THROWS_AS(compute_regret_bound(in), ValidationError);
        in.delta = 0.5;
        in.eta = 0.7;
        CHECK_THROWS_AS(compute_regret_bound(in), ValidationError);
    }
}

TEST_CASE("learned policies serialize with their diagnostics") {
    Rng rng(888);
    const auto ds = random_instance(rng, 8, 2, 2);
    const auto model = PropensityModel::known_table(0.05);
    LearnSpec spec;
    spec.restarts = 3;
    const auto learned = learn_linear_surrogate(ds, model, spec);
    const auto j = learned.to_json();
    CHECK(j.at("method") == "surrogate");
    CHECK(j.at("policy").at("kind") == "linear_threshold");
    CHECK(j.at("diagnostics").contains("standardization"));
    const auto policy = Policy::from_json(j.at("policy"));
    CHECK(unit_labels(ds, policy) == unit_labels(ds, learned.policy));
}
