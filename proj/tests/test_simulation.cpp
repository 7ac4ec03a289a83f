#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "clusterpolicy/nuisance.hpp"
#include "clusterpolicy/simulation.hpp"

using namespace clusterpolicy;

namespace {

Policy linear_policy_section_example() {
    Eigen::VectorXd gamma(5);
    gamma << -2.0, 0.5, 1.0, 1.0, 0.5;
    return Policy::linear(gamma);
}

}  // namespace

TEST_CASE("scenario A with nobody treated reduces to the baseline mean") {
    ScenarioSpec spec;
    spec.n = 30;
    spec.seed = 10;
    const auto ds = generate_dataset_with_policy(spec, Policy::constant(0), /*with_noise=*/false);
    for (const auto& c : ds.clusters) {
        for (int j = 0; j < c.size(); ++j) {
            const double want = 0.2 * c.covariates(j, 1) + 0.2 * c.covariates(j, 2);
            CHECK(c.outcomes[j] == Catch::Approx(want).margin(1e-12));
        }
    }
}

TEST_CASE("scenario B equals scenario A when no other unit is treated") {
    ScenarioSpec a_spec, b_spec;
    b_spec.scenario = Scenario::B;
    Rng rng(22);
    Eigen::MatrixXd X(4, 4);
    for (int j = 0; j < 4; ++j)
        for (int k = 0; k < 4; ++k) X(j, k) = rng.normal();
    Eigen::VectorXi a = Eigen::VectorXi::Zero(4);
    a[2] = 1;  // only unit 2 treated, so its Abar_(-j) is zero
    CHECK(conditional_mean(b_spec, X, a, 2) == Catch::Approx(conditional_mean(a_spec, X, a, 2)));
    // a treated unit with a treated neighbour picks up the interaction
    a[0] = 1;
    CHECK(conditional_mean(b_spec, X, a, 0) != conditional_mean(a_spec, X, a, 0));
}

TEST_CASE("treatment draws match the Bernoulli rate") {
    ScenarioSpec spec;
    spec.n = 800;
    spec.sizes.sizes = {10};
    spec.seed = 33;
    const auto ds = generate_dataset(spec);
    double treated = 0.0;
    int total = 0;
    for (const auto& c : ds.clusters) {
        treated += c.treatments.cast<double>().sum();
        total += c.size();
    }
    const double phat = treated / total;
    const double band = 3.0 * std::sqrt(0.3 * 0.7 / total);
    CHECK(std::abs(phat - 0.3) < band);
}

TEST_CASE("oracle value of zero-mean policies is zero") {
    ScenarioSpec spec;
    spec.seed = 44;
    SECTION("treat nobody") {
        const auto oe = oracle_evaluate(spec, Policy::constant(0), 20000);
        CHECK(std::abs(oe.value) < 3.0 * oe.se);
        CHECK(oe.treated_fraction == 0.0);
    }
    SECTION("treat everybody") {
        const auto oe = oracle_evaluate(spec, Policy::constant(1), 20000);
        CHECK(std::abs(oe.value) < 3.0 * oe.se);
        CHECK(oe.treated_fraction == 1.0);
    }
}

TEST_CASE("doubling the oracle sample shrinks its standard error like a square root") {
    ScenarioSpec spec;
    spec.seed = 55;
    const auto policy = linear_policy_section_example();
    const auto small = oracle_evaluate(spec, policy, 20000, /*include_noise=*/true);
    ScenarioSpec spec2 = spec;
    spec2.seed = 56;
    const auto big = oracle_evaluate(spec2, policy, 40000, /*include_noise=*/true);
    const double ratio = big.se / small.se;
    CHECK(ratio > 0.6);
    CHECK(ratio < 0.85);
}

TEST_CASE("intervention hook matches the oracle mean") {
    ScenarioSpec spec;
    spec.n = 4000;
    spec.seed = 66;
    const auto policy = linear_policy_section_example();
    const auto ds = generate_dataset_with_policy(spec, policy, /*with_noise=*/true);
    double mean = 0.0, sq = 0.0;
    for (const auto& c : ds.clusters) {
        mean += c.mean_outcome();
        sq += c.mean_outcome() * c.mean_outcome();
    }
    mean /= ds.n();
    const double var = sq / ds.n() - mean * mean;
    ScenarioSpec oracle_spec = spec;
    oracle_spec.seed = 67;
    const auto oe = oracle_evaluate(oracle_spec, policy, 40000);
    CHECK(std::abs(mean - oe.value) < 4.0 * std::sqrt(oe.se * oe.se + var / ds.n()));
}

TEST_CASE("replication reports are deterministic and reproducible") {
    ScenarioSpec spec;
    spec.n = 60;
    spec.seed = 77;
    ReplicationProtocol protocol;
    protocol.kind = ReplicationProtocol::Kind::Evaluate;
    protocol.policy = linear_policy_section_example();
    protocol.estimators = {"addipw", "ipw", "noint"};

    const auto r1 = run_replications(spec, protocol, 20, /*threads=*/1);
    const auto r2 = run_replications(spec, protocol, 20, /*threads=*/4);
    REQUIRE(r1.records.size() == r2.records.size());
    for (std::size_t i = 0; i < r1.records.size(); ++i) {
        CHECK(r1.records[i].value == r2.records[i].value);
        CHECK(r1.records[i].tag == r2.records[i].tag);
        CHECK(r1.records[i].treated_frac == r2.records[i].treated_frac);
    }
    CHECK(r1.to_csv() == r2.to_csv());
    CHECK(r1.to_json() == r2.to_json());

    const auto single = run_replications(spec, protocol, 1, 1);
    const auto single2 = run_replications(spec, protocol, 1, 1);
    CHECK(single.to_json() == single2.to_json());
}

TEST_CASE("additive IPW has smaller replication spread than standard IPW") {
    ScenarioSpec spec;
    spec.n = 200;
    spec.seed = 88;
    ReplicationProtocol protocol;
    protocol.kind = ReplicationProtocol::Kind::Evaluate;
    protocol.policy = linear_policy_section_example();
    protocol.estimators = {"addipw", "ipw"};
    const auto report = run_replications(spec, protocol, 300, 4);
    const auto& add = report.summary("addipw");
    const auto& ipw = report.summary("ipw");
    INFO("sd addipw " << add.sd << " sd ipw " << ipw.sd);
    CHECK(add.sd < ipw.sd);
}

TEST_CASE("ignoring interference is biased for the policy value") {
    ScenarioSpec spec;
    spec.n = 400;
    spec.seed = 99;
    const auto policy = linear_policy_section_example();
    ScenarioSpec oracle_spec = spec;
    oracle_spec.seed = 100;
    const double truth = true_value_mc(oracle_spec, policy, 40000);

    ReplicationProtocol protocol;
    protocol.kind = ReplicationProtocol::Kind::Evaluate;
    protocol.policy = policy;
    protocol.estimators = {"noint", "addipw"};
    const auto report = run_replications(spec, protocol, 300, 4);
    const auto& noint = report.summary("noint");
    const double mc_se = noint.sd / std::sqrt(static_cast<double>(noint.reps));
    INFO("noint mean " << noint.mean << " truth " << truth << " mc-se " << mc_se);
    CHECK(std::abs(noint.mean - truth) > 3.0 * mc_se);

    const auto& add = report.summary("addipw");
    const double add_se = add.sd / std::sqrt(static_cast<double>(add.reps));
    CHECK(std::abs(add.mean - truth) < 3.0 * add_se);
}

TEST_CASE("learned additive-IPW policies beat no-interference policies out of sample") {
    ScenarioSpec spec;
    spec.scenario = Scenario::B;
    spec.n = 200;
    spec.seed = 111;
    ReplicationProtocol protocol;
    protocol.kind = ReplicationProtocol::Kind::Learn;
    protocol.oracle_clusters = 4000;
    LearnerConfig addipw{"learn-addipw", "surrogate", {}};
    addipw.spec.objective = "addipw";
    addipw.spec.restarts = 4;
    LearnerConfig noint{"learn-noint", "surrogate", {}};
    noint.spec.objective = "noint";
    noint.spec.restarts = 4;
    protocol.learners = {addipw, noint};
    const auto report = run_replications(spec, protocol, 40, 4);
    INFO("addipw " << report.summary("learn-addipw").mean << " noint "
                   << report.summary("learn-noint").mean);
    CHECK(report.summary("learn-addipw").mean > report.summary("learn-noint").mean);
}

TEST_CASE("summaries flag small-sample scenarios as high variance") {
    ScenarioSpec spec;
    spec.n = 50;
    spec.seed = 121;
    ReplicationProtocol protocol;
    protocol.kind = ReplicationProtocol::Kind::Evaluate;
    protocol.policy = Policy::constant(0);
    protocol.estimators = {"addipw"};
    CHECK(run_replications(spec, protocol, 5, 1).summaries.front().high_variance);
    spec.n = 100;
    CHECK_FALSE(run_replications(spec, protocol, 5, 1).summaries.front().high_variance);
}

TEST_CASE("nuisance fit on scenario A recovers the direct effect of the first covariate") {
    ScenarioSpec spec;
    spec.n = 800;
    spec.seed = 131;
    const auto ds = generate_dataset(spec);
    const auto model = PropensityModel::known_constant(0.3);
    NuisanceConfig cfg;
    cfg.ridge = 1e-4;
    const auto fit = fit_nuisance(ds, model, cfg);
    // own-treatment row of theta, coefficient on the unit's first covariate
    double acc = 0.0;
    int count = 0;
    for (int m : {5, 10, 15}) {
        for (int j = 0; j < m; ++j) {
            acc += fit.unit_coefficients(m, j)(j + 1, 1);
            ++count;
        }
    }
    const double mean_coef = acc / count;
    INFO("mean fitted direct-effect coefficient " << mean_coef);
    CHECK(std::abs(mean_coef - 1.0) < 0.15);
}

TEST_CASE("regret falls as the training sample grows") {
    ScenarioSpec spec;
    spec.seed = 141;
    LearnerConfig learner{"learn-addipw", "surrogate", {}};
    learner.spec.objective = "addipw";
    learner.spec.restarts = 3;
    const auto curve = regret_curve(spec, learner, {50, 200}, 12, 4);
    REQUIRE(curve.points.size() == 2);
    CHECK(curve.low_reps_warning);
    for (const auto& pt : curve.points) CHECK(pt.mean_regret > -3.0 * pt.se);
    CHECK(curve.points[1].mean_regret < curve.points[0].mean_regret);
}

// ----------------------------------------------------------------------------
// Projection interpretation: with a non-additive truth, the additive IPW
// estimator converges to the value of the L2 projection of the outcome
// function onto the linear treatment span. The oracle enumerates a discrete
// covariate design exactly.
// ----------------------------------------------------------------------------

namespace {

double discrete_mean(const Eigen::MatrixXd& X, const Eigen::VectorXi& a, int j) {
    const int m = static_cast<int>(X.rows());
    double spill = 0.0, abar = 0.0;
    for (int k = 0; k < m; ++k) {
        if (k == j) continue;
        spill += (X(k, 0) + X(k, 1)) * a[k];
        abar += a[k];
    }
    spill *= 1.5 / (m - 1);
    abar /= (m - 1);
    return (X(j, 0) + 0.5 * X(j, 1)) * a[j] + spill -
           0.7 * a[j] * abar * (1.0 + 0.5 * X(j, 0)) + 0.2 * X(j, 1);
}

}  // namespace

TEST_CASE("additive IPW converges to the projected value under misspecification") {
    const int m = 3;
    const double q = 0.4;
    Eigen::VectorXd gamma(3);
    gamma << 0.1, 1.0, -0.5;
    const auto policy = Policy::linear(gamma);

    // exact projection value: enumerate X in {-1,1}^(m x 2) and A in {0,1}^m
    Eigen::MatrixXd sigma(m + 1, m + 1);
    sigma(0, 0) = 1.0;
    for (int j = 0; j < m; ++j) {
        sigma(0, j + 1) = sigma(j + 1, 0) = q;
        for (int k = 0; k < m; ++k) sigma(j + 1, k + 1) = (j == k) ? q : q * q;
    }
    const Eigen::MatrixXd sigma_inv = sigma.inverse();

    double projection_value = 0.0;
    const int x_configs = 1 << (2 * m);
    for (int xc = 0; xc < x_configs; ++xc) {
        Eigen::MatrixXd X(m, 2);
        for (int j = 0; j < m; ++j)
            for (int k = 0; k < 2; ++k) X(j, k) = ((xc >> (2 * j + k)) & 1) ? 1.0 : -1.0;
        Eigen::VectorXd pi_tilde(m + 1);
        pi_tilde[0] = 1.0;
        for (int j = 0; j < m; ++j) pi_tilde[j + 1] = policy.decide(X.row(j));
        double cluster_term = 0.0;
        for (int j = 0; j < m; ++j) {
            Eigen::VectorXd moment = Eigen::VectorXd::Zero(m + 1);
            for (int ac = 0; ac < (1 << m); ++ac) {
                Eigen::VectorXi a(m);
                double prob = 1.0;
                for (int u = 0; u < m; ++u) {
                    a[u] = (ac >> u) & 1;
                    prob *= a[u] ? q : 1.0 - q;
                }
                Eigen::VectorXd phi(m + 1);
                phi[0] = 1.0;
                phi.tail(m) = a.cast<double>();
                moment += prob * discrete_mean(X, a, j) * phi;
            }
            const Eigen::VectorXd g_proj = sigma_inv * moment;
            cluster_term += g_proj.dot(pi_tilde);
        }
        projection_value += cluster_term / m;
    }
    projection_value /= x_configs;

    // Monte Carlo with the same design fed through the custom scenario hooks
    ScenarioSpec spec;
    spec.scenario = Scenario::Custom;
    spec.p = 2;
    spec.q = q;
    spec.sizes.sizes = {m};
    spec.custom_mean = discrete_mean;
    spec.covariate_sampler = [](Rng& rng) { return rng.uniform01() < 0.5 ? -1.0 : 1.0; };
    const auto model = PropensityModel::known_constant(q);

    const int reps = 3000;
    double sum = 0.0, sumsq = 0.0;
    Rng root(151);
    for (int r = 0; r < reps; ++r) {
        spec.n = 40;
        spec.seed = root.child(static_cast<std::uint64_t>(r)).seed();
        const auto ds = generate_dataset(spec);
        const double v = value_addipw(ds, model, policy).value;
        sum += v;
        sumsq += v * v;
    }
    const double mean = sum / reps;
    const double sd = std::sqrt((sumsq - sum * sum / reps) / (reps - 1));
    const double mc_se = sd / std::sqrt(static_cast<double>(reps));
    INFO("projection " << projection_value << " mc mean " << mean << " mc se " << mc_se);
    CHECK(std::abs(mean - projection_value) < 3.0 * mc_se);
}

TEST_CASE("scenario specs round-trip through JSON") {
    ScenarioSpec spec;
    spec.scenario = Scenario::B;
    spec.n = 123;
    spec.sizes.sizes = {2, 4};
    spec.sizes.probs = {0.25, 0.75};
    spec.q = 0.45;
    spec.noise_sd = 2.0;
    spec.seed = 987;
    const auto back = ScenarioSpec::from_json(spec.to_json());
    CHECK(back.scenario == Scenario::B);
    CHECK(back.n == 123);
    CHECK(back.sizes.sizes == spec.sizes.sizes);
    CHECK(back.sizes.probs == spec.sizes.probs);
    CHECK(back.q == 0.45);
    CHECK(back.noise_sd == 2.0);
    CHECK(back.seed == 987);
    CHECK_THROWS_AS(ScenarioSpec::from_json(nlohmann::json{{"scenario", "custom"}}),
                    ValidationError);
}

TEST_CASE("replication failures above one percent abort") {
    ScenarioSpec spec;
    spec.n = 10;
    spec.seed = 161;
    ReplicationProtocol protocol;
    protocol.kind = ReplicationProtocol::Kind::Evaluate;
    protocol.policy = Policy::constant(1);
    protocol.estimators = {"poly:20"};  // beta exceeds m_max = 15 on every rep
    CHECK_THROWS_AS(run_replications(spec, protocol, 3, 1), FitError);
}
