#pragma once

#include <atomic>
#include <cmath>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "clusterpolicy/csv.hpp"
#include "clusterpolicy/data.hpp"
#include "clusterpolicy/errors.hpp"
#include "clusterpolicy/evaluate.hpp"
#include "clusterpolicy/learning.hpp"
#include "clusterpolicy/nuisance.hpp"
#include "clusterpolicy/policy.hpp"
#include "clusterpolicy/propensity.hpp"
#include "clusterpolicy/rng.hpp"

namespace clusterpolicy {

// ============================================================================
// Synthetic data generation and the Monte-Carlo replication harness.
//
// Scenario A draws Y_ij ~ N(mu_ij, sd^2) with
//   mu_ij = (X1 + 0.5 X2 - X3 - 0.5 X4) A_ij
//         + 1.5 * sum_{j' != j} (X_j'3 + X_j'4) A_ij' / (M-1)
//         + 0.2 X2 + 0.2 X3,
// which is additive in the cluster treatment vector. Scenario B adds the
// non-additive interaction -0.5 (X1^2 + X2^2) A_ij Abar_(-j).
// ============================================================================

enum class Scenario { A, B, Custom };

struct SizeDistribution {
    std::vector<int> sizes{5, 10, 15};
    std::vector<double> probs;  // empty means uniform

    void validate() const {
        detail::require(!sizes.empty(), "size distribution must list at least one size");
        for (int m : sizes) detail::require(m >= 1, "cluster sizes must be >= 1");
        if (!probs.empty()) {
            detail::require(probs.size() == sizes.size(),
                            "size probabilities must match the size list");
            double total = 0.0;
            for (double q : probs) {
                detail::require(q >= 0.0, "size probabilities must be non-negative");
                total += q;
            }
            detail::require(std::abs(total - 1.0) < 1e-9, "size probabilities must sum to 1");
        }
    }

    int sample(Rng& rng) const {
        if (sizes.size() == 1) return sizes[0];
        const double u = rng.uniform01();
        double acc = 0.0;
        for (std::size_t k = 0; k < sizes.size(); ++k) {
            acc += probs.empty() ? 1.0 / static_cast<double>(sizes.size()) : probs[k];
            if (u < acc) return sizes[k];
        }
        return sizes.back();
    }
};

struct ScenarioSpec {
    Scenario scenario = Scenario::A;
    int n = 100;
    SizeDistribution sizes;
    int p = 4;
    double q = 0.3;  // Bernoulli treatment probability
    double noise_sd = 1.0;
    std::uint64_t seed = 0;

    // Custom scenario hooks: conditional mean of Y_ij given (X, a), and an
    // optional per-entry covariate sampler (standard normal otherwise).
    std::function<double(const Eigen::MatrixXd&, const Eigen::VectorXi&, int)> custom_mean;
    std::function<double(Rng&)> covariate_sampler;

    void validate() const {
        detail::require(n >= 1, "spec.n must be >= 1");
        detail::require(q > 0.0 && q < 1.0, "spec.q must lie in (0, 1)");
        detail::require(noise_sd >= 0.0, "noise sd must be non-negative");
        sizes.validate();
        if (scenario != Scenario::Custom)
            detail::require(p == 4, "scenarios A and B use exactly 4 covariates");
        else
            detail::require(static_cast<bool>(custom_mean),
                            "custom scenario requires a mean function");
    }

    nlohmann::json to_json() const {
        return nlohmann::json{{"scenario", scenario == Scenario::A ? "A"
                                           : scenario == Scenario::B ? "B"
                                                                     : "custom"},
                              {"n", n},
                              {"sizes", sizes.sizes},
                              {"size_probs", sizes.probs},
                              {"p", p},
                              {"q", q},
                              {"noise_sd", noise_sd},
                              {"seed", seed}};
    }

    static ScenarioSpec from_json(const nlohmann::json& j) {
        ScenarioSpec spec;
        const std::string s = j.value("scenario", "A");
        if (s == "A")
            spec.scenario = Scenario::A;
        else if (s == "B")
            spec.scenario = Scenario::B;
        else
            throw ValidationError("config scenario must be 'A' or 'B'");
        spec.n = j.value("n", 100);
        if (j.contains("sizes")) spec.sizes.sizes = j.at("sizes").get<std::vector<int>>();
        if (j.contains("size_probs"))
            spec.sizes.probs = j.at("size_probs").get<std::vector<double>>();
        spec.p = j.value("p", 4);
        spec.q = j.value("q", 0.3);
        spec.noise_sd = j.value("noise_sd", 1.0);
        spec.seed = j.value("seed", static_cast<std::uint64_t>(0));
        spec.validate();
        return spec;
    }
};

// ----------------------------------------------------------------------------
// Conditional mean of Y_ij given covariates and a treatment vector.
// ----------------------------------------------------------------------------
inline double conditional_mean(const ScenarioSpec& spec, const Eigen::MatrixXd& X,
                               const Eigen::VectorXi& a, int j) {
    if (spec.scenario == Scenario::Custom) return spec.custom_mean(X, a, j);
    const int m = static_cast<int>(X.rows());
    const double direct =
        (X(j, 0) + 0.5 * X(j, 1) - X(j, 2) - 0.5 * X(j, 3)) * static_cast<double>(a[j]);
    double spill = 0.0;
    double abar_others = 0.0;
    if (m > 1) {
        for (int k = 0; k < m; ++k) {
            if (k == j) continue;
            spill += (X(k, 2) + X(k, 3)) * static_cast<double>(a[k]);
            abar_others += static_cast<double>(a[k]);
        }
        spill *= 1.5 / (m - 1);
        abar_others /= (m - 1);
    }
    double mu = direct + spill + 0.2 * X(j, 1) + 0.2 * X(j, 2);
    if (spec.scenario == Scenario::B) {
        mu += -0.5 * (X(j, 0) * X(j, 0) + X(j, 1) * X(j, 1)) * static_cast<double>(a[j]) *
              abar_others;
    }
    return mu;
}

namespace detail {

inline Cluster generate_cluster(const ScenarioSpec& spec, Rng& rng, int index,
                                const Policy* forced_policy, bool with_noise) {
    Cluster c;
    c.id = std::to_string(index + 1);
    const int m = spec.sizes.sample(rng);
    c.covariates.resize(m, spec.p);
    for (int j = 0; j < m; ++j)
        for (int k = 0; k < spec.p; ++k)
            c.covariates(j, k) =
                spec.covariate_sampler ? spec.covariate_sampler(rng) : rng.normal();
    c.treatments.resize(m);
    if (forced_policy) {
        for (int j = 0; j < m; ++j) c.treatments[j] = forced_policy->decide(c.covariates.row(j));
    } else {
        for (int j = 0; j < m; ++j) c.treatments[j] = rng.bernoulli(spec.q);
    }
    c.outcomes.resize(m);
    for (int j = 0; j < m; ++j) {
        const double mu = conditional_mean(spec, c.covariates, c.treatments, j);
        c.outcomes[j] = with_noise ? mu + spec.noise_sd * rng.normal() : mu;
    }
    c.pscores = Eigen::VectorXd::Constant(m, spec.q);
    return c;
}

}  // namespace detail

inline ClusterDataset generate_dataset(const ScenarioSpec& spec) {
    spec.validate();
    Rng rng(spec.seed);
    std::vector<Cluster> clusters;
    clusters.reserve(static_cast<std::size_t>(spec.n));
    for (int i = 0; i < spec.n; ++i)
        clusters.push_back(detail::generate_cluster(spec, rng, i, nullptr, true));
    return ClusterDataset::from_clusters(std::move(clusters));
}

/// Intervention hook: treatments are set to pi(X) instead of Bernoulli draws.
/// Fresh covariate and noise draws, never reused from another dataset.
inline ClusterDataset generate_dataset_with_policy(const ScenarioSpec& spec, const Policy& policy,
                                                   bool with_noise = true) {
    spec.validate();
    Rng rng(spec.seed);
    std::vector<Cluster> clusters;
    clusters.reserve(static_cast<std::size_t>(spec.n));
    for (int i = 0; i < spec.n; ++i)
        clusters.push_back(detail::generate_cluster(spec, rng, i, &policy, with_noise));
    return ClusterDataset::from_clusters(std::move(clusters));
}

// ----------------------------------------------------------------------------
// Monte-Carlo approximation of the true policy value: fresh clusters with
// treatments forced to pi(X), averaging the noiseless conditional means
// (noise is zero-mean; a flag adds it back for SE studies).
// ----------------------------------------------------------------------------
struct OracleEvaluation {
    double value = 0.0;
    double se = 0.0;
    double treated_fraction = 0.0;
    int clusters = 0;
};

inline OracleEvaluation oracle_evaluate(const ScenarioSpec& spec, const Policy& policy,
                                        int n_oracle, bool include_noise = false) {
    detail::require(n_oracle >= 1, "oracle sample needs at least one cluster");
    ScenarioSpec oracle_spec = spec;
    oracle_spec.n = n_oracle;
    Rng rng(oracle_spec.seed);
    OracleEvaluation out;
    out.clusters = n_oracle;
    double sum = 0.0, sumsq = 0.0, treated = 0.0;
    for (int i = 0; i < n_oracle; ++i) {
        const Cluster c = detail::generate_cluster(oracle_spec, rng, i, &policy, include_noise);
        const double v = c.mean_outcome();
        sum += v;
        sumsq += v * v;
        treated += c.treated_fraction();
    }
    out.value = sum / n_oracle;
    out.treated_fraction = treated / n_oracle;
    if (n_oracle > 1) {
        const double var = (sumsq - sum * sum / n_oracle) / (n_oracle - 1);
        out.se = std::sqrt(std::max(var, 0.0) / n_oracle);
    }
    return out;
}

inline double true_value_mc(const ScenarioSpec& spec, const Policy& policy, int n_oracle,
                            bool include_noise = false) {
    return oracle_evaluate(spec, policy, n_oracle, include_noise).value;
}

/// True additive outcome coefficients of Scenario A, for oracle comparisons.
struct ScenarioATrueOutcome final : GFunction {
    Eigen::MatrixXd eval(const Cluster& c) const override {
        const int m = c.size();
        detail::require(c.dim() >= 4, "scenario A outcome model needs 4 covariates");
        Eigen::MatrixXd G = Eigen::MatrixXd::Zero(m, m + 1);
        const auto& X = c.covariates;
        for (int j = 0; j < m; ++j) {
            G(j, 0) = 0.2 * X(j, 1) + 0.2 * X(j, 2);
            G(j, j + 1) = X(j, 0) + 0.5 * X(j, 1) - X(j, 2) - 0.5 * X(j, 3);
            if (m > 1) {
                for (int k = 0; k < m; ++k) {
                    if (k == j) continue;
                    G(j, k + 1) = 1.5 * (X(k, 2) + X(k, 3)) / (m - 1);
                }
            }
        }
        return G;
    }
};

// ============================================================================
// Replication harness. One root seed spawns an independent stream per
// replication, so serial and parallel runs produce identical records.
// ============================================================================

struct LearnerConfig {
    std::string label;  // record tag
    std::string method = "surrogate";  // surrogate | exact
    LearnSpec spec;
};

struct ReplicationProtocol {
    enum class Kind { Evaluate, Learn };
    Kind kind = Kind::Evaluate;

    // evaluate: estimate V(policy) on each replication's dataset
    Policy policy;
    std::vector<std::string> estimators;

    // learn: fit each learner, then oracle-evaluate the learned policy
    std::vector<LearnerConfig> learners;
    int oracle_clusters = 10000;

    int tag_count() const {
        return kind == Kind::Evaluate ? static_cast<int>(estimators.size())
                                      : static_cast<int>(learners.size());
    }
};

struct RepRecord {
    int rep = 0;
    std::uint64_t seed = 0;
    std::string tag;
    double value = std::numeric_limits<double>::quiet_NaN();
    double treated_frac = std::numeric_limits<double>::quiet_NaN();
    bool failed = false;
    std::string error;
};

struct RepSummary {
    std::string tag;
    int reps = 0;
    double mean = 0.0, sd = 0.0;
    double q05 = 0.0, q25 = 0.0, median = 0.0, q75 = 0.0, q95 = 0.0;
    bool high_variance = false;
};

struct ReplicationReport {
    ScenarioSpec spec;
    int reps = 0;
    std::vector<RepRecord> records;     // rep-major, tag-minor order
    std::vector<RepSummary> summaries;  // one per tag

    const RepSummary& summary(const std::string& tag) const {
        for (const auto& s : summaries)
            if (s.tag == tag) return s;
        throw ValidationError("no summary for tag '" + tag + "'");
    }

    nlohmann::json to_json() const {
        nlohmann::json recs = nlohmann::json::array();
        for (const auto& r : records) {
            nlohmann::json jr{{"rep", r.rep},       {"seed", r.seed},
                              {"tag", r.tag},       {"value", r.value},
                              {"treated_frac", r.treated_frac}, {"failed", r.failed}};
            if (r.failed) jr["error"] = r.error;
            recs.push_back(jr);
        }
        nlohmann::json sums = nlohmann::json::array();
        for (const auto& s : summaries) {
            sums.push_back(nlohmann::json{{"tag", s.tag},
                                          {"reps", s.reps},
                                          {"mean", s.mean},
                                          {"sd", s.sd},
                                          {"q05", s.q05},
                                          {"q25", s.q25},
                                          {"median", s.median},
                                          {"q75", s.q75},
                                          {"q95", s.q95},
                                          {"high_variance", s.high_variance}});
        }
        return nlohmann::json{
            {"spec", spec.to_json()}, {"reps", reps}, {"records", recs}, {"summaries", sums}};
    }

    /// Tidy CSV: rep,tag,value,treated_frac
    std::string to_csv() const {
        std::ostringstream out;
        out << "rep,tag,value,treated_frac\n";
        for (const auto& r : records) {
            out << r.rep << ',' << r.tag << ',';
            if (r.failed)
                out << "nan,nan";
            else
                out << detail::format_double(r.value) << ','
                    << detail::format_double(r.treated_frac);
            out << '\n';
        }
        return out.str();
    }
};

namespace detail {

inline double quantile_sorted(const std::vector<double>& sorted, double q) {
    if (sorted.empty()) return std::numeric_limits<double>::quiet_NaN();
    const double h = q * (static_cast<double>(sorted.size()) - 1.0);
    const std::size_t lo = static_cast<std::size_t>(std::floor(h));
    const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
    return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

inline void run_one_replication(const ScenarioSpec& spec, const ReplicationProtocol& protocol,
                                int rep, RepRecord* slot) {
    Rng rep_rng = Rng(spec.seed).child(static_cast<std::uint64_t>(rep));
    ScenarioSpec rep_spec = spec;
    rep_spec.seed = rep_rng.child(0).seed();
    const auto model = PropensityModel::known_constant(spec.q);
    const int T = protocol.tag_count();

    ClusterDataset ds = generate_dataset(rep_spec);
    if (protocol.kind == ReplicationProtocol::Kind::Evaluate) {
        double treated = 0.0;
        for (const auto& c : ds.clusters)
            treated += policy_assignment(protocol.policy, c).bits.cast<double>().mean();
        treated /= ds.n();
        for (int t = 0; t < T; ++t) {
            RepRecord& rec = slot[t];
            rec.rep = rep;
            rec.seed = rep_spec.seed;
            rec.tag = protocol.estimators[static_cast<std::size_t>(t)];
            try {
                rec.value = evaluate_estimator(ds, model, rec.tag, protocol.policy).value;
                rec.treated_frac = treated;
            } catch (const std::exception& ex) {
                rec.failed = true;
                rec.error = ex.what();
            }
        }
    } else {
        for (int t = 0; t < T; ++t) {
            const auto& learner = protocol.learners[static_cast<std::size_t>(t)];
            RepRecord& rec = slot[t];
            rec.rep = rep;
            rec.seed = rep_spec.seed;
            rec.tag = learner.label;
            try {
                LearnSpec ls = learner.spec;
                ls.seed = rep_rng.child(10 + static_cast<std::uint64_t>(t)).seed();
                LearnedPolicy learned =
                    learner.method == "exact"
                        ? learn_linear_exact(ds, model, ls.objective, ls.cost)
                        : learn_surrogate(ds, model, ls);
                ScenarioSpec oracle_spec = spec;
                oracle_spec.seed = rep_rng.child(100 + static_cast<std::uint64_t>(t)).seed();
                const auto oe =
                    oracle_evaluate(oracle_spec, learned.policy, protocol.oracle_clusters);
                rec.value = oe.value;
                rec.treated_frac = oe.treated_fraction;
            } catch (const std::exception& ex) {
                rec.failed = true;
                rec.error = ex.what();
            }
        }
    }
}

}  // namespace detail

inline ReplicationReport run_replications(const ScenarioSpec& spec,
                                          const ReplicationProtocol& protocol, int reps,
                                          int threads = 1) {
    detail::require(reps >= 1, "reps must be >= 1");
    detail::require(protocol.tag_count() >= 1, "protocol lists no estimators or learners");
    ReplicationReport report;
    report.spec = spec;
    report.reps = reps;
    const int T = protocol.tag_count();
    report.records.resize(static_cast<std::size_t>(reps) * T);

    if (threads <= 1) {
        for (int rep = 0; rep < reps; ++rep)
            detail::run_one_replication(spec, protocol, rep,
                                        &report.records[static_cast<std::size_t>(rep) * T]);
    } else {
        std::atomic<int> next{0};
        auto worker = [&]() {
            for (;;) {
                const int rep = next.fetch_add(1);
                if (rep >= reps) return;
                detail::run_one_replication(spec, protocol, rep,
                                            &report.records[static_cast<std::size_t>(rep) * T]);
            }
        };
        std::vector<std::thread> pool;
        for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
    }

    int failures = 0;
    for (const auto& r : report.records)
        if (r.failed) ++failures;
    if (failures > 0 &&
        static_cast<double>(failures) > 0.01 * static_cast<double>(report.records.size())) {
        throw FitError(std::to_string(failures) + " of " + std::to_string(report.records.size()) +
                       " replication tasks failed (more than 1%); first error: " +
                       [&] {
                           for (const auto& r : report.records)
                               if (r.failed) return r.error;
                           return std::string();
                       }());
    }

    for (int t = 0; t < T; ++t) {
        RepSummary s;
        s.tag = protocol.kind == ReplicationProtocol::Kind::Evaluate
                    ? protocol.estimators[static_cast<std::size_t>(t)]
                    : protocol.learners[static_cast<std::size_t>(t)].label;
        std::vector<double> values;
        double sum = 0.0;
        for (int rep = 0; rep < reps; ++rep) {
            const auto& r = report.records[static_cast<std::size_t>(rep) * T + t];
            if (r.failed) continue;
            values.push_back(r.value);
            sum += r.value;
        }
        s.reps = static_cast<int>(values.size());
        if (s.reps > 0) {
            s.mean = sum / s.reps;
            double ss = 0.0;
            for (double v : values) ss += (v - s.mean) * (v - s.mean);
            s.sd = s.reps > 1 ? std::sqrt(ss / (s.reps - 1)) : 0.0;
            std::vector<double> sorted = values;
            std::sort(sorted.begin(), sorted.end());
            s.q05 = detail::quantile_sorted(sorted, 0.05);
            s.q25 = detail::quantile_sorted(sorted, 0.25);
            s.median = detail::quantile_sorted(sorted, 0.50);
            s.q75 = detail::quantile_sorted(sorted, 0.75);
            s.q95 = detail::quantile_sorted(sorted, 0.95);
        }
        s.high_variance = spec.n <= 50;
        report.summaries.push_back(std::move(s));
    }
    return report;
}

// ----------------------------------------------------------------------------
// Empirical regret scaling: mean regret against the (approximated) optimal
// value on a grid of sample sizes, plus the fitted log-log slope.
// ----------------------------------------------------------------------------
struct RegretPoint {
    int n = 0;
    double mean_regret = 0.0;
    double se = 0.0;
    int reps = 0;
};

struct RegretCurve {
    double oracle_value = 0.0;
    std::vector<RegretPoint> points;
    double slope = 0.0;
    bool low_reps_warning = false;
};

inline RegretCurve regret_curve(const ScenarioSpec& spec, const LearnerConfig& learner,
                                const std::vector<int>& n_grid, int reps, int threads = 1,
                                std::optional<double> oracle_value = std::nullopt) {
    detail::require(!n_grid.empty(), "n grid must be non-empty");
    RegretCurve curve;
    curve.low_reps_warning = reps < 20;

    if (oracle_value) {
        curve.oracle_value = *oracle_value;
    } else {
        // approximate pi* by training on a sample far larger than any grid
        // point, then score it against an even larger oracle draw; the proxy
        // must be much closer to optimal than the policies under study or its
        // own gap would eat the large-n regret
        ScenarioSpec big = spec;
        big.n = std::max(20000, 20 * *std::max_element(n_grid.begin(), n_grid.end()));
        big.seed = Rng(spec.seed).child(777).seed();
        const auto model = PropensityModel::known_constant(spec.q);
        LearnSpec ls = learner.spec;
        ls.seed = big.seed;
        ls.restarts = std::max(ls.restarts, 10);
        const auto big_ds = generate_dataset(big);
        const auto learned = learner.method == "exact"
                                 ? learn_linear_exact(big_ds, model, ls.objective, ls.cost)
                                 : learn_surrogate(big_ds, model, ls);
        ScenarioSpec oracle_spec = spec;
        oracle_spec.seed = Rng(spec.seed).child(778).seed();
        curve.oracle_value = oracle_evaluate(oracle_spec, learned.policy, 200000).value;
    }

    for (int n : n_grid) {
        ScenarioSpec point_spec = spec;
        point_spec.n = n;
        point_spec.seed = Rng(spec.seed).child(static_cast<std::uint64_t>(1000 + n)).seed();
        ReplicationProtocol protocol;
        protocol.kind = ReplicationProtocol::Kind::Learn;
        protocol.learners = {learner};
        const auto report = run_replications(point_spec, protocol, reps, threads);
        const auto& s = report.summaries.front();
        RegretPoint pt;
        pt.n = n;
        pt.reps = s.reps;
        pt.mean_regret = curve.oracle_value - s.mean;
        pt.se = s.reps > 0 ? s.sd / std::sqrt(static_cast<double>(s.reps)) : 0.0;
        curve.points.push_back(pt);
    }

    // least-squares slope of log regret on log n
    double sx = 0.0, sy = 0.0, sxx = 0.0, sxy = 0.0;
    const double k = static_cast<double>(curve.points.size());
    for (const auto& pt : curve.points) {
        const double x = std::log(static_cast<double>(pt.n));
        const double y = std::log(std::max(pt.mean_regret, 1e-12));
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
    }
    curve.slope = (k * sxy - sx * sy) / (k * sxx - sx * sx);
    return curve;
}

}  // namespace clusterpolicy
