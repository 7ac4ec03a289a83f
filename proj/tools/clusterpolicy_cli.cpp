// Command-line front end: dataset generation, policy evaluation, policy
// learning, the replication harness, and cross-fitted evaluation.

#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "clusterpolicy/clusterpolicy.hpp"

namespace cp = clusterpolicy;

namespace {

std::vector<double> parse_double_list(const std::string& csv) {
    std::vector<double> out;
    std::stringstream ss(csv);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) out.push_back(std::stod(item));
    }
    return out;
}

std::vector<int> parse_int_list(const std::string& csv) {
    std::vector<int> out;
    for (double v : parse_double_list(csv)) out.push_back(static_cast<int>(v));
    return out;
}

nlohmann::json read_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw cp::ValidationError("cannot open '" + path + "'");
    nlohmann::json j;
    in >> j;
    return j;
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path);
    if (!out) throw cp::ValidationError("cannot open '" + path + "' for writing");
    out << text;
}

/// Propensity source: "const:<q>", "column", "fit", or a JSON model file.
cp::PropensityModel resolve_propensity(const std::string& source, double eta,
                                       const cp::ClusterDataset& ds) {
    if (source.rfind("const:", 0) == 0)
        return cp::PropensityModel::known_constant(std::stod(source.substr(6)), eta);
    if (source == "column") {
        if (!ds.has_pscores())
            throw cp::ValidationError("propensity source 'column' needs an e1 column");
        return cp::PropensityModel::known_table(eta);
    }
    if (source == "fit") {
        cp::PropensityFitConfig cfg;
        cfg.eta = eta;
        return cp::fit_propensity(ds, cfg);
    }
    return cp::PropensityModel::from_json(read_json_file(source));
}

cp::Policy load_policy(const std::string& path) {
    return cp::Policy::from_json(read_json_file(path));
}

cp::ReplicationProtocol protocol_from_json(const nlohmann::json& j) {
    cp::ReplicationProtocol protocol;
    const std::string type = j.at("type").get<std::string>();
    if (type == "evaluate") {
        protocol.kind = cp::ReplicationProtocol::Kind::Evaluate;
        protocol.policy = cp::Policy::from_json(j.at("policy"));
        protocol.estimators = j.at("estimators").get<std::vector<std::string>>();
    } else if (type == "learn") {
        protocol.kind = cp::ReplicationProtocol::Kind::Learn;
        protocol.oracle_clusters = j.value("oracle_clusters", 10000);
        for (const auto& jl : j.at("learners")) {
            cp::LearnerConfig learner;
            learner.spec.objective = jl.value("objective", std::string("addipw"));
            learner.label = jl.value("label", "learn-" + learner.spec.objective);
            learner.method = jl.value("method", std::string("surrogate"));
            learner.spec.restarts = jl.value("restarts", 20);
            learner.spec.surrogate_temperature = jl.value("temperature", 1.0);
            learner.spec.cost = jl.value("cost", 0.0);
            learner.spec.coefficient_box = jl.value("box", 10.0);
            protocol.learners.push_back(std::move(learner));
        }
    } else {
        throw cp::ValidationError("protocol type must be 'evaluate' or 'learn'");
    }
    return protocol;
}

int run(int argc, char** argv) {
    CLI::App app{"Policy evaluation and learning under clustered interference"};
    app.require_subcommand(1);

    // ---- generate ----
    auto* gen = app.add_subcommand("generate", "Write a synthetic scenario dataset as CSV");
    std::string gen_scenario = "A", gen_sizes = "5,10,15", gen_size_probs, gen_out;
    int gen_n = 100;
    std::uint64_t gen_seed = 0;
    double gen_q = 0.3, gen_noise = 1.0;
    gen->add_option("--scenario", gen_scenario, "A or B")->check(CLI::IsMember({"A", "B"}));
    gen->add_option("--n", gen_n, "number of clusters")->required();
    gen->add_option("--seed", gen_seed, "root seed");
    gen->add_option("--q", gen_q, "Bernoulli treatment probability");
    gen->add_option("--sizes", gen_sizes, "cluster sizes, comma separated");
    gen->add_option("--size-probs", gen_size_probs, "size probabilities, comma separated");
    gen->add_option("--noise-sd", gen_noise, "outcome noise standard deviation");
    gen->add_option("--out", gen_out, "output CSV path")->required();

    // ---- evaluate ----
    auto* eval = app.add_subcommand("evaluate", "Estimate the value of a policy on a dataset");
    std::string eval_data, eval_policy, eval_estimator = "addipw", eval_prop = "column",
                eval_out, eval_basis = "unit-means";
    double eval_eta = 0.01, eval_ridge = 1e-4;
    int eval_dr_folds = 0;
    std::uint64_t eval_dr_seed = 0;
    eval->add_option("--data", eval_data, "dataset CSV")->required();
    eval->add_option("--policy", eval_policy, "policy JSON file")->required();
    eval->add_option("--estimator", eval_estimator,
                     "ipw | noint | addipw | addipw-matrix | poly:<beta> | addipw-cost:<c> | dr");
    eval->add_option("--propensity", eval_prop, "const:<q> | column | fit | <model.json>");
    eval->add_option("--eta", eval_eta, "positivity floor");
    eval->add_option("--dr-basis", eval_basis, "dr outcome basis: intercept | unit | unit-means")
        ->check(CLI::IsMember({"intercept", "unit", "unit-means"}));
    eval->add_option("--dr-ridge", eval_ridge, "dr outcome-model ridge penalty");
    eval->add_option("--dr-folds", eval_dr_folds,
                     "cross-fit the dr outcome model with this many folds (0 = off)");
    eval->add_option("--dr-seed", eval_dr_seed, "fold-shuffle seed for --dr-folds");
    eval->add_option("--out", eval_out, "write the estimate JSON here (default stdout)");

    // ---- learn ----
    auto* learn = app.add_subcommand("learn", "Learn a linear-threshold policy");
    std::string learn_data, learn_objective = "addipw", learn_method = "surrogate",
                learn_prop = "column", learn_out;
    int learn_restarts = 20;
    std::uint64_t learn_seed = 0;
    double learn_cost = 0.0, learn_eta = 0.01, learn_temperature = 1.0, learn_box = 10.0;
    learn->add_option("--data", learn_data, "dataset CSV")->required();
    learn->add_option("--objective", learn_objective, "addipw | noint | ipw");
    learn->add_option("--method", learn_method, "exact | surrogate")
        ->check(CLI::IsMember({"exact", "surrogate"}));
    learn->add_option("--restarts", learn_restarts, "surrogate restarts");
    learn->add_option("--seed", learn_seed, "restart seed");
    learn->add_option("--cost", learn_cost, "treatment cost penalty");
    learn->add_option("--temperature", learn_temperature, "surrogate temperature");
    learn->add_option("--box", learn_box, "coefficient box on standardized covariates");
    learn->add_option("--propensity", learn_prop, "const:<q> | column | fit | <model.json>");
    learn->add_option("--eta", learn_eta, "positivity floor");
    learn->add_option("--out", learn_out, "write the learned policy JSON here")->required();

    // ---- simulate ----
    auto* sim = app.add_subcommand("simulate", "Run a seeded replication study from a config");
    std::string sim_config, sim_out;
    int sim_threads = 1;
    sim->add_option("--config", sim_config, "config JSON file")->required();
    sim->add_option("--threads", sim_threads, "worker threads");
    sim->add_option("--out", sim_out, "output prefix (.json and .csv)")->required();

    // ---- crossfit ----
    auto* cf = app.add_subcommand("crossfit", "Cross-fitted cost-penalized policy evaluation");
    std::string cf_data, cf_prop = "column", cf_costs = "0.15,0.20,0.25",
                cf_objective = "addipw", cf_method = "surrogate", cf_out;
    int cf_k = 5, cf_restarts = 20;
    std::uint64_t cf_seed = 0;
    double cf_eta = 0.01;
    cf->add_option("--data", cf_data, "dataset CSV")->required();
    cf->add_option("--propensity", cf_prop, "const:<q> | column | fit | <model.json>");
    cf->add_option("--k", cf_k, "number of folds");
    cf->add_option("--costs", cf_costs, "cost grid, comma separated");
    cf->add_option("--objective", cf_objective, "addipw | noint | ipw");
    cf->add_option("--method", cf_method, "exact | surrogate")
        ->check(CLI::IsMember({"exact", "surrogate"}));
    cf->add_option("--restarts", cf_restarts, "surrogate restarts");
    cf->add_option("--seed", cf_seed, "fold-shuffle seed");
    cf->add_option("--eta", cf_eta, "positivity floor");
    cf->add_option("--out", cf_out, "output prefix (.json, .csv, _coefficients.csv)")
        ->required();

    CLI11_PARSE(app, argc, argv);

    if (gen->parsed()) {
        cp::ScenarioSpec spec;
        spec.scenario = gen_scenario == "A" ? cp::Scenario::A : cp::Scenario::B;
        spec.n = gen_n;
        spec.seed = gen_seed;
        spec.q = gen_q;
        spec.noise_sd = gen_noise;
        spec.sizes.sizes = parse_int_list(gen_sizes);
        if (!gen_size_probs.empty()) spec.sizes.probs = parse_double_list(gen_size_probs);
        cp::save_dataset(cp::generate_dataset(spec), gen_out);
        std::cout << "wrote " << gen_out << " (" << spec.n << " clusters)\n";
        return 0;
    }

    if (eval->parsed()) {
        const auto ds = cp::load_dataset(eval_data);
        const auto model = resolve_propensity(eval_prop, eval_eta, ds);
        const auto policy = load_policy(eval_policy);
        const auto est = cp::evaluate_estimator(ds, model, eval_estimator, policy);
        const std::string text = est.to_json().dump(2) + "\n";
        if (eval_out.empty())
            std::cout << text;
        else
            write_text(eval_out, text);
        return 0;
    }

    if (learn->parsed()) {
        const auto ds = cp::load_dataset(learn_data);
        const auto model = resolve_propensity(learn_prop, learn_eta, ds);
        cp::LearnedPolicy learned;
        if (learn_method == "exact") {
            learned = cp::learn_linear_exact(ds, model, learn_objective, learn_cost);
        } else {
            cp::LearnSpec spec;
            spec.objective = learn_objective;
            spec.restarts = learn_restarts;
            spec.seed = learn_seed;
            spec.cost = learn_cost;
            spec.surrogate_temperature = learn_temperature;
            spec.coefficient_box = learn_box;
            learned = cp::learn_surrogate(ds, model, spec);
        }
        write_text(learn_out, learned.to_json().dump(2) + "\n");
        std::cout << "objective " << learned.objective_value << " method " << learned.method
                  << " -> " << learn_out << "\n";
        return 0;
    }

    if (sim->parsed()) {
        const auto config = read_json_file(sim_config);
        const auto spec = cp::ScenarioSpec::from_json(config);
        const int reps = config.value("reps", 100);
        if (config.at("protocol").at("type") == "regret") {
            const auto& jp = config.at("protocol");
            cp::LearnerConfig learner;
            learner.spec.objective = jp.value("objective", std::string("addipw"));
            learner.label = "learn-" + learner.spec.objective;
            learner.spec.restarts = jp.value("restarts", 10);
            learner.method = jp.value("method", std::string("surrogate"));
            std::optional<double> oracle_value;
            if (jp.contains("oracle_value")) oracle_value = jp.at("oracle_value").get<double>();
            const auto curve = cp::regret_curve(spec, learner,
                                                jp.at("n_grid").get<std::vector<int>>(), reps,
                                                sim_threads, oracle_value);
            nlohmann::json out;
            out["oracle_value"] = curve.oracle_value;
            out["slope"] = curve.slope;
            out["low_reps_warning"] = curve.low_reps_warning;
            out["points"] = nlohmann::json::array();
            std::ostringstream csv;
            csv << "n,mean_regret,se,reps\n";
            for (const auto& pt : curve.points) {
                out["points"].push_back(nlohmann::json{{"n", pt.n},
                                                       {"mean_regret", pt.mean_regret},
                                                       {"se", pt.se},
                                                       {"reps", pt.reps}});
                csv << pt.n << ',' << cp::detail::format_double(pt.mean_regret) << ','
                    << cp::detail::format_double(pt.se) << ',' << pt.reps << '\n';
            }
            write_text(sim_out + ".json", out.dump(2) + "\n");
            write_text(sim_out + ".csv", csv.str());
        } else {
            const auto protocol = protocol_from_json(config.at("protocol"));
            const auto report = cp::run_replications(spec, protocol, reps, sim_threads);
            write_text(sim_out + ".json", report.to_json().dump(2) + "\n");
            write_text(sim_out + ".csv", report.to_csv());
        }
        std::cout << "wrote " << sim_out << ".json and " << sim_out << ".csv\n";
        return 0;
    }

    if (cf->parsed()) {
        const auto ds = cp::load_dataset(cf_data);
        const auto model = resolve_propensity(cf_prop, cf_eta, ds);
        cp::CrossfitSpec spec;
        spec.K = cf_k;
        spec.cost_grid = parse_double_list(cf_costs);
        spec.method = cf_method;
        spec.seed = cf_seed;
        spec.learner.objective = cf_objective;
        spec.learner.restarts = cf_restarts;
        const auto result = cp::crossfit_evaluate(ds, model, spec);
        write_text(cf_out + ".json", result.to_json().dump(2) + "\n");

        std::ostringstream values;
        values << "cost,value,treated_proportion\n";
        for (const auto& row : result.rows) {
            values << cp::detail::format_double(row.cost) << ','
                   << cp::detail::format_double(row.value) << ','
                   << cp::detail::format_double(row.treated_proportion) << '\n';
        }
        write_text(cf_out + ".csv", values.str());

        std::ostringstream coefs;
        coefs << "cost,fold";
        for (int k = 0; k <= ds.p; ++k) coefs << ",c" << k;
        coefs << '\n';
        for (const auto& row : result.rows) {
            for (const auto& fold : row.folds) {
                coefs << cp::detail::format_double(row.cost) << ',' << fold.fold;
                for (int k = 0; k < fold.normalized_coefficients.size(); ++k)
                    coefs << ',' << cp::detail::format_double(fold.normalized_coefficients[k]);
                coefs << '\n';
            }
        }
        write_text(cf_out + "_coefficients.csv", coefs.str());
        std::cout << "wrote " << cf_out << ".json, .csv and _coefficients.csv\n";
        return 0;
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const std::exception& ex) {
        std::cerr << "error: " << ex.what() << "\n";
        return 1;
    }
}
