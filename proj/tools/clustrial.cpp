#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "clustrial/errors.hpp"
#include "clustrial/harness.hpp"

namespace {

using namespace clustrial;

std::uint64_t seed_override(std::uint64_t current) {
    const char* env = std::getenv("CLUSTRIAL_SEED");
    if (!env) return current;
    try {
        return std::stoull(env);
    } catch (...) {
        throw ConfigError("CLUSTRIAL_SEED is not a valid integer");
    }
}

int run_simulate(const std::string& config_path, int jobs, const std::string& out_override) {
    ScenarioConfig config = load_scenario_config(config_path);
    config.master_seed = seed_override(config.master_seed);
    const std::string out_dir = out_override.empty() ? config.out_dir : out_override;
    std::filesystem::create_directories(out_dir);

    const ScenarioResult result = run_scenario(config, jobs);
    print_scenario_table(result, std::cout);
    const std::string base = out_dir + "/" + result.id;
    write_scenario_csv(result, base + ".csv");
    write_scenario_json(result, base + ".json");
    std::cout << "\nwrote " << base << ".csv and " << base << ".json\n";

    if (result.worst_failure_fraction > config.max_failure_fraction) {
        std::cerr << "failure fraction " << result.worst_failure_fraction
                  << " exceeds the allowed " << config.max_failure_fraction << "\n";
        return 4;
    }
    return 0;
}

int run_analyze(const std::string& csv_path, const std::string& config_path,
                bool cluster_randomized, bool hierarchical, const std::string& weights,
                double level, const std::string& out_dir, const std::string& estimator,
                int couple_arm_draws, const CsvSchema& schema_override) {
    AnalysisConfig config = load_analysis_config(config_path);
    if (cluster_randomized) config.cluster_randomized = true;
    if (hierarchical) config.hierarchical = true;
    if (couple_arm_draws >= 0) config.couple_arm_draws = couple_arm_draws > 0;
    if (!weights.empty())
        config.scheme = weights == "equal-patients" ? WeightScheme::equal_patients
                                                    : WeightScheme::equal_centers;
    if (level > 0.0) config.level = level;
    if (!estimator.empty()) config.estimator = parse_roster_estimator(estimator);
    config.seed = seed_override(config.seed);
    if (!schema_override.outcome.empty()) config.columns.outcome = schema_override.outcome;
    if (!schema_override.treatment.empty()) config.columns.treatment = schema_override.treatment;
    if (!schema_override.center.empty()) config.columns.center = schema_override.center;
    if (!schema_override.cluster.empty()) config.columns.cluster = schema_override.cluster;
    if (!schema_override.covariates.empty())
        config.columns.covariates = schema_override.covariates;

    const TrialDataset data = load_csv(csv_path, config.columns, config.family);
    const AnalysisReport report = analyze(data, config);
    print_analysis_report(report, std::cout);
    if (!out_dir.empty()) {
        std::filesystem::create_directories(out_dir);
        const std::string path = out_dir + "/analysis.json";
        write_analysis_json(report, path);
        std::cout << "\nwrote " << path << "\n";
    }
    return 0;
}

int run_truth(const std::string& config_path) {
    ScenarioConfig config = load_scenario_config(config_path);
    config.master_seed = seed_override(config.master_seed);
    config.dgm.seed = config.master_seed;
    for (Estimand e : {Estimand::counterfactual_mean_treated,
                       Estimand::counterfactual_mean_control, Estimand::ate}) {
        const TrueEstimandValue t = true_estimand(config.dgm, e, config.scheme,
                                                  config.truth_draws);
        const char* name = e == Estimand::ate ? "ate"
                           : e == Estimand::counterfactual_mean_treated ? "cf_treated"
                                                                        : "cf_control";
        std::cout << name << " = " << t.value;
        if (t.closed_form)
            std::cout << " (closed form)";
        else
            std::cout << " (monte carlo, mc_se = " << t.mc_se << ")";
        std::cout << "\n";
    }
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"clustrial: AIPW estimation and inference for multi-center randomized trials"};
    app.require_subcommand(1);

    // analyze
    auto* analyze_cmd = app.add_subcommand("analyze", "Analyze a trial CSV");
    std::string csv_path, analyze_config, weights, out_dir, estimator;
    bool cluster_randomized = false, hierarchical = false;
    double level = -1.0;
    clustrial::CsvSchema schema_override;
    analyze_cmd->add_option("csv", csv_path, "input CSV file")->required();
    analyze_cmd->add_option("--config", analyze_config, "analysis config JSON")->required();
    analyze_cmd->add_flag("--cluster-randomized", cluster_randomized,
                          "treatment assigned at cluster level");
    analyze_cmd->add_flag("--hierarchical", hierarchical,
                          "add the hierarchical (center+cluster) variance");
    analyze_cmd->add_option("--weights", weights, "equal-centers or equal-patients")
        ->check(CLI::IsMember({"equal-centers", "equal-patients"}));
    int couple_arm_draws = -1; // -1 = use the config value
    analyze_cmd
        ->add_flag("--couple-arm-draws{1},--no-couple-arm-draws{0}", couple_arm_draws,
                   "share sampled random-effect draws between the two arms (default on)")
        ->default_val(-1);
    analyze_cmd->add_option("--level", level, "confidence level (default from config)");
    analyze_cmd->add_option("--out", out_dir, "directory for the JSON report");
    analyze_cmd->add_option("--estimator", estimator, "roster estimator name");
    analyze_cmd->add_option("--col-outcome", schema_override.outcome, "outcome column");
    analyze_cmd->add_option("--col-treatment", schema_override.treatment, "treatment column");
    analyze_cmd->add_option("--col-center", schema_override.center, "center column");
    analyze_cmd->add_option("--col-cluster", schema_override.cluster, "cluster column");
    analyze_cmd->add_option("--col-covariate", schema_override.covariates,
                            "covariate column (repeatable)");

    // simulate
    auto* simulate_cmd = app.add_subcommand("simulate", "Run a Monte Carlo scenario");
    std::string sim_config, sim_out;
    int jobs = 1;
    simulate_cmd->add_option("--config", sim_config, "scenario config JSON")->required();
    simulate_cmd->add_option("--jobs", jobs, "worker threads (default 1)");
    simulate_cmd->add_option("--out", sim_out, "output directory (overrides config)");

    // truth
    auto* truth_cmd = app.add_subcommand("truth", "Print the true estimands of a scenario");
    std::string truth_config;
    truth_cmd->add_option("--config", truth_config, "scenario config JSON")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (app.got_subcommand(analyze_cmd))
            return run_analyze(csv_path, analyze_config, cluster_randomized, hierarchical,
                               weights, level, out_dir, estimator, couple_arm_draws,
                               schema_override);
        if (app.got_subcommand(simulate_cmd)) return run_simulate(sim_config, jobs, sim_out);
        if (app.got_subcommand(truth_cmd)) return run_truth(truth_config);
    } catch (const clustrial::ConfigError& ex) {
        std::cerr << "config error: " << ex.what() << "\n";
        return 2;
    } catch (const clustrial::DataError& ex) {
        std::cerr << "data error: " << ex.what() << "\n";
        return 3;
    } catch (const clustrial::FitError& ex) {
        std::cerr << "fit error: " << ex.what() << "\n";
        return 3;
    } catch (const std::exception& ex) {
        std::cerr << "error: " << ex.what() << "\n";
        return 1;
    }
    return 0;
}
