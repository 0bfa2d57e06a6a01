#pragma once

#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "clustrial/dataset.hpp"
#include "clustrial/estimators.hpp"
#include "clustrial/simgen.hpp"
#include "clustrial/variance.hpp"

namespace clustrial {

struct ScenarioConfig {
    std::string id = "scenario";
    DgmSpec dgm;
    std::vector<RosterEstimator> estimators = {
        RosterEstimator::naive,        RosterEstimator::fixed,
        RosterEstimator::mixed_1c,     RosterEstimator::mixed_1c_sam,
        RosterEstimator::mixed_1Ac,    RosterEstimator::mixed_1Ac_sam,
    };
    bool run_unadjusted = true;
    bool run_adjusted = true;
    WeightScheme scheme = WeightScheme::equal_centers;
    int replications = 1000;
    std::uint64_t master_seed = 1;
    int draws = 1000; // sampled-prediction draws
    bool couple_arm_draws = true;
    double level = 0.95;
    double max_failure_fraction = 0.02;
    std::int64_t truth_draws = 10'000'000;
    std::set<HeterogeneityMethod> methods = {HeterogeneityMethod::dl, HeterogeneityMethod::reml,
                                             HeterogeneityMethod::db};
    std::string out_dir = ".";
};

struct EstimatorSummary {
    RosterEstimator kind = RosterEstimator::naive;
    bool adjusted = false;
    Estimand estimand = Estimand::ate;
    int used = 0;
    int excluded = 0;
    double truth = 0.0;
    double bias = 0.0;
    double mse = 0.0;
    double mc_sd = 0.0;
    std::optional<double> se_naive_avg;
    std::map<HeterogeneityMethod, double> se_avg;
    std::optional<double> coverage_naive;
    std::map<HeterogeneityMethod, double> coverage;
    double mean_if_icc = 0.0;
};

struct ScenarioResult {
    std::string id;
    int replications = 0;
    WeightScheme scheme = WeightScheme::equal_centers;
    std::map<Estimand, TrueEstimandValue> truth;
    std::vector<EstimatorSummary> rows;
    int total_failures = 0;
    double worst_failure_fraction = 0.0;
    std::vector<std::string> failure_notes; // capped sample of reasons
};

/// Monte Carlo scenario run. Replications are seed-isolated streams of the
/// master seed and aggregated in replication order, so results are identical
/// for any worker count. jobs <= 1 selects the serial reference path.
ScenarioResult run_scenario(const ScenarioConfig& config, int jobs = 1);
ScenarioResult run_scenario_serial(const ScenarioConfig& config);

void write_scenario_csv(const ScenarioResult& result, const std::string& path);
void write_scenario_json(const ScenarioResult& result, const std::string& path);
void print_scenario_table(const ScenarioResult& result, std::ostream& os);

/// Intraclass correlation of influence values grouped by center (one-way
/// ANOVA, negative estimates allowed).
double compute_if_icc(const Eigen::VectorXd& if_values, const std::vector<int>& center_of,
                      int k);

/// Coverage predicate used by the scenario aggregation; an infinite interval
/// covers everything.
inline bool interval_covers(double ci_low, double ci_high, double truth) {
    return truth >= ci_low && truth <= ci_high;
}

ScenarioConfig load_scenario_config(const std::string& path);

// --------------------------------------------------------------------------
// Analysis of user data
// --------------------------------------------------------------------------

struct AnalysisConfig {
    CsvSchema columns;
    OutcomeFamily family = OutcomeFamily::gaussian;
    RosterEstimator estimator = RosterEstimator::mixed_1Ac_sam;
    bool adjusted = true;
    std::vector<std::string> propensity_covariates; // opt-in, by column name
    double clamp_low = 0.01;
    double clamp_high = 0.99;
    int draws = 1000;
    std::uint64_t seed = 1;
    bool couple_arm_draws = true;
    WeightScheme scheme = WeightScheme::equal_centers;
    double level = 0.95;
    std::set<HeterogeneityMethod> methods = {HeterogeneityMethod::dl, HeterogeneityMethod::reml,
                                             HeterogeneityMethod::db};
    bool use_normal_quantile = false;
    bool cluster_randomized = false;
    bool hierarchical = false;
};

struct EstimandReport {
    Estimand estimand = Estimand::ate;
    double estimate = 0.0;
    std::optional<double> se_naive;
    std::optional<std::pair<double, double>> ci_naive;
    double df_naive = 0.0;
    std::map<HeterogeneityMethod, MethodInference> by_method;
    std::optional<double> se_hierarchical;
    std::optional<std::pair<double, double>> ci_hierarchical;
    std::optional<HierarchicalVarianceResult> hierarchical;
    // cluster-randomized path
    std::optional<double> se_cluster;
    std::optional<std::pair<double, double>> ci_cluster;
};

struct PerCenterRow {
    std::string center_id;
    int n_c = 0;
    double tau1 = 0.0, tau0 = 0.0, tau = 0.0;
    double sigma2_c_ate = 0.0;
    bool fallback = false;
};

struct AnalysisReport {
    std::string estimator_name;
    bool adjusted = false;
    WeightScheme scheme = WeightScheme::equal_centers;
    double level = 0.95;
    std::vector<EstimandReport> estimands; // treated, control, ate
    std::vector<PerCenterRow> per_center;
    int clamped_propensity = 0;
    double propensity_sigma2 = 0.0;
    int variance_fallbacks = 0;
    double size_effect_correlation = 0.0; // corr(n_c, tau_hat_c)
    std::optional<double> gcomp_gap;      // |naive ATE - mean(m1 - m0)|
    bool cluster_mode = false;
    int n_clusters = 0;
    std::vector<std::string> warnings;
};

AnalysisReport analyze(const TrialDataset& data, const AnalysisConfig& config);
void print_analysis_report(const AnalysisReport& report, std::ostream& os);
void write_analysis_json(const AnalysisReport& report, const std::string& path);

AnalysisConfig load_analysis_config(const std::string& path);

} // namespace clustrial
