#include "clustrial/harness.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

#include <omp.h>

#include <json.hpp>

#include "clustrial/errors.hpp"
#include "clustrial/glm.hpp"
#include "clustrial/mixed_model.hpp"
#include "clustrial/propensity.hpp"
#include "clustrial/rng.hpp"

namespace clustrial {

using nlohmann::json;

double compute_if_icc(const Eigen::VectorXd& if_values, const std::vector<int>& center_of,
                      int k) {
    return anova_icc(if_values, center_of, k);
}

namespace {

constexpr Estimand kEstimands[3] = {Estimand::counterfactual_mean_treated,
                                    Estimand::counterfactual_mean_control, Estimand::ate};

std::string estimand_token(Estimand e) {
    switch (e) {
        case Estimand::counterfactual_mean_treated: return "cf_treated";
        case Estimand::counterfactual_mean_control: return "cf_control";
        case Estimand::ate: return "ate";
    }
    return "?";
}

std::string roster_token(RosterEstimator kind) {
    switch (kind) {
        case RosterEstimator::naive: return "naive";
        case RosterEstimator::fixed: return "fixed";
        case RosterEstimator::mixed_1c: return "mixed_1c";
        case RosterEstimator::mixed_1c_sam: return "mixed_1c_sam";
        case RosterEstimator::mixed_1Ac: return "mixed_1Ac";
        case RosterEstimator::mixed_1Ac_sam: return "mixed_1Ac_sam";
    }
    return "?";
}

struct CellSpec {
    RosterEstimator kind;
    bool adjusted;
    Estimand estimand;
};

std::vector<CellSpec> enumerate_cells(const ScenarioConfig& config) {
    std::vector<CellSpec> cells;
    std::vector<bool> adj;
    if (config.run_unadjusted) adj.push_back(false);
    if (config.run_adjusted) adj.push_back(true);
    for (RosterEstimator kind : config.estimators)
        for (bool a : adj)
            for (Estimand e : kEstimands) cells.push_back({kind, a, e});
    return cells;
}

struct MethodCell {
    double se = 0.0;
    double ci_low = 0.0;
    double ci_high = 0.0;
};

struct CellResult {
    bool ok = false;
    double estimate = 0.0;
    std::optional<MethodCell> naive;
    std::map<HeterogeneityMethod, MethodCell> methods;
    double if_icc = 0.0;
    std::string error;
};

/// Everything one replication produces, in enumerate_cells order.
struct ReplicationResult {
    std::vector<CellResult> cells;
};

struct MixedGroupFit {
    bool ok = false;
    MixedFit fit;
    std::string error;
};

ReplicationResult run_replication(const ScenarioConfig& config,
                                  const std::vector<CellSpec>& cells, int rep) {
    ReplicationResult out;
    out.cells.resize(cells.size());

    DgmSpec spec = config.dgm;
    spec.seed = derive_seed(config.master_seed, static_cast<std::uint64_t>(rep));
    TrialDataset data = generate(spec);
    const int n_cov = data.covariate_count();
    const bool gaussian = data.family() == OutcomeFamily::gaussian;

    const InferenceOptions inf_options{config.methods, config.level, false, false};

    // Shared mixed propensity for the proposed estimators.
    PropensityResult mixed_prop;
    bool mixed_prop_ok = true;
    std::string mixed_prop_error;
    try {
        PropensityPolicy policy;
        policy.variant = PropensityPolicy::Variant::mixed_logistic;
        mixed_prop = estimate_propensity(data, policy);
    } catch (const std::exception& ex) {
        mixed_prop_ok = false;
        mixed_prop_error = ex.what();
    }

    // Outcome-model fits are shared between the BLUP and sampled variants.
    std::map<std::pair<bool, bool>, MixedGroupFit> mixed_fits; // (adjusted, with_slope)
    auto mixed_fit_for = [&](bool adjusted, bool with_slope) -> MixedGroupFit& {
        auto key = std::make_pair(adjusted, with_slope);
        auto it = mixed_fits.find(key);
        if (it != mixed_fits.end()) return it->second;
        MixedGroupFit group;
        try {
            DesignSpec design;
            design.include_treatment = true;
            if (adjusted)
                for (int j = 0; j < n_cov; ++j) design.covariate_columns.push_back(j);
            RandomEffectsSpec re;
            re.random_intercept = true;
            re.random_treatment_slope = with_slope;
            group.fit = gaussian ? fit_lmm(data, design, re)
                                 : fit_glmm_logit(data, design, re);
            if (!group.fit.converged) throw FitError("mixed fit did not converge");
            group.ok = true;
        } catch (const std::exception& ex) {
            group.error = ex.what();
        }
        return mixed_fits.emplace(key, std::move(group)).first->second;
    };

    auto fill_proposed_cells = [&](std::size_t first_cell,
                                   const std::vector<CenterEstimate>& centers) {
        for (int e = 0; e < 3; ++e) {
            CellResult& cell = out.cells[first_cell + e];
            try {
                const PooledEstimate pooled = pool(centers, config.scheme, kEstimands[e]);
                const PooledInference inf = total_inference(pooled, inf_options);
                cell.estimate = pooled.value;
                for (const auto& [m, mi] : inf.by_method)
                    cell.methods[m] = {mi.se, mi.ci_low, mi.ci_high};
                cell.if_icc = compute_if_icc(flatten_if(data, centers, kEstimands[e]),
                                             data.center_of(), data.k());
                cell.ok = true;
            } catch (const std::exception& ex) {
                cell.error = ex.what();
            }
        }
    };

    std::size_t cell_index = 0;
    while (cell_index < cells.size()) {
        const CellSpec& cs = cells[cell_index]; // three estimand cells per block
        const bool adjusted = cs.adjusted;
        try {
            if (cs.kind == RosterEstimator::naive) {
                DesignSpec design;
                design.include_treatment = true;
                if (adjusted)
                    for (int j = 0; j < n_cov; ++j) design.covariate_columns.push_back(j);
                const GlmFit fit = fit_glm(data, design);
                if (!fit.converged) throw FitError("naive outcome model did not converge");
                PropensityPolicy policy;
                policy.variant = PropensityPolicy::Variant::marginal;
                for (int e = 0; e < 3; ++e) {
                    CellResult& cell = out.cells[cell_index + e];
                    try {
                        const PooledEstimate pooled =
                            naive_aipw(data, fit, policy, kEstimands[e]);
                        const Eigen::VectorXd flat =
                            flatten_if(data, pooled.per_center, kEstimands[e]);
                        const double se = std::sqrt(naive_variance(flat));
                        const double df = static_cast<double>(data.n() - 1);
                        const double quant =
                            t_quantile(df, 1.0 - (1.0 - config.level) / 2.0);
                        cell.estimate = pooled.value;
                        cell.naive = MethodCell{se, pooled.value - quant * se,
                                                pooled.value + quant * se};
                        cell.if_icc = compute_if_icc(flat, data.center_of(), data.k());
                        cell.ok = true;
                    } catch (const std::exception& ex) {
                        cell.error = ex.what();
                    }
                }
            } else if (cs.kind == RosterEstimator::fixed) {
                if (!mixed_prop_ok) throw FitError("propensity: " + mixed_prop_error);
                DesignSpec design;
                design.include_treatment = true;
                design.center_indicators = true;
                if (adjusted)
                    for (int j = 0; j < n_cov; ++j) design.covariate_columns.push_back(j);
                const GlmFit fit = fit_glm(data, design);
                if (!fit.converged) throw FitError("fixed outcome model did not converge");
                const Eigen::VectorXd m1 = predict_counterfactual(fit, data, 1);
                const Eigen::VectorXd m0 = predict_counterfactual(fit, data, 0);
                fill_proposed_cells(cell_index,
                                    aipw_all_centers(data, mixed_prop.probabilities, m1, m0));
            } else {
                if (!mixed_prop_ok) throw FitError("propensity: " + mixed_prop_error);
                const bool with_slope = cs.kind == RosterEstimator::mixed_1Ac ||
                                        cs.kind == RosterEstimator::mixed_1Ac_sam;
                const bool sampled = cs.kind == RosterEstimator::mixed_1c_sam ||
                                     cs.kind == RosterEstimator::mixed_1Ac_sam;
                const MixedGroupFit& group = mixed_fit_for(adjusted, with_slope);
                if (!group.ok) throw FitError(group.error);
                PredictionMode mode;
                mode.variant = sampled ? PredictionMode::Variant::sampled
                                       : PredictionMode::Variant::blup;
                mode.draws = config.draws;
                mode.couple_arm_draws = config.couple_arm_draws;
                mode.seed = derive_seed(config.master_seed, static_cast<std::uint64_t>(rep),
                                        2u + (adjusted ? 1u : 0u) * 2u + (with_slope ? 1u : 0u));
                const Eigen::VectorXd m1 =
                    predict_counterfactual_mixed(group.fit, data, 1, mode);
                const Eigen::VectorXd m0 =
                    predict_counterfactual_mixed(group.fit, data, 0, mode);
                fill_proposed_cells(cell_index,
                                    aipw_all_centers(data, mixed_prop.probabilities, m1, m0));
            }
        } catch (const std::exception& ex) {
            for (int e = 0; e < 3; ++e) out.cells[cell_index + e].error = ex.what();
        }
        cell_index += 3;
    }
    return out;
}

ScenarioResult aggregate(const ScenarioConfig& config, const std::vector<CellSpec>& cells,
                         const std::vector<ReplicationResult>& reps) {
    ScenarioResult result;
    result.id = config.id;
    result.replications = config.replications;
    result.scheme = config.scheme;
    DgmSpec truth_spec = config.dgm;
    truth_spec.seed = config.master_seed;
    for (Estimand e : kEstimands)
        result.truth.emplace(e, true_estimand(truth_spec, e, config.scheme, config.truth_draws));

    for (std::size_t ci = 0; ci < cells.size(); ++ci) {
        EstimatorSummary row;
        row.kind = cells[ci].kind;
        row.adjusted = cells[ci].adjusted;
        row.estimand = cells[ci].estimand;
        const double truth = result.truth.at(row.estimand).value;
        row.truth = truth;

        double sum = 0.0, sum_sq_err = 0.0, sum_icc = 0.0;
        std::map<HeterogeneityMethod, double> se_sum;
        std::map<HeterogeneityMethod, int> cover_count;
        double se_naive_sum = 0.0;
        int cover_naive = 0;
        bool has_naive = false;
        std::vector<double> estimates;

        for (const ReplicationResult& rep : reps) {
            const CellResult& cell = rep.cells[ci];
            if (!cell.ok) {
                ++row.excluded;
                if (result.failure_notes.size() < 20 && !cell.error.empty())
                    result.failure_notes.push_back(roster_token(row.kind) + "/" +
                                                   estimand_token(row.estimand) + ": " +
                                                   cell.error);
                ++result.total_failures;
                continue;
            }
            ++row.used;
            estimates.push_back(cell.estimate);
            sum += cell.estimate;
            sum_sq_err += (cell.estimate - truth) * (cell.estimate - truth);
            sum_icc += cell.if_icc;
            if (cell.naive) {
                has_naive = true;
                se_naive_sum += cell.naive->se;
                if (interval_covers(cell.naive->ci_low, cell.naive->ci_high, truth)) ++cover_naive;
            }
            for (const auto& [m, mc] : cell.methods) {
                se_sum[m] += mc.se;
                if (interval_covers(mc.ci_low, mc.ci_high, truth)) ++cover_count[m];
            }
        }

        if (row.used > 0) {
            const double used = static_cast<double>(row.used);
            const double mean = sum / used;
            row.bias = mean - truth;
            row.mse = sum_sq_err / used;
            double var = 0.0;
            for (double est : estimates) var += (est - mean) * (est - mean);
            row.mc_sd = row.used > 1 ? std::sqrt(var / (used - 1.0)) : 0.0;
            row.mean_if_icc = sum_icc / used;
            if (has_naive) {
                row.se_naive_avg = se_naive_sum / used;
                row.coverage_naive = static_cast<double>(cover_naive) / used;
            }
            for (const auto& [m, s] : se_sum) {
                row.se_avg[m] = s / used;
                row.coverage[m] = static_cast<double>(cover_count[m]) / used;
            }
        }
        const double frac =
            static_cast<double>(row.excluded) / static_cast<double>(config.replications);
        result.worst_failure_fraction = std::max(result.worst_failure_fraction, frac);
        result.rows.push_back(std::move(row));
    }
    return result;
}

} // namespace

ScenarioResult run_scenario_serial(const ScenarioConfig& config) {
    const std::vector<CellSpec> cells = enumerate_cells(config);
    std::vector<ReplicationResult> reps(config.replications);
    for (int r = 0; r < config.replications; ++r) reps[r] = run_replication(config, cells, r);
    return aggregate(config, cells, reps);
}

ScenarioResult run_scenario(const ScenarioConfig& config, int jobs) {
    if (jobs <= 1) return run_scenario_serial(config);
    const std::vector<CellSpec> cells = enumerate_cells(config);
    std::vector<ReplicationResult> reps(config.replications);
#pragma omp parallel for schedule(dynamic) num_threads(jobs)
    for (int r = 0; r < config.replications; ++r) reps[r] = run_replication(config, cells, r);
    return aggregate(config, cells, reps);
}

// ---------------------------------------------------------------------------
// Output
// ---------------------------------------------------------------------------

namespace {

std::string opt_str(const std::optional<double>& v) {
    return v ? format_double(*v) : std::string();
}

std::string method_or_empty(const std::map<HeterogeneityMethod, double>& m,
                            HeterogeneityMethod key) {
    const auto it = m.find(key);
    return it == m.end() ? std::string() : format_double(it->second);
}

} // namespace

void write_scenario_csv(const ScenarioResult& result, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot open file for writing: " + path);
    out << "scenario_id,estimator,adjusted,estimand,replications,used,excluded,truth,bias,mse,"
           "mc_sd,se_naive,se_reml,se_dl,se_db,cov_naive,cov_reml,cov_dl,cov_db,mean_if_icc\n";
    for (const EstimatorSummary& row : result.rows) {
        out << result.id << ',' << roster_token(row.kind) << ',' << (row.adjusted ? 1 : 0) << ','
            << estimand_token(row.estimand) << ',' << result.replications << ',' << row.used
            << ',' << row.excluded << ',' << format_double(row.truth) << ','
            << format_double(row.bias) << ',' << format_double(row.mse) << ','
            << format_double(row.mc_sd) << ',' << opt_str(row.se_naive_avg) << ','
            << method_or_empty(row.se_avg, HeterogeneityMethod::reml) << ','
            << method_or_empty(row.se_avg, HeterogeneityMethod::dl) << ','
            << method_or_empty(row.se_avg, HeterogeneityMethod::db) << ','
            << opt_str(row.coverage_naive) << ','
            << method_or_empty(row.coverage, HeterogeneityMethod::reml) << ','
            << method_or_empty(row.coverage, HeterogeneityMethod::dl) << ','
            << method_or_empty(row.coverage, HeterogeneityMethod::db) << ','
            << format_double(row.mean_if_icc) << '\n';
    }
}

void write_scenario_json(const ScenarioResult& result, const std::string& path) {
    json doc;
    doc["scenario_id"] = result.id;
    doc["replications"] = result.replications;
    doc["weights"] = result.scheme == WeightScheme::equal_centers ? "equal-centers"
                                                                  : "equal-patients";
    doc["total_failures"] = result.total_failures;
    doc["worst_failure_fraction"] = result.worst_failure_fraction;
    doc["failure_notes"] = result.failure_notes;
    for (const auto& [e, t] : result.truth) {
        json tv;
        tv["value"] = t.value;
        tv["closed_form"] = t.closed_form;
        tv["mc_se"] = t.mc_se;
        doc["truth"][estimand_token(e)] = tv;
    }
    doc["rows"] = json::array();
    for (const EstimatorSummary& row : result.rows) {
        json r;
        r["estimator"] = roster_token(row.kind);
        r["adjusted"] = row.adjusted;
        r["estimand"] = estimand_token(row.estimand);
        r["used"] = row.used;
        r["excluded"] = row.excluded;
        r["truth"] = row.truth;
        r["bias"] = row.bias;
        r["mse"] = row.mse;
        r["mc_sd"] = row.mc_sd;
        if (row.se_naive_avg) r["se_naive"] = *row.se_naive_avg;
        if (row.coverage_naive) r["cov_naive"] = *row.coverage_naive;
        for (const auto& [m, v] : row.se_avg) r["se_" + method_name(m)] = v;
        for (const auto& [m, v] : row.coverage) r["cov_" + method_name(m)] = v;
        r["mean_if_icc"] = row.mean_if_icc;
        doc["rows"].push_back(std::move(r));
    }
    std::ofstream out(path);
    if (!out) throw DataError("cannot open file for writing: " + path);
    out << doc.dump(2) << '\n';
}

namespace {

std::string fmt3(double v) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(3) << v;
    return os.str();
}

std::string fmt_opt(const std::optional<double>& v) { return v ? fmt3(*v) : "-"; }

std::string fmt_cov(const std::map<HeterogeneityMethod, double>& cov, HeterogeneityMethod m) {
    const auto it = cov.find(m);
    if (it == cov.end()) return "-";
    std::ostringstream os;
    os << std::fixed << std::setprecision(1) << 100.0 * it->second;
    return os.str();
}

std::string fmt_se(const std::map<HeterogeneityMethod, double>& se, HeterogeneityMethod m) {
    const auto it = se.find(m);
    return it == se.end() ? "-" : fmt3(it->second);
}

std::string fmt_cov_opt(const std::optional<double>& cov) {
    if (!cov) return "-";
    std::ostringstream os;
    os << std::fixed << std::setprecision(1) << 100.0 * *cov;
    return os.str();
}

} // namespace

void print_scenario_table(const ScenarioResult& result, std::ostream& os) {
    os << "Scenario " << result.id << " (" << result.replications << " replications, "
       << (result.scheme == WeightScheme::equal_centers ? "equal-center" : "equal-patient")
       << " weights)\n";
    for (const auto& [e, t] : result.truth) {
        os << "  truth " << estimand_token(e) << " = " << format_double(t.value);
        if (!t.closed_form) os << " (mc_se " << format_double(t.mc_se) << ")";
        os << '\n';
    }
    for (Estimand e : kEstimands) {
        os << "\n== " << estimand_token(e) << " ==\n";
        for (int adjusted = 0; adjusted <= 1; ++adjusted) {
            bool any = false;
            for (const EstimatorSummary& row : result.rows)
                if (row.estimand == e && row.adjusted == (adjusted == 1)) any = true;
            if (!any) continue;
            os << (adjusted ? "[Adjusted]\n" : "[Unadjusted]\n");
            os << std::left << std::setw(20) << "Method" << std::right << std::setw(8) << "SD"
               << std::setw(9) << "SE(nv)" << std::setw(9) << "SE(re)" << std::setw(9)
               << "SE(dl)" << std::setw(9) << "SE(db)" << std::setw(9) << "Cv(nv)"
               << std::setw(9) << "Cv(re)" << std::setw(9) << "Cv(dl)" << std::setw(9)
               << "Cv(db)" << std::setw(9) << "excl" << '\n';
            for (const EstimatorSummary& row : result.rows) {
                if (row.estimand != e || row.adjusted != (adjusted == 1)) continue;
                os << std::left << std::setw(20) << roster_display_name(row.kind) << std::right
                   << std::setw(8) << fmt3(row.mc_sd) << std::setw(9)
                   << fmt_opt(row.se_naive_avg) << std::setw(9)
                   << fmt_se(row.se_avg, HeterogeneityMethod::reml) << std::setw(9)
                   << fmt_se(row.se_avg, HeterogeneityMethod::dl) << std::setw(9)
                   << fmt_se(row.se_avg, HeterogeneityMethod::db) << std::setw(9)
                   << fmt_cov_opt(row.coverage_naive)
                   << std::setw(9) << fmt_cov(row.coverage, HeterogeneityMethod::reml)
                   << std::setw(9) << fmt_cov(row.coverage, HeterogeneityMethod::dl)
                   << std::setw(9) << fmt_cov(row.coverage, HeterogeneityMethod::db)
                   << std::setw(9) << row.excluded << '\n';
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Config loading
// ---------------------------------------------------------------------------

namespace {

json load_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    try {
        return json::parse(in);
    } catch (const json::parse_error& ex) {
        throw ConfigError("config parse error in " + path + ": " + ex.what());
    }
}

WeightScheme parse_weights(const std::string& token) {
    if (token == "equal-centers" || token == "equal_centers") return WeightScheme::equal_centers;
    if (token == "equal-patients" || token == "equal_patients")
        return WeightScheme::equal_patients;
    throw ConfigError("unknown weight scheme '" + token + "'");
}

std::set<HeterogeneityMethod> parse_methods(const json& arr) {
    std::set<HeterogeneityMethod> methods;
    for (const auto& m : arr) {
        const std::string token = m.get<std::string>();
        if (token == "dl")
            methods.insert(HeterogeneityMethod::dl);
        else if (token == "reml")
            methods.insert(HeterogeneityMethod::reml);
        else if (token == "db")
            methods.insert(HeterogeneityMethod::db);
        else
            throw ConfigError("unknown variance method '" + token + "'");
    }
    if (methods.empty()) throw ConfigError("method list is empty");
    return methods;
}

void parse_dgm(const json& doc, DgmSpec& dgm) {
    if (doc.contains("endpoint")) {
        const std::string e = doc["endpoint"].get<std::string>();
        if (e == "continuous")
            dgm.endpoint = EndpointKind::continuous;
        else if (e == "binary")
            dgm.endpoint = EndpointKind::binary;
        else
            throw ConfigError("endpoint must be 'continuous' or 'binary'");
    }
    if (doc.contains("misspecified")) dgm.misspecified = doc["misspecified"].get<bool>();
    if (doc.contains("sigma2_b0")) dgm.sigma2_b0 = doc["sigma2_b0"].get<double>();
    if (doc.contains("sigma2_b1")) dgm.sigma2_b1 = doc["sigma2_b1"].get<double>();
    if (doc.contains("sigma2_b2")) dgm.sigma2_b2 = doc["sigma2_b2"].get<double>();
    if (doc.contains("setting")) dgm.setting = doc["setting"].get<int>();
    if (doc.contains("informative_size"))
        dgm.informative_size = doc["informative_size"].get<bool>();
    if (doc.contains("informative_tau")) dgm.informative_tau = doc["informative_tau"].get<double>();
    if (doc.contains("covariate_law")) {
        const json& law = doc["covariate_law"];
        auto set = [&](const char* key, double& field) {
            if (law.contains(key)) field = law[key].get<double>();
        };
        set("q_z30", dgm.cont.q_z30);
        set("age_mean", dgm.cont.age_mean);
        set("age_sd", dgm.cont.age_sd);
        set("cd40_mean", dgm.cont.cd40_mean);
        set("cd40_sd", dgm.cont.cd40_sd);
        set("wt_mean", dgm.cont.wt_mean);
        set("wt_sd", dgm.cont.wt_sd);
        set("p_severe", dgm.bin.p_severe);
        set("p_moderate", dgm.bin.p_moderate);
        set("bin_age_mean", dgm.bin.age_mean);
        set("bin_age_sd", dgm.bin.age_sd);
        set("ichv_mean", dgm.bin.ichv_mean);
        set("ichv_sd", dgm.bin.ichv_sd);
    }
    setting_profile(dgm.setting); // validates
}

} // namespace

ScenarioConfig load_scenario_config(const std::string& path) {
    const json doc = load_json_file(path);
    ScenarioConfig config;
    try {
        if (doc.contains("id")) config.id = doc["id"].get<std::string>();
        parse_dgm(doc, config.dgm);
        if (doc.contains("estimators")) {
            config.estimators.clear();
            for (const auto& token : doc["estimators"])
                config.estimators.push_back(parse_roster_estimator(token.get<std::string>()));
            if (config.estimators.empty()) throw ConfigError("estimator roster is empty");
        }
        if (doc.contains("adjusted")) {
            const std::string a = doc["adjusted"].get<std::string>();
            if (a == "both") {
                config.run_unadjusted = config.run_adjusted = true;
            } else if (a == "unadjusted") {
                config.run_unadjusted = true;
                config.run_adjusted = false;
            } else if (a == "adjusted") {
                config.run_unadjusted = false;
                config.run_adjusted = true;
            } else {
                throw ConfigError("adjusted must be 'both', 'unadjusted' or 'adjusted'");
            }
        }
        if (doc.contains("weights")) config.scheme = parse_weights(doc["weights"].get<std::string>());
        if (doc.contains("replications")) config.replications = doc["replications"].get<int>();
        if (doc.contains("seed")) config.master_seed = doc["seed"].get<std::uint64_t>();
        if (doc.contains("draws")) config.draws = doc["draws"].get<int>();
        if (doc.contains("couple_arm_draws"))
            config.couple_arm_draws = doc["couple_arm_draws"].get<bool>();
        if (doc.contains("level")) config.level = doc["level"].get<double>();
        if (doc.contains("methods")) config.methods = parse_methods(doc["methods"]);
        if (doc.contains("max_failure_fraction"))
            config.max_failure_fraction = doc["max_failure_fraction"].get<double>();
        if (doc.contains("truth_draws")) config.truth_draws = doc["truth_draws"].get<std::int64_t>();
        if (doc.contains("out")) config.out_dir = doc["out"].get<std::string>();
    } catch (const json::exception& ex) {
        throw ConfigError(std::string("config error: ") + ex.what());
    }
    if (config.replications < 1) throw ConfigError("replications must be >= 1");
    if (!(config.level > 0.0 && config.level < 1.0))
        throw ConfigError("level must be in (0, 1)");
    return config;
}

AnalysisConfig load_analysis_config(const std::string& path) {
    const json doc = load_json_file(path);
    AnalysisConfig config;
    try {
        if (!doc.contains("columns")) throw ConfigError("config needs a 'columns' mapping");
        const json& cols = doc["columns"];
        config.columns.outcome = cols.at("outcome").get<std::string>();
        config.columns.treatment = cols.at("treatment").get<std::string>();
        config.columns.center = cols.at("center").get<std::string>();
        if (cols.contains("cluster")) config.columns.cluster = cols["cluster"].get<std::string>();
        if (cols.contains("patient_id"))
            config.columns.patient_id = cols["patient_id"].get<std::string>();
        if (cols.contains("covariates"))
            for (const auto& c : cols["covariates"])
                config.columns.covariates.push_back(c.get<std::string>());
        if (doc.contains("family")) {
            const std::string f = doc["family"].get<std::string>();
            if (f == "gaussian")
                config.family = OutcomeFamily::gaussian;
            else if (f == "binomial" || f == "binomial-logit")
                config.family = OutcomeFamily::binomial_logit;
            else
                throw ConfigError("family must be 'gaussian' or 'binomial'");
        }
        if (doc.contains("estimator"))
            config.estimator = parse_roster_estimator(doc["estimator"].get<std::string>());
        if (doc.contains("adjusted")) config.adjusted = doc["adjusted"].get<bool>();
        if (doc.contains("propensity_covariates"))
            for (const auto& c : doc["propensity_covariates"])
                config.propensity_covariates.push_back(c.get<std::string>());
        if (doc.contains("clamp")) {
            config.clamp_low = doc["clamp"][0].get<double>();
            config.clamp_high = doc["clamp"][1].get<double>();
        }
        if (doc.contains("draws")) config.draws = doc["draws"].get<int>();
        if (doc.contains("seed")) config.seed = doc["seed"].get<std::uint64_t>();
        if (doc.contains("couple_arm_draws"))
            config.couple_arm_draws = doc["couple_arm_draws"].get<bool>();
        if (doc.contains("weights")) config.scheme = parse_weights(doc["weights"].get<std::string>());
        if (doc.contains("level")) config.level = doc["level"].get<double>();
        if (doc.contains("methods")) config.methods = parse_methods(doc["methods"]);
        if (doc.contains("normal_quantile"))
            config.use_normal_quantile = doc["normal_quantile"].get<bool>();
        if (doc.contains("cluster_randomized"))
            config.cluster_randomized = doc["cluster_randomized"].get<bool>();
        if (doc.contains("hierarchical")) config.hierarchical = doc["hierarchical"].get<bool>();
    } catch (const json::exception& ex) {
        throw ConfigError(std::string("config error: ") + ex.what());
    }
    return config;
}

// ---------------------------------------------------------------------------
// Analysis
// ---------------------------------------------------------------------------

namespace {

std::vector<int> resolve_covariates(const TrialDataset& data,
                                    const std::vector<std::string>& names) {
    std::vector<int> out;
    for (const std::string& name : names) {
        const auto& all = data.covariate_names();
        const auto it = std::find(all.begin(), all.end(), name);
        if (it == all.end()) throw ConfigError("unknown covariate '" + name + "'");
        out.push_back(static_cast<int>(it - all.begin()));
    }
    return out;
}

/// Dataset with cluster ids promoted to center ids, so mixed outcome models
/// group by cluster in the cluster-randomized path.
TrialDataset relabel_clusters_as_centers(const TrialDataset& data) {
    std::vector<PatientRecord> records = data.records();
    for (PatientRecord& r : records) r.center_id = r.center_id + "/" + r.cluster_id;
    return TrialDataset(std::move(records), data.family(), data.covariate_names());
}

double pearson_correlation(const Eigen::VectorXd& x, const Eigen::VectorXd& y) {
    const double mx = x.mean(), my = y.mean();
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (int i = 0; i < x.size(); ++i) {
        sxy += (x(i) - mx) * (y(i) - my);
        sxx += (x(i) - mx) * (x(i) - mx);
        syy += (y(i) - my) * (y(i) - my);
    }
    if (sxx <= 0.0 || syy <= 0.0) return 0.0;
    return sxy / std::sqrt(sxx * syy);
}

} // namespace

AnalysisReport analyze(const TrialDataset& data, const AnalysisConfig& config) {
    AnalysisReport report;
    report.estimator_name = roster_display_name(config.estimator);
    report.adjusted = config.adjusted;
    report.scheme = config.scheme;
    report.level = config.level;

    EstimatorRecipe recipe =
        roster_recipe(config.estimator, config.adjusted, data.covariate_count());
    recipe.propensity.clamp_low = config.clamp_low;
    recipe.propensity.clamp_high = config.clamp_high;
    recipe.propensity.covariate_columns = resolve_covariates(data, config.propensity_covariates);

    if (config.cluster_randomized) {
        report.cluster_mode = true;
        report.n_clusters = data.cluster_count();
        const TrialDataset by_cluster = relabel_clusters_as_centers(data);

        Eigen::VectorXd m1, m0;
        if (recipe.mixed_model) {
            const MixedFit fit =
                by_cluster.family() == OutcomeFamily::gaussian
                    ? fit_lmm(by_cluster, recipe.outcome_design, recipe.random_effects)
                    : fit_glmm_logit(by_cluster, recipe.outcome_design, recipe.random_effects);
            if (!fit.converged) report.warnings.push_back("outcome model did not converge");
            PredictionMode mode;
            mode.variant = recipe.prediction;
            mode.draws = config.draws;
            mode.seed = config.seed;
            mode.couple_arm_draws = config.couple_arm_draws;
            m1 = predict_counterfactual_mixed(fit, by_cluster, 1, mode);
            m0 = predict_counterfactual_mixed(fit, by_cluster, 0, mode);
        } else {
            const GlmFit fit = fit_glm(by_cluster, recipe.outcome_design);
            if (!fit.converged) report.warnings.push_back("outcome model did not converge");
            m1 = predict_counterfactual(fit, by_cluster, 1);
            m0 = predict_counterfactual(fit, by_cluster, 0);
        }

        const PropensityResult prop = estimate_propensity_cluster(data, recipe.propensity);
        report.clamped_propensity = prop.clamped_count;
        const double prob = 1.0 - (1.0 - config.level) / 2.0;
        const int j = data.cluster_count();
        for (Estimand e : kEstimands) {
            const ClusterRandomizedEstimate est =
                cluster_randomized_mean(data, prop.probabilities, m1, m0, e);
            EstimandReport er;
            er.estimand = e;
            er.estimate = est.value;
            Eigen::VectorXd if1(j), if0(j);
            for (int c = 0; c < j; ++c) {
                if1(c) = est.per_cluster[c].if1;
                if0(c) = est.per_cluster[c].if0;
            }
            double var = 0.0;
            switch (e) {
                case Estimand::counterfactual_mean_treated: var = cluster_variance(if1, j); break;
                case Estimand::counterfactual_mean_control: var = cluster_variance(if0, j); break;
                case Estimand::ate:
                    var = cluster_variance(if1, j) + cluster_variance(if0, j);
                    break;
            }
            const double se = std::sqrt(var);
            const double quant = config.use_normal_quantile
                                     ? normal_quantile(prob)
                                     : t_quantile(static_cast<double>(j - 1), prob);
            er.se_cluster = se;
            er.ci_cluster = {est.value - quant * se, est.value + quant * se};
            report.estimands.push_back(std::move(er));
        }
        return report;
    }

    // Outcome predictions.
    Eigen::VectorXd m1, m0;
    if (recipe.mixed_model) {
        const MixedFit fit = data.family() == OutcomeFamily::gaussian
                                 ? fit_lmm(data, recipe.outcome_design, recipe.random_effects)
                                 : fit_glmm_logit(data, recipe.outcome_design,
                                                  recipe.random_effects);
        if (!fit.converged) report.warnings.push_back("outcome model did not converge");
        PredictionMode mode;
        mode.variant = recipe.prediction;
        mode.draws = config.draws;
        mode.seed = config.seed;
        mode.couple_arm_draws = config.couple_arm_draws;
        m1 = predict_counterfactual_mixed(fit, data, 1, mode);
        m0 = predict_counterfactual_mixed(fit, data, 0, mode);
    } else {
        const GlmFit fit = fit_glm(data, recipe.outcome_design);
        if (!fit.converged) report.warnings.push_back("outcome model did not converge");
        for (const std::string& w : fit.warnings) report.warnings.push_back(w);
        m1 = predict_counterfactual(fit, data, 1);
        m0 = predict_counterfactual(fit, data, 0);
        if (recipe.naive_pooling &&
            recipe.propensity.variant == PropensityPolicy::Variant::marginal) {
            // G-computation cross-check: with a canonical MLE fit and marginal
            // propensity the AIPW ATE equals the prediction contrast mean.
            const PooledEstimate naive = naive_aipw(data, fit, recipe.propensity, Estimand::ate);
            report.gcomp_gap = std::abs(naive.value - (m1 - m0).mean());
        }
    }

    const PropensityResult prop = estimate_propensity(data, recipe.propensity);
    report.clamped_propensity = prop.clamped_count;
    report.propensity_sigma2 = prop.sigma2_center;

    const std::vector<CenterEstimate> centers =
        aipw_all_centers(data, prop.probabilities, m1, m0);

    // Per-center table and diagnostics.
    const WithinCenterVariances wcv = within_center_variances(centers, Estimand::ate);
    Eigen::VectorXd sizes(data.k()), taus(data.k());
    for (int c = 0; c < data.k(); ++c) {
        PerCenterRow row;
        row.center_id = centers[c].center_id;
        row.n_c = centers[c].n_c;
        row.tau1 = centers[c].tau1_hat;
        row.tau0 = centers[c].tau0_hat;
        row.tau = centers[c].tau_hat;
        row.sigma2_c_ate = wcv.values(c);
        row.fallback = wcv.fallback[c];
        report.per_center.push_back(std::move(row));
        sizes(c) = static_cast<double>(centers[c].n_c);
        taus(c) = centers[c].tau_hat;
    }
    report.variance_fallbacks = wcv.fallback_count;
    report.size_effect_correlation = pearson_correlation(sizes, taus);

    InferenceOptions inf_options{config.methods, config.level, config.use_normal_quantile,
                                 true};
    for (Estimand e : kEstimands) {
        // The naive estimator is the single all-patient sum, which is the
        // equal-patient pooling of the per-center estimates.
        PooledEstimate pooled =
            pool(centers, recipe.naive_pooling ? WeightScheme::equal_patients : config.scheme, e);
        const PooledInference inf = total_inference(pooled, inf_options);
        EstimandReport er;
        er.estimand = e;
        er.estimate = pooled.value;
        er.se_naive = inf.se_naive;
        er.ci_naive = inf.ci_naive;
        er.df_naive = inf.df_naive;
        er.by_method = inf.by_method;

        if (config.hierarchical) {
            if (!data.has_clusters())
                throw DataError("--hierarchical requires a cluster column");
            const Eigen::VectorXd flat = flatten_if(data, centers, e);
            Eigen::VectorXd omega(data.k());
            if (config.scheme == WeightScheme::equal_centers) {
                for (int c = 0; c < data.k(); ++c)
                    omega(c) = 1.0 / (static_cast<double>(data.k()) *
                                      static_cast<double>(data.center_sizes()[c]));
            } else {
                omega.setConstant(1.0 / static_cast<double>(data.n()));
            }
            const HierarchicalVarianceResult hv =
                hierarchical_variance(flat, data.center_of(), data.cluster_of(), data.k(),
                                      data.cluster_count(), omega);
            if (hv.cluster_dropped)
                report.warnings.push_back(
                    "cluster variance component aliased with centers (one cluster per center)");
            const double se = std::sqrt(hv.variance);
            const double prob = 1.0 - (1.0 - config.level) / 2.0;
            const double quant = config.use_normal_quantile
                                     ? normal_quantile(prob)
                                     : t_quantile(static_cast<double>(data.k() - 1), prob);
            er.se_hierarchical = se;
            er.ci_hierarchical = {pooled.value - quant * se, pooled.value + quant * se};
            er.hierarchical = hv;
        }
        report.estimands.push_back(std::move(er));
    }
    return report;
}

void print_analysis_report(const AnalysisReport& report, std::ostream& os) {
    os << "Estimator: " << report.estimator_name
       << (report.adjusted ? " (covariate-adjusted)" : " (unadjusted)") << "\n";
    os << "Weights: "
       << (report.scheme == WeightScheme::equal_centers ? "equal-centers" : "equal-patients")
       << ", level " << report.level << "\n";
    if (report.cluster_mode) os << "Cluster-randomized analysis over " << report.n_clusters
                                << " clusters\n";
    for (const EstimandReport& er : report.estimands) {
        os << "\n[" << estimand_token(er.estimand) << "] estimate = " << format_double(er.estimate)
           << "\n";
        if (er.se_cluster)
            os << "  cluster   se=" << fmt3(*er.se_cluster) << " ci=(" << fmt3(er.ci_cluster->first)
               << ", " << fmt3(er.ci_cluster->second) << ")\n";
        if (er.se_naive)
            os << "  naive     se=" << fmt3(*er.se_naive) << " ci=(" << fmt3(er.ci_naive->first)
               << ", " << fmt3(er.ci_naive->second) << ") df=" << fmt3(er.df_naive) << "\n";
        for (const auto& [m, mi] : er.by_method)
            os << "  " << std::left << std::setw(9) << method_name(m) << std::right
               << " se=" << fmt3(mi.se) << " ci=(" << fmt3(mi.ci_low) << ", " << fmt3(mi.ci_high)
               << ") df=" << fmt3(mi.df) << " sigma2_u=" << format_double(mi.heterogeneity.sigma2_u)
               << "\n";
        if (er.se_hierarchical)
            os << "  hierarch  se=" << fmt3(*er.se_hierarchical) << " ci=("
               << fmt3(er.ci_hierarchical->first) << ", " << fmt3(er.ci_hierarchical->second)
               << ")\n";
    }
    if (!report.per_center.empty()) {
        os << "\nPer-center estimates:\n";
        os << std::left << std::setw(12) << "center" << std::right << std::setw(6) << "n_c"
           << std::setw(10) << "tau1" << std::setw(10) << "tau0" << std::setw(10) << "tau"
           << std::setw(12) << "sigma2_c" << std::setw(10) << "fallback" << "\n";
        for (const PerCenterRow& row : report.per_center)
            os << std::left << std::setw(12) << row.center_id << std::right << std::setw(6)
               << row.n_c << std::setw(10) << fmt3(row.tau1) << std::setw(10) << fmt3(row.tau0)
               << std::setw(10) << fmt3(row.tau) << std::setw(12) << fmt3(row.sigma2_c_ate)
               << std::setw(10) << (row.fallback ? "yes" : "no") << "\n";
    }
    os << "\nDiagnostics:\n";
    os << "  clamped propensity values: " << report.clamped_propensity << "\n";
    if (!report.cluster_mode) {
        os << "  propensity center variance: " << format_double(report.propensity_sigma2) << "\n";
        os << "  within-center variance fallbacks: " << report.variance_fallbacks << "\n";
        os << "  corr(n_c, tau_c): " << fmt3(report.size_effect_correlation) << "\n";
    }
    if (report.gcomp_gap)
        os << "  G-computation identity gap: " << format_double(*report.gcomp_gap) << "\n";
    for (const std::string& w : report.warnings) os << "  warning: " << w << "\n";
}

void write_analysis_json(const AnalysisReport& report, const std::string& path) {
    json doc;
    doc["estimator"] = report.estimator_name;
    doc["adjusted"] = report.adjusted;
    doc["weights"] =
        report.scheme == WeightScheme::equal_centers ? "equal-centers" : "equal-patients";
    doc["level"] = report.level;
    doc["cluster_mode"] = report.cluster_mode;
    for (const EstimandReport& er : report.estimands) {
        json e;
        e["estimate"] = er.estimate;
        if (er.se_naive) {
            e["naive"] = {{"se", *er.se_naive},
                          {"ci", {er.ci_naive->first, er.ci_naive->second}},
                          {"df", er.df_naive}};
        }
        if (er.se_cluster)
            e["cluster"] = {{"se", *er.se_cluster},
                            {"ci", {er.ci_cluster->first, er.ci_cluster->second}}};
        for (const auto& [m, mi] : er.by_method)
            e[method_name(m)] = {{"se", mi.se},
                                 {"ci", {mi.ci_low, mi.ci_high}},
                                 {"df", mi.df},
                                 {"rho_hat", mi.rho_hat},
                                 {"sigma2_u", mi.heterogeneity.sigma2_u}};
        if (er.se_hierarchical) {
            e["hierarchical"] = {{"se", *er.se_hierarchical},
                                 {"ci", {er.ci_hierarchical->first, er.ci_hierarchical->second}},
                                 {"var_center", er.hierarchical->var_center},
                                 {"var_cluster", er.hierarchical->var_cluster},
                                 {"var_resid", er.hierarchical->var_resid}};
        }
        doc["estimands"][estimand_token(er.estimand)] = std::move(e);
    }
    doc["diagnostics"] = {{"clamped_propensity", report.clamped_propensity},
                          {"propensity_sigma2", report.propensity_sigma2},
                          {"variance_fallbacks", report.variance_fallbacks},
                          {"size_effect_correlation", report.size_effect_correlation}};
    if (report.gcomp_gap) doc["diagnostics"]["gcomp_gap"] = *report.gcomp_gap;
    doc["warnings"] = report.warnings;
    json centers = json::array();
    for (const PerCenterRow& row : report.per_center)
        centers.push_back({{"center", row.center_id},
                           {"n_c", row.n_c},
                           {"tau1", row.tau1},
                           {"tau0", row.tau0},
                           {"tau", row.tau},
                           {"sigma2_c", row.sigma2_c_ate},
                           {"fallback", row.fallback}});
    doc["per_center"] = std::move(centers);
    std::ofstream out(path);
    if (!out) throw DataError("cannot open file for writing: " + path);
    out << doc.dump(2) << '\n';
}

} // namespace clustrial
