#include "clustrial/estimators.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>

#include "clustrial/errors.hpp"

namespace clustrial {

CenterEstimate aipw_center(const std::string& center_id, const Eigen::VectorXd& treatment,
                           const Eigen::VectorXd& outcome, const Eigen::VectorXd& p_hat,
                           const Eigen::VectorXd& m1_hat, const Eigen::VectorXd& m0_hat) {
    const int m = static_cast<int>(treatment.size());
    if (outcome.size() != m || p_hat.size() != m || m1_hat.size() != m || m0_hat.size() != m)
        throw DataError("aipw_center: input vectors have mismatched lengths");

    CenterEstimate est;
    est.center_id = center_id;
    est.n_c = m;
    est.if_treated.resize(m);
    est.if_control.resize(m);
    est.if_ate.resize(m);

    for (int i = 0; i < m; ++i) {
        const double a = treatment(i);
        const double p = p_hat(i);
        est.n_treated += a > 0.5 ? 1 : 0;
        est.n_control += a > 0.5 ? 0 : 1;
        est.if_treated(i) = (a / p) * (outcome(i) - m1_hat(i)) + m1_hat(i);
        est.if_control(i) = ((1.0 - a) / (1.0 - p)) * (outcome(i) - m0_hat(i)) + m0_hat(i);
        est.if_ate(i) = est.if_treated(i) - est.if_control(i);
    }
    est.tau1_hat = est.if_treated.mean();
    est.tau0_hat = est.if_control.mean();
    est.tau_hat = est.tau1_hat - est.tau0_hat;
    return est;
}

std::vector<CenterEstimate> aipw_all_centers(const TrialDataset& data,
                                             const Eigen::VectorXd& p_hat,
                                             const Eigen::VectorXd& m1_hat,
                                             const Eigen::VectorXd& m0_hat) {
    if (p_hat.size() != data.n() || m1_hat.size() != data.n() || m0_hat.size() != data.n())
        throw DataError("aipw_all_centers: vectors must have one entry per patient");
    std::vector<CenterEstimate> centers;
    centers.reserve(data.k());
    for (int c = 0; c < data.k(); ++c) {
        const auto& rows = data.center_rows()[c];
        const int m = static_cast<int>(rows.size());
        Eigen::VectorXd a(m), y(m), p(m), m1(m), m0(m);
        for (int i = 0; i < m; ++i) {
            const int idx = rows[i];
            a(i) = static_cast<double>(data.records()[idx].treatment);
            y(i) = data.records()[idx].outcome;
            p(i) = p_hat(idx);
            m1(i) = m1_hat(idx);
            m0(i) = m0_hat(idx);
        }
        centers.push_back(aipw_center(data.center_ids()[c], a, y, p, m1, m0));
    }
    return centers;
}

PooledEstimate pool(const std::vector<CenterEstimate>& centers, WeightScheme scheme,
                    Estimand estimand) {
    if (centers.empty()) throw DataError("pool: no center estimates");
    const int k = static_cast<int>(centers.size());

    PooledEstimate pooled;
    pooled.estimand = estimand;
    pooled.scheme = scheme;
    pooled.weights.resize(k);
    if (scheme == WeightScheme::equal_centers) {
        pooled.weights.setConstant(1.0 / static_cast<double>(k));
    } else {
        double n = 0.0;
        for (const auto& c : centers) n += static_cast<double>(c.n_c);
        for (int c = 0; c < k; ++c)
            pooled.weights(c) = static_cast<double>(centers[c].n_c) / n;
    }
    double value = 0.0;
    for (int c = 0; c < k; ++c) value += pooled.weights(c) * centers[c].value(estimand);
    pooled.value = value;
    pooled.per_center = centers;
    return pooled;
}

Eigen::VectorXd flatten_if(const TrialDataset& data, const std::vector<CenterEstimate>& centers,
                           Estimand estimand) {
    if (static_cast<int>(centers.size()) != data.k())
        throw DataError("flatten_if: center estimates do not match the dataset");
    Eigen::VectorXd values(data.n());
    for (int c = 0; c < data.k(); ++c) {
        const auto& rows = data.center_rows()[c];
        const Eigen::VectorXd& v = centers[c].if_values(estimand);
        for (std::size_t i = 0; i < rows.size(); ++i) values(rows[i]) = v(static_cast<int>(i));
    }
    return values;
}

PooledEstimate naive_aipw(const TrialDataset& data, const GlmFit& fit,
                          const PropensityPolicy& policy, Estimand estimand) {
    if (policy.variant == PropensityPolicy::Variant::mixed_logistic)
        throw ConfigError("naive_aipw takes a marginal or covariate-logistic propensity");
    if (fit.design.center_indicators)
        throw ConfigError("naive_aipw takes a fit without center terms");

    const PropensityResult prop = estimate_propensity(data, policy);
    const Eigen::VectorXd m1 = predict_counterfactual(fit, data, 1);
    const Eigen::VectorXd m0 = predict_counterfactual(fit, data, 0);

    // Single sum over all patients; algebraically the equal-patient pooling
    // of the per-center estimates below.
    const Eigen::VectorXd a = data.treatments();
    const Eigen::VectorXd y = data.outcomes();
    double acc = 0.0;
    for (int i = 0; i < data.n(); ++i) {
        const double t1 = (a(i) / prop.probabilities(i)) * (y(i) - m1(i)) + m1(i);
        const double t0 =
            ((1.0 - a(i)) / (1.0 - prop.probabilities(i))) * (y(i) - m0(i)) + m0(i);
        switch (estimand) {
            case Estimand::counterfactual_mean_treated: acc += t1; break;
            case Estimand::counterfactual_mean_control: acc += t0; break;
            case Estimand::ate: acc += t1 - t0; break;
        }
    }

    PooledEstimate pooled = pool(aipw_all_centers(data, prop.probabilities, m1, m0),
                                 WeightScheme::equal_patients, estimand);
    pooled.value = acc / static_cast<double>(data.n());
    return pooled;
}

ClusterRandomizedEstimate cluster_randomized_mean(const TrialDataset& data,
                                                  const Eigen::VectorXd& p_hat,
                                                  const Eigen::VectorXd& m1_hat,
                                                  const Eigen::VectorXd& m0_hat,
                                                  Estimand estimand) {
    if (!data.has_clusters())
        throw DataError("cluster_randomized_mean requires a cluster column");
    const int n_clusters = data.cluster_count();

    ClusterRandomizedEstimate out;
    out.estimand = estimand;
    out.per_cluster.reserve(n_clusters);

    double acc = 0.0;
    for (int j = 0; j < n_clusters; ++j) {
        const auto& rows = data.cluster_rows()[j];
        const int a0 = data.records()[rows.front()].treatment;
        for (int idx : rows)
            if (data.records()[idx].treatment != a0)
                throw DataError("treatment varies within cluster '" + data.cluster_ids()[j] +
                                "'");

        ClusterEstimate ce;
        ce.cluster_id = data.cluster_ids()[j];
        ce.n_j = static_cast<int>(rows.size());
        double s1 = 0.0, s0 = 0.0, ybar = 0.0;
        const double p = p_hat(rows.front()); // constant within the cluster
        for (int idx : rows) {
            const double y = data.records()[idx].outcome;
            const double a = static_cast<double>(a0);
            s1 += (a / p) * (y - m1_hat(idx)) + m1_hat(idx);
            s0 += ((1.0 - a) / (1.0 - p)) * (y - m0_hat(idx)) + m0_hat(idx);
            ybar += y;
        }
        ce.psi1_hat = s1 / ce.n_j;
        ce.psi0_hat = s0 / ce.n_j;
        ce.ate_hat = ce.psi1_hat - ce.psi0_hat;
        ybar /= ce.n_j;
        ce.if1 = (a0 / p) * (ybar - ce.psi1_hat) + ce.psi1_hat;
        ce.if0 = ((1.0 - a0) / (1.0 - p)) * (ybar - ce.psi0_hat) + ce.psi0_hat;

        switch (estimand) {
            case Estimand::counterfactual_mean_treated: acc += ce.psi1_hat; break;
            case Estimand::counterfactual_mean_control: acc += ce.psi0_hat; break;
            case Estimand::ate: acc += ce.ate_hat; break;
        }
        out.per_cluster.push_back(std::move(ce));
    }
    out.value = acc / static_cast<double>(n_clusters);
    return out;
}

// ---------------------------------------------------------------------------
// Roster
// ---------------------------------------------------------------------------

std::string roster_display_name(RosterEstimator kind) {
    switch (kind) {
        case RosterEstimator::naive: return "Naive";
        case RosterEstimator::fixed: return "Fixed";
        case RosterEstimator::mixed_1c: return "Mixed(1|c)";
        case RosterEstimator::mixed_1c_sam: return "Mixed(1|c) Sam.";
        case RosterEstimator::mixed_1Ac: return "Mixed(1+A|c)";
        case RosterEstimator::mixed_1Ac_sam: return "Mixed(1+A|c) Sam.";
    }
    return "?";
}

RosterEstimator parse_roster_estimator(const std::string& token) {
    std::string t;
    for (char ch : token) t.push_back(static_cast<char>(std::tolower(ch)));
    if (t == "naive") return RosterEstimator::naive;
    if (t == "fixed") return RosterEstimator::fixed;
    if (t == "mixed_1c" || t == "mixed(1|c)") return RosterEstimator::mixed_1c;
    if (t == "mixed_1c_sam" || t == "mixed(1|c) sam" || t == "mixed(1|c) sam.")
        return RosterEstimator::mixed_1c_sam;
    if (t == "mixed_1ac" || t == "mixed(1+a|c)") return RosterEstimator::mixed_1Ac;
    if (t == "mixed_1ac_sam" || t == "mixed(1+a|c) sam" || t == "mixed(1+a|c) sam.")
        return RosterEstimator::mixed_1Ac_sam;
    throw ConfigError("unknown estimator '" + token + "'");
}

EstimatorRecipe roster_recipe(RosterEstimator kind, bool adjusted, int n_covariates) {
    EstimatorRecipe recipe;
    recipe.kind = kind;
    recipe.adjusted = adjusted;
    recipe.outcome_design.include_treatment = true;
    if (adjusted)
        for (int j = 0; j < n_covariates; ++j)
            recipe.outcome_design.covariate_columns.push_back(j);

    switch (kind) {
        case RosterEstimator::naive:
            recipe.naive_pooling = true;
            recipe.propensity.variant = PropensityPolicy::Variant::marginal;
            return recipe;
        case RosterEstimator::fixed:
            recipe.outcome_design.center_indicators = true;
            break;
        case RosterEstimator::mixed_1c:
        case RosterEstimator::mixed_1c_sam:
            recipe.mixed_model = true;
            recipe.random_effects.random_intercept = true;
            break;
        case RosterEstimator::mixed_1Ac:
        case RosterEstimator::mixed_1Ac_sam:
            recipe.mixed_model = true;
            recipe.random_effects.random_intercept = true;
            recipe.random_effects.random_treatment_slope = true;
            break;
    }
    if (kind == RosterEstimator::mixed_1c_sam || kind == RosterEstimator::mixed_1Ac_sam)
        recipe.prediction = PredictionMode::Variant::sampled;
    // Proposed estimators share the mixed propensity with a random center
    // intercept; covariates in the treatment model stay opt-in.
    recipe.propensity.variant = PropensityPolicy::Variant::mixed_logistic;
    return recipe;
}

} // namespace clustrial
