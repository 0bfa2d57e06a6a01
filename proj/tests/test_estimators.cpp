#include <doctest.h>

#include <cmath>

#include "clustrial/estimators.hpp"
#include "clustrial/rng.hpp"
#include "clustrial/simgen.hpp"

using namespace clustrial;

namespace {

TrialDataset make_dataset(const std::vector<std::string>& centers,
                          const std::vector<int>& treatment, const std::vector<double>& outcome,
                          OutcomeFamily family = OutcomeFamily::gaussian) {
    std::vector<PatientRecord> records;
    for (std::size_t i = 0; i < outcome.size(); ++i) {
        PatientRecord r;
        r.patient_id = std::to_string(i);
        r.center_id = centers[i];
        r.treatment = treatment[i];
        r.outcome = outcome[i];
        r.covariates = {0.0};
        records.push_back(std::move(r));
    }
    return TrialDataset(records, family, {"x1"});
}

} // namespace

TEST_CASE("aipw_center hand examples") {
    SUBCASE("zero model, p = 0.5, patients (1,2) and (0,1)") {
        Eigen::VectorXd a(2), y(2), p(2), m1(2), m0(2);
        a << 1, 0;
        y << 2, 1;
        p.setConstant(0.5);
        m1.setZero();
        m0.setZero();
        const CenterEstimate est = aipw_center("c", a, y, p, m1, m0);
        CHECK(est.tau1_hat == doctest::Approx(2.0).epsilon(1e-14));
        CHECK(est.tau0_hat == doctest::Approx(1.0).epsilon(1e-14));
        CHECK(est.tau_hat == doctest::Approx(1.0).epsilon(1e-14));
        CHECK(est.tau_hat == est.tau1_hat - est.tau0_hat);
    }
    SUBCASE("a perfect model wipes out the augmentation term") {
        Eigen::VectorXd a(4), y(4), p(4), m1(4), m0(4);
        a << 1, 1, 0, 0;
        y << 2.0, 3.0, 0.5, 1.5;
        p.setConstant(0.5);
        m1 << 2.0, 3.0, 1.0, 4.0; // equals Y for the treated
        m0 << 0.0, 0.0, 0.5, 1.5; // equals Y for the controls
        const CenterEstimate est = aipw_center("c", a, y, p, m1, m0);
        CHECK(est.tau1_hat == doctest::Approx(m1.mean()).epsilon(1e-14));
        CHECK(est.tau0_hat == doctest::Approx(m0.mean()).epsilon(1e-14));
    }
    SUBCASE("six-patient fixture matches a direct sum") {
        Rng rng(5);
        Eigen::VectorXd a(6), y(6), p(6), m1(6), m0(6);
        for (int i = 0; i < 6; ++i) {
            a(i) = rng.bernoulli(0.5) ? 1.0 : 0.0;
            y(i) = rng.normal();
            p(i) = 0.3 + 0.4 * rng.uniform();
            m1(i) = rng.normal();
            m0(i) = rng.normal();
        }
        a(0) = 1.0;
        a(1) = 0.0; // both arms present
        const CenterEstimate est = aipw_center("c", a, y, p, m1, m0);
        double direct = 0.0;
        for (int i = 0; i < 6; ++i)
            direct += a(i) / p(i) * (y(i) - m1(i)) + m1(i);
        CHECK(est.tau1_hat == doctest::Approx(direct / 6.0).epsilon(1e-13));
    }
    SUBCASE("length mismatch is an error") {
        Eigen::VectorXd a(2), y(3), p(2), m1(2), m0(2);
        a.setZero();
        y.setZero();
        p.setConstant(0.5);
        m1.setZero();
        m0.setZero();
        CHECK_THROWS_AS(aipw_center("c", a, y, p, m1, m0), DataError);
    }
}

TEST_CASE("single-arm centers rest on the model predictions") {
    Eigen::VectorXd a(3), y(3), p(3), m1(3), m0(3);
    a.setZero(); // control only
    y << 1.0, 2.0, 3.0;
    p.setConstant(0.4);
    m1 << 5.0, 6.0, 7.0;
    m0 << 1.0, 2.0, 3.0;
    const CenterEstimate est = aipw_center("c", a, y, p, m1, m0);
    CHECK(est.n_treated == 0);
    CHECK(est.tau1_hat == doctest::Approx(6.0)); // pure model prediction
}

TEST_CASE("pool hand examples") {
    std::vector<CenterEstimate> centers(2);
    centers[0].center_id = "A";
    centers[0].n_c = 1;
    centers[0].tau_hat = 1.0;
    centers[1].center_id = "B";
    centers[1].n_c = 3;
    centers[1].tau_hat = 3.0;
    SUBCASE("equal centers") {
        const PooledEstimate pooled = pool(centers, WeightScheme::equal_centers, Estimand::ate);
        CHECK(pooled.value == doctest::Approx(2.0).epsilon(1e-14));
    }
    SUBCASE("equal patients") {
        const PooledEstimate pooled = pool(centers, WeightScheme::equal_patients, Estimand::ate);
        CHECK(pooled.value == doctest::Approx(0.25 * 1.0 + 0.75 * 3.0).epsilon(1e-14));
    }
    SUBCASE("k=5 fixture matches a dot product") {
        Rng rng(77);
        std::vector<CenterEstimate> five(5);
        for (int c = 0; c < 5; ++c) {
            five[c].center_id = std::to_string(c);
            five[c].n_c = 1 + static_cast<int>(rng.uniform() * 9);
            five[c].tau_hat = rng.normal();
        }
        const PooledEstimate pooled = pool(five, WeightScheme::equal_patients, Estimand::ate);
        double total = 0.0, dot = 0.0;
        for (const auto& ce : five) total += ce.n_c;
        for (const auto& ce : five) dot += ce.n_c / total * ce.tau_hat;
        CHECK(pooled.value == doctest::Approx(dot).epsilon(1e-13));
    }
}

TEST_CASE("ATE pooling is additive in the counterfactual means") {
    Rng rng(123);
    DgmSpec spec;
    spec.sigma2_b0 = 0.1;
    spec.seed = 99;
    const TrialDataset data = generate(spec);
    Eigen::VectorXd p(data.n()), m1(data.n()), m0(data.n());
    for (int i = 0; i < data.n(); ++i) {
        p(i) = 0.5;
        m1(i) = rng.normal();
        m0(i) = rng.normal();
    }
    const auto centers = aipw_all_centers(data, p, m1, m0);
    for (WeightScheme scheme : {WeightScheme::equal_centers, WeightScheme::equal_patients}) {
        const double ate = pool(centers, scheme, Estimand::ate).value;
        const double t1 = pool(centers, scheme, Estimand::counterfactual_mean_treated).value;
        const double t0 = pool(centers, scheme, Estimand::counterfactual_mean_control).value;
        CHECK(ate == doctest::Approx(t1 - t0).epsilon(1e-13));
    }
}

TEST_CASE("naive_aipw equals equal-patient pooling of per-center estimates") {
    DgmSpec spec;
    spec.sigma2_b0 = 0.05;
    spec.seed = 321;
    const TrialDataset data = generate(spec);
    DesignSpec design;
    design.covariate_columns = {0, 1, 2, 3};
    const GlmFit fit = fit_glm(data, design);
    PropensityPolicy policy;
    policy.variant = PropensityPolicy::Variant::marginal;

    const PooledEstimate direct = naive_aipw(data, fit, policy, Estimand::ate);
    const PropensityResult prop = estimate_propensity(data, policy);
    const Eigen::VectorXd m1 = predict_counterfactual(fit, data, 1);
    const Eigen::VectorXd m0 = predict_counterfactual(fit, data, 0);
    const PooledEstimate routed = pool(aipw_all_centers(data, prop.probabilities, m1, m0),
                                       WeightScheme::equal_patients, Estimand::ate);
    CHECK(direct.value == doctest::Approx(routed.value).epsilon(1e-12));
}

TEST_CASE("G-computation identity for canonical GLM fits with marginal propensity") {
    for (EndpointKind endpoint : {EndpointKind::continuous, EndpointKind::binary}) {
        DgmSpec spec;
        spec.endpoint = endpoint;
        spec.sigma2_b0 = 0.1;
        spec.setting = 2;
        spec.seed = endpoint == EndpointKind::continuous ? 11 : 12;
        const TrialDataset data = generate(spec);
        DesignSpec design;
        design.covariate_columns = {0, 1, 2, 3};
        const GlmFit fit = fit_glm(data, design);
        REQUIRE(fit.converged);
        PropensityPolicy policy;
        policy.variant = PropensityPolicy::Variant::marginal;
        const PooledEstimate aipw = naive_aipw(data, fit, policy, Estimand::ate);
        const Eigen::VectorXd m1 = predict_counterfactual(fit, data, 1);
        const Eigen::VectorXd m0 = predict_counterfactual(fit, data, 0);
        CHECK(std::abs(aipw.value - (m1 - m0).mean()) < 1e-8);
    }
}

TEST_CASE("zero model with marginal propensity reduces to the Horvitz-Thompson contrast") {
    const TrialDataset data = make_dataset({"A", "A", "B", "B", "B", "B"}, {1, 0, 1, 0, 1, 0},
                                           {2.0, 1.0, 4.0, 3.0, 6.0, 5.0});
    Eigen::VectorXd p = Eigen::VectorXd::Constant(6, 0.5);
    Eigen::VectorXd zero = Eigen::VectorXd::Zero(6);
    const auto centers = aipw_all_centers(data, p, zero, zero);
    const double ate = pool(centers, WeightScheme::equal_patients, Estimand::ate).value;
    // Difference of arm means with p = marginal = 0.5 and equal arm counts.
    CHECK(ate == doctest::Approx((2.0 + 4.0 + 6.0) / 3.0 - (1.0 + 3.0 + 5.0) / 3.0));
}

TEST_CASE("weighting equivalence: the two schemes converge when sizes carry no information") {
    // Oracle influence values (true p, zero model), independent sizes.
    Rng rng(2024);
    const int reps = 200;
    double sum_diff = 0.0, sum_diff_sq = 0.0;
    for (int rep = 0; rep < reps; ++rep) {
        std::vector<PatientRecord> records;
        const int k = 500;
        for (int c = 0; c < k; ++c) {
            const double effect = 0.5 + 0.3 * rng.normal();
            const int n_c = 2 + static_cast<int>(rng.uniform() * 6);
            for (int i = 0; i < n_c; ++i) {
                PatientRecord r;
                r.patient_id = std::to_string(records.size());
                r.center_id = "c" + std::to_string(c);
                r.treatment = rng.bernoulli(0.5) ? 1 : 0;
                r.covariates = {0.0};
                r.outcome = effect * r.treatment + rng.normal();
                records.push_back(std::move(r));
            }
        }
        const TrialDataset data(records, OutcomeFamily::gaussian, {"x1"});
        const Eigen::VectorXd p = Eigen::VectorXd::Constant(data.n(), 0.5);
        const Eigen::VectorXd zero = Eigen::VectorXd::Zero(data.n());
        const auto centers = aipw_all_centers(data, p, zero, zero);
        const double diff = pool(centers, WeightScheme::equal_centers, Estimand::ate).value -
                            pool(centers, WeightScheme::equal_patients, Estimand::ate).value;
        sum_diff += diff;
        sum_diff_sq += diff * diff;
    }
    const double mean_diff = sum_diff / reps;
    const double var_diff = (sum_diff_sq - reps * mean_diff * mean_diff) / (reps - 1);
    const double se = std::sqrt(var_diff / reps);
    CHECK(std::abs(mean_diff) < 3.0 * se);
}

TEST_CASE("double robustness: wrong outcome model, correct propensity") {
    Rng rng(555);
    const int reps = 500;
    const double true_ate = 0.7;
    double sum = 0.0, sum_sq = 0.0;
    for (int rep = 0; rep < reps; ++rep) {
        std::vector<PatientRecord> records;
        for (int c = 0; c < 20; ++c)
            for (int i = 0; i < 6; ++i) {
                PatientRecord r;
                r.patient_id = std::to_string(records.size());
                r.center_id = "c" + std::to_string(c);
                r.treatment = rng.bernoulli(0.5) ? 1 : 0;
                const double x = rng.normal();
                r.covariates = {x};
                r.outcome = 1.0 + true_ate * r.treatment + 0.8 * x + rng.normal();
                records.push_back(std::move(r));
            }
        const TrialDataset data(records, OutcomeFamily::gaussian, {"x1"});
        // Deliberately wrong predictions; exact randomization probability.
        Eigen::VectorXd p = Eigen::VectorXd::Constant(data.n(), 0.5);
        Eigen::VectorXd m1(data.n()), m0(data.n());
        for (int i = 0; i < data.n(); ++i) {
            m1(i) = 5.0 + 2.0 * data.records()[i].covariates[0];
            m0(i) = -1.0;
        }
        const auto centers = aipw_all_centers(data, p, m1, m0);
        sum += pool(centers, WeightScheme::equal_centers, Estimand::ate).value;
        sum_sq += pool(centers, WeightScheme::equal_centers, Estimand::ate).value *
                  pool(centers, WeightScheme::equal_centers, Estimand::ate).value;
    }
    const double mean = sum / reps;
    const double var = (sum_sq - reps * mean * mean) / (reps - 1);
    const double mc_se = std::sqrt(var / reps);
    CHECK(std::abs(mean - true_ate) < 3.0 * mc_se);
}

// ---------------------------------------------------------------------------
// Cluster-randomized estimator
// ---------------------------------------------------------------------------

TEST_CASE("cluster-randomized mean hand example") {
    // Two clusters, zero model, p = 0.5: psi1 = mean over clusters of
    // (A_j / 0.5) * Ybar_j.
    std::vector<PatientRecord> records;
    const double outcomes[4] = {1.0, 3.0, 2.0, 6.0};
    for (int i = 0; i < 4; ++i) {
        PatientRecord r;
        r.patient_id = std::to_string(i);
        r.center_id = i < 2 ? "u" : "v";
        r.cluster_id = i < 2 ? "u" : "v";
        r.treatment = i < 2 ? 1 : 0;
        r.outcome = outcomes[i];
        r.covariates = {0.0};
        records.push_back(std::move(r));
    }
    const TrialDataset data(records, OutcomeFamily::gaussian, {"x1"});
    const Eigen::VectorXd p = Eigen::VectorXd::Constant(4, 0.5);
    const Eigen::VectorXd zero = Eigen::VectorXd::Zero(4);
    const ClusterRandomizedEstimate est = cluster_randomized_mean(
        data, p, zero, zero, Estimand::counterfactual_mean_treated);
    // Cluster u treated: (1/0.5)*2 = 4; cluster v control: 0. Mean = 2.
    CHECK(est.value == doctest::Approx(2.0).epsilon(1e-14));
    // (A/p)(Ybar - psi1) + psi1 = 2*(2-4) + 4 = 0 for the treated cluster.
    CHECK(est.per_cluster[0].if1 == doctest::Approx(0.0));
    CHECK(est.per_cluster[1].if1 == doctest::Approx(0.0)); // control: psi1 = 0 under m = 0
}

TEST_CASE("treatment varying within a cluster is rejected") {
    std::vector<PatientRecord> records;
    for (int i = 0; i < 4; ++i) {
        PatientRecord r;
        r.patient_id = std::to_string(i);
        r.center_id = i < 2 ? "u" : "v";
        r.cluster_id = i < 2 ? "u" : "v";
        r.treatment = i % 2;
        r.outcome = 0.0;
        r.covariates = {0.0};
        records.push_back(std::move(r));
    }
    const TrialDataset data(records, OutcomeFamily::gaussian, {"x1"});
    const Eigen::VectorXd p = Eigen::VectorXd::Constant(4, 0.5);
    const Eigen::VectorXd zero = Eigen::VectorXd::Zero(4);
    CHECK_THROWS_AS(cluster_randomized_mean(data, p, zero, zero, Estimand::ate), DataError);
}

TEST_CASE("ten-cluster fixture matches a direct sum") {
    const ClusterDgmSpec spec{.n_clusters = 10, .seed = 42};
    const TrialDataset data = generate_cluster_randomized(spec);
    Rng rng(43);
    Eigen::VectorXd p = Eigen::VectorXd::Constant(data.n(), 0.5);
    Eigen::VectorXd m1(data.n()), m0(data.n());
    for (int i = 0; i < data.n(); ++i) {
        m1(i) = rng.normal();
        m0(i) = rng.normal();
    }
    const ClusterRandomizedEstimate est =
        cluster_randomized_mean(data, p, m1, m0, Estimand::counterfactual_mean_treated);

    double direct = 0.0;
    for (int j = 0; j < data.cluster_count(); ++j) {
        double s = 0.0;
        for (int row : data.cluster_rows()[j]) {
            const double a = data.records()[row].treatment;
            s += a / 0.5 * (data.records()[row].outcome - m1(row)) + m1(row);
        }
        direct += s / data.cluster_rows()[j].size();
    }
    CHECK(est.value == doctest::Approx(direct / data.cluster_count()).epsilon(1e-13));
}

TEST_CASE("roster recipes map names to model triples") {
    const EstimatorRecipe naive = roster_recipe(RosterEstimator::naive, false, 4);
    CHECK(naive.naive_pooling);
    CHECK(naive.propensity.variant == PropensityPolicy::Variant::marginal);
    CHECK(naive.outcome_design.covariate_columns.empty());

    const EstimatorRecipe fixed = roster_recipe(RosterEstimator::fixed, true, 4);
    CHECK(fixed.outcome_design.center_indicators);
    CHECK(fixed.outcome_design.covariate_columns.size() == 4);
    CHECK(fixed.propensity.variant == PropensityPolicy::Variant::mixed_logistic);

    const EstimatorRecipe sam = roster_recipe(RosterEstimator::mixed_1Ac_sam, false, 4);
    CHECK(sam.mixed_model);
    CHECK(sam.random_effects.random_treatment_slope);
    CHECK(sam.prediction == PredictionMode::Variant::sampled);

    CHECK(roster_display_name(RosterEstimator::mixed_1Ac_sam) == "Mixed(1+A|c) Sam.");
    CHECK(parse_roster_estimator("Mixed_1c_Sam") == RosterEstimator::mixed_1c_sam);
    CHECK_THROWS_AS(parse_roster_estimator("bogus"), ConfigError);
}
