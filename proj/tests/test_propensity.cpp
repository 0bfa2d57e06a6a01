#include <doctest.h>

#include <cmath>

#include "clustrial/glm.hpp"
#include "clustrial/propensity.hpp"
#include "clustrial/rng.hpp"

using namespace clustrial;

namespace {

TrialDataset simple_randomized(int k, int n_per_center, double p_treat, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<PatientRecord> records;
    for (int c = 0; c < k; ++c)
        for (int i = 0; i < n_per_center; ++i) {
            PatientRecord r;
            r.patient_id = std::to_string(c * n_per_center + i);
            r.center_id = "c" + std::to_string(c);
            r.treatment = rng.bernoulli(p_treat) ? 1 : 0;
            r.covariates = {rng.normal()};
            r.outcome = rng.normal();
            records.push_back(std::move(r));
        }
    return TrialDataset(records, OutcomeFamily::gaussian, {"x1"});
}

TrialDataset fixed_assignment(const std::vector<std::pair<std::string, int>>& rows) {
    std::vector<PatientRecord> records;
    int i = 0;
    for (const auto& [center, a] : rows) {
        PatientRecord r;
        r.patient_id = std::to_string(++i);
        r.center_id = center;
        r.treatment = a;
        r.covariates = {0.0};
        r.outcome = 0.0;
        records.push_back(std::move(r));
    }
    return TrialDataset(records, OutcomeFamily::gaussian, {"x1"});
}

} // namespace

TEST_CASE("marginal policy returns the treated fraction for everyone") {
    std::vector<std::pair<std::string, int>> rows;
    for (int i = 0; i < 10; ++i) rows.push_back({i % 2 ? "A" : "B", i < 4 ? 1 : 0});
    const TrialDataset data = fixed_assignment(rows);
    PropensityPolicy policy;
    policy.variant = PropensityPolicy::Variant::marginal;
    const PropensityResult result = estimate_propensity(data, policy);
    for (int i = 0; i < data.n(); ++i) CHECK(result.probabilities(i) == doctest::Approx(0.4));
    CHECK(result.clamped_count == 0);
}

TEST_CASE("all-treated or all-control data is rejected") {
    std::vector<std::pair<std::string, int>> rows;
    for (int i = 0; i < 8; ++i) rows.push_back({i % 2 ? "A" : "B", 1});
    const TrialDataset data = fixed_assignment(rows);
    PropensityPolicy policy;
    policy.variant = PropensityPolicy::Variant::marginal;
    CHECK_THROWS_AS(estimate_propensity(data, policy), DataError);
}

TEST_CASE("mixed policy with a vanishing center variance matches the marginal estimate") {
    // Treatment independent of center: the random intercept collapses and the
    // conditional predictions reduce to the overall logistic fit.
    const TrialDataset data = simple_randomized(80, 12, 0.5, 42);
    PropensityPolicy policy;
    const PropensityResult mixed = estimate_propensity(data, policy);
    CHECK(mixed.sigma2_center < 0.01);

    const double marginal = data.treatments().mean();
    if (mixed.sigma2_center == 0.0) {
        for (int i = 0; i < data.n(); ++i)
            CHECK(mixed.probabilities(i) == doctest::Approx(marginal).epsilon(1e-6));
    } else {
        for (int i = 0; i < data.n(); ++i)
            CHECK(mixed.probabilities(i) == doctest::Approx(marginal).epsilon(0.05));
    }
}

TEST_CASE("an all-treated center is shrunk toward the marginal estimate") {
    Rng rng(7);
    std::vector<PatientRecord> records;
    // 29 balanced centers plus one small all-treated center.
    for (int c = 0; c < 29; ++c)
        for (int i = 0; i < 10; ++i) {
            PatientRecord r;
            r.patient_id = std::to_string(c * 10 + i);
            r.center_id = "c" + std::to_string(c);
            r.treatment = i < 5 ? 1 : 0;
            r.covariates = {rng.normal()};
            r.outcome = 0.0;
            records.push_back(std::move(r));
        }
    for (int i = 0; i < 6; ++i) {
        PatientRecord r;
        r.patient_id = "t" + std::to_string(i);
        r.center_id = "all_treated";
        r.treatment = 1;
        r.covariates = {rng.normal()};
        r.outcome = 0.0;
        records.push_back(std::move(r));
    }
    const TrialDataset data(records, OutcomeFamily::gaussian, {"x1"});

    PropensityPolicy policy;
    const PropensityResult result = estimate_propensity(data, policy);
    const double marginal = data.treatments().mean();

    const int first_treated_row = 29 * 10;
    const double p_c = result.probabilities(first_treated_row);
    CHECK(p_c > marginal);            // pulled toward the center's own data
    CHECK(p_c < policy.clamp_high);   // strictly inside the clamp
    CHECK(p_c < 1.0);

    // Shrinkage magnitude roughly follows the linear-probability closed form
    // v_c = s2 / (s2 + p(1-p)/n_c) * (Abar_c - p).
    if (result.sigma2_center > 0.0) {
        const double s2 = result.sigma2_center;
        const double n_c = 6.0;
        const double v = s2 / (s2 + marginal * (1.0 - marginal) / n_c) * (1.0 - marginal);
        CHECK(std::abs((p_c - marginal) - v) < 0.1);
    }
}

TEST_CASE("emitted probabilities respect the clamp and report the clamp count") {
    std::vector<std::pair<std::string, int>> rows;
    for (int i = 0; i < 40; ++i) rows.push_back({i % 2 ? "A" : "B", i == 0 ? 1 : 0});
    const TrialDataset data = fixed_assignment(rows);
    PropensityPolicy policy;
    policy.variant = PropensityPolicy::Variant::marginal;
    policy.clamp_low = 0.10;
    policy.clamp_high = 0.90;
    const PropensityResult result = estimate_propensity(data, policy);
    for (int i = 0; i < data.n(); ++i) CHECK(result.probabilities(i) == doctest::Approx(0.10));
    CHECK(result.clamped_count == data.n());
}

TEST_CASE("invalid clamp bounds are rejected") {
    const TrialDataset data = simple_randomized(4, 4, 0.5, 3);
    PropensityPolicy policy;
    policy.clamp_low = 0.6;
    policy.clamp_high = 0.4;
    CHECK_THROWS_AS(estimate_propensity(data, policy), ConfigError);
}

TEST_CASE("center-mean predictions concentrate around one half as k grows") {
    // Simple randomized experiment: the spread of center-level predictions
    // shrinks with more centers (the variance component estimate tightens).
    double previous_sd = 1e9;
    for (int k : {10, 50, 200}) {
        double sd_acc = 0.0;
        const int reps = 60;
        for (int rep = 0; rep < reps; ++rep) {
            const TrialDataset data =
                simple_randomized(k, 8, 0.5, 1000 + static_cast<std::uint64_t>(k) * 31 + rep);
            PropensityPolicy policy;
            const PropensityResult result = estimate_propensity(data, policy);
            // Center means of the per-patient predictions.
            double mean_of_means = 0.0;
            std::vector<double> center_means(data.k(), 0.0);
            for (int c = 0; c < data.k(); ++c) {
                double m = 0.0;
                for (int row : data.center_rows()[c]) m += result.probabilities(row);
                center_means[c] = m / static_cast<double>(data.center_rows()[c].size());
                mean_of_means += center_means[c];
            }
            mean_of_means /= data.k();
            double var = 0.0;
            for (double m : center_means) var += (m - mean_of_means) * (m - mean_of_means);
            sd_acc += std::sqrt(var / (data.k() - 1));
        }
        const double sd = sd_acc / reps;
        CHECK(sd <= previous_sd + 1e-12);
        previous_sd = sd;
    }
}

TEST_CASE("cluster-level propensity is constant within clusters") {
    Rng rng(11);
    std::vector<PatientRecord> records;
    for (int j = 0; j < 12; ++j) {
        const int a = j % 2;
        for (int i = 0; i < 5; ++i) {
            PatientRecord r;
            r.patient_id = std::to_string(j * 5 + i);
            r.center_id = "cl" + std::to_string(j);
            r.cluster_id = "cl" + std::to_string(j);
            r.treatment = a;
            r.covariates = {rng.normal() + a}; // cluster-level signal
            r.outcome = rng.normal();
            records.push_back(std::move(r));
        }
    }
    const TrialDataset data(records, OutcomeFamily::gaussian, {"x1"});

    PropensityPolicy policy;
    policy.covariate_columns = {0};
    const PropensityResult result = estimate_propensity_cluster(data, policy);
    for (int j = 0; j < data.cluster_count(); ++j) {
        const auto& rows = data.cluster_rows()[j];
        for (int row : rows)
            CHECK(result.probabilities(row) == result.probabilities(rows.front()));
    }

    PropensityPolicy marginal_policy;
    const PropensityResult marginal = estimate_propensity_cluster(data, marginal_policy);
    for (int i = 0; i < data.n(); ++i)
        CHECK(marginal.probabilities(i) == doctest::Approx(0.5));
}
