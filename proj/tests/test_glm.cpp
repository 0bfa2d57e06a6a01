#include <doctest.h>

#include <cmath>

#include "clustrial/glm.hpp"
#include "clustrial/rng.hpp"

using namespace clustrial;

namespace {

TrialDataset make_dataset(const std::vector<std::string>& centers,
                          const std::vector<int>& treatment, const std::vector<double>& outcome,
                          const std::vector<std::vector<double>>& covariates,
                          OutcomeFamily family) {
    std::vector<PatientRecord> records;
    for (std::size_t i = 0; i < outcome.size(); ++i) {
        PatientRecord r;
        r.patient_id = std::to_string(i);
        r.center_id = centers[i];
        r.treatment = treatment[i];
        r.outcome = outcome[i];
        r.covariates = covariates[i];
        records.push_back(std::move(r));
    }
    std::vector<std::string> names;
    for (std::size_t j = 0; j < covariates.front().size(); ++j)
        names.push_back("x" + std::to_string(j + 1));
    return TrialDataset(records, family, names);
}

TrialDataset random_dataset(Rng& rng, int n, int k, OutcomeFamily family) {
    std::vector<std::string> centers;
    std::vector<int> treatment;
    std::vector<double> outcome;
    std::vector<std::vector<double>> covariates;
    for (int i = 0; i < n; ++i) {
        centers.push_back("c" + std::to_string(i % k));
        const int a = rng.bernoulli(0.5) ? 1 : 0;
        const double x = rng.normal();
        treatment.push_back(a);
        covariates.push_back({x});
        if (family == OutcomeFamily::gaussian) {
            outcome.push_back(0.5 + 0.8 * a + 0.6 * x + rng.normal());
        } else {
            const double p = inverse_logit(-0.2 + 0.7 * a + 0.5 * x);
            outcome.push_back(rng.bernoulli(p) ? 1.0 : 0.0);
        }
    }
    return make_dataset(centers, treatment, outcome, covariates, family);
}

} // namespace

TEST_CASE("gaussian intercept-only fit is the sample mean") {
    const TrialDataset data = make_dataset({"A", "A", "B"}, {1, 0, 1}, {1.0, 2.0, 3.0},
                                           {{0.0}, {0.0}, {0.0}}, OutcomeFamily::gaussian);
    DesignSpec design;
    design.include_treatment = false;
    const GlmFit fit = fit_glm(data, design);
    CHECK(fit.coefficients(0) == doctest::Approx(2.0).epsilon(1e-12));
}

TEST_CASE("binomial intercept-only fit is the logit of the proportion") {
    const TrialDataset data = make_dataset({"A", "A", "B", "B"}, {1, 1, 0, 0},
                                           {1.0, 1.0, 0.0, 0.0}, {{0.0}, {0.0}, {0.0}, {0.0}},
                                           OutcomeFamily::binomial_logit);
    DesignSpec design;
    design.include_treatment = false;
    const GlmFit fit = fit_glm(data, design);
    CHECK(fit.converged);
    CHECK(std::abs(fit.coefficients(0)) < 1e-9);
}

TEST_CASE("gaussian fit matches the normal-equations solution") {
    Rng rng(11);
    const TrialDataset data = random_dataset(rng, 20, 4, OutcomeFamily::gaussian);
    DesignSpec design;
    design.covariate_columns = {0};
    const GlmFit fit = fit_glm(data, design);

    // Independent direct solve of X'X beta = X'y.
    const Eigen::MatrixXd x = build_design(data, design, {});
    const Eigen::VectorXd y = data.outcomes();
    const Eigen::VectorXd beta =
        (x.transpose() * x).ldlt().solve(x.transpose() * y);
    for (int j = 0; j < beta.size(); ++j)
        CHECK(fit.coefficients(j) ==
              doctest::Approx(beta(j)).epsilon(1e-10));
    CHECK(fit.max_abs_score < 1e-10);
}

TEST_CASE("canonical-link score constraints hold at the MLE") {
    Rng rng(13);
    for (OutcomeFamily family : {OutcomeFamily::gaussian, OutcomeFamily::binomial_logit}) {
        const TrialDataset data = random_dataset(rng, 120, 6, family);
        DesignSpec design;
        design.covariate_columns = {0};
        const GlmFit fit = fit_glm(data, design);
        REQUIRE(fit.converged);
        const Eigen::VectorXd m1 = predict_counterfactual(fit, data, 1);
        const Eigen::VectorXd m0 = predict_counterfactual(fit, data, 0);
        const Eigen::VectorXd a = data.treatments();
        const Eigen::VectorXd y = data.outcomes();
        const double p_hat = a.mean();
        double treated = 0.0, control = 0.0;
        for (int i = 0; i < data.n(); ++i) {
            treated += a(i) / p_hat * (y(i) - m1(i));
            control += (1.0 - a(i)) / (1.0 - p_hat) * (y(i) - m0(i));
        }
        CHECK(std::abs(treated / data.n()) < 1e-8);
        CHECK(std::abs(control / data.n()) < 1e-8);
    }
}

TEST_CASE("prediction under an arm evaluates the linear predictor") {
    const TrialDataset data = make_dataset({"A", "B"}, {0, 1}, {0.0, 0.0}, {{5.0}, {-2.0}},
                                           OutcomeFamily::gaussian);
    DesignSpec design;
    design.covariate_columns = {0};
    GlmFit fit;
    fit.family = OutcomeFamily::gaussian;
    fit.design = design;
    fit.coefficients = Eigen::Vector3d(1.0, 2.0, 0.0); // alpha=1, beta=2, gamma=0
    const Eigen::VectorXd m1 = predict_counterfactual(fit, data, 1);
    CHECK(m1(0) == doctest::Approx(3.0));
    CHECK(m1(1) == doctest::Approx(3.0));
}

TEST_CASE("binomial zero coefficients predict one half everywhere") {
    const TrialDataset data = make_dataset({"A", "B"}, {0, 1}, {0.0, 1.0}, {{5.0}, {-2.0}},
                                           OutcomeFamily::binomial_logit);
    DesignSpec design;
    design.covariate_columns = {0};
    GlmFit fit;
    fit.family = OutcomeFamily::binomial_logit;
    fit.design = design;
    fit.coefficients = Eigen::Vector3d::Zero();
    const Eigen::VectorXd m0 = predict_counterfactual(fit, data, 0);
    CHECK(m0(0) == doctest::Approx(0.5));
    CHECK(m0(1) == doctest::Approx(0.5));
}

TEST_CASE("gaussian counterfactual contrast is the treatment coefficient") {
    Rng rng(17);
    const TrialDataset data = random_dataset(rng, 50, 5, OutcomeFamily::gaussian);
    DesignSpec design;
    design.covariate_columns = {0};
    const GlmFit fit = fit_glm(data, design);
    const Eigen::VectorXd diff =
        predict_counterfactual(fit, data, 1) - predict_counterfactual(fit, data, 0);
    for (int i = 0; i < diff.size(); ++i)
        CHECK(diff(i) == doctest::Approx(fit.coefficients(1)).epsilon(1e-12));
}

TEST_CASE("logistic fitted probabilities are invariant to covariate rescaling") {
    Rng rng(19);
    const TrialDataset base = random_dataset(rng, 150, 5, OutcomeFamily::binomial_logit);
    std::vector<PatientRecord> scaled = base.records();
    for (PatientRecord& r : scaled) r.covariates[0] = 100.0 * r.covariates[0] + 5.0;
    const TrialDataset rescaled(scaled, OutcomeFamily::binomial_logit, base.covariate_names());

    DesignSpec design;
    design.covariate_columns = {0};
    const GlmFit f1 = fit_glm(base, design);
    const GlmFit f2 = fit_glm(rescaled, design);
    REQUIRE(f1.converged);
    REQUIRE(f2.converged);
    const Eigen::VectorXd p1 = predict_counterfactual(f1, base, 1);
    const Eigen::VectorXd p2 = predict_counterfactual(f2, rescaled, 1);
    CHECK((p1 - p2).cwiseAbs().maxCoeff() < 1e-8);
}

TEST_CASE("center indicators: aliased or separated columns are dropped with a warning") {
    // Center C has all outcomes 1 under the binomial family, so its
    // indicator separates the data.
    std::vector<std::string> centers;
    std::vector<int> treatment;
    std::vector<double> outcome;
    std::vector<std::vector<double>> covariates;
    Rng rng(23);
    for (int i = 0; i < 60; ++i) {
        const char* c = i < 20 ? "A" : (i < 40 ? "B" : "C");
        centers.push_back(c);
        const int a = i % 2;
        treatment.push_back(a);
        covariates.push_back({rng.normal()});
        if (std::string(c) == "C")
            outcome.push_back(1.0);
        else
            outcome.push_back(rng.bernoulli(inverse_logit(0.2 * a)) ? 1.0 : 0.0);
    }
    const TrialDataset data =
        make_dataset(centers, treatment, outcome, covariates, OutcomeFamily::binomial_logit);
    DesignSpec design;
    design.center_indicators = true;
    const GlmFit fit = fit_glm(data, design);
    CHECK(fit.converged);
    CHECK(!fit.dropped_columns.empty());
    CHECK(!fit.warnings.empty());
}

TEST_CASE("rank deficiency among non-droppable columns is an error") {
    Rng rng(29);
    std::vector<std::string> centers;
    std::vector<int> treatment;
    std::vector<double> outcome;
    std::vector<std::vector<double>> covariates;
    for (int i = 0; i < 20; ++i) {
        centers.push_back(i % 2 ? "A" : "B");
        treatment.push_back(i % 2);
        const double x = rng.normal();
        covariates.push_back({x, 2.0 * x}); // x2 aliased with x1
        outcome.push_back(rng.normal());
    }
    const TrialDataset data =
        make_dataset(centers, treatment, outcome, covariates, OutcomeFamily::gaussian);
    DesignSpec design;
    design.covariate_columns = {0, 1};
    CHECK_THROWS_AS(fit_glm(data, design), FitError);
}

TEST_CASE("per-arm fits predict from the arm-specific models") {
    Rng rng(31);
    const TrialDataset data = random_dataset(rng, 200, 4, OutcomeFamily::gaussian);
    DesignSpec design;
    design.covariate_columns = {0};
    design.fit_per_arm = true;
    const GlmFit fit = fit_glm(data, design);
    REQUIRE(fit.converged);

    // Each arm's prediction must match a plain least-squares fit on that arm.
    for (int arm : {0, 1}) {
        std::vector<double> xs, ys;
        for (const PatientRecord& r : data.records())
            if (r.treatment == arm) {
                xs.push_back(r.covariates[0]);
                ys.push_back(r.outcome);
            }
        Eigen::MatrixXd x(xs.size(), 2);
        Eigen::VectorXd y(ys.size());
        for (std::size_t i = 0; i < xs.size(); ++i) {
            x(static_cast<int>(i), 0) = 1.0;
            x(static_cast<int>(i), 1) = xs[i];
            y(static_cast<int>(i)) = ys[i];
        }
        const Eigen::VectorXd beta = (x.transpose() * x).ldlt().solve(x.transpose() * y);
        const Eigen::VectorXd pred = predict_counterfactual(fit, data, arm);
        for (int i = 0; i < 5; ++i) {
            const double expected = beta(0) + beta(1) * data.records()[i].covariates[0];
            CHECK(pred(i) == doctest::Approx(expected).epsilon(1e-9));
        }
    }
}

TEST_CASE("predicting a center unseen at fit time is an error") {
    Rng rng(37);
    const TrialDataset data = random_dataset(rng, 40, 4, OutcomeFamily::gaussian);
    DesignSpec design;
    design.center_indicators = true;
    GlmFit fit = fit_glm(data, design);
    fit.center_levels = {"zz1", "zz2"}; // simulate a fit from different centers
    CHECK_THROWS_AS(predict_counterfactual(fit, data, 1), FitError);
}
