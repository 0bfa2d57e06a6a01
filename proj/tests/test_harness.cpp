#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include "clustrial/harness.hpp"
#include "clustrial/rng.hpp"

using namespace clustrial;

namespace {

std::string slurp(const std::string& path) {
    std::ifstream in(path);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

ScenarioConfig smoke_config() {
    ScenarioConfig config;
    config.id = "smoke";
    config.dgm.endpoint = EndpointKind::continuous;
    config.dgm.setting = 1;
    config.replications = 10;
    config.master_seed = 20250809;
    config.truth_draws = 200000;
    config.draws = 200;
    return config;
}

} // namespace

TEST_CASE("interval coverage predicate") {
    CHECK(interval_covers(-1.0, 1.0, 0.29));
    CHECK(!interval_covers(-1.0, 0.2, 0.29));
    const double inf = std::numeric_limits<double>::infinity();
    CHECK(interval_covers(-inf, inf, 1e12)); // infinite interval covers everything
}

TEST_CASE("compute_if_icc matches the ANOVA formula on a hand fixture") {
    Eigen::VectorXd v(4);
    v << 1.0, 2.0, 3.0, 5.0;
    const std::vector<int> centers = {0, 0, 1, 1};
    CHECK(compute_if_icc(v, centers, 2) == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("smoke scenario completes with estimates near the closed-form truth") {
    const ScenarioConfig config = smoke_config();
    const ScenarioResult result = run_scenario_serial(config);
    CHECK(result.truth.at(Estimand::ate).value == 0.29);
    CHECK(result.rows.size() == config.estimators.size() * 2 * 3);

    for (const EstimatorSummary& row : result.rows) {
        if (row.estimand != Estimand::ate) continue;
        if (row.used == 0) continue;
        CHECK(std::abs(row.bias) < 0.2); // estimates within 0.2 of 0.29
        // mse = variance + bias^2 on the same replication set
        const double var = row.mc_sd * row.mc_sd * (row.used - 1) / row.used;
        CHECK(row.mse >= row.bias * row.bias - 1e-12);
        CHECK(row.mse == doctest::Approx(var + row.bias * row.bias).epsilon(1e-9));
        for (const auto& [m, cov] : row.coverage) {
            CHECK(cov >= 0.0);
            CHECK(cov <= 1.0);
        }
    }
    CHECK(result.worst_failure_fraction <= 0.1);
}

TEST_CASE("serial and parallel runners write byte-identical outputs") {
    ScenarioConfig config = smoke_config();
    config.replications = 6;
    config.estimators = {RosterEstimator::naive, RosterEstimator::mixed_1c_sam};

    const ScenarioResult serial = run_scenario_serial(config);
    const ScenarioResult parallel = run_scenario(config, 4);

    const auto dir = std::filesystem::temp_directory_path();
    const std::string a = (dir / "clustrial_serial.csv").string();
    const std::string b = (dir / "clustrial_parallel.csv").string();
    write_scenario_csv(serial, a);
    write_scenario_csv(parallel, b);
    CHECK(slurp(a) == slurp(b));
    std::remove(a.c_str());
    std::remove(b.c_str());
}

TEST_CASE("scenario config loading") {
    const auto dir = std::filesystem::temp_directory_path();
    const std::string path = (dir / "clustrial_scenario.json").string();
    {
        std::ofstream out(path);
        out << R"({
            "id": "cfg_test",
            "endpoint": "binary",
            "sigma2_b0": 0.5, "sigma2_b1": 0.25,
            "setting": 2,
            "estimators": ["naive", "mixed_1c"],
            "adjusted": "unadjusted",
            "weights": "equal-patients",
            "replications": 42,
            "seed": 77,
            "methods": ["reml", "db"],
            "out": "/tmp/somewhere"
        })";
    }
    const ScenarioConfig config = load_scenario_config(path);
    CHECK(config.id == "cfg_test");
    CHECK(config.dgm.endpoint == EndpointKind::binary);
    CHECK(config.dgm.sigma2_b0 == 0.5);
    CHECK(config.dgm.setting == 2);
    CHECK(config.estimators.size() == 2);
    CHECK(config.run_unadjusted);
    CHECK(!config.run_adjusted);
    CHECK(config.scheme == WeightScheme::equal_patients);
    CHECK(config.replications == 42);
    CHECK(config.master_seed == 77);
    CHECK(config.methods.size() == 2);
    CHECK(config.out_dir == "/tmp/somewhere");
    std::remove(path.c_str());

    SUBCASE("parse errors and invalid values raise ConfigError") {
        const std::string bad = (dir / "clustrial_bad.json").string();
        {
            std::ofstream out(bad);
            out << "{ not json";
        }
        CHECK_THROWS_AS(load_scenario_config(bad), ConfigError);
        {
            std::ofstream out(bad);
            out << R"({"setting": 9})";
        }
        CHECK_THROWS_AS(load_scenario_config(bad), ConfigError);
        {
            std::ofstream out(bad);
            out << R"({"estimators": ["bogus"]})";
        }
        CHECK_THROWS_AS(load_scenario_config(bad), ConfigError);
        std::remove(bad.c_str());
    }
}

// ---------------------------------------------------------------------------
// analyze
// ---------------------------------------------------------------------------

namespace {

AnalysisConfig basic_analysis_config() {
    AnalysisConfig config;
    config.columns.outcome = "outcome";
    config.columns.treatment = "treatment";
    config.columns.center = "center_id";
    config.columns.covariates = {"z30", "age", "cd40", "wt"};
    config.family = OutcomeFamily::gaussian;
    config.draws = 200;
    return config;
}

} // namespace

TEST_CASE("analyze recovers the truth on generated data") {
    DgmSpec spec;
    spec.setting = 2;
    spec.sigma2_b0 = 0.15;
    spec.sigma2_b1 = 0.15;
    spec.seed = 888;
    const TrialDataset data = generate(spec);

    AnalysisConfig config = basic_analysis_config();
    config.estimator = RosterEstimator::mixed_1Ac;
    const AnalysisReport report = analyze(data, config);

    REQUIRE(report.estimands.size() == 3);
    const EstimandReport& ate = report.estimands[2];
    CHECK(ate.estimand == Estimand::ate);
    const MethodInference& reml = ate.by_method.at(HeterogeneityMethod::reml);
    CHECK(std::abs(ate.estimate - 0.29) < 3.0 * reml.se);
    CHECK(reml.ci_low < ate.estimate);
    CHECK(report.per_center.size() == static_cast<std::size_t>(data.k()));
}

TEST_CASE("equal-size centers make the two weight schemes coincide") {
    // Setting-free fixture: every center has the same size.
    Rng rng(99);
    std::vector<PatientRecord> records;
    for (int c = 0; c < 12; ++c)
        for (int i = 0; i < 8; ++i) {
            PatientRecord r;
            r.patient_id = std::to_string(records.size());
            r.center_id = "c" + std::to_string(c);
            r.treatment = i % 2;
            r.covariates = {rng.normal(), rng.normal(), rng.normal(), rng.normal()};
            r.outcome = 1.0 + 0.5 * r.treatment + rng.normal();
            records.push_back(std::move(r));
        }
    const TrialDataset data(records, OutcomeFamily::gaussian, {"z30", "age", "cd40", "wt"});

    AnalysisConfig config = basic_analysis_config();
    config.estimator = RosterEstimator::mixed_1c;
    config.scheme = WeightScheme::equal_centers;
    const AnalysisReport a = analyze(data, config);
    config.scheme = WeightScheme::equal_patients;
    const AnalysisReport b = analyze(data, config);
    for (int e = 0; e < 3; ++e)
        CHECK(std::abs(a.estimands[e].estimate - b.estimands[e].estimate) < 1e-12);
}

TEST_CASE("naive analysis reports the G-computation identity gap") {
    DgmSpec spec;
    spec.setting = 2;
    spec.seed = 777;
    const TrialDataset data = generate(spec);

    AnalysisConfig config = basic_analysis_config();
    config.estimator = RosterEstimator::naive;
    config.adjusted = true;
    const AnalysisReport report = analyze(data, config);
    REQUIRE(report.gcomp_gap.has_value());
    CHECK(*report.gcomp_gap <= 1e-8);
}

TEST_CASE("cluster-randomized analysis produces cluster-level inference") {
    ClusterDgmSpec spec;
    spec.n_clusters = 24;
    spec.seed = 31;
    const TrialDataset data = generate_cluster_randomized(spec);

    AnalysisConfig config;
    config.columns.outcome = "outcome";
    config.columns.treatment = "treatment";
    config.columns.center = "center_id";
    config.columns.cluster = "cluster_id";
    config.columns.covariates = {"x"};
    config.estimator = RosterEstimator::mixed_1c;
    config.cluster_randomized = true;
    config.draws = 100;
    const AnalysisReport report = analyze(data, config);
    CHECK(report.cluster_mode);
    CHECK(report.n_clusters == 24);
    for (const EstimandReport& er : report.estimands) {
        REQUIRE(er.se_cluster.has_value());
        CHECK(*er.se_cluster > 0.0);
        CHECK(er.ci_cluster->first < er.estimate);
        CHECK(er.ci_cluster->second > er.estimate);
    }
    const EstimandReport& ate = report.estimands[2];
    CHECK(std::abs(ate.estimate - spec.treatment_effect) < 4.0 * *ate.se_cluster);
}

TEST_CASE("hierarchical analysis adds the three-component variance") {
    // Build a dataset with clusters nested in centers.
    Rng rng(246);
    std::vector<PatientRecord> records;
    for (int c = 0; c < 15; ++c) {
        const double alpha = 0.4 * rng.normal();
        for (int j = 0; j < 3; ++j) {
            const double b = 0.3 * rng.normal();
            for (int i = 0; i < 6; ++i) {
                PatientRecord r;
                r.patient_id = std::to_string(records.size());
                r.center_id = "c" + std::to_string(c);
                r.cluster_id = "cl" + std::to_string(j);
                r.treatment = i % 2;
                r.covariates = {rng.normal(), rng.normal(), rng.normal(), rng.normal()};
                r.outcome = 1.0 + alpha + b + 0.5 * r.treatment + rng.normal();
                records.push_back(std::move(r));
            }
        }
    }
    const TrialDataset data(records, OutcomeFamily::gaussian, {"z30", "age", "cd40", "wt"});

    AnalysisConfig config = basic_analysis_config();
    config.columns.cluster = "cluster_id";
    config.estimator = RosterEstimator::mixed_1c;
    config.hierarchical = true;
    const AnalysisReport report = analyze(data, config);
    for (const EstimandReport& er : report.estimands) {
        REQUIRE(er.se_hierarchical.has_value());
        CHECK(*er.se_hierarchical > 0.0);
        REQUIRE(er.hierarchical.has_value());
        CHECK(er.hierarchical->var_resid > 0.0);
    }
}

TEST_CASE("scenario result files are written with the table-1 column families") {
    ScenarioConfig config = smoke_config();
    config.replications = 3;
    config.estimators = {RosterEstimator::naive, RosterEstimator::mixed_1c};
    const ScenarioResult result = run_scenario_serial(config);

    const auto dir = std::filesystem::temp_directory_path();
    const std::string csv = (dir / "clustrial_result.csv").string();
    const std::string json_path = (dir / "clustrial_result.json").string();
    write_scenario_csv(result, csv);
    write_scenario_json(result, json_path);

    const std::string header = slurp(csv).substr(0, slurp(csv).find('\n'));
    for (const char* column :
         {"mc_sd", "se_naive", "se_reml", "se_dl", "se_db", "cov_naive", "cov_reml", "cov_dl",
          "cov_db", "mean_if_icc", "bias", "mse"})
        CHECK(header.find(column) != std::string::npos);

    const std::string json_text = slurp(json_path);
    CHECK(json_text.find("\"estimator\": \"naive\"") != std::string::npos);
    CHECK(json_text.find("\"truth\"") != std::string::npos);
    std::remove(csv.c_str());
    std::remove(json_path.c_str());
}
