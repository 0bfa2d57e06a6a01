#include "clustrial/simgen.hpp"

#include <algorithm>
#include <cmath>

#include "clustrial/errors.hpp"
#include "clustrial/glm.hpp"
#include "clustrial/rng.hpp"

namespace clustrial {

CenterSizeSetting setting_profile(int setting) {
    switch (setting) {
        case 1: return {100, 1, 24, 5.0};
        case 2: return {50, 2, 48, 10.0};
        case 3: return {10, 25, 80, 50.0};
        case 4: return {5, 50, 150, 100.0};
        case 5: return {100, 50, 145, 100.0};
        default: throw ConfigError("setting must be 1..5");
    }
}

namespace {

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

double truncated_normal_nonneg(Rng& rng, double mean, double sd) {
    for (;;) {
        const double v = rng.normal(mean, sd);
        if (v >= 0.0) return v;
    }
}

/// Binomial(n, p) CDF table for quantile draws.
std::vector<double> binomial_cdf(int n, double p) {
    std::vector<double> cdf(n + 1);
    double pmf = std::pow(1.0 - p, n);
    double acc = pmf;
    cdf[0] = acc;
    for (int i = 1; i <= n; ++i) {
        pmf *= (static_cast<double>(n - i + 1) / i) * (p / (1.0 - p));
        acc += pmf;
        cdf[i] = acc;
    }
    cdf[n] = 1.0;
    return cdf;
}

int binomial_quantile(const std::vector<double>& cdf, double u) {
    const auto it = std::lower_bound(cdf.begin(), cdf.end(), u);
    return static_cast<int>(it - cdf.begin());
}

struct ContinuousCovariates {
    double z30, age, cd40, wt;
};
ContinuousCovariates draw_continuous_covariates(Rng& rng, const ContinuousCovariateLaw& law) {
    ContinuousCovariates c;
    c.z30 = rng.bernoulli(law.q_z30) ? 1.0 : 0.0;
    c.age = rng.normal(law.age_mean, law.age_sd);
    c.cd40 = truncated_normal_nonneg(rng, law.cd40_mean, law.cd40_sd);
    c.wt = rng.normal(law.wt_mean, law.wt_sd);
    return c;
}

struct BinaryCovariates {
    double severe, moderate, age, ichv;
};
BinaryCovariates draw_binary_covariates(Rng& rng, const BinaryCovariateLaw& law) {
    BinaryCovariates c;
    const int cat = rng.categorical3(law.p_severe, law.p_moderate);
    c.severe = cat == 0 ? 1.0 : 0.0;
    c.moderate = cat == 1 ? 1.0 : 0.0;
    c.age = rng.normal(law.age_mean, law.age_sd);
    c.ichv = truncated_normal_nonneg(rng, law.ichv_mean, law.ichv_sd);
    return c;
}

} // namespace

double continuous_outcome_mean(const DgmSpec& spec, int arm, double z30, double age,
                               double cd40, double wt, double b0, double b1, double b2) {
    const double a = static_cast<double>(arm);
    if (!spec.misspecified) {
        return 4.06 + b0 + (0.29 + b1) * a + (4e-3 + b2) * cd40 - 0.15 * z30 - 4e-4 * age +
               5e-3 * wt;
    }
    return 3.71 + b0 + (0.29 + b1) * a + (8e-2 + b2) * std::sqrt(cd40) - 0.14 * z30 -
           2e-4 * age - 1e-3 * wt + 1e-5 * cd40 * wt;
}

double binary_event_probability(const DgmSpec& spec, int arm, double severe, double moderate,
                                double age, double ichv, double b0, double b1, double b2) {
    const double a = static_cast<double>(arm);
    double eta;
    if (!spec.misspecified) {
        eta = 3.22 + b0 + (0.28 + b1) * a - (1.71 + b2) * severe - 0.72 * moderate -
              0.04 * age - 7e-3 * ichv;
    } else {
        eta = 5.52 + b0 + (0.29 + b1) * a - (1.72 + b2) * severe - 0.72 * moderate -
              0.12 * age + 7e-4 * age * age - 7e-3 * ichv;
    }
    return inverse_logit(eta);
}

TrialDataset generate_with_truth(const DgmSpec& spec, GeneratedTruth* truth) {
    const CenterSizeSetting prof = setting_profile(spec.setting);
    Rng rng(spec.seed);

    const double sd_b0 = std::sqrt(spec.sigma2_b0);
    const double sd_b1 = std::sqrt(spec.sigma2_b1);
    const double sd_b2 = std::sqrt(spec.sigma2_b2);

    Eigen::VectorXd b0(prof.k), b1(prof.k), b2(prof.k), z_b1(prof.k);
    for (int c = 0; c < prof.k; ++c) {
        const double z = rng.normal();
        z_b1(c) = z;
        b0(c) = sd_b0 * rng.normal();
        b1(c) = sd_b1 * z;
        b2(c) = sd_b2 * rng.normal();
    }

    const double p_star = (prof.avg_size - prof.min_size) /
                          static_cast<double>(prof.max_size - prof.min_size);
    std::vector<int> sizes(prof.k);
    if (spec.informative_size) {
        // Gaussian copula on the size quantile: centers with larger treatment
        // effects tend to be larger, at the configured Kendall-tau strength.
        const double rho = std::sin(M_PI * spec.informative_tau / 2.0);
        const std::vector<double> cdf = binomial_cdf(prof.max_size - prof.min_size, p_star);
        for (int c = 0; c < prof.k; ++c) {
            const double latent = rho * z_b1(c) + std::sqrt(1.0 - rho * rho) * rng.normal();
            sizes[c] = prof.min_size + binomial_quantile(cdf, normal_cdf(latent));
        }
    } else {
        for (int c = 0; c < prof.k; ++c)
            sizes[c] = prof.min_size + rng.binomial(prof.max_size - prof.min_size, p_star);
    }

    std::vector<PatientRecord> records;
    std::vector<double> m1_true, m0_true;
    int patient = 0;
    for (int c = 0; c < prof.k; ++c) {
        for (int i = 0; i < sizes[c]; ++i) {
            PatientRecord r;
            r.patient_id = std::to_string(++patient);
            r.center_id = "c" + std::to_string(c + 1);
            r.treatment = rng.bernoulli(0.5) ? 1 : 0;
            if (spec.endpoint == EndpointKind::continuous) {
                const ContinuousCovariates cv = draw_continuous_covariates(rng, spec.cont);
                r.covariates = {cv.z30, cv.age, cv.cd40, cv.wt};
                const double m1 = continuous_outcome_mean(spec, 1, cv.z30, cv.age, cv.cd40,
                                                          cv.wt, b0(c), b1(c), b2(c));
                const double m0 = continuous_outcome_mean(spec, 0, cv.z30, cv.age, cv.cd40,
                                                          cv.wt, b0(c), b1(c), b2(c));
                r.outcome = (r.treatment ? m1 : m0) + rng.normal();
                m1_true.push_back(m1);
                m0_true.push_back(m0);
            } else {
                const BinaryCovariates cv = draw_binary_covariates(rng, spec.bin);
                r.covariates = {cv.severe, cv.moderate, cv.age, cv.ichv};
                const double p1 = binary_event_probability(spec, 1, cv.severe, cv.moderate,
                                                           cv.age, cv.ichv, b0(c), b1(c), b2(c));
                const double p0 = binary_event_probability(spec, 0, cv.severe, cv.moderate,
                                                           cv.age, cv.ichv, b0(c), b1(c), b2(c));
                r.outcome = rng.bernoulli(r.treatment ? p1 : p0) ? 1.0 : 0.0;
                m1_true.push_back(p1);
                m0_true.push_back(p0);
            }
            records.push_back(std::move(r));
        }
    }

    if (truth) {
        truth->b0 = b0;
        truth->b1 = b1;
        truth->b2 = b2;
        truth->m1_true = Eigen::Map<Eigen::VectorXd>(m1_true.data(),
                                                     static_cast<int>(m1_true.size()));
        truth->m0_true = Eigen::Map<Eigen::VectorXd>(m0_true.data(),
                                                     static_cast<int>(m0_true.size()));
    }

    const std::vector<std::string> names =
        spec.endpoint == EndpointKind::continuous
            ? std::vector<std::string>{"z30", "age", "cd40", "wt"}
            : std::vector<std::string>{"severe", "moderate", "age", "ichv"};
    const OutcomeFamily family = spec.endpoint == EndpointKind::continuous
                                     ? OutcomeFamily::gaussian
                                     : OutcomeFamily::binomial_logit;
    return TrialDataset(std::move(records), family, names);
}

TrialDataset generate(const DgmSpec& spec) { return generate_with_truth(spec, nullptr); }

TrueEstimandValue true_estimand(const DgmSpec& spec, Estimand kind, WeightScheme scheme,
                                std::int64_t draws) {
    TrueEstimandValue out;
    out.kind = kind;

    const bool size_matters =
        spec.informative_size && scheme == WeightScheme::equal_patients;
    if (spec.endpoint == EndpointKind::continuous && !spec.misspecified &&
        kind == Estimand::ate && !size_matters) {
        out.value = 0.29;
        out.closed_form = true;
        return out;
    }

    Rng rng = Rng::split(spec.seed, 0x7472757468ULL); // independent truth stream
    const CenterSizeSetting prof = setting_profile(spec.setting);
    const double sd_b0 = std::sqrt(spec.sigma2_b0);
    const double sd_b1 = std::sqrt(spec.sigma2_b1);
    const double sd_b2 = std::sqrt(spec.sigma2_b2);
    const double p_star = (prof.avg_size - prof.min_size) /
                          static_cast<double>(prof.max_size - prof.min_size);
    const double rho = std::sin(M_PI * spec.informative_tau / 2.0);
    const std::vector<double> cdf = binomial_cdf(prof.max_size - prof.min_size, p_star);

    // Each draw simulates one center effect triple, one patient's covariates
    // and (for patient weighting) the center size.
    double sum_f = 0.0, sum_f2 = 0.0;
    double sum_n = 0.0, sum_nf = 0.0, sum_n2 = 0.0, sum_n2f = 0.0, sum_n2f2 = 0.0;
    const bool need_ratio = size_matters;
    for (std::int64_t d = 0; d < draws; ++d) {
        const double z1 = rng.normal();
        const double b1v = sd_b1 * z1;
        const double b0v = sd_b0 * rng.normal();
        const double b2v = sd_b2 * rng.normal();

        double m1, m0;
        if (spec.endpoint == EndpointKind::continuous) {
            const ContinuousCovariates cv = draw_continuous_covariates(rng, spec.cont);
            m1 = continuous_outcome_mean(spec, 1, cv.z30, cv.age, cv.cd40, cv.wt, b0v, b1v, b2v);
            m0 = continuous_outcome_mean(spec, 0, cv.z30, cv.age, cv.cd40, cv.wt, b0v, b1v, b2v);
        } else {
            const BinaryCovariates cv = draw_binary_covariates(rng, spec.bin);
            m1 = binary_event_probability(spec, 1, cv.severe, cv.moderate, cv.age, cv.ichv,
                                          b0v, b1v, b2v);
            m0 = binary_event_probability(spec, 0, cv.severe, cv.moderate, cv.age, cv.ichv,
                                          b0v, b1v, b2v);
        }
        double f = 0.0;
        switch (kind) {
            case Estimand::counterfactual_mean_treated: f = m1; break;
            case Estimand::counterfactual_mean_control: f = m0; break;
            case Estimand::ate: f = m1 - m0; break;
        }
        sum_f += f;
        sum_f2 += f * f;
        if (need_ratio) {
            const double latent = rho * z1 + std::sqrt(1.0 - rho * rho) * rng.normal();
            const double n = static_cast<double>(
                prof.min_size + binomial_quantile(cdf, normal_cdf(latent)));
            sum_n += n;
            sum_nf += n * f;
            sum_n2 += n * n;
            sum_n2f += n * n * f;
            sum_n2f2 += n * n * f * f;
        }
    }

    const double dd = static_cast<double>(draws);
    if (!need_ratio) {
        out.value = sum_f / dd;
        const double var = sum_f2 / dd - out.value * out.value;
        out.mc_se = std::sqrt(std::max(var, 0.0) / dd);
        return out;
    }

    // Ratio estimator E[n f]/E[n]; standard error via the variance of its
    // influence values g = n (f - theta) / mean(n).
    const double nbar = sum_n / dd;
    const double theta = sum_nf / sum_n;
    out.value = theta;
    const double e_g2 =
        (sum_n2f2 - 2.0 * theta * sum_n2f + theta * theta * sum_n2) / dd / (nbar * nbar);
    out.mc_se = std::sqrt(std::max(e_g2, 0.0) / dd);
    return out;
}

// ---------------------------------------------------------------------------
// Cluster-randomized and hierarchical generators
// ---------------------------------------------------------------------------

TrialDataset generate_cluster_randomized(const ClusterDgmSpec& spec) {
    Rng rng(spec.seed);
    const double sd_cluster = std::sqrt(spec.sigma2_cluster);
    const double sd_resid = std::sqrt(spec.sigma2_resid);

    std::vector<PatientRecord> records;
    int patient = 0;
    for (int j = 0; j < spec.n_clusters; ++j) {
        const int span = spec.size_max - spec.size_min + 1;
        const int size = spec.size_min + static_cast<int>(rng.uniform() * span);
        const int a = rng.bernoulli(spec.p_treat) ? 1 : 0;
        const double b = sd_cluster * rng.normal();
        for (int i = 0; i < size; ++i) {
            PatientRecord r;
            r.patient_id = std::to_string(++patient);
            r.center_id = "cl" + std::to_string(j + 1);
            r.cluster_id = "cl" + std::to_string(j + 1);
            r.treatment = a;
            const double x = rng.normal();
            r.covariates = {x};
            r.outcome = spec.mu + b + spec.treatment_effect * a + spec.covariate_effect * x +
                        sd_resid * rng.normal();
            records.push_back(std::move(r));
        }
    }
    return TrialDataset(std::move(records), OutcomeFamily::gaussian, {"x"});
}

HierarchicalLayout make_hierarchical_layout(int k, int clusters_min, int clusters_max,
                                            int size_min, int size_max, std::uint64_t seed) {
    Rng rng(seed);
    HierarchicalLayout layout;
    layout.k = k;
    layout.cluster_sizes_by_center.resize(k);
    int cluster = 0;
    for (int c = 0; c < k; ++c) {
        const int n_cl =
            clusters_min + static_cast<int>(rng.uniform() * (clusters_max - clusters_min + 1));
        for (int j = 0; j < n_cl; ++j) {
            const int size =
                size_min + static_cast<int>(rng.uniform() * (size_max - size_min + 1));
            layout.cluster_sizes_by_center[c].push_back(size);
            for (int i = 0; i < size; ++i) {
                layout.center_of.push_back(c);
                layout.cluster_of.push_back(cluster);
            }
            ++cluster;
        }
    }
    layout.n_clusters = cluster;
    return layout;
}

Eigen::VectorXd draw_hierarchical_values(const HierarchicalLayout& layout, double mu,
                                         double var_center, double var_cluster,
                                         double var_resid, std::uint64_t seed) {
    Rng rng(seed);
    Eigen::VectorXd alpha(layout.k), b(layout.n_clusters);
    for (int c = 0; c < layout.k; ++c) alpha(c) = std::sqrt(var_center) * rng.normal();
    for (int j = 0; j < layout.n_clusters; ++j) b(j) = std::sqrt(var_cluster) * rng.normal();
    const int n = static_cast<int>(layout.center_of.size());
    Eigen::VectorXd values(n);
    for (int i = 0; i < n; ++i)
        values(i) = mu + alpha(layout.center_of[i]) + b(layout.cluster_of[i]) +
                    std::sqrt(var_resid) * rng.normal();
    return values;
}

} // namespace clustrial
