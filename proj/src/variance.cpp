#include "clustrial/variance.hpp"

#include <algorithm>
#include <cmath>

#include <boost/math/distributions/normal.hpp>
#include <boost/math/distributions/students_t.hpp>

#include "clustrial/errors.hpp"
#include "clustrial/mixed_model.hpp"

namespace clustrial {

std::string method_name(HeterogeneityMethod m) {
    switch (m) {
        case HeterogeneityMethod::dl: return "dl";
        case HeterogeneityMethod::reml: return "reml";
        case HeterogeneityMethod::db: return "db";
    }
    return "?";
}

double t_quantile(double df, double prob) {
    boost::math::students_t_distribution<double> dist(df);
    return boost::math::quantile(dist, prob);
}

double normal_quantile(double prob) {
    boost::math::normal_distribution<double> dist;
    return boost::math::quantile(dist, prob);
}

namespace {

double sample_variance(const Eigen::VectorXd& v) {
    const int n = static_cast<int>(v.size());
    const double mean = v.mean();
    double acc = 0.0;
    for (int i = 0; i < n; ++i) acc += (v(i) - mean) * (v(i) - mean);
    return acc / static_cast<double>(n - 1);
}

} // namespace

double naive_variance(const Eigen::VectorXd& if_values) {
    const int n = static_cast<int>(if_values.size());
    if (n < 2) throw DataError("naive_variance requires at least 2 values");
    return sample_variance(if_values) / static_cast<double>(n);
}

WithinCenterVariances within_center_variances(const std::vector<CenterEstimate>& centers,
                                              Estimand estimand) {
    const int k = static_cast<int>(centers.size());
    WithinCenterVariances out;
    out.raw.resize(k);
    out.values.resize(k);
    out.fallback.assign(k, false);

    // Raw estimates: the sample variance of the influence contributions over
    // n_c, defined for any center with n_c >= 2. A center missing an arm the
    // estimand requires is substituted: its influence values then lack the
    // IPW component entirely, so their spread says nothing about that
    // center's estimation error (treated-mean influence values of an
    // all-control center are pure model predictions).
    double per_patient_sum = 0.0;
    int well_defined_count = 0;
    for (int c = 0; c < k; ++c) {
        const CenterEstimate& ce = centers[c];
        bool arm_ok = true;
        switch (estimand) {
            case Estimand::counterfactual_mean_treated: arm_ok = ce.n_treated > 0; break;
            case Estimand::counterfactual_mean_control: arm_ok = ce.n_control > 0; break;
            case Estimand::ate: arm_ok = ce.n_treated > 0 && ce.n_control > 0; break;
        }
        const double v = ce.n_c >= 2
                             ? sample_variance(ce.if_values(estimand)) /
                                   static_cast<double>(ce.n_c)
                             : 0.0;
        out.raw(c) = v;
        if (ce.n_c < 2 || !arm_ok || !(v > 0.0)) {
            out.fallback[c] = true;
            ++out.fallback_count;
            continue;
        }
        per_patient_sum += v * static_cast<double>(ce.n_c);
        ++well_defined_count;
    }
    if (well_defined_count == 0)
        throw DataError("within-center variance undefined for every center");
    const double pooled_per_patient = per_patient_sum / static_cast<double>(well_defined_count);

    // Substituted centers take the pooled per-patient variance over their
    // own n_c, keeping the 1/n_c scale of the per-center estimate variance.
    // A raw estimate with n_c - 1 degrees of freedom has a heavy-tailed
    // inverse: tiny centers whose few influence values land close together
    // by chance would receive enormous inverse-variance weight and blow up
    // the heterogeneity Q statistic, so kept estimates are combined with the
    // pooled per-patient variance at kStabilizerDf pseudo-degrees of freedom.
    for (int c = 0; c < k; ++c) {
        if (out.fallback[c]) {
            out.values(c) = pooled_per_patient / static_cast<double>(centers[c].n_c);
            continue;
        }
        const double d_c = std::max(0, centers[c].n_c - 1);
        const double s2w = out.raw(c) * static_cast<double>(centers[c].n_c);
        out.values(c) = (d_c * s2w + kStabilizerDf * pooled_per_patient) /
                        ((d_c + kStabilizerDf) * static_cast<double>(centers[c].n_c));
    }
    return out;
}

HeterogeneityEstimate dl_heterogeneity(const Eigen::VectorXd& tau_hats,
                                       const Eigen::VectorXd& sigma2_cs) {
    const int k = static_cast<int>(tau_hats.size());
    if (k < 2) throw DataError("heterogeneity estimation requires k >= 2");
    if (sigma2_cs.size() != k) throw DataError("tau and sigma2 vectors differ in length");

    double sw = 0.0, sw2 = 0.0, swt = 0.0;
    for (int c = 0; c < k; ++c) {
        const double w = 1.0 / sigma2_cs(c);
        sw += w;
        sw2 += w * w;
        swt += w * tau_hats(c);
    }
    const double tau_star = swt / sw;
    double q = 0.0;
    for (int c = 0; c < k; ++c)
        q += (tau_hats(c) - tau_star) * (tau_hats(c) - tau_star) / sigma2_cs(c);

    HeterogeneityEstimate est;
    est.method = HeterogeneityMethod::dl;
    est.pre_truncation = (q - static_cast<double>(k - 1)) / (sw - sw2 / sw);
    est.sigma2_u = std::max(0.0, est.pre_truncation);
    return est;
}

double reml_meta_loglik(double sigma2_u, const Eigen::VectorXd& tau_hats,
                        const Eigen::VectorXd& sigma2_cs) {
    const int k = static_cast<int>(tau_hats.size());
    double sw = 0.0, swt = 0.0;
    for (int c = 0; c < k; ++c) {
        const double w = 1.0 / (sigma2_cs(c) + sigma2_u);
        sw += w;
        swt += w * tau_hats(c);
    }
    const double tau_star = swt / sw;
    double ll = -0.5 * static_cast<double>(k) * std::log(2.0 * M_PI) - 0.5 * std::log(sw);
    for (int c = 0; c < k; ++c) {
        const double v = sigma2_cs(c) + sigma2_u;
        ll -= 0.5 * std::log(v);
        ll -= 0.5 * (tau_hats(c) - tau_star) * (tau_hats(c) - tau_star) / v;
    }
    return ll;
}

HeterogeneityEstimate reml_heterogeneity(const Eigen::VectorXd& tau_hats,
                                         const Eigen::VectorXd& sigma2_cs,
                                         double tol, int max_cycles) {
    const int k = static_cast<int>(tau_hats.size());
    if (k < 2) throw DataError("heterogeneity estimation requires k >= 2");

    HeterogeneityEstimate est;
    est.method = HeterogeneityMethod::reml;
    double s2 = dl_heterogeneity(tau_hats, sigma2_cs).sigma2_u;
    est.converged = false;

    const double kk = static_cast<double>(k) / static_cast<double>(k - 1);
    for (int cycle = 0; cycle < max_cycles; ++cycle) {
        double sw = 0.0, swt = 0.0;
        for (int c = 0; c < k; ++c) {
            const double w = 1.0 / (sigma2_cs(c) + s2);
            sw += w;
            swt += w * tau_hats(c);
        }
        const double tau_star = swt / sw;

        double num = 0.0, den = 0.0;
        for (int c = 0; c < k; ++c) {
            const double v = sigma2_cs(c) + s2;
            const double w2 = 1.0 / (v * v);
            const double dev = tau_hats(c) - tau_star;
            num += w2 * (kk * dev * dev - sigma2_cs(c));
            den += w2;
        }
        const double next = std::max(0.0, num / den);
        est.iterations = cycle + 1;
        if (std::abs(next - s2) <= tol) {
            s2 = next;
            est.converged = true;
            break;
        }
        s2 = next;
    }
    est.sigma2_u = std::max(0.0, s2);
    est.pre_truncation = s2;
    return est;
}

HeterogeneityEstimate db_heterogeneity(const Eigen::VectorXd& tau_hats,
                                       const Eigen::VectorXd& sigma2_cs, double pooled_tau) {
    const int k = static_cast<int>(tau_hats.size());
    if (k < 2) throw DataError("heterogeneity estimation requires k >= 2");

    double sample_het = 0.0;
    for (int c = 0; c < k; ++c)
        sample_het += (tau_hats(c) - pooled_tau) * (tau_hats(c) - pooled_tau);
    sample_het /= static_cast<double>(k);

    const double noise = static_cast<double>(k - 1) / (static_cast<double>(k) * k) *
                         sigma2_cs.sum();

    HeterogeneityEstimate est;
    est.method = HeterogeneityMethod::db;
    est.pre_truncation = sample_het - noise;
    est.sigma2_u = std::max(0.0, est.pre_truncation);
    return est;
}

PooledInference total_inference(const PooledEstimate& pooled, const InferenceOptions& options) {
    if (options.methods.empty()) throw ConfigError("total_inference: empty method set");
    const int k = static_cast<int>(pooled.per_center.size());
    if (k < 2) throw DataError("total_inference requires k >= 2");

    PooledInference inf;
    inf.estimand = pooled.estimand;
    inf.estimate = pooled.value;
    inf.level = options.level;
    inf.used_normal_quantile = options.use_normal_quantile;
    const double prob = 1.0 - (1.0 - options.level) / 2.0;

    const WithinCenterVariances wcv = within_center_variances(pooled.per_center, pooled.estimand);
    inf.variance_fallback_count = wcv.fallback_count;

    Eigen::VectorXd tau_hats(k);
    double n_total = 0.0;
    for (int c = 0; c < k; ++c) {
        tau_hats(c) = pooled.per_center[c].value(pooled.estimand);
        n_total += static_cast<double>(pooled.per_center[c].n_c);
    }
    const double sigma2_bar = wcv.values.mean();

    bool first = true;
    for (HeterogeneityMethod m : options.methods) {
        MethodInference mi;
        switch (m) {
            case HeterogeneityMethod::dl:
                mi.heterogeneity = dl_heterogeneity(tau_hats, wcv.values);
                break;
            case HeterogeneityMethod::reml:
                mi.heterogeneity = reml_heterogeneity(tau_hats, wcv.values);
                break;
            case HeterogeneityMethod::db:
                mi.heterogeneity = db_heterogeneity(tau_hats, wcv.values, pooled.value);
                break;
        }
        const double s2u = mi.heterogeneity.sigma2_u;

        double var = 0.0;
        for (int c = 0; c < k; ++c)
            var += pooled.weights(c) * pooled.weights(c) * (wcv.values(c) + s2u);
        mi.se = std::sqrt(var);

        mi.rho_hat = s2u > 0.0 ? s2u / (s2u + sigma2_bar) : 0.0;
        std::vector<int> sizes(k);
        for (int c = 0; c < k; ++c) sizes[c] = pooled.per_center[c].n_c;
        mi.df = approximate_df(sizes, mi.rho_hat);

        const double quant = options.use_normal_quantile ? normal_quantile(prob)
                                                         : t_quantile(mi.df, prob);
        mi.ci_low = pooled.value - quant * mi.se;
        mi.ci_high = pooled.value + quant * mi.se;

        if (first) {
            inf.rho_hat = mi.rho_hat;
            inf.df = mi.df;
            first = false;
        }
        inf.by_method.emplace(m, mi);
    }

    if (options.include_naive) {
        // Clustering-blind variance of the same influence values.
        Eigen::VectorXd flat(static_cast<int>(n_total));
        int pos = 0;
        for (const CenterEstimate& ce : pooled.per_center) {
            const Eigen::VectorXd& v = ce.if_values(pooled.estimand);
            for (int i = 0; i < v.size(); ++i) flat(pos++) = v(i);
        }
        const double se = std::sqrt(naive_variance(flat));
        inf.se_naive = se;
        inf.df_naive = n_total - 1.0;
        const double quant = options.use_normal_quantile ? normal_quantile(prob)
                                                         : t_quantile(inf.df_naive, prob);
        inf.ci_naive = {pooled.value - quant * se, pooled.value + quant * se};
    }
    return inf;
}

double cluster_variance(const Eigen::VectorXd& cluster_if_values, int n_clusters) {
    if (n_clusters < 2 || cluster_if_values.size() != n_clusters)
        throw DataError("cluster_variance requires J >= 2 cluster values");
    return sample_variance(cluster_if_values) / static_cast<double>(n_clusters);
}

double hierarchical_variance_closed_form(const std::vector<std::vector<int>>& cluster_sizes,
                                         const Eigen::VectorXd& omega_c, double var_center,
                                         double var_cluster, double var_resid) {
    const int k = static_cast<int>(cluster_sizes.size());
    double wn = 0.0, w2n2 = 0.0, w2nt2 = 0.0, w2n = 0.0;
    for (int c = 0; c < k; ++c) {
        double n_c = 0.0, nt2 = 0.0;
        for (int m : cluster_sizes[c]) {
            n_c += static_cast<double>(m);
            nt2 += static_cast<double>(m) * static_cast<double>(m);
        }
        const double w = omega_c(c);
        wn += w * n_c;
        w2n2 += w * w * n_c * n_c;
        w2nt2 += w * w * nt2;
        w2n += w * w * n_c;
    }
    return (var_center * w2n2 + var_cluster * w2nt2 + var_resid * w2n) / (wn * wn);
}

HierarchicalVarianceResult hierarchical_variance(const Eigen::VectorXd& if_values,
                                                 const std::vector<int>& center_of,
                                                 const std::vector<int>& cluster_of,
                                                 int k, int n_clusters,
                                                 const Eigen::VectorXd& omega_c) {
    const int n = static_cast<int>(if_values.size());
    std::vector<std::vector<int>> cluster_sizes(k);
    {
        std::vector<int> size_of_cluster(n_clusters, 0);
        std::vector<int> center_of_cluster(n_clusters, -1);
        for (int i = 0; i < n; ++i) {
            ++size_of_cluster[cluster_of[i]];
            center_of_cluster[cluster_of[i]] = center_of[i];
        }
        for (int j = 0; j < n_clusters; ++j)
            cluster_sizes[center_of_cluster[j]].push_back(size_of_cluster[j]);
    }

    double wn = 0.0;
    for (int c = 0; c < k; ++c) {
        double n_c = 0.0;
        for (int m : cluster_sizes[c]) n_c += m;
        wn += omega_c(c) * n_c;
    }
    if (std::abs(wn - 1.0) > 1e-8)
        throw ConfigError("hierarchical_variance: weights must satisfy sum omega_c n_c = 1");

    const NestedComponents comp =
        fit_nested_intercepts(if_values, center_of, cluster_of, k, n_clusters);

    HierarchicalVarianceResult out;
    out.var_center = comp.var_center;
    out.var_cluster = comp.var_cluster;
    out.var_resid = comp.var_resid;
    out.cluster_dropped = comp.cluster_dropped;
    out.variance = hierarchical_variance_closed_form(cluster_sizes, omega_c, comp.var_center,
                                                     comp.var_cluster, comp.var_resid);
    return out;
}

double approximate_df(const std::vector<int>& center_sizes, double rho) {
    double df = 0.0;
    for (int n_c : center_sizes) {
        const double nc = static_cast<double>(n_c);
        df += nc / (1.0 + (nc - 1.0) * rho);
    }
    return df - 1.0;
}

double anova_icc(const Eigen::VectorXd& values, const std::vector<int>& group_of, int k) {
    const int n = static_cast<int>(values.size());
    if (k < 2) throw DataError("anova_icc requires k >= 2 groups");
    if (n - k < 1) return 0.0;

    std::vector<double> sums(k, 0.0);
    std::vector<int> sizes(k, 0);
    for (int i = 0; i < n; ++i) {
        sums[group_of[i]] += values(i);
        ++sizes[group_of[i]];
    }
    const double grand = values.mean();
    double ssb = 0.0, ssw = 0.0, sum_sq_sizes = 0.0;
    for (int g = 0; g < k; ++g) {
        const double mean_g = sums[g] / sizes[g];
        ssb += sizes[g] * (mean_g - grand) * (mean_g - grand);
        sum_sq_sizes += static_cast<double>(sizes[g]) * sizes[g];
    }
    for (int i = 0; i < n; ++i) {
        const double mean_g = sums[group_of[i]] / sizes[group_of[i]];
        ssw += (values(i) - mean_g) * (values(i) - mean_g);
    }
    if (ssb + ssw <= 0.0) return 0.0;

    const double msb = ssb / static_cast<double>(k - 1);
    const double msw = ssw / static_cast<double>(n - k);
    const double n0 = (static_cast<double>(n) - sum_sq_sizes / static_cast<double>(n)) /
                      static_cast<double>(k - 1);
    const double denom = msb + (n0 - 1.0) * msw;
    if (denom <= 0.0) return 0.0;
    return (msb - msw) / denom;
}

} // namespace clustrial
