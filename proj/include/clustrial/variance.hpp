#pragma once

#include <Eigen/Dense>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "clustrial/estimators.hpp"

namespace clustrial {

enum class HeterogeneityMethod { dl, reml, db };

std::string method_name(HeterogeneityMethod m);

struct HeterogeneityEstimate {
    HeterogeneityMethod method = HeterogeneityMethod::dl;
    double sigma2_u = 0.0;
    double pre_truncation = 0.0; // db keeps the untruncated value
    int iterations = 0;          // reml cycles
    bool converged = true;
};

/// (1/n) times the sample variance (n-1 denominator) of per-patient
/// influence values; the clustering-blind variance of a pooled mean.
double naive_variance(const Eigen::VectorXd& if_values);

/// Within-center variances of the per-center estimates. `raw` is the sample
/// variance of the center's influence values over n_c; `values` combines it
/// with the pooled per-patient variance at kStabilizerDf pseudo-degrees of
/// freedom, which keeps the inverse-variance weights of 1-2 df centers
/// finite. Centers where the estimate is unavailable or uninformative
/// (n_c = 1, a missing required arm, constant influence values) take the
/// pooled per-patient variance over their n_c and are flagged.
inline constexpr double kStabilizerDf = 2.0;
struct WithinCenterVariances {
    Eigen::VectorXd raw;    // 0 where undefined
    Eigen::VectorXd values; // stabilized, always positive
    std::vector<bool> fallback;
    int fallback_count = 0;
};
WithinCenterVariances within_center_variances(const std::vector<CenterEstimate>& centers,
                                              Estimand estimand);

/// DerSimonian-Laird moment estimator, truncated at zero.
HeterogeneityEstimate dl_heterogeneity(const Eigen::VectorXd& tau_hats,
                                       const Eigen::VectorXd& sigma2_cs);

/// REML heterogeneity via the fixed-point iteration, started from the DL
/// estimate, with the inverse-variance pooled mean refreshed every cycle.
HeterogeneityEstimate reml_heterogeneity(const Eigen::VectorXd& tau_hats,
                                         const Eigen::VectorXd& sigma2_cs,
                                         double tol = 1e-10, int max_cycles = 500);

/// Restricted log-likelihood of the random-effects meta-analysis model at a
/// given heterogeneity variance (grid-oracle support).
double reml_meta_loglik(double sigma2_u, const Eigen::VectorXd& tau_hats,
                        const Eigen::VectorXd& sigma2_cs);

/// Debiased heterogeneity estimator: sample heterogeneity variance around
/// the pooled estimate minus the (k-1)/k^2-scaled within-center noise,
/// truncated at zero with the pre-truncation value retained.
HeterogeneityEstimate db_heterogeneity(const Eigen::VectorXd& tau_hats,
                                       const Eigen::VectorXd& sigma2_cs, double pooled_tau);

struct MethodInference {
    HeterogeneityEstimate heterogeneity;
    double se = 0.0;
    double rho_hat = 0.0;
    double df = 0.0;
    double ci_low = 0.0;
    double ci_high = 0.0;
};

struct PooledInference {
    Estimand estimand = Estimand::ate;
    double estimate = 0.0;
    double level = 0.95;
    std::optional<double> se_naive;
    std::optional<std::pair<double, double>> ci_naive;
    double df_naive = 0.0;
    std::map<HeterogeneityMethod, MethodInference> by_method;
    double rho_hat = 0.0; // headline (first requested method)
    double df = 0.0;
    int variance_fallback_count = 0;
    bool used_normal_quantile = false;
};

struct InferenceOptions {
    std::set<HeterogeneityMethod> methods = {HeterogeneityMethod::dl, HeterogeneityMethod::reml,
                                             HeterogeneityMethod::db};
    double level = 0.95;
    bool use_normal_quantile = false; // for k >= 30 the two are nearly identical
    bool include_naive = false;       // clustering-blind SE of the same estimate
};

/// Meta-analytic inference for a pooled estimate: per-method SE
/// sqrt(sum_c w_c^2 (sigma2_c + sigma2_u)), intraclass correlation
/// rho = sigma2_u / (sigma2_u + mean sigma2_c), degrees of freedom
/// sum_c n_c / (1 + (n_c - 1) rho) - 1, and t intervals.
PooledInference total_inference(const PooledEstimate& pooled, const InferenceOptions& options);

/// Cluster-randomized variance: (1/J) times the sample variance of the
/// cluster-level influence values.
double cluster_variance(const Eigen::VectorXd& cluster_if_values, int n_clusters);

/// Hierarchical (center + cluster-in-center) variance of the weighted mean
/// of influence values, from a two-level REML decomposition plugged into the
/// closed form. omega_c must satisfy sum_c omega_c n_c = 1.
struct HierarchicalVarianceResult {
    double variance = 0.0;
    double var_center = 0.0;
    double var_cluster = 0.0;
    double var_resid = 0.0;
    bool cluster_dropped = false;
};
HierarchicalVarianceResult hierarchical_variance(const Eigen::VectorXd& if_values,
                                                 const std::vector<int>& center_of,
                                                 const std::vector<int>& cluster_of,
                                                 int k, int n_clusters,
                                                 const Eigen::VectorXd& omega_c);

/// The same closed form evaluated at known variance components (oracle use).
double hierarchical_variance_closed_form(const std::vector<std::vector<int>>& cluster_sizes,
                                         const Eigen::VectorXd& omega_c, double var_center,
                                         double var_cluster, double var_resid);

/// Approximate degrees of freedom sum_c n_c / (1 + (n_c - 1) rho) - 1;
/// rho = 0 gives n - 1 and rho = 1 gives k - 1.
double approximate_df(const std::vector<int>& center_sizes, double rho);

/// One-way ANOVA intraclass correlation, allowing negative estimates.
double anova_icc(const Eigen::VectorXd& values, const std::vector<int>& group_of, int k);

double t_quantile(double df, double prob);
double normal_quantile(double prob);

} // namespace clustrial
