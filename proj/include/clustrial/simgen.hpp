#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <vector>

#include "clustrial/dataset.hpp"
#include "clustrial/estimators.hpp"

namespace clustrial {

enum class EndpointKind { continuous, binary };

struct ContinuousCovariateLaw {
    double q_z30 = 0.55;      // Bernoulli
    double age_mean = 35.0;   // Normal
    double age_sd = 8.7;
    double cd40_mean = 350.0; // Normal truncated at 0
    double cd40_sd = 120.0;
    double wt_mean = 75.0;    // Normal
    double wt_sd = 13.0;
};

struct BinaryCovariateLaw {
    double p_severe = 0.35;   // GCS category probabilities
    double p_moderate = 0.40; // (mild is the remainder)
    double age_mean = 62.0;
    double age_sd = 11.0;
    double ichv_mean = 40.0;  // Normal truncated at 0
    double ichv_sd = 18.0;
};

/// One data-generating mechanism: endpoint family, random-effects variance
/// triple, center-size setting, and covariate law.
struct DgmSpec {
    EndpointKind endpoint = EndpointKind::continuous;
    bool misspecified = false; // true outcome model has a transform + interaction
    double sigma2_b0 = 0.0;
    double sigma2_b1 = 0.0;
    double sigma2_b2 = 0.0;
    int setting = 1;
    bool informative_size = false;  // couples n_c to the treatment random effect
    double informative_tau = 0.3;   // Kendall-tau target for the coupling
    std::uint64_t seed = 0;
    ContinuousCovariateLaw cont;
    BinaryCovariateLaw bin;
};

/// Center-count and size profile of the five settings.
struct CenterSizeSetting {
    int k = 0;
    int min_size = 0;
    int max_size = 0;
    double avg_size = 0.0;
};
CenterSizeSetting setting_profile(int setting);

/// Realized random effects and true conditional means of a generated
/// dataset, for oracle checks against the generator.
struct GeneratedTruth {
    Eigen::VectorXd b0, b1, b2;          // per center
    Eigen::VectorXd m1_true, m0_true;    // per patient, conditional on realized effects
};

TrialDataset generate(const DgmSpec& spec);
TrialDataset generate_with_truth(const DgmSpec& spec, GeneratedTruth* truth);

struct TrueEstimandValue {
    Estimand kind = Estimand::ate;
    double value = 0.0;
    bool closed_form = false;
    double mc_se = 0.0; // 0 for closed-form values
};

/// True estimand under a spec and weight scheme. The correctly specified
/// continuous ATE is the closed-form treatment coefficient; everything else
/// is Monte Carlo integration over covariates and random effects.
TrueEstimandValue true_estimand(const DgmSpec& spec, Estimand kind, WeightScheme scheme,
                                std::int64_t draws = 10'000'000);

/// Conditional outcome mean / event probability of the generating models,
/// exposed for hand-evaluation checks.
double continuous_outcome_mean(const DgmSpec& spec, int arm, double z30, double age,
                               double cd40, double wt, double b0, double b1, double b2);
double binary_event_probability(const DgmSpec& spec, int arm, double severe, double moderate,
                                double age, double ichv, double b0, double b1, double b2);

// --------------------------------------------------------------------------
// Generators for the cluster-randomized and hierarchical machinery
// --------------------------------------------------------------------------

struct ClusterDgmSpec {
    int n_clusters = 30;
    int size_min = 5;
    int size_max = 15;
    double mu = 1.0;
    double treatment_effect = 0.5;
    double covariate_effect = 0.3;
    double sigma2_cluster = 0.25;
    double sigma2_resid = 1.0;
    double p_treat = 0.5;
    std::uint64_t seed = 0;
};

/// Gaussian cluster-randomized data: treatment assigned per cluster, one
/// standard-normal patient covariate, random cluster intercept. Cluster ids
/// double as center ids so the dataset is self-contained.
TrialDataset generate_cluster_randomized(const ClusterDgmSpec& spec);

struct HierarchicalLayout {
    std::vector<int> center_of;
    std::vector<int> cluster_of;
    int k = 0;
    int n_clusters = 0;
    std::vector<std::vector<int>> cluster_sizes_by_center;
};

HierarchicalLayout make_hierarchical_layout(int k, int clusters_min, int clusters_max,
                                            int size_min, int size_max, std::uint64_t seed);

/// Values = mu + center effect + cluster effect + residual on a fixed layout.
Eigen::VectorXd draw_hierarchical_values(const HierarchicalLayout& layout, double mu,
                                         double var_center, double var_cluster,
                                         double var_resid, std::uint64_t seed);

} // namespace clustrial
