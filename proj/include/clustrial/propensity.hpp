#pragma once

#include <Eigen/Dense>
#include <vector>

#include "clustrial/dataset.hpp"

namespace clustrial {

struct PropensityPolicy {
    enum class Variant { marginal, logistic_covariates, mixed_logistic };
    Variant variant = Variant::mixed_logistic;
    /// Covariates entering the treatment model. Required for
    /// logistic_covariates; opt-in for mixed_logistic (default none, so the
    /// mixed model is intercept plus random center intercept).
    std::vector<int> covariate_columns;
    double clamp_low = 0.01;
    double clamp_high = 0.99;
};

struct PropensityResult {
    Eigen::VectorXd probabilities; // one per patient, within clamp bounds
    int clamped_count = 0;
    double sigma2_center = 0.0; // mixed variant: estimated center variance
    bool converged = true;
};

/// Per-patient randomization probability estimates. The mixed variant fits a
/// logistic model for treatment with a random center intercept and returns
/// conditional (empirical-BLUP) predictions.
PropensityResult estimate_propensity(const TrialDataset& data, const PropensityPolicy& policy);

/// Cluster-randomized designs: a plain logistic model for cluster-level
/// treatment on cluster-level covariate means (marginal proportion when no
/// covariates are selected); predictions are constant within each cluster.
PropensityResult estimate_propensity_cluster(const TrialDataset& data,
                                             const PropensityPolicy& policy);

} // namespace clustrial
