#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

#include "clustrial/dataset.hpp"
#include "clustrial/glm.hpp"
#include "clustrial/mixed_model.hpp"
#include "clustrial/propensity.hpp"

namespace clustrial {

enum class Estimand { counterfactual_mean_treated, counterfactual_mean_control, ate };

/// Per-center AIPW estimates with the per-patient influence contributions
/// whose center means equal the estimates.
struct CenterEstimate {
    std::string center_id;
    int n_c = 0;
    int n_treated = 0;
    int n_control = 0;
    double tau1_hat = 0.0;
    double tau0_hat = 0.0;
    double tau_hat = 0.0;
    Eigen::VectorXd if_treated;
    Eigen::VectorXd if_control;
    Eigen::VectorXd if_ate;

    double value(Estimand e) const {
        switch (e) {
            case Estimand::counterfactual_mean_treated: return tau1_hat;
            case Estimand::counterfactual_mean_control: return tau0_hat;
            case Estimand::ate: return tau_hat;
        }
        return 0.0;
    }
    const Eigen::VectorXd& if_values(Estimand e) const {
        switch (e) {
            case Estimand::counterfactual_mean_treated: return if_treated;
            case Estimand::counterfactual_mean_control: return if_control;
            case Estimand::ate: return if_ate;
        }
        return if_ate;
    }
};

struct PooledEstimate {
    Estimand estimand = Estimand::ate;
    WeightScheme scheme = WeightScheme::equal_centers;
    double value = 0.0;
    Eigen::VectorXd weights; // per center, sums to 1
    std::vector<CenterEstimate> per_center;
};

/// AIPW estimate for one center. Vectors are aligned with that center's
/// patients. A center missing one arm still yields an estimate: the IPW term
/// is an empty sum and the counterfactual mean rests on the model predictions.
CenterEstimate aipw_center(const std::string& center_id, const Eigen::VectorXd& treatment,
                           const Eigen::VectorXd& outcome, const Eigen::VectorXd& p_hat,
                           const Eigen::VectorXd& m1_hat, const Eigen::VectorXd& m0_hat);

/// aipw_center applied to every center, in center-enumeration order.
/// Inputs are full-length per-patient vectors.
std::vector<CenterEstimate> aipw_all_centers(const TrialDataset& data,
                                             const Eigen::VectorXd& p_hat,
                                             const Eigen::VectorXd& m1_hat,
                                             const Eigen::VectorXd& m0_hat);

/// Weighted pooling of per-center estimates; summation follows center
/// enumeration order so results are bitwise reproducible.
PooledEstimate pool(const std::vector<CenterEstimate>& centers, WeightScheme scheme,
                    Estimand estimand);

/// Per-patient influence values concatenated in dataset row order.
Eigen::VectorXd flatten_if(const TrialDataset& data, const std::vector<CenterEstimate>& centers,
                           Estimand estimand);

/// Single pooled AIPW sum over all patients, ignoring centers. Equals
/// equal-patient pooling of per-center AIPW with shared p-hat and
/// predictions. The returned per_center estimates carry the influence values.
PooledEstimate naive_aipw(const TrialDataset& data, const GlmFit& fit,
                          const PropensityPolicy& policy, Estimand estimand);

/// Cluster-randomized AIPW: per-cluster means pooled uniformly over clusters,
/// with cluster-level influence values retained for the variance.
struct ClusterEstimate {
    std::string cluster_id;
    int n_j = 0;
    double psi1_hat = 0.0;
    double psi0_hat = 0.0;
    double ate_hat = 0.0;
    double if1 = 0.0; // A_j/p_j (Ybar_j - psi1_j) + psi1_j
    double if0 = 0.0;
};

struct ClusterRandomizedEstimate {
    Estimand estimand = Estimand::ate;
    double value = 0.0;
    std::vector<ClusterEstimate> per_cluster;
};

ClusterRandomizedEstimate cluster_randomized_mean(const TrialDataset& data,
                                                  const Eigen::VectorXd& p_hat,
                                                  const Eigen::VectorXd& m1_hat,
                                                  const Eigen::VectorXd& m0_hat,
                                                  Estimand estimand);

// --------------------------------------------------------------------------
// Estimator roster
// --------------------------------------------------------------------------

enum class RosterEstimator {
    naive,         // GLM, pooled over all patients, naive variance
    fixed,         // GLM with center indicators
    mixed_1c,      // random intercept, BLUP predictions
    mixed_1c_sam,  // random intercept, sampled predictions
    mixed_1Ac,     // random intercept + treatment slope, BLUP predictions
    mixed_1Ac_sam, // random intercept + treatment slope, sampled predictions
};

std::string roster_display_name(RosterEstimator kind);
RosterEstimator parse_roster_estimator(const std::string& token);

/// (outcome model, prediction mode, propensity policy) triple implementing
/// a roster entry.
struct EstimatorRecipe {
    RosterEstimator kind;
    bool adjusted = false;
    bool mixed_model = false;
    DesignSpec outcome_design;
    RandomEffectsSpec random_effects;            // mixed_model only
    PredictionMode::Variant prediction = PredictionMode::Variant::blup;
    PropensityPolicy propensity;                 // marginal for naive, mixed otherwise
    bool naive_pooling = false;                  // single sum over patients
};

EstimatorRecipe roster_recipe(RosterEstimator kind, bool adjusted, int n_covariates);

} // namespace clustrial
