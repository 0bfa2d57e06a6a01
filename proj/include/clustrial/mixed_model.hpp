#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

#include "clustrial/dataset.hpp"
#include "clustrial/glm.hpp"

namespace clustrial {

/// Mutually independent zero-mean normal random effects at center level.
struct RandomEffectsSpec {
    bool random_intercept = true;
    bool random_treatment_slope = false;
    std::vector<int> random_covariate_slopes;

    int q() const {
        return (random_intercept ? 1 : 0) + (random_treatment_slope ? 1 : 0) +
               static_cast<int>(random_covariate_slopes.size());
    }
};

enum class LogLikKind { reml, laplace_ml };

struct MixedFit {
    OutcomeFamily family = OutcomeFamily::gaussian;
    DesignSpec design;
    RandomEffectsSpec re;
    Eigen::VectorXd fixed_coefficients;
    std::vector<double> variance_components; // one per random term, in z-column order
    double residual_variance = 0.0;          // gaussian only
    Eigen::MatrixXd blups;                   // k x q, center-enumeration order
    bool converged = false;
    int iterations = 0; // outer criterion evaluations
    LogLikKind loglik_kind = LogLikKind::reml;
    double criterion = 0.0; // restricted or approximate marginal log-likelihood
    std::vector<std::string> center_levels;
    std::vector<std::string> warnings;
};

struct PredictionMode {
    enum class Variant { blup, sampled };
    Variant variant = Variant::blup;
    int draws = 1000;
    std::uint64_t seed = 0;
    bool couple_arm_draws = true; // share draws between the two arms of a patient
};

struct MixedFitOptions {
    double criterion_tol = 1e-9;
    int max_outer_eval = 600;
    int nm_restarts = 2;
    int agq_nodes = 9;  // random-intercept-only logistic fits; 1 = pure Laplace
    int max_pirls = 200;
};

/// Linear mixed model by REML: variance ratios are profiled out of the
/// restricted log-likelihood and optimized by Nelder-Mead on the log scale;
/// fixed effects by GLS at the optimum; empirical BLUPs at the optimum.
MixedFit fit_lmm(const TrialDataset& data, const DesignSpec& design,
                 const RandomEffectsSpec& re, const MixedFitOptions& options = {});

/// Mixed-effects logistic regression by Laplace-approximated maximum
/// likelihood (adaptive Gauss-Hermite for random-intercept-only models).
/// Per-center posterior modes are returned as empirical BLUPs.
MixedFit fit_glmm_logit(const TrialDataset& data, const DesignSpec& design,
                        const RandomEffectsSpec& re, const MixedFitOptions& options = {});

/// Counterfactual predictions under `arm`. blup mode plugs each patient's
/// own center BLUPs into the linear predictor. sampled mode averages over
/// fresh draws of the random effects; a draw is shared by all patients of a
/// center within a draw index, and (by default) by both arms of a patient.
Eigen::VectorXd predict_counterfactual_mixed(const MixedFit& fit, const TrialDataset& data,
                                             int arm, const PredictionMode& mode);

// --------------------------------------------------------------------------
// Matrix-level entry points (shared with the propensity module) and oracles.
// --------------------------------------------------------------------------

MixedFit fit_lmm_matrix(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                        const Eigen::MatrixXd& Z, const std::vector<int>& group_of,
                        int k, const MixedFitOptions& options);

MixedFit fit_glmm_logit_matrix(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                               const Eigen::MatrixXd& Z, const std::vector<int>& group_of,
                               int k, const MixedFitOptions& options);

/// Profiled REML objective (lower is better): log|L_theta| + 2 log|R_X| +
/// (N - p) log r^2 at the given variance ratios. Exposed for grid oracles.
double lmm_reml_objective(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                          const Eigen::MatrixXd& Z, const std::vector<int>& group_of,
                          int k, const Eigen::VectorXd& lambda);

/// Marginal log-likelihood of one center of a random-intercept logistic
/// model, integrating the intercept over N(0, sigma2) with adaptive
/// Gauss-Hermite quadrature (nodes = 1 gives the Laplace approximation).
double logistic_intercept_marginal_loglik(const Eigen::VectorXd& eta_fixed,
                                          const Eigen::VectorXd& y, double sigma2,
                                          int nodes);

/// Two-level random-intercept REML decomposition of a value vector:
/// value = mu + center effect + cluster-in-center effect + residual.
struct NestedComponents {
    double mu = 0.0;
    double var_center = 0.0;
    double var_cluster = 0.0;
    double var_resid = 0.0;
    bool cluster_dropped = false; // cluster level aliased (one cluster per center)
    bool converged = false;
};
NestedComponents fit_nested_intercepts(const Eigen::VectorXd& values,
                                       const std::vector<int>& center_of,
                                       const std::vector<int>& cluster_of,
                                       int k, int n_clusters,
                                       const MixedFitOptions& options = {});

/// Random-effect design row: [1 | A | selected covariates] per the spec.
Eigen::MatrixXd build_random_design(const TrialDataset& data, const RandomEffectsSpec& re,
                                    std::optional<int> arm_override = std::nullopt);

} // namespace clustrial
