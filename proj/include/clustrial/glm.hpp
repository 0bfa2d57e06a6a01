#pragma once

#include <Eigen/Dense>
#include <optional>
#include <string>
#include <vector>

#include "clustrial/dataset.hpp"

namespace clustrial {

/// Fixed-effects design description. Column layout of the built matrix:
/// intercept, [treatment], selected covariates, [k-1 center indicators]
/// (reference-coded against the first center).
struct DesignSpec {
    bool include_treatment = true;
    std::vector<int> covariate_columns;
    bool center_indicators = false;
    bool fit_per_arm = false;
};

struct GlmFit {
    OutcomeFamily family = OutcomeFamily::gaussian;
    DesignSpec design;
    Eigen::VectorXd coefficients;         // dropped columns carry coefficient 0
    Eigen::VectorXd coefficients_control; // second fit when fit_per_arm
    std::vector<int> dropped_columns;
    bool converged = true;
    int iterations = 0;
    double max_abs_score = 0.0; // max |X'(y - mu)| / n at the returned fit
    std::vector<std::string> center_levels;
    std::vector<std::string> warnings;
};

/// Canonical-link GLM fit: closed-form least squares for gaussian,
/// iteratively reweighted least squares for the binomial-logit family.
/// Aliased center-indicator columns are dropped with a warning; aliasing
/// among other columns is an error.
GlmFit fit_glm(const TrialDataset& data, const DesignSpec& design);

/// Per-patient prediction with the treatment column forced to `arm`.
/// Gaussian: linear predictor; binomial: inverse logit. Center-indicator
/// fits use each patient's own center; unseen centers are an error.
Eigen::VectorXd predict_counterfactual(const GlmFit& fit, const TrialDataset& data, int arm);

// --------------------------------------------------------------------------
// Matrix-level fitters, shared with the propensity module.
// --------------------------------------------------------------------------

struct LinearFitResult {
    Eigen::VectorXd beta; // full length, dropped columns = 0
    std::vector<int> dropped;
    bool converged = true;
    int iterations = 0;
    double max_abs_score = 0.0; // mean-scale score
    std::vector<std::string> warnings;
};

/// Least squares with rank detection; columns flagged droppable may be
/// removed on aliasing, others raise FitError.
LinearFitResult fit_gaussian_ls(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                                const std::vector<bool>& droppable);

/// Logistic IRLS. Columns flagged droppable (center indicators) are removed
/// if aliased or if their coefficients diverge (separation); other diverging
/// fits are returned with converged=false.
LinearFitResult fit_logistic_irls(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                                  const std::vector<bool>& droppable,
                                  int max_iter = 100);

inline double inverse_logit(double x) {
    if (x >= 0.0) {
        const double e = std::exp(-x);
        return 1.0 / (1.0 + e);
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

/// Design matrix for a dataset under a spec. `center_levels` fixes the
/// indicator coding (column order and reference level). `arm_override`
/// replaces the treatment column; `drop_treatment` removes it (per-arm fits).
Eigen::MatrixXd build_design(const TrialDataset& data, const DesignSpec& design,
                             const std::vector<std::string>& center_levels,
                             std::optional<int> arm_override = std::nullopt,
                             bool drop_treatment = false);

} // namespace clustrial
