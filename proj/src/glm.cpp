#include "clustrial/glm.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_map>

#include "clustrial/errors.hpp"

namespace clustrial {

namespace {

std::string column_list(const std::vector<int>& cols) {
    std::string out;
    for (std::size_t i = 0; i < cols.size(); ++i) {
        if (i) out += ", ";
        out += std::to_string(cols[i]);
    }
    return out;
}

/// Indices of columns that are linearly dependent on earlier ones,
/// from a rank-revealing QR.
std::vector<int> aliased_columns(const Eigen::MatrixXd& X) {
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(X);
    const int rank = static_cast<int>(qr.rank());
    const int p = static_cast<int>(X.cols());
    std::vector<int> aliased;
    if (rank >= p) return aliased;
    const auto& perm = qr.colsPermutation().indices();
    for (int i = rank; i < p; ++i) aliased.push_back(perm(i));
    std::sort(aliased.begin(), aliased.end());
    return aliased;
}

Eigen::MatrixXd select_columns(const Eigen::MatrixXd& X, const std::vector<int>& keep) {
    Eigen::MatrixXd out(X.rows(), static_cast<int>(keep.size()));
    for (std::size_t j = 0; j < keep.size(); ++j) out.col(static_cast<int>(j)) = X.col(keep[j]);
    return out;
}

/// Partition aliased columns into droppable (removed with a warning) and
/// hard failures.
void apply_aliasing(const Eigen::MatrixXd& X, const std::vector<bool>& droppable,
                    std::vector<int>& keep, LinearFitResult& result) {
    const std::vector<int> aliased = aliased_columns(select_columns(X, keep));
    if (aliased.empty()) return;
    std::vector<int> hard;
    std::vector<int> dropped_now;
    for (int local : aliased) {
        const int col = keep[local];
        if (droppable[col])
            dropped_now.push_back(col);
        else
            hard.push_back(col);
    }
    if (!hard.empty())
        throw FitError("design matrix rank deficient; aliased columns: " + column_list(hard));
    for (int col : dropped_now) {
        keep.erase(std::find(keep.begin(), keep.end(), col));
        result.dropped.push_back(col);
    }
    result.warnings.push_back("dropped aliased columns: " + column_list(dropped_now));
}

} // namespace

LinearFitResult fit_gaussian_ls(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                                const std::vector<bool>& droppable) {
    const int p = static_cast<int>(X.cols());
    const int n = static_cast<int>(X.rows());
    LinearFitResult result;
    std::vector<int> keep(p);
    for (int j = 0; j < p; ++j) keep[j] = j;
    apply_aliasing(X, droppable, keep, result);

    const Eigen::MatrixXd Xk = select_columns(X, keep);
    const Eigen::VectorXd beta_k = Xk.colPivHouseholderQr().solve(y);

    result.beta = Eigen::VectorXd::Zero(p);
    for (std::size_t j = 0; j < keep.size(); ++j) result.beta(keep[j]) = beta_k(static_cast<int>(j));
    const Eigen::VectorXd score = Xk.transpose() * (y - Xk * beta_k) / static_cast<double>(n);
    result.max_abs_score = score.size() ? score.cwiseAbs().maxCoeff() : 0.0;
    result.converged = true;
    result.iterations = 1;
    return result;
}

LinearFitResult fit_logistic_irls(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                                  const std::vector<bool>& droppable,
                                  int max_iter) {
    const int p = static_cast<int>(X.cols());
    const int n = static_cast<int>(X.rows());
    constexpr double kCoefTol = 1e-10;
    constexpr double kScoreTol = 1e-10;  // mean scale; tighter than the 1e-8 contract
    constexpr double kDivergedCoef = 15.0;

    LinearFitResult result;
    std::vector<int> keep(p);
    for (int j = 0; j < p; ++j) keep[j] = j;
    apply_aliasing(X, droppable, keep, result);

    Eigen::MatrixXd Xk = select_columns(X, keep);
    Eigen::VectorXd beta = Eigen::VectorXd::Zero(static_cast<int>(keep.size()));
    double last_delta = 1.0;

    int iter = 0;
    for (; iter < max_iter; ++iter) {
        const Eigen::VectorXd eta = Xk * beta;
        Eigen::VectorXd mu(n), w(n);
        for (int i = 0; i < n; ++i) {
            mu(i) = inverse_logit(eta(i));
            w(i) = std::max(mu(i) * (1.0 - mu(i)), 1e-10);
        }
        const Eigen::VectorXd score = Xk.transpose() * (y - mu) / static_cast<double>(n);
        result.max_abs_score = score.size() ? score.cwiseAbs().maxCoeff() : 0.0;
        if (iter > 0 && last_delta <= kCoefTol && result.max_abs_score <= kScoreTol) {
            result.converged = true;
            break;
        }

        // Weighted least squares on the working response.
        const Eigen::VectorXd sw = w.cwiseSqrt();
        const Eigen::VectorXd z = eta + (y - mu).cwiseQuotient(w);
        const Eigen::MatrixXd A = sw.asDiagonal() * Xk;
        Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(A);
        if (qr.rank() < static_cast<int>(keep.size())) {
            // Weights collapsed for some columns (e.g. a center fitted
            // perfectly); drop what is droppable and restart.
            const auto& perm = qr.colsPermutation().indices();
            std::vector<int> dropped_now;
            for (int i = static_cast<int>(qr.rank()); i < static_cast<int>(keep.size()); ++i) {
                const int col = keep[perm(i)];
                if (!droppable[col])
                    throw FitError("logistic design rank collapsed at column " +
                                   std::to_string(col));
                dropped_now.push_back(col);
            }
            for (int col : dropped_now) {
                keep.erase(std::find(keep.begin(), keep.end(), col));
                result.dropped.push_back(col);
            }
            result.warnings.push_back("dropped columns with degenerate weights: " +
                                      column_list(dropped_now));
            Xk = select_columns(X, keep);
            beta = Eigen::VectorXd::Zero(static_cast<int>(keep.size()));
            last_delta = 1.0;
            continue;
        }
        const Eigen::VectorXd beta_new = qr.solve(sw.cwiseProduct(z));
        last_delta = (beta_new - beta).cwiseAbs().maxCoeff();
        beta = beta_new;

        // Separation guard: an indicator whose coefficient runs away is
        // dropped so the remaining fit can converge.
        if (iter >= 10) {
            std::vector<int> dropped_now;
            for (std::size_t j = 0; j < keep.size(); ++j) {
                if (droppable[keep[j]] && std::abs(beta(static_cast<int>(j))) > kDivergedCoef)
                    dropped_now.push_back(keep[j]);
            }
            if (!dropped_now.empty()) {
                for (int col : dropped_now) {
                    keep.erase(std::find(keep.begin(), keep.end(), col));
                    result.dropped.push_back(col);
                }
                result.warnings.push_back("dropped separated indicator columns: " +
                                          column_list(dropped_now));
                Xk = select_columns(X, keep);
                beta = Eigen::VectorXd::Zero(static_cast<int>(keep.size()));
                last_delta = 1.0;
            }
        }
    }
    result.iterations = iter;
    if (iter >= max_iter) result.converged = false;

    result.beta = Eigen::VectorXd::Zero(p);
    for (std::size_t j = 0; j < keep.size(); ++j) result.beta(keep[j]) = beta(static_cast<int>(j));
    return result;
}

Eigen::MatrixXd build_design(const TrialDataset& data, const DesignSpec& design,
                             const std::vector<std::string>& center_levels,
                             std::optional<int> arm_override,
                             bool drop_treatment) {
    const int n = data.n();
    const bool with_treatment = design.include_treatment && !drop_treatment;
    const int n_cov = static_cast<int>(design.covariate_columns.size());
    const int n_ind = design.center_indicators ? static_cast<int>(center_levels.size()) - 1 : 0;
    const int p = 1 + (with_treatment ? 1 : 0) + n_cov + n_ind;

    std::unordered_map<std::string, int> level_of;
    if (design.center_indicators) {
        for (std::size_t c = 0; c < center_levels.size(); ++c)
            level_of[center_levels[c]] = static_cast<int>(c);
    }

    Eigen::MatrixXd X = Eigen::MatrixXd::Zero(n, p);
    for (int i = 0; i < n; ++i) {
        const PatientRecord& r = data.records()[i];
        int col = 0;
        X(i, col++) = 1.0;
        if (with_treatment)
            X(i, col++) = arm_override ? static_cast<double>(*arm_override)
                                       : static_cast<double>(r.treatment);
        for (int j : design.covariate_columns) X(i, col++) = r.covariates[j];
        if (design.center_indicators) {
            const auto it = level_of.find(r.center_id);
            if (it == level_of.end())
                throw FitError("center '" + r.center_id + "' was not seen at fit time");
            if (it->second > 0) X(i, col + it->second - 1) = 1.0;
        }
    }
    return X;
}

namespace {

std::vector<bool> droppable_mask(const DesignSpec& design, int p, int n_ind) {
    std::vector<bool> mask(p, false);
    for (int j = p - n_ind; j < p; ++j) mask[j] = true; // indicators only
    return mask;
}

LinearFitResult fit_one(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                        OutcomeFamily family, const std::vector<bool>& droppable) {
    if (family == OutcomeFamily::gaussian) return fit_gaussian_ls(X, y, droppable);
    return fit_logistic_irls(X, y, droppable);
}

} // namespace

GlmFit fit_glm(const TrialDataset& data, const DesignSpec& design) {
    GlmFit fit;
    fit.family = data.family();
    fit.design = design;
    if (design.center_indicators) fit.center_levels = data.center_ids();
    const int n_ind = design.center_indicators ? data.k() - 1 : 0;

    if (!design.fit_per_arm) {
        const Eigen::MatrixXd X = build_design(data, design, fit.center_levels);
        const std::vector<bool> droppable =
            droppable_mask(design, static_cast<int>(X.cols()), n_ind);
        LinearFitResult r = fit_one(X, data.outcomes(), fit.family, droppable);
        fit.coefficients = std::move(r.beta);
        fit.dropped_columns = std::move(r.dropped);
        fit.converged = r.converged;
        fit.iterations = r.iterations;
        fit.max_abs_score = r.max_abs_score;
        fit.warnings = std::move(r.warnings);
        return fit;
    }

    // Separate fits per arm; the design within each arm has no treatment
    // column.
    const Eigen::MatrixXd X = build_design(data, design, fit.center_levels,
                                           std::nullopt, /*drop_treatment=*/true);
    const Eigen::VectorXd y = data.outcomes();
    const Eigen::VectorXd a = data.treatments();
    for (int arm = 1; arm >= 0; --arm) {
        std::vector<int> rows;
        for (int i = 0; i < data.n(); ++i)
            if (static_cast<int>(a(i)) == arm) rows.push_back(i);
        if (rows.empty()) throw FitError("fit_per_arm: no patients in arm " + std::to_string(arm));
        Eigen::MatrixXd Xa(static_cast<int>(rows.size()), X.cols());
        Eigen::VectorXd ya(static_cast<int>(rows.size()));
        for (std::size_t i = 0; i < rows.size(); ++i) {
            Xa.row(static_cast<int>(i)) = X.row(rows[i]);
            ya(static_cast<int>(i)) = y(rows[i]);
        }
        const std::vector<bool> droppable =
            droppable_mask(design, static_cast<int>(X.cols()), n_ind);
        LinearFitResult r = fit_one(Xa, ya, fit.family, droppable);
        if (arm == 1) {
            fit.coefficients = std::move(r.beta);
        } else {
            fit.coefficients_control = std::move(r.beta);
        }
        fit.converged = fit.converged && r.converged;
        fit.iterations += r.iterations;
        fit.max_abs_score = std::max(fit.max_abs_score, r.max_abs_score);
        for (int d : r.dropped) fit.dropped_columns.push_back(d);
        for (auto& w : r.warnings) fit.warnings.push_back(std::move(w));
    }
    return fit;
}

Eigen::VectorXd predict_counterfactual(const GlmFit& fit, const TrialDataset& data, int arm) {
    if (arm != 0 && arm != 1) throw ConfigError("arm must be 0 or 1");
    const bool per_arm = fit.design.fit_per_arm;
    const Eigen::MatrixXd X =
        build_design(data, fit.design, fit.center_levels, arm, /*drop_treatment=*/per_arm);
    const Eigen::VectorXd& beta =
        (per_arm && arm == 0) ? fit.coefficients_control : fit.coefficients;
    Eigen::VectorXd eta = X * beta;
    if (fit.family == OutcomeFamily::gaussian) return eta;
    for (int i = 0; i < eta.size(); ++i) eta(i) = inverse_logit(eta(i));
    return eta;
}

} // namespace clustrial
