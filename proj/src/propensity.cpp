#include "clustrial/propensity.hpp"

#include <cmath>

#include "clustrial/errors.hpp"
#include "clustrial/glm.hpp"
#include "clustrial/mixed_model.hpp"

namespace clustrial {

namespace {

void clamp_probabilities(Eigen::VectorXd& p, const PropensityPolicy& policy, int& clamped) {
    if (!(policy.clamp_low > 0.0 && policy.clamp_low < policy.clamp_high &&
          policy.clamp_high < 1.0))
        throw ConfigError("propensity clamp must satisfy 0 < low < high < 1");
    clamped = 0;
    for (int i = 0; i < p.size(); ++i) {
        if (p(i) < policy.clamp_low) {
            p(i) = policy.clamp_low;
            ++clamped;
        } else if (p(i) > policy.clamp_high) {
            p(i) = policy.clamp_high;
            ++clamped;
        }
    }
}

void require_both_arms(const Eigen::VectorXd& a) {
    const double total = a.sum();
    if (total <= 0.0 || total >= static_cast<double>(a.size()))
        throw DataError("propensity estimation requires both arms to be present");
}

} // namespace

PropensityResult estimate_propensity(const TrialDataset& data, const PropensityPolicy& policy) {
    const Eigen::VectorXd a = data.treatments();
    require_both_arms(a);
    const int n = data.n();

    PropensityResult result;
    switch (policy.variant) {
        case PropensityPolicy::Variant::marginal: {
            result.probabilities = Eigen::VectorXd::Constant(n, a.mean());
            break;
        }
        case PropensityPolicy::Variant::logistic_covariates: {
            Eigen::MatrixXd x(n, 1 + policy.covariate_columns.size());
            x.col(0).setOnes();
            for (std::size_t j = 0; j < policy.covariate_columns.size(); ++j)
                for (int i = 0; i < n; ++i)
                    x(i, static_cast<int>(j) + 1) =
                        data.records()[i].covariates[policy.covariate_columns[j]];
            const LinearFitResult fit =
                fit_logistic_irls(x, a, std::vector<bool>(x.cols(), false));
            result.converged = fit.converged;
            result.probabilities = x * fit.beta;
            for (int i = 0; i < n; ++i)
                result.probabilities(i) = inverse_logit(result.probabilities(i));
            break;
        }
        case PropensityPolicy::Variant::mixed_logistic: {
            // Treatment model with a random center intercept; conditional
            // (empirical-BLUP) predictions give center-specific probabilities.
            Eigen::MatrixXd x(n, 1 + policy.covariate_columns.size());
            x.col(0).setOnes();
            for (std::size_t j = 0; j < policy.covariate_columns.size(); ++j)
                for (int i = 0; i < n; ++i)
                    x(i, static_cast<int>(j) + 1) =
                        data.records()[i].covariates[policy.covariate_columns[j]];
            const Eigen::MatrixXd z = Eigen::MatrixXd::Ones(n, 1);
            const MixedFit fit =
                fit_glmm_logit_matrix(x, a, z, data.center_of(), data.k(), MixedFitOptions{});
            result.converged = fit.converged;
            result.sigma2_center = fit.variance_components[0];
            result.probabilities.resize(n);
            for (int i = 0; i < n; ++i) {
                const double eta =
                    x.row(i).dot(fit.fixed_coefficients) + fit.blups(data.center_of()[i], 0);
                result.probabilities(i) = inverse_logit(eta);
            }
            break;
        }
    }
    clamp_probabilities(result.probabilities, policy, result.clamped_count);
    return result;
}

PropensityResult estimate_propensity_cluster(const TrialDataset& data,
                                             const PropensityPolicy& policy) {
    if (!data.has_clusters())
        throw DataError("cluster-level propensity requires a cluster column");
    const int n_clusters = data.cluster_count();
    const int n = data.n();

    // Cluster-level treatment (must be constant within cluster) and
    // cluster-level covariates (within-cluster means).
    Eigen::VectorXd a_cluster(n_clusters);
    for (int j = 0; j < n_clusters; ++j) {
        const auto& rows = data.cluster_rows()[j];
        const int a0 = data.records()[rows.front()].treatment;
        for (int idx : rows)
            if (data.records()[idx].treatment != a0)
                throw DataError("treatment varies within cluster '" + data.cluster_ids()[j] +
                                "'");
        a_cluster(j) = static_cast<double>(a0);
    }
    if (a_cluster.sum() <= 0.0 || a_cluster.sum() >= static_cast<double>(n_clusters))
        throw DataError("cluster-randomized propensity requires both arms across clusters");

    PropensityResult result;
    Eigen::VectorXd p_cluster(n_clusters);
    if (policy.covariate_columns.empty()) {
        p_cluster.setConstant(a_cluster.mean());
    } else {
        Eigen::MatrixXd x(n_clusters, 1 + policy.covariate_columns.size());
        x.col(0).setOnes();
        for (int j = 0; j < n_clusters; ++j) {
            for (std::size_t c = 0; c < policy.covariate_columns.size(); ++c) {
                double mean = 0.0;
                for (int idx : data.cluster_rows()[j])
                    mean += data.records()[idx].covariates[policy.covariate_columns[c]];
                x(j, static_cast<int>(c) + 1) =
                    mean / static_cast<double>(data.cluster_sizes()[j]);
            }
        }
        const LinearFitResult fit =
            fit_logistic_irls(x, a_cluster, std::vector<bool>(x.cols(), false));
        result.converged = fit.converged;
        p_cluster = x * fit.beta;
        for (int j = 0; j < n_clusters; ++j) p_cluster(j) = inverse_logit(p_cluster(j));
    }

    result.probabilities.resize(n);
    for (int i = 0; i < n; ++i) result.probabilities(i) = p_cluster(data.cluster_of()[i]);
    clamp_probabilities(result.probabilities, policy, result.clamped_count);
    return result;
}

} // namespace clustrial
