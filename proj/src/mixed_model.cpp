#include "clustrial/mixed_model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "clustrial/errors.hpp"
#include "clustrial/gauss_hermite.hpp"
#include "clustrial/optim.hpp"
#include "clustrial/rng.hpp"

namespace clustrial {

namespace {

constexpr double kObjectiveFail = 1e100;
constexpr double kLogVarFloor = -23.025850929940457; // log(1e-10)
constexpr double kLogVarCeil = 18.420680743952367;   // log(1e8)
constexpr double kReportZeroBelow = 1.2e-10;

double clamp_logvar(double s) { return std::min(std::max(s, kLogVarFloor), kLogVarCeil); }

// ---------------------------------------------------------------------------
// Per-group sufficient statistics for the linear mixed model
// ---------------------------------------------------------------------------

struct LmmStats {
    int n = 0, p = 0, q = 0, k = 0;
    std::vector<Eigen::MatrixXd> XtX, ZtZ, ZtX;
    std::vector<Eigen::VectorXd> Xty, Zty;
    std::vector<double> yty;
    std::vector<int> sizes;
};

LmmStats compute_lmm_stats(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                           const Eigen::MatrixXd& Z, const std::vector<int>& group_of, int k) {
    LmmStats s;
    s.n = static_cast<int>(X.rows());
    s.p = static_cast<int>(X.cols());
    s.q = static_cast<int>(Z.cols());
    s.k = k;
    s.XtX.assign(k, Eigen::MatrixXd::Zero(s.p, s.p));
    s.ZtZ.assign(k, Eigen::MatrixXd::Zero(s.q, s.q));
    s.ZtX.assign(k, Eigen::MatrixXd::Zero(s.q, s.p));
    s.Xty.assign(k, Eigen::VectorXd::Zero(s.p));
    s.Zty.assign(k, Eigen::VectorXd::Zero(s.q));
    s.yty.assign(k, 0.0);
    s.sizes.assign(k, 0);
    for (int i = 0; i < s.n; ++i) {
        const int g = group_of[i];
        const auto xi = X.row(i);
        const auto zi = Z.row(i);
        s.XtX[g].noalias() += xi.transpose() * xi;
        s.ZtZ[g].noalias() += zi.transpose() * zi;
        s.ZtX[g].noalias() += zi.transpose() * xi;
        s.Xty[g].noalias() += xi.transpose() * y(i);
        s.Zty[g].noalias() += zi.transpose() * y(i);
        s.yty[g] += y(i) * y(i);
        ++s.sizes[g];
    }
    return s;
}

struct LmmProfile {
    double objective = kObjectiveFail;
    Eigen::VectorXd beta;
    double r_sq = 0.0;
    bool ok = false;
};

/// Profiled REML objective at variance ratios lambda (= sigma_j^2 / sigma^2).
LmmProfile lmm_profile(const LmmStats& s, const Eigen::VectorXd& lambda, bool want_beta) {
    LmmProfile out;
    const int p = s.p, q = s.q;
    const Eigen::VectorXd t = lambda.cwiseMax(0.0).cwiseSqrt();

    Eigen::MatrixXd A = Eigen::MatrixXd::Zero(p, p);
    Eigen::VectorXd b = Eigen::VectorXd::Zero(p);
    double css = 0.0;
    double log_det_l = 0.0;

    for (int g = 0; g < s.k; ++g) {
        Eigen::MatrixXd M = Eigen::MatrixXd::Identity(q, q);
        M.noalias() += t.asDiagonal() * s.ZtZ[g] * t.asDiagonal();
        Eigen::LLT<Eigen::MatrixXd> llt(M);
        if (llt.info() != Eigen::Success) return out;
        const Eigen::MatrixXd L = llt.matrixL();
        const Eigen::VectorXd cu = L.triangularView<Eigen::Lower>().solve(t.asDiagonal() * s.Zty[g]);
        const Eigen::MatrixXd cx = L.triangularView<Eigen::Lower>().solve(t.asDiagonal() * s.ZtX[g]);
        A.noalias() += s.XtX[g] - cx.transpose() * cx;
        b.noalias() += s.Xty[g] - cx.transpose() * cu;
        css += s.yty[g] - cu.squaredNorm();
        for (int i = 0; i < q; ++i) log_det_l += 2.0 * std::log(L(i, i));
    }

    Eigen::LLT<Eigen::MatrixXd> llt_a(A);
    if (llt_a.info() != Eigen::Success) return out;
    const Eigen::VectorXd beta = llt_a.solve(b);
    const double r_sq = css - beta.dot(b);
    if (!(r_sq > 0.0)) return out;

    double log_det_rx = 0.0;
    const Eigen::MatrixXd R = llt_a.matrixL();
    for (int i = 0; i < p; ++i) log_det_rx += std::log(R(i, i));

    out.objective = log_det_l + 2.0 * log_det_rx +
                    static_cast<double>(s.n - p) * std::log(r_sq);
    out.r_sq = r_sq;
    out.ok = true;
    if (want_beta) out.beta = beta;
    return out;
}

Eigen::MatrixXd lmm_blups(const LmmStats& s, const Eigen::VectorXd& lambda,
                          const Eigen::VectorXd& beta) {
    const int q = s.q;
    const Eigen::VectorXd t = lambda.cwiseMax(0.0).cwiseSqrt();
    Eigen::MatrixXd blups(s.k, q);
    for (int g = 0; g < s.k; ++g) {
        Eigen::MatrixXd M = Eigen::MatrixXd::Identity(q, q);
        M.noalias() += t.asDiagonal() * s.ZtZ[g] * t.asDiagonal();
        const Eigen::VectorXd rhs = t.asDiagonal() * (s.Zty[g] - s.ZtX[g] * beta);
        const Eigen::VectorXd u_star = M.llt().solve(rhs);
        blups.row(g) = (t.asDiagonal() * u_star).transpose();
    }
    return blups;
}

/// Two-start Nelder-Mead over log variance(-ratio) parameters.
NelderMeadResult optimize_logvar(const std::function<double(const Eigen::VectorXd&)>& objective,
                                 int dim, const MixedFitOptions& options) {
    auto wrapped = [&](const Eigen::VectorXd& sv) {
        Eigen::VectorXd clamped(sv.size());
        for (int j = 0; j < sv.size(); ++j) clamped(j) = clamp_logvar(sv(j));
        return objective(clamped);
    };
    NelderMeadResult best;
    best.value = std::numeric_limits<double>::infinity();
    for (double start : {std::log(0.1), std::log(1.0)}) {
        const Eigen::VectorXd x0 = Eigen::VectorXd::Constant(dim, start);
        NelderMeadResult r = nelder_mead_restarts(wrapped, x0, 1.5, options.criterion_tol,
                                                  options.max_outer_eval, options.nm_restarts);
        r.evaluations += best.evaluations;
        if (r.value < best.value) {
            const int evals = r.evaluations;
            best = r;
            best.evaluations = evals;
        } else {
            best.evaluations = r.evaluations;
        }
    }
    for (int j = 0; j < best.x.size(); ++j) best.x(j) = clamp_logvar(best.x(j));
    return best;
}

} // namespace

double lmm_reml_objective(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                          const Eigen::MatrixXd& Z, const std::vector<int>& group_of,
                          int k, const Eigen::VectorXd& lambda) {
    const LmmStats s = compute_lmm_stats(X, y, Z, group_of, k);
    return lmm_profile(s, lambda, false).objective;
}

MixedFit fit_lmm_matrix(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                        const Eigen::MatrixXd& Z, const std::vector<int>& group_of,
                        int k, const MixedFitOptions& options) {
    const LmmStats s = compute_lmm_stats(X, y, Z, group_of, k);
    const int q = s.q;

    auto objective = [&](const Eigen::VectorXd& sv) {
        Eigen::VectorXd lambda(q);
        for (int j = 0; j < q; ++j) lambda(j) = std::exp(sv(j));
        return lmm_profile(s, lambda, false).objective;
    };
    const NelderMeadResult opt = optimize_logvar(objective, q, options);

    Eigen::VectorXd lambda(q);
    for (int j = 0; j < q; ++j) lambda(j) = std::exp(opt.x(j));
    const LmmProfile prof = lmm_profile(s, lambda, true);

    MixedFit fit;
    fit.family = OutcomeFamily::gaussian;
    fit.loglik_kind = LogLikKind::reml;
    fit.iterations = opt.evaluations;
    if (!prof.ok) {
        fit.converged = false;
        fit.warnings.push_back("REML profile evaluation failed at the optimizer solution");
        return fit;
    }
    fit.converged = opt.converged;
    fit.fixed_coefficients = prof.beta;
    fit.residual_variance = prof.r_sq / static_cast<double>(s.n - s.p);
    fit.variance_components.resize(q);
    for (int j = 0; j < q; ++j) {
        double v = lambda(j) * fit.residual_variance;
        if (lambda(j) <= kReportZeroBelow * 10.0 || v <= kReportZeroBelow) v = 0.0;
        fit.variance_components[j] = v;
    }
    fit.blups = lmm_blups(s, lambda, prof.beta);
    fit.criterion = -0.5 * prof.objective;
    return fit;
}

// ---------------------------------------------------------------------------
// Logistic GLMM: penalized IRLS profile + Laplace / adaptive Gauss-Hermite
// ---------------------------------------------------------------------------

namespace {

double bernoulli_loglik(double y, double eta) {
    // y*eta - log(1 + exp(eta)), stable in both tails
    const double softplus = eta > 0.0 ? eta + std::log1p(std::exp(-eta))
                                      : std::log1p(std::exp(eta));
    return y * eta - softplus;
}

struct GlmmWork {
    Eigen::VectorXd beta;
    Eigen::MatrixXd u; // k x q
    bool ok = false;
};

/// Joint penalized IRLS over fixed effects and center modes at fixed G.
/// Solves by eliminating the per-center random blocks.
GlmmWork glmm_pirls(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                    const Eigen::MatrixXd& Z, const std::vector<int>& group_of, int k,
                    const Eigen::VectorXd& g_inv_diag, const GlmmWork* warm,
                    int max_iter) {
    const int n = static_cast<int>(X.rows());
    const int p = static_cast<int>(X.cols());
    const int q = static_cast<int>(Z.cols());

    GlmmWork w;
    w.beta = warm && warm->ok ? warm->beta : Eigen::VectorXd::Zero(p);
    w.u = warm && warm->ok ? warm->u : Eigen::MatrixXd::Zero(k, q);

    double prev_pdev = std::numeric_limits<double>::infinity();
    for (int iter = 0; iter < max_iter; ++iter) {
        Eigen::VectorXd eta(n), mu(n), wt(n), z(n);
        for (int i = 0; i < n; ++i) {
            eta(i) = X.row(i).dot(w.beta) + Z.row(i).dot(w.u.row(group_of[i]));
            mu(i) = inverse_logit(eta(i));
            wt(i) = std::max(mu(i) * (1.0 - mu(i)), 1e-10);
            z(i) = eta(i) + (y(i) - mu(i)) / wt(i);
        }

        std::vector<Eigen::MatrixXd> ztwz(k, Eigen::MatrixXd::Zero(q, q));
        std::vector<Eigen::MatrixXd> ztwx(k, Eigen::MatrixXd::Zero(q, p));
        std::vector<Eigen::VectorXd> ztwzv(k, Eigen::VectorXd::Zero(q));
        Eigen::MatrixXd f = Eigen::MatrixXd::Zero(p, p);
        Eigen::VectorXd gvec = Eigen::VectorXd::Zero(p);
        for (int i = 0; i < n; ++i) {
            const int g = group_of[i];
            const auto xi = X.row(i);
            const auto zi = Z.row(i);
            ztwz[g].noalias() += wt(i) * zi.transpose() * zi;
            ztwx[g].noalias() += wt(i) * zi.transpose() * xi;
            ztwzv[g].noalias() += wt(i) * zi.transpose() * z(i);
            f.noalias() += wt(i) * xi.transpose() * xi;
            gvec.noalias() += wt(i) * xi.transpose() * z(i);
        }

        std::vector<Eigen::LLT<Eigen::MatrixXd>> m_llt;
        m_llt.reserve(k);
        for (int g = 0; g < k; ++g) {
            Eigen::MatrixXd m = ztwz[g];
            m.diagonal() += g_inv_diag;
            m_llt.emplace_back(m);
            if (m_llt.back().info() != Eigen::Success) return w;
            const Eigen::MatrixXd minv_ztwx = m_llt.back().solve(ztwx[g]);
            f.noalias() -= ztwx[g].transpose() * minv_ztwx;
            gvec.noalias() -= minv_ztwx.transpose() * ztwzv[g];
        }

        Eigen::LDLT<Eigen::MatrixXd> f_ldlt(f);
        if (f_ldlt.info() != Eigen::Success) return w;
        const Eigen::VectorXd beta_new = f_ldlt.solve(gvec);
        Eigen::MatrixXd u_new(k, q);
        for (int g = 0; g < k; ++g)
            u_new.row(g) = m_llt[g].solve(ztwzv[g] - ztwx[g] * beta_new).transpose();

        double delta = (beta_new - w.beta).cwiseAbs().maxCoeff();
        delta = std::max(delta, (u_new - w.u).cwiseAbs().maxCoeff());

        // Damped acceptance on the penalized deviance.
        Eigen::VectorXd beta_cand = beta_new;
        Eigen::MatrixXd u_cand = u_new;
        for (int half = 0; half < 6; ++half) {
            double pdev = 0.0;
            for (int i = 0; i < n; ++i) {
                const double e = X.row(i).dot(beta_cand) + Z.row(i).dot(u_cand.row(group_of[i]));
                pdev -= 2.0 * bernoulli_loglik(y(i), e);
            }
            for (int g = 0; g < k; ++g)
                for (int j = 0; j < q; ++j) pdev += u_cand(g, j) * u_cand(g, j) * g_inv_diag(j);
            if (pdev <= prev_pdev + 1e-8 || !std::isfinite(prev_pdev)) {
                prev_pdev = pdev;
                break;
            }
            beta_cand = 0.5 * (beta_cand + w.beta);
            u_cand = 0.5 * (u_cand + w.u);
        }
        w.beta = beta_cand;
        w.u = u_cand;

        if (delta <= 1e-10) {
            w.ok = true;
            return w;
        }
    }
    w.ok = true; // usable but not tightly converged
    return w;
}

} // namespace

double logistic_intercept_marginal_loglik(const Eigen::VectorXd& eta_fixed,
                                          const Eigen::VectorXd& y, double sigma2,
                                          int nodes) {
    const int n = static_cast<int>(eta_fixed.size());
    auto loglik_at = [&](double u) {
        double acc = 0.0;
        for (int i = 0; i < n; ++i) acc += bernoulli_loglik(y(i), eta_fixed(i) + u);
        return acc;
    };
    if (sigma2 <= 0.0) return loglik_at(0.0);

    // Posterior mode by Newton; the penalized objective is strictly concave.
    double u = 0.0;
    for (int iter = 0; iter < 100; ++iter) {
        double grad = -u / sigma2;
        double hess = 1.0 / sigma2;
        for (int i = 0; i < n; ++i) {
            const double mu = inverse_logit(eta_fixed(i) + u);
            grad += y(i) - mu;
            hess += std::max(mu * (1.0 - mu), 1e-12);
        }
        const double step = grad / hess;
        u += step;
        if (std::abs(step) <= 1e-12) break;
        if (iter == 99) throw FitError("posterior mode Newton did not converge");
    }

    double hess = 1.0 / sigma2;
    for (int i = 0; i < n; ++i) {
        const double mu = inverse_logit(eta_fixed(i) + u);
        hess += std::max(mu * (1.0 - mu), 1e-12);
    }
    const double s_hat = 1.0 / std::sqrt(hess);

    auto h = [&](double v) {
        return loglik_at(v) - 0.5 * v * v / sigma2 - 0.5 * std::log(2.0 * M_PI * sigma2);
    };

    // Adaptive rule centered at the mode:
    //   log int exp(h) = h(u) + log(sqrt(2) s) + log sum w_i exp(x_i^2 + h(u+sqrt2 s x_i) - h(u))
    const GaussHermiteRule rule = gauss_hermite(std::max(nodes, 1));
    const double h0 = h(u);
    double acc = 0.0;
    for (int i = 0; i < rule.nodes.size(); ++i) {
        const double x = rule.nodes(i);
        acc += rule.weights(i) * std::exp(x * x + h(u + std::sqrt(2.0) * s_hat * x) - h0);
    }
    return h0 + std::log(std::sqrt(2.0) * s_hat) + std::log(acc);
}

MixedFit fit_glmm_logit_matrix(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                               const Eigen::MatrixXd& Z, const std::vector<int>& group_of,
                               int k, const MixedFitOptions& options) {
    const int n = static_cast<int>(X.rows());
    const int q = static_cast<int>(Z.cols());
    const bool use_agq = (q == 1) && options.agq_nodes > 1;

    std::vector<std::vector<int>> rows(k);
    for (int i = 0; i < n; ++i) rows[group_of[i]].push_back(i);

    GlmmWork warm;
    auto criterion = [&](const Eigen::VectorXd& sv) -> double {
        Eigen::VectorXd sigma2(q), g_inv(q);
        for (int j = 0; j < q; ++j) {
            sigma2(j) = std::exp(sv(j));
            g_inv(j) = 1.0 / sigma2(j);
        }
        const GlmmWork w = glmm_pirls(X, y, Z, group_of, k, g_inv, &warm, options.max_pirls);
        if (!w.ok) return kObjectiveFail;
        warm = w;

        double loglik = 0.0;
        if (use_agq) {
            try {
                for (int g = 0; g < k; ++g) {
                    Eigen::VectorXd eta_f(static_cast<int>(rows[g].size()));
                    Eigen::VectorXd yg(static_cast<int>(rows[g].size()));
                    for (std::size_t i = 0; i < rows[g].size(); ++i) {
                        eta_f(static_cast<int>(i)) = X.row(rows[g][i]).dot(w.beta);
                        yg(static_cast<int>(i)) = y(rows[g][i]);
                    }
                    loglik += logistic_intercept_marginal_loglik(eta_f, yg, sigma2(0),
                                                                 options.agq_nodes);
                }
            } catch (const FitError&) {
                return kObjectiveFail;
            }
        } else {
            // Laplace at the joint mode: sum loglik - u'G^{-1}u/2 - log det(G Z'WZ + I)/2
            for (int i = 0; i < n; ++i) {
                const double eta = X.row(i).dot(w.beta) + Z.row(i).dot(w.u.row(group_of[i]));
                loglik += bernoulli_loglik(y(i), eta);
            }
            for (int g = 0; g < k; ++g) {
                Eigen::MatrixXd ztwz = Eigen::MatrixXd::Zero(q, q);
                for (int idx : rows[g]) {
                    const double eta = X.row(idx).dot(w.beta) + Z.row(idx).dot(w.u.row(g));
                    const double mu = inverse_logit(eta);
                    const double wt = std::max(mu * (1.0 - mu), 1e-12);
                    ztwz.noalias() += wt * Z.row(idx).transpose() * Z.row(idx);
                }
                for (int j = 0; j < q; ++j) loglik -= 0.5 * w.u(g, j) * w.u(g, j) / sigma2(j);
                Eigen::MatrixXd m = sigma2.asDiagonal() * ztwz + Eigen::MatrixXd::Identity(q, q);
                loglik -= 0.5 * std::log(m.determinant());
            }
        }
        return std::isfinite(loglik) ? -loglik : kObjectiveFail;
    };

    const NelderMeadResult opt = optimize_logvar(criterion, q, options);

    // Final refit from a cold start at the selected variances.
    Eigen::VectorXd sigma2(q), g_inv(q);
    for (int j = 0; j < q; ++j) {
        sigma2(j) = std::exp(opt.x(j));
        g_inv(j) = 1.0 / sigma2(j);
    }
    const GlmmWork w = glmm_pirls(X, y, Z, group_of, k, g_inv, nullptr, options.max_pirls);

    MixedFit fit;
    fit.family = OutcomeFamily::binomial_logit;
    fit.loglik_kind = LogLikKind::laplace_ml;
    fit.iterations = opt.evaluations;
    fit.converged = opt.converged && w.ok;
    fit.fixed_coefficients = w.beta;
    fit.blups = w.u;
    fit.variance_components.resize(q);
    for (int j = 0; j < q; ++j) {
        double v = sigma2(j);
        if (v <= kReportZeroBelow) v = 0.0;
        fit.variance_components[j] = v;
    }
    fit.criterion = -opt.value;
    return fit;
}

// ---------------------------------------------------------------------------
// Dataset-level wrappers
// ---------------------------------------------------------------------------

Eigen::MatrixXd build_random_design(const TrialDataset& data, const RandomEffectsSpec& re,
                                    std::optional<int> arm_override) {
    const int n = data.n();
    const int q = re.q();
    if (q < 1) throw ConfigError("random-effects specification has no terms");
    Eigen::MatrixXd Z(n, q);
    for (int i = 0; i < n; ++i) {
        const PatientRecord& r = data.records()[i];
        int col = 0;
        if (re.random_intercept) Z(i, col++) = 1.0;
        if (re.random_treatment_slope)
            Z(i, col++) = arm_override ? static_cast<double>(*arm_override)
                                       : static_cast<double>(r.treatment);
        for (int j : re.random_covariate_slopes) Z(i, col++) = r.covariates[j];
    }
    return Z;
}

namespace {

MixedFit finish_dataset_fit(MixedFit fit, const TrialDataset& data, const DesignSpec& design,
                            const RandomEffectsSpec& re) {
    fit.design = design;
    fit.re = re;
    fit.center_levels = data.center_ids();
    return fit;
}

} // namespace

MixedFit fit_lmm(const TrialDataset& data, const DesignSpec& design,
                 const RandomEffectsSpec& re, const MixedFitOptions& options) {
    if (data.family() != OutcomeFamily::gaussian)
        throw ConfigError("fit_lmm requires the gaussian family");
    if (design.center_indicators)
        throw ConfigError("mixed fits do not take center indicator columns");
    const Eigen::MatrixXd X = build_design(data, design, {});
    const Eigen::MatrixXd Z = build_random_design(data, re);
    MixedFit fit = fit_lmm_matrix(X, data.outcomes(), Z, data.center_of(), data.k(), options);
    fit.family = OutcomeFamily::gaussian;
    return finish_dataset_fit(std::move(fit), data, design, re);
}

MixedFit fit_glmm_logit(const TrialDataset& data, const DesignSpec& design,
                        const RandomEffectsSpec& re, const MixedFitOptions& options) {
    if (data.family() != OutcomeFamily::binomial_logit)
        throw ConfigError("fit_glmm_logit requires the binomial family");
    if (design.center_indicators)
        throw ConfigError("mixed fits do not take center indicator columns");
    const Eigen::MatrixXd X = build_design(data, design, {});
    const Eigen::MatrixXd Z = build_random_design(data, re);
    MixedFit fit =
        fit_glmm_logit_matrix(X, data.outcomes(), Z, data.center_of(), data.k(), options);
    return finish_dataset_fit(std::move(fit), data, design, re);
}

Eigen::VectorXd predict_counterfactual_mixed(const MixedFit& fit, const TrialDataset& data,
                                             int arm, const PredictionMode& mode) {
    if (arm != 0 && arm != 1) throw ConfigError("arm must be 0 or 1");
    if (!fit.center_levels.empty() && fit.center_levels != data.center_ids())
        throw FitError("prediction dataset centers differ from the centers seen at fit time");
    const int n = data.n();
    const int k = data.k();
    const int q = fit.re.q();
    const bool logit = fit.family == OutcomeFamily::binomial_logit;

    const Eigen::MatrixXd X = build_design(data, fit.design, {}, arm);
    const Eigen::MatrixXd Z = build_random_design(data, fit.re, arm);
    const Eigen::VectorXd eta_fixed = X * fit.fixed_coefficients;

    Eigen::VectorXd out(n);
    if (mode.variant == PredictionMode::Variant::blup) {
        for (int i = 0; i < n; ++i) {
            const double eta = eta_fixed(i) + Z.row(i).dot(fit.blups.row(data.center_of()[i]));
            out(i) = logit ? inverse_logit(eta) : eta;
        }
        return out;
    }

    if (mode.draws < 1) throw ConfigError("sampled prediction needs draws >= 1");
    Eigen::VectorXd sd(q);
    for (int j = 0; j < q; ++j) sd(j) = std::sqrt(std::max(fit.variance_components[j], 0.0));

    // One draw matrix per center, shared by all of its patients; the stream
    // is keyed by (seed, center, arm-or-coupled) so results do not depend on
    // patient order or thread count.
    std::vector<Eigen::MatrixXd> draws(k);
    for (int c = 0; c < k; ++c) {
        const std::uint64_t stream =
            mode.couple_arm_draws ? static_cast<std::uint64_t>(c)
                                  : static_cast<std::uint64_t>(c) * 2ULL +
                                        static_cast<std::uint64_t>(arm);
        Rng rng = Rng::split(mode.seed, stream);
        Eigen::MatrixXd d(mode.draws, q);
        for (int r = 0; r < mode.draws; ++r)
            for (int j = 0; j < q; ++j) d(r, j) = sd(j) * rng.normal();
        draws[c] = std::move(d);
    }

    for (int i = 0; i < n; ++i) {
        const Eigen::MatrixXd& d = draws[data.center_of()[i]];
        const auto zi = Z.row(i);
        double acc = 0.0;
        for (int r = 0; r < mode.draws; ++r) {
            const double eta = eta_fixed(i) + zi.dot(d.row(r));
            acc += logit ? inverse_logit(eta) : eta;
        }
        out(i) = acc / static_cast<double>(mode.draws);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Two-level random intercepts (center + cluster-in-center) for value vectors
// ---------------------------------------------------------------------------

NestedComponents fit_nested_intercepts(const Eigen::VectorXd& values,
                                       const std::vector<int>& center_of,
                                       const std::vector<int>& cluster_of,
                                       int k, int n_clusters,
                                       const MixedFitOptions& options) {
    const int n = static_cast<int>(values.size());
    std::vector<std::vector<int>> center_rows(k);
    for (int i = 0; i < n; ++i) center_rows[center_of[i]].push_back(i);

    bool any_multi_cluster = false;
    {
        std::vector<int> clusters_in_center(k, 0);
        std::vector<int> seen(n_clusters, 0);
        for (int j = 0; j < n_clusters; ++j) seen[j] = -1;
        for (int i = 0; i < n; ++i) {
            const int j = cluster_of[i];
            if (seen[j] < 0) {
                seen[j] = 1;
                ++clusters_in_center[center_of[i]];
            }
        }
        for (int c = 0; c < k; ++c)
            if (clusters_in_center[c] >= 2) any_multi_cluster = true;
    }

    // Profiled REML over variance ratios; V_c/sigma^2 is built densely per
    // center (centers are small in every use of this decomposition).
    auto profile = [&](double lam_center, double lam_cluster, double* mu_out,
                       double* sigma2_out) -> double {
        double log_det = 0.0, a = 0.0, b = 0.0, quad = 0.0;
        for (int c = 0; c < k; ++c) {
            const int m = static_cast<int>(center_rows[c].size());
            Eigen::MatrixXd v = Eigen::MatrixXd::Identity(m, m);
            v.array() += lam_center;
            for (int r = 0; r < m; ++r)
                for (int s2 = 0; s2 < m; ++s2)
                    if (cluster_of[center_rows[c][r]] == cluster_of[center_rows[c][s2]])
                        v(r, s2) += lam_cluster;
            Eigen::LLT<Eigen::MatrixXd> llt(v);
            if (llt.info() != Eigen::Success) return kObjectiveFail;
            Eigen::VectorXd yc(m);
            for (int r = 0; r < m; ++r) yc(r) = values(center_rows[c][r]);
            const Eigen::VectorXd vy = llt.solve(yc);
            const Eigen::VectorXd v1 = llt.solve(Eigen::VectorXd::Ones(m));
            a += v1.sum();
            b += vy.sum();
            quad += yc.dot(vy);
            const Eigen::MatrixXd L = llt.matrixL();
            for (int r = 0; r < m; ++r) log_det += 2.0 * std::log(L(r, r));
        }
        if (!(a > 0.0)) return kObjectiveFail;
        const double mu = b / a;
        const double r_sq = quad - b * b / a;
        if (!(r_sq > 0.0)) return kObjectiveFail;
        if (mu_out) *mu_out = mu;
        if (sigma2_out) *sigma2_out = r_sq / static_cast<double>(n - 1);
        return log_det + std::log(a) + static_cast<double>(n - 1) * std::log(r_sq);
    };

    NestedComponents out;
    NelderMeadResult opt;
    if (any_multi_cluster) {
        auto objective = [&](const Eigen::VectorXd& sv) {
            return profile(std::exp(sv(0)), std::exp(sv(1)), nullptr, nullptr);
        };
        opt = optimize_logvar(objective, 2, options);
    } else {
        out.cluster_dropped = true;
        auto objective = [&](const Eigen::VectorXd& sv) {
            return profile(std::exp(sv(0)), 0.0, nullptr, nullptr);
        };
        opt = optimize_logvar(objective, 1, options);
    }

    const double lam_center = std::exp(opt.x(0));
    const double lam_cluster = (any_multi_cluster ? std::exp(opt.x(1)) : 0.0);
    double mu = 0.0, sigma2 = 0.0;
    const double value = profile(lam_center, lam_cluster, &mu, &sigma2);
    out.converged = opt.converged && value < kObjectiveFail;
    out.mu = mu;
    out.var_resid = sigma2;
    out.var_center = lam_center * sigma2;
    out.var_cluster = lam_cluster * sigma2;
    if (out.var_center <= kReportZeroBelow) out.var_center = 0.0;
    if (out.var_cluster <= kReportZeroBelow) out.var_cluster = 0.0;
    return out;
}

} // namespace clustrial
