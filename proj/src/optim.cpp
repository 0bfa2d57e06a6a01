#include "clustrial/optim.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace clustrial {

NelderMeadResult nelder_mead(const std::function<double(const Eigen::VectorXd&)>& f,
                             const Eigen::VectorXd& x0,
                             double initial_step,
                             double f_tol,
                             int max_eval) {
    const int n = static_cast<int>(x0.size());
    const double alpha = 1.0;   // reflection
    const double gamma = 2.0;   // expansion
    const double rho = 0.5;     // contraction
    const double sigma = 0.5;   // shrink

    std::vector<Eigen::VectorXd> pts(n + 1, x0);
    std::vector<double> vals(n + 1);
    int evals = 0;

    for (int i = 1; i <= n; ++i) pts[i](i - 1) += initial_step;
    for (int i = 0; i <= n; ++i) {
        vals[i] = f(pts[i]);
        ++evals;
    }

    NelderMeadResult result;
    while (evals < max_eval) {
        // Order vertices by value.
        std::vector<int> order(n + 1);
        for (int i = 0; i <= n; ++i) order[i] = i;
        std::sort(order.begin(), order.end(), [&](int a, int b) { return vals[a] < vals[b]; });
        {
            std::vector<Eigen::VectorXd> p2(n + 1);
            std::vector<double> v2(n + 1);
            for (int i = 0; i <= n; ++i) {
                p2[i] = pts[order[i]];
                v2[i] = vals[order[i]];
            }
            pts.swap(p2);
            vals.swap(v2);
        }

        if (std::abs(vals[n] - vals[0]) <= f_tol * (1.0 + std::abs(vals[0]))) {
            result.converged = true;
            break;
        }

        Eigen::VectorXd centroid = Eigen::VectorXd::Zero(n);
        for (int i = 0; i < n; ++i) centroid += pts[i];
        centroid /= static_cast<double>(n);

        Eigen::VectorXd xr = centroid + alpha * (centroid - pts[n]);
        double fr = f(xr);
        ++evals;

        if (fr < vals[0]) {
            Eigen::VectorXd xe = centroid + gamma * (xr - centroid);
            double fe = f(xe);
            ++evals;
            if (fe < fr) {
                pts[n] = xe;
                vals[n] = fe;
            } else {
                pts[n] = xr;
                vals[n] = fr;
            }
        } else if (fr < vals[n - 1]) {
            pts[n] = xr;
            vals[n] = fr;
        } else {
            Eigen::VectorXd xc = centroid + rho * (pts[n] - centroid);
            double fc = f(xc);
            ++evals;
            if (fc < vals[n]) {
                pts[n] = xc;
                vals[n] = fc;
            } else {
                for (int i = 1; i <= n; ++i) {
                    pts[i] = pts[0] + sigma * (pts[i] - pts[0]);
                    vals[i] = f(pts[i]);
                    ++evals;
                }
            }
        }
    }

    int best = 0;
    for (int i = 1; i <= n; ++i)
        if (vals[i] < vals[best]) best = i;
    result.x = pts[best];
    result.value = vals[best];
    result.evaluations = evals;
    return result;
}

NelderMeadResult nelder_mead_restarts(const std::function<double(const Eigen::VectorXd&)>& f,
                                      const Eigen::VectorXd& x0,
                                      double initial_step,
                                      double f_tol,
                                      int max_eval,
                                      int restarts) {
    NelderMeadResult best = nelder_mead(f, x0, initial_step, f_tol, max_eval);
    double step = initial_step;
    for (int r = 0; r < restarts; ++r) {
        step *= 0.25;
        NelderMeadResult next = nelder_mead(f, best.x, step, f_tol, max_eval);
        const int total_evals = best.evaluations + next.evaluations;
        if (next.value <= best.value) best = next;
        best.evaluations = total_evals;
        best.converged = next.converged;
    }
    return best;
}

} // namespace clustrial
