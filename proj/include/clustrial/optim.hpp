#pragma once

#include <Eigen/Dense>
#include <functional>

namespace clustrial {

struct NelderMeadResult {
    Eigen::VectorXd x;
    double value = 0.0;
    int evaluations = 0;
    bool converged = false;
};

/// Derivative-free Nelder-Mead minimization. Stops when the simplex
/// function-value spread falls below f_tol or max_eval is reached.
NelderMeadResult nelder_mead(const std::function<double(const Eigen::VectorXd&)>& f,
                             const Eigen::VectorXd& x0,
                             double initial_step,
                             double f_tol,
                             int max_eval);

/// Nelder-Mead with restarts from the incumbent optimum; guards against
/// premature simplex collapse on flat criteria.
NelderMeadResult nelder_mead_restarts(const std::function<double(const Eigen::VectorXd&)>& f,
                                      const Eigen::VectorXd& x0,
                                      double initial_step,
                                      double f_tol,
                                      int max_eval,
                                      int restarts);

} // namespace clustrial
