#pragma once

#include <Eigen/Dense>
#include <functional>

namespace clustrial {

/// Gauss-Hermite rule in the physicists' convention:
///   integral of f(x) exp(-x^2) dx  ~=  sum_i weights[i] * f(nodes[i]).
struct GaussHermiteRule {
    Eigen::VectorXd nodes;
    Eigen::VectorXd weights;
};

/// Nodes and weights via the Golub-Welsch eigendecomposition of the
/// Hermite recurrence's Jacobi matrix.
GaussHermiteRule gauss_hermite(int n);

/// E[f(mu + sigma * Z)] for standard normal Z, using the given rule.
double gauss_hermite_normal_mean(const std::function<double(double)>& f,
                                 double mu, double sigma,
                                 const GaussHermiteRule& rule);

} // namespace clustrial
