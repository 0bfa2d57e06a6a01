#include "clustrial/gauss_hermite.hpp"

#include <cmath>
#include <stdexcept>

namespace clustrial {

GaussHermiteRule gauss_hermite(int n) {
    if (n < 1) throw std::invalid_argument("gauss_hermite: n must be >= 1");

    GaussHermiteRule rule;
    if (n == 1) {
        rule.nodes = Eigen::VectorXd::Zero(1);
        rule.weights = Eigen::VectorXd::Constant(1, std::sqrt(M_PI));
        return rule;
    }

    // Jacobi matrix of the Hermite recurrence: zero diagonal,
    // off-diagonal sqrt(i/2) for i = 1..n-1.
    Eigen::MatrixXd jacobi = Eigen::MatrixXd::Zero(n, n);
    for (int i = 1; i < n; ++i) {
        const double b = std::sqrt(static_cast<double>(i) / 2.0);
        jacobi(i, i - 1) = b;
        jacobi(i - 1, i) = b;
    }

    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(jacobi);
    rule.nodes = solver.eigenvalues();
    rule.weights.resize(n);
    const double total = std::sqrt(M_PI);
    for (int i = 0; i < n; ++i) {
        const double v0 = solver.eigenvectors()(0, i);
        rule.weights(i) = total * v0 * v0;
    }
    return rule;
}

double gauss_hermite_normal_mean(const std::function<double(double)>& f,
                                 double mu, double sigma,
                                 const GaussHermiteRule& rule) {
    const double scale = std::sqrt(2.0) * sigma;
    double acc = 0.0;
    for (int i = 0; i < rule.nodes.size(); ++i) {
        acc += rule.weights(i) * f(mu + scale * rule.nodes(i));
    }
    return acc / std::sqrt(M_PI);
}

} // namespace clustrial
