#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "patchkernel/error.hpp"

namespace patchkernel {

inline double max_abs(const Eigen::MatrixXd& m) {
    return m.size() == 0 ? 0.0 : m.cwiseAbs().maxCoeff();
}

// Eigenvalues sorted descending; eigenvectors are the matching columns.
struct EigenDecomposition {
    Eigen::VectorXd values;
    Eigen::MatrixXd vectors;

    Eigen::Index dimension() const { return values.size(); }

    Eigen::MatrixXd reconstruct() const {
        return vectors * values.asDiagonal() * vectors.transpose();
    }
};

enum class SpectrumPolicy {
    general,  // any real symmetric matrix
    psd,      // covariance-like: tiny negatives clamped, large negatives rejected
};

struct JacobiOptions {
    double symmetry_tol = 1e-8;
    double offdiag_tol = 1e-12;  // relative to ||S||_F
    int max_sweeps = 100;
    double psd_clamp_tol = 1e-8;  // relative to the largest eigenvalue
};

namespace detail {

inline double offdiag_norm(const Eigen::MatrixXd& a) {
    double s = 0.0;
    for (Eigen::Index j = 0; j < a.cols(); ++j)
        for (Eigen::Index i = 0; i < a.rows(); ++i)
            if (i != j) s += a(i, j) * a(i, j);
    return std::sqrt(s);
}

}  // namespace detail

// Cyclic Jacobi rotations. O(n^3) per sweep, quadratically convergent; the
// patch dimensions involved (<= 432) keep this cheap and easy to audit.
inline EigenDecomposition symmetric_eigendecomposition(const Eigen::MatrixXd& s,
                                                       SpectrumPolicy policy = SpectrumPolicy::general,
                                                       const JacobiOptions& opt = {}) {
    if (s.rows() != s.cols()) throw DimensionError("eigendecomposition needs a square matrix");
    const Eigen::Index n = s.rows();
    const double scale = std::max(1.0, max_abs(s));
    if (max_abs(s - s.transpose()) > opt.symmetry_tol * scale)
        throw DomainError("eigendecomposition input is not symmetric");

    Eigen::MatrixXd a = 0.5 * (s + s.transpose());
    Eigen::MatrixXd v = Eigen::MatrixXd::Identity(n, n);
    const double target = opt.offdiag_tol * s.norm();

    bool converged = detail::offdiag_norm(a) <= target;
    for (int sweep = 0; sweep < opt.max_sweeps && !converged; ++sweep) {
        for (Eigen::Index p = 0; p + 1 < n; ++p) {
            for (Eigen::Index q = p + 1; q < n; ++q) {
                const double apq = a(p, q);
                if (apq == 0.0) continue;
                const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
                const double t = (theta >= 0.0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double sn = t * c;

                a(p, p) -= t * apq;
                a(q, q) += t * apq;
                a(p, q) = a(q, p) = 0.0;
                for (Eigen::Index k = 0; k < n; ++k) {
                    if (k == p || k == q) continue;
                    const double akp = a(k, p);
                    const double akq = a(k, q);
                    a(k, p) = a(p, k) = c * akp - sn * akq;
                    a(k, q) = a(q, k) = sn * akp + c * akq;
                }
                for (Eigen::Index k = 0; k < n; ++k) {
                    const double vkp = v(k, p);
                    const double vkq = v(k, q);
                    v(k, p) = c * vkp - sn * vkq;
                    v(k, q) = sn * vkp + c * vkq;
                }
            }
        }
        converged = detail::offdiag_norm(a) <= target;
    }
    if (!converged)
        throw NumericalError("Jacobi eigensolver did not converge in " + std::to_string(opt.max_sweeps) +
                             " sweeps");

    std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), Eigen::Index{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](Eigen::Index i, Eigen::Index j) { return a(i, i) > a(j, j); });

    EigenDecomposition out;
    out.values.resize(n);
    out.vectors.resize(n, n);
    for (Eigen::Index k = 0; k < n; ++k) {
        out.values(k) = a(order[static_cast<std::size_t>(k)], order[static_cast<std::size_t>(k)]);
        out.vectors.col(k) = v.col(order[static_cast<std::size_t>(k)]);
    }

    if (policy == SpectrumPolicy::psd && n > 0) {
        const double floor = -opt.psd_clamp_tol * std::max(out.values(0), 0.0);
        for (Eigen::Index k = 0; k < n; ++k) {
            if (out.values(k) < floor)
                throw NumericalError("matrix is not positive semi-definite: eigenvalue " +
                                     std::to_string(out.values(k)));
            out.values(k) = std::max(out.values(k), 0.0);
        }
    }
    return out;
}

}  // namespace patchkernel
