#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>

namespace nestcert::linalg {

inline Eigen::Matrix2d rot(double a) {
    Eigen::Matrix2d r;
    r << std::cos(a), -std::sin(a), std::sin(a), std::cos(a);
    return r;
}

inline Eigen::Matrix2d J2() {
    Eigen::Matrix2d j;
    j << 0.0, -1.0, 1.0, 0.0;
    return j;
}

/// A (x) I_2
inline Eigen::MatrixXd kron_i2(const Eigen::MatrixXd& a) {
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(2 * a.rows(), 2 * a.cols());
    for (Eigen::Index i = 0; i < a.rows(); ++i)
        for (Eigen::Index j = 0; j < a.cols(); ++j) {
            out(2 * i, 2 * j) = a(i, j);
            out(2 * i + 1, 2 * j + 1) = a(i, j);
        }
    return out;
}

/// I_n (x) b for a 2x2 block b
inline Eigen::MatrixXd blkdiag2(Eigen::Index n, const Eigen::Matrix2d& b) {
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(2 * n, 2 * n);
    for (Eigen::Index i = 0; i < n; ++i) out.block<2, 2>(2 * i, 2 * i) = b;
    return out;
}

inline double spectral_norm(const Eigen::MatrixXd& a) {
    if (a.size() == 0) return 0.0;
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(a);
    return svd.singularValues()(0);
}

/**
 * @brief Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, ascending.
 *
 * Sweeps stop once the off-diagonal Frobenius mass drops below rel_tol times the
 * Frobenius norm of the input.
 */
inline Eigen::VectorXd jacobi_eigenvalues(Eigen::MatrixXd a, double rel_tol = 1e-14, int max_sweeps = 100) {
    const Eigen::Index n = a.rows();
    const double fro = a.norm();
    for (int sweep = 0; sweep < max_sweeps; ++sweep) {
        double off = 0.0;
        for (Eigen::Index p = 0; p < n; ++p)
            for (Eigen::Index q = p + 1; q < n; ++q) off += a(p, q) * a(p, q);
        if (std::sqrt(2.0 * off) <= rel_tol * fro) break;
        for (Eigen::Index p = 0; p < n; ++p) {
            for (Eigen::Index q = p + 1; q < n; ++q) {
                const double apq = a(p, q);
                if (apq == 0.0) continue;
                const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
                const double t = (theta >= 0.0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (Eigen::Index k = 0; k < n; ++k) {
                    const double akp = a(k, p), akq = a(k, q);
                    a(k, p) = c * akp - s * akq;
                    a(k, q) = s * akp + c * akq;
                }
                for (Eigen::Index k = 0; k < n; ++k) {
                    const double apk = a(p, k), aqk = a(q, k);
                    a(p, k) = c * apk - s * aqk;
                    a(q, k) = s * apk + c * aqk;
                }
            }
        }
    }
    Eigen::VectorXd ev = a.diagonal();
    std::sort(ev.data(), ev.data() + ev.size());
    return ev;
}

/// Parlett-Reinsch diagonal balancing (radix 2), in place.
inline void balance(Eigen::MatrixXd& a) {
    constexpr double radix = 2.0, sqrdx = radix * radix;
    const Eigen::Index n = a.rows();
    bool done = false;
    while (!done) {
        done = true;
        for (Eigen::Index i = 0; i < n; ++i) {
            double r = 0.0, c = 0.0;
            for (Eigen::Index j = 0; j < n; ++j)
                if (j != i) {
                    c += std::abs(a(j, i));
                    r += std::abs(a(i, j));
                }
            if (c == 0.0 || r == 0.0) continue;
            double g = r / radix, f = 1.0;
            const double s = c + r;
            while (c < g) {
                f *= radix;
                c *= sqrdx;
            }
            g = r * radix;
            while (c > g) {
                f /= radix;
                c /= sqrdx;
            }
            if ((c + r) / f < 0.95 * s) {
                done = false;
                a.row(i) /= f;
                a.col(i) *= f;
            }
        }
    }
}

inline Eigen::VectorXcd eigenvalues_balanced(Eigen::MatrixXd a) {
    if (a.size() == 0) return {};
    balance(a);
    Eigen::EigenSolver<Eigen::MatrixXd> es(a, false);
    return es.eigenvalues();
}

inline double max_real_eigenvalue(const Eigen::MatrixXd& a) {
    const Eigen::VectorXcd ev = eigenvalues_balanced(a);
    double m = -std::numeric_limits<double>::infinity();
    for (Eigen::Index i = 0; i < ev.size(); ++i) m = std::max(m, ev(i).real());
    return m;
}

}  // namespace nestcert::linalg
