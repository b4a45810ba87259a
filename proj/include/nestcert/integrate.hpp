#pragma once

#include "nestcert/errors.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <vector>

namespace nestcert::sim {

/// dopri5: explicit Dormand-Prince 5(4). rosenbrock2: L-stable linearly implicit
/// two-stage method with a first-order embedded estimate, for stiff autonomous fields.
enum class Method { dopri5, rosenbrock2 };

struct Tolerances {
    double abs = 1e-9;
    double rel = 1e-7;
};

struct IntegratorOptions {
    Method method = Method::dopri5;
    Tolerances tol;
    double h_init = 0.0;  ///< 0 selects automatically
    double h_max = std::numeric_limits<double>::infinity();
    double h_min = 1e-14;
    double fixed_step = 0.0;  ///< > 0 disables error control
    long max_steps = 20'000'000;
};

using Field = std::function<Eigen::VectorXd(double, const Eigen::VectorXd&)>;
using JacobianFn = std::function<Eigen::MatrixXd(double, const Eigen::VectorXd&)>;

/// Accepted steps with derivatives, for Hermite dense output.
struct Trajectory {
    std::vector<double> t;
    std::vector<Eigen::VectorXd> x;
    std::vector<Eigen::VectorXd> dx;
    long rejected = 0;
    long nfev = 0;

    /// Concatenates a later segment; a shared boundary time is kept twice so state jumps survive.
    void append(const Trajectory& o) {
        t.insert(t.end(), o.t.begin(), o.t.end());
        x.insert(x.end(), o.x.begin(), o.x.end());
        dx.insert(dx.end(), o.dx.begin(), o.dx.end());
        rejected += o.rejected;
        nfev += o.nfev;
    }
};

namespace detail {

inline double err_norm(const Eigen::VectorXd& e, const Eigen::VectorXd& y0, const Eigen::VectorXd& y1,
                       const Tolerances& tol) {
    if (e.size() == 0) return 0.0;
    double s = 0.0;
    for (Eigen::Index i = 0; i < e.size(); ++i) {
        const double sc = tol.abs + tol.rel * std::max(std::abs(y0(i)), std::abs(y1(i)));
        const double r = e(i) / sc;
        s += r * r;
    }
    return std::sqrt(s / static_cast<double>(e.size()));
}

inline double initial_step(const Field& f, double t, const Eigen::VectorXd& y, const Eigen::VectorXd& f0, int order,
                           const Tolerances& tol, long& nfev) {
    const double d0 = err_norm(y, y, y, tol), d1 = err_norm(f0, y, y, tol);
    double h0 = (d0 < 1e-5 || d1 < 1e-5) ? 1e-6 : 0.01 * d0 / d1;
    const Eigen::VectorXd f1 = f(t + h0, y + h0 * f0);
    ++nfev;
    const double d2 = err_norm(f1 - f0, y, y, tol) / h0;
    const double m = std::max(d1, d2);
    const double h1 = m <= 1e-15 ? std::max(1e-6, h0 * 1e-3) : std::pow(0.01 / m, 1.0 / (order + 1));
    return std::min(100.0 * h0, h1);
}

inline Eigen::MatrixXd fd_jacobian(const Field& f, double t, const Eigen::VectorXd& y, const Eigen::VectorXd& f0,
                                   long& nfev) {
    const Eigen::Index n = y.size();
    Eigen::MatrixXd J(n, n);
    Eigen::VectorXd yp = y;
    for (Eigen::Index j = 0; j < n; ++j) {
        const double d = 1.4901161193847656e-08 * std::max(1.0, std::abs(y(j)));
        yp(j) = y(j) + d;
        J.col(j) = (f(t, yp) - f0) / d;
        yp(j) = y(j);
        ++nfev;
    }
    return J;
}

}  // namespace detail

/**
 * @brief Integrates dx/dt = f(t, x) from t0 to t1.
 *
 * The rosenbrock2 method treats f as autonomous within a step; jac may be empty,
 * in which case a forward-difference Jacobian is used.
 */
inline Trajectory integrate(const Field& f, const Eigen::VectorXd& x0, double t0, double t1,
                            const IntegratorOptions& opt = {}, const JacobianFn& jac = {}) {
    Trajectory tr;
    Eigen::VectorXd y = x0;
    Eigen::VectorXd fy = f(t0, y);
    tr.nfev = 1;
    tr.t.push_back(t0);
    tr.x.push_back(y);
    tr.dx.push_back(fy);
    if (!(t1 > t0)) return tr;
    if (!y.allFinite() || !fy.allFinite()) throw NumericalError("non-finite initial state or derivative", t0);

    const bool dp = opt.method == Method::dopri5;
    const int order = dp ? 5 : 2;
    double t = t0;
    double h = opt.fixed_step > 0 ? opt.fixed_step
               : opt.h_init > 0  ? opt.h_init
                                 : detail::initial_step(f, t0, y, fy, dp ? 4 : 1, opt.tol, tr.nfev);
    // the explicit estimate resolves the fastest transient; an L-stable step does not need to, and an
    // oversized start is cut back by rejections
    if (!dp && opt.fixed_step <= 0 && opt.h_init <= 0) h = std::max(h, 1e-6 * (t1 - t0));
    h = std::min(h, opt.h_max);

    // Dormand-Prince tableau
    static constexpr double c2 = 1.0 / 5, c3 = 3.0 / 10, c4 = 4.0 / 5, c5 = 8.0 / 9;
    static constexpr double a21 = 1.0 / 5;
    static constexpr double a31 = 3.0 / 40, a32 = 9.0 / 40;
    static constexpr double a41 = 44.0 / 45, a42 = -56.0 / 15, a43 = 32.0 / 9;
    static constexpr double a51 = 19372.0 / 6561, a52 = -25360.0 / 2187, a53 = 64448.0 / 6561, a54 = -212.0 / 729;
    static constexpr double a61 = 9017.0 / 3168, a62 = -355.0 / 33, a63 = 46732.0 / 5247, a64 = 49.0 / 176,
                            a65 = -5103.0 / 18656;
    static constexpr double b1 = 35.0 / 384, b3 = 500.0 / 1113, b4 = 125.0 / 192, b5 = -2187.0 / 6784, b6 = 11.0 / 84;
    static constexpr double e1 = 71.0 / 57600, e3 = -71.0 / 16695, e4 = 71.0 / 1920, e5 = -17253.0 / 339200,
                            e6 = 22.0 / 525, e7 = -1.0 / 40;
    // Rosenbrock parameter
    static const double gam = 1.0 + 1.0 / std::sqrt(2.0);

    long steps = 0;
    double err_prev = 1.0;
    while (t < t1) {
        if (++steps > opt.max_steps) throw NumericalError("step budget exhausted", t);
        bool last = false;
        if (t + h >= t1 || (t1 - (t + h)) < 1e-12 * std::abs(t1)) {
            h = t1 - t;
            last = true;
        }
        if (!last && t + h == t) throw NumericalError("step size below the time resolution", t);
        Eigen::VectorXd ynew, fnew, err;
        if (dp) {
            const Eigen::VectorXd& k1 = fy;
            const Eigen::VectorXd k2 = f(t + c2 * h, y + h * a21 * k1);
            const Eigen::VectorXd k3 = f(t + c3 * h, y + h * (a31 * k1 + a32 * k2));
            const Eigen::VectorXd k4 = f(t + c4 * h, y + h * (a41 * k1 + a42 * k2 + a43 * k3));
            const Eigen::VectorXd k5 = f(t + c5 * h, y + h * (a51 * k1 + a52 * k2 + a53 * k3 + a54 * k4));
            const Eigen::VectorXd k6 = f(t + h, y + h * (a61 * k1 + a62 * k2 + a63 * k3 + a64 * k4 + a65 * k5));
            ynew = y + h * (b1 * k1 + b3 * k3 + b4 * k4 + b5 * k5 + b6 * k6);
            fnew = f(t + h, ynew);
            tr.nfev += 6;
            err = h * (e1 * k1 + e3 * k3 + e4 * k4 + e5 * k5 + e6 * k6 + e7 * fnew);
        } else {
            Eigen::MatrixXd J = jac ? jac(t, y) : detail::fd_jacobian(f, t, y, fy, tr.nfev);
            Eigen::MatrixXd W = Eigen::MatrixXd::Identity(y.size(), y.size()) - gam * h * J;
            // row equilibration keeps the factorization accurate for widely spread gains
            Eigen::VectorXd rs = W.cwiseAbs().rowwise().maxCoeff();
            for (Eigen::Index i = 0; i < rs.size(); ++i) rs(i) = rs(i) > 0 ? 1.0 / rs(i) : 1.0;
            W = rs.asDiagonal() * W;
            Eigen::PartialPivLU<Eigen::MatrixXd> lu(W);
            const Eigen::VectorXd k1 = lu.solve(rs.asDiagonal() * fy);
            const Eigen::VectorXd f2 = f(t + h, y + h * k1);
            const Eigen::VectorXd k2 = lu.solve(rs.asDiagonal() * (f2 - 2.0 * k1));
            ynew = y + h * (1.5 * k1 + 0.5 * k2);
            fnew = f(t + h, ynew);
            tr.nfev += 2;
            // filtered estimate (I - gam h J)^{-1} e: stiff components decay in one step and should not
            // throttle the step size
            err = lu.solve(rs.asDiagonal() * (0.5 * h * (k1 + k2)));
        }

        const bool finite = ynew.allFinite() && fnew.allFinite();
        if (opt.fixed_step > 0) {
            if (!finite) throw NumericalError("non-finite state", t);
            t = last ? t1 : t + h;
            y = ynew;
            fy = fnew;
            tr.t.push_back(t);
            tr.x.push_back(y);
            tr.dx.push_back(fy);
            continue;
        }
        const double en = finite ? detail::err_norm(err, y, ynew, opt.tol) : std::numeric_limits<double>::infinity();
        if (en <= 1.0) {
            t = last ? t1 : t + h;
            y = ynew;
            fy = fnew;
            tr.t.push_back(t);
            tr.x.push_back(y);
            tr.dx.push_back(fy);
            // PI controller on accepted steps
            const double a = 0.7 / order, b = 0.4 / order;
            double fac = 0.9 * std::pow(std::max(en, 1e-10), -a) * std::pow(std::max(err_prev, 1e-4), b);
            fac = std::clamp(fac, 0.2, 5.0);
            err_prev = en;
            h = std::min(h * fac, opt.h_max);
        } else {
            ++tr.rejected;
            const double fac = std::isfinite(en) ? std::clamp(0.9 * std::pow(en, -1.0 / order), 0.1, 0.9) : 0.1;
            h *= fac;
            if (h < opt.h_min) {
                throw NumericalError(finite ? "step size underflow; the field may be too stiff for this method"
                                            : "non-finite state; trajectory diverged",
                                     t);
            }
        }
    }
    return tr;
}

/// Cubic Hermite interpolation between accepted steps.
inline Eigen::VectorXd interpolate(const Trajectory& tr, double t) {
    if (tr.t.empty()) return {};
    if (t <= tr.t.front()) return tr.x.front();
    if (t >= tr.t.back()) return tr.x.back();
    const auto it = std::upper_bound(tr.t.begin(), tr.t.end(), t);
    const std::size_t i = static_cast<std::size_t>(it - tr.t.begin()) - 1;
    const double h = tr.t[i + 1] - tr.t[i];
    if (h <= 0) return tr.x[i + 1];
    const double s = (t - tr.t[i]) / h;
    const double h00 = (1 + 2 * s) * (1 - s) * (1 - s), h10 = s * (1 - s) * (1 - s);
    const double h01 = s * s * (3 - 2 * s), h11 = s * s * (s - 1);
    return h00 * tr.x[i] + h10 * h * tr.dx[i] + h01 * tr.x[i + 1] + h11 * h * tr.dx[i + 1];
}

}  // namespace nestcert::sim
