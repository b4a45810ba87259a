#pragma once

#include "nestcert/certkit.hpp"
#include "nestcert/io.hpp"
#include "nestcert/parallel.hpp"

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

/// Three-scale academic example with a cubic slow scale and an unstable origin.
namespace nestcert::toy {

using State = Eigen::Vector4d;  ///< (x1, x2, x3a, x3b)

inline void require_params(double kappa, double k) {
    if (!(kappa > 0) || !(k > 0)) throw NotApplicable("toy system needs kappa > 0 and k > 0");
}

inline State field(const State& x, double kappa, double k) {
    State f;
    f(0) = -0.25 * x(0) * x(0) * x(0) - 2.0 * x(1);
    f(1) = x(0) + 3.0 * x(1) + x(2) - 4.0 * x(3);
    f(2) = -(kappa * x(2) + 4.0 * (1.0 - kappa) * x(3)) - kappa * ((1.0 + k) * x(0) + (2.0 * k + 3.0) * x(1));
    f(3) = -x(3);
    return f;
}

/// eps_i dx_i/dt = f_i
inline State scaled_field(const State& x, double kappa, double k, const std::array<double, 3>& eps) {
    State f = field(x, kappa, k);
    f(0) /= eps[0];
    f(1) /= eps[1];
    f.tail<2>() /= eps[2];
    return f;
}

inline double phi2(double x1) { return -0.5 * x1; }

inline Eigen::Vector2d phi3(double x1, double x2, double k) {
    return {-((1.0 + k) * x1 + (2.0 * k + 3.0) * x2), 0.0};
}

inline double f1_reduced(double x1) { return -x1 * (0.25 * x1 * x1 - 1.0); }

inline double f2_reduced(double x1, double x2, double k) { return -k * (x1 + 2.0 * x2); }

inline Eigen::Matrix4d jacobian(const State& x, double kappa, double k) {
    Eigen::Matrix4d J;
    J << -0.75 * x(0) * x(0), -2.0, 0.0, 0.0,  //
        1.0, 3.0, 1.0, -4.0,                   //
        -kappa * (1.0 + k), -kappa * (2.0 * k + 3.0), -kappa, -4.0 * (1.0 - kappa),  //
        0.0, 0.0, 0.0, -1.0;
    return J;
}

inline certkit::NestedConstants constants(double kappa, double k) {
    require_params(kappa, k);
    certkit::NestedConstants c;
    c.N = 3;
    c.alpha = {1.0, 1.0, 1.0};
    c.alpha_prime = {0.0, 0.0, 1.0};
    c.beta_fwd = {2.0, 1.0 / (2.0 * k)};
    c.b = {{2, 1, 1, 1.0 / (4.0 * k)},
           {2, 2, 1, -1.0 / (2.0 * k)},
           {3, 1, 1, (k + 1.0) / kappa},
           {3, 2, 1, 2.0 * (1.0 + k) / kappa},
           {3, 2, 2, 2.0 * k * (2.0 * k + 3.0) / kappa},
           {3, 3, 2, (2.0 * k + 3.0) / kappa}};
    return c;
}

inline double c2_closed_form(double k) {
    return (8.0 * k + 5.0 - std::sqrt(64.0 * k * k + 48.0 * k + 25.0)) / (16.0 * k);
}

/// Margin-recursion boundary in closed form: certified for kappa above this.
inline double kappa_condition2_closed_form(double k) {
    const double s = 2.0 * k * k + 4.0 * k + 1.0;
    return 3.0 + 2.0 * k + ((1.0 + k) * (1.0 + k) + 16.0 * s * s) / (16.0 * k * s * c2_closed_form(k));
}

/// Positive-definiteness boundary, derived from the Schur complement of M_2.
inline double kappa_condition1_closed_form(double k) {
    const double s = 2.0 * k * k + 4.0 * k + 1.0;
    return 8.0 + 4.0 * k + (2.0 * k * k * k + 21.0 * k * k + 36.0 * k + 9.0) / (4.0 * k * s);
}

/// Variant closed form with 21k in place of 21k^2. Agrees with the boundary only at k = 1.
inline double kappa_condition1_linear_variant(double k) {
    const double s = 2.0 * k * k + 4.0 * k + 1.0;
    return 8.0 + 4.0 * k + (2.0 * k * k * k + 21.0 * k + 36.0 * k + 9.0) / (4.0 * k * s);
}

inline const std::array<State, 2>& stable_equilibria() {
    static const std::array<State, 2> pts = {State(2.0, -1.0, 1.0, 0.0), State(-2.0, 1.0, -1.0, 0.0)};
    return pts;
}

inline double distance_to_stable(const State& x) {
    return std::min((x - stable_equilibria()[0]).norm(), (x - stable_equilibria()[1]).norm());
}

/// Distance to the full slow-manifold equilibrium set, origin included.
inline double distance_to_equilibria(const State& x) { return std::min(distance_to_stable(x), x.norm()); }

enum class Label { P3, P4, P5, P6 };

inline std::string to_string(Label l) {
    switch (l) {
        case Label::P3: return "P3";
        case Label::P4: return "P4-only";
        case Label::P5: return "P5-unknown";
        case Label::P6: return "P6-unstable";
    }
    return "?";
}

/// Spectral abscissa of the Jacobian at the stable-candidate equilibrium (2, -1, (1, 0)).
inline double equilibrium_abscissa(double kappa, double k) {
    const double x1 = 2.0, x2 = phi2(x1);
    const Eigen::Vector2d x3 = phi3(x1, x2, k);
    return linalg::max_real_eigenvalue(jacobian(State(x1, x2, x3(0), x3(1)), kappa, k));
}

struct Classification {
    Label label = Label::P5;
    double slack_c1 = 0.0;  ///< smallest Condition 1 slack
    double slack_c2 = 0.0;  ///< smallest margin-recursion slack reached
};

inline Classification classify(double kappa, double k) {
    const auto c = constants(kappa, k);
    const auto r1 = certkit::check_condition1(c);
    const auto r2 = certkit::check_condition2(c);
    Classification out;
    out.slack_c1 = *std::min_element(r1.slack.begin(), r1.slack.end());
    out.slack_c2 = *std::min_element(r2.slack.begin(), r2.slack.end());
    if (r2.pass)
        out.label = Label::P3;
    else if (r1.pass)
        out.label = Label::P4;
    else if (equilibrium_abscissa(kappa, k) > 1e-9)
        out.label = Label::P6;
    else
        out.label = Label::P5;
    return out;
}

struct Lyapunov {
    double nu = 0.0;
    Eigen::Vector3d V = Eigen::Vector3d::Zero();
    Eigen::Vector3d psi = Eigen::Vector3d::Zero();
    double psi3p = 0.0;
    double dnu = 0.0;    ///< exact time derivative along the full field
    double bound = 0.0;  ///< -psi' M psi - mu_3 alpha'_3 psi3p^2
};

inline Lyapunov lyapunov(const State& x, double kappa, double k) {
    const auto c = constants(kappa, k);
    const Eigen::VectorXd mu = certkit::compute_mu(c);
    const Eigen::MatrixXd M = certkit::build_M(c, mu);
    Eigen::Matrix2d P3;
    P3 << 1.0 / kappa, -4.0 / kappa, -4.0 / kappa, 16.0 / kappa + 1.0;

    const double x1 = x(0);
    const double w = 0.25 * x1 * x1 - 1.0;
    const double y2 = x(1) - phi2(x1);
    const Eigen::Vector2d y3 = x.tail<2>() - phi3(x1, x(1), k);

    Lyapunov L;
    L.V << w * w, y2 * y2 / (4.0 * k), 0.5 * y3.dot(P3 * y3);
    L.nu = L.V(0) + mu(1) * L.V(1) + mu(2) * L.V(2);
    L.psi << std::abs(x1 * w), std::abs(y2), std::abs(y3(0) - 4.0 * y3(1));
    L.psi3p = std::abs(y3(1));

    const State f = field(x, kappa, k);
    const double dy2 = f(1) + 0.5 * f(0);
    const Eigen::Vector2d dy3 = f.tail<2>() + Eigen::Vector2d((1.0 + k) * f(0) + (2.0 * k + 3.0) * f(1), 0.0);
    L.dnu = x1 * w * f(0) + mu(1) * y2 * dy2 / (2.0 * k) + mu(2) * y3.dot(P3 * dy3);
    L.bound = -L.psi.dot(M * L.psi) - mu(2) * c.alpha_prime[2] * L.psi3p * L.psi3p;
    return L;
}

/// Smallest kappa at which pred switches to true; pred must be monotone in kappa.
inline double kappa_boundary(const std::function<bool(double)>& pred, double rel_tol = 1e-13) {
    double hi = 1.0;
    for (int n = 0; !pred(hi); ++n) {
        if (n > 200) throw NumericalError("no certified kappa found");
        hi *= 2.0;
    }
    double lo = 0.5 * hi;
    for (int n = 0; pred(lo); ++n) {
        if (n > 200) throw NumericalError("no uncertified kappa found");
        hi = lo;
        lo *= 0.5;
    }
    while (hi - lo > rel_tol * hi) {
        const double mid = 0.5 * (lo + hi);
        (pred(mid) ? hi : lo) = mid;
    }
    return hi;
}

inline double kappa_boundary_condition1(double k) {
    return kappa_boundary([k](double kap) { return certkit::check_condition1(constants(kap, k)).pass; });
}

inline double kappa_boundary_condition2(double k) {
    return kappa_boundary([k](double kap) { return certkit::check_condition2(constants(kap, k)).pass; });
}

struct SweepPoint {
    double kappa = 0.0, k = 0.0;
    Classification cls;
};

struct Range {
    double lo = 0.0, hi = 0.0;
};

inline std::vector<double> grid_points(Range r, int n) {
    if (!(r.lo > 0) || !(r.hi >= r.lo) || n < 1) throw InputError("invalid sweep range");
    std::vector<double> v(n);
    for (int i = 0; i < n; ++i) v[i] = n == 1 ? r.lo : r.lo + (r.hi - r.lo) * i / (n - 1);
    return v;
}

inline std::vector<SweepPoint> sweep_regions(Range kappa, Range k, int width, int height, unsigned threads = 0) {
    const auto ks = grid_points(kappa, width), kk = grid_points(k, height);
    std::vector<SweepPoint> pts(ks.size() * kk.size());
    parallel_for(
        pts.size(),
        [&](std::size_t idx) {
            auto& p = pts[idx];
            p.kappa = ks[idx % ks.size()];
            p.k = kk[idx / ks.size()];
            p.cls = classify(p.kappa, p.k);
        },
        threads);
    return pts;
}

inline std::string sweep_csv(const std::vector<SweepPoint>& pts) {
    std::ostringstream os;
    os << "kappa,k,label,slack_c1,slack_c2\n";
    for (const auto& p : pts)
        os << io::num(p.kappa) << ',' << io::num(p.k) << ',' << to_string(p.cls.label) << ','
           << io::num(p.cls.slack_c1) << ',' << io::num(p.cls.slack_c2) << '\n';
    return os.str();
}

inline std::string boundary_csv(Range k, int n, unsigned threads = 0) {
    const auto kk = grid_points(k, n);
    std::vector<std::array<double, 2>> b(kk.size());
    parallel_for(
        kk.size(), [&](std::size_t i) { b[i] = {kappa_boundary_condition1(kk[i]), kappa_boundary_condition2(kk[i])}; },
        threads);
    std::ostringstream os;
    os << "k,kappa_c1,kappa_c2\n";
    for (std::size_t i = 0; i < kk.size(); ++i)
        os << io::num(kk[i]) << ',' << io::num(b[i][0]) << ',' << io::num(b[i][1]) << '\n';
    return os.str();
}

}  // namespace nestcert::toy
