#pragma once

#include "nestcert/certkit.hpp"
#include "nestcert/errors.hpp"
#include "nestcert/linalg.hpp"

#include <Eigen/Dense>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

namespace nlohmann {
template <>
struct adl_serializer<Eigen::VectorXd> {
    static void to_json(json& j, const Eigen::VectorXd& v) { j = std::vector<double>(v.data(), v.data() + v.size()); }
    static void from_json(const json& j, Eigen::VectorXd& v) {
        const auto s = j.get<std::vector<double>>();
        v = Eigen::Map<const Eigen::VectorXd>(s.data(), static_cast<Eigen::Index>(s.size()));
    }
};
}  // namespace nlohmann

/// Grid-forming converters (dVOC reference, cascaded PI loops) on an inductive-resistive network.
namespace nestcert::powernet {

using Eigen::MatrixXd;
using Eigen::VectorXd;

struct Line {
    int from = 0, to = 0;  ///< 0-based node indices
    double r = 0.0, l = 0.0;
};

struct Converter {
    double r_f = 0.0, l_f = 0.0, c_f = 0.0, g_f = 0.0;
};

struct Gains {
    double eta = 0.0, eta_a = 0.0;
    std::optional<double> c_L;
    VectorXd K_pv, K_iv, K_pf, K_if;
};

struct Setpoints {
    VectorXd p, q, v;
};

struct PowerSystemSpec {
    int nodes = 0;
    std::vector<Line> lines;
    std::vector<Converter> converters;
    std::optional<Gains> gains;
    Setpoints setpoints;
    double omega0 = 2.0 * std::numbers::pi * 60.0;
};

// ---------------------------------------------------------------- JSON

namespace detail {

inline VectorXd per_node(const nlohmann::json& j, int n, const char* name) {
    if (j.is_number()) return VectorXd::Constant(n, j.get<double>());
    auto v = j.get<VectorXd>();
    if (v.size() != n) throw InputError(std::string(name) + " must have one entry per node");
    return v;
}

inline void require_finite(const VectorXd& v, const char* name) {
    if (!v.allFinite()) throw InputError(std::string(name) + " is not finite");
}

}  // namespace detail

inline void to_json(nlohmann::json& j, const Gains& g) {
    j = {{"eta", g.eta}, {"eta_a", g.eta_a}, {"K_pv", g.K_pv}, {"K_iv", g.K_iv}, {"K_pf", g.K_pf}, {"K_if", g.K_if}};
    if (g.c_L) j["c_L"] = *g.c_L;
}

inline Gains gains_from_json(const nlohmann::json& j, int n) {
    Gains g;
    g.eta = j.at("eta").get<double>();
    g.eta_a = j.at("eta_a").get<double>();
    if (j.contains("c_L") && !j.at("c_L").is_null()) g.c_L = j.at("c_L").get<double>();
    g.K_pv = detail::per_node(j.at("K_pv"), n, "K_pv");
    g.K_iv = detail::per_node(j.at("K_iv"), n, "K_iv");
    g.K_pf = detail::per_node(j.at("K_pf"), n, "K_pf");
    g.K_if = detail::per_node(j.at("K_if"), n, "K_if");
    for (const VectorXd* v : {&g.K_pv, &g.K_iv, &g.K_pf, &g.K_if})
        if (!v->allFinite() || (v->array() <= 0).any()) throw InputError("controller gains must be positive");
    if (!(g.eta >= 0) || !(g.eta_a >= 0)) throw InputError("eta and eta_a must be non-negative");
    return g;
}

inline void to_json(nlohmann::json& j, const PowerSystemSpec& s) {
    nlohmann::json edges = nlohmann::json::array();
    for (const auto& l : s.lines) edges.push_back({l.from + 1, l.to + 1, l.r, l.l});
    nlohmann::json conv = nlohmann::json::array();
    for (const auto& c : s.converters) conv.push_back({{"r_f", c.r_f}, {"l_f", c.l_f}, {"c_f", c.c_f}, {"g_f", c.g_f}});
    j = {{"omega0", s.omega0},
         {"graph", {{"nodes", s.nodes}, {"edges", edges}}},
         {"converters", conv},
         {"setpoints", {{"p", s.setpoints.p}, {"q", s.setpoints.q}, {"v", s.setpoints.v}}}};
    if (s.gains) j["gains"] = *s.gains;
}

inline PowerSystemSpec spec_from_json(const nlohmann::json& j) {
    PowerSystemSpec s;
    try {
        if (j.contains("omega0")) s.omega0 = j.at("omega0").get<double>();
        const auto& g = j.at("graph");
        s.nodes = g.at("nodes").get<int>();
        if (s.nodes < 1) throw InputError("graph needs at least one node");
        for (const auto& e : g.at("edges")) {
            if (!e.is_array() || e.size() != 4) throw InputError("edge must be [from, to, r_t, l_t]");
            Line l{e[0].get<int>() - 1, e[1].get<int>() - 1, e[2].get<double>(), e[3].get<double>()};
            if (l.from < 0 || l.to < 0 || l.from >= s.nodes || l.to >= s.nodes) throw InputError("edge node out of range");
            if (l.from == l.to) throw InputError("self-loop edge");
            if (!(l.r > 0) || !(l.l > 0)) throw InputError("line resistance and inductance must be positive");
            s.lines.push_back(l);
        }
        const auto& cj = j.at("converters");
        auto conv = [](const nlohmann::json& c) {
            Converter v{c.at("r_f").get<double>(), c.at("l_f").get<double>(), c.at("c_f").get<double>(),
                        c.value("g_f", 0.0)};
            if (!(v.r_f >= 0) || !(v.l_f > 0) || !(v.c_f > 0) || !(v.g_f >= 0))
                throw InputError("filter parameters must be positive");
            return v;
        };
        if (cj.is_object())
            s.converters.assign(s.nodes, conv(cj));
        else
            for (const auto& c : cj) s.converters.push_back(conv(c));
        if (static_cast<int>(s.converters.size()) != s.nodes) throw InputError("one converter per node required");
        const auto& sp = j.at("setpoints");
        s.setpoints.v = detail::per_node(sp.at("v"), s.nodes, "setpoints.v");
        s.setpoints.p = sp.contains("p") ? detail::per_node(sp.at("p"), s.nodes, "setpoints.p") : VectorXd::Zero(s.nodes);
        s.setpoints.q = sp.contains("q") ? detail::per_node(sp.at("q"), s.nodes, "setpoints.q") : VectorXd::Zero(s.nodes);
        detail::require_finite(s.setpoints.p, "setpoints.p");
        detail::require_finite(s.setpoints.q, "setpoints.q");
        if (!s.setpoints.v.allFinite() || (s.setpoints.v.array() <= 0).any())
            throw InputError("voltage setpoints must be positive");
        if (j.contains("gains") && !j.at("gains").is_null()) s.gains = gains_from_json(j.at("gains"), s.nodes);
    } catch (const nlohmann::json::exception& e) {
        throw InputError(std::string("power system spec: ") + e.what());
    }
    if (!(s.omega0 > 0)) throw InputError("omega0 must be positive");
    return s;
}

// ---------------------------------------------------------------- network

struct Network {
    int Nc = 0, Nt = 0;
    double omega0 = 0.0, rho = 0.0, kappa = 0.0;
    VectorXd r, l, g, b, y_mag;  ///< per line: resistance, inductance, conductance, susceptance, |Y|
    MatrixXd B, Bn;              ///< scalar incidence (Nc x Nt) and cycle basis (Nt x Nt-Nc+1)
    MatrixXd BB, BBn;            ///< the same, Kronecker-expanded with I_2
    MatrixXd RT, LT, ZT, ZT_inv, Ynet, Lrot, Pt;
    MatrixXd Lap;  ///< scalar Laplacian weighted by |Y|
    double lambda2 = 0.0, lambda_max = 0.0, d_max = 0.0;
    double norm_Ynet = 0.0, norm_Lrot = 0.0, norm_BRB = 0.0, norm_BLB = 0.0;
};

namespace detail {

inline MatrixXd weighted_laplacian(int Nc, const std::vector<Line>& lines, const VectorXd& w) {
    MatrixXd L = MatrixXd::Zero(Nc, Nc);
    for (std::size_t e = 0; e < lines.size(); ++e) {
        const int a = lines[e].from, c = lines[e].to;
        L(a, a) += w(e);
        L(c, c) += w(e);
        L(a, c) -= w(e);
        L(c, a) -= w(e);
    }
    return L;
}

inline double sym_max_eig(const MatrixXd& a) {
    if (a.size() == 0) return 0.0;
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(a, Eigen::EigenvaluesOnly);
    return es.eigenvalues().maxCoeff();
}

}  // namespace detail

inline Network build_network(const PowerSystemSpec& s) {
    Network n;
    n.Nc = s.nodes;
    n.Nt = static_cast<int>(s.lines.size());
    n.omega0 = s.omega0;

    // connectivity
    std::vector<int> parent(n.Nc);
    for (int i = 0; i < n.Nc; ++i) parent[i] = i;
    auto find = [&](int a) {
        while (parent[a] != a) a = parent[a] = parent[parent[a]];
        return a;
    };
    for (const auto& l : s.lines) parent[find(l.from)] = find(l.to);
    for (int i = 1; i < n.Nc; ++i)
        if (find(i) != find(0)) throw InputError("network graph is disconnected");

    n.r.resize(n.Nt);
    n.l.resize(n.Nt);
    for (int e = 0; e < n.Nt; ++e) {
        n.r(e) = s.lines[e].r;
        n.l(e) = s.lines[e].l;
    }
    if (n.Nt > 0) {
        n.rho = n.l(0) / n.r(0);
        for (int e = 1; e < n.Nt; ++e)
            if (std::abs(n.l(e) / n.r(e) - n.rho) > 1e-9 * n.rho)
                throw InputError("line ratio l_t / r_t must be uniform across lines");
        n.kappa = std::atan(n.omega0 * n.rho);
    }
    const VectorXd z2 = n.r.array().square() + (n.omega0 * n.l.array()).square();
    n.g = n.r.array() / z2.array();
    n.b = n.omega0 * n.l.array() / z2.array();
    n.y_mag = z2.array().sqrt().inverse();

    n.B = MatrixXd::Zero(n.Nc, n.Nt);
    for (int e = 0; e < n.Nt; ++e) {
        n.B(s.lines[e].from, e) = 1.0;
        n.B(s.lines[e].to, e) = -1.0;
    }
    const int cycles = n.Nt - n.Nc + 1;
    n.Bn = MatrixXd::Zero(n.Nt, cycles);
    if (cycles > 0) {
        Eigen::JacobiSVD<MatrixXd> svd(n.B, Eigen::ComputeFullV);
        n.Bn = svd.matrixV().rightCols(cycles);
    }
    n.BB = linalg::kron_i2(n.B);
    n.BBn = linalg::kron_i2(n.Bn);

    const Eigen::Matrix2d J = linalg::J2();
    n.RT = linalg::kron_i2(n.r.asDiagonal().toDenseMatrix());
    n.LT = linalg::kron_i2(n.l.asDiagonal().toDenseMatrix());
    n.ZT = n.RT + n.omega0 * linalg::blkdiag2(n.Nt, J) * n.LT;
    n.ZT_inv = n.Nt > 0 ? MatrixXd(n.ZT.inverse()) : MatrixXd(0, 0);
    n.Ynet = n.BB * n.ZT_inv * n.BB.transpose();
    n.Lrot = linalg::blkdiag2(n.Nc, linalg::rot(n.kappa)) * n.Ynet;
    n.Pt = n.rho * (n.BB.transpose() * n.BB + n.LT * n.BBn * n.BBn.transpose() * n.LT);

    n.Lap = detail::weighted_laplacian(n.Nc, s.lines, n.y_mag);
    if (n.Nc >= 2) {
        Eigen::SelfAdjointEigenSolver<MatrixXd> es(n.Lap, Eigen::EigenvaluesOnly);
        n.lambda2 = es.eigenvalues()(1);
        n.lambda_max = es.eigenvalues()(n.Nc - 1);
    }
    n.d_max = n.Nc > 0 ? n.Lap.diagonal().maxCoeff() : 0.0;
    n.norm_Ynet = linalg::spectral_norm(n.Ynet);
    n.norm_Lrot = linalg::spectral_norm(n.Lrot);
    n.norm_BRB = detail::sym_max_eig(detail::weighted_laplacian(n.Nc, s.lines, n.r.cwiseInverse()));
    n.norm_BLB = detail::sym_max_eig(detail::weighted_laplacian(n.Nc, s.lines, n.l.cwiseInverse()));
    return n;
}

// ---------------------------------------------------------------- closed loop

/// Per-converter commissioning stage; ordering matters.
enum class Stage { off, current, voltage, full };

inline Stage stage_from_string(const std::string& s) {
    if (s == "off") return Stage::off;
    if (s == "current-only") return Stage::current;
    if (s == "+reference+voltage") return Stage::voltage;
    if (s == "+feedforward") return Stage::full;
    throw InputError("unknown converter stage '" + s + "'");
}

/// x = (vhat, i_t, v, zeta_v, i_f, zeta_f), each a stack of 2-vectors.
struct Layout {
    int Nc = 0, Nt = 0;
    int vhat() const { return 0; }
    int it() const { return 2 * Nc; }
    int v() const { return 2 * Nc + 2 * Nt; }
    int zv() const { return v() + 2 * Nc; }
    int i_f() const { return zv() + 2 * Nc; }
    int zf() const { return i_f() + 2 * Nc; }
    int size() const { return zf() + 2 * Nc; }
};

struct Model {
    PowerSystemSpec spec;
    Network net;
    Gains gains;
    Setpoints sp;  ///< setpoints the reference controllers use
    VectorXd load;  ///< resistive shunt conductance per node
    std::vector<Stage> stage;
    Layout lay;
    MatrixXd A;  ///< Jacobian at the origin; field = A x + cubic dVOC term
};

inline Model make_model(const PowerSystemSpec& spec, const Network& net, const Gains& gains, const Setpoints& sp) {
    Model m;
    m.spec = spec;
    m.net = net;
    m.gains = gains;
    m.sp = sp;
    m.load = VectorXd::Zero(net.Nc);
    m.stage.assign(net.Nc, Stage::full);
    m.lay = {net.Nc, net.Nt};
    return m;
}

inline Eigen::Matrix2d dvoc_K(const Model& m, int k) {
    Eigen::Matrix2d pq;
    pq << m.sp.p(k), m.sp.q(k), -m.sp.q(k), m.sp.p(k);
    return linalg::rot(m.net.kappa) * pq / (m.sp.v(k) * m.sp.v(k));
}

/// Converter output current i_o = B i_t + G_load v.
inline VectorXd output_current(const Model& m, const VectorXd& x) {
    VectorXd io = m.net.BB * x.segment(m.lay.it(), 2 * m.lay.Nt);
    for (int k = 0; k < m.lay.Nc; ++k) io.segment<2>(2 * k) += m.load(k) * x.segment<2>(m.lay.v() + 2 * k);
    return io;
}

inline double phi_mag(const Model& m, const VectorXd& vhat, int k) {
    return 1.0 - vhat.segment<2>(2 * k).squaredNorm() / (m.sp.v(k) * m.sp.v(k));
}

/// dVOC reference dynamics; cubic=false drops the -|vhat|^2 vhat part of Phi(vhat) vhat.
inline VectorXd dvoc_field(const Model& m, const VectorXd& vhat, const VectorXd& io, bool cubic = true) {
    VectorXd out = VectorXd::Zero(vhat.size());
    const Eigen::Matrix2d R = linalg::rot(m.net.kappa);
    for (int k = 0; k < m.lay.Nc; ++k) {
        if (m.stage[k] < Stage::voltage) continue;
        const Eigen::Vector2d vh = vhat.segment<2>(2 * k);
        const double phi = cubic ? phi_mag(m, vhat, k) : 1.0;
        out.segment<2>(2 * k) =
            m.gains.eta * (dvoc_K(m, k) * vh - R * io.segment<2>(2 * k) + m.gains.eta_a * phi * vh);
    }
    return out;
}

inline VectorXd line_field(const Model& m, const VectorXd& i_t, const VectorXd& v) {
    if (m.lay.Nt == 0) return VectorXd(0);
    VectorXd rhs = -m.net.ZT * i_t + m.net.BB.transpose() * v;
    for (int e = 0; e < m.lay.Nt; ++e) rhs.segment<2>(2 * e) /= m.net.l(e);
    return rhs;
}

inline Eigen::Matrix2d filter_Y(const Model& m, int k) {
    const auto& c = m.spec.converters[k];
    return c.g_f * Eigen::Matrix2d::Identity() + m.net.omega0 * c.c_f * linalg::J2();
}

inline Eigen::Matrix2d filter_Z(const Model& m, int k) {
    const auto& c = m.spec.converters[k];
    return c.r_f * Eigen::Matrix2d::Identity() + m.net.omega0 * c.l_f * linalg::J2();
}

/// Filter current reference i_f^r for converter k at its current stage.
inline Eigen::Vector2d current_reference(const Model& m, const VectorXd& x, const VectorXd& io, int k) {
    const auto& L = m.lay;
    const Eigen::Vector2d v = x.segment<2>(L.v() + 2 * k);
    switch (m.stage[k]) {
        case Stage::off: return Eigen::Vector2d::Zero();
        case Stage::current: return filter_Y(m, k) * v;  // current source covering the filter losses
        case Stage::voltage:
        case Stage::full: {
            Eigen::Vector2d r = filter_Y(m, k) * v - m.gains.K_pv(k) * (v - x.segment<2>(L.vhat() + 2 * k)) -
                                m.gains.K_iv(k) * x.segment<2>(L.zv() + 2 * k);
            if (m.stage[k] == Stage::full) r += io.segment<2>(2 * k);
            return r;
        }
    }
    return Eigen::Vector2d::Zero();
}

/// (dv, dzeta_v) stacked as in the layout.
inline VectorXd voltage_loop_field(const Model& m, const VectorXd& x, const VectorXd& io) {
    const auto& L = m.lay;
    VectorXd out(4 * L.Nc);
    for (int k = 0; k < L.Nc; ++k) {
        const Eigen::Vector2d v = x.segment<2>(L.v() + 2 * k);
        const Eigen::Vector2d i_f = x.segment<2>(L.i_f() + 2 * k);
        out.segment<2>(2 * k) = (-filter_Y(m, k) * v - io.segment<2>(2 * k) + i_f) / m.spec.converters[k].c_f;
        out.segment<2>(2 * L.Nc + 2 * k) =
            m.stage[k] >= Stage::voltage ? Eigen::Vector2d(v - x.segment<2>(L.vhat() + 2 * k)) : Eigen::Vector2d::Zero();
    }
    return out;
}

/// (di_f, dzeta_f); with v_m = Z_f i_f + v - K_pf e - K_if zeta_f the filter inductor sees -K_pf e - K_if zeta_f.
inline VectorXd current_loop_field(const Model& m, const VectorXd& x, const VectorXd& io) {
    const auto& L = m.lay;
    VectorXd out(4 * L.Nc);
    for (int k = 0; k < L.Nc; ++k) {
        const double lf = m.spec.converters[k].l_f;
        const Eigen::Vector2d i_f = x.segment<2>(L.i_f() + 2 * k);
        if (m.stage[k] == Stage::off) {
            out.segment<2>(2 * k) = (-filter_Z(m, k) * i_f - x.segment<2>(L.v() + 2 * k)) / lf;
            out.segment<2>(2 * L.Nc + 2 * k).setZero();
            continue;
        }
        const Eigen::Vector2d e = i_f - current_reference(m, x, io, k);
        out.segment<2>(2 * k) = (-m.gains.K_pf(k) * e - m.gains.K_if(k) * x.segment<2>(L.zf() + 2 * k)) / lf;
        out.segment<2>(2 * L.Nc + 2 * k) = e;
    }
    return out;
}

inline VectorXd closed_loop_field(const Model& m, const VectorXd& x, bool cubic = true) {
    const auto& L = m.lay;
    const VectorXd io = output_current(m, x);
    VectorXd dx(L.size());
    dx.segment(L.vhat(), 2 * L.Nc) = dvoc_field(m, x.segment(L.vhat(), 2 * L.Nc), io, cubic);
    dx.segment(L.it(), 2 * L.Nt) = line_field(m, x.segment(L.it(), 2 * L.Nt), x.segment(L.v(), 2 * L.Nc));
    dx.segment(L.v(), 4 * L.Nc) = voltage_loop_field(m, x, io);
    dx.segment(L.i_f(), 4 * L.Nc) = current_loop_field(m, x, io);
    return dx;
}

/// Recomputes the linear part after a parameter or stage change.
inline void refresh(Model& m) {
    const int n = m.lay.size();
    m.A.resize(n, n);
    VectorXd e = VectorXd::Zero(n);
    for (int j = 0; j < n; ++j) {
        e(j) = 1.0;
        m.A.col(j) = closed_loop_field(m, e, false);
        e(j) = 0.0;
    }
}

inline MatrixXd closed_loop_jacobian(const Model& m, const VectorXd& x) {
    MatrixXd J = m.A;
    for (int k = 0; k < m.lay.Nc; ++k) {
        if (m.stage[k] < Stage::voltage) continue;
        const Eigen::Vector2d vh = x.segment<2>(2 * k);
        const double vs2 = m.sp.v(k) * m.sp.v(k);
        J.block<2, 2>(2 * k, 2 * k) -= m.gains.eta * m.gains.eta_a *
                                       (vh.squaredNorm() * Eigen::Matrix2d::Identity() + 2.0 * vh * vh.transpose()) / vs2;
    }
    return J;
}

// ---------------------------------------------------------------- steady-state maps and reduced fields

inline VectorXd phi_t(const Model& m, const VectorXd& vhat) { return m.net.ZT_inv * m.net.BB.transpose() * vhat; }

inline VectorXd phi_v(const VectorXd& vhat) {
    VectorXd out = VectorXd::Zero(2 * vhat.size());
    out.head(vhat.size()) = vhat;
    return out;
}

/// (i_f^r, 0)
inline VectorXd phi_f(const Model& m, const VectorXd& x) {
    const VectorXd io = output_current(m, x);
    VectorXd out = VectorXd::Zero(4 * m.lay.Nc);
    for (int k = 0; k < m.lay.Nc; ++k) out.segment<2>(2 * k) = current_reference(m, x, io, k);
    return out;
}

/// Voltage loop with the current loop at its steady state.
inline VectorXd reduced_voltage_field(const Model& m, const VectorXd& vhat, const VectorXd& xv) {
    const int Nc = m.lay.Nc;
    VectorXd out(4 * Nc);
    for (int k = 0; k < Nc; ++k) {
        const Eigen::Vector2d e = xv.segment<2>(2 * k) - vhat.segment<2>(2 * k);
        out.segment<2>(2 * k) =
            -(m.gains.K_pv(k) * e + m.gains.K_iv(k) * xv.segment<2>(2 * Nc + 2 * k)) / m.spec.converters[k].c_f;
        out.segment<2>(2 * Nc + 2 * k) = e;
    }
    return out;
}

inline VectorXd reduced_line_field(const Model& m, const VectorXd& i_t, const VectorXd& vhat) {
    return line_field(m, i_t, vhat);
}

inline VectorXd reduced_dvoc_field(const Model& m, const VectorXd& vhat) {
    VectorXd out(vhat.size());
    const VectorXd coupling = m.net.Lrot * vhat;
    for (int k = 0; k < m.lay.Nc; ++k) {
        const Eigen::Vector2d vh = vhat.segment<2>(2 * k);
        out.segment<2>(2 * k) = m.gains.eta * (dvoc_K(m, k) * vh - coupling.segment<2>(2 * k) +
                                               m.gains.eta_a * phi_mag(m, vhat, k) * vh);
    }
    return out;
}

// ---------------------------------------------------------------- power flow

enum class PFMode { p_only, pq };

struct BranchFlow {
    int line = 0, at = 0, other = 0;
    double p = 0.0, q = 0.0;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(BranchFlow, line, at, other, p, q)

struct OperatingSolution {
    std::string mode;
    bool converged = false;
    int iterations = 0;
    double residual = 0.0;
    VectorXd theta, v, p, q;  ///< node angles, magnitudes and consistent injections
    VectorXd p_mismatch, q_mismatch;  ///< requested minus consistent
    std::vector<BranchFlow> branches;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(OperatingSolution, mode, converged, iterations, residual, theta, v, p, q, p_mismatch,
                                   q_mismatch, branches)

namespace detail {

inline void injections(const Network& n, const std::vector<Line>& lines, const VectorXd& th, const VectorXd& v,
                       const VectorXd& shunt, VectorXd& P, VectorXd& Q, std::vector<BranchFlow>* br = nullptr) {
    P = shunt.cwiseProduct(v.cwiseAbs2());
    Q = VectorXd::Zero(n.Nc);
    if (br) br->clear();
    for (int e = 0; e < n.Nt; ++e) {
        const int ends[2][2] = {{lines[e].from, lines[e].to}, {lines[e].to, lines[e].from}};
        for (const auto& kj : ends) {
            const int k = kj[0], j = kj[1];
            const double d = th(k) - th(j);
            const double pk = v(k) * v(k) * n.g(e) - v(k) * v(j) * (n.g(e) * std::cos(d) - n.b(e) * std::sin(d));
            const double qk = v(k) * v(k) * n.b(e) - v(k) * v(j) * (n.b(e) * std::cos(d) + n.g(e) * std::sin(d));
            P(k) += pk;
            Q(k) += qk;
            if (br) br->push_back({e, k, j, pk, qk});
        }
    }
}

}  // namespace detail

/**
 * @brief Angles at fixed magnitudes from active-power setpoints of nodes 2..N.
 *
 * Node 1 is the angle reference and absorbs the active-power balance. Both
 * modes solve the same equations; pq additionally reports how far the
 * requested reactive powers are from the consistent ones.
 */
inline OperatingSolution solve_power_flow(const Network& n, const std::vector<Line>& lines, const Setpoints& sp,
                                          PFMode mode, VectorXd shunt = {}, int max_iter = 50, double tol = 1e-10) {
    if (shunt.size() == 0) shunt = VectorXd::Zero(n.Nc);
    OperatingSolution s;
    s.mode = mode == PFMode::p_only ? "p" : "pq";
    s.v = sp.v;
    s.theta = VectorXd::Zero(n.Nc);
    VectorXd P, Q;
    const int m = n.Nc - 1;
    for (int it = 0; it <= max_iter; ++it) {
        detail::injections(n, lines, s.theta, s.v, shunt, P, Q);
        const VectorXd res = m > 0 ? VectorXd(P.tail(m) - sp.p.tail(m)) : VectorXd(0);
        s.residual = m > 0 ? res.cwiseAbs().maxCoeff() : 0.0;
        s.iterations = it;
        if (!std::isfinite(s.residual)) break;
        if (s.residual < tol) {
            s.converged = true;
            break;
        }
        MatrixXd Jm = MatrixXd::Zero(n.Nc, n.Nc);
        for (int e = 0; e < n.Nt; ++e) {
            const int ends[2][2] = {{lines[e].from, lines[e].to}, {lines[e].to, lines[e].from}};
            for (const auto& kj : ends) {
                const int k = kj[0], j = kj[1];
                const double d = s.theta(k) - s.theta(j);
                const double dp = s.v(k) * s.v(j) * (n.g(e) * std::sin(d) + n.b(e) * std::cos(d));
                Jm(k, k) += dp;
                Jm(k, j) -= dp;
            }
        }
        const VectorXd step = Jm.bottomRightCorner(m, m).fullPivLu().solve(res);
        s.theta.tail(m) -= step;
    }
    detail::injections(n, lines, s.theta, s.v, shunt, P, Q, &s.branches);
    s.p = P;
    s.q = Q;
    s.p_mismatch = sp.p - P;
    s.q_mismatch = mode == PFMode::pq ? VectorXd(sp.q - Q) : VectorXd::Zero(n.Nc);
    return s;
}

/// Setpoints that make the operating point an exact equilibrium of the reference controllers.
inline Setpoints consistent_setpoints(const OperatingSolution& op) { return {op.p, op.q, op.v}; }

/// Equilibrium of the closed loop at an operating point (model setpoints must be consistent with it).
inline VectorXd equilibrium_state(const Model& m, const OperatingSolution& op) {
    const auto& L = m.lay;
    VectorXd x = VectorXd::Zero(L.size());
    for (int k = 0; k < L.Nc; ++k)
        x.segment<2>(L.vhat() + 2 * k) = op.v(k) * Eigen::Vector2d(std::cos(op.theta(k)), std::sin(op.theta(k)));
    const VectorXd vhat = x.segment(L.vhat(), 2 * L.Nc);
    x.segment(L.it(), 2 * L.Nt) = phi_t(m, vhat);
    x.segment(L.v(), 2 * L.Nc) = vhat;
    const VectorXd io = output_current(m, x);
    for (int k = 0; k < L.Nc; ++k) x.segment<2>(L.i_f() + 2 * k) = current_reference(m, x, io, k);
    return x;
}

/// (p_k, q_k) = (v_k' i_o,k, v_k' J i_o,k) at the converter terminals.
inline std::pair<VectorXd, VectorXd> node_powers(const Model& m, const VectorXd& x) {
    const VectorXd io = output_current(m, x);
    VectorXd p(m.lay.Nc), q(m.lay.Nc);
    for (int k = 0; k < m.lay.Nc; ++k) {
        const Eigen::Vector2d v = x.segment<2>(m.lay.v() + 2 * k), i = io.segment<2>(2 * k);
        p(k) = v.dot(i);
        q(k) = v.dot(linalg::J2() * i);
    }
    return {p, q};
}

// ---------------------------------------------------------------- certification conditions

struct Condition4Result {
    bool pass = false;
    double c_L = 0.0;
    double loading_slack = 0.0;  ///< min_k of rhs - loading_k - eta_a
    double eta_bound = 0.0;
    double eta_slack = 0.0;
    VectorXd loading;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(Condition4Result, pass, c_L, loading_slack, eta_bound, eta_slack, loading)

/// Per-node line loading sum_j (cos kappa |p_jk| + sin kappa |q_jk|) / v_k^2.
inline VectorXd line_loading(const Network& n, const OperatingSolution& op) {
    VectorXd ld = VectorXd::Zero(n.Nc);
    for (const auto& b : op.branches)
        ld(b.at) += (std::cos(n.kappa) * std::abs(b.p) + std::sin(n.kappa) * std::abs(b.q)) / (op.v(b.at) * op.v(b.at));
    return ld;
}

inline double connectivity_budget(const Network& n, const OperatingSolution& op) {
    const double vmin = op.v.minCoeff(), vmax = op.v.maxCoeff();
    return vmin * vmin / (2.0 * vmax * vmax) * n.lambda2;
}

inline double eta_bound(const Network& n, const OperatingSolution& op, double c_L) {
    double smax = 0.0;
    for (int k = 0; k < n.Nc; ++k) smax = std::max(smax, std::hypot(op.p(k), op.q(k)) / (op.v(k) * op.v(k)));
    const double den = 2.0 * n.rho * n.d_max * (c_L + 5.0 * smax + 10.0 * n.d_max);
    return den > 0 ? c_L / den : 0.0;
}

/// Largest admissible c_L for a given eta_a, shrunk by `safety`.
inline double default_c_L(const Network& n, const OperatingSolution& op, double eta_a, double safety = 0.9) {
    const VectorXd ld = line_loading(n, op);
    return safety * (connectivity_budget(n, op) - (ld.size() ? ld.maxCoeff() : 0.0) - eta_a);
}

inline Condition4Result check_condition4(const Network& n, const OperatingSolution& op, double eta, double eta_a,
                                         double c_L) {
    Condition4Result r;
    r.c_L = c_L;
    r.loading = line_loading(n, op);
    const double rhs = connectivity_budget(n, op) - c_L;
    r.loading_slack = (rhs - r.loading.array() - eta_a).minCoeff();
    r.eta_bound = eta_bound(n, op, c_L);
    r.eta_slack = r.eta_bound - eta;
    const double sc1 = std::abs(rhs) + r.loading.cwiseAbs().maxCoeff() + std::abs(eta_a);
    r.pass = n.Nc >= 2 && c_L > 0 && eta > 0 && r.loading_slack > 1e-12 * sc1 &&
             r.eta_slack > 1e-12 * (std::abs(r.eta_bound) + std::abs(eta));
    return r;
}

inline double norm_K_minus_L(const Network& n, const Setpoints& sp) {
    MatrixXd K = MatrixXd::Zero(2 * n.Nc, 2 * n.Nc);
    for (int k = 0; k < n.Nc; ++k) {
        Eigen::Matrix2d pq;
        pq << sp.p(k), sp.q(k), -sp.q(k), sp.p(k);
        K.block<2, 2>(2 * k, 2 * k) = linalg::rot(n.kappa) * pq / (sp.v(k) * sp.v(k));
    }
    return linalg::spectral_norm(K - n.Lrot);
}

/// Quantities shared by the voltage- and current-gain conditions.
struct LoopBounds {
    double b23 = 0.0;  ///< ||B R_T^-1 B'||
    double b31 = 0.0, b34 = 0.0;
    double a3 = 0.0;
    double t41 = 0.0, t42 = 0.0, t43 = 0.0, g4 = 0.0;
    double c_beta = 0.0, a4 = 0.0;
};

inline LoopBounds loop_bounds(const Network& n, const std::vector<Converter>& conv, const Gains& g) {
    LoopBounds lb;
    lb.b23 = n.norm_BRB;
    double yk = 0.0, ygk = 0.0, kk = 0.0, kiv = 0.0, kpv = 0.0, cb = 0.0, a3 = 0.0, a4 = 0.0, b34 = 0.0;
    for (int k = 0; k < n.Nc; ++k) {
        const auto& c = conv[k];
        const double nrm = std::hypot(c.g_f - g.K_pv(k), n.omega0 * c.c_f);
        yk = std::max(yk, nrm);
        ygk = std::max(ygk, nrm / c.c_f);
        kk = std::max(kk, g.K_pv(k) / c.c_f + g.K_iv(k) / c.c_f);
        kiv = std::max(kiv, g.K_iv(k));
        kpv = std::max(kpv, g.K_pv(k));
        lb.b31 = std::max(lb.b31, c.c_f / g.K_iv(k) + c.c_f / g.K_pv(k));
        b34 = std::max(b34, 1.0 / g.K_iv(k) + 1.0 / g.K_pv(k));
        a3 = std::max(a3, c.c_f / g.K_iv(k));
        if (g.K_pf.size() == n.Nc) {
            cb = std::max(cb, c.l_f / g.K_if(k) + c.l_f / g.K_pf(k));
            a4 = std::max(a4, c.l_f / g.K_if(k));
        }
    }
    lb.a3 = 1.0 - a3;
    lb.b34 = b34;
    lb.t41 = kpv;
    lb.t42 = n.omega0 / std::sin(n.kappa) + g.eta * kpv;
    lb.t43 = yk * kk + n.norm_BLB + kiv;
    lb.g4 = ygk;
    lb.c_beta = cb;
    lb.a4 = 1.0 - a4;
    return lb;
}

/**
 * @brief Nested constants of the closed loop for the first `levels` scales.
 *
 * Scales: reference (vhat), lines, voltage loop, current loop.
 */
inline certkit::NestedConstants power_constants(const Network& n, const std::vector<Converter>& conv,
                                                const Setpoints& sp, const Gains& g, double c_L, int levels) {
    const double KL = norm_K_minus_L(n, sp);
    certkit::NestedConstants c;
    c.N = levels;
    c.alpha = {c_L / (5.0 * g.eta * KL * KL), 1.0};
    c.alpha_prime = {0.0, 1.0};
    c.beta_fwd = {1.0 / KL};
    const double ry = n.rho * n.norm_Ynet;
    c.b = {{2, 1, 1, ry}, {2, 2, 1, g.eta * ry}};
    if (levels >= 3) {
        const auto lb = loop_bounds(n, conv, g);
        c.alpha.push_back(lb.a3);
        c.alpha_prime.push_back(0.0);
        c.beta_fwd.push_back(lb.b23);
        c.b.push_back({3, 1, 1, lb.b31});
        c.b.push_back({3, 2, 1, g.eta * lb.b31});
        if (levels >= 4) {
            const double cb = lb.c_beta;
            c.alpha.push_back(lb.a4);
            c.alpha_prime.push_back(0.0);
            c.beta_fwd.push_back(lb.b34);
            double kpv = lb.t41;
            c.b.push_back({4, 1, 1, cb * kpv});
            c.b.push_back({4, 2, 1, cb * g.eta * kpv});
            c.b.push_back({4, 2, 2, cb / (n.rho * std::cos(n.kappa))});
            c.b.push_back({4, 3, 2, cb * n.norm_BLB});
            c.b.push_back({4, 3, 3, cb * (lb.t43 - n.norm_BLB)});
            c.b.push_back({4, 4, 3, cb * lb.g4});
        }
    }
    return c;
}

struct Condition5Result {
    bool pass = false;
    double lhs = 0.0, rhs = 0.0, slack = 0.0;
    std::vector<double> margins;  ///< c_1, c_2[, c_3]
    bool nested_pass = false;     ///< generic margin recursion on the three-scale constants
    std::string error;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(Condition5Result, pass, lhs, rhs, slack, margins, nested_pass, error)

inline Condition5Result check_condition5(const Network& n, const std::vector<Converter>& conv, const Setpoints& sp,
                                         const Gains& g, double c_L) {
    Condition5Result r;
    double kmin = std::numeric_limits<double>::infinity(), rmax = 0.0;
    for (int k = 0; k < n.Nc; ++k) {
        kmin = std::min(kmin, g.K_iv(k) / conv[k].c_f);
        rmax = std::max(rmax, g.K_iv(k) / g.K_pv(k));
    }
    if (!(kmin > 1.0)) {
        r.error = "K_iv must exceed c_f";
        return r;
    }
    if (!(c_L > 0) || !(g.eta > 0)) {
        r.error = "c_L and eta must be positive";
        return r;
    }
    const auto nc = power_constants(n, conv, sp, g, c_L, 3);
    const auto c2 = certkit::check_condition2(nc);
    r.margins = c2.margins;
    r.nested_pass = c2.pass;
    if (c2.margins.size() < 2) {
        r.error = "reference/line margin c_2 is not positive";
        return r;
    }
    const double c2v = c2.margins[1];
    r.lhs = (1.0 + rmax) / (kmin - 1.0);
    r.rhs = 4.0 * g.eta * c2v / (n.norm_BRB * (1.0 + 4.0 * g.eta * g.eta));
    r.slack = r.rhs - r.lhs;
    r.pass = r.slack > 1e-12 * (r.lhs + r.rhs) && r.nested_pass;
    return r;
}

struct Condition6Result {
    bool pass = false;
    double lhs = 0.0, rhs = 0.0, slack = 0.0;
    double c3 = 0.0;
    bool nested_pass = false;  ///< generic margin recursion on the four-scale constants
    std::vector<double> margins;
    std::string error;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(Condition6Result, pass, lhs, rhs, slack, c3, nested_pass, margins, error)

inline Condition6Result check_condition6(const Network& n, const std::vector<Converter>& conv, const Setpoints& sp,
                                         const Gains& g, double c_L) {
    Condition6Result r;
    double kmin = std::numeric_limits<double>::infinity(), rmax = 0.0;
    for (int k = 0; k < n.Nc; ++k) {
        kmin = std::min(kmin, g.K_if(k) / conv[k].l_f);
        rmax = std::max(rmax, g.K_if(k) / g.K_pf(k));
    }
    if (!(kmin > 1.0)) {
        r.error = "K_if must exceed l_f";
        return r;
    }
    const auto c5 = certkit::check_condition2(power_constants(n, conv, sp, g, c_L, 3));
    if (!c5.pass) {
        r.error = "voltage-loop margin c_3 is not positive";
        return r;
    }
    r.c3 = c5.margins[2];
    const auto lb = loop_bounds(n, conv, g);
    r.lhs = (1.0 + rmax) / (kmin - 1.0);
    r.rhs = 4.0 * r.c3 /
            ((lb.b34 / lb.t43) * (lb.t41 * lb.t41 + lb.t42 * lb.t42 + 4.0 * lb.t43 * lb.t43) + r.c3 * lb.g4);
    r.slack = r.rhs - r.lhs;
    const auto c6 = certkit::check_condition2(power_constants(n, conv, sp, g, c_L, 4));
    r.nested_pass = c6.pass;
    r.margins = c6.margins;
    r.pass = r.slack > 1e-12 * (r.lhs + r.rhs) && r.nested_pass;
    return r;
}

struct GainCertificate {
    bool pass = false;
    Gains gains;
    double c_L = 0.0;
    OperatingSolution operating_point;
    Condition4Result condition4;
    Condition5Result condition5;
    Condition6Result condition6;
    certkit::NestedConstants constants;
    int voltage_doublings = 0, current_doublings = 0;
};

inline void to_json(nlohmann::json& j, const GainCertificate& c) {
    j = {{"pass", c.pass},
         {"gains", c.gains},
         {"c_L", c.c_L},
         {"operating_point", c.operating_point},
         {"condition4", c.condition4},
         {"condition5", c.condition5},
         {"condition6", c.condition6},
         {"constants", c.constants},
         {"voltage_doublings", c.voltage_doublings},
         {"current_doublings", c.current_doublings}};
}

inline GainCertificate certificate_from_json(const nlohmann::json& j) {
    GainCertificate c;
    try {
        c.pass = j.at("pass").get<bool>();
        c.c_L = j.at("c_L").get<double>();
        c.operating_point = j.at("operating_point").get<OperatingSolution>();
        c.gains = gains_from_json(j.at("gains"), static_cast<int>(c.operating_point.v.size()));
        c.condition4 = j.at("condition4").get<Condition4Result>();
        c.condition5 = j.at("condition5").get<Condition5Result>();
        c.condition6 = j.at("condition6").get<Condition6Result>();
        c.constants = j.at("constants").get<certkit::NestedConstants>();
        c.voltage_doublings = j.at("voltage_doublings").get<int>();
        c.current_doublings = j.at("current_doublings").get<int>();
    } catch (const nlohmann::json::exception& e) {
        throw InputError(std::string("gain certificate: ") + e.what());
    }
    return c;
}

inline OperatingSolution reference_operating_point(const PowerSystemSpec& spec, const Network& n) {
    auto op = solve_power_flow(n, spec.lines, spec.setpoints, PFMode::p_only);
    if (!op.converged) throw NumericalError("power flow did not converge");
    return op;
}

/// Evaluates Conditions 4-6 for given gains at the spec's setpoints.
inline GainCertificate certify_gains(const PowerSystemSpec& spec, const Gains& g) {
    const Network n = build_network(spec);
    GainCertificate c;
    c.gains = g;
    c.operating_point = reference_operating_point(spec, n);
    const Setpoints sp = consistent_setpoints(c.operating_point);
    c.c_L = g.c_L ? *g.c_L : default_c_L(n, c.operating_point, g.eta_a);
    c.condition4 = check_condition4(n, c.operating_point, g.eta, g.eta_a, c.c_L);
    if (c.c_L > 0 && g.eta > 0) {
        c.condition5 = check_condition5(n, spec.converters, sp, g, c.c_L);
        c.condition6 = check_condition6(n, spec.converters, sp, g, c.c_L);
        c.constants = power_constants(n, spec.converters, sp, g, c.c_L, 4);
    }
    c.pass = c.condition4.pass && c.condition5.pass && c.condition6.pass;
    return c;
}

struct SynthesisOptions {
    double safety = 0.9;          ///< fraction of the connectivity budget split between c_L and eta_a
    double eta_fraction = 0.5;    ///< eta as a fraction of its bound
    double voltage_ratio = 20.0;  ///< K_iv / K_pv [rad/s]
    double current_ratio = 50.0;  ///< K_if / K_pf [rad/s]
    int max_doublings = 60;
};

/**
 * @brief Constructive gain design.
 *
 * c_L = eta_a = half the (safety-scaled) connectivity budget, eta a fixed fraction
 * of its bound, then K_iv / c_f and K_if / l_f doubled at fixed integral-to-
 * proportional ratios until the voltage- and current-gain conditions hold.
 */
inline GainCertificate synthesize_gains(const PowerSystemSpec& spec, const SynthesisOptions& o = {}) {
    const Network n = build_network(spec);
    if (n.Nc < 2) throw NotApplicable("gain synthesis needs at least two converters");
    const OperatingSolution op = reference_operating_point(spec, n);
    const Setpoints sp = consistent_setpoints(op);
    const VectorXd ld = line_loading(n, op);
    const double budget = connectivity_budget(n, op) - ld.maxCoeff();
    if (!(budget > 0)) throw NotApplicable("line loading exceeds the connectivity budget");

    Gains g;
    g.eta_a = 0.5 * o.safety * budget;
    g.c_L = g.eta_a;
    g.eta = o.eta_fraction * eta_bound(n, op, *g.c_L);
    const int N = n.Nc;
    VectorXd cf(N), lf(N);
    for (int k = 0; k < N; ++k) {
        cf(k) = spec.converters[k].c_f;
        lf(k) = spec.converters[k].l_f;
    }
    GainCertificate c;
    double xi = 2.0;
    for (;; xi *= 2.0, ++c.voltage_doublings) {
        if (c.voltage_doublings > o.max_doublings) throw NumericalError("voltage gain synthesis did not converge");
        g.K_iv = xi * cf;
        g.K_pv = g.K_iv / o.voltage_ratio;
        if (check_condition5(n, spec.converters, sp, g, *g.c_L).pass) break;
    }
    xi = 2.0;
    for (;; xi *= 2.0, ++c.current_doublings) {
        if (c.current_doublings > o.max_doublings) throw NumericalError("current gain synthesis did not converge");
        g.K_if = xi * lf;
        g.K_pf = g.K_if / o.current_ratio;
        if (check_condition6(n, spec.converters, sp, g, *g.c_L).pass) break;
    }
    const auto vd = c.voltage_doublings, cd = c.current_doublings;
    c = certify_gains(spec, g);
    c.voltage_doublings = vd;
    c.current_doublings = cd;
    return c;
}

// ---------------------------------------------------------------- Lyapunov function

struct NuValue {
    double nu = 0.0;
    Eigen::Vector4d V = Eigen::Vector4d::Zero();
    double dist_S = 0.0, dist_A = 0.0;
    double y_t = 0.0, y_v = 0.0, y_f = 0.0;
    double combined = 0.0;  ///< dist_S + dist_A + |y_t| + |y_v| + |y_f|
};

/// Projector onto the complement of the synchronous set at the operating point's relative angles.
inline MatrixXd sync_projector(const OperatingSolution& op) {
    const int N = static_cast<int>(op.v.size());
    MatrixXd S(2 * N, 2);
    for (int k = 0; k < N; ++k) S.block<2, 2>(2 * k, 0) = op.v(k) * linalg::rot(op.theta(k) - op.theta(0));
    return MatrixXd::Identity(2 * N, 2 * N) - S * S.transpose() / op.v.squaredNorm();
}

inline NuValue lyapunov_nu(const Model& m, const VectorXd& x, const certkit::NestedConstants& c,
                           const OperatingSolution& op, const MatrixXd& PS) {
    const auto& L = m.lay;
    const Eigen::VectorXd mu = certkit::compute_mu(c);
    NuValue r;
    const VectorXd vhat = x.segment(L.vhat(), 2 * L.Nc);
    const VectorXd ps = PS * vhat;
    double amp = 0.0, da = 0.0;
    for (int k = 0; k < L.Nc; ++k) {
        const double vs = op.v(k), n2 = vhat.segment<2>(2 * k).squaredNorm();
        amp += std::pow((vs * vs - n2) / vs, 2);
        da += std::pow(std::sqrt(n2) - vs, 2);
    }
    r.V(0) = 0.5 * vhat.dot(ps) + 0.5 * m.gains.eta * m.gains.eta_a * c.alpha[0] * amp;
    r.dist_S = ps.norm();
    r.dist_A = std::sqrt(da);

    const VectorXd yt = x.segment(L.it(), 2 * L.Nt) - phi_t(m, vhat);
    r.V(1) = 0.5 * yt.dot(m.net.Pt * yt);
    r.y_t = yt.norm();

    const VectorXd io = output_current(m, x);
    double ev = 0.0, ef = 0.0, v3 = 0.0, v4 = 0.0;
    for (int k = 0; k < L.Nc; ++k) {
        const auto& cv = m.spec.converters[k];
        const Eigen::Vector2d e = x.segment<2>(L.v() + 2 * k) - vhat.segment<2>(2 * k);
        const Eigen::Vector2d z = x.segment<2>(L.zv() + 2 * k);
        const double kp = m.gains.K_pv(k), ki = m.gains.K_iv(k);
        v3 += cv.c_f / kp * e.squaredNorm() + 2.0 * cv.c_f / ki * e.dot(z) + (kp / ki + ki / kp) * z.squaredNorm();
        ev += e.squaredNorm() + z.squaredNorm();
        const Eigen::Vector2d ei = x.segment<2>(L.i_f() + 2 * k) - current_reference(m, x, io, k);
        const Eigen::Vector2d zf = x.segment<2>(L.zf() + 2 * k);
        const double kpf = m.gains.K_pf(k), kif = m.gains.K_if(k);
        v4 += cv.l_f / kpf * ei.squaredNorm() + 2.0 * cv.l_f / kif * ei.dot(zf) +
              (kpf / kif + kif / kpf) * zf.squaredNorm();
        ef += ei.squaredNorm() + zf.squaredNorm();
    }
    r.V(2) = 0.5 * v3;
    r.V(3) = 0.5 * v4;
    r.y_v = std::sqrt(ev);
    r.y_f = std::sqrt(ef);
    r.nu = mu.head(std::min<Eigen::Index>(4, mu.size())).dot(r.V.head(std::min<Eigen::Index>(4, mu.size())));
    r.combined = r.dist_S + r.dist_A + r.y_t + r.y_v + r.y_f;
    return r;
}

struct OriginStability {
    double max_real = 0.0;
    bool degenerate = false;  ///< eta == 0: the reference block is identically zero
};

/// Spectral abscissa of the closed loop linearized at the origin.
inline OriginStability instability_at_origin(Model m) {
    refresh(m);
    OriginStability r;
    r.max_real = linalg::max_real_eigenvalue(m.A);
    r.degenerate = m.gains.eta == 0.0;
    return r;
}

}  // namespace nestcert::powernet
