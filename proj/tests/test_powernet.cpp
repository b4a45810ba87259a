#include "nestcert/powernet.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <complex>
#include <numbers>
#include <random>

using namespace nestcert;
using namespace nestcert::powernet;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

constexpr double w60 = 2.0 * std::numbers::pi * 60.0;

nlohmann::json spec_json(int nodes, const std::vector<std::array<double, 4>>& edges, double v = 120.0) {
    nlohmann::json e = nlohmann::json::array();
    for (const auto& x : edges) e.push_back({int(x[0]), int(x[1]), x[2], x[3]});
    return {{"omega0", w60},
            {"graph", {{"nodes", nodes}, {"edges", e}}},
            {"converters", {{"r_f", 0.124}, {"l_f", 1e-3}, {"c_f", 24e-6}, {"g_f", 0.0}}},
            {"setpoints", {{"v", v}, {"p", 0.0}, {"q", 0.0}}}};
}

PowerSystemSpec path(int n) {
    std::vector<std::array<double, 4>> e;
    for (int i = 1; i < n; ++i) e.push_back({double(i), double(i + 1), 0.05, 2e-4});
    return spec_from_json(spec_json(n, e));
}

Gains table_gains(int n) {
    Gains g;
    g.eta = 8.14;
    g.eta_a = 3.13;
    g.K_pv = VectorXd::Constant(n, 0.07);
    g.K_iv = VectorXd::Constant(n, 0.15);
    g.K_pf = VectorXd::Constant(n, 5.93);
    g.K_if = VectorXd::Constant(n, 12.49);
    return g;
}

struct Fixture {
    PowerSystemSpec spec;
    Network net;
    GainCertificate cert;
    Model m;
    OperatingSolution op;
    VectorXd xs;
};

/// Synthesized gains, operating point from p-mode power flow at the given setpoints.
Fixture fixture(PowerSystemSpec spec, const VectorXd& p = {}) {
    Fixture f;
    f.cert = synthesize_gains(spec);
    if (p.size()) spec.setpoints.p = p;
    f.spec = spec;
    f.net = build_network(spec);
    f.op = solve_power_flow(f.net, spec.lines, spec.setpoints, PFMode::p_only);
    f.m = make_model(spec, f.net, f.cert.gains, consistent_setpoints(f.op));
    refresh(f.m);
    f.xs = equilibrium_state(f.m, f.op);
    return f;
}

}  // namespace

TEST(Rotation, Algebra) {
    for (double a : {0.0, 0.3, 1.2, -2.5}) {
        EXPECT_LT((linalg::rot(a).transpose() * linalg::rot(a) - Eigen::Matrix2d::Identity()).cwiseAbs().maxCoeff(),
                  1e-15);
    }
    EXPECT_LT((linalg::J2() - linalg::rot(std::numbers::pi / 2)).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Network, TableLineConstants) {
    const auto n = build_network(path(2));
    const double x = w60 * 2e-4;
    EXPECT_NEAR(1.0 / n.y_mag(0), std::hypot(0.05, x), 1e-15);
    EXPECT_NEAR(n.y_mag(0), 11.0533, 1e-4);
    EXPECT_NEAR(n.rho, 0.004, 1e-15);
    EXPECT_NEAR(n.kappa, std::atan2(x, 0.05), 1e-14);
    EXPECT_NEAR(n.lambda2, 2.0 * n.y_mag(0), 1e-12);
    EXPECT_EQ(n.B, (MatrixXd(2, 1) << 1, -1).finished());
    EXPECT_EQ(n.BBn.cols(), 0);
}

TEST(Network, TriangleNullspace) {
    const auto n = build_network(spec_from_json(spec_json(3, {{1, 2, 0.05, 2e-4}, {2, 3, 0.1, 4e-4}, {3, 1, 0.07, 2.8e-4}})));
    EXPECT_EQ(n.BBn.cols(), 2);
    EXPECT_LT((n.BB * n.BBn).cwiseAbs().maxCoeff(), 1e-12);
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(n.Lap);
    EXPECT_NEAR(es.eigenvalues()(0), 0.0, 1e-12);
    EXPECT_GT(es.eigenvalues()(1), 0.0);
}

TEST(Network, RotatedAdmittanceIsLaplacianUnderUniformRatio) {
    const auto n = build_network(spec_from_json(spec_json(4, {{1, 2, 0.05, 2e-4}, {2, 3, 0.1, 4e-4}, {3, 4, 0.02, 0.8e-4}, {4, 1, 0.07, 2.8e-4}})));
    EXPECT_LT((n.Lrot - linalg::kron_i2(n.Lap)).cwiseAbs().maxCoeff(), 1e-9 * n.Lap.norm());
    EXPECT_NEAR(n.norm_Ynet, n.lambda_max, 1e-9 * n.lambda_max);
}

TEST(Network, OperatorNormsMatchDirectEvaluation) {
    const auto n = build_network(spec_from_json(spec_json(3, {{1, 2, 0.05, 2e-4}, {2, 3, 0.1, 4e-4}, {3, 1, 0.07, 2.8e-4}})));
    EXPECT_NEAR(n.norm_BRB, linalg::spectral_norm(n.BB * n.RT.inverse() * n.BB.transpose()), 1e-9 * n.norm_BRB);
    EXPECT_NEAR(n.norm_BLB, linalg::spectral_norm(n.BB * n.LT.inverse() * n.BB.transpose()), 1e-9 * n.norm_BLB);
}

TEST(Network, InputErrors) {
    EXPECT_THROW(build_network(spec_from_json(spec_json(3, {{1, 2, 0.05, 2e-4}, {2, 3, 0.1, 2e-4}}))), InputError);
    EXPECT_THROW(build_network(spec_from_json(spec_json(3, {{1, 2, 0.05, 2e-4}}))), InputError);
    EXPECT_THROW(spec_from_json(spec_json(2, {{1, 3, 0.05, 2e-4}})), InputError);
    EXPECT_THROW(spec_from_json(spec_json(2, {{1, 2, 0.05, 2e-4}}, -1.0)), InputError);
    auto j = spec_json(2, {{1, 2, 0.05, 2e-4}});
    j["converters"]["c_f"] = 0.0;
    EXPECT_THROW(spec_from_json(j), InputError);
}

TEST(Json, SpecRoundTrip) {
    auto s = path(3);
    s.gains = table_gains(3);
    s.gains->c_L = 1.5;
    const nlohmann::json j = s;
    const auto back = spec_from_json(nlohmann::json::parse(j.dump()));
    EXPECT_EQ(nlohmann::json(back), j);
}

TEST(Json, CertificateRoundTrip) {
    const auto c = synthesize_gains(path(2));
    const nlohmann::json j = c;
    EXPECT_EQ(nlohmann::json(certificate_from_json(nlohmann::json::parse(j.dump()))), j);
}

TEST(Dvoc, Basics) {
    auto f = fixture(path(2));
    VectorXd vh(4);
    vh << 120, 0, 0, 120;
    EXPECT_EQ(phi_mag(f.m, vh, 0), 0.0);
    EXPECT_EQ(phi_mag(f.m, vh, 1), 0.0);
    EXPECT_EQ(dvoc_K(f.m, 0), Eigen::Matrix2d::Zero());
}

TEST(Equilibrium, ThreeNodePathResidualAndPowers) {
    auto f = fixture(path(3), Eigen::Vector3d(0, 300, -150));
    ASSERT_TRUE(f.op.converged);
    const VectorXd dx = closed_loop_field(f.m, f.xs);
    EXPECT_LT(dx.cwiseAbs().maxCoeff(), 1e-8);
    const auto [p, q] = node_powers(f.m, f.xs);
    for (int k = 1; k < 3; ++k) EXPECT_NEAR(p(k), f.spec.setpoints.p(k), 1e-8 * std::abs(f.spec.setpoints.p(k)));
    EXPECT_LT((p - f.op.p).cwiseAbs().maxCoeff(), 1e-8 * f.op.p.cwiseAbs().maxCoeff());
    EXPECT_LT((q - f.op.q).cwiseAbs().maxCoeff(), 1e-8 * f.op.q.cwiseAbs().maxCoeff());
    // reference, voltage-loop and current-loop pieces vanish individually
    const auto& L = f.m.lay;
    const VectorXd io = output_current(f.m, f.xs);
    EXPECT_LT(dvoc_field(f.m, f.xs.head(2 * L.Nc), io).cwiseAbs().maxCoeff(), 1e-8);
    EXPECT_LT(reduced_dvoc_field(f.m, f.xs.head(2 * L.Nc)).cwiseAbs().maxCoeff(), 1e-8);
}

TEST(Equilibrium, PowerBalance) {
    for (auto p : {VectorXd(Eigen::Vector3d(0, 0, 0)), VectorXd(Eigen::Vector3d(0, 500, 200)),
                   VectorXd(Eigen::Vector3d(0, -300, 800))}) {
        auto f = fixture(path(3), p);
        const auto [pk, qk] = node_powers(f.m, f.xs);
        double loss = 0.0;
        for (int e = 0; e < f.net.Nt; ++e) loss += f.net.r(e) * f.xs.segment<2>(f.m.lay.it() + 2 * e).squaredNorm();
        EXPECT_LT(std::abs(pk.sum() - loss) / std::max(1.0, pk.cwiseAbs().sum()), 1e-6);
    }
}

TEST(Equilibrium, SingleConverterNoLines) {
    auto spec = spec_from_json(spec_json(1, {}));
    const auto net = build_network(spec);
    Gains g = table_gains(1);
    auto m = make_model(spec, net, g, spec.setpoints);
    refresh(m);
    VectorXd x = VectorXd::Zero(m.lay.size());
    x.segment<2>(m.lay.vhat()) << 120, 0;
    x.segment<2>(m.lay.v()) << 120, 0;
    x.segment<2>(m.lay.i_f()) = filter_Y(m, 0) * Eigen::Vector2d(120, 0);
    EXPECT_LT(closed_loop_field(m, x).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(Loops, ControlLaws) {
    auto f = fixture(path(2));
    auto& m = f.m;
    const auto& L = m.lay;
    VectorXd x = f.xs;
    // v = vhat, zeta_v = 0, no output current: pure feed-forward
    x.segment(L.it(), 2 * L.Nt).setZero();
    const VectorXd io = output_current(m, x);
    EXPECT_LT((current_reference(m, x, io, 0) - filter_Y(m, 0) * x.segment<2>(L.v())).norm(), 1e-12);
    // zero gains leave Y_f v + i_o
    Model z = m;
    z.gains.K_pv.setZero();
    z.gains.K_iv.setZero();
    std::mt19937_64 rng(1);
    std::normal_distribution<double> n01;
    VectorXd r(L.size());
    for (auto& v : r) v = 50 * n01(rng);
    const VectorXd ior = output_current(z, r);
    EXPECT_LT((current_reference(z, r, ior, 1) - filter_Y(z, 1) * r.segment<2>(L.v() + 2) - ior.segment<2>(2)).norm(),
              1e-9);
}

TEST(Loops, CurrentLoopDependsOnErrorOnly) {
    auto f = fixture(path(2));
    const auto& L = f.m.lay;
    std::mt19937_64 rng(2);
    std::normal_distribution<double> n01;
    VectorXd x(L.size());
    for (auto& v : x) v = 10 * n01(rng);
    const VectorXd io = output_current(f.m, x);
    const VectorXd base = current_loop_field(f.m, x, io);
    for (int k = 0; k < L.Nc; ++k) {
        const Eigen::Vector2d e = x.segment<2>(L.i_f() + 2 * k) - current_reference(f.m, x, io, k);
        const Eigen::Vector2d di =
            (-f.m.gains.K_pf(k) * e - f.m.gains.K_if(k) * x.segment<2>(L.zf() + 2 * k)) / f.spec.converters[k].l_f;
        EXPECT_LT((base.segment<2>(2 * k) - di).norm(), 1e-9 * di.norm());
        EXPECT_LT((base.segment<2>(2 * L.Nc + 2 * k) - e).norm(), 1e-12 * std::max(1.0, e.norm()));
    }
}

TEST(SteadyMaps, FastBlocksVanish) {
    auto f = fixture(path(3));
    auto& m = f.m;
    const auto& L = m.lay;
    std::mt19937_64 rng(3);
    std::normal_distribution<double> n01;
    for (int s = 0; s < 1000; ++s) {
        VectorXd x(L.size());
        for (auto& v : x) v = 100 * n01(rng);
        const VectorXd vh = x.segment(L.vhat(), 2 * L.Nc);
        // lines at their map with v = vhat
        const VectorXd it = phi_t(m, vh);
        const double scale = (m.net.BB.transpose() * vh).cwiseAbs().maxCoeff() / m.net.l.minCoeff();
        EXPECT_LT(reduced_line_field(m, it, vh).cwiseAbs().maxCoeff(), 1e-12 * scale);
        // voltage loop at its map
        EXPECT_LT(reduced_voltage_field(m, vh, phi_v(vh)).cwiseAbs().maxCoeff(), 1e-10);
        // current loop at its map
        VectorXd y = x;
        y.segment(L.i_f(), 4 * L.Nc) = phi_f(m, x);
        EXPECT_LT(current_loop_field(m, y, output_current(m, y)).cwiseAbs().maxCoeff(), 1e-10);
    }
}

TEST(SteadyMaps, AlignedEqualVoltagesCarryNoCurrent) {
    auto f = fixture(path(2));
    VectorXd vh(4);
    vh << 120, 0, 120, 0;
    EXPECT_LT(phi_t(f.m, vh).norm(), 1e-12);
}

TEST(SteadyMaps, LineCurrentMatchesPhasorSolve) {
    auto f = fixture(path(2));
    VectorXd vh(4);
    vh << 120, 0, 120 * std::cos(0.01), 120 * std::sin(0.01);
    const VectorXd it = phi_t(f.m, vh);
    const std::complex<double> v1(120, 0), v2 = std::polar(120.0, 0.01), z(0.05, w60 * 2e-4);
    const std::complex<double> i = (v1 - v2) / z;
    EXPECT_NEAR(it(0), i.real(), 1e-10 * std::abs(i));
    EXPECT_NEAR(it(1), i.imag(), 1e-10 * std::abs(i));
}

TEST(PowerFlow, ZeroAngleNoFlow) {
    const auto s = path(2);
    const auto n = build_network(s);
    const auto op = solve_power_flow(n, s.lines, s.setpoints, PFMode::pq);
    EXPECT_TRUE(op.converged);
    for (const auto& b : op.branches) {
        EXPECT_EQ(b.p, 0.0);
        EXPECT_EQ(b.q, 0.0);
    }
}

TEST(PowerFlow, TwoNodeRoundTrip) {
    auto s = path(2);
    const auto n = build_network(s);
    // forward: pick an angle, compute injections with the phasor formula, then invert
    const double th = -0.02;
    const std::complex<double> v1(120, 0), v2 = std::polar(120.0, th), y = 1.0 / std::complex<double>(0.05, w60 * 2e-4);
    const std::complex<double> s2 = v2 * std::conj((v2 - v1) * y);
    s.setpoints.p = Eigen::Vector2d(0, s2.real());
    const auto op = solve_power_flow(n, s.lines, s.setpoints, PFMode::p_only);
    ASSERT_TRUE(op.converged);
    EXPECT_LT(op.residual, 1e-10);
    EXPECT_NEAR(op.theta(1), th, 1e-12);
    EXPECT_NEAR(op.q(1), s2.imag(), 1e-9 * std::abs(s2));
    const std::complex<double> s1 = v1 * std::conj((v1 - v2) * y);
    EXPECT_NEAR(op.p(0), s1.real(), 1e-9 * std::abs(s1));
}

TEST(PowerFlow, ReportsNonConvergence) {
    auto s = path(2);
    s.setpoints.p = Eigen::Vector2d(0, 1e7);
    const auto op = solve_power_flow(build_network(s), s.lines, s.setpoints, PFMode::p_only);
    EXPECT_FALSE(op.converged);
}

TEST(Condition4, ZeroFlowBoundaryIsStrict) {
    const auto s = path(2);
    const auto n = build_network(s);
    const auto op = solve_power_flow(n, s.lines, s.setpoints, PFMode::p_only);
    const double q = n.lambda2 / 4.0;
    const auto r = check_condition4(n, op, 0.1, q, q);
    EXPECT_NEAR(r.loading_slack, 0.0, 1e-12);
    EXPECT_FALSE(r.pass);
}

TEST(Condition4, TwoNodeEtaBound) {
    const auto s = path(2);
    const auto n = build_network(s);
    const auto op = solve_power_flow(n, s.lines, s.setpoints, PFMode::p_only);
    const double cL = 5.526;
    EXPECT_NEAR(n.lambda2, 22.10, 1e-2);
    const double bound = cL / (n.rho * n.norm_Ynet * (cL + 5 * n.norm_Lrot));
    EXPECT_NEAR(bound, 0.54, 5e-3);
    EXPECT_NEAR(eta_bound(n, op, cL), bound, 1e-12 * bound);
    EXPECT_TRUE(check_condition4(n, op, 0.25, 5.0, 5.0).pass);
}

TEST(Condition4, HeavyLoadFails) {
    auto s = path(2);
    s.setpoints.p = Eigen::Vector2d(0, -70000);
    const auto n = build_network(s);
    const auto op = solve_power_flow(n, s.lines, s.setpoints, PFMode::p_only);
    ASSERT_TRUE(op.converged);
    const auto r = check_condition4(n, op, 0.1, 1.0, 1.0);
    EXPECT_LT(r.loading_slack, 0.0);
    EXPECT_FALSE(r.pass);
}

TEST(Condition5, ErrorPathAndLimit) {
    const auto s = path(2);
    const auto n = build_network(s);
    auto g = synthesize_gains(s).gains;
    const auto sp = s.setpoints;
    auto bad = g;
    bad.K_iv = VectorXd::Constant(2, s.converters[0].c_f);
    const auto r = check_condition5(n, s.converters, sp, bad, *g.c_L);
    EXPECT_FALSE(r.pass);
    EXPECT_FALSE(r.error.empty());
    auto big = g;
    big.K_iv *= 1e6;
    big.K_pv = big.K_iv * 1e3;
    EXPECT_TRUE(check_condition5(n, s.converters, sp, big, *g.c_L).pass);
}

TEST(Condition6, ErrorPathAndMonotonicity) {
    const auto s = path(2);
    const auto n = build_network(s);
    const auto g = synthesize_gains(s).gains;
    auto bad = g;
    bad.K_if = VectorXd::Constant(2, s.converters[0].l_f);
    const auto r = check_condition6(n, s.converters, s.setpoints, bad, *g.c_L);
    EXPECT_FALSE(r.pass);
    EXPECT_FALSE(r.error.empty());
    auto up = g;
    for (int i = 0; i < 10; ++i) {
        up.K_pf *= 2.0;
        up.K_if *= 2.0;
        EXPECT_TRUE(check_condition6(n, s.converters, s.setpoints, up, *g.c_L).pass);
    }
}

TEST(Condition6, DisplayedBoundIsLooserThanMarginRecursion) {
    const auto s = path(3);
    const auto n = build_network(s);
    const auto c = synthesize_gains(s);
    const auto lb = loop_bounds(n, s.converters, c.gains);
    const double c3 = c.condition6.c3;
    // generic step at i = 4 on constants scaled by 1/c_beta
    const double generic = 4.0 * c3 /
                           ((lb.b34 / lb.t43) * (lb.t41 * lb.t41 + lb.t42 * lb.t42 + 4.0 * lb.t43 * lb.t43) +
                            4.0 * c3 * lb.g4);
    EXPECT_LT(generic, c.condition6.rhs);
    EXPECT_LT(c.condition6.lhs, generic);
}

TEST(Synthesis, TwoAndThreeNodesPass) {
    for (int nodes : {2, 3}) {
        const auto a = synthesize_gains(path(nodes));
        EXPECT_TRUE(a.pass) << nodes;
        EXPECT_GT(a.condition4.loading_slack, 0.0);
        EXPECT_GT(a.condition4.eta_slack, 0.0);
        EXPECT_GT(a.condition5.slack, 0.0);
        EXPECT_GT(a.condition6.slack, 0.0);
        EXPECT_TRUE(certkit::check_condition2(a.constants).pass);
        const auto b = synthesize_gains(path(nodes));
        EXPECT_EQ(nlohmann::json(a).dump(), nlohmann::json(b).dump());
    }
}

TEST(Synthesis, TwoNodeRegression) {
    const auto c = synthesize_gains(path(2));
    EXPECT_NEAR(c.gains.eta, 0.24349089211723587, 1e-12);
    EXPECT_NEAR(*c.gains.c_L, 4.97400289342545, 1e-12);
    EXPECT_NEAR(c.gains.K_iv(0), 3.145728, 1e-12);
    EXPECT_NEAR(c.gains.K_pv(0), 0.1572864, 1e-12);
    EXPECT_EQ(c.voltage_doublings, 16);
    EXPECT_EQ(c.current_doublings, 56);
    EXPECT_NEAR(c.condition5.margins[1], 0.008282733361306693, 1e-12);
}

TEST(Synthesis, SingleNodeNotApplicable) { EXPECT_THROW(synthesize_gains(spec_from_json(spec_json(1, {}))), NotApplicable); }

TEST(Projector, Identities) {
    auto f = fixture(path(3), Eigen::Vector3d(0, 400, -100));
    const int N = 3;
    MatrixXd S(2 * N, 2);
    for (int k = 0; k < N; ++k) S.block<2, 2>(2 * k, 0) = f.op.v(k) * linalg::rot(f.op.theta(k) - f.op.theta(0));
    EXPECT_LT((S.transpose() * S - f.op.v.squaredNorm() * Eigen::Matrix2d::Identity()).cwiseAbs().maxCoeff(), 1e-9);
    const MatrixXd P = sync_projector(f.op);
    EXPECT_LT((P * P - P).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LT((P * S * Eigen::Vector2d(0.3, -1.7)).norm(), 1e-10);
}

TEST(Lyapunov, ZeroOnTargetSet) {
    auto f = fixture(path(3), Eigen::Vector3d(0, 400, -100));
    const auto c = power_constants(f.net, f.spec.converters, consistent_setpoints(f.op), f.cert.gains, *f.cert.gains.c_L, 4);
    const auto nu = lyapunov_nu(f.m, f.xs, c, f.op, sync_projector(f.op));
    EXPECT_LT(nu.nu, 1e-12 * 120.0 * 120.0);
    EXPECT_LT(nu.dist_S, 1e-9);
    EXPECT_LT(nu.dist_A, 1e-9);
    // a common rotation stays in the synchronous set
    VectorXd x = f.xs;
    for (int k = 0; k < 3; ++k) x.segment<2>(2 * k) = linalg::rot(0.4) * x.segment<2>(2 * k);
    EXPECT_LT(lyapunov_nu(f.m, x, c, f.op, sync_projector(f.op)).dist_S, 1e-9);
}

TEST(Origin, UnstableUnderCertifiedGains) {
    for (int nodes : {1, 2, 3}) {
        auto spec = path(nodes);
        const auto net = build_network(spec);
        Gains g = nodes == 1 ? synthesize_gains(path(2)).gains : synthesize_gains(spec).gains;
        if (nodes == 1) {
            g.K_pv.conservativeResize(1);
            g.K_iv.conservativeResize(1);
            g.K_pf.conservativeResize(1);
            g.K_if.conservativeResize(1);
        }
        const auto r = instability_at_origin(make_model(spec, net, g, spec.setpoints));
        EXPECT_GT(r.max_real, 0.0) << nodes;
        EXPECT_FALSE(r.degenerate);
    }
}

TEST(Origin, FrozenReferenceIsDegenerate) {
    auto spec = path(2);
    const auto net = build_network(spec);
    auto g = synthesize_gains(spec).gains;
    g.eta = 0.0;
    auto m = make_model(spec, net, g, spec.setpoints);
    const auto r = instability_at_origin(m);
    EXPECT_TRUE(r.degenerate);
    refresh(m);
    EXPECT_EQ(m.A.topRows(4).cwiseAbs().maxCoeff(), 0.0);
}

// The averaged model with the reference controller gains in data/three_node_table_gains.json has an unstable equilibrium,
// which is why the scenario checks run with synthesized gains. On two nodes a slower
// reference with the same inner loops is stable; on three it is not.
TEST(TableGains, AveragedModelEquilibriumIsUnstable) {
    for (int nodes : {2, 3}) {
        auto spec = path(nodes);
        const auto net = build_network(spec);
        const auto op = solve_power_flow(net, spec.lines, spec.setpoints, PFMode::p_only);
        auto m = make_model(spec, net, table_gains(nodes), consistent_setpoints(op));
        refresh(m);
        const VectorXd x = equilibrium_state(m, op);
        EXPECT_LT(closed_loop_field(m, x).cwiseAbs().maxCoeff(), 1e-8);
        EXPECT_GT(linalg::max_real_eigenvalue(closed_loop_jacobian(m, x)), 1.0) << nodes;
        // the same inner loops with a slow reference are stable
        m.gains.eta = 0.25;
        refresh(m);
        if (nodes == 2) EXPECT_LT(linalg::max_real_eigenvalue(closed_loop_jacobian(m, x)), 0.0);
    }
}

TEST(Jacobian, MatchesFiniteDifferences) {
    auto f = fixture(path(2));
    std::mt19937_64 rng(9);
    std::normal_distribution<double> n01;
    VectorXd x = f.xs;
    for (int i = 0; i < 4; ++i) x(i) += 10 * n01(rng);
    const MatrixXd J = closed_loop_jacobian(f.m, x);
    for (int j = 0; j < 4; ++j) {
        VectorXd e = VectorXd::Zero(x.size());
        e(j) = 1e-4;
        const VectorXd col = (closed_loop_field(f.m, x + e) - closed_loop_field(f.m, x - e)) / 2e-4;
        EXPECT_LT((col - J.col(j)).cwiseAbs().maxCoeff(), 1e-5 * std::max(1.0, J.col(j).cwiseAbs().maxCoeff()));
    }
}

TEST(NodePowers, Bilinear) {
    auto f = fixture(path(2));
    VectorXd x = VectorXd::Zero(f.m.lay.size());
    auto [p, q] = node_powers(f.m, x);
    EXPECT_EQ(p.norm() + q.norm(), 0.0);
    // v_1 = (V, 0) and i_o,1 = (I, 0) through a load shunt
    Model m = f.m;
    m.load(0) = 0.5;
    x.segment<2>(m.lay.v()) << 100, 0;
    std::tie(p, q) = node_powers(m, x);
    EXPECT_DOUBLE_EQ(p(0), 100 * 50);
    EXPECT_DOUBLE_EQ(q(0), 0.0);
}
