// nestcert command-line driver. Exit codes: 0 ok / certified, 1 checked but not
// certified (or not applicable), 2 input error, 3 numerical failure.

#include "nestcert/certkit.hpp"
#include "nestcert/io.hpp"
#include "nestcert/parallel.hpp"
#include "nestcert/powernet.hpp"
#include "nestcert/sim.hpp"
#include "nestcert/toy.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <random>
#include <string>

namespace fs = std::filesystem;
using namespace nestcert;

namespace {

struct Common {
    std::string input;
    std::string output_dir = "out";
    std::uint64_t seed = 42;
    double tol_abs = 1e-8, tol_rel = 1e-6;
};

toy::Range parse_range(const std::string& s) {
    const auto c = s.find(':');
    if (c == std::string::npos) throw InputError("range must look like lo:hi, got '" + s + "'");
    try {
        toy::Range r{std::stod(s.substr(0, c)), std::stod(s.substr(c + 1))};
        if (!(r.lo > 0) || !(r.hi >= r.lo)) throw InputError("range '" + s + "' must satisfy 0 < lo <= hi");
        return r;
    } catch (const std::logic_error&) {
        throw InputError("range must look like lo:hi, got '" + s + "'");
    }
}

std::pair<int, int> parse_grid(const std::string& s) {
    int w = 0, h = 0;
    char x = 0;
    if (std::sscanf(s.c_str(), "%d%c%d", &w, &x, &h) != 3 || (x != 'x' && x != 'X') || w < 1 || h < 1)
        throw InputError("grid must look like WxH, got '" + s + "'");
    return {w, h};
}

int cmd_certify(const Common& o, std::optional<double> margin) {
    auto c = io::read_json(o.input).get<certkit::NestedConstants>();
    const auto rep = certkit::certify(c);
    io::write_json(fs::path(o.output_dir) / "certificate.json", rep);
    std::printf("%-14s %s\n", "verdict", rep.verdict.c_str());
    if (rep.verdict != "not-applicable") {
        std::printf("%-14s %s\n", "condition 1", rep.condition1_pass ? "pass" : "fail");
        for (std::size_t i = 0; i < rep.condition1_slack.size(); ++i)
            std::printf("  slack_%zu      %s\n", i + 2, io::num(rep.condition1_slack[i]).c_str());
        std::printf("%-14s %s\n", "condition 2", rep.condition2_pass ? "pass" : "fail");
        for (std::size_t i = 0; i < rep.margins.size(); ++i)
            std::printf("  c_%zu          %s\n", i + 1, io::num(rep.margins[i]).c_str());
        std::printf("%-14s %s (%s)\n", "eigen oracle", io::num(rep.eigen_min).c_str(), rep.oracle_pd ? "pd" : "not pd");
    }
    if (!rep.note.empty()) std::printf("note: %s\n", rep.note.c_str());
    if (!rep.consistent) return 3;
    if (margin) {
        if (rep.verdict == "not-applicable") return 1;
        const auto e = certkit::synthesize_epsilons(c, *margin);
        io::write_json(fs::path(o.output_dir) / "epsilons.json",
                       {{"margin", *margin}, {"eps", e.eps}, {"scaled", e.scaled}});
        std::printf("%-14s", "epsilon");
        for (double v : e.eps) std::printf(" %s", io::num(v).c_str());
        std::printf("\n");
    }
    return rep.verdict == "certified-sufficient" || rep.verdict == "certified-necessary-sufficient" ? 0 : 1;
}

int cmd_toy_sweep(const Common& o, const std::string& kappa, const std::string& k, const std::string& grid,
                  bool boundary) {
    const auto kr = parse_range(kappa), kk = parse_range(k);
    const auto [w, h] = parse_grid(grid);
    const auto pts = toy::sweep_regions(kr, kk, w, h);
    io::write_text(fs::path(o.output_dir) / "toy_sweep.csv", toy::sweep_csv(pts));
    std::printf("wrote %zu points to %s\n", pts.size(), (fs::path(o.output_dir) / "toy_sweep.csv").c_str());
    if (boundary) {
        io::write_text(fs::path(o.output_dir) / "toy_boundary.csv", toy::boundary_csv(kk, h));
        std::printf("wrote boundary curves to %s\n", (fs::path(o.output_dir) / "toy_boundary.csv").c_str());
    }
    return 0;
}

powernet::GainCertificate gains_for(const powernet::PowerSystemSpec& spec) {
    return spec.gains ? powernet::certify_gains(spec, *spec.gains) : powernet::synthesize_gains(spec);
}

void print_certificate(const powernet::GainCertificate& c) {
    std::printf("condition 4    %s  loading slack %s  eta slack %s\n", c.condition4.pass ? "pass" : "fail",
                io::num(c.condition4.loading_slack).c_str(), io::num(c.condition4.eta_slack).c_str());
    std::printf("condition 5    %s  slack %s%s%s\n", c.condition5.pass ? "pass" : "fail",
                io::num(c.condition5.slack).c_str(), c.condition5.error.empty() ? "" : "  ",
                c.condition5.error.c_str());
    std::printf("condition 6    %s  slack %s%s%s\n", c.condition6.pass ? "pass" : "fail",
                io::num(c.condition6.slack).c_str(), c.condition6.error.empty() ? "" : "  ",
                c.condition6.error.c_str());
    std::printf("certificate    %s\n", c.pass ? "pass" : "fail");
}

int cmd_power(const Common& o, const std::string& sub, const std::string& scenario, double t_end,
              const std::string& method, const std::string& mode, double perturb, double rate) {
    const auto spec = powernet::spec_from_json(io::read_json(o.input));
    const auto net = powernet::build_network(spec);
    const fs::path out(o.output_dir);
    if (sub == "pf") {
        const auto op = powernet::solve_power_flow(net, spec.lines, spec.setpoints,
                                                   mode == "pq" ? powernet::PFMode::pq : powernet::PFMode::p_only);
        io::write_json(out / "operating_point.json", op);
        std::printf("power flow %s after %d iterations, residual %s\n", op.converged ? "converged" : "did not converge",
                    op.iterations, io::num(op.residual).c_str());
        for (const auto& b : op.branches) {
            const double th = op.theta(b.at) - op.theta(b.other);
            if (std::abs(th) > std::numbers::pi / 2)
                std::fprintf(stderr, "warning: angle difference %s rad on line %d exceeds pi/2\n", io::num(th).c_str(),
                             b.line + 1);
        }
        return op.converged ? 0 : 3;
    }
    if (sub == "certify") {
        const auto c = gains_for(spec);
        io::write_json(out / "certificate.json", c);
        print_certificate(c);
        return c.pass ? 0 : 1;
    }
    if (sub == "synth") {
        const auto c = powernet::synthesize_gains(spec);
        io::write_json(out / "gains.json", c.gains);
        io::write_json(out / "certificate.json", c);
        print_certificate(c);
        return c.pass ? 0 : 1;
    }
    // sim
    powernet::Gains g;
    powernet::OperatingSolution op;
    if (spec.gains) {
        g = *spec.gains;
        op = powernet::reference_operating_point(spec, net);
    } else {
        const auto c = powernet::synthesize_gains(spec);
        g = c.gains;
        op = c.operating_point;
        io::write_json(out / "gains.json", g);
    }
    auto m = powernet::make_model(spec, net, g, powernet::consistent_setpoints(op));
    powernet::refresh(m);
    Eigen::VectorXd x0 = powernet::equilibrium_state(m, op);
    if (perturb > 0) {
        std::mt19937_64 rng(o.seed);
        std::uniform_real_distribution<double> u(-perturb, perturb);
        const double vs = spec.setpoints.v.maxCoeff();
        for (Eigen::Index i = 0; i < x0.size(); ++i) x0(i) += u(rng) * std::max(std::abs(x0(i)), vs);
    }
    sim::Scenario sc;
    if (!scenario.empty()) sc = sim::scenario_from_json(io::read_json(scenario), net.Nc, m.lay.size());
    auto opt = sim::power_defaults();
    opt.tol = {o.tol_abs, o.tol_rel};
    if (method == "dopri5")
        opt.method = sim::Method::dopri5;
    else if (method != "rosenbrock2")
        throw InputError("unknown method '" + method + "'");
    const auto run = sim::run_scenario(m, sc, x0, t_end, opt);
    io::write_text(out / "trajectory.csv", sim::trajectory_csv(run, rate));
    std::printf("simulated %s s in %zu steps; wrote %s\n", io::num(t_end).c_str(), run.tr.t.size(),
                (out / "trajectory.csv").c_str());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Stability certificates and simulation for nested multi-time-scale systems"};
    app.require_subcommand(1);
    Common o;
    auto common = [&o](CLI::App* a, bool input_required = true) {
        auto* in = a->add_option("--input", o.input, "input JSON file");
        if (input_required) in->required();
        a->add_option("--output-dir", o.output_dir, "directory for emitted artifacts")->capture_default_str();
        a->add_option("--seed", o.seed, "random seed")->capture_default_str();
        a->add_option("--tol-abs", o.tol_abs, "integrator absolute tolerance")->capture_default_str();
        a->add_option("--tol-rel", o.tol_rel, "integrator relative tolerance")->capture_default_str();
    };

    auto* certify = app.add_subcommand("certify", "check Conditions 1 and 2 for a constants file");
    common(certify);
    std::optional<double> margin;
    certify->add_option("--margin", margin, "also synthesize time-scale factors with this margin");

    auto* sweep = app.add_subcommand("toy-sweep", "classify the toy example over a (kappa, k) grid");
    common(sweep, false);
    std::string kappa = "0.5:100", k = "0.05:10", grid = "200x200";
    bool boundary = false;
    sweep->add_option("--kappa", kappa, "kappa range lo:hi")->capture_default_str();
    sweep->add_option("--k", k, "k range lo:hi")->capture_default_str();
    sweep->add_option("--grid", grid, "grid resolution WxH")->capture_default_str();
    sweep->add_flag("--boundary", boundary, "bisect the Condition 1/2 boundaries for each k row");

    auto* power = app.add_subcommand("power", "power-system tools");
    std::string sub, scenario, method = "rosenbrock2", mode = "p";
    double t_end = 5.0, perturb = 0.0, rate = 1000.0;
    power->add_option("action", sub, "pf | certify | synth | sim")
        ->required()
        ->check(CLI::IsMember({"pf", "certify", "synth", "sim"}));
    common(power);
    power->add_option("--scenario", scenario, "scenario JSON (sim)");
    power->add_option("--t-end", t_end, "simulation horizon [s] (sim)")->capture_default_str();
    power->add_option("--method", method, "rosenbrock2 | dopri5 (sim)")->capture_default_str();
    power->add_option("--mode", mode, "p | pq (pf)")->capture_default_str()->check(CLI::IsMember({"p", "pq"}));
    power->add_option("--perturb", perturb, "relative random perturbation of the initial equilibrium (sim)");
    power->add_option("--rate", rate, "CSV sample rate [Hz] (sim)")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        if (*certify) return cmd_certify(o, margin);
        if (*sweep) return cmd_toy_sweep(o, kappa, k, grid, boundary);
        return cmd_power(o, sub, scenario, t_end, method, mode, perturb, rate);
    } catch (const InputError& e) {
        std::fprintf(stderr, "input error: %s\n", e.what());
        return 2;
    } catch (const nlohmann::json::exception& e) {
        std::fprintf(stderr, "input error: %s\n", e.what());
        return 2;
    } catch (const NotApplicable& e) {
        std::fprintf(stderr, "not applicable: %s\n", e.what());
        return 1;
    } catch (const NumericalError& e) {
        std::fprintf(stderr, "numerical failure at t=%s: %s\n", io::num(e.t_last).c_str(), e.what());
        return 3;
    }
}
