#pragma once

#include "nestcert/errors.hpp"
#include "nestcert/integrate.hpp"
#include "nestcert/io.hpp"
#include "nestcert/powernet.hpp"

#include <Eigen/Dense>
#include <json.hpp>

#include <cmath>
#include <limits>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

namespace nestcert::sim {

enum class Action { set_load, set_setpoints, enable_stage, perturb_state };

struct Event {
    double t = 0.0;
    Action action = Action::set_load;
    int node = 0;  ///< 0-based
    double conductance = 0.0;
    powernet::Stage stage = powernet::Stage::full;
    std::optional<Eigen::VectorXd> p, q, v;  ///< set-setpoints: any subset
    Eigen::VectorXd delta;                   ///< perturb-state
};

using Scenario = std::vector<Event>;

inline Scenario scenario_from_json(const nlohmann::json& j, int nodes, int state_size) {
    if (!j.is_array()) throw InputError("scenario must be a JSON array of events");
    Scenario sc;
    double last = -std::numeric_limits<double>::infinity();
    try {
        for (const auto& e : j) {
            Event ev;
            ev.t = e.at("t").get<double>();
            if (!std::isfinite(ev.t) || ev.t < last) throw InputError("event times must be finite and non-decreasing");
            last = ev.t;
            const auto a = e.at("action").get<std::string>();
            const auto& args = e.contains("args") ? e.at("args") : nlohmann::json::object();
            auto node = [&] {
                const int n = args.at("node").get<int>() - 1;
                if (n < 0 || n >= nodes) throw InputError("event node out of range");
                return n;
            };
            if (a == "set-load") {
                ev.action = Action::set_load;
                ev.node = node();
                ev.conductance = args.at("conductance").get<double>();
                if (!(ev.conductance >= 0)) throw InputError("load conductance must be non-negative");
            } else if (a == "set-setpoints") {
                ev.action = Action::set_setpoints;
                if (args.contains("p")) ev.p = powernet::detail::per_node(args.at("p"), nodes, "p");
                if (args.contains("q")) ev.q = powernet::detail::per_node(args.at("q"), nodes, "q");
                if (args.contains("v")) {
                    ev.v = powernet::detail::per_node(args.at("v"), nodes, "v");
                    if ((ev.v->array() <= 0).any()) throw InputError("voltage setpoints must be positive");
                }
            } else if (a == "enable-converter-stage") {
                ev.action = Action::enable_stage;
                ev.node = node();
                ev.stage = powernet::stage_from_string(args.at("stage").get<std::string>());
            } else if (a == "perturb-state") {
                ev.action = Action::perturb_state;
                ev.delta = args.at("delta").get<Eigen::VectorXd>();
                if (ev.delta.size() != state_size) throw InputError("perturbation has the wrong dimension");
            } else {
                throw InputError("unknown scenario action '" + a + "'");
            }
            sc.push_back(std::move(ev));
        }
    } catch (const nlohmann::json::exception& e) {
        throw InputError(std::string("scenario: ") + e.what());
    }
    return sc;
}

inline void apply_event(powernet::Model& m, Eigen::VectorXd& x, const Event& e) {
    switch (e.action) {
        case Action::set_load: m.load(e.node) = e.conductance; break;
        case Action::set_setpoints:
            if (e.p) m.sp.p = *e.p;
            if (e.q) m.sp.q = *e.q;
            if (e.v) m.sp.v = *e.v;
            break;
        case Action::enable_stage: m.stage[e.node] = e.stage; break;
        case Action::perturb_state: x += e.delta; break;
    }
    powernet::refresh(m);
}

inline IntegratorOptions power_defaults() {
    IntegratorOptions o;
    o.method = Method::rosenbrock2;
    o.tol = {1e-8, 1e-6};
    return o;
}

inline Trajectory integrate_model(const powernet::Model& m, const Eigen::VectorXd& x0, double t0, double t1,
                                  const IntegratorOptions& opt) {
    const Field f = [&m](double, const Eigen::VectorXd& x) { return powernet::closed_loop_field(m, x); };
    const JacobianFn jac = [&m](double, const Eigen::VectorXd& x) { return powernet::closed_loop_jacobian(m, x); };
    return integrate(f, x0, t0, t1, opt, jac);
}

/// Trajectory plus the model in force on each segment (segment s starts at starts[s]).
struct ScenarioRun {
    Trajectory tr;
    std::vector<double> starts;
    std::vector<powernet::Model> models;

    const powernet::Model& model_at(double t) const {
        std::size_t s = 0;
        while (s + 1 < starts.size() && starts[s + 1] <= t) ++s;
        return models[s];
    }
};

/// Integrates between events; the model and stage flags change at each event, the state carries over.
inline ScenarioRun run_scenario(powernet::Model m, const Scenario& sc, Eigen::VectorXd x, double t_end,
                                const IntegratorOptions& opt = power_defaults()) {
    ScenarioRun run;
    powernet::refresh(m);
    double t = 0.0;
    std::size_t next = 0;
    auto apply_due = [&] {
        while (next < sc.size() && sc[next].t <= t) apply_event(m, x, sc[next++]);
    };
    apply_due();
    for (;;) {
        const double t1 = next < sc.size() ? std::min(sc[next].t, t_end) : t_end;
        run.starts.push_back(t);
        run.models.push_back(m);
        Trajectory seg = integrate_model(m, x, t, t1, opt);
        x = seg.x.back();
        if (run.tr.t.empty())
            run.tr = std::move(seg);
        else
            run.tr.append(seg);
        t = t1;
        if (t >= t_end) break;
        apply_due();
        // derivative at the boundary changes with the model; record it from the new side
        run.tr.t.push_back(t);
        run.tr.x.push_back(x);
        run.tr.dx.push_back(powernet::closed_loop_field(m, x));
    }
    return run;
}

// ---------------------------------------------------------------- derived channels

/// Frequency in Hz from the unwrapped reference angle of node k; NaN where |vhat_k| < 1e-9.
inline std::vector<double> frequency_estimate(const std::vector<double>& t, const std::vector<Eigen::VectorXd>& x,
                                              int node, double omega0) {
    const std::size_t n = t.size();
    if (n < 3) throw InputError("frequency estimate needs at least three samples");
    std::vector<double> ang(n), f(n);
    std::vector<bool> ok(n);
    double prev = 0.0, offset = 0.0;
    bool have = false;
    for (std::size_t i = 0; i < n; ++i) {
        const double a = x[i](2 * node), b = x[i](2 * node + 1);
        ok[i] = std::hypot(a, b) >= 1e-9;
        if (!ok[i]) continue;
        const double raw = std::atan2(b, a);
        if (have) {
            double d = raw + offset - prev;
            while (d > std::numbers::pi) offset -= 2 * std::numbers::pi, d -= 2 * std::numbers::pi;
            while (d < -std::numbers::pi) offset += 2 * std::numbers::pi, d += 2 * std::numbers::pi;
        }
        ang[i] = prev = raw + offset;
        have = true;
    }
    const double nan = std::numeric_limits<double>::quiet_NaN();
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t lo = i == 0 ? 0 : i - 1, hi = i + 1 == n ? n - 1 : i + 1;
        if (!ok[i] || !ok[lo] || !ok[hi] || t[hi] <= t[lo]) {
            f[i] = nan;
            continue;
        }
        f[i] = (omega0 + (ang[hi] - ang[lo]) / (t[hi] - t[lo])) / (2 * std::numbers::pi);
    }
    return f;
}

/// Lyapunov bookkeeping for one model: certificate constants and the operating point they refer to.
struct NuContext {
    certkit::NestedConstants constants;
    powernet::OperatingSolution op;
    Eigen::MatrixXd PS;
};

/// Context for the load-free model at the model's own setpoints; empty when the gains cannot be certified there.
inline std::optional<NuContext> nu_context(const powernet::Model& m) {
    try {
        auto op = powernet::solve_power_flow(m.net, m.spec.lines, m.sp, powernet::PFMode::p_only);
        if (!op.converged || m.net.Nc < 2) return std::nullopt;
        const double c_L = m.gains.c_L ? *m.gains.c_L : powernet::default_c_L(m.net, op, m.gains.eta_a);
        auto c = powernet::power_constants(m.net, m.spec.converters, powernet::consistent_setpoints(op), m.gains, c_L, 4);
        c.require_applicable();
        return NuContext{c, op, powernet::sync_projector(op)};
    } catch (const std::exception&) {
        return std::nullopt;
    }
}

struct Sampled {
    std::vector<double> t;
    std::vector<Eigen::VectorXd> x;
};

/// Uniform resample of [t0, t1] at `rate` Hz (endpoints included).
inline Sampled resample(const Trajectory& tr, double rate) {
    Sampled s;
    const double t0 = tr.t.front(), t1 = tr.t.back();
    const auto n = static_cast<std::size_t>(std::floor((t1 - t0) * rate + 1e-9));
    for (std::size_t i = 0; i <= n; ++i) {
        const double t = t0 + static_cast<double>(i) / rate;
        s.t.push_back(t);
        s.x.push_back(interpolate(tr, t));
    }
    if (s.t.back() < t1) {
        s.t.push_back(t1);
        s.x.push_back(tr.x.back());
    }
    return s;
}

inline std::vector<std::string> state_channel_names(const powernet::Layout& L) {
    std::vector<std::string> out;
    auto block = [&](const char* name, int count) {
        for (int k = 1; k <= count; ++k)
            for (const char* ax : {"d", "q"}) out.push_back(std::string(name) + "_" + std::to_string(k) + "_" + ax);
    };
    block("vhat", L.Nc);
    block("it", L.Nt);
    block("v", L.Nc);
    block("zv", L.Nc);
    block("if", L.Nc);
    block("zf", L.Nc);
    return out;
}

/// Trajectory CSV on a uniform grid with power, voltage, frequency and Lyapunov channels.
inline std::string trajectory_csv(const ScenarioRun& run, double rate = 1000.0) {
    const auto& m0 = run.models.front();
    const auto& L = m0.lay;
    const Sampled s = resample(run.tr, rate);
    std::vector<std::vector<double>> freq;
    for (int k = 0; k < L.Nc; ++k) freq.push_back(frequency_estimate(s.t, s.x, k, m0.net.omega0));
    std::vector<std::optional<NuContext>> ctx;
    for (const auto& m : run.models) ctx.push_back(nu_context(m));

    std::string out = "t";
    for (const auto& n : state_channel_names(L)) out += "," + n;
    for (const char* ch : {"p", "q", "vmag", "f"})
        for (int k = 1; k <= L.Nc; ++k) out += std::string(",") + ch + "_" + std::to_string(k);
    out += ",nu,dist_S,dist_A\n";
    const double nan = std::numeric_limits<double>::quiet_NaN();
    for (std::size_t i = 0; i < s.t.size(); ++i) {
        std::size_t seg = 0;
        while (seg + 1 < run.starts.size() && run.starts[seg + 1] <= s.t[i]) ++seg;
        const auto& m = run.models[seg];
        const auto& x = s.x[i];
        out += io::num(s.t[i]);
        for (Eigen::Index j = 0; j < x.size(); ++j) out += "," + io::num(x(j));
        const auto [p, q] = powernet::node_powers(m, x);
        for (int k = 0; k < L.Nc; ++k) out += "," + io::num(p(k));
        for (int k = 0; k < L.Nc; ++k) out += "," + io::num(q(k));
        for (int k = 0; k < L.Nc; ++k) out += "," + io::num(x.segment<2>(L.v() + 2 * k).norm());
        for (int k = 0; k < L.Nc; ++k) out += "," + io::num(freq[k][i]);
        if (ctx[seg]) {
            const auto nu = powernet::lyapunov_nu(m, x, ctx[seg]->constants, ctx[seg]->op, ctx[seg]->PS);
            out += "," + io::num(nu.nu) + "," + io::num(nu.dist_S) + "," + io::num(nu.dist_A) + "\n";
        } else {
            out += "," + io::num(nan) + "," + io::num(nan) + "," + io::num(nan) + "\n";
        }
    }
    return out;
}

}  // namespace nestcert::sim
