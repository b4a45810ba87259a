#pragma once

#include "nestcert/errors.hpp"
#include "nestcert/linalg.hpp"

#include <Eigen/Dense>
#include <json.hpp>

#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

namespace nestcert::certkit {

/// One coupling coefficient b_{i,j,k}; indices are 1-based scale numbers.
struct BEntry {
    int i = 0, j = 0, k = 0;
    double value = 0.0;
    bool operator==(const BEntry&) const = default;
};

/**
 * @brief Constants of an N-scale nested system.
 *
 * alpha[i-1] is alpha_i, beta_fwd[i-1] is beta_{i,i+1}. The backward couplings
 * beta_{i,j} (j < i) and gamma_i are derived from the b entries.
 */
struct NestedConstants {
    int N = 0;
    std::vector<double> alpha;
    std::vector<double> alpha_prime;
    std::vector<BEntry> b;
    std::vector<double> beta_fwd;

    bool operator==(const NestedConstants&) const = default;

    double b_at(int i, int j, int k) const {
        for (const auto& e : b)
            if (e.i == i && e.j == j && e.k == k) return e.value;
        return 0.0;
    }

    /// beta_{i,j}: summed b entries for j < i, gamma_i for j == i, beta_fwd for j == i + 1.
    double beta(int i, int j) const {
        if (j == i + 1) return beta_fwd.at(i - 1);
        double s = 0.0;
        for (const auto& e : b)
            if (e.i == i && e.j == j) s += e.value;
        return s;
    }

    double gamma(int i) const { return b_at(i, i, i - 1); }

    /// (beta_{i,1}/2, ..., beta_{i,i-2}/2, beta_{i,i-1})
    Eigen::VectorXd bold_beta(int i) const {
        Eigen::VectorXd v(i - 1);
        for (int j = 1; j <= i - 1; ++j) v(j - 1) = (j == i - 1 ? 1.0 : 0.5) * beta(i, j);
        return v;
    }

    /// Structural checks only; throws InputError.
    void validate_structure() const {
        if (N < 1) throw InputError("N must be >= 1");
        if (static_cast<int>(alpha.size()) != N) throw InputError("alpha must have N entries");
        if (static_cast<int>(alpha_prime.size()) != N) throw InputError("alpha_prime must have N entries");
        if (static_cast<int>(beta_fwd.size()) != N - 1) throw InputError("beta_fwd must have N-1 entries");
        for (std::size_t a = 0; a < b.size(); ++a) {
            const auto& e = b[a];
            if (e.i < 2 || e.i > N || e.j < 1 || e.j > e.i || e.k < std::max(1, e.j - 1) || e.k > e.i - 1)
                throw InputError("b entry (" + std::to_string(e.i) + "," + std::to_string(e.j) + "," +
                                 std::to_string(e.k) + ") out of range");
            if (!std::isfinite(e.value)) throw InputError("b entry is not finite");
            for (std::size_t c = a + 1; c < b.size(); ++c)
                if (b[c].i == e.i && b[c].j == e.j && b[c].k == e.k) throw InputError("duplicate b entry");
        }
        for (double x : alpha)
            if (!std::isfinite(x)) throw InputError("alpha is not finite");
        for (double x : alpha_prime)
            if (!std::isfinite(x)) throw InputError("alpha_prime is not finite");
        for (double x : beta_fwd)
            if (!std::isfinite(x)) throw InputError("beta_fwd is not finite");
    }

    /// Domain of the theory: positive rates and couplings. Empty when applicable.
    std::optional<std::string> applicability_issue() const {
        for (int i = 1; i <= N; ++i) {
            if (!(alpha[i - 1] > 0)) return "alpha_" + std::to_string(i) + " must be positive";
            if (!(alpha_prime[i - 1] >= 0)) return "alpha'_" + std::to_string(i) + " must be non-negative";
            if (i < N && !(beta_fwd[i - 1] > 0))
                return "beta_{" + std::to_string(i) + "," + std::to_string(i + 1) + "} must be positive";
            for (int j = 1; j < i; ++j)
                if (!(beta(i, j) > 0))
                    return "beta_{" + std::to_string(i) + "," + std::to_string(j) + "} must be positive";
        }
        return std::nullopt;
    }

    void require_applicable() const {
        validate_structure();
        if (auto issue = applicability_issue()) throw NotApplicable(*issue);
    }
};

inline void to_json(nlohmann::json& j, const BEntry& e) {
    j = {{"i", e.i}, {"j", e.j}, {"k", e.k}, {"value", e.value}};
}

inline void from_json(const nlohmann::json& j, BEntry& e) {
    e.i = j.at("i").get<int>();
    e.j = j.at("j").get<int>();
    e.k = j.at("k").get<int>();
    e.value = j.at("value").get<double>();
}

inline void to_json(nlohmann::json& j, const NestedConstants& c) {
    j = {{"N", c.N}, {"alpha", c.alpha}, {"alpha_prime", c.alpha_prime}, {"b", c.b}, {"beta_fwd", c.beta_fwd}};
}

inline void from_json(const nlohmann::json& j, NestedConstants& c) {
    try {
        c.N = j.at("N").get<int>();
        c.alpha = j.at("alpha").get<std::vector<double>>();
        c.alpha_prime = j.contains("alpha_prime") ? j.at("alpha_prime").get<std::vector<double>>()
                                                  : std::vector<double>(c.alpha.size(), 0.0);
        c.b = j.at("b").get<std::vector<BEntry>>();
        c.beta_fwd = j.at("beta_fwd").get<std::vector<double>>();
    } catch (const nlohmann::json::exception& e) {
        throw InputError(std::string("constants: ") + e.what());
    }
    c.validate_structure();
}

inline Eigen::VectorXd compute_mu(const NestedConstants& c) {
    Eigen::VectorXd mu(c.N);
    mu(0) = 1.0;
    for (int i = 2; i <= c.N; ++i) {
        const double den = c.beta(i, i - 1);
        if (!(den > 0))
            throw NotApplicable("beta_{" + std::to_string(i) + "," + std::to_string(i - 1) + "} must be positive");
        mu(i - 1) = mu(i - 2) * c.beta_fwd[i - 2] / den;
    }
    return mu;
}

/// Symmetric coupling matrix M_N built by the nested recursion.
inline Eigen::MatrixXd build_M(const NestedConstants& c, const Eigen::VectorXd& mu) {
    Eigen::MatrixXd M = Eigen::MatrixXd::Zero(c.N, c.N);
    M(0, 0) = c.alpha[0];
    for (int i = 2; i <= c.N; ++i) {
        const Eigen::VectorXd col = -mu(i - 1) * c.bold_beta(i);
        M.block(0, i - 1, i - 1, 1) = col;
        M.block(i - 1, 0, 1, i - 1) = col.transpose();
        M(i - 1, i - 1) = (c.alpha[i - 1] - c.gamma(i)) * mu(i - 1);
    }
    return M;
}

inline Eigen::MatrixXd build_M(const NestedConstants& c) { return build_M(c, compute_mu(c)); }

struct Condition1Result {
    bool pass = false;
    std::vector<double> slack;  ///< slack[i-2] for scale i = 2..N
    std::vector<double> scale;  ///< magnitude used for the strictness test
    int singular_at = 0;        ///< scale whose leading block could not be factored, 0 if none
};

/// slack_i = alpha_i - gamma_i - mu_i * bbeta_i^T M_{i-1}^{-1} bbeta_i, each strictly positive.
inline Condition1Result check_condition1(const NestedConstants& c) {
    c.require_applicable();
    const Eigen::VectorXd mu = compute_mu(c);
    const Eigen::MatrixXd M = build_M(c, mu);
    Condition1Result r;
    r.pass = c.alpha[0] > 0;
    for (int i = 2; i <= c.N; ++i) {
        const Eigen::MatrixXd lead = M.topLeftCorner(i - 1, i - 1);
        const Eigen::VectorXd bb = c.bold_beta(i);
        Eigen::LDLT<Eigen::MatrixXd> ldlt(lead);
        double quad = std::numeric_limits<double>::quiet_NaN();
        if (ldlt.info() == Eigen::Success && ldlt.rcond() > 1e-15) {
            quad = mu(i - 1) * bb.dot(ldlt.solve(bb));
        } else if (r.singular_at == 0) {
            r.singular_at = i;
        }
        const double s = c.alpha[i - 1] - c.gamma(i) - quad;
        const double sc = std::abs(c.alpha[i - 1]) + std::abs(c.gamma(i)) + std::abs(quad);
        r.slack.push_back(s);
        r.scale.push_back(sc);
        if (!(s > 1e-12 * sc)) r.pass = false;
    }
    return r;
}

struct Condition2Step {
    bool pass = false;
    double slack = 0.0;   ///< lhs - rhs
    double scale = 0.0;
    double margin = 0.0;  ///< c_i, meaningful only when pass
    double discriminant = 0.0;
};

/**
 * @brief One step of the margin recursion.
 *
 * Tests alpha b_back c_prev > b_fwd_prev |bbeta|^2 + gamma b_back c_prev and
 * returns the smaller root c_i of (r - c)(alpha - gamma - c) = |bbeta|^2 with
 * r = b_back c_prev / b_fwd_prev.
 */
inline Condition2Step condition2_step(double alpha, double gamma, double b_fwd_prev, const Eigen::VectorXd& bbeta,
                                      double b_back, double c_prev) {
    Condition2Step s;
    const double bb = bbeta.squaredNorm();
    const double lhs = alpha * b_back * c_prev;
    const double rhs1 = b_fwd_prev * bb, rhs2 = gamma * b_back * c_prev;
    s.slack = lhs - rhs1 - rhs2;
    s.scale = std::abs(lhs) + std::abs(rhs1) + std::abs(rhs2);
    s.pass = c_prev > 0 && s.slack > 1e-12 * s.scale;
    const double d = alpha - gamma;
    const double r = b_back / b_fwd_prev * c_prev;
    const double sum = d + r;
    s.discriminant = sum * sum + 4.0 * (bb - d * r);
    const double disc_stable = (d - r) * (d - r) + 4.0 * bb;
    if (s.discriminant < -1e-12 * (sum * sum + 4.0 * bb))
        throw NumericalError("negative discriminant in margin recursion");
    const double q = d * r - bb;
    const double root = std::sqrt(disc_stable);
    s.margin = sum > 0 ? 2.0 * q / (sum + root) : 0.5 * (sum - root);
    return s;
}

struct Condition2Result {
    bool pass = false;
    std::vector<double> margins;  ///< c_1 .. c_m for the scales that passed
    std::vector<double> slack;    ///< slack[i-2] for scale i up to the first failure
    int failed_at = 0;
};

inline Condition2Result check_condition2(const NestedConstants& c) {
    c.require_applicable();
    Condition2Result r;
    r.margins.push_back(c.alpha[0]);
    r.pass = true;
    for (int i = 2; i <= c.N; ++i) {
        const auto st = condition2_step(c.alpha[i - 1], c.gamma(i), c.beta(i - 1, i), c.bold_beta(i), c.beta(i, i - 1),
                                        r.margins.back());
        r.slack.push_back(st.slack);
        if (!st.pass) {
            r.pass = false;
            r.failed_at = i;
            break;
        }
        r.margins.push_back(st.margin);
    }
    return r;
}

struct EigenOracle {
    bool pd = false;
    double lambda_min = 0.0;
    double norm = 0.0;
};

/// Positive definite means lambda_min > 1e-10 * ||M||_2.
inline EigenOracle pd_oracle(const Eigen::MatrixXd& M) {
    if (M.rows() != M.cols() || M.rows() == 0) throw InputError("oracle needs a non-empty square matrix");
    if ((M - M.transpose()).cwiseAbs().maxCoeff() > 1e-12 * std::max(1.0, M.cwiseAbs().maxCoeff()))
        throw InputError("oracle input is not symmetric");
    const Eigen::VectorXd ev = linalg::jacobi_eigenvalues(M);
    EigenOracle o;
    o.lambda_min = ev(0);
    o.norm = std::max(std::abs(ev(0)), std::abs(ev(ev.size() - 1)));
    o.pd = o.lambda_min > 1e-10 * o.norm;
    return o;
}

struct Proposition1Result {
    bool pass = false;
    std::vector<double> lambda_min;  ///< lambda_min(M_i - mu_i c_i I), i = 1..N
    std::vector<double> norm;        ///< ||M_i||
};

/// M_i >= mu_i c_i I for every leading block, given Condition 2 margins.
inline Proposition1Result verify_proposition1(const NestedConstants& c) {
    const auto c2 = check_condition2(c);
    if (!c2.pass) throw NotApplicable("margin recursion failed at scale " + std::to_string(c2.failed_at));
    const Eigen::VectorXd mu = compute_mu(c);
    const Eigen::MatrixXd M = build_M(c, mu);
    Proposition1Result r;
    r.pass = true;
    for (int i = 1; i <= c.N; ++i) {
        const Eigen::MatrixXd Mi = M.topLeftCorner(i, i);
        const double nrm = linalg::jacobi_eigenvalues(Mi).cwiseAbs().maxCoeff();
        const Eigen::MatrixXd shifted = Mi - mu(i - 1) * c2.margins[i - 1] * Eigen::MatrixXd::Identity(i, i);
        const double lm = linalg::jacobi_eigenvalues(shifted)(0);
        r.lambda_min.push_back(lm);
        r.norm.push_back(nrm);
        if (lm < -1e-10 * nrm) r.pass = false;
    }
    return r;
}

/// Constants of the time-scaled system eps_i dx_i/dt = f_i.
inline NestedConstants scale_constants(const NestedConstants& c, const std::vector<double>& eps) {
    NestedConstants s = c;
    for (int i = 1; i <= c.N; ++i) {
        s.alpha[i - 1] /= eps[i - 1];
        s.alpha_prime[i - 1] /= eps[i - 1];
        if (i < c.N) s.beta_fwd[i - 1] /= eps[i - 1];
    }
    for (auto& e : s.b) e.value /= eps[e.k - 1];
    return s;
}

struct EpsilonResult {
    std::vector<double> eps;
    NestedConstants scaled;
    Eigen::MatrixXd H;
};

/**
 * @brief Time-scale factors that certify the scaled system.
 *
 * eps_1 = 1; each eps_i starts at eps_{i-1}/2 and is halved until
 * gamma^e_i + mu^e_i bbeta^e' H_{i-1}^{-1} bbeta^e < (1 - margin) alpha_i / eps_i.
 */
inline EpsilonResult synthesize_epsilons(const NestedConstants& c, double margin, int max_halvings = 200) {
    c.require_applicable();
    if (!(margin >= 0.0 && margin < 1.0)) throw InputError("margin must lie in [0, 1)");
    std::vector<double> eps(c.N, 1.0);
    for (int i = 2; i <= c.N; ++i) {
        eps[i - 1] = 0.5 * eps[i - 2];
        const NestedConstants sc = scale_constants(c, eps);
        const Eigen::VectorXd mu = compute_mu(sc);
        const Eigen::MatrixXd H = build_M(sc, mu);
        Eigen::LDLT<Eigen::MatrixXd> ldlt(H.topLeftCorner(i - 1, i - 1));
        if (ldlt.info() != Eigen::Success || !ldlt.isPositive())
            throw NumericalError("scaled leading block lost definiteness at scale " + std::to_string(i - 1));
        const Eigen::VectorXd bb = sc.bold_beta(i);
        // Independent of eps_i: depends on eps_1 .. eps_{i-1} only.
        const double lhs = sc.gamma(i) + mu(i - 1) * bb.dot(ldlt.solve(bb));
        int steps = 0;
        auto ok = [&] {
            const double rhs = (1.0 - margin) * c.alpha[i - 1] / eps[i - 1];
            return rhs - lhs > 1e-12 * (std::abs(rhs) + std::abs(lhs));
        };
        while (!ok()) {
            if (++steps > max_halvings) throw NumericalError("time-scale synthesis did not converge");
            eps[i - 1] *= 0.5;
        }
    }
    EpsilonResult r;
    r.eps = eps;
    r.scaled = scale_constants(c, eps);
    r.H = build_M(r.scaled);
    return r;
}

struct CertificateReport {
    std::string verdict;  ///< certified-sufficient | certified-necessary-sufficient | not-certified | not-applicable
    bool condition1_pass = false;
    std::vector<double> condition1_slack;
    bool condition2_pass = false;
    std::vector<double> margins;
    double eigen_min = std::numeric_limits<double>::quiet_NaN();
    bool oracle_pd = false;
    bool consistent = true;  ///< Condition 1 agrees with the eigen oracle and Condition 2 implies Condition 1
    std::vector<double> mu;
    std::string note;
};

inline CertificateReport certify(const NestedConstants& c) {
    CertificateReport rep;
    c.validate_structure();
    if (auto issue = c.applicability_issue()) {
        rep.verdict = "not-applicable";
        rep.note = *issue;
        return rep;
    }
    const Eigen::VectorXd mu = compute_mu(c);
    rep.mu.assign(mu.data(), mu.data() + mu.size());
    const auto c1 = check_condition1(c);
    const auto c2 = check_condition2(c);
    const auto orc = pd_oracle(build_M(c, mu));
    rep.condition1_pass = c1.pass;
    rep.condition1_slack = c1.slack;
    rep.condition2_pass = c2.pass;
    rep.margins = c2.margins;
    rep.eigen_min = orc.lambda_min;
    rep.oracle_pd = orc.pd;
    const bool near_boundary = std::abs(orc.lambda_min) <= 1e-10 * orc.norm;
    if (c1.pass != orc.pd && !near_boundary) {
        rep.consistent = false;
        rep.note = "Condition 1 disagrees with the eigenvalue oracle";
    }
    if (c2.pass && !c1.pass) {
        rep.consistent = false;
        rep.note = "margin recursion passed but Condition 1 failed";
    }
    if (c1.singular_at) rep.note += (rep.note.empty() ? "" : "; ") + std::string("leading block singular at scale ") +
                                    std::to_string(c1.singular_at);
    rep.verdict = c2.pass ? "certified-sufficient" : c1.pass ? "certified-necessary-sufficient" : "not-certified";
    return rep;
}

inline void to_json(nlohmann::json& j, const CertificateReport& r) {
    j = {{"verdict", r.verdict},
         {"condition1_pass", r.condition1_pass},
         {"condition1_slack", r.condition1_slack},
         {"condition2_pass", r.condition2_pass},
         {"margins", r.margins},
         {"eigen_min", std::isfinite(r.eigen_min) ? nlohmann::json(r.eigen_min) : nlohmann::json(nullptr)},
         {"oracle_pd", r.oracle_pd},
         {"consistent", r.consistent},
         {"mu", r.mu},
         {"note", r.note}};
}

}  // namespace nestcert::certkit
