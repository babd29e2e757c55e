#pragma once

// Full pipeline (state, adjoint, Hamiltonian gradient), cost functional, first-order
// variational system, its convergence test and the Gateaux-derivative comparison.

#include "fbsvie/adjoint.hpp"
#include "fbsvie/cones.hpp"

#include <random>

namespace fbsvie {

// Cost J(u) = E sum_{s<N} f(s, X_s, Y_s, Z(0,s), u_s) dt + E h(X_T, Y(0)).
inline double cost_value(const Scenario& s, const ForwardPath& fwd, const BackwardPath& bwd, const AdaptedProcess& u) {
    const TimeGrid& G = s.grid;
    const Model& M = *s.model;
    const int N = G.steps();
    double J = 0.0;
    for (int i = 0; i < N; ++i) {
        double acc = 0.0;
        for (std::size_t w = 0; w < TimeGrid::nodes(i); ++w)
            acc += M.f(G.t(i), Vec(fwd.X.at(i, w)), Vec(bwd.Y.at(i, w)), Vec(bwd.Z.at(0, i, w)), Vec(u.at(i, w)));
        J += acc / static_cast<double>(TimeGrid::nodes(i)) * G.dt();
    }
    const Vec y0 = bwd.Y.at(0, 0);
    double term = 0.0;
    for (std::size_t leaf = 0; leaf < G.leaves(); ++leaf) term += M.h(Vec(fwd.X.at(N, leaf)), y0);
    return J + term / static_cast<double>(G.leaves());
}

struct StateRun {
    ForwardPath fwd;
    BackwardPath bwd;
    double J = 0.0;
};

inline StateRun run_state(const Scenario& s, const AdaptedProcess& u) {
    StateRun r{simulate_forward(s, u), {}, 0.0};
    r.bwd = solve_bsvie(s, r.fwd, u);
    r.J = cost_value(s, r.fwd, r.bwd, u);
    return r;
}

struct PipelineRun {
    StateRun state;
    AdjointBundle adj;
    AdaptedProcess Hu;  // levels 0..N-1
};

inline PipelineRun run_pipeline(const Scenario& s, const AdaptedProcess& u, bool exact_transpose = true) {
    PipelineRun p{run_state(s, u), {}, {}};
    p.adj = assemble_adjoint(s, p.state.fwd, p.state.bwd, u, exact_transpose);
    p.Hu = hamiltonian_gradient(s, p.adj, p.state.fwd, p.state.bwd, u);
    return p;
}

// E sum_{s<N} <a_s, b_s> dt.
inline double control_dot(const TimeGrid& G, const AdaptedProcess& a, const AdaptedProcess& b) {
    double acc = 0.0;
    for (int i = 0; i < G.steps(); ++i) acc += expect_dot(a.level(i), b.level(i)) * G.dt();
    return acc;
}

inline AdaptedProcess random_adapted(const TimeGrid& G, int dim, std::mt19937_64& rng, double scale = 1.0) {
    std::normal_distribution<double> nd(0.0, scale);
    AdaptedProcess v(G.steps(), dim);
    for (int i = 0; i < G.steps(); ++i)
        for (double& x : v.level(i).raw()) x = nd(rng);
    return v;
}

// ---------------------------------------------------------------------------
// First-order variational system along (X, Y, Z, u):
//   X1(t) = sum_{s<t} [b_x X1 + b_u v] dt + [sigma_x X1 + sigma_u v] dW_s,
//   Y1(t) = psi_x(t) X1(T) + sum_{r>=t} [g_x X1 + g_y Y1 + g_z Z1(t,r) + g_u v] dt - sum Z1 dW,
// with coefficients frozen along the base state; the backward part is C-adapted.

struct VariationalSolution {
    AdaptedProcess X1;
    AdaptedProcess Y1;
    TwoParamProcess Z1;
};

inline VariationalSolution solve_variational(const Scenario& s, const StateRun& base, const AdaptedProcess& u,
                                             const AdaptedProcess& v) {
    check_control_shape(s, v, "solve_variational");
    const TimeGrid& G = s.grid;
    const int N = G.steps(), m = s.m();
    VariationalSolution out;
    out.X1 = simulate_forward_linear(s, base.fwd, v);
    FrozenCoefficients C(s, base.fwd, base.bwd, u);
    const AdaptedProcess& X1 = out.X1;
    RowTerminal terminal = [&](int i) {
        TerminalField t(N, m);
        for (std::size_t leaf = 0; leaf < t.size(); ++leaf) t.at(leaf) = C.psi_x(i, leaf) * X1.at(N, leaf);
        return t;
    };
    RowDriver driver = [&](int i, int r, std::size_t w, const Vec& y, const Vec& z) -> Vec {
        return C.g_x(i, r, w) * X1.at(r, w) + C.g_y(i, r, w) * y + C.g_z(i, r, w) * z + C.g_u(i, r, w) * v.at(r, w);
    };
    BackwardPath bp = solve_bsvie_general(G, m, terminal, driver, s.tol.picard_tol, s.tol.picard_max_iter);
    out.Y1 = std::move(bp.Y);
    out.Z1 = std::move(bp.Z);
    return out;
}

inline VariationalSolution solve_variational(const Scenario& s, const AdaptedProcess& u, const AdaptedProcess& v) {
    return solve_variational(s, run_state(s, u), u, v);
}

// Feasible perturbation u^eps = (near-)nearest point of U to u + eps v, node by node,
// i.e. u + eps v_eps with v_eps -> v for v in the adjacent cone.
inline AdaptedProcess feasible_perturbation(const Scenario& s, const AdaptedProcess& u, const AdaptedProcess& v,
                                            double eps) {
    AdaptedProcess out = u;
    for (int i = 0; i < s.steps(); ++i)
        for (std::size_t w = 0; w < TimeGrid::nodes(i); ++w) {
            const Vec target = Vec(u.at(i, w)) + eps * Vec(v.at(i, w));
            const Vec y = nearest_point(s.constraint, target).y;
            if (!contains(s.constraint, y, s.tol.activity_tol)) {
                std::ostringstream os;
                os << "feasible_perturbation: projected control violates U at level " << i << ", node " << w;
                throw SolverError(os.str());
            }
            out.at(i, w) = y;
        }
    return out;
}

// Least-squares slope of log(err) against log(eps), ignoring zero errors.
inline double loglog_slope(const std::vector<double>& eps, const std::vector<double>& err) {
    std::vector<double> x, y;
    for (std::size_t k = 0; k < eps.size(); ++k)
        if (err[k] > 0.0) {
            x.push_back(std::log(eps[k]));
            y.push_back(std::log(err[k]));
        }
    if (x.size() < 2) return std::numeric_limits<double>::quiet_NaN();
    double mx = 0, my = 0;
    for (std::size_t k = 0; k < x.size(); ++k) {
        mx += x[k];
        my += y[k];
    }
    mx /= static_cast<double>(x.size());
    my /= static_cast<double>(x.size());
    double sxy = 0, sxx = 0;
    for (std::size_t k = 0; k < x.size(); ++k) {
        sxy += (x[k] - mx) * (y[k] - my);
        sxx += (x[k] - mx) * (x[k] - mx);
    }
    return sxy / sxx;
}

struct ConvergenceReport {
    std::vector<double> eps;
    std::vector<double> err_x;   // max_t E|X1^eps - X1|^2
    std::vector<double> err_yz;  // max_t (E|Y1^eps - Y1|^2 + E sum_{s>=t} |Z1^eps - Z1|^2 dt)
    bool monotone = true;        // both sequences non-increasing
    double order_x = 0.0, order_yz = 0.0;
};

inline ConvergenceReport convergence_test(const Scenario& s, const AdaptedProcess& u, const AdaptedProcess& v,
                                          const std::vector<double>& eps_seq) {
    check_feasible(s, u);
    const TimeGrid& G = s.grid;
    const int N = G.steps();
    const StateRun base = run_state(s, u);
    const VariationalSolution lin = solve_variational(s, base, u, v);
    ConvergenceReport rep;
    for (double eps : eps_seq) {
        const AdaptedProcess ue = feasible_perturbation(s, u, v, eps);
        const StateRun pert = run_state(s, ue);
        double ex = 0.0, eyz = 0.0;
        for (int i = 0; i <= N; ++i) {
            LevelField d = pert.fwd.X.level(i);
            d -= base.fwd.X.level(i);
            d *= 1.0 / eps;
            d -= lin.X1.level(i);
            ex = std::max(ex, expect_dot(d, d));

            LevelField dy = pert.bwd.Y.level(i);
            dy -= base.bwd.Y.level(i);
            dy *= 1.0 / eps;
            dy -= lin.Y1.level(i);
            double e = expect_dot(dy, dy);
            for (int r = i; r < N; ++r) {
                LevelField dz = pert.bwd.Z.row(i).level(r);
                dz -= base.bwd.Z.row(i).level(r);
                dz *= 1.0 / eps;
                dz -= lin.Z1.row(i).level(r);
                e += expect_dot(dz, dz) * G.dt();
            }
            eyz = std::max(eyz, e);
        }
        if (!rep.err_x.empty() && (ex > rep.err_x.back() || eyz > rep.err_yz.back())) rep.monotone = false;
        rep.eps.push_back(eps);
        rep.err_x.push_back(ex);
        rep.err_yz.push_back(eyz);
    }
    rep.order_x = loglog_slope(rep.eps, rep.err_x);
    rep.order_yz = loglog_slope(rep.eps, rep.err_yz);
    return rep;
}

inline std::vector<double> dyadic_eps(int first, int last) {
    std::vector<double> e;
    for (int k = first; k <= last; ++k) e.push_back(std::ldexp(1.0, -k));
    return e;
}

// ---------------------------------------------------------------------------
// Difference quotients of J against E sum <H_u, v> dt.
//
// q(eps) = (J(u^eps) - J(u)) / eps carries an O(eps) curvature term; the extrapolated
// quotient 2 q(eps/2) - q(eps) removes it, which is exact when J is quadratic along v.

struct GateauxReport {
    double directional = 0.0;          // E sum <H_u, v> dt
    std::vector<double> eps;
    std::vector<double> quotient;      // q(eps)
    std::vector<double> extrapolated;  // 2 q(eps/2) - q(eps)
    std::vector<double> gap;           // |extrapolated - directional|
};

inline GateauxReport gateaux_vs_hamiltonian(const Scenario& s, const AdaptedProcess& u, const AdaptedProcess& v,
                                            const std::vector<double>& eps_seq, const PipelineRun* precomputed = nullptr) {
    std::optional<PipelineRun> own;
    if (!precomputed) own = run_pipeline(s, u);
    const PipelineRun& p = precomputed ? *precomputed : *own;
    GateauxReport rep;
    rep.directional = control_dot(s.grid, p.Hu, v);
    auto quotient = [&](double eps) {
        return (run_state(s, feasible_perturbation(s, u, v, eps)).J - p.state.J) / eps;
    };
    for (double eps : eps_seq) {
        const double q = quotient(eps), qh = quotient(0.5 * eps);
        rep.eps.push_back(eps);
        rep.quotient.push_back(q);
        rep.extrapolated.push_back(2.0 * qh - q);
        rep.gap.push_back(std::abs(rep.extrapolated.back() - rep.directional));
    }
    return rep;
}

} // namespace fbsvie
