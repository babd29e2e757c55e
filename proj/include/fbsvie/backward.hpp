#pragma once

// Backward solvers on the lattice.
//
//  * solve_bsde: Y_j = E_j[Y_{j+1}] + driver(t_j, Y_j, Z_j) dt with Z_j the one-step
//    representation integrand of Y_{j+1}; the implicit y-slot is an inner fixed point.
//  * solve_bsvie: C-adapted solution. Every row t_i is a BSDE in r over the whole grid,
//      lambda(t_i, r) = E_r[lambda(t_i, r+1)] + g(t_i, t_r, X_r, Y_r, Z(t_i, r), u_r) dt,
//    Y(t_i) = lambda(t_i, t_i), and the rows are coupled through Y by Picard iteration.
//  * solve_linear_bsvie: adapted M-solution of a linear equation whose rows couple to
//    later rows through Y(s) and through the below-diagonal part Z(s, t).

#include "fbsvie/forward.hpp"

#include <functional>
#include <sstream>

namespace fbsvie {

struct BsdeSolution {
    AdaptedProcess Y;  // levels 0..N
    AdaptedProcess Z;  // levels 0..N-1
};

using BsdeDriver = std::function<Vec(int j, std::size_t node, const Vec& y, const Vec& z)>;

inline BsdeSolution solve_bsde(const TimeGrid& G, const TerminalField& terminal, const BsdeDriver& driver,
                               double tol = 1e-14, int max_iter = 200) {
    const int N = G.steps();
    if (terminal.level() != N) throw std::invalid_argument("solve_bsde: terminal must live on the leaves");
    const int m = terminal.dim();
    BsdeSolution out{AdaptedProcess(N, m), AdaptedProcess(N, m)};
    out.Y.level(N) = terminal;
    for (int j = N - 1; j >= 0; --j) {
        const LevelField& next = out.Y.level(j + 1);
        out.Z.level(j) = step_integrand(G, next);
        for (std::size_t w = 0; w < TimeGrid::nodes(j); ++w) {
            const Vec mean = 0.5 * (next.at(2 * w) + next.at(2 * w + 1));
            const Vec z = out.Z.at(j, w);
            Vec y = mean;
            bool done = false;
            for (int it = 0; it < max_iter; ++it) {
                Vec y_new = mean + driver(j, w, y, z) * G.dt();
                const double diff = (y_new - y).lpNorm<Eigen::Infinity>();
                y = std::move(y_new);
                if (!y.allFinite()) break;
                if (diff <= tol * (1.0 + y.lpNorm<Eigen::Infinity>())) {
                    done = true;
                    break;
                }
            }
            if (!done) {
                std::ostringstream os;
                os << "solve_bsde: inner fixed point did not contract at level " << j << ", node " << w
                   << "; the driver's Lipschitz constant times dt is too large, use a larger N";
                throw SolverError(os.str());
            }
            out.Y.at(j, w) = y;
        }
    }
    return out;
}

struct BackwardPath {
    AdaptedProcess Y;        // Y(t_i) = lambda(t_i, t_i), levels 0..N
    TwoParamProcess Z;       // Z(t_i, s), rows 0..N, s levels 0..N-1
    TwoParamProcess lambda;  // lambda(t_i, r), rows 0..N, r levels 0..N
    std::vector<double> residuals;  // sup |Y_new - Y_prev| per Picard sweep
    bool monotone = true;           // residuals strictly decreasing after the first sweep
};

// Row driver of the BSVIE family: (row i, r, level-r node, Y(t_r), Z(t_i, t_r)).
using RowDriver = std::function<Vec(int i, int r, std::size_t node, const Vec& y, const Vec& z)>;
// Terminal of row i, lambda(t_i, T).
using RowTerminal = std::function<TerminalField(int i)>;

// One BSDE row on the full grid r = 0..N with Y frozen.
inline void solve_bsvie_row(const TimeGrid& G, int i, const TerminalField& terminal, const AdaptedProcess& Y,
                            const RowDriver& driver, AdaptedProcess& lambda, AdaptedProcess& Z) {
    const int N = G.steps();
    lambda.level(N) = terminal;
    for (int r = N - 1; r >= 0; --r) {
        const LevelField& next = lambda.level(r + 1);
        LevelField& zr = Z.level(r);
        zr = step_integrand(G, next);
        LevelField& cur = lambda.level(r);
        for (std::size_t w = 0; w < cur.size(); ++w)
            cur.at(w) = 0.5 * (next.at(2 * w) + next.at(2 * w + 1)) +
                        driver(i, r, w, Vec(Y.at(r, w)), Vec(zr.at(w))) * G.dt();
    }
}

inline BackwardPath solve_bsvie_general(const TimeGrid& G, int m, const RowTerminal& terminal, const RowDriver& driver,
                                        double picard_tol = 1e-12, int picard_max_iter = 200) {
    const int N = G.steps();
    BackwardPath out{AdaptedProcess(N, m), TwoParamProcess(N, m), TwoParamProcess(N, m), {}, true};
    std::vector<TerminalField> terminals;
    terminals.reserve(N + 1);
    for (int i = 0; i <= N; ++i) {
        terminals.push_back(terminal(i));
        if (terminals.back().level() != N || terminals.back().dim() != m)
            throw std::invalid_argument("solve_bsvie: row terminal has the wrong shape");
    }

    AdaptedProcess Y(N, m);  // zero seed
    auto sweep = [&](const AdaptedProcess& Yprev) {
        AdaptedProcess Ynew(N, m);
        for (int i = 0; i <= N; ++i) {
            solve_bsvie_row(G, i, terminals[i], Yprev, driver, out.lambda.row(i), out.Z.row(i));
            Ynew.level(i) = out.lambda.row(i).level(i);
        }
        return Ynew;
    };

    for (int it = 0; it < picard_max_iter; ++it) {
        AdaptedProcess Ynew = sweep(Y);
        double res = 0.0;
        for (int i = 0; i <= N; ++i)
            for (std::size_t k = 0; k < Ynew.level(i).raw().size(); ++k)
                res = std::max(res, std::abs(Ynew.level(i).raw()[k] - Y.level(i).raw()[k]));
        if (!std::isfinite(res)) throw SolverError("solve_bsvie: non-finite Picard iterate");
        if (out.residuals.size() >= 2 && !(res < out.residuals.back())) out.monotone = false;
        out.residuals.push_back(res);
        Y = std::move(Ynew);
        if (res < picard_tol) {
            // Rows stored from the converged Y so that a recomputation reproduces them.
            sweep(Y);
            out.Y = std::move(Y);
            return out;
        }
    }
    std::ostringstream os;
    os << "solve_bsvie: Picard iteration did not reach " << picard_tol << " in " << picard_max_iter
       << " sweeps; residual history:";
    for (double r : out.residuals) os << ' ' << r;
    throw SolverError(os.str());
}

// State BSVIE along a forward path.
inline BackwardPath solve_bsvie(const Scenario& s, const ForwardPath& fwd, const AdaptedProcess& u) {
    const TimeGrid& G = s.grid;
    const Model& M = *s.model;
    const int N = G.steps();
    const LevelField& XT = fwd.X.level(N);
    RowTerminal terminal = [&](int i) {
        TerminalField t(N, s.m());
        for (std::size_t w = 0; w < t.size(); ++w) t.at(w) = M.psi(G.t(i), Vec(XT.at(w)));
        return t;
    };
    RowDriver driver = [&](int i, int r, std::size_t w, const Vec& y, const Vec& z) {
        return M.g(G.t(i), G.t(r), Vec(fwd.X.at(r, w)), y, z, Vec(u.at(r, w)));
    };
    return solve_bsvie_general(G, s.m(), terminal, driver, s.tol.picard_tol, s.tol.picard_max_iter);
}

// Recompute one row from a given Y; used to check C-adapted consistency.
inline std::pair<AdaptedProcess, AdaptedProcess> recompute_row(const Scenario& s, const ForwardPath& fwd,
                                                               const AdaptedProcess& u, const AdaptedProcess& Y,
                                                               int i) {
    const TimeGrid& G = s.grid;
    const Model& M = *s.model;
    const int N = G.steps();
    TerminalField term(N, s.m());
    for (std::size_t w = 0; w < term.size(); ++w) term.at(w) = M.psi(G.t(i), Vec(fwd.X.level(N).at(w)));
    RowDriver driver = [&](int row, int r, std::size_t w, const Vec& y, const Vec& z) {
        return M.g(G.t(row), G.t(r), Vec(fwd.X.at(r, w)), y, z, Vec(u.at(r, w)));
    };
    AdaptedProcess lambda(N, s.m()), Z(N, s.m());
    solve_bsvie_row(G, i, term, Y, driver, lambda, Z);
    return {std::move(lambda), std::move(Z)};
}

// ---------------------------------------------------------------------------
// Linear BSVIE, adapted M-solution:
//   Y(t) = Psi(t) + sum_{s in S(t)} A(t,s) Y(s) dt + sum_{s>t} B(t,s) Z(s,t) dt
//          + sum_{s>=t} D(t,s) Z(t,s) dt - sum_{s>=t} Z(t,s) dW_s,
// S(t) = {s > t} or {s >= t} (diagonal_A). Z(t, s) for s < t comes from
// Y(t) = E Y(t) + sum_{s<t} Z(t,s) dW_s. Kernels are evaluated at a level-s node.

using KernelFn = std::function<Mat(int t, int s, std::size_t node)>;

struct LinearBsvieData {
    std::vector<TerminalField> free;  // Psi(t_i), i = 0..N-1
    KernelFn A, B, D;                 // empty function = zero kernel
    bool diagonal_A = false;
};

struct MSolution {
    AdaptedProcess p;   // levels 0..N-1 (level N left zero)
    TwoParamProcess q;  // q(t_i, s) for all s
};

inline MSolution solve_linear_bsvie(const TimeGrid& G, const LinearBsvieData& d) {
    const int N = G.steps();
    if (static_cast<int>(d.free.size()) != N) throw std::invalid_argument("solve_linear_bsvie: need N free terms");
    const int m = d.free.front().dim();
    MSolution out{AdaptedProcess(N, m), TwoParamProcess(N, m)};
    const Mat I = Mat::Identity(m, m);
    for (int t = N - 1; t >= 0; --t) {
        AdaptedProcess& zrow = out.q.row(t);
        LevelField lam = d.free[t];
        if (lam.level() != N || lam.dim() != m) throw std::invalid_argument("solve_linear_bsvie: free term shape");
        for (int r = N - 1; r >= t; --r) {
            LevelField z = step_integrand(G, lam);
            LevelField cur(r, m);
            for (std::size_t w = 0; w < cur.size(); ++w) {
                Vec rhs = 0.5 * (lam.at(2 * w) + lam.at(2 * w + 1));
                Vec drv = Vec::Zero(m);
                if (d.D) drv += d.D(t, r, w) * z.at(w);
                if (r > t) {
                    if (d.A) drv += d.A(t, r, w) * out.p.at(r, w);
                    if (d.B) drv += d.B(t, r, w) * out.q.row(r).along(t, w, r);
                }
                rhs += drv * G.dt();
                if (r == t && d.diagonal_A && d.A)
                    cur.at(w) = (I - d.A(t, t, w) * G.dt()).partialPivLu().solve(rhs);
                else
                    cur.at(w) = rhs;
            }
            zrow.level(r) = std::move(z);
            lam = std::move(cur);
        }
        out.p.level(t) = lam;
        // Below-diagonal part from the representation of Y(t) itself.
        if (t > 0) {
            MartingaleRep rep = martingale_repr(G, lam, 0);
            for (int j = 0; j < t; ++j) zrow.level(j) = rep.integrand.level(j);
        }
    }
    return out;
}

// Adjoint (p, q) equation: p(t_i) = E_i[free_i + sum_{j>i} (Kb(j,i) p(t_j) + Ks(j,i) q(t_j,t_i)) dt]
// with Kb, Ks already transposed and evaluated at level-i nodes.
inline MSolution solve_linear_bsvie_M(const TimeGrid& G, const std::vector<TerminalField>& free, const KernelFn& Kb,
                                      const KernelFn& Ks) {
    LinearBsvieData d;
    d.free = free;
    // Row i at sweep index r sees the level-r node w; the kernels live on level i.
    if (Kb) d.A = [&Kb](int i, int r, std::size_t w) { return Kb(r, i, w >> (r - i)); };
    if (Ks) d.B = [&Ks](int i, int r, std::size_t w) { return Ks(r, i, w >> (r - i)); };
    return solve_linear_bsvie(G, d);
}

// p(t_i) - E p(t_i) - sum_{j<i} q(t_i,t_j) dW_j at every node, maximum absolute value.
inline double m_identity_residual(const TimeGrid& G, const MSolution& sol, int last_row) {
    double worst = 0.0;
    for (int i = 0; i <= last_row; ++i) {
        const LevelField& p = sol.p.level(i);
        const Vec mean = p.mean_vec();
        for (std::size_t w = 0; w < p.size(); ++w) {
            Vec acc = mean;
            for (int j = 0; j < i; ++j) acc += sol.q.row(i).along(j, w, i) * G.dw(j, w, i);
            worst = std::max(worst, (acc - p.at(w)).lpNorm<Eigen::Infinity>());
        }
    }
    return worst;
}

} // namespace fbsvie
