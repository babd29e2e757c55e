#pragma once

// Stochastic Fredholm-Volterra equation and the first-order adjoint system.
//
// Fredholm-Volterra equation for the F_T-measurable family xi(t_i), i = 0..N:
//   xi_i = alpha_i + sum_{j in S(i)} A(j,i)' E_i[xi_j] dt
//        + sum_{j<i} (beta(i,j) + E_j[B(j,i)' xi_j]) dW_j
//        + sum_{j>=i} (beta(i,j) + D(i,j)' E_j[xi_i]) dW_j
// with S(i) = {j < i}, or {j <= i, j < N} when include_diagonal is set. The ascending
// sweep forms f_i from xi_0..xi_{i-1} and then runs the forward recursion in r.
//
// Sum conventions used by the adjoint assembly. The state BSVIE row t_i sums its
// driver over r = i..N-1, diagonal included. With exact_transpose the adjoint sums
// over s <= t (xi's A-sum, the g_x term of the p free term, the g_u term of H_u)
// include the diagonal so that the discrete adjoint is the exact transpose of the
// discrete state equation. Without it they are strict, s < t.

#include "fbsvie/backward.hpp"

namespace fbsvie {

struct FredholmData {
    KernelFn A, B, D;     // evaluated at a node of the level of their second index
    AdaptedProcess alpha; // m-dim, levels 0..N
    TwoParamProcess beta; // rows 0..N; empty = zero
    bool include_diagonal = false;
};

inline std::vector<TerminalField> solve_fredholm_xi(const TimeGrid& G, const FredholmData& d) {
    const int N = G.steps();
    const int m = d.alpha.dim();
    const bool has_beta = d.beta.steps() == N;
    const Mat I = Mat::Identity(m, m);
    std::vector<TerminalField> xi;
    xi.reserve(N + 1);
    for (int i = 0; i <= N; ++i) {
        LevelField f = d.alpha.level(i);
        for (int j = 0; j < i; ++j) {
            if (d.A) {
                LevelField Exj = cond_expect(xi[j], i);
                for (std::size_t w = 0; w < f.size(); ++w) f.at(w) += d.A(j, i, w).transpose() * Exj.at(w) * G.dt();
            }
            LevelField integrand(j, m);
            if (has_beta) integrand = d.beta.row(i).level(j);
            if (d.B) {
                TerminalField prod(N, m);
                const int shift = N - i;
                for (std::size_t leaf = 0; leaf < prod.size(); ++leaf)
                    prod.at(leaf) = d.B(j, i, leaf >> shift).transpose() * xi[j].at(leaf);
                integrand += cond_expect(prod, j);
            }
            for (std::size_t w = 0; w < f.size(); ++w) f.at(w) += integrand.at(w >> (i - j)) * G.dw(j, w, i);
        }
        if (d.include_diagonal && d.A && i < N)
            for (std::size_t w = 0; w < f.size(); ++w)
                f.at(w) = (I - d.A(i, i, w).transpose() * G.dt()).partialPivLu().solve(Vec(f.at(w)));

        // Forward recursion in r from t_i to T; f_i is level-i measurable so the
        // running value equals E_r[xi_i] on each path.
        TerminalField out(N, m);
        for (std::size_t leaf = 0; leaf < out.size(); ++leaf) {
            Vec lam = f.at(leaf >> (N - i));
            for (int r = i; r < N; ++r) {
                const std::size_t wr = leaf >> (N - r);
                Vec incr = Vec::Zero(m);
                if (d.D) incr += d.D(i, r, wr).transpose() * lam;
                if (has_beta) incr += d.beta.row(i).at(r, wr);
                lam += incr * G.dw(r, leaf, N);
            }
            out.at(leaf) = lam;
        }
        xi.push_back(std::move(out));
    }
    return xi;
}

// Substitutes xi back into its defining equation; returns the largest leaf residual.
inline double fredholm_residual(const TimeGrid& G, const FredholmData& d, const std::vector<TerminalField>& xi,
                                int last_row = -1) {
    const int N = G.steps();
    const int m = d.alpha.dim();
    const bool has_beta = d.beta.steps() == N;
    if (last_row < 0) last_row = N;
    double worst = 0.0;
    for (int i = 0; i <= last_row; ++i) {
        TerminalField rhs = broadcast(d.alpha.level(i), N);
        const int top = (d.include_diagonal && i < N) ? i : i - 1;
        if (d.A)
            for (int j = 0; j <= top; ++j) {
                LevelField Exj = cond_expect(xi[j], i);
                for (std::size_t leaf = 0; leaf < rhs.size(); ++leaf) {
                    const std::size_t wi = leaf >> (N - i);
                    rhs.at(leaf) += d.A(j, i, wi).transpose() * Exj.at(wi) * G.dt();
                }
            }
        for (int j = 0; j < N; ++j) {
            LevelField integrand(j, m);
            if (has_beta) integrand = d.beta.row(i).level(j);
            if (j < i && d.B) {
                TerminalField prod(N, m);
                for (std::size_t leaf = 0; leaf < prod.size(); ++leaf)
                    prod.at(leaf) = d.B(j, i, leaf >> (N - i)).transpose() * xi[j].at(leaf);
                integrand += cond_expect(prod, j);
            }
            if (j >= i && d.D) {
                LevelField Exi = cond_expect(xi[i], j);
                for (std::size_t w = 0; w < integrand.size(); ++w) integrand.at(w) += d.D(i, j, w).transpose() * Exi.at(w);
            }
            for (std::size_t leaf = 0; leaf < rhs.size(); ++leaf)
                rhs.at(leaf) += integrand.at(leaf >> (N - j)) * G.dw(j, leaf, N);
        }
        worst = std::max(worst, (rhs - xi[i]).max_abs());
    }
    return worst;
}

struct Lambda0Solution {
    TerminalField lambda0;
    AdaptedProcess Lambda;  // E_i[lambda0]
};

using NodeMatFn = std::function<Mat(int s, std::size_t node)>;

// Lambda_0 = mean0, Lambda_{i+1} = Lambda_i + (fz_i + gz0_i' Lambda_i) dW_i, lambda0 = Lambda_N.
inline Lambda0Solution solve_lambda0(const TimeGrid& G, const AdaptedProcess& fz, const NodeMatFn& gz0,
                                     const Vec& mean0) {
    const int N = G.steps();
    const int m = static_cast<int>(mean0.size());
    Lambda0Solution out{TerminalField(N, m), AdaptedProcess(N, m)};
    out.Lambda.at(0, 0) = mean0;
    for (int i = 0; i < N; ++i)
        for (std::size_t w = 0; w < TimeGrid::nodes(i); ++w) {
            const Vec cur = out.Lambda.at(i, w);
            Vec vol = fz.at(i, w);
            if (gz0) vol += gz0(i, w).transpose() * cur;
            out.Lambda.at(i + 1, 2 * w) = cur - vol * G.sqrt_dt();
            out.Lambda.at(i + 1, 2 * w + 1) = cur + vol * G.sqrt_dt();
        }
    out.lambda0 = out.Lambda.level(N);
    return out;
}

inline double lambda0_residual(const TimeGrid& G, const AdaptedProcess& fz, const NodeMatFn& gz0, const Vec& mean0,
                               const TerminalField& lambda0) {
    const int N = G.steps();
    AdaptedProcess E = expectation_process(lambda0);
    double worst = 0.0;
    for (std::size_t leaf = 0; leaf < lambda0.size(); ++leaf) {
        Vec acc = mean0;
        for (int j = 0; j < N; ++j) {
            const std::size_t wj = leaf >> (N - j);
            Vec vol = fz.at(j, wj);
            if (gz0) vol += gz0(j, wj).transpose() * E.at(j, wj);
            acc += vol * G.dw(j, leaf, N);
        }
        worst = std::max(worst, (acc - lambda0.at(leaf)).lpNorm<Eigen::Infinity>());
    }
    return worst;
}

struct MuNu {
    AdaptedProcess mu;  // E_i[theta], levels 0..N
    AdaptedProcess nu;  // representation integrand, levels 0..N-1
};

inline MuNu solve_mu_nu(const TimeGrid& G, const TerminalField& theta) {
    MartingaleRep rep = martingale_repr(G, theta, 0);
    return {expectation_process(theta), std::move(rep.integrand)};
}

// mu_i + sum_{j>=i} nu_j dW_j - theta at every leaf and every i.
inline double mu_nu_residual(const TimeGrid& G, const MuNu& mn, const TerminalField& theta) {
    const int N = G.steps();
    double worst = 0.0;
    for (std::size_t leaf = 0; leaf < theta.size(); ++leaf) {
        Vec tail = Vec::Zero(theta.dim());
        for (int i = N; i >= 0; --i) {
            if (i < N) tail += mn.nu.along(i, leaf, N) * G.dw(i, leaf, N);
            worst = std::max(worst, (Vec(mn.mu.along(i, leaf, N)) + tail - theta.at(leaf)).lpNorm<Eigen::Infinity>());
        }
    }
    return worst;
}

// ---------------------------------------------------------------------------
// Adjoint system along a state (X, Y, Z, u)

// Coefficients frozen along the state; node indices refer to the level of `s`.
class FrozenCoefficients {
public:
    FrozenCoefficients(const Scenario& s, const ForwardPath& fwd, const BackwardPath& bwd, const AdaptedProcess& u)
        : s_(s), fwd_(fwd), bwd_(bwd), u_(u) {}

    const Scenario& scenario() const { return s_; }
    double t(int i) const { return s_.grid.t(i); }
    Vec X(int s, std::size_t w) const { return fwd_.X.at(s, w); }
    Vec Y(int s, std::size_t w) const { return bwd_.Y.at(s, w); }
    Vec Z(int t, int s, std::size_t w) const { return bwd_.Z.at(t, s, w); }
    Vec u(int s, std::size_t w) const { return u_.at(s, w); }

    Mat b_x(int t, int s, std::size_t w) const { return s_.model->b_x(this->t(t), this->t(s), X(s, w), u(s, w)); }
    Mat b_u(int t, int s, std::size_t w) const { return s_.model->b_u(this->t(t), this->t(s), X(s, w), u(s, w)); }
    Mat sigma_x(int t, int s, std::size_t w) const { return s_.model->sigma_x(this->t(t), this->t(s), X(s, w), u(s, w)); }
    Mat sigma_u(int t, int s, std::size_t w) const { return s_.model->sigma_u(this->t(t), this->t(s), X(s, w), u(s, w)); }
    Mat g_x(int t, int s, std::size_t w) const { return s_.model->g_x(this->t(t), this->t(s), X(s, w), Y(s, w), Z(t, s, w), u(s, w)); }
    Mat g_y(int t, int s, std::size_t w) const { return s_.model->g_y(this->t(t), this->t(s), X(s, w), Y(s, w), Z(t, s, w), u(s, w)); }
    Mat g_z(int t, int s, std::size_t w) const { return s_.model->g_z(this->t(t), this->t(s), X(s, w), Y(s, w), Z(t, s, w), u(s, w)); }
    Mat g_u(int t, int s, std::size_t w) const { return s_.model->g_u(this->t(t), this->t(s), X(s, w), Y(s, w), Z(t, s, w), u(s, w)); }
    Vec f_x(int s, std::size_t w) const { return s_.model->f_x(t(s), X(s, w), Y(s, w), Z(0, s, w), u(s, w)); }
    Vec f_y(int s, std::size_t w) const { return s_.model->f_y(t(s), X(s, w), Y(s, w), Z(0, s, w), u(s, w)); }
    Vec f_z(int s, std::size_t w) const { return s_.model->f_z(t(s), X(s, w), Y(s, w), Z(0, s, w), u(s, w)); }
    Vec f_u(int s, std::size_t w) const { return s_.model->f_u(t(s), X(s, w), Y(s, w), Z(0, s, w), u(s, w)); }
    // Leaf-level quantities.
    Mat psi_x(int t, std::size_t leaf) const { return s_.model->psi_x(this->t(t), X(s_.steps(), leaf)); }
    Vec h_x(std::size_t leaf) const { return s_.model->h_x(X(s_.steps(), leaf), Y(0, 0)); }
    Vec h_y(std::size_t leaf) const { return s_.model->h_y(X(s_.steps(), leaf), Y(0, 0)); }

private:
    const Scenario& s_;
    const ForwardPath& fwd_;
    const BackwardPath& bwd_;
    const AdaptedProcess& u_;
};

struct AdjointBundle {
    TerminalField lambda0;
    AdaptedProcess Lambda;          // E_s[lambda0]
    std::vector<TerminalField> xi;  // xi(t_i), i = 0..N (row N unused by the cost)
    TerminalField theta;            // mu(T)
    AdaptedProcess mu, nu;
    MSolution pq;
    std::vector<TerminalField> p_free;  // free terms of the (p, q) equation, rows 0..N-1
    bool exact_transpose = true;
    Vec mean0;                          // E h_y
};

struct AdjointInputs {
    AdaptedProcess fz;
    NodeMatFn gz0;
    FredholmData xi_data;
};

inline AdjointInputs adjoint_inputs(const FrozenCoefficients& C, const AdaptedProcess& Lambda, bool exact_transpose) {
    const Scenario& s = C.scenario();
    const int N = s.steps(), m = s.m();
    AdjointInputs in;
    in.fz = AdaptedProcess(N, m);
    for (int i = 0; i < N; ++i)
        for (std::size_t w = 0; w < TimeGrid::nodes(i); ++w) in.fz.at(i, w) = C.f_z(i, w);
    in.gz0 = [&C](int s_, std::size_t w) { return C.g_z(0, s_, w); };
    FredholmData& d = in.xi_data;
    d.include_diagonal = exact_transpose;
    d.A = [&C, N, m](int j, int i, std::size_t w) -> Mat {
        if (i >= N) return Mat::Zero(m, m);
        return C.g_y(j, i, w);
    };
    d.D = [&C, N, m](int i, int r, std::size_t w) -> Mat {
        if (i >= N) return Mat::Zero(m, m);
        return C.g_z(i, r, w);
    };
    d.alpha = AdaptedProcess(N, m);
    if (Lambda.steps() == N)
        for (int i = 0; i < N; ++i)
            for (std::size_t w = 0; w < TimeGrid::nodes(i); ++w)
                d.alpha.at(i, w) = C.g_y(0, i, w).transpose() * Lambda.at(i, w) + C.f_y(i, w);
    return in;
}

inline AdjointBundle assemble_adjoint(const Scenario& s, const ForwardPath& fwd, const BackwardPath& bwd,
                                      const AdaptedProcess& u, bool exact_transpose = true) {
    const TimeGrid& G = s.grid;
    const int N = G.steps(), m = s.m(), n = s.n();
    FrozenCoefficients C(s, fwd, bwd, u);
    AdjointBundle out;
    out.exact_transpose = exact_transpose;

    // lambda(0)
    Vec mean0 = Vec::Zero(m);
    for (std::size_t leaf = 0; leaf < G.leaves(); ++leaf) mean0 += C.h_y(leaf);
    mean0 /= static_cast<double>(G.leaves());
    out.mean0 = mean0;
    AdjointInputs in = adjoint_inputs(C, AdaptedProcess(), exact_transpose);
    Lambda0Solution l0 = solve_lambda0(G, in.fz, in.gz0, mean0);
    out.lambda0 = l0.lambda0;
    out.Lambda = l0.Lambda;

    // xi with A := g_y, B := 0, D := g_z, alpha := g_y(0,t)' Lambda_t + f_y(t), beta := 0
    in = adjoint_inputs(C, out.Lambda, exact_transpose);
    out.xi = solve_fredholm_xi(G, in.xi_data);

    // mu, nu
    TerminalField theta(N, n);
    for (std::size_t leaf = 0; leaf < theta.size(); ++leaf) {
        Vec th = C.h_x(leaf) + C.psi_x(0, leaf).transpose() * out.lambda0.at(leaf);
        for (int t = 0; t < N; ++t) th += C.psi_x(t, leaf).transpose() * out.xi[t].at(leaf) * G.dt();
        theta.at(leaf) = th;
    }
    out.theta = theta;
    MuNu mn = solve_mu_nu(G, theta);
    out.mu = std::move(mn.mu);
    out.nu = std::move(mn.nu);

    // (p, q): free term b_x(T,t)' mu(T) + sigma_x(T,t)' nu(t) + g_x(0,t)' Lambda_t + f_x(t) + sum_s g_x(s,t)' xi(s) ds
    out.p_free.reserve(N);
    for (int t = 0; t < N; ++t) {
        TerminalField F(N, n);
        const int top = exact_transpose ? t : t - 1;
        for (std::size_t leaf = 0; leaf < F.size(); ++leaf) {
            const std::size_t w = leaf >> (N - t);
            Vec acc = C.b_x(N, t, w).transpose() * theta.at(leaf) + C.sigma_x(N, t, w).transpose() * out.nu.at(t, w) +
                      C.g_x(0, t, w).transpose() * out.Lambda.at(t, w) + C.f_x(t, w);
            for (int sidx = 0; sidx <= top; ++sidx) acc += C.g_x(sidx, t, w).transpose() * out.xi[sidx].at(leaf) * G.dt();
            F.at(leaf) = acc;
        }
        out.p_free.push_back(std::move(F));
    }
    KernelFn Kb = [&C](int j, int i, std::size_t w) { return Mat(C.b_x(j, i, w).transpose()); };
    KernelFn Ks = [&C](int j, int i, std::size_t w) { return Mat(C.sigma_x(j, i, w).transpose()); };
    out.pq = solve_linear_bsvie_M(G, out.p_free, Kb, Ks);
    return out;
}

// Largest residual of the (p, q) equation: p_i - E_i[free_i + sum_{j>i}(b_x(j,i)'p_j + sigma_x(j,i)'q(j,i)) dt].
inline double pq_residual(const Scenario& s, const ForwardPath& fwd, const BackwardPath& bwd, const AdaptedProcess& u,
                          const AdjointBundle& adj) {
    const TimeGrid& G = s.grid;
    const int N = G.steps();
    FrozenCoefficients C(s, fwd, bwd, u);
    double worst = 0.0;
    for (int i = 0; i < N; ++i) {
        TerminalField acc = adj.p_free[i];
        for (int j = i + 1; j < N; ++j)
            for (std::size_t leaf = 0; leaf < acc.size(); ++leaf) {
                const std::size_t wi = leaf >> (N - i), wj = leaf >> (N - j);
                acc.at(leaf) += (C.b_x(j, i, wi).transpose() * adj.pq.p.at(j, wj) +
                                 C.sigma_x(j, i, wi).transpose() * adj.pq.q.at(j, i, wi)) * G.dt();
            }
        worst = std::max(worst, (cond_expect(acc, i) - adj.pq.p.level(i)).max_abs());
    }
    return std::max(worst, m_identity_residual(G, adj.pq, N - 1));
}

// H_u(s) = g_u(0,s)' Lambda_s + sum_{t in S(s)} g_u(t,s)' E_s[xi_t] dt + f_u(s)
//        + E_s sum_{t>s} [b_u(t,s)' p_t + sigma_u(t,s)' q(t,s)] dt + b_u(T,s)' mu_s + sigma_u(T,s)' nu_s
inline AdaptedProcess hamiltonian_gradient(const Scenario& s, const AdjointBundle& adj, const ForwardPath& fwd,
                                           const BackwardPath& bwd, const AdaptedProcess& u) {
    const TimeGrid& G = s.grid;
    const int N = G.steps(), l = s.l();
    FrozenCoefficients C(s, fwd, bwd, u);
    AdaptedProcess H(N, l);
    for (int sl = 0; sl < N; ++sl) {
        const int top = adj.exact_transpose ? sl : sl - 1;
        std::vector<LevelField> Exi;
        for (int t = 0; t <= top; ++t) Exi.push_back(cond_expect(adj.xi[t], sl));
        std::vector<LevelField> Ep;
        for (int t = sl + 1; t < N; ++t) Ep.push_back(cond_expect(adj.pq.p.level(t), sl));
        for (std::size_t w = 0; w < TimeGrid::nodes(sl); ++w) {
            Vec acc = C.g_u(0, sl, w).transpose() * adj.Lambda.at(sl, w) + C.f_u(sl, w) +
                      C.b_u(N, sl, w).transpose() * adj.mu.at(sl, w) + C.sigma_u(N, sl, w).transpose() * adj.nu.at(sl, w);
            for (int t = 0; t <= top; ++t) acc += C.g_u(t, sl, w).transpose() * Exi[t].at(w) * G.dt();
            for (int t = sl + 1; t < N; ++t)
                acc += (C.b_u(t, sl, w).transpose() * Ep[t - sl - 1].at(w) +
                        C.sigma_u(t, sl, w).transpose() * adj.pq.q.at(t, sl, w)) * G.dt();
            H.at(sl, w) = acc;
        }
    }
    return H;
}

// ---------------------------------------------------------------------------
// Reduced recursions for t-independent coefficients (the FBSDE case):
//   Gamma_i = (I - g_y' dt)^{-1} (Lambda_i + f_y dt),  Lambda_{i+1} = Gamma_i + (f_z + g_z' Gamma_i) dW_i,
//   P_N = h_x + psi_x' Lambda_N,
//   P_i = E_i P_{i+1} + (b_x' E_i P_{i+1} + sigma_x' Q_i + f_x + g_x' Gamma_i) dt,
//   H_u(i) = b_u' E_i P_{i+1} + sigma_u' Q_i + f_u + g_u' Gamma_i,
// where Q_i is the one-step integrand of P_{i+1}. Coefficients are read with t = s.

struct FbsdeReduction {
    AdaptedProcess Lambda;  // levels 0..N
    AdaptedProcess Gamma;   // levels 0..N-1
    AdaptedProcess P;       // levels 0..N
    AdaptedProcess EP;      // E_i P_{i+1}, levels 0..N-1
    AdaptedProcess Q;       // levels 0..N-1
    AdaptedProcess Hu;      // levels 0..N-1
};

inline FbsdeReduction fbsde_reduction(const Scenario& s, const ForwardPath& fwd, const BackwardPath& bwd,
                                      const AdaptedProcess& u) {
    const TimeGrid& G = s.grid;
    const Model& M = *s.model;
    const int N = G.steps(), n = s.n(), m = s.m(), l = s.l();
    FbsdeReduction r{AdaptedProcess(N, m), AdaptedProcess(N, m), AdaptedProcess(N, n), AdaptedProcess(N, n),
                     AdaptedProcess(N, n), AdaptedProcess(N, l)};
    const Vec y0 = bwd.Y.at(0, 0);
    auto args = [&](int i, std::size_t w) {
        return std::make_tuple(G.t(i), Vec(fwd.X.at(i, w)), Vec(bwd.Y.at(i, w)), Vec(bwd.Z.at(i, i, w)), Vec(u.at(i, w)));
    };

    Vec mean_hy = Vec::Zero(m);
    for (std::size_t leaf = 0; leaf < G.leaves(); ++leaf) mean_hy += M.h_y(fwd.X.level(N).at(leaf), y0);
    r.Lambda.at(0, 0) = mean_hy / static_cast<double>(G.leaves());
    const Mat Im = Mat::Identity(m, m);
    for (int i = 0; i < N; ++i)
        for (std::size_t w = 0; w < TimeGrid::nodes(i); ++w) {
            auto [t, x, y, z, uu] = args(i, w);
            const Mat gy = M.g_y(t, t, x, y, z, uu), gz = M.g_z(t, t, x, y, z, uu);
            const Vec gam = (Im - gy.transpose() * G.dt())
                                .partialPivLu()
                                .solve(Vec(r.Lambda.at(i, w)) + M.f_y(t, x, y, z, uu) * G.dt());
            r.Gamma.at(i, w) = gam;
            const Vec vol = M.f_z(t, x, y, z, uu) + gz.transpose() * gam;
            r.Lambda.at(i + 1, 2 * w) = gam - vol * G.sqrt_dt();
            r.Lambda.at(i + 1, 2 * w + 1) = gam + vol * G.sqrt_dt();
        }

    for (std::size_t leaf = 0; leaf < G.leaves(); ++leaf) {
        const Vec xT = fwd.X.level(N).at(leaf);
        r.P.at(N, leaf) = M.h_x(xT, y0) + M.psi_x(G.horizon(), xT).transpose() * r.Lambda.at(N, leaf);
    }
    for (int i = N - 1; i >= 0; --i) {
        r.Q.level(i) = step_integrand(G, r.P.level(i + 1));
        for (std::size_t w = 0; w < TimeGrid::nodes(i); ++w) {
            auto [t, x, y, z, uu] = args(i, w);
            const Vec ep = 0.5 * (r.P.at(i + 1, 2 * w) + r.P.at(i + 1, 2 * w + 1));
            const Vec q = r.Q.at(i, w);
            const Vec gam = r.Gamma.at(i, w);
            r.EP.at(i, w) = ep;
            r.P.at(i, w) = ep + (M.b_x(t, t, x, uu).transpose() * ep + M.sigma_x(t, t, x, uu).transpose() * q +
                                 M.f_x(t, x, y, z, uu) + M.g_x(t, t, x, y, z, uu).transpose() * gam) * G.dt();
            r.Hu.at(i, w) = M.b_u(t, t, x, uu).transpose() * ep + M.sigma_u(t, t, x, uu).transpose() * q +
                            M.f_u(t, x, y, z, uu) + M.g_u(t, t, x, y, z, uu).transpose() * gam;
        }
    }
    return r;
}

} // namespace fbsvie
