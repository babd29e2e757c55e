#pragma once

// Duality identities between the Fredholm-Volterra equation for xi and the backward
// equations (Y, Z), (mu, nu), (Ytilde, Ztilde), plus a dense transpose oracle.
//
// Discrete conventions. xi uses strict A-sums (j < i). The first backward equation
//   Y(t) = psi(t) + A(t,T) Theta + B(t,T) nu(t) + sum_{s>t} [A(t,s) Y(s) + B(t,s) Z(s,t)] dt
//          + sum_{s>=t} D(t,s) Z(t,s) dt - sum_{s>=t} Z(t,s) dW_s
// is then its exact transpose (DualityMode::Transpose). DualityMode::Continuum adds the
// diagonal A(t,t) Y(t) dt term to the primal equation and drops the diagonal of the
// Atilde-sum in the third equation; the identities then hold up to O(dt).

#include "fbsvie/adjoint.hpp"

#include <random>

namespace fbsvie {

enum class DualityMode { Transpose, Continuum };

inline const char* mode_name(DualityMode m) { return m == DualityMode::Transpose ? "transpose" : "continuum"; }

struct DualityInstance {
    TimeGrid grid;
    FredholmData data;                     // A, B, D, alpha, beta; A(., N) and B(., N) multiply Theta and nu
    TerminalField theta;
    std::vector<TerminalField> psi;        // t_0 .. t_{N-1}
    std::vector<TerminalField> psi_tilde;  // t_0 .. t_N
    KernelFn A_tilde;
    int dim() const { return data.alpha.dim(); }
};

struct DualityResult {
    double lhs = 0.0;
    double rhs = 0.0;
    double gap = 0.0;  // lhs - rhs
};

inline void check_instance(const DualityInstance& d) {
    const int N = d.grid.steps(), m = d.dim();
    if (d.data.alpha.steps() != N) throw std::invalid_argument("duality: alpha must cover levels 0..N");
    if (d.data.beta.steps() != -1 && (d.data.beta.steps() != N || d.data.beta.dim() != m))
        throw std::invalid_argument("duality: beta has the wrong shape");
    if (d.theta.level() != N || d.theta.dim() != m) throw std::invalid_argument("duality: Theta must be a leaf field");
    if (static_cast<int>(d.psi.size()) != N) throw std::invalid_argument("duality: need psi(t_0..t_{N-1})");
    if (static_cast<int>(d.psi_tilde.size()) != N + 1) throw std::invalid_argument("duality: need psi_tilde(t_0..t_N)");
}

namespace detail {

inline FredholmData strict(FredholmData d) {
    d.include_diagonal = false;
    return d;
}

// Free terms psi(t) + A(t,T) Theta + B(t,T) nu(t) of the first backward equation.
inline std::vector<TerminalField> first_free_terms(const DualityInstance& d, const KernelFn& A, const KernelFn& B,
                                                   const std::vector<TerminalField>& psi, const TerminalField& theta,
                                                   const AdaptedProcess& nu) {
    const int N = d.grid.steps();
    std::vector<TerminalField> free;
    free.reserve(N);
    for (int t = 0; t < N; ++t) {
        TerminalField F = psi[t];
        for (std::size_t leaf = 0; leaf < F.size(); ++leaf) {
            if (A) F.at(leaf) += A(t, N, leaf) * theta.at(leaf);
            if (B) F.at(leaf) += B(t, N, leaf) * nu.along(t, leaf, N);
        }
        free.push_back(std::move(F));
    }
    return free;
}

} // namespace detail

struct FirstBackward {
    MuNu mn;
    MSolution yz;
};

inline FirstBackward solve_first_backward(const DualityInstance& d, DualityMode mode, const KernelFn& A,
                                          const KernelFn& B, const KernelFn& D, const std::vector<TerminalField>& psi,
                                          const TerminalField& theta) {
    FirstBackward out{solve_mu_nu(d.grid, theta), {}};
    LinearBsvieData L;
    L.free = detail::first_free_terms(d, A, B, psi, theta, out.mn.nu);
    L.A = A;
    L.B = B;
    L.D = D;
    L.diagonal_A = mode == DualityMode::Continuum;
    out.yz = solve_linear_bsvie(d.grid, L);
    return out;
}

// E<xi(T),Theta> + E sum <psi,xi> dt  vs  E<alpha(T),Theta> + E sum <beta(T,s),nu(s)> dt
//   + E sum <Y,alpha> dt + E sum sum <Z(t,s),beta(t,s)> dt dt.
inline DualityResult check_duality_1(const DualityInstance& d, DualityMode mode = DualityMode::Transpose) {
    check_instance(d);
    const TimeGrid& G = d.grid;
    const int N = G.steps();
    const double dt = G.dt();
    const bool has_beta = d.data.beta.steps() == N;
    const std::vector<TerminalField> xi = solve_fredholm_xi(G, detail::strict(d.data));
    const FirstBackward bw = solve_first_backward(d, mode, d.data.A, d.data.B, d.data.D, d.psi, d.theta);

    DualityResult r;
    r.lhs = expect_dot(xi[N], d.theta);
    for (int t = 0; t < N; ++t) r.lhs += expect_dot(d.psi[t], xi[t]) * dt;

    r.rhs = expect_dot(d.data.alpha.level(N), d.theta);
    for (int t = 0; t < N; ++t) r.rhs += expect_dot(bw.yz.p.level(t), d.data.alpha.level(t)) * dt;
    if (has_beta)
        for (int s = 0; s < N; ++s) {
            r.rhs += expect_dot(d.data.beta.row(N).level(s), bw.mn.nu.level(s)) * dt;
            for (int t = 0; t < N; ++t) r.rhs += expect_dot(bw.yz.q.row(t).level(s), d.data.beta.row(t).level(s)) * dt * dt;
        }
    r.gap = r.lhs - r.rhs;
    return r;
}

struct ThirdBackward {
    AdaptedProcess Y;  // Ytilde
    TwoParamProcess Z; // Ztilde
};

inline ThirdBackward solve_third_backward(const DualityInstance& d, DualityMode mode, double tol = 1e-14,
                                          int max_iter = 400) {
    const KernelFn& At = d.A_tilde;
    const KernelFn& D = d.data.D;
    const int m = d.dim();
    RowTerminal terminal = [&d](int i) { return d.psi_tilde[i]; };
    RowDriver driver = [&](int i, int r, std::size_t w, const Vec& y, const Vec& z) -> Vec {
        Vec out = Vec::Zero(m);
        if (At && (mode == DualityMode::Transpose || r > i)) out += At(i, r, w) * y;
        if (D) out += D(i, r, w) * z;
        return out;
    };
    BackwardPath bp = solve_bsvie_general(d.grid, m, terminal, driver, tol, max_iter);
    return {std::move(bp.Y), std::move(bp.Z)};
}

// E<xi(0),psi_tilde(0)> + E sum <E_s xi(0), Atilde(0,s) Ytilde(s)> dt
//   vs <Ytilde(0),alpha(0)> + E sum <Ztilde(0,s),beta(0,s)> dt.
inline DualityResult check_duality_2(const DualityInstance& d, DualityMode mode = DualityMode::Transpose) {
    check_instance(d);
    const TimeGrid& G = d.grid;
    const int N = G.steps();
    const double dt = G.dt();
    const std::vector<TerminalField> xi = solve_fredholm_xi(G, detail::strict(d.data));
    const ThirdBackward tb = solve_third_backward(d, mode);

    DualityResult r;
    r.lhs = expect_dot(xi[0], d.psi_tilde[0]);
    if (d.A_tilde) {
        const AdaptedProcess Exi = expectation_process(xi[0]);
        for (int s = 0; s < N; ++s) {
            const LevelField& e = Exi.level(s);
            double acc = 0.0;
            for (std::size_t w = 0; w < e.size(); ++w) acc += e.at(w).dot(d.A_tilde(0, s, w) * tb.Y.at(s, w));
            r.lhs += acc / static_cast<double>(e.size()) * dt;
        }
    }
    r.rhs = tb.Y.at(0, 0).dot(d.data.alpha.at(0, 0));
    if (d.data.beta.steps() == N)
        for (int s = 0; s < N; ++s) r.rhs += expect_dot(tb.Z.row(0).level(s), d.data.beta.row(0).level(s)) * dt;
    r.gap = r.lhs - r.rhs;
    return r;
}

// ---------------------------------------------------------------------------
// Random instances. Coefficients are smooth in (t, s) and depend on the path through
// W(s), so one seed defines the same continuous instance for every N.

struct InstanceOptions {
    bool zero_theta = false;
    bool zero_beta = false;
    bool zero_kernels = false;
    double kernel_scale = 0.5;
    // psi and psi_tilde follow alpha and A, Atilde are near kernel_scale * I, so the
    // O(dt) coefficient of the continuum-mode gap stays away from zero.
    bool aligned = false;
};

inline DualityInstance random_duality_instance(int steps, int dim, std::uint64_t seed, InstanceOptions opt = {},
                                               double horizon = 1.0) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> nd(0.0, 1.0);
    auto rmat = [&](double scale) { return Mat(Mat::NullaryExpr(dim, dim, [&] { return scale * nd(rng); })); };
    auto rvec = [&](double scale) { return Vec(Vec::NullaryExpr(dim, [&] { return scale * nd(rng); })); };

    DualityInstance d;
    d.grid = TimeGrid(horizon, steps);
    const TimeGrid G = d.grid;
    const int N = steps;
    const double ks = opt.kernel_scale;
    const Mat Id = Mat::Identity(dim, dim);
    Mat A0 = rmat(ks), At0 = rmat(ks);
    const Mat B0 = rmat(ks), D0 = rmat(ks);
    if (opt.aligned) {
        A0 = ks * Id + 0.2 * A0;
        At0 = ks * Id + 0.2 * At0;
    }
    const Vec a0 = rvec(1), a1 = rvec(1), a2 = rvec(1);
    const Vec b0 = rvec(1), b1 = rvec(1);
    const Vec th0 = rvec(1), th1 = rvec(1), th2 = rvec(1);
    const Vec p0 = rvec(1), p1 = rvec(1), q0 = rvec(1), q1 = rvec(1);

    if (!opt.zero_kernels) {
        d.data.A = [G, A0](int t, int s, std::size_t w) {
            return Mat(A0 * std::exp(-(G.t(s) - G.t(t))) * (1.0 + 0.2 * std::sin(brownian_value(G, s, w))));
        };
        d.data.B = [G, B0](int t, int s, std::size_t w) {
            return Mat(B0 * std::cos(G.t(t) - 0.5 * G.t(s)) * (1.0 + 0.2 * std::cos(brownian_value(G, s, w))));
        };
        d.data.D = [G, D0](int t, int s, std::size_t w) {
            return Mat(D0 * (1.0 + 0.3 * G.t(t) * G.t(s)) * (1.0 + 0.2 * std::cos(brownian_value(G, s, w))));
        };
        d.A_tilde = [G, At0](int t, int s, std::size_t w) {
            return Mat(At0 * std::exp(-std::abs(G.t(s) - G.t(t))) * (1.0 + 0.2 * std::cos(brownian_value(G, s, w))));
        };
    }
    d.data.alpha = AdaptedProcess(N, dim);
    for (int i = 0; i <= N; ++i)
        for (std::size_t w = 0; w < TimeGrid::nodes(i); ++w)
            d.data.alpha.at(i, w) = a0 + a1 * G.t(i) + a2 * std::sin(brownian_value(G, i, w));
    if (!opt.zero_beta) {
        d.data.beta = TwoParamProcess(N, dim);
        for (int t = 0; t <= N; ++t)
            for (int s = 0; s < N; ++s)
                for (std::size_t w = 0; w < TimeGrid::nodes(s); ++w)
                    d.data.beta.at(t, s, w) =
                        (b0 + b1 * std::cos(G.t(t) + G.t(s))) * (1.0 + 0.3 * brownian_value(G, s, w));
    }
    d.theta = TerminalField(N, dim);
    if (!opt.zero_theta)
        for (std::size_t leaf = 0; leaf < d.theta.size(); ++leaf) {
            const double WT = brownian_value(G, N, leaf);
            d.theta.at(leaf) = th0 + th1 * WT + th2 * std::sin(WT);
        }
    for (int t = 0; t <= N; ++t) {
        TerminalField p(N, dim), q(N, dim);
        for (std::size_t leaf = 0; leaf < p.size(); ++leaf) {
            const double WT = brownian_value(G, N, leaf);
            p.at(leaf) = p0 * std::cos(G.t(t)) + p1 * WT;
            q.at(leaf) = q0 * (1.0 + G.t(t)) + q1 * std::sin(WT - G.t(t));
            if (opt.aligned) {
                const Vec a = d.data.alpha.along(t, leaf, N);
                p.at(leaf) = a + 0.2 * p.at(leaf);
                q.at(leaf) = a + 0.2 * q.at(leaf);
            }
        }
        if (t < N) d.psi.push_back(std::move(p));
        d.psi_tilde.push_back(std::move(q));
    }
    return d;
}

// ---------------------------------------------------------------------------
// Dense transpose oracle.
//
// M maps the data (alpha on levels 0..N, beta rows 0..N at levels 0..N-1) to xi.
// The backward solvers define K mapping (psi(t_0..t_{N-1}), Theta) to
// (Y(t) for alpha(t), Theta for alpha(T), Z(t,s) for beta(t,s), nu(s) for beta(T,s)).
// The duality identity says K = W_d^{-1} M' W_xi with the expectation-and-dt weights
// of each pairing; the oracle compares the two matrices entrywise.

enum class KernelPerturbation { None, A, B, D };

struct OracleResult {
    double max_gap = 0.0;
    double max_entry = 0.0;
    Eigen::Index rows = 0, cols = 0;
};

namespace detail {

struct DataLayout {
    int N, m;
    Eigen::Index alpha_off(int t, std::size_t w) const {
        return static_cast<Eigen::Index>(m) * ((static_cast<Eigen::Index>(1) << t) - 1 + static_cast<Eigen::Index>(w));
    }
    Eigen::Index alpha_size() const { return static_cast<Eigen::Index>(m) * ((static_cast<Eigen::Index>(1) << (N + 1)) - 1); }
    Eigen::Index beta_row() const { return static_cast<Eigen::Index>(m) * ((static_cast<Eigen::Index>(1) << N) - 1); }
    Eigen::Index beta_off(int t, int s, std::size_t w) const {
        return alpha_size() + t * beta_row() + alpha_off(s, w);
    }
    Eigen::Index size() const { return alpha_size() + (N + 1) * beta_row(); }
    double weight(Eigen::Index k, double dt) const {
        if (k < alpha_size()) {
            int t = 0;
            while (alpha_off(t + 1, 0) <= k) ++t;
            return std::ldexp(1.0, -t) * (t < N ? dt : 1.0);
        }
        const Eigen::Index rel = k - alpha_size();
        const int t = static_cast<int>(rel / beta_row());
        const Eigen::Index inrow = rel % beta_row();
        int s = 0;
        while (alpha_off(s + 1, 0) <= inrow) ++s;
        return std::ldexp(1.0, -s) * dt * (t < N ? dt : 1.0);
    }
};

struct XiLayout {
    int N, m;
    Eigen::Index off(int t, std::size_t leaf) const {
        return (static_cast<Eigen::Index>(t) * (static_cast<Eigen::Index>(1) << N) + static_cast<Eigen::Index>(leaf)) * m;
    }
    Eigen::Index size() const { return off(N + 1, 0); }
    double weight(Eigen::Index k, double dt) const {
        const int t = static_cast<int>(k / (m * (static_cast<Eigen::Index>(1) << N)));
        return std::ldexp(1.0, -N) * (t < N ? dt : 1.0);
    }
};

inline KernelFn perturbed(const KernelFn& K, double amount, int m) {
    return [K, amount, m](int t, int s, std::size_t w) {
        Mat out = K ? K(t, s, w) : Mat::Zero(m, m);
        return Mat(out.array() + amount);
    };
}

} // namespace detail

inline OracleResult operator_transpose_oracle(const DualityInstance& d,
                                              KernelPerturbation perturb = KernelPerturbation::None,
                                              double amount = 1e-3, std::size_t max_entries = 20'000'000) {
    check_instance(d);
    const TimeGrid& G = d.grid;
    const int N = G.steps(), m = d.dim();
    const double dt = G.dt();
    if (N > 8) throw std::invalid_argument("operator_transpose_oracle: N must be at most 8");
    const detail::DataLayout DL{N, m};
    const detail::XiLayout XL{N, m};
    if (static_cast<std::size_t>(DL.size()) * static_cast<std::size_t>(XL.size()) > max_entries)
        throw std::length_error("operator_transpose_oracle: memory cap exceeded");

    // Forward map M, column by column.
    Mat Mfwd(XL.size(), DL.size());
    FredholmData base = detail::strict(d.data);
    for (Eigen::Index k = 0; k < DL.size(); ++k) {
        FredholmData unit = base;
        unit.alpha = AdaptedProcess(N, m);
        unit.beta = TwoParamProcess(N, m);
        if (k < DL.alpha_size()) {
            int t = 0;
            while (DL.alpha_off(t + 1, 0) <= k) ++t;
            unit.alpha.level(t).raw()[k - DL.alpha_off(t, 0)] = 1.0;
        } else {
            const Eigen::Index rel = k - DL.alpha_size();
            const int t = static_cast<int>(rel / DL.beta_row());
            const Eigen::Index inrow = rel % DL.beta_row();
            int s = 0;
            while (DL.alpha_off(s + 1, 0) <= inrow) ++s;
            unit.beta.row(t).level(s).raw()[inrow - DL.alpha_off(s, 0)] = 1.0;
        }
        const std::vector<TerminalField> xi = solve_fredholm_xi(G, unit);
        for (int t = 0; t <= N; ++t)
            for (std::size_t k2 = 0; k2 < xi[t].raw().size(); ++k2) Mfwd(XL.off(t, 0) + k2, k) = xi[t].raw()[k2];
    }

    // Backward map K, column by column.
    KernelFn A = d.data.A, B = d.data.B, D = d.data.D;
    if (perturb == KernelPerturbation::A) A = detail::perturbed(A, amount, m);
    if (perturb == KernelPerturbation::B) B = detail::perturbed(B, amount, m);
    if (perturb == KernelPerturbation::D) D = detail::perturbed(D, amount, m);
    Mat K(DL.size(), XL.size());
    for (Eigen::Index c = 0; c < XL.size(); ++c) {
        std::vector<TerminalField> psi(N, TerminalField(N, m));
        TerminalField theta(N, m);
        const int t = static_cast<int>(c / XL.off(1, 0));
        const Eigen::Index in = c - XL.off(t, 0);
        if (t < N)
            psi[t].raw()[in] = 1.0;
        else
            theta.raw()[in] = 1.0;
        const FirstBackward bw = solve_first_backward(d, DualityMode::Transpose, A, B, D, psi, theta);
        for (int i = 0; i < N; ++i) {
            const auto& y = bw.yz.p.level(i).raw();
            for (std::size_t k2 = 0; k2 < y.size(); ++k2) K(DL.alpha_off(i, 0) + k2, c) = y[k2];
            for (int s = 0; s < N; ++s) {
                const auto& z = bw.yz.q.row(i).level(s).raw();
                for (std::size_t k2 = 0; k2 < z.size(); ++k2) K(DL.beta_off(i, s, 0) + k2, c) = z[k2];
            }
        }
        for (std::size_t k2 = 0; k2 < theta.raw().size(); ++k2) K(DL.alpha_off(N, 0) + k2, c) = theta.raw()[k2];
        for (int s = 0; s < N; ++s) {
            const auto& nu = bw.mn.nu.level(s).raw();
            for (std::size_t k2 = 0; k2 < nu.size(); ++k2) K(DL.beta_off(N, s, 0) + k2, c) = nu[k2];
        }
    }

    OracleResult out;
    out.rows = K.rows();
    out.cols = K.cols();
    for (Eigen::Index i = 0; i < K.rows(); ++i) {
        const double wi = DL.weight(i, dt);
        for (Eigen::Index j = 0; j < K.cols(); ++j) {
            const double ref = Mfwd(j, i) * XL.weight(j, dt) / wi;
            out.max_gap = std::max(out.max_gap, std::abs(ref - K(i, j)));
            out.max_entry = std::max(out.max_entry, std::abs(ref));
        }
    }
    return out;
}

} // namespace fbsvie
