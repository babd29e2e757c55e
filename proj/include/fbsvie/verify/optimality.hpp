#pragma once

// Pointwise necessary-condition sweep, projected gradient, and a brute-force quadratic
// program oracle for affine-quadratic scenarios.

#include "fbsvie/verify/variational.hpp"

#include <Eigen/Cholesky>
#include <Eigen/LU>

#include <iomanip>

namespace fbsvie {

struct NCEntry {
    int level = 0;
    std::size_t node = 0;
    double min_value = 0.0;  // min over the adjacent cone and unit ball of <H_u, v>
    bool trivial_cone = true;
    double residual = 0.0;   // |H_u + sum lambda w|, lambda >= 0 from NNLS
};

struct NCReport {
    std::vector<NCEntry> entries;
    double worst = 0.0;
    int worst_level = 0;
    std::size_t worst_node = 0;
    double trivial_fraction = 1.0;
    double max_residual = 0.0;
    double mean_residual = 0.0;
    double hu_inf = 0.0;
    double tol = 0.0;
    bool pass = true;  // worst >= -tol
};

inline NCReport check_pointwise_nc(const Scenario& s, const AdaptedProcess& u, const PipelineRun* precomputed = nullptr) {
    check_feasible(s, u);
    std::optional<PipelineRun> own;
    if (!precomputed) own = run_pipeline(s, u);
    const PipelineRun& p = precomputed ? *precomputed : *own;
    const int N = s.steps();
    NCReport rep;
    rep.hu_inf = p.Hu.max_abs(N - 1);
    rep.tol = s.tol.nc_tol ? *s.tol.nc_tol : 1e-8 * (1.0 + rep.hu_inf);
    std::size_t trivial = 0;
    double res_sum = 0.0;
    for (int i = 0; i < N; ++i)
        for (std::size_t w = 0; w < TimeGrid::nodes(i); ++w) {
            const Vec H = p.Hu.at(i, w);
            ConeRep cone;
            try {
                cone = adjacent_cone(s.constraint, u.at(i, w), s.tol.activity_tol);
            } catch (const ConeError& e) {
                std::ostringstream os;
                os << e.what() << " at level " << i << ", node " << w;
                throw ConeError(os.str());
            }
            NCEntry e{i, w, cone_min_linear(H, cone).value, cone.trivial(), kkt_multipliers(H, cone.normals).residual};
            if (e.trivial_cone) ++trivial;
            res_sum += e.residual;
            rep.max_residual = std::max(rep.max_residual, e.residual);
            if (e.min_value < rep.worst) {
                rep.worst = e.min_value;
                rep.worst_level = i;
                rep.worst_node = w;
            }
            rep.entries.push_back(e);
        }
    rep.trivial_fraction = static_cast<double>(trivial) / static_cast<double>(rep.entries.size());
    rep.mean_residual = res_sum / static_cast<double>(rep.entries.size());
    rep.pass = rep.worst >= -rep.tol;
    return rep;
}

inline json to_json(const NCReport& r) {
    json j;
    j["worst"] = r.worst;
    j["worst_level"] = r.worst_level;
    j["worst_node"] = r.worst_node;
    j["trivial_fraction"] = r.trivial_fraction;
    j["max_residual"] = r.max_residual;
    j["mean_residual"] = r.mean_residual;
    j["hu_inf"] = r.hu_inf;
    j["tol"] = r.tol;
    j["pass"] = r.pass;
    j["nodes"] = r.entries.size();
    return j;
}

inline std::string to_csv(const NCReport& r) {
    std::ostringstream os;
    os << std::setprecision(17);
    os << "level,node,minValue,cone_kind,residual\n";
    for (const auto& e : r.entries)
        os << e.level << ',' << e.node << ',' << e.min_value << ',' << (e.trivial_cone ? "full" : "polyhedral") << ','
           << e.residual << '\n';
    return os.str();
}

// ---------------------------------------------------------------------------
// Projected gradient with step halving.

struct PGResult {
    AdaptedProcess u;
    std::vector<double> J;
    int iterations = 0;
    bool converged = false;
    double grad_map_norm = 0.0;
};

inline void require_projection(const ControlConstraint& c) {
    if (auto sm = std::get_if<SmoothInequalities>(&c); sm && !as_annulus(*sm))
        throw std::invalid_argument("projected_gradient: no projection available for this constraint");
}

inline AdaptedProcess project_control(const Scenario& s, const AdaptedProcess& x) {
    AdaptedProcess out = x;
    for (int i = 0; i < s.steps(); ++i)
        for (std::size_t w = 0; w < TimeGrid::nodes(i); ++w) out.at(i, w) = nearest_point(s.constraint, x.at(i, w)).y;
    return out;
}

inline double control_norm(const TimeGrid& G, const AdaptedProcess& a) { return std::sqrt(control_dot(G, a, a)); }

inline PGResult projected_gradient(const Scenario& s, const AdaptedProcess& u0, double step, int max_iter,
                                   double tol = 1e-9, int max_halvings = 40) {
    require_projection(s.constraint);
    check_feasible(s, u0);
    const TimeGrid& G = s.grid;
    PGResult out;
    out.u = u0;
    PipelineRun cur = run_pipeline(s, out.u);
    out.J.push_back(cur.state.J);
    double h_last = step;  // next trial starts from twice the last accepted step
    for (int it = 0; it < max_iter; ++it) {
        AdaptedProcess trial = project_control(s, out.u - step * cur.Hu);
        out.grad_map_norm = control_norm(G, out.u - trial) / step;
        if (out.grad_map_norm < tol) {
            out.converged = true;
            return out;
        }
        double h = std::min(step, 2.0 * h_last);
        bool accepted = false;
        for (int k = 0; k <= max_halvings; ++k) {
            if (h != step) trial = project_control(s, out.u - h * cur.Hu);
            const AdaptedProcess diff = trial - out.u;
            const double J = run_state(s, trial).J;
            if (J <= cur.state.J - 1e-4 / h * control_dot(G, diff, diff)) {
                // a decrease lost in the rounding of J means we have stalled
                if (cur.state.J - J < 2 * std::numeric_limits<double>::epsilon() * (1.0 + std::abs(J))) return out;
                accepted = true;
                h_last = h;
                break;
            }
            h *= 0.5;
        }
        if (!accepted) return out;  // no decrease possible at roundoff level
        out.u = std::move(trial);
        cur = run_pipeline(s, out.u);
        out.J.push_back(cur.state.J);
        out.iterations = it + 1;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Primal active-set method for min 1/2 x'Hx + g'x subject to C x <= d, from a feasible x0.

struct QPSolution {
    Vec x;
    std::vector<int> active;
    int iterations = 0;
};

inline QPSolution active_set_qp(const Mat& H, const Vec& g, const Mat& C, const Vec& d, Vec x0, int max_iter = 2000) {
    const Eigen::Index n = H.rows(), k = C.rows();
    const double tol = 1e-11 * (1.0 + H.cwiseAbs().maxCoeff());
    if (k > 0 && ((C * x0 - d).array() > 1e-9).any()) throw std::invalid_argument("active_set_qp: infeasible start");
    std::vector<int> W;
    auto independent_with = [&](const std::vector<int>& set, int add) {
        Mat M(n, static_cast<Eigen::Index>(set.size()) + 1);
        for (std::size_t c = 0; c < set.size(); ++c) M.col(c) = C.row(set[c]).transpose();
        M.col(set.size()) = C.row(add).transpose();
        return licq(M);
    };
    for (int i = 0; i < k; ++i)
        if (std::abs(C.row(i).dot(x0) - d(i)) <= 1e-10 && independent_with(W, i)) W.push_back(i);
    Vec x = std::move(x0);
    for (int it = 0; it < max_iter; ++it) {
        const Eigen::Index a = static_cast<Eigen::Index>(W.size());
        Mat K = Mat::Zero(n + a, n + a);
        K.topLeftCorner(n, n) = H;
        for (Eigen::Index c = 0; c < a; ++c) {
            K.block(0, n + c, n, 1) = C.row(W[c]).transpose();
            K.block(n + c, 0, 1, n) = C.row(W[c]);
        }
        Vec rhs = Vec::Zero(n + a);
        rhs.head(n) = -(H * x + g);
        const Vec sol = K.partialPivLu().solve(rhs);
        const Vec dir = sol.head(n);
        if (dir.lpNorm<Eigen::Infinity>() <= tol * (1.0 + x.lpNorm<Eigen::Infinity>())) {
            const Vec lam = sol.tail(a);
            if (a == 0 || lam.minCoeff() >= -tol) return {x, W, it};
            Eigen::Index drop;
            lam.minCoeff(&drop);
            W.erase(W.begin() + drop);
            continue;
        }
        double alpha = 1.0;
        int blocking = -1;
        for (int i = 0; i < k; ++i) {
            if (std::find(W.begin(), W.end(), i) != W.end()) continue;
            const double cp = C.row(i).dot(dir);
            if (cp > 1e-14) {
                const double ratio = (d(i) - C.row(i).dot(x)) / cp;
                if (ratio < alpha) {
                    alpha = std::max(ratio, 0.0);
                    blocking = i;
                }
            }
        }
        x += alpha * dir;
        if (blocking >= 0) W.push_back(blocking);
    }
    throw SolverError("active_set_qp: iteration cap reached");
}

// ---------------------------------------------------------------------------
// Quadratic program oracle. For affine dynamics and quadratic cost, the features
// (X_s, Y_s, Z(0,s), u_s; X_T; Y(0)) are affine in the stacked control vector. The
// columns of that map come from the variational system at u = 0, which is exact for
// affine coefficients, and the cost is then an explicit quadratic form.

struct QPOracleResult {
    AdaptedProcess u;
    double J = 0.0;
    Mat hessian;
    Vec gradient;  // at u = 0
    double constant = 0.0;
    std::vector<int> active;
};

inline Eigen::Index control_offset(int l, int level, std::size_t node) {
    return static_cast<Eigen::Index>(l) * ((static_cast<Eigen::Index>(1) << level) - 1 + static_cast<Eigen::Index>(node));
}

inline Vec flatten_control(const AdaptedProcess& u) {
    const int N = u.steps(), l = u.dim();
    Vec out(control_offset(l, N, 0));
    for (int i = 0; i < N; ++i)
        for (std::size_t k = 0; k < u.level(i).raw().size(); ++k) out(control_offset(l, i, 0) + k) = u.level(i).raw()[k];
    return out;
}

inline AdaptedProcess unflatten_control(const Vec& x, int steps, int l) {
    AdaptedProcess u(steps, l);
    for (int i = 0; i < steps; ++i)
        for (std::size_t k = 0; k < u.level(i).raw().size(); ++k) u.level(i).raw()[k] = x(control_offset(l, i, 0) + k);
    return u;
}

inline QPOracleResult qp_oracle(const Scenario& s) {
    if (!s.catalog || !s.model->affine())
        throw std::invalid_argument("qp_oracle: scenario must have affine coefficients and quadratic cost");
    if (s.steps() > 8) throw std::invalid_argument("qp_oracle: N must be at most 8");
    if (std::holds_alternative<Ball>(s.constraint) || std::holds_alternative<SmoothInequalities>(s.constraint))
        throw std::invalid_argument("qp_oracle: U must be unconstrained or polyhedral");
    const TimeGrid& G = s.grid;
    const int N = G.steps(), n = s.n(), m = s.m(), l = s.l();
    const QuadraticCost& c = s.catalog->cost;
    const int blk = n + 2 * m + l;
    const Eigen::Index run_feats = static_cast<Eigen::Index>(blk) * ((static_cast<Eigen::Index>(1) << N) - 1);
    const Eigen::Index nf = run_feats + static_cast<Eigen::Index>(n) * static_cast<Eigen::Index>(G.leaves()) + m;
    auto run_off = [&](int i, std::size_t w) {
        return static_cast<Eigen::Index>(blk) * ((static_cast<Eigen::Index>(1) << i) - 1 + static_cast<Eigen::Index>(w));
    };
    auto leaf_off = [&](std::size_t leaf) { return run_feats + static_cast<Eigen::Index>(n) * static_cast<Eigen::Index>(leaf); };
    const Eigen::Index y0_off = nf - m;

    auto features = [&](const AdaptedProcess& X, const AdaptedProcess& Y, const TwoParamProcess& Z, const AdaptedProcess& u) {
        Vec F(nf);
        for (int i = 0; i < N; ++i)
            for (std::size_t w = 0; w < TimeGrid::nodes(i); ++w) {
                const Eigen::Index o = run_off(i, w);
                F.segment(o, n) = X.at(i, w);
                F.segment(o + n, m) = Y.at(i, w);
                F.segment(o + n + m, m) = Z.at(0, i, w);
                F.segment(o + n + 2 * m, l) = u.at(i, w);
            }
        for (std::size_t leaf = 0; leaf < G.leaves(); ++leaf) F.segment(leaf_off(leaf), n) = X.at(N, leaf);
        F.segment(y0_off, m) = Y.at(0, 0);
        return F;
    };

    // Weighted quadratic and linear parts of J in feature space.
    Mat Q = Mat::Zero(nf, nf);
    Vec q = Vec::Zero(nf);
    for (int i = 0; i < N; ++i) {
        const double wgt = G.dt() / static_cast<double>(TimeGrid::nodes(i));
        for (std::size_t w = 0; w < TimeGrid::nodes(i); ++w) {
            const Eigen::Index o = run_off(i, w);
            Q.block(o, o, n, n) = wgt * c.Qx;
            Q.block(o + n, o + n, m, m) = wgt * c.Qy;
            Q.block(o + n + m, o + n + m, m, m) = wgt * c.Qz;
            Q.block(o + n + 2 * m, o + n + 2 * m, l, l) = wgt * c.R;
            q.segment(o, n) = wgt * c.qx;
            q.segment(o + n, m) = wgt * c.qy;
            q.segment(o + n + m, m) = wgt * c.qz;
            q.segment(o + n + 2 * m, l) = wgt * c.r;
        }
    }
    const double lw = 1.0 / static_cast<double>(G.leaves());
    for (std::size_t leaf = 0; leaf < G.leaves(); ++leaf) {
        Q.block(leaf_off(leaf), leaf_off(leaf), n, n) = lw * c.Hx;
        q.segment(leaf_off(leaf), n) = lw * c.hx;
    }
    Q.block(y0_off, y0_off, m, m) = c.Hy;
    q.segment(y0_off, m) = c.hy;
    // Symmetric part only enters the quadratic form.
    const Mat Qs = 0.5 * (Q + Q.transpose());

    const AdaptedProcess zero(N, l);
    const StateRun base = run_state(s, zero);
    const Vec F0 = features(base.fwd.X, base.bwd.Y, base.bwd.Z, zero);
    const Eigen::Index nu = control_offset(l, N, 0);
    Mat L(nf, nu);
    for (Eigen::Index k = 0; k < nu; ++k) {
        Vec e = Vec::Zero(nu);
        e(k) = 1.0;
        const AdaptedProcess v = unflatten_control(e, N, l);
        const VariationalSolution lin = solve_variational(s, base, zero, v);
        L.col(k) = features(lin.X1, lin.Y1, lin.Z1, v);
    }

    QPOracleResult out;
    out.hessian = L.transpose() * Qs * L;
    out.hessian = 0.5 * (out.hessian + out.hessian.transpose());
    out.gradient = L.transpose() * (Qs * F0 + q);
    out.constant = 0.5 * F0.dot(Qs * F0) + q.dot(F0);

    Eigen::LLT<Mat> llt(out.hessian);
    if (llt.info() != Eigen::Success) throw SolverError("qp_oracle: cost is not strictly convex in the control");
    Vec x;
    if (std::holds_alternative<Unconstrained>(s.constraint)) {
        x = llt.solve(-out.gradient);
    } else {
        const auto& P = std::get<Polyhedron>(s.constraint);
        const Eigen::Index nodes = nu / l;
        Mat C = Mat::Zero(nodes * P.A.rows(), nu);
        Vec d(nodes * P.A.rows());
        Vec x0(nu);
        const Vec start = detail::project_small_polyhedron(P.A, P.b, Vec::Zero(l));
        for (Eigen::Index k = 0; k < nodes; ++k) {
            C.block(k * P.A.rows(), k * l, P.A.rows(), l) = P.A;
            d.segment(k * P.A.rows(), P.A.rows()) = P.b;
            x0.segment(k * l, l) = start;
        }
        QPSolution qs = active_set_qp(out.hessian, out.gradient, C, d, x0);
        x = qs.x;
        out.active = qs.active;
    }
    out.u = unflatten_control(x, N, l);
    out.J = out.constant + out.gradient.dot(x) + 0.5 * x.dot(out.hessian * x);
    return out;
}

} // namespace fbsvie
