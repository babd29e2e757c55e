#pragma once

// Adjacent cones of closed control regions, polyhedral cone projection via NNLS,
// linear minimisation over cone and unit ball, KKT multipliers, and a numeric
// probe of the adjacent-cone definition through distance quotients.

#include "fbsvie/scenario.hpp"

#include <Eigen/QR>

#include <limits>

namespace fbsvie {

class ConeError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct ConeRep {
    enum class Kind { FullSpace, Polyhedral };
    Kind kind = Kind::FullSpace;
    int dim = 0;
    Mat normals;  // dim x k, cone = {v : normals' v <= 0}

    static ConeRep full(int d) { return {Kind::FullSpace, d, Mat(d, 0)}; }
    static ConeRep polyhedral(Mat W) {
        const int d = static_cast<int>(W.rows());
        return {Kind::Polyhedral, d, std::move(W)};
    }
    bool trivial() const { return kind == Kind::FullSpace; }
    int count() const { return static_cast<int>(normals.cols()); }

    bool contains(const Vec& v, double tol = 1e-12) const {
        if (kind == Kind::FullSpace || normals.cols() == 0) return true;
        return (normals.transpose() * v).maxCoeff() <= tol * (1.0 + v.norm());
    }
};

inline const char* kind_name(const ConeRep& c) { return c.kind == ConeRep::Kind::FullSpace ? "full" : "polyhedral"; }

// Lawson-Hanson active-set NNLS: argmin_{x >= 0} |A x - b|.
inline Vec nnls(const Mat& A, const Vec& b, int max_iter = -1) {
    const int k = static_cast<int>(A.cols());
    if (max_iter < 0) max_iter = 30 * (k + 1);
    Vec x = Vec::Zero(k);
    if (k == 0) return x;
    std::vector<bool> passive(k, false);
    const double tol = 1e-13 * (1.0 + A.norm() * (1.0 + b.norm()));

    auto solve_passive = [&](Vec& z) {
        std::vector<int> idx;
        for (int j = 0; j < k; ++j)
            if (passive[j]) idx.push_back(j);
        z = Vec::Zero(k);
        if (idx.empty()) return;
        Mat Ap(A.rows(), static_cast<int>(idx.size()));
        for (std::size_t c = 0; c < idx.size(); ++c) Ap.col(c) = A.col(idx[c]);
        Vec zp = Ap.colPivHouseholderQr().solve(b);
        for (std::size_t c = 0; c < idx.size(); ++c) z(idx[c]) = zp(c);
    };

    for (int outer = 0; outer < max_iter; ++outer) {
        Vec grad = A.transpose() * (b - A * x);
        int best = -1;
        double best_val = tol;
        for (int j = 0; j < k; ++j)
            if (!passive[j] && grad(j) > best_val) {
                best_val = grad(j);
                best = j;
            }
        if (best < 0) return x;
        passive[best] = true;
        for (int inner = 0; inner <= k; ++inner) {
            Vec z;
            solve_passive(z);
            bool ok = true;
            for (int j = 0; j < k; ++j)
                if (passive[j] && z(j) <= 0) ok = false;
            if (ok) {
                x = z;
                break;
            }
            double alpha = 1.0;
            for (int j = 0; j < k; ++j)
                if (passive[j] && z(j) <= 0) alpha = std::min(alpha, x(j) / (x(j) - z(j)));
            x += alpha * (z - x);
            for (int j = 0; j < k; ++j)
                if (passive[j] && x(j) <= tol) {
                    passive[j] = false;
                    x(j) = 0.0;
                }
        }
    }
    throw ConeError("nnls: iteration cap reached");
}

// Euclidean projection onto the cone: x minus its projection onto the polar cone
// generated by the normals (Moreau decomposition).
inline Vec project_polyhedral_cone(const ConeRep& cone, const Vec& x) {
    if (cone.kind == ConeRep::Kind::FullSpace || cone.count() == 0) return x;
    const Vec lam = nnls(cone.normals, x);
    return x - cone.normals * lam;
}

struct ConeMin {
    double value = 0.0;
    Vec argmin;
};

// min over v in cone, |v| <= 1 of <F, v>.
inline ConeMin cone_min_linear(const Vec& F, const ConeRep& cone) {
    const Vec p = project_polyhedral_cone(cone, -F);
    const double norm = p.norm();
    // roundoff-sized projections mean -F lies in the polar cone
    if (norm <= 1e-13 * (1.0 + F.norm())) return {0.0, Vec::Zero(F.size())};
    return {-norm, p / norm};
}

struct KktResult {
    Vec lambda;
    double residual = 0.0;
};

// min_{lambda >= 0} |F + sum lambda_i w_i|.
inline KktResult kkt_multipliers(const Vec& F, const Mat& normals) {
    if (normals.cols() == 0) return {Vec(0), F.norm()};
    Vec lam = nnls(normals, -F);
    return {lam, (F + normals * lam).norm()};
}

// Linearly independent active gradients.
inline bool licq(const Mat& W) {
    if (W.cols() == 0) return true;
    Eigen::ColPivHouseholderQR<Mat> qr(W);
    qr.setThreshold(1e-10);
    return qr.rank() == W.cols();
}

inline std::vector<int> active_set(const ControlConstraint& c, const Vec& u, std::optional<double> activity_tol) {
    std::vector<int> act;
    for (int i = 0; i < constraint_count(c); ++i)
        if (std::abs(constraint_value(c, i, u)) <= activity_tolerance(c, i, u, activity_tol)) act.push_back(i);
    return act;
}

inline ConeRep adjacent_cone(const ControlConstraint& c, const Vec& u, std::optional<double> activity_tol = std::nullopt) {
    if (!contains(c, u, activity_tol)) throw ConeError("adjacent_cone: point lies outside U");
    const std::vector<int> act = active_set(c, u, activity_tol);
    if (act.empty()) return ConeRep::full(static_cast<int>(u.size()));
    Mat W(u.size(), static_cast<int>(act.size()));
    for (std::size_t k = 0; k < act.size(); ++k) W.col(k) = constraint_grad(c, act[k], u);
    // Linear constraints need no qualification; smooth ones must satisfy LICQ.
    if (!std::holds_alternative<Polyhedron>(c) && !licq(W))
        throw ConeError("adjacent_cone: active constraint gradients are linearly dependent (LICQ fails)");
    return ConeRep::polyhedral(std::move(W));
}

// ---------------------------------------------------------------------------
// Distance to U

struct NearestPoint {
    double dist = 0.0;
    Vec y;
};

namespace detail {

// Projection onto {A y <= b} for a handful of rows: enumerate working sets and keep
// the one meeting the KKT conditions.
inline Vec project_small_polyhedron(const Mat& A, const Vec& b, const Vec& x) {
    const int k = static_cast<int>(A.rows());
    if (k > 16) throw std::invalid_argument("project_small_polyhedron: too many rows");
    if (k == 0 || ((A * x - b).array() <= 0).all()) return x;
    const double feas_tol = 1e-12 * (1.0 + b.cwiseAbs().maxCoeff() + A.norm() * x.norm());
    Vec best;
    double best_d = std::numeric_limits<double>::infinity();
    for (unsigned mask = 1; mask < (1u << k); ++mask) {
        std::vector<int> rows;
        for (int i = 0; i < k; ++i)
            if (mask & (1u << i)) rows.push_back(i);
        if (static_cast<int>(rows.size()) > x.size()) continue;
        Mat As(rows.size(), x.size());
        Vec bs(rows.size());
        for (std::size_t r = 0; r < rows.size(); ++r) {
            As.row(r) = A.row(rows[r]);
            bs(r) = b(rows[r]);
        }
        if (!licq(As.transpose())) continue;
        // y = x - As' lam, As y = bs
        const Vec lam = (As * As.transpose()).ldlt().solve(As * x - bs);
        if ((lam.array() < -1e-12).any()) continue;
        const Vec y = x - As.transpose() * lam;
        if (((A * y - b).array() > feas_tol).any()) continue;
        const double d = (y - x).norm();
        if (d < best_d) {
            best_d = d;
            best = y;
        }
    }
    if (best.size() == 0) throw ConeError("project_small_polyhedron: no feasible working set");
    return best;
}

} // namespace detail

// Nearest point of U: closed forms for ball, polyhedron and centred annulus; other
// smooth sets use a local projection iteration onto the violated constraints.
inline NearestPoint nearest_point(const ControlConstraint& c, const Vec& x, int max_iter = 200) {
    if (std::holds_alternative<Unconstrained>(c)) return {0.0, x};
    if (auto b = std::get_if<Ball>(&c)) {
        const Vec d = x - b->center;
        const double r = d.norm();
        if (r <= b->radius) return {0.0, x};
        Vec y = b->center + d * (b->radius / r);
        return {r - b->radius, y};
    }
    if (auto p = std::get_if<Polyhedron>(&c)) {
        Vec y = detail::project_small_polyhedron(p->A, p->b, x);
        return {(y - x).norm(), y};
    }
    const auto& s = std::get<SmoothInequalities>(c);
    if (auto ann = as_annulus(s)) {
        const double r = x.norm(), ri = std::sqrt(ann->first), ro = std::sqrt(ann->second);
        if (r >= ri && r <= ro) return {0.0, x};
        Vec dir = r > 0 ? Vec(x / r) : Vec(Vec::Unit(x.size(), 0));
        const double target = r < ri ? ri : ro;
        return {std::abs(r - target), dir * target};
    }
    Vec y = x;
    for (int it = 0; it < max_iter; ++it) {
        bool moved = false;
        for (const auto& q : s.ineqs) {
            const double v = q.value(y);
            if (v > 0) {
                const Vec gq = q.grad(y);
                const double gn = gq.squaredNorm();
                if (gn == 0) throw ConeError("nearest_point: vanishing constraint gradient");
                y -= (v / gn) * gq;
                moved = true;
            }
        }
        if (!moved) return {(y - x).norm(), y};
    }
    throw ConeError("nearest_point: local projection did not converge");
}

inline double dist_to_set(const ControlConstraint& c, const Vec& x) { return nearest_point(c, x).dist; }

struct DistProbe {
    std::vector<double> h;
    std::vector<double> quotients;  // dist(u + h v, U) / h
    std::vector<Vec> v_h;           // (y_h - u) / h with y_h the nearest point
    bool member = false;            // last quotient below the probe tolerance
};

inline std::vector<double> default_h_sequence() {
    std::vector<double> hs;
    for (int k = 2; k <= 8; ++k) hs.push_back(std::pow(10.0, -k));
    return hs;
}

inline DistProbe dist_limit_probe(const ControlConstraint& c, const Vec& u, const Vec& v,
                                  const std::vector<double>& hs = default_h_sequence(), double probe_tol = 1e-5) {
    if (!contains(c, u, 1e-10)) throw ConeError("dist_limit_probe: base point lies outside U");
    DistProbe out;
    for (double h : hs) {
        NearestPoint np = nearest_point(c, u + h * v);
        out.h.push_back(h);
        out.quotients.push_back(np.dist / h);
        out.v_h.push_back((np.y - u) / h);
    }
    out.member = !out.quotients.empty() && out.quotients.back() < probe_tol;
    return out;
}

} // namespace fbsvie
