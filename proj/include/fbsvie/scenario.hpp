#pragma once

// Problem description: coefficient evaluators with analytic first derivatives,
// quadratic cost, control region, grid and solver tolerances. Coefficients come
// from a small catalog (affine maps scaled by a kernel in t - s, optionally with
// a bounded sin(x) term) or from a caller-provided Model subclass.

#include "fbsvie/lattice.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

namespace fbsvie {

using json = nlohmann::json;

// Evaluator interface. Derivatives are supplied, never differentiated numerically.
class Model {
public:
    Model(int n, int m, int l) : n_(n), m_(m), l_(l) {}
    virtual ~Model() = default;

    int n() const { return n_; }
    int m() const { return m_; }
    int l() const { return l_; }

    virtual Vec phi(double t) const = 0;

    virtual Vec b(double t, double s, const Vec& x, const Vec& u) const = 0;
    virtual Mat b_x(double t, double s, const Vec& x, const Vec& u) const = 0;
    virtual Mat b_u(double t, double s, const Vec& x, const Vec& u) const = 0;

    virtual Vec sigma(double t, double s, const Vec& x, const Vec& u) const = 0;
    virtual Mat sigma_x(double t, double s, const Vec& x, const Vec& u) const = 0;
    virtual Mat sigma_u(double t, double s, const Vec& x, const Vec& u) const = 0;

    virtual Vec g(double t, double s, const Vec& x, const Vec& y, const Vec& z, const Vec& u) const = 0;
    virtual Mat g_x(double t, double s, const Vec& x, const Vec& y, const Vec& z, const Vec& u) const = 0;
    virtual Mat g_y(double t, double s, const Vec& x, const Vec& y, const Vec& z, const Vec& u) const = 0;
    virtual Mat g_z(double t, double s, const Vec& x, const Vec& y, const Vec& z, const Vec& u) const = 0;
    virtual Mat g_u(double t, double s, const Vec& x, const Vec& y, const Vec& z, const Vec& u) const = 0;

    virtual Vec psi(double t, const Vec& x) const = 0;
    virtual Mat psi_x(double t, const Vec& x) const = 0;

    virtual double f(double s, const Vec& x, const Vec& y, const Vec& z, const Vec& u) const = 0;
    virtual Vec f_x(double s, const Vec& x, const Vec& y, const Vec& z, const Vec& u) const = 0;
    virtual Vec f_y(double s, const Vec& x, const Vec& y, const Vec& z, const Vec& u) const = 0;
    virtual Vec f_z(double s, const Vec& x, const Vec& y, const Vec& z, const Vec& u) const = 0;
    virtual Vec f_u(double s, const Vec& x, const Vec& y, const Vec& z, const Vec& u) const = 0;

    virtual double h(const Vec& xT, const Vec& y0) const = 0;
    virtual Vec h_x(const Vec& xT, const Vec& y0) const = 0;
    virtual Vec h_y(const Vec& xT, const Vec& y0) const = 0;

    // True when b, sigma, g, psi are affine in their state/control arguments.
    virtual bool affine() const { return false; }

protected:
    int n_, m_, l_;
};

// ---------------------------------------------------------------------------
// Catalog

struct Kernel {
    enum class Kind { Constant, Exponential, Polynomial };
    Kind kind = Kind::Constant;
    double kappa = 0.0;          // exponential rate
    std::vector<double> coeffs;  // polynomial c0 + c1 tau + ...

    double operator()(double tau) const {
        switch (kind) {
        case Kind::Constant: return 1.0;
        case Kind::Exponential: return std::exp(-kappa * tau);
        case Kind::Polynomial: {
            double acc = 0.0;
            for (auto it = coeffs.rbegin(); it != coeffs.rend(); ++it) acc = acc * tau + *it;
            return acc;
        }
        }
        return 1.0;
    }
};

// out = k(tau) * (sum_slot M_slot * arg_slot + c + S * sin(x)).
struct AffineTerm {
    Kernel kernel;
    Mat x, y, z, u;  // empty slots are zero matrices of the right shape
    Vec c;
    Mat sin_x;

    bool nonlinear() const { return sin_x.size() > 0 && sin_x.cwiseAbs().maxCoeff() > 0.0; }

    Vec eval(double tau, const Vec& xv, const Vec& yv, const Vec& zv, const Vec& uv) const {
        Vec out = c + x * xv + u * uv;
        if (y.size() > 0) out += y * yv;
        if (z.size() > 0) out += z * zv;
        if (nonlinear()) out += sin_x * xv.array().sin().matrix();
        return kernel(tau) * out;
    }
    Mat dx(double tau, const Vec& xv) const {
        Mat d = x;
        if (nonlinear()) d += sin_x * xv.array().cos().matrix().asDiagonal();
        return kernel(tau) * d;
    }
    Mat dy(double tau) const { return kernel(tau) * y; }
    Mat dz(double tau) const { return kernel(tau) * z; }
    Mat du(double tau) const { return kernel(tau) * u; }
};

// f = 1/2 (x'Qx x + y'Qy y + z'Qz z + u'R u) + qx'x + qy'y + qz'z + r'u
// h = 1/2 (x'Hx x + y0'Hy y0) + hx'x + hy'y0
struct QuadraticCost {
    Mat Qx, Qy, Qz, R;
    Vec qx, qy, qz, r;
    Mat Hx, Hy;
    Vec hx, hy;
};

struct CatalogSpec {
    int n = 1, m = 1, l = 1;
    Vec phi0, phi_slope;
    AffineTerm b, sigma, g, psi;
    QuadraticCost cost;
};

class CatalogModel final : public Model {
public:
    explicit CatalogModel(CatalogSpec spec, double horizon)
        : Model(spec.n, spec.m, spec.l), s_(std::move(spec)), T_(horizon) {}

    const CatalogSpec& spec() const { return s_; }

    Vec phi(double t) const override { return s_.phi0 + s_.phi_slope * t; }

    Vec b(double t, double s, const Vec& x, const Vec& u) const override { return s_.b.eval(t - s, x, {}, {}, u); }
    Mat b_x(double t, double s, const Vec& x, const Vec&) const override { return s_.b.dx(t - s, x); }
    Mat b_u(double t, double s, const Vec&, const Vec&) const override { return s_.b.du(t - s); }

    Vec sigma(double t, double s, const Vec& x, const Vec& u) const override { return s_.sigma.eval(t - s, x, {}, {}, u); }
    Mat sigma_x(double t, double s, const Vec& x, const Vec&) const override { return s_.sigma.dx(t - s, x); }
    Mat sigma_u(double t, double s, const Vec&, const Vec&) const override { return s_.sigma.du(t - s); }

    Vec g(double t, double s, const Vec& x, const Vec& y, const Vec& z, const Vec& u) const override {
        return s_.g.eval(t - s, x, y, z, u);
    }
    Mat g_x(double t, double s, const Vec& x, const Vec&, const Vec&, const Vec&) const override { return s_.g.dx(t - s, x); }
    Mat g_y(double t, double s, const Vec&, const Vec&, const Vec&, const Vec&) const override { return s_.g.dy(t - s); }
    Mat g_z(double t, double s, const Vec&, const Vec&, const Vec&, const Vec&) const override { return s_.g.dz(t - s); }
    Mat g_u(double t, double s, const Vec&, const Vec&, const Vec&, const Vec&) const override { return s_.g.du(t - s); }

    // psi(t, x) uses the kernel in T - t.
    Vec psi(double t, const Vec& x) const override { return s_.psi.eval(T_ - t, x, {}, {}, Vec::Zero(0)); }
    Mat psi_x(double t, const Vec& x) const override { return s_.psi.dx(T_ - t, x); }

    double f(double, const Vec& x, const Vec& y, const Vec& z, const Vec& u) const override {
        const auto& c = s_.cost;
        return 0.5 * (x.dot(c.Qx * x) + y.dot(c.Qy * y) + z.dot(c.Qz * z) + u.dot(c.R * u)) + c.qx.dot(x) +
               c.qy.dot(y) + c.qz.dot(z) + c.r.dot(u);
    }
    Vec f_x(double, const Vec& x, const Vec&, const Vec&, const Vec&) const override { return s_.cost.Qx * x + s_.cost.qx; }
    Vec f_y(double, const Vec&, const Vec& y, const Vec&, const Vec&) const override { return s_.cost.Qy * y + s_.cost.qy; }
    Vec f_z(double, const Vec&, const Vec&, const Vec& z, const Vec&) const override { return s_.cost.Qz * z + s_.cost.qz; }
    Vec f_u(double, const Vec&, const Vec&, const Vec&, const Vec& u) const override { return s_.cost.R * u + s_.cost.r; }

    double h(const Vec& xT, const Vec& y0) const override {
        const auto& c = s_.cost;
        return 0.5 * (xT.dot(c.Hx * xT) + y0.dot(c.Hy * y0)) + c.hx.dot(xT) + c.hy.dot(y0);
    }
    Vec h_x(const Vec& xT, const Vec&) const override { return s_.cost.Hx * xT + s_.cost.hx; }
    Vec h_y(const Vec&, const Vec& y0) const override { return s_.cost.Hy * y0 + s_.cost.hy; }

    bool affine() const override {
        return !s_.b.nonlinear() && !s_.sigma.nonlinear() && !s_.g.nonlinear() && !s_.psi.nonlinear();
    }

private:
    CatalogSpec s_;
    double T_;
};

// ---------------------------------------------------------------------------
// Control region

struct Unconstrained {};
struct Ball {
    Vec center;
    double radius = 1.0;
};
// {u : A u <= b}
struct Polyhedron {
    Mat A;
    Vec b;
};
// One smooth inequality g(u) <= 0 from a small family.
struct SmoothIneq {
    enum class Kind { OuterSphere, InnerSphere, Halfspace };
    Kind kind = Kind::Halfspace;
    Vec center;        // spheres
    double rsq = 1.0;  // spheres: squared radius
    Vec a;             // halfspace normal
    double offset = 0; // halfspace: a.u - offset <= 0

    double value(const Vec& u) const {
        switch (kind) {
        case Kind::OuterSphere: return (u - center).squaredNorm() - rsq;
        case Kind::InnerSphere: return rsq - (u - center).squaredNorm();
        case Kind::Halfspace: return a.dot(u) - offset;
        }
        return 0.0;
    }
    Vec grad(const Vec& u) const {
        switch (kind) {
        case Kind::OuterSphere: return 2.0 * (u - center);
        case Kind::InnerSphere: return -2.0 * (u - center);
        case Kind::Halfspace: return a;
        }
        return a;
    }
};
struct SmoothInequalities {
    std::vector<SmoothIneq> ineqs;
    std::optional<double> activity_tol;
};

using ControlConstraint = std::variant<Unconstrained, Ball, Polyhedron, SmoothInequalities>;

// Annulus inner_sq <= |u|^2 <= outer_sq as two smooth inequalities.
inline SmoothInequalities annulus(double inner_sq, double outer_sq, int dim = 2) {
    SmoothIneq outer{SmoothIneq::Kind::OuterSphere, Vec::Zero(dim), outer_sq, {}, 0.0};
    SmoothIneq inner{SmoothIneq::Kind::InnerSphere, Vec::Zero(dim), inner_sq, {}, 0.0};
    return {{outer, inner}, std::nullopt};
}

// Builtin torus: u1^2 + u2^2 - 4 <= 0 and 2 - u1^2 - u2^2 <= 0.
inline SmoothInequalities torus() { return annulus(2.0, 4.0, 2); }

// Returns (inner_sq, outer_sq) when the inequalities describe a centred annulus.
inline std::optional<std::pair<double, double>> as_annulus(const SmoothInequalities& s) {
    if (s.ineqs.size() != 2) return std::nullopt;
    const SmoothIneq* in = nullptr;
    const SmoothIneq* out = nullptr;
    for (const auto& q : s.ineqs) {
        if (q.kind == SmoothIneq::Kind::OuterSphere) out = &q;
        if (q.kind == SmoothIneq::Kind::InnerSphere) in = &q;
    }
    if (!in || !out || (in->center - out->center).norm() != 0.0 || in->center.norm() != 0.0) return std::nullopt;
    return std::make_pair(in->rsq, out->rsq);
}

inline int constraint_count(const ControlConstraint& c) {
    if (auto p = std::get_if<Polyhedron>(&c)) return static_cast<int>(p->A.rows());
    if (auto s = std::get_if<SmoothInequalities>(&c)) return static_cast<int>(s->ineqs.size());
    if (std::holds_alternative<Ball>(c)) return 1;
    return 0;
}

// Constraint functions in the uniform g^i(u) <= 0 form.
inline double constraint_value(const ControlConstraint& c, int i, const Vec& u) {
    if (auto p = std::get_if<Polyhedron>(&c)) return p->A.row(i).dot(u) - p->b(i);
    if (auto s = std::get_if<SmoothInequalities>(&c)) return s->ineqs.at(i).value(u);
    if (auto bl = std::get_if<Ball>(&c)) return (u - bl->center).squaredNorm() - bl->radius * bl->radius;
    throw std::out_of_range("constraint_value: no constraints");
}
inline Vec constraint_grad(const ControlConstraint& c, int i, const Vec& u) {
    if (auto p = std::get_if<Polyhedron>(&c)) return p->A.row(i).transpose();
    if (auto s = std::get_if<SmoothInequalities>(&c)) return s->ineqs.at(i).grad(u);
    if (auto bl = std::get_if<Ball>(&c)) return 2.0 * (u - bl->center);
    throw std::out_of_range("constraint_grad: no constraints");
}

// Default band: 1e-8 * (1 + |g^i(u)| scale), the scale taken from the gradient size.
inline double activity_tolerance(const ControlConstraint& c, int i, const Vec& u, std::optional<double> fixed) {
    if (fixed) return *fixed;
    if (auto s = std::get_if<SmoothInequalities>(&c); s && s->activity_tol) return *s->activity_tol;
    double scale = constraint_grad(c, i, u).norm() * (1.0 + u.norm());
    return 1e-8 * (1.0 + scale);
}

inline bool contains(const ControlConstraint& c, const Vec& u, std::optional<double> tol = std::nullopt) {
    const int k = constraint_count(c);
    for (int i = 0; i < k; ++i)
        if (constraint_value(c, i, u) > activity_tolerance(c, i, u, tol)) return false;
    return true;
}

// ---------------------------------------------------------------------------
// Scenario

struct Tolerances {
    double picard_tol = 1e-12;
    int picard_max_iter = 200;
    std::optional<double> activity_tol;
    std::optional<double> nc_tol;
};

struct Scenario {
    TimeGrid grid;
    std::shared_ptr<const Model> model;
    ControlConstraint constraint = Unconstrained{};
    Tolerances tol;
    std::uint64_t seed = 0;
    std::optional<CatalogSpec> catalog;  // present when built from the catalog

    int n() const { return model->n(); }
    int m() const { return model->m(); }
    int l() const { return model->l(); }
    int steps() const { return grid.steps(); }
};

class ScenarioError : public std::runtime_error {
public:
    ScenarioError(std::string field, const std::string& what)
        : std::runtime_error(field + ": " + what), field_(std::move(field)) {}
    const std::string& field() const { return field_; }

private:
    std::string field_;
};

namespace detail {

inline void reject_unknown(const json& j, const std::string& where, std::initializer_list<const char*> allowed) {
    if (!j.is_object()) throw ScenarioError(where, "expected an object");
    std::set<std::string> ok(allowed.begin(), allowed.end());
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!ok.count(it.key())) throw ScenarioError(where, "unknown key '" + it.key() + "'");
}

inline Vec read_vec(const json& j, const std::string& field, int dim) {
    if (!j.is_array()) throw ScenarioError(field, "expected an array");
    if (static_cast<int>(j.size()) != dim)
        throw ScenarioError(field, "expected length " + std::to_string(dim) + ", got " + std::to_string(j.size()));
    Vec v(dim);
    for (int i = 0; i < dim; ++i) {
        if (!j[i].is_number()) throw ScenarioError(field, "non-numeric entry");
        v(i) = j[i].get<double>();
    }
    return v;
}

inline Mat read_mat(const json& j, const std::string& field, int rows, int cols) {
    if (!j.is_array()) throw ScenarioError(field, "expected an array of rows");
    if (static_cast<int>(j.size()) != rows)
        throw ScenarioError(field, "expected " + std::to_string(rows) + " rows, got " + std::to_string(j.size()));
    Mat M(rows, cols);
    for (int r = 0; r < rows; ++r) {
        const json& row = j[r];
        if (!row.is_array() || static_cast<int>(row.size()) != cols)
            throw ScenarioError(field, "row " + std::to_string(r) + " must have " + std::to_string(cols) + " entries");
        for (int c = 0; c < cols; ++c) {
            if (!row[c].is_number()) throw ScenarioError(field, "non-numeric entry");
            M(r, c) = row[c].get<double>();
        }
    }
    return M;
}

inline json write_vec(const Vec& v) {
    json a = json::array();
    for (int i = 0; i < v.size(); ++i) a.push_back(v(i));
    return a;
}
inline json write_mat(const Mat& M) {
    json a = json::array();
    for (int r = 0; r < M.rows(); ++r) {
        json row = json::array();
        for (int c = 0; c < M.cols(); ++c) row.push_back(M(r, c));
        a.push_back(row);
    }
    return a;
}

inline Kernel read_kernel(const json& j, const std::string& field) {
    Kernel k;
    if (j.is_null()) return k;
    reject_unknown(j, field, {"type", "kappa", "coeffs"});
    const std::string type = j.value("type", "constant");
    if (type == "constant") {
        k.kind = Kernel::Kind::Constant;
    } else if (type == "exponential") {
        k.kind = Kernel::Kind::Exponential;
        k.kappa = j.value("kappa", 0.0);
    } else if (type == "polynomial") {
        k.kind = Kernel::Kind::Polynomial;
        if (!j.contains("coeffs") || !j["coeffs"].is_array() || j["coeffs"].empty())
            throw ScenarioError(field, "polynomial kernel needs a non-empty coeffs array");
        for (const auto& c : j["coeffs"]) k.coeffs.push_back(c.get<double>());
    } else {
        throw ScenarioError(field, "unknown kernel type '" + type + "'");
    }
    return k;
}

inline json write_kernel(const Kernel& k) {
    switch (k.kind) {
    case Kernel::Kind::Constant: return json{{"type", "constant"}};
    case Kernel::Kind::Exponential: return json{{"type", "exponential"}, {"kappa", k.kappa}};
    case Kernel::Kind::Polynomial: return json{{"type", "polynomial"}, {"coeffs", k.coeffs}};
    }
    return json{};
}

inline Mat opt_mat(const json& j, const char* key, const std::string& field, int rows, int cols) {
    if (!j.contains(key)) return Mat::Zero(rows, cols);
    return read_mat(j[key], field + "." + key, rows, cols);
}
inline Vec opt_vec(const json& j, const char* key, const std::string& field, int dim) {
    if (!j.contains(key)) return Vec::Zero(dim);
    return read_vec(j[key], field + "." + key, dim);
}

// out_dim rows; slot column counts given (0 = slot not allowed).
inline AffineTerm read_term(const json& j, const std::string& field, int out_dim, int nx, int ny, int nz, int nu) {
    AffineTerm t;
    if (j.is_null()) {
        t.x = Mat::Zero(out_dim, nx);
        t.y = Mat::Zero(out_dim, ny);
        t.z = Mat::Zero(out_dim, nz);
        t.u = Mat::Zero(out_dim, nu);
        t.c = Vec::Zero(out_dim);
        t.sin_x = Mat::Zero(out_dim, nx);
        return t;
    }
    if (ny > 0)
        reject_unknown(j, field, {"kernel", "x", "y", "z", "u", "const", "sin_x"});
    else if (nu > 0)
        reject_unknown(j, field, {"kernel", "x", "u", "const", "sin_x"});
    else
        reject_unknown(j, field, {"kernel", "x", "const", "sin_x"});
    t.kernel = read_kernel(j.contains("kernel") ? j["kernel"] : json(), field + ".kernel");
    t.x = opt_mat(j, "x", field, out_dim, nx);
    t.y = opt_mat(j, "y", field, out_dim, ny);
    t.z = opt_mat(j, "z", field, out_dim, nz);
    t.u = opt_mat(j, "u", field, out_dim, nu);
    t.c = opt_vec(j, "const", field, out_dim);
    t.sin_x = opt_mat(j, "sin_x", field, out_dim, nx);
    return t;
}

inline json write_term(const AffineTerm& t, bool with_yz, bool with_u) {
    json j;
    j["kernel"] = write_kernel(t.kernel);
    j["x"] = write_mat(t.x);
    if (with_yz) {
        j["y"] = write_mat(t.y);
        j["z"] = write_mat(t.z);
    }
    if (with_u) j["u"] = write_mat(t.u);
    j["const"] = write_vec(t.c);
    j["sin_x"] = write_mat(t.sin_x);
    return j;
}

} // namespace detail

inline ControlConstraint parse_constraint(const json& j, int l) {
    using namespace detail;
    if (j.is_null()) return Unconstrained{};
    reject_unknown(j, "constraint", {"type", "center", "radius", "A", "b", "inequalities", "activity_tol",
                                     "inner_sq", "outer_sq"});
    const std::string type = j.value("type", "unconstrained");
    if (type == "unconstrained") return Unconstrained{};
    if (type == "ball") {
        Ball b{opt_vec(j, "center", "constraint", l), j.value("radius", 1.0)};
        if (!(b.radius > 0)) throw ScenarioError("constraint.radius", "must be positive");
        return b;
    }
    if (type == "polyhedron") {
        if (!j.contains("A") || !j.contains("b")) throw ScenarioError("constraint", "polyhedron needs A and b");
        const int rows = static_cast<int>(j["A"].size());
        return Polyhedron{read_mat(j["A"], "constraint.A", rows, l), read_vec(j["b"], "constraint.b", rows)};
    }
    if (type == "torus" || type == "annulus") {
        if (l != 2) throw ScenarioError("constraint", type + " needs control dimension 2");
        SmoothInequalities s = type == "torus" ? torus() : annulus(j.value("inner_sq", 2.0), j.value("outer_sq", 4.0));
        if (j.contains("activity_tol")) s.activity_tol = j["activity_tol"].get<double>();
        return s;
    }
    if (type == "smooth") {
        SmoothInequalities s;
        if (j.contains("activity_tol")) s.activity_tol = j["activity_tol"].get<double>();
        if (!j.contains("inequalities") || !j["inequalities"].is_array())
            throw ScenarioError("constraint.inequalities", "expected an array");
        int k = 0;
        for (const auto& q : j["inequalities"]) {
            const std::string f = "constraint.inequalities[" + std::to_string(k++) + "]";
            reject_unknown(q, f, {"kind", "center", "rsq", "a", "offset"});
            SmoothIneq g;
            const std::string kind = q.value("kind", "halfspace");
            if (kind == "outer_sphere" || kind == "inner_sphere") {
                g.kind = kind == "outer_sphere" ? SmoothIneq::Kind::OuterSphere : SmoothIneq::Kind::InnerSphere;
                g.center = opt_vec(q, "center", f, l);
                g.rsq = q.value("rsq", 1.0);
            } else if (kind == "halfspace") {
                g.a = read_vec(q.at("a"), f + ".a", l);
                g.offset = q.value("offset", 0.0);
            } else {
                throw ScenarioError(f, "unknown kind '" + kind + "'");
            }
            s.ineqs.push_back(g);
        }
        return s;
    }
    throw ScenarioError("constraint.type", "unknown constraint type '" + type + "'");
}

inline json write_constraint(const ControlConstraint& c) {
    using namespace detail;
    if (std::holds_alternative<Unconstrained>(c)) return json{{"type", "unconstrained"}};
    if (auto b = std::get_if<Ball>(&c)) return json{{"type", "ball"}, {"center", write_vec(b->center)}, {"radius", b->radius}};
    if (auto p = std::get_if<Polyhedron>(&c)) return json{{"type", "polyhedron"}, {"A", write_mat(p->A)}, {"b", write_vec(p->b)}};
    const auto& s = std::get<SmoothInequalities>(c);
    json j{{"type", "smooth"}};
    json arr = json::array();
    for (const auto& q : s.ineqs) {
        if (q.kind == SmoothIneq::Kind::Halfspace)
            arr.push_back(json{{"kind", "halfspace"}, {"a", write_vec(q.a)}, {"offset", q.offset}});
        else
            arr.push_back(json{{"kind", q.kind == SmoothIneq::Kind::OuterSphere ? "outer_sphere" : "inner_sphere"},
                               {"center", write_vec(q.center)},
                               {"rsq", q.rsq}});
    }
    j["inequalities"] = arr;
    if (s.activity_tol) j["activity_tol"] = *s.activity_tol;
    return j;
}

struct Diagnostic {
    enum class Severity { Error, Info };
    std::string field;
    double discrepancy = 0.0;  // measured / expected magnitude ratio or relative error
    std::string message;
    Severity severity = Severity::Error;
};

inline std::vector<Diagnostic> validate(const Scenario& s);

inline Scenario parse_scenario(const json& j) {
    using namespace detail;
    reject_unknown(j, "scenario", {"grid", "dims", "coefficients", "cost", "constraint", "tolerances", "seed"});
    if (!j.contains("grid")) throw ScenarioError("grid", "missing section");
    if (!j.contains("dims")) throw ScenarioError("dims", "missing section");
    const json& g = j["grid"];
    reject_unknown(g, "grid", {"T", "N"});
    const json& d = j["dims"];
    reject_unknown(d, "dims", {"n", "m", "l"});

    CatalogSpec c;
    c.n = d.value("n", 1);
    c.m = d.value("m", 1);
    c.l = d.value("l", 1);
    if (c.n < 1 || c.m < 1 || c.l < 1) throw ScenarioError("dims", "dimensions must be positive");
    const int n = c.n, m = c.m, l = c.l;

    Scenario s;
    try {
        s.grid = TimeGrid(g.value("T", 1.0), g.value("N", 4));
    } catch (const std::invalid_argument& e) {
        throw ScenarioError("grid", e.what());
    }

    const json coeffs = j.value("coefficients", json::object());
    reject_unknown(coeffs, "coefficients", {"phi", "b", "sigma", "g", "psi"});
    if (coeffs.contains("phi")) {
        reject_unknown(coeffs["phi"], "phi", {"const", "slope"});
        c.phi0 = opt_vec(coeffs["phi"], "const", "phi", n);
        c.phi_slope = opt_vec(coeffs["phi"], "slope", "phi", n);
    } else {
        c.phi0 = Vec::Zero(n);
        c.phi_slope = Vec::Zero(n);
    }
    auto term = [&](const char* key, int out, int nx, int ny, int nz, int nu) {
        return read_term(coeffs.contains(key) ? coeffs[key] : json(), key, out, nx, ny, nz, nu);
    };
    c.b = term("b", n, n, 0, 0, l);
    c.sigma = term("sigma", n, n, 0, 0, l);
    c.g = term("g", m, n, m, m, l);
    c.psi = term("psi", m, n, 0, 0, 0);

    const json cost = j.value("cost", json::object());
    reject_unknown(cost, "cost", {"f", "h"});
    const json f = cost.value("f", json::object());
    reject_unknown(f, "cost.f", {"x", "y", "z", "u", "lin_x", "lin_y", "lin_z", "lin_u"});
    c.cost.Qx = opt_mat(f, "x", "cost.f", n, n);
    c.cost.Qy = opt_mat(f, "y", "cost.f", m, m);
    c.cost.Qz = opt_mat(f, "z", "cost.f", m, m);
    c.cost.R = opt_mat(f, "u", "cost.f", l, l);
    c.cost.qx = opt_vec(f, "lin_x", "cost.f", n);
    c.cost.qy = opt_vec(f, "lin_y", "cost.f", m);
    c.cost.qz = opt_vec(f, "lin_z", "cost.f", m);
    c.cost.r = opt_vec(f, "lin_u", "cost.f", l);
    const json h = cost.value("h", json::object());
    reject_unknown(h, "cost.h", {"x", "y", "lin_x", "lin_y"});
    c.cost.Hx = opt_mat(h, "x", "cost.h", n, n);
    c.cost.Hy = opt_mat(h, "y", "cost.h", m, m);
    c.cost.hx = opt_vec(h, "lin_x", "cost.h", n);
    c.cost.hy = opt_vec(h, "lin_y", "cost.h", m);

    s.constraint = parse_constraint(j.contains("constraint") ? j["constraint"] : json(), l);

    if (j.contains("tolerances")) {
        const json& t = j["tolerances"];
        reject_unknown(t, "tolerances", {"picard_tol", "picard_max_iter", "activity_tol", "nc_tol"});
        s.tol.picard_tol = t.value("picard_tol", 1e-12);
        s.tol.picard_max_iter = t.value("picard_max_iter", 200);
        if (t.contains("activity_tol")) s.tol.activity_tol = t["activity_tol"].get<double>();
        if (t.contains("nc_tol")) s.tol.nc_tol = t["nc_tol"].get<double>();
        if (!(s.tol.picard_tol > 0)) throw ScenarioError("tolerances.picard_tol", "must be positive");
        if (s.tol.picard_max_iter < 1) throw ScenarioError("tolerances.picard_max_iter", "must be >= 1");
    }
    s.seed = j.value("seed", std::uint64_t{0});
    s.model = std::make_shared<CatalogModel>(c, s.grid.horizon());
    s.catalog = std::move(c);

    for (const auto& diag : validate(s))
        if (diag.severity == Diagnostic::Severity::Error) throw ScenarioError(diag.field, diag.message);
    return s;
}

// Canonical form: every section present, every slot written explicitly.
inline json to_json(const Scenario& s) {
    using namespace detail;
    if (!s.catalog) throw std::logic_error("to_json: scenario was not built from the catalog");
    const CatalogSpec& c = *s.catalog;
    json j;
    j["grid"] = {{"T", s.grid.horizon()}, {"N", s.grid.steps()}};
    j["dims"] = {{"n", c.n}, {"m", c.m}, {"l", c.l}};
    j["coefficients"] = {{"phi", {{"const", write_vec(c.phi0)}, {"slope", write_vec(c.phi_slope)}}},
                         {"b", write_term(c.b, false, true)},
                         {"sigma", write_term(c.sigma, false, true)},
                         {"g", write_term(c.g, true, true)},
                         {"psi", write_term(c.psi, false, false)}};
    j["cost"] = {{"f",
                  {{"x", write_mat(c.cost.Qx)},
                   {"y", write_mat(c.cost.Qy)},
                   {"z", write_mat(c.cost.Qz)},
                   {"u", write_mat(c.cost.R)},
                   {"lin_x", write_vec(c.cost.qx)},
                   {"lin_y", write_vec(c.cost.qy)},
                   {"lin_z", write_vec(c.cost.qz)},
                   {"lin_u", write_vec(c.cost.r)}}},
                 {"h",
                  {{"x", write_mat(c.cost.Hx)},
                   {"y", write_mat(c.cost.Hy)},
                   {"lin_x", write_vec(c.cost.hx)},
                   {"lin_y", write_vec(c.cost.hy)}}}};
    j["constraint"] = write_constraint(s.constraint);
    json t = {{"picard_tol", s.tol.picard_tol}, {"picard_max_iter", s.tol.picard_max_iter}};
    if (s.tol.activity_tol) t["activity_tol"] = *s.tol.activity_tol;
    if (s.tol.nc_tol) t["nc_tol"] = *s.tol.nc_tol;
    j["tolerances"] = t;
    j["seed"] = s.seed;
    return j;
}

inline Scenario load_scenario(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ScenarioError("file", "cannot open '" + path + "'");
    json j;
    try {
        in >> j;
    } catch (const json::parse_error& e) {
        throw ScenarioError("file", std::string("parse error: ") + e.what());
    }
    return parse_scenario(j);
}

inline void save_scenario(const Scenario& s, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("save_scenario: cannot write '" + path + "'");
    out << to_json(s).dump(2) << '\n';
}

// Same scenario on a different grid size.
inline Scenario with_steps(Scenario s, int steps) {
    s.grid = TimeGrid(s.grid.horizon(), steps);
    return s;
}

// ---------------------------------------------------------------------------
// validate

namespace detail {

struct ProbePoint {
    double t, s;
    Vec x, y, z, u;
};

inline double rel_gap(const Mat& analytic, const Mat& fd) {
    const double scale = std::max(1.0, fd.norm());
    return (analytic - fd).norm() / scale;
}

inline double magnitude_ratio(const Mat& analytic, const Mat& fd) {
    const double a = analytic.norm(), b = fd.norm();
    if (b == 0.0) return a == 0.0 ? 1.0 : INFINITY;
    return a / b;
}

// Central differences of a vector-valued function along each coordinate.
template <class F>
Mat central_jacobian(F&& fn, const Vec& at, int out_dim) {
    Mat J(out_dim, at.size());
    for (int k = 0; k < at.size(); ++k) {
        const double step = 1e-5 * (1.0 + std::abs(at(k)));
        Vec lo = at, hi = at;
        lo(k) -= step;
        hi(k) += step;
        J.col(k) = (fn(hi) - fn(lo)) / (2.0 * step);
    }
    return J;
}

inline void check_shape(std::vector<Diagnostic>& out, const std::string& field, const Mat& M, int rows, int cols) {
    if (M.rows() != rows || M.cols() != cols)
        out.push_back({field, static_cast<double>(M.rows() * 1000 + M.cols()),
                       "shape " + std::to_string(M.rows()) + "x" + std::to_string(M.cols()) + ", expected " +
                           std::to_string(rows) + "x" + std::to_string(cols)});
}
inline void check_len(std::vector<Diagnostic>& out, const std::string& field, const Vec& v, int len) {
    if (v.size() != len)
        out.push_back({field, static_cast<double>(v.size()),
                       "returns a " + std::to_string(v.size()) + "-vector, expected " + std::to_string(len)});
}

} // namespace detail

inline std::vector<Diagnostic> validate(const Scenario& s) {
    using namespace detail;
    std::vector<Diagnostic> out;
    const Model& M = *s.model;
    const int n = M.n(), m = M.m(), l = M.l();
    const double T = s.grid.horizon();

    std::mt19937_64 rng(s.seed ^ 0x9e3779b97f4a7c15ull);
    std::uniform_real_distribution<double> U(-1.0, 1.0);
    auto rand_vec = [&](int d, double scale) {
        Vec v(d);
        for (int i = 0; i < d; ++i) v(i) = scale * U(rng);
        return v;
    };
    std::vector<ProbePoint> probes;
    for (int k = 0; k < 6; ++k) {
        double t = T * (0.5 + 0.5 * U(rng));
        double sv = t * (0.5 + 0.5 * U(rng));
        probes.push_back({t, sv, rand_vec(n, 1.5), rand_vec(m, 1.5), rand_vec(m, 1.5), rand_vec(l, 1.5)});
    }

    // Dimensions first: derivative checks on misshaped output are meaningless.
    {
        const auto& p = probes.front();
        const std::size_t before = out.size();
        check_len(out, "phi", M.phi(p.t), n);
        check_len(out, "b", M.b(p.t, p.s, p.x, p.u), n);
        check_len(out, "sigma", M.sigma(p.t, p.s, p.x, p.u), n);
        check_len(out, "g", M.g(p.t, p.s, p.x, p.y, p.z, p.u), m);
        check_len(out, "psi", M.psi(p.t, p.x), m);
        check_shape(out, "b_x", M.b_x(p.t, p.s, p.x, p.u), n, n);
        check_shape(out, "b_u", M.b_u(p.t, p.s, p.x, p.u), n, l);
        check_shape(out, "sigma_x", M.sigma_x(p.t, p.s, p.x, p.u), n, n);
        check_shape(out, "sigma_u", M.sigma_u(p.t, p.s, p.x, p.u), n, l);
        check_shape(out, "g_x", M.g_x(p.t, p.s, p.x, p.y, p.z, p.u), m, n);
        check_shape(out, "g_y", M.g_y(p.t, p.s, p.x, p.y, p.z, p.u), m, m);
        check_shape(out, "g_z", M.g_z(p.t, p.s, p.x, p.y, p.z, p.u), m, m);
        check_shape(out, "g_u", M.g_u(p.t, p.s, p.x, p.y, p.z, p.u), m, l);
        check_shape(out, "psi_x", M.psi_x(p.t, p.x), m, n);
        check_len(out, "f_x", M.f_x(p.s, p.x, p.y, p.z, p.u), n);
        check_len(out, "f_y", M.f_y(p.s, p.x, p.y, p.z, p.u), m);
        check_len(out, "f_z", M.f_z(p.s, p.x, p.y, p.z, p.u), m);
        check_len(out, "f_u", M.f_u(p.s, p.x, p.y, p.z, p.u), l);
        check_len(out, "h_x", M.h_x(p.x, p.y), n);
        check_len(out, "h_y", M.h_y(p.x, p.y), m);
        if (out.size() != before) return out;
    }

    // Worst finite-difference disagreement per derivative field.
    struct Worst {
        double gap = 0.0, ratio = 1.0;
    };
    std::map<std::string, Worst> worst;
    auto record = [&](const std::string& field, const Mat& a, const Mat& fd) {
        double gap = rel_gap(a, fd);
        auto& w = worst[field];
        if (gap >= w.gap) w = {gap, magnitude_ratio(a, fd)};
    };

    for (const auto& p : probes) {
        const double t = p.t, sv = p.s;
        record("b_x", M.b_x(t, sv, p.x, p.u), central_jacobian([&](const Vec& x) { return M.b(t, sv, x, p.u); }, p.x, n));
        record("b_u", M.b_u(t, sv, p.x, p.u), central_jacobian([&](const Vec& u) { return M.b(t, sv, p.x, u); }, p.u, n));
        record("sigma_x", M.sigma_x(t, sv, p.x, p.u),
               central_jacobian([&](const Vec& x) { return M.sigma(t, sv, x, p.u); }, p.x, n));
        record("sigma_u", M.sigma_u(t, sv, p.x, p.u),
               central_jacobian([&](const Vec& u) { return M.sigma(t, sv, p.x, u); }, p.u, n));
        record("g_x", M.g_x(t, sv, p.x, p.y, p.z, p.u),
               central_jacobian([&](const Vec& x) { return M.g(t, sv, x, p.y, p.z, p.u); }, p.x, m));
        record("g_y", M.g_y(t, sv, p.x, p.y, p.z, p.u),
               central_jacobian([&](const Vec& y) { return M.g(t, sv, p.x, y, p.z, p.u); }, p.y, m));
        record("g_z", M.g_z(t, sv, p.x, p.y, p.z, p.u),
               central_jacobian([&](const Vec& z) { return M.g(t, sv, p.x, p.y, z, p.u); }, p.z, m));
        record("g_u", M.g_u(t, sv, p.x, p.y, p.z, p.u),
               central_jacobian([&](const Vec& u) { return M.g(t, sv, p.x, p.y, p.z, u); }, p.u, m));
        record("psi_x", M.psi_x(t, p.x), central_jacobian([&](const Vec& x) { return M.psi(t, x); }, p.x, m));
        auto fgrad = [&](auto slot) {
            return [&, slot](const Vec& v) {
                Vec x = p.x, y = p.y, z = p.z, u = p.u;
                if (slot == 0) x = v;
                if (slot == 1) y = v;
                if (slot == 2) z = v;
                if (slot == 3) u = v;
                return Vec::Constant(1, M.f(sv, x, y, z, u));
            };
        };
        record("f_x", M.f_x(sv, p.x, p.y, p.z, p.u).transpose(), central_jacobian(fgrad(0), p.x, 1));
        record("f_y", M.f_y(sv, p.x, p.y, p.z, p.u).transpose(), central_jacobian(fgrad(1), p.y, 1));
        record("f_z", M.f_z(sv, p.x, p.y, p.z, p.u).transpose(), central_jacobian(fgrad(2), p.z, 1));
        record("f_u", M.f_u(sv, p.x, p.y, p.z, p.u).transpose(), central_jacobian(fgrad(3), p.u, 1));
        record("h_x", M.h_x(p.x, p.y).transpose(),
               central_jacobian([&](const Vec& x) { return Vec::Constant(1, M.h(x, p.y)); }, p.x, 1));
        record("h_y", M.h_y(p.x, p.y).transpose(),
               central_jacobian([&](const Vec& y) { return Vec::Constant(1, M.h(p.x, y)); }, p.y, 1));
    }
    for (const auto& [field, w] : worst)
        if (!(w.gap <= 1e-6))
            out.push_back({field, w.ratio,
                           "disagrees with central differences (relative gap " + std::to_string(w.gap) +
                               ", magnitude ratio " + std::to_string(w.ratio) + ")"});

    // Bounded coefficient derivatives: compare norms at radius 1 and 1e3.
    auto probe_bound = [&](const std::string& field, auto&& eval) {
        double small = 0.0, large = 0.0;
        for (const auto& p : probes) {
            small = std::max(small, eval(p, 1.0));
            large = std::max(large, eval(p, 1e3));
        }
        if (!std::isfinite(large) || large > 10.0 * (1.0 + small))
            out.push_back({field, large / (1.0 + small), "derivative grows with the state (not uniformly bounded)"});
    };
    auto sc = [](const Vec& v, double r) { return Vec(v * r); };
    probe_bound("b_x", [&](const ProbePoint& p, double r) { return M.b_x(p.t, p.s, sc(p.x, r), sc(p.u, r)).norm(); });
    probe_bound("b_u", [&](const ProbePoint& p, double r) { return M.b_u(p.t, p.s, sc(p.x, r), sc(p.u, r)).norm(); });
    probe_bound("sigma_x", [&](const ProbePoint& p, double r) { return M.sigma_x(p.t, p.s, sc(p.x, r), sc(p.u, r)).norm(); });
    probe_bound("sigma_u", [&](const ProbePoint& p, double r) { return M.sigma_u(p.t, p.s, sc(p.x, r), sc(p.u, r)).norm(); });
    probe_bound("g_x", [&](const ProbePoint& p, double r) {
        return M.g_x(p.t, p.s, sc(p.x, r), sc(p.y, r), sc(p.z, r), sc(p.u, r)).norm();
    });
    probe_bound("g_y", [&](const ProbePoint& p, double r) {
        return M.g_y(p.t, p.s, sc(p.x, r), sc(p.y, r), sc(p.z, r), sc(p.u, r)).norm();
    });
    probe_bound("g_z", [&](const ProbePoint& p, double r) {
        return M.g_z(p.t, p.s, sc(p.x, r), sc(p.y, r), sc(p.z, r), sc(p.u, r)).norm();
    });
    probe_bound("g_u", [&](const ProbePoint& p, double r) {
        return M.g_u(p.t, p.s, sc(p.x, r), sc(p.y, r), sc(p.z, r), sc(p.u, r)).norm();
    });
    probe_bound("psi_x", [&](const ProbePoint& p, double r) { return M.psi_x(p.t, sc(p.x, r)).norm(); });

    // Cost derivatives may grow at most linearly: |f_x| <= L(1 + |x| + |y| + |z| + |u|).
    auto probe_growth = [&](const std::string& field, auto&& eval) {
        double worst_ratio = 0.0;
        for (const auto& p : probes)
            for (double r : {1.0, 1e3}) {
                double size = 1.0 + r * (p.x.norm() + p.y.norm() + p.z.norm() + p.u.norm());
                worst_ratio = std::max(worst_ratio, eval(p, r) / size);
            }
        double base = 0.0;
        for (const auto& p : probes)
            base = std::max(base, eval(p, 1.0) / (1.0 + p.x.norm() + p.y.norm() + p.z.norm() + p.u.norm()));
        if (!std::isfinite(worst_ratio) || worst_ratio > 10.0 * (1.0 + base))
            out.push_back({field, worst_ratio, "derivative grows faster than linearly"});
    };
    probe_growth("f_x", [&](const ProbePoint& p, double r) { return M.f_x(p.s, sc(p.x, r), sc(p.y, r), sc(p.z, r), sc(p.u, r)).norm(); });
    probe_growth("f_y", [&](const ProbePoint& p, double r) { return M.f_y(p.s, sc(p.x, r), sc(p.y, r), sc(p.z, r), sc(p.u, r)).norm(); });
    probe_growth("f_z", [&](const ProbePoint& p, double r) { return M.f_z(p.s, sc(p.x, r), sc(p.y, r), sc(p.z, r), sc(p.u, r)).norm(); });
    probe_growth("f_u", [&](const ProbePoint& p, double r) { return M.f_u(p.s, sc(p.x, r), sc(p.y, r), sc(p.z, r), sc(p.u, r)).norm(); });
    probe_growth("h_x", [&](const ProbePoint& p, double r) { return M.h_x(sc(p.x, r), sc(p.y, r)).norm(); });
    probe_growth("h_y", [&](const ProbePoint& p, double r) { return M.h_y(sc(p.x, r), sc(p.y, r)).norm(); });

    // Continuity in t is only probed on the grid; a large difference quotient is reported, not rejected.
    {
        const int N = s.grid.steps();
        double worst_q = 0.0;
        const auto& p = probes.front();
        for (int i = 1; i <= N; ++i) {
            const double t0 = s.grid.t(i - 1), t1 = s.grid.t(i);
            double d = (M.b(t1, 0.0, p.x, p.u) - M.b(t0, 0.0, p.x, p.u)).norm() +
                       (M.sigma(t1, 0.0, p.x, p.u) - M.sigma(t0, 0.0, p.x, p.u)).norm() +
                       (M.g(t1, 0.0, p.x, p.y, p.z, p.u) - M.g(t0, 0.0, p.x, p.y, p.z, p.u)).norm() +
                       (M.psi(t1, p.x) - M.psi(t0, p.x)).norm();
            worst_q = std::max(worst_q, d / (t1 - t0));
        }
        if (!std::isfinite(worst_q) || worst_q > 1e6)
            out.push_back({"continuity", worst_q, "large t-difference quotient on the grid", Diagnostic::Severity::Info});
    }
    return out;
}

} // namespace fbsvie
