#pragma once

// Explicit left-point scheme for the controlled forward Volterra equation
//   X(t_i) = phi(t_i) + sum_{j<i} b(t_i,t_j,X_j,u_j) dt + sum_{j<i} sigma(t_i,t_j,X_j,u_j) dW_j.
// The whole kernel row is re-evaluated for every i.

#include "fbsvie/scenario.hpp"

#include <sstream>

namespace fbsvie {

struct ForwardPath {
    AdaptedProcess X;  // n-dim, levels 0..N
    AdaptedProcess u;  // l-dim, levels 0..N-1 used
};

class SolverError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline void check_control_shape(const Scenario& s, const AdaptedProcess& u, const char* who) {
    if (u.dim() != s.l() || u.steps() != s.steps())
        throw std::invalid_argument(std::string(who) + ": control must be an l-dimensional process on the scenario grid");
}

inline void check_feasible(const Scenario& s, const AdaptedProcess& u) {
    if (std::holds_alternative<Unconstrained>(s.constraint)) return;
    for (int j = 0; j < s.steps(); ++j)
        for (std::size_t w = 0; w < TimeGrid::nodes(j); ++w)
            if (!contains(s.constraint, u.at(j, w), s.tol.activity_tol)) {
                std::ostringstream os;
                os << "control outside U at level " << j << ", node " << w;
                throw SolverError(os.str());
            }
}

inline ForwardPath simulate_forward(const Scenario& s, const AdaptedProcess& u) {
    check_control_shape(s, u, "simulate_forward");
    check_feasible(s, u);
    const TimeGrid& G = s.grid;
    const Model& M = *s.model;
    const int N = G.steps();
    ForwardPath out{AdaptedProcess(N, s.n()), u};
    for (int i = 0; i <= N; ++i) {
        const double ti = G.t(i);
        const Vec base = M.phi(ti);
        for (std::size_t w = 0; w < TimeGrid::nodes(i); ++w) {
            Vec acc = base;
            for (int j = 0; j < i; ++j) {
                const Vec xj = out.X.along(j, w, i);
                const Vec uj = u.along(j, w, i);
                const Vec drift = M.b(ti, G.t(j), xj, uj);
                const Vec diff = M.sigma(ti, G.t(j), xj, uj);
                if (!drift.allFinite() || !diff.allFinite()) {
                    std::ostringstream os;
                    os << "non-finite " << (drift.allFinite() ? "sigma" : "b") << " term (" << i << "," << j
                       << ") at level " << i << ", node " << w;
                    throw SolverError(os.str());
                }
                acc += drift * G.dt() + diff * G.dw(j, w, i);
            }
            out.X.at(i, w) = acc;
        }
    }
    return out;
}

// Variational forward equation with coefficients frozen along `base`.
inline AdaptedProcess simulate_forward_linear(const Scenario& s, const ForwardPath& base, const AdaptedProcess& v) {
    check_control_shape(s, v, "simulate_forward_linear");
    const TimeGrid& G = s.grid;
    const Model& M = *s.model;
    const int N = G.steps();
    AdaptedProcess X1(N, s.n());
    for (int i = 1; i <= N; ++i) {
        const double ti = G.t(i);
        for (std::size_t w = 0; w < TimeGrid::nodes(i); ++w) {
            Vec acc = Vec::Zero(s.n());
            for (int j = 0; j < i; ++j) {
                const Vec xj = base.X.along(j, w, i);
                const Vec uj = base.u.along(j, w, i);
                const Vec x1 = X1.along(j, w, i);
                const Vec vj = v.along(j, w, i);
                const double tj = G.t(j);
                acc += (M.b_x(ti, tj, xj, uj) * x1 + M.b_u(ti, tj, xj, uj) * vj) * G.dt() +
                       (M.sigma_x(ti, tj, xj, uj) * x1 + M.sigma_u(ti, tj, xj, uj) * vj) * G.dw(j, w, i);
            }
            if (!acc.allFinite()) {
                std::ostringstream os;
                os << "non-finite variational state at level " << i << ", node " << w;
                throw SolverError(os.str());
            }
            X1.at(i, w) = acc;
        }
    }
    return X1;
}

inline AdaptedProcess constant_control(const Scenario& s, const Vec& value) {
    AdaptedProcess u(s.steps(), s.l());
    for (int i = 0; i <= s.steps(); ++i)
        for (std::size_t w = 0; w < TimeGrid::nodes(i); ++w) u.at(i, w) = value;
    return u;
}

} // namespace fbsvie
