#pragma once

// Binary-noise probability lattice: a uniform time grid where each step
// carries an increment of +sqrt(dt) or -sqrt(dt) with probability 1/2.
// Node w at level i has children 2w (down) and 2w+1 (up), so the level-j
// ancestor of leaf w is w >> (N - j) and descendants form contiguous blocks.

#include <Eigen/Dense>

#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace fbsvie {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

inline constexpr int kMaxSteps = 14;

class TimeGrid {
public:
    TimeGrid() = default;
    TimeGrid(double horizon, int steps) : T_(horizon), N_(steps) {
        if (!(horizon > 0.0) || !std::isfinite(horizon))
            throw std::invalid_argument("TimeGrid: horizon must be positive and finite");
        if (steps < 1 || steps > kMaxSteps)
            throw std::invalid_argument("TimeGrid: steps must lie in 1.." + std::to_string(kMaxSteps));
        dt_ = horizon / steps;
        sqdt_ = std::sqrt(dt_);
    }

    double horizon() const { return T_; }
    int steps() const { return N_; }
    double dt() const { return dt_; }
    double sqrt_dt() const { return sqdt_; }
    double t(int i) const { return i == N_ ? T_ : i * dt_; }
    static std::size_t nodes(int level) { return std::size_t{1} << level; }
    std::size_t leaves() const { return nodes(N_); }

    // Increment of step j (level j -> j+1) seen from a node at level >= j+1.
    double dw(int j, std::size_t node, int node_level) const {
        return ((node >> (node_level - j - 1)) & 1u) ? sqdt_ : -sqdt_;
    }

private:
    double T_ = 1.0;
    int N_ = 1;
    double dt_ = 1.0;
    double sqdt_ = 1.0;
};

// d-vectors indexed by the nodes of one level.
class LevelField {
public:
    LevelField() = default;
    LevelField(int level, int dim, double fill = 0.0)
        : level_(level), dim_(dim), v_(TimeGrid::nodes(level) * dim, fill) {
        if (level < 0 || level > kMaxSteps) throw std::out_of_range("LevelField: level out of range");
        if (dim < 0) throw std::invalid_argument("LevelField: negative dimension");
    }

    int level() const { return level_; }
    int dim() const { return dim_; }
    std::size_t size() const { return TimeGrid::nodes(level_); }
    bool empty() const { return v_.empty(); }

    Eigen::Map<Vec> at(std::size_t w) { return {v_.data() + w * dim_, dim_}; }
    Eigen::Map<const Vec> at(std::size_t w) const { return {v_.data() + w * dim_, dim_}; }
    double& operator()(std::size_t w, int k) { return v_[w * dim_ + k]; }
    double operator()(std::size_t w, int k) const { return v_[w * dim_ + k]; }

    std::vector<double>& raw() { return v_; }
    const std::vector<double>& raw() const { return v_; }

    double mean(int k = 0) const {
        double s = 0.0;
        for (std::size_t w = 0; w < size(); ++w) s += (*this)(w, k);
        return s / static_cast<double>(size());
    }
    Vec mean_vec() const {
        Vec out = Vec::Zero(dim_);
        for (std::size_t w = 0; w < size(); ++w) out += at(w);
        return out / static_cast<double>(size());
    }
    double max_abs() const {
        double m = 0.0;
        for (double x : v_) m = std::max(m, std::abs(x));
        return m;
    }

    LevelField& operator+=(const LevelField& o) {
        check_same(o);
        for (std::size_t k = 0; k < v_.size(); ++k) v_[k] += o.v_[k];
        return *this;
    }
    LevelField& operator-=(const LevelField& o) {
        check_same(o);
        for (std::size_t k = 0; k < v_.size(); ++k) v_[k] -= o.v_[k];
        return *this;
    }
    LevelField& operator*=(double c) {
        for (double& x : v_) x *= c;
        return *this;
    }
    friend LevelField operator+(LevelField a, const LevelField& b) { return a += b; }
    friend LevelField operator-(LevelField a, const LevelField& b) { return a -= b; }
    friend LevelField operator*(double c, LevelField a) { return a *= c; }

private:
    void check_same(const LevelField& o) const {
        if (o.level_ != level_ || o.dim_ != dim_)
            throw std::invalid_argument("LevelField: shape mismatch");
    }

    int level_ = 0;
    int dim_ = 0;
    std::vector<double> v_;
};

// F_T-measurable random vector: one value per leaf.
using TerminalField = LevelField;

// One LevelField per level 0..N; level i only sees the first i increments.
class AdaptedProcess {
public:
    AdaptedProcess() = default;
    AdaptedProcess(int steps, int dim, double fill = 0.0) : dim_(dim) {
        levels_.reserve(steps + 1);
        for (int i = 0; i <= steps; ++i) levels_.emplace_back(i, dim, fill);
    }

    int steps() const { return static_cast<int>(levels_.size()) - 1; }
    int dim() const { return dim_; }
    LevelField& level(int i) { return levels_.at(i); }
    const LevelField& level(int i) const { return levels_.at(i); }
    Eigen::Map<Vec> at(int i, std::size_t w) { return levels_[i].at(w); }
    Eigen::Map<const Vec> at(int i, std::size_t w) const { return levels_[i].at(w); }

    // Value at the level-i ancestor of a node sitting at level `from`.
    Eigen::Map<const Vec> along(int i, std::size_t node, int from) const {
        return levels_[i].at(node >> (from - i));
    }

    double max_abs(int last_level = -1) const {
        if (last_level < 0) last_level = steps();
        double m = 0.0;
        for (int i = 0; i <= last_level; ++i) m = std::max(m, levels_[i].max_abs());
        return m;
    }

    AdaptedProcess& operator+=(const AdaptedProcess& o) {
        for (std::size_t i = 0; i < levels_.size(); ++i) levels_[i] += o.levels_.at(i);
        return *this;
    }
    AdaptedProcess& operator-=(const AdaptedProcess& o) {
        for (std::size_t i = 0; i < levels_.size(); ++i) levels_[i] -= o.levels_.at(i);
        return *this;
    }
    AdaptedProcess& operator*=(double c) {
        for (auto& l : levels_) l *= c;
        return *this;
    }
    friend AdaptedProcess operator+(AdaptedProcess a, const AdaptedProcess& b) { return a += b; }
    friend AdaptedProcess operator-(AdaptedProcess a, const AdaptedProcess& b) { return a -= b; }
    friend AdaptedProcess operator*(double c, AdaptedProcess a) { return a *= c; }

private:
    int dim_ = 0;
    std::vector<LevelField> levels_;
};

// Rows indexed by t_i, each row an adapted process in s over the whole grid.
class TwoParamProcess {
public:
    TwoParamProcess() = default;
    TwoParamProcess(int steps, int dim, double fill = 0.0)
        : rows_(steps + 1, AdaptedProcess(steps, dim, fill)) {}

    int steps() const { return static_cast<int>(rows_.size()) - 1; }
    int dim() const { return rows_.empty() ? 0 : rows_.front().dim(); }
    AdaptedProcess& row(int i) { return rows_.at(i); }
    const AdaptedProcess& row(int i) const { return rows_.at(i); }
    Eigen::Map<Vec> at(int i, int s, std::size_t w) { return rows_[i].at(s, w); }
    Eigen::Map<const Vec> at(int i, int s, std::size_t w) const { return rows_[i].at(s, w); }

private:
    std::vector<AdaptedProcess> rows_;
};

// E[x | level target]: equal-weight average over the level-j descendants.
inline LevelField cond_expect(const LevelField& x, int target) {
    if (target < 0 || target > x.level())
        throw std::out_of_range("cond_expect: target level " + std::to_string(target) +
                                " outside 0.." + std::to_string(x.level()));
    if (target == x.level()) return x;
    const std::size_t block = TimeGrid::nodes(x.level() - target);
    const double inv = 1.0 / static_cast<double>(block);
    LevelField out(target, x.dim());
    for (std::size_t w = 0; w < out.size(); ++w) {
        auto o = out.at(w);
        for (std::size_t c = 0; c < block; ++c) o += x.at(w * block + c);
        o *= inv;
    }
    return out;
}

// Conditional expectations of x at every level 0..x.level().
inline AdaptedProcess expectation_process(const LevelField& x) {
    AdaptedProcess out(x.level(), x.dim());
    out.level(x.level()) = x;
    for (int i = x.level() - 1; i >= 0; --i) {
        const LevelField& up = out.level(i + 1);
        LevelField& cur = out.level(i);
        for (std::size_t w = 0; w < cur.size(); ++w)
            cur.at(w) = 0.5 * (up.at(2 * w) + up.at(2 * w + 1));
    }
    return out;
}

// Sum_{j0 <= j < j1} h(t_j) dW_j as a terminal field.
inline TerminalField ito_sum(const TimeGrid& grid, const AdaptedProcess& h, int j0, int j1) {
    const int N = grid.steps();
    if (j0 < 0 || j1 > N) throw std::out_of_range("ito_sum: index range outside 0..N");
    if (h.steps() < N && j1 > 0 && j1 - 1 > h.steps())
        throw std::out_of_range("ito_sum: integrand shorter than range");
    TerminalField out(N, h.dim());
    for (std::size_t leaf = 0; leaf < out.size(); ++leaf) {
        auto o = out.at(leaf);
        for (int j = j0; j < j1; ++j) o += h.along(j, leaf, N) * grid.dw(j, leaf, N);
    }
    return out;
}

struct MartingaleRep {
    LevelField mean;          // E_k[x]
    AdaptedProcess integrand; // valid on levels k..L-1, zero elsewhere
};

// x = E_k[x] + sum_{k <= j < L} z_j dW_j with z_j = (E[x|up] - E[x|down]) / (2 sqrt(dt)).
inline MartingaleRep martingale_repr(const TimeGrid& grid, const LevelField& x, int k) {
    const int L = x.level();
    if (k < 0 || k > L) throw std::out_of_range("martingale_repr: level out of range");
    AdaptedProcess chain = expectation_process(x);
    AdaptedProcess z(grid.steps(), x.dim());
    const double inv = 0.5 / grid.sqrt_dt();
    for (int j = k; j < L; ++j) {
        const LevelField& nxt = chain.level(j + 1);
        LevelField& zj = z.level(j);
        for (std::size_t w = 0; w < zj.size(); ++w)
            zj.at(w) = (nxt.at(2 * w + 1) - nxt.at(2 * w)) * inv;
    }
    return {chain.level(k), std::move(z)};
}

// Integrand of a single step: (x(up) - x(down)) / (2 sqrt(dt)) for x living at level j+1.
inline LevelField step_integrand(const TimeGrid& grid, const LevelField& next) {
    if (next.level() < 1) throw std::out_of_range("step_integrand: needs level >= 1");
    LevelField z(next.level() - 1, next.dim());
    const double inv = 0.5 / grid.sqrt_dt();
    for (std::size_t w = 0; w < z.size(); ++w)
        z.at(w) = (next.at(2 * w + 1) - next.at(2 * w)) * inv;
    return z;
}

// Lift a level-j field to the leaves (or any deeper level) by copying ancestor values.
inline LevelField broadcast(const LevelField& x, int level) {
    if (level < x.level()) throw std::out_of_range("broadcast: target shallower than source");
    LevelField out(level, x.dim());
    const int shift = level - x.level();
    for (std::size_t w = 0; w < out.size(); ++w) out.at(w) = x.at(w >> shift);
    return out;
}

// Brownian path value W(t_level) at a node: sqrt(dt) * (#up - #down).
inline double brownian_value(const TimeGrid& grid, int level, std::size_t node) {
    const int ups = std::popcount(static_cast<std::uint64_t>(node));
    return grid.sqrt_dt() * (2.0 * ups - level);
}

// E[<a, b>] for fields at the same level.
inline double expect_dot(const LevelField& a, const LevelField& b) {
    if (a.level() != b.level() || a.dim() != b.dim())
        throw std::invalid_argument("expect_dot: shape mismatch");
    double s = 0.0;
    for (std::size_t k = 0; k < a.raw().size(); ++k) s += a.raw()[k] * b.raw()[k];
    return s / static_cast<double>(a.size());
}

} // namespace fbsvie
