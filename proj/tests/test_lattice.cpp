#include "fbsvie/lattice.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace fbsvie;

namespace {

// Leaf-enumeration oracle: average of x over leaves sharing the first `level` moves.
double leaf_average(const LevelField& x, int level, std::size_t node, int k) {
    const int L = x.level();
    double s = 0;
    int count = 0;
    for (std::size_t leaf = 0; leaf < x.size(); ++leaf)
        if ((leaf >> (L - level)) == node) {
            s += x(leaf, k);
            ++count;
        }
    return s / count;
}

LevelField random_field(int level, int dim, std::mt19937_64& rng) {
    std::normal_distribution<double> nd;
    LevelField f(level, dim);
    for (double& v : f.raw()) v = nd(rng);
    return f;
}

} // namespace

TEST(TimeGrid, SpacingAndNodeCounts) {
    TimeGrid G(2.0, 4);
    EXPECT_DOUBLE_EQ(G.dt(), 0.5);
    EXPECT_DOUBLE_EQ(G.sqrt_dt(), std::sqrt(0.5));
    EXPECT_DOUBLE_EQ(G.t(4), 2.0);
    EXPECT_EQ(G.leaves(), 16u);
    EXPECT_EQ(TimeGrid::nodes(3), 8u);
}

TEST(TimeGrid, RejectsBadArguments) {
    EXPECT_THROW(TimeGrid(0.0, 4), std::invalid_argument);
    EXPECT_THROW(TimeGrid(1.0, 0), std::invalid_argument);
    EXPECT_THROW(TimeGrid(1.0, kMaxSteps + 1), std::invalid_argument);
}

TEST(TimeGrid, IncrementSignsFollowNodeBits) {
    TimeGrid G(1.0, 3);
    // node 0b101 at level 3: up, down, up
    EXPECT_GT(G.dw(0, 5, 3), 0);
    EXPECT_LT(G.dw(1, 5, 3), 0);
    EXPECT_GT(G.dw(2, 5, 3), 0);
    EXPECT_NEAR(brownian_value(G, 3, 5), G.sqrt_dt(), 1e-15);
}

TEST(Lattice, ConditionalExpectationMatchesLeafEnumeration) {
    std::mt19937_64 rng(3);
    const LevelField x = random_field(6, 2, rng);
    for (int level = 0; level <= 6; ++level) {
        const LevelField e = cond_expect(x, level);
        for (std::size_t w = 0; w < e.size(); ++w)
            for (int k = 0; k < 2; ++k) EXPECT_NEAR(e(w, k), leaf_average(x, level, w, k), 1e-14);
    }
}

TEST(Lattice, TowerProperty) {
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 20; ++trial) {
        const LevelField x = random_field(7, 1, rng);
        for (int a = 0; a <= 7; ++a)
            for (int b = 0; b <= a; ++b) {
                const LevelField lhs = cond_expect(cond_expect(x, a), b);
                const LevelField rhs = cond_expect(x, b);
                EXPECT_LT((LevelField(lhs) -= rhs).max_abs(), 1e-14);
            }
    }
}

TEST(Lattice, ConditionalExpectationRejectsDeeperTarget) {
    LevelField x(3, 1);
    EXPECT_THROW(cond_expect(x, 4), std::out_of_range);
}

TEST(Lattice, MartingaleRepresentationReconstructs) {
    std::mt19937_64 rng(9);
    TimeGrid G(1.5, 6);
    for (int k = 0; k <= 6; ++k) {
        const LevelField x = random_field(6, 2, rng);
        const MartingaleRep rep = martingale_repr(G, x, k);
        for (std::size_t leaf = 0; leaf < x.size(); ++leaf) {
            Vec acc = rep.mean.at(leaf >> (6 - k));
            for (int j = k; j < 6; ++j) acc += rep.integrand.along(j, leaf, 6) * G.dw(j, leaf, 6);
            EXPECT_LT((acc - x.at(leaf)).lpNorm<Eigen::Infinity>(), 1e-13);
        }
    }
}

TEST(Lattice, ItoSumHasZeroMeanAndIsometry) {
    std::mt19937_64 rng(11);
    TimeGrid G(1.0, 5);
    AdaptedProcess h(5, 1);
    std::normal_distribution<double> nd;
    for (int i = 0; i < 5; ++i)
        for (double& v : h.level(i).raw()) v = nd(rng);
    const TerminalField I = ito_sum(G, h, 0, 5);
    EXPECT_NEAR(I.mean(), 0.0, 1e-14);
    double rhs = 0;
    for (int i = 0; i < 5; ++i) rhs += expect_dot(h.level(i), h.level(i)) * G.dt();
    EXPECT_NEAR(expect_dot(I, I), rhs, 1e-12);
}

TEST(Lattice, BroadcastAndStepIntegrand) {
    TimeGrid G(1.0, 3);
    LevelField x(1, 1);
    x(0, 0) = 1.0;
    x(1, 0) = 3.0;
    const LevelField b = broadcast(x, 3);
    EXPECT_EQ(b(3, 0), 1.0);
    EXPECT_EQ(b(4, 0), 3.0);
    const LevelField z = step_integrand(G, x);
    EXPECT_NEAR(z(0, 0), 2.0 / (2.0 * G.sqrt_dt()), 1e-15);
}

TEST(Lattice, ShapeMismatchThrows) {
    LevelField a(2, 1), b(3, 1), c(2, 2);
    EXPECT_THROW(a += b, std::invalid_argument);
    EXPECT_THROW(expect_dot(a, c), std::invalid_argument);
}
