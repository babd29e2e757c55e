#include "fbsvie/forward.hpp"

#include <gtest/gtest.h>

#include <fstream>
#include <random>

using namespace fbsvie;

namespace {

const std::string kData = FBSVIE_DATA_DIR;

json lq_json() {
    std::ifstream in(kData + "/lq.json");
    return json::parse(in);
}

AdaptedProcess random_control(const Scenario& s, std::mt19937_64& rng) {
    std::normal_distribution<double> nd;
    AdaptedProcess u(s.steps(), s.l());
    for (int i = 0; i <= s.steps(); ++i)
        for (double& v : u.level(i).raw()) v = nd(rng);
    return u;
}

// Pathwise recursion along one leaf, reading the move bits directly.
std::vector<Vec> leaf_path(const Scenario& s, const AdaptedProcess& u, std::size_t leaf) {
    const int N = s.steps();
    const double dt = s.grid.dt(), sq = std::sqrt(dt);
    std::vector<Vec> x(N + 1);
    std::vector<Vec> uu(N);
    std::vector<double> dw(N);
    for (int j = 0; j < N; ++j) {
        const std::size_t prefix = leaf >> (N - j);
        uu[j] = u.at(j, prefix);
        dw[j] = ((leaf >> (N - 1 - j)) & 1u) ? sq : -sq;
    }
    for (int i = 0; i <= N; ++i) {
        const double ti = i * dt;
        Vec acc = s.model->phi(ti);
        for (int j = 0; j < i; ++j)
            acc += s.model->b(ti, j * dt, x[j], uu[j]) * dt + s.model->sigma(ti, j * dt, x[j], uu[j]) * dw[j];
        x[i] = acc;
    }
    return x;
}

void expect_matches_oracle(const Scenario& s, const AdaptedProcess& u) {
    const ForwardPath fwd = simulate_forward(s, u);
    const int N = s.steps();
    for (std::size_t leaf = 0; leaf < s.grid.leaves(); ++leaf) {
        const auto path = leaf_path(s, u, leaf);
        for (int i = 0; i <= N; ++i)
            EXPECT_LT((Vec(fwd.X.at(i, leaf >> (N - i))) - path[i]).lpNorm<Eigen::Infinity>(), 1e-12)
                << "level " << i << " leaf " << leaf;
    }
}

} // namespace

TEST(Forward, MatchesPathwiseOracleAffine) {
    const Scenario s = load_scenario(kData + "/lq.json");
    std::mt19937_64 rng(1);
    expect_matches_oracle(s, random_control(s, rng));
}

TEST(Forward, MatchesPathwiseOracleNonlinear) {
    json j = lq_json();
    j["coefficients"]["b"]["sin_x"] = json::array({json::array({0.7})});
    j["coefficients"]["sigma"]["sin_x"] = json::array({json::array({-0.3})});
    const Scenario s = parse_scenario(j);
    ASSERT_FALSE(s.model->affine());
    std::mt19937_64 rng(2);
    expect_matches_oracle(s, random_control(s, rng));
}

TEST(Forward, StartsAtPhiZero) {
    const Scenario s = load_scenario(kData + "/lq.json");
    const ForwardPath fwd = simulate_forward(s, constant_control(s, Vec::Constant(1, 0.3)));
    EXPECT_NEAR(fwd.X.at(0, 0)(0), s.model->phi(0.0)(0), 1e-15);
}

TEST(Forward, LinearisedStateIsExactForAffineModels) {
    const Scenario s = load_scenario(kData + "/lq.json");
    std::mt19937_64 rng(4);
    const AdaptedProcess u = random_control(s, rng), v = random_control(s, rng);
    const ForwardPath base = simulate_forward(s, u);
    const AdaptedProcess X1 = simulate_forward_linear(s, base, v);
    AdaptedProcess up = u;
    for (int i = 0; i < s.steps(); ++i) up.level(i) += v.level(i);
    const ForwardPath shifted = simulate_forward(s, up);
    for (int i = 0; i <= s.steps(); ++i) {
        LevelField d = shifted.X.level(i);
        d -= base.X.level(i);
        d -= X1.level(i);
        EXPECT_LT(d.max_abs(), 1e-12);
    }
}

TEST(Forward, LinearisedStateIsFirstOrderForNonlinearModels) {
    json j = lq_json();
    j["coefficients"]["b"]["sin_x"] = json::array({json::array({0.9})});
    const Scenario s = parse_scenario(j);
    std::mt19937_64 rng(6);
    const AdaptedProcess u = random_control(s, rng), v = random_control(s, rng);
    const ForwardPath base = simulate_forward(s, u);
    const AdaptedProcess X1 = simulate_forward_linear(s, base, v);
    auto err = [&](double eps) {
        AdaptedProcess up = u;
        for (int i = 0; i < s.steps(); ++i) {
            LevelField step = v.level(i);
            step *= eps;
            up.level(i) += step;
        }
        const ForwardPath p = simulate_forward(s, up);
        double e = 0;
        for (int i = 0; i <= s.steps(); ++i) {
            LevelField d = p.X.level(i);
            d -= base.X.level(i);
            d *= 1.0 / eps;
            d -= X1.level(i);
            e = std::max(e, d.max_abs());
        }
        return e;
    };
    const double e1 = err(1e-2), e2 = err(5e-3);
    EXPECT_GT(e1, 0.0);
    EXPECT_NEAR(e1 / e2, 2.0, 0.1);  // remainder is O(eps)
}

TEST(Forward, RejectsInfeasibleControl) {
    json j = lq_json();
    j["constraint"] = {{"type", "ball"}, {"radius", 1.0}};
    const Scenario s = parse_scenario(j);
    AdaptedProcess u = constant_control(s, Vec::Constant(1, 0.5));
    u.at(3, 5) = Vec::Constant(1, 1.5);
    try {
        simulate_forward(s, u);
        FAIL() << "expected SolverError";
    } catch (const SolverError& e) {
        EXPECT_NE(std::string(e.what()).find("level 3, node 5"), std::string::npos);
    }
}

TEST(Forward, RejectsWrongControlShape) {
    const Scenario s = load_scenario(kData + "/lq.json");
    EXPECT_THROW(simulate_forward(s, AdaptedProcess(s.steps() - 1, 1)), std::invalid_argument);
    EXPECT_THROW(simulate_forward(s, AdaptedProcess(s.steps(), 2)), std::invalid_argument);
}

TEST(Forward, ReportsNonFiniteCoefficients) {
    const Scenario s = load_scenario(kData + "/lq.json");
    AdaptedProcess u = constant_control(s, Vec::Constant(1, 0.0));
    u.at(2, 1) = Vec::Constant(1, std::numeric_limits<double>::infinity());
    EXPECT_THROW(simulate_forward(s, u), SolverError);
}
