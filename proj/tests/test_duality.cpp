#include "fbsvie/verify/duality.hpp"

#include <gtest/gtest.h>

using namespace fbsvie;

namespace {

double relative_gap(const DualityResult& r) { return r.gap / (1.0 + std::abs(r.lhs) + std::abs(r.rhs)); }

} // namespace

TEST(Duality, TransposeModeIsExactForRandomInstances) {
    for (int dim : {1, 2})
        for (std::uint64_t seed = 1; seed <= 5; ++seed)
            for (int N : {3, 6}) {
                const DualityInstance d = random_duality_instance(N, dim, seed);
                const DualityResult r1 = check_duality_1(d);
                const DualityResult r2 = check_duality_2(d);
                EXPECT_LT(relative_gap(r1), 1e-13) << "dim " << dim << " seed " << seed << " N " << N;
                EXPECT_LT(relative_gap(r2), 1e-13) << "dim " << dim << " seed " << seed << " N " << N;
                EXPECT_GT(std::abs(r1.lhs), 1e-3);  // not trivially zero
            }
}

TEST(Duality, ModesCoincideWithoutKernels) {
    InstanceOptions opt;
    opt.zero_kernels = true;
    const DualityInstance d = random_duality_instance(5, 2, 3, opt);
    for (auto mode : {DualityMode::Transpose, DualityMode::Continuum}) {
        EXPECT_LT(relative_gap(check_duality_1(d, mode)), 1e-13);
        EXPECT_LT(relative_gap(check_duality_2(d, mode)), 1e-13);
    }
}

TEST(Duality, ContinuumGapIsFirstOrderInStep) {
    InstanceOptions opt;
    opt.aligned = true;
    const DualityInstance coarse = random_duality_instance(4, 1, 1, opt);
    const DualityInstance fine = random_duality_instance(8, 1, 1, opt);  // dt halves
    const double g1c = std::abs(check_duality_1(coarse, DualityMode::Continuum).gap);
    const double g1f = std::abs(check_duality_1(fine, DualityMode::Continuum).gap);
    const double g2c = std::abs(check_duality_2(coarse, DualityMode::Continuum).gap);
    const double g2f = std::abs(check_duality_2(fine, DualityMode::Continuum).gap);
    EXPECT_GT(g1c, 1e-6);  // the continuum scheme is genuinely not the transpose
    EXPECT_GT(g2c, 1e-6);
    EXPECT_NEAR(g1f / g1c, 0.5, 0.1);
    EXPECT_NEAR(g2f / g2c, 0.5, 0.1);
}

TEST(Duality, InstanceIsDeterministicInSeed) {
    const DualityInstance a = random_duality_instance(4, 2, 9), b = random_duality_instance(4, 2, 9);
    EXPECT_EQ(check_duality_1(a).lhs, check_duality_1(b).lhs);
    const DualityInstance c = random_duality_instance(4, 2, 10);
    EXPECT_NE(check_duality_1(a).lhs, check_duality_1(c).lhs);
}

TEST(TransposeOracle, AdjointOperatorIsTheMatrixTranspose) {
    const DualityInstance d = random_duality_instance(4, 1, 2);
    const OracleResult r = operator_transpose_oracle(d, KernelPerturbation::None);
    EXPECT_GT(r.max_entry, 1e-2);
    EXPECT_LT(r.max_gap, 1e-13 * (1 + r.max_entry));
}

TEST(TransposeOracle, DetectsPerturbedKernels) {
    const DualityInstance d = random_duality_instance(4, 1, 2);
    for (auto p : {KernelPerturbation::A, KernelPerturbation::B, KernelPerturbation::D}) {
        const OracleResult r = operator_transpose_oracle(d, p, 1e-3);
        EXPECT_GT(r.max_gap, 1e-5) << static_cast<int>(p);
    }
}

TEST(TransposeOracle, RefusesLargeGrids) {
    const DualityInstance d = random_duality_instance(9, 1, 2);
    EXPECT_THROW(operator_transpose_oracle(d, KernelPerturbation::None), std::invalid_argument);
}
