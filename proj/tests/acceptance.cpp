// Acceptance run: one pass/fail line per criterion. `acceptance` runs all ten,
// `acceptance K` runs criterion K only; the exit code is the number of failures.

#include "fbsvie/fbsvie.hpp"

#include <chrono>
#include <cstdio>
#include <functional>
#include <map>
#include <numbers>

using namespace fbsvie;

namespace {

const std::string kData = FBSVIE_DATA_DIR;

struct Outcome {
    bool pass;
    std::string detail;
};

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

// ---------------------------------------------------------------------------

Outcome duality_one() {
    InstanceOptions opt;
    opt.aligned = true;
    const DualityInstance d = random_duality_instance(5, 2, 1, opt);
    const double gap_t = std::abs(check_duality_1(d, DualityMode::Transpose).gap);
    std::vector<double> dts, gaps;
    bool decreasing = true;
    for (int N : {4, 6, 8, 10}) {
        const double g = std::abs(check_duality_1(random_duality_instance(N, 2, 1, opt), DualityMode::Continuum).gap);
        if (!gaps.empty() && g >= gaps.back()) decreasing = false;
        dts.push_back(1.0 / N);
        gaps.push_back(g);
    }
    const double order = loglog_slope(dts, gaps);
    return {gap_t <= 1e-9 && decreasing && order >= 0.9,
            fmt("transpose gap %.2e, continuum gaps %.3e..%.3e, order %.3f", gap_t, gaps.front(), gaps.back(), order)};
}

Outcome duality_two() {
    InstanceOptions opt;
    opt.aligned = true;
    const double gap = std::abs(check_duality_2(random_duality_instance(5, 2, 1, opt)).gap);
    InstanceOptions no_theta = opt, no_beta = opt;
    no_theta.zero_theta = true;
    no_beta.zero_beta = true;
    const double g_theta = std::abs(check_duality_2(random_duality_instance(5, 2, 1, no_theta)).gap);
    const double g_beta = std::abs(check_duality_2(random_duality_instance(5, 2, 1, no_beta)).gap);
    return {gap <= 1e-9 && g_theta <= 1e-10 && g_beta <= 1e-10,
            fmt("transpose gap %.2e, Theta=0 gap %.2e, beta=0 gap %.2e", gap, g_theta, g_beta)};
}

Outcome transpose_oracle() {
    const DualityInstance d = random_duality_instance(4, 1, 2);
    const OracleResult base = operator_transpose_oracle(d, KernelPerturbation::None);
    double weakest = std::numeric_limits<double>::infinity();
    for (auto p : {KernelPerturbation::A, KernelPerturbation::B, KernelPerturbation::D})
        weakest = std::min(weakest, operator_transpose_oracle(d, p, 1e-3).max_gap);
    return {base.max_gap <= 1e-11 && weakest >= 1e-5,
            fmt("%ldx%ld operator, max gap %.2e, smallest perturbed gap %.2e", long(base.rows), long(base.cols),
                base.max_gap, weakest)};
}

Outcome fbsde_degeneration() {
    const Scenario s = load_scenario(kData + "/fbsde.json");
    std::mt19937_64 rng(s.seed);
    const AdaptedProcess u = random_adapted(s.grid, s.l(), rng);
    const PipelineRun p = run_pipeline(s, u);
    const FbsdeReduction red = fbsde_reduction(s, p.state.fwd, p.state.bwd, u);
    double worst = 0.0;
    for (int i = 0; i < s.steps(); ++i) {
        LevelField diff = p.Hu.level(i);
        diff -= red.Hu.level(i);
        worst = std::max(worst, diff.max_abs());
    }
    return {s.steps() == 8 && worst <= 1e-10, fmt("N=%d, max node gap %.2e", s.steps(), worst)};
}

Outcome adjoint_residuals() {
    const Scenario s = with_steps(load_scenario(kData + "/lq.json"), 8);
    std::mt19937_64 rng(s.seed);
    const AdaptedProcess u = random_adapted(s.grid, s.l(), rng);
    const PipelineRun p = run_pipeline(s, u);
    FrozenCoefficients C(s, p.state.fwd, p.state.bwd, u);
    const AdjointInputs in = adjoint_inputs(C, p.adj.Lambda, p.adj.exact_transpose);
    const double r1 = lambda0_residual(s.grid, in.fz, in.gz0, p.adj.mean0, p.adj.lambda0);
    const double r2 = fredholm_residual(s.grid, in.xi_data, p.adj.xi);
    const double r3 = mu_nu_residual(s.grid, MuNu{p.adj.mu, p.adj.nu}, p.adj.theta);
    const double r4 = pq_residual(s, p.state.fwd, p.state.bwd, u, p.adj);
    const double worst = std::max({r1, r2, r3, r4});
    return {worst <= 1e-12, fmt("lambda0 %.1e, xi %.1e, (mu,nu) %.1e, (p,q) %.1e", r1, r2, r3, r4)};
}

Outcome variational_convergence() {
    const Scenario lin = load_scenario(kData + "/lq.json");
    std::ifstream in(kData + "/lq.json");
    json j = json::parse(in);
    j["coefficients"]["b"]["sin_x"] = json::array({json::array({0.8})});
    j["coefficients"]["g"]["sin_x"] = json::array({json::array({0.5})});
    const Scenario quad = parse_scenario(j);
    std::mt19937_64 rng(lin.seed);
    const AdaptedProcess u = random_adapted(lin.grid, 1, rng), v = random_adapted(lin.grid, 1, rng);
    const auto eps = dyadic_eps(2, 8);
    const ConvergenceReport a = convergence_test(lin, u, v, eps);
    double affine_err = 0.0;
    for (std::size_t k = 0; k < eps.size(); ++k) affine_err = std::max({affine_err, a.err_x[k], a.err_yz[k]});
    const ConvergenceReport q = convergence_test(quad, u, v, eps);
    // squared errors in double precision; 1e-20 is the roundoff floor for O(1) states
    const bool ok = affine_err <= 1e-20 && std::abs(q.order_x - 2.0) <= 0.2 && std::abs(q.order_yz - 2.0) <= 0.2;
    return {ok, fmt("affine max error %.1e, perturbed slopes X %.3f, (Y,Z) %.3f", affine_err, q.order_x, q.order_yz)};
}

Outcome gateaux() {
    const Scenario s = load_scenario(kData + "/lq.json");
    const QPOracleResult qp = qp_oracle(s);
    const PipelineRun base = run_pipeline(s, qp.u);
    std::mt19937_64 rng(s.seed);
    const double eps = 1e-4;
    double one_sided = 0.0, extrapolated = 0.0;
    for (int k = 0; k < 50; ++k) {
        const AdaptedProcess v = random_adapted(s.grid, s.l(), rng);
        const GateauxReport r = gateaux_vs_hamiltonian(s, qp.u, v, {eps}, &base);
        one_sided = std::max(one_sided, std::abs(r.quotient[0] - r.directional));
        extrapolated = std::max(extrapolated, r.gap[0]);
    }
    return {one_sided <= 1e-8,
            fmt("one-sided quotient gap %.2e at eps=1e-4 (curvature term eps/2 D2J[v,v]); extrapolated gap %.2e",
                one_sided, extrapolated)};
}

Outcome optimality() {
    const Scenario s = load_scenario(kData + "/lq.json");
    const QPOracleResult qp = qp_oracle(s);
    const NCReport at = check_pointwise_nc(s, qp.u);
    AdaptedProcess off = qp.u;
    for (int i = 0; i < s.steps(); ++i) off.level(i) *= 1.1;
    const NCReport bad = check_pointwise_nc(s, off);
    return {s.steps() == 6 && at.worst >= -1e-6 && at.hu_inf <= 1e-6 && bad.worst <= -1e-3,
            fmt("optimum worst %.2e, |H_u| %.2e; perturbed worst %.3f", at.worst, at.hu_inf, bad.worst)};
}

Outcome torus_cone() {
    const ControlConstraint ring = torus();
    std::mt19937_64 rng(97);
    std::uniform_real_distribution<double> angle(0, 2 * std::numbers::pi), unit(0, 1);
    const double r_in = std::sqrt(2.0), r_out = 2.0;
    int disagreements = 0, boundary = 0;
    for (int k = 0; k < 100; ++k) {
        double rad;
        if (k % 3 == 0) rad = r_in;
        else if (k % 3 == 1) rad = r_out;
        else rad = r_in + (r_out - r_in) * unit(rng);
        const double phi = angle(rng);
        const Vec u = (Vec(2) << rad * std::cos(phi), rad * std::sin(phi)).finished();
        const ConeRep cone = adjacent_cone(ring, u);
        if (!cone.trivial()) ++boundary;
        for (int d = 0; d < 8; ++d) {
            const double a = angle(rng);
            const Vec v = (Vec(2) << std::cos(a), std::sin(a)).finished();
            if (dist_limit_probe(ring, u, v).member != cone.contains(v)) ++disagreements;
        }
    }
    std::normal_distribution<double> nd;
    double polar_gap = 0.0;
    for (int k = 0; k < 100; ++k) {
        ConeRep cone;
        if (k % 2 == 0) {
            const double phi = angle(rng);
            const double rad = (k % 4 == 0) ? r_in : r_out;
            cone = adjacent_cone(ring, (Vec(2) << rad * std::cos(phi), rad * std::sin(phi)).finished());
        } else {
            Mat W(3, 2);
            for (double& x : W.reshaped()) x = nd(rng);
            if (!licq(W)) continue;
            cone = ConeRep::polyhedral(W);
        }
        Vec F(cone.dim);
        for (double& x : F) x = nd(rng);
        // primal value evaluated at the returned direction against the dual bound -|F + W lambda|
        const ConeMin cm = cone_min_linear(F, cone);
        const bool feasible = cm.argmin.norm() <= 1 + 1e-12 && cone.contains(cm.argmin, 1e-10);
        const double primal = F.dot(cm.argmin);
        const double dual = -kkt_multipliers(F, cone.normals).residual;
        polar_gap = std::max(polar_gap, feasible ? std::abs(primal - dual) : 1.0);
    }
    return {disagreements == 0 && polar_gap <= 1e-10,
            fmt("%d disagreements over 800 probes (%d boundary points); KKT vs cone-min gap %.1e", disagreements,
                boundary, polar_gap)};
}

Outcome bsvie_oracle() {
    const int N = 5;
    TimeGrid G(1.0, N);
    auto a_coef = [](int i, int r) { return 0.6 * std::exp(-0.06 * (r - i) * (r - i)); };
    auto c_coef = [](int i, int r) { return 0.25 * std::cos(0.4 * i + 0.2 * r); };
    auto k_term = [](int i, int r, std::size_t w) { return std::sin(0.7 * i + 1.3 * r + 0.37 * double(w)); };
    TerminalField xi(N, 1);
    for (std::size_t w = 0; w < xi.size(); ++w) xi(w, 0) = std::cos(0.5 * double(w));
    RowTerminal term = [&](int i) {
        TerminalField t = xi;
        t *= 1.0 + 0.1 * i;
        return t;
    };
    RowDriver drv = [&](int i, int r, std::size_t w, const Vec& y, const Vec& z) {
        return Vec(a_coef(i, r) * y + c_coef(i, r) * z + Vec::Constant(1, k_term(i, r, w)));
    };
    const BackwardPath bp = solve_bsvie_general(G, 1, term, drv, 1e-14, 400);

    // unknowns lambda(i, r, w), one dense system
    auto offset = [&](int i, int r, std::size_t w) {
        return static_cast<int>(i * (TimeGrid::nodes(N + 1) - 1) + (TimeGrid::nodes(r) - 1) + w);
    };
    const int n = static_cast<int>((N + 1) * (TimeGrid::nodes(N + 1) - 1));
    Mat A = Mat::Zero(n, n);
    Vec rhs = Vec::Zero(n);
    const double dt = G.dt(), sq = G.sqrt_dt();
    for (int i = 0; i <= N; ++i) {
        for (std::size_t w = 0; w < G.leaves(); ++w) {
            A(offset(i, N, w), offset(i, N, w)) = 1;
            rhs(offset(i, N, w)) = (1.0 + 0.1 * i) * xi(w, 0);
        }
        for (int r = 0; r < N; ++r)
            for (std::size_t w = 0; w < TimeGrid::nodes(r); ++w) {
                const int row = offset(i, r, w);
                A(row, row) += 1;
                A(row, offset(i, r + 1, 2 * w)) += -0.5 + c_coef(i, r) * dt / (2 * sq);
                A(row, offset(i, r + 1, 2 * w + 1)) += -0.5 - c_coef(i, r) * dt / (2 * sq);
                A(row, offset(r, r, w)) -= a_coef(i, r) * dt;
                rhs(row) = k_term(i, r, w) * dt;
            }
    }
    const Vec x = A.partialPivLu().solve(rhs);
    double worst = 0.0;
    for (int i = 0; i <= N; ++i)
        for (int r = 0; r <= N; ++r)
            for (std::size_t w = 0; w < TimeGrid::nodes(r); ++w)
                worst = std::max(worst, std::abs(bp.lambda.at(i, r, w)(0) - x(offset(i, r, w))));
    bool strict = true;
    for (std::size_t k = 1; k < bp.residuals.size(); ++k) strict = strict && bp.residuals[k] < bp.residuals[k - 1];
    return {worst <= 1e-10 && strict,
            fmt("max node gap %.2e vs dense solve, %zu Picard sweeps, strictly decreasing: %s", worst,
                bp.residuals.size(), strict ? "yes" : "no")};
}

struct Criterion {
    const char* name;
    double budget_s;
    std::function<Outcome()> run;
};

} // namespace

int main(int argc, char** argv) {
    const std::map<int, Criterion> all{
        {1, {"duality identity 1", 10, duality_one}},
        {2, {"duality identity 2", 10, duality_two}},
        {3, {"operator-transpose oracle", 5, transpose_oracle}},
        {4, {"FBSDE degeneration", 10, fbsde_degeneration}},
        {5, {"adjoint residuals", 10, adjoint_residuals}},
        {6, {"variational convergence", 20, variational_convergence}},
        {7, {"Gateaux consistency", 30, gateaux}},
        {8, {"optimality certification", 30, optimality}},
        {9, {"torus cone", 5, torus_cone}},
        {10, {"BSVIE solver oracle", 10, bsvie_oracle}},
    };
    std::vector<int> pick;
    if (argc > 1) {
        const int k = std::atoi(argv[1]);
        if (!all.count(k)) {
            std::fprintf(stderr, "usage: acceptance [1-10]\n");
            return 2;
        }
        pick.push_back(k);
    } else {
        for (const auto& [k, c] : all) pick.push_back(k);
    }
    int failures = 0;
    for (int k : pick) {
        const Criterion& c = all.at(k);
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = c.run();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        const bool in_time = secs <= c.budget_s;
        const bool pass = o.pass && in_time;
        if (!pass) ++failures;
        std::printf("[%s] %2d %-26s %s; %.2f s of %.0f s%s\n", pass ? "PASS" : "FAIL", k, c.name, o.detail.c_str(), secs,
                    c.budget_s, in_time ? "" : " (over budget)");
        std::fflush(stdout);
    }
    return failures;
}
