// fbsvie: command-line driver for the lattice solvers and checks.
//
// Exit codes: 0 pass, 1 check failed, 2 usage or input error.

#include "fbsvie/fbsvie.hpp"
#include "fbsvie/verify.hpp"

#include <CLI11.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

using namespace fbsvie;
namespace fs = std::filesystem;

namespace {

constexpr int kPass = 0, kFail = 1, kUsage = 2;

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct RunConfig {
    std::string command;
    std::string scenario_path;
    std::optional<int> steps;
    std::string out_dir = "reports";
    std::optional<std::uint64_t> seed;
    std::optional<double> tol;
    std::string mode = "transpose";
    int eps_sweep = 8;
    std::string control_path;
};

std::uint64_t fnv1a(const std::string& text) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : text) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

json read_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw UsageError("cannot open " + path);
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw UsageError(path + ": " + e.what());
    }
}

Vec to_vec(const json& j, int dim, const std::string& where) {
    if (!j.is_array() || static_cast<int>(j.size()) != dim)
        throw UsageError(where + ": expected an array of " + std::to_string(dim) + " numbers");
    Vec v(dim);
    for (int k = 0; k < dim; ++k) {
        if (!j[k].is_number()) throw UsageError(where + ": non-numeric entry");
        v(k) = j[k].get<double>();
    }
    return v;
}

// {"constant": [..l..]} or {"levels": [[node values], ...]} with 2^i nodes on level i.
AdaptedProcess read_control(const Scenario& s, const json& j) {
    const int N = s.steps(), l = s.l();
    if (j.contains("constant")) return constant_control(s, to_vec(j["constant"], l, "control.constant"));
    if (!j.contains("levels")) throw UsageError("control: need \"constant\" or \"levels\"");
    const json& lv = j["levels"];
    if (!lv.is_array() || static_cast<int>(lv.size()) != N)
        throw UsageError("control.levels: expected " + std::to_string(N) + " levels");
    AdaptedProcess u(N, l);
    for (int i = 0; i < N; ++i) {
        if (!lv[i].is_array() || lv[i].size() != TimeGrid::nodes(i))
            throw UsageError("control.levels[" + std::to_string(i) + "]: expected " +
                             std::to_string(TimeGrid::nodes(i)) + " nodes");
        for (std::size_t w = 0; w < TimeGrid::nodes(i); ++w)
            u.at(i, w) = to_vec(lv[i][w], l, "control.levels[" + std::to_string(i) + "]");
    }
    return u;
}

json control_to_json(const AdaptedProcess& u, int steps) {
    json levels = json::array();
    for (int i = 0; i < steps; ++i) {
        json row = json::array();
        for (std::size_t w = 0; w < TimeGrid::nodes(i); ++w) {
            const Vec v = u.at(i, w);
            row.push_back(std::vector<double>(v.data(), v.data() + v.size()));
        }
        levels.push_back(row);
    }
    return {{"levels", levels}};
}

std::string num(double x) {
    std::ostringstream os;
    os << std::setprecision(17) << x;
    return os.str();
}

class Runner {
public:
    explicit Runner(RunConfig cfg) : cfg_(std::move(cfg)) {
        try {
            scenario_ = load_scenario(cfg_.scenario_path);
        } catch (const ScenarioError& e) {
            throw UsageError(e.what());
        }
        if (cfg_.steps) {
            if (*cfg_.steps < 1) throw UsageError("--N must be positive");
            scenario_ = with_steps(scenario_, *cfg_.steps);
        }
        if (cfg_.seed) scenario_.seed = *cfg_.seed;
        if (cfg_.mode != "transpose" && cfg_.mode != "continuum")
            throw UsageError("--mode must be transpose or continuum");
        if (!cfg_.control_path.empty()) control_json_ = read_json(cfg_.control_path);
        if (cfg_.eps_sweep < 1 || cfg_.eps_sweep > 40) throw UsageError("--eps-sweep must be in 1..40");

        config_ = {{"command", cfg_.command},
                   {"scenario", to_json(scenario_)},
                   {"mode", cfg_.mode},
                   {"eps_sweep", cfg_.eps_sweep},
                   {"tol", cfg_.tol ? json(*cfg_.tol) : json(nullptr)},
                   {"control", control_json_ ? *control_json_ : json(nullptr)}};
    }

    int run() {
        const std::string& c = cfg_.command;
        if (c == "simulate") return simulate();
        if (c == "check-duality") return check_duality();
        if (c == "check-nc") return check_nc();
        if (c == "optimize") return optimize();
        if (c == "converge") return converge();
        if (c == "degenerate-fbsde") return degenerate_fbsde();
        throw UsageError("unknown command " + c);
    }

private:
    RunConfig cfg_;
    Scenario scenario_;
    std::optional<json> control_json_;
    json config_;

    std::mt19937_64 rng() const { return std::mt19937_64(scenario_.seed); }

    AdaptedProcess supplied_control() const {
        AdaptedProcess u = read_control(scenario_, *control_json_);
        try {
            check_feasible(scenario_, u);
        } catch (const SolverError& e) {
            throw UsageError(std::string("control: ") + e.what());
        }
        return u;
    }

    AdaptedProcess start_control() const {
        if (control_json_) return supplied_control();
        Vec e1 = Vec::Zero(scenario_.l());
        e1(0) = 1.0;
        return project_control(scenario_, constant_control(scenario_, e1));
    }

    void write_reports(json body, const std::string& csv) const {
        const std::string cfg_text = config_.dump();
        std::ostringstream name;
        name << cfg_.command << '-' << std::hex << std::setw(16) << std::setfill('0') << fnv1a(cfg_text);
        body["config"] = config_;
        fs::create_directories(cfg_.out_dir);
        const fs::path base = fs::path(cfg_.out_dir) / name.str();
        for (const auto& [ext, text] : {std::pair{".json", body.dump(2) + "\n"}, std::pair{".csv", csv}}) {
            const fs::path p = base.string() + ext;
            // reports are never overwritten; an identical config reproduces identical bytes
            if (fs::exists(p)) {
                std::cerr << "report exists, kept: " << p.string() << "\n";
                continue;
            }
            std::ofstream out(p, std::ios::binary);
            out << text;
            if (!out) throw std::runtime_error("failed to write " + p.string());
            std::cout << "wrote " << p.string() << "\n";
        }
    }

    int simulate() {
        AdaptedProcess u;
        if (control_json_) {
            u = supplied_control();
        } else {
            auto gen = rng();
            u = project_control(scenario_, random_adapted(scenario_.grid, scenario_.l(), gen, 0.5));
        }
        const PipelineRun p = run_pipeline(scenario_, u);
        const TimeGrid& G = scenario_.grid;
        const int N = G.steps(), n = scenario_.n(), m = scenario_.m(), l = scenario_.l();

        std::ostringstream csv;
        csv << "level,node";
        for (int k = 0; k < n; ++k) csv << ",X" << k;
        for (int k = 0; k < m; ++k) csv << ",Y" << k;
        for (int k = 0; k < l; ++k) csv << ",u" << k;
        for (int k = 0; k < l; ++k) csv << ",Hu" << k;
        csv << "\n";
        for (int i = 0; i <= N; ++i)
            for (std::size_t w = 0; w < TimeGrid::nodes(i); ++w) {
                csv << i << ',' << w;
                for (int k = 0; k < n; ++k) csv << ',' << num(p.state.fwd.X.at(i, w)(k));
                for (int k = 0; k < m; ++k) csv << ',' << num(p.state.bwd.Y.at(i, w)(k));
                for (int k = 0; k < l; ++k) csv << ',' << (i < N ? num(u.at(i, w)(k)) : "");
                for (int k = 0; k < l; ++k) csv << ',' << (i < N ? num(p.Hu.at(i, w)(k)) : "");
                csv << "\n";
            }
        const Vec y0 = p.state.bwd.Y.at(0, 0);
        json body = {{"J", p.state.J},
                     {"Y0", std::vector<double>(y0.data(), y0.data() + y0.size())},
                     {"picard_residuals", p.state.bwd.residuals},
                     {"picard_monotone", p.state.bwd.monotone},
                     {"hu_inf", p.Hu.max_abs(N - 1)},
                     {"pass", true}};
        std::cout << "J = " << num(p.state.J) << ", Picard sweeps " << p.state.bwd.residuals.size() << "\n";
        write_reports(body, csv.str());
        return kPass;
    }

    int check_duality() {
        const DualityMode mode = cfg_.mode == "transpose" ? DualityMode::Transpose : DualityMode::Continuum;
        InstanceOptions opt;
        opt.aligned = mode == DualityMode::Continuum;
        const double T = scenario_.grid.horizon();
        const int m = scenario_.m();
        std::ostringstream csv;
        csv << "identity,N,lhs,rhs,gap\n";
        json body;
        bool pass = true;

        auto record = [&](int id, int N, const DualityResult& r) {
            csv << id << ',' << N << ',' << num(r.lhs) << ',' << num(r.rhs) << ',' << num(r.gap) << "\n";
        };
        if (mode == DualityMode::Transpose) {
            const double tol = cfg_.tol.value_or(1e-10);
            const DualityInstance d = random_duality_instance(scenario_.steps(), m, scenario_.seed, opt, T);
            const DualityResult r1 = check_duality_1(d, mode), r2 = check_duality_2(d, mode);
            record(1, scenario_.steps(), r1);
            record(2, scenario_.steps(), r2);
            const double g1 = std::abs(r1.gap) / (1 + std::abs(r1.lhs)), g2 = std::abs(r2.gap) / (1 + std::abs(r2.lhs));
            pass = g1 <= tol && g2 <= tol;
            body = {{"gap_1", r1.gap}, {"gap_2", r2.gap}, {"relative_gap_1", g1}, {"relative_gap_2", g2}, {"tol", tol}};
            std::cout << "identity 1 gap " << num(r1.gap) << ", identity 2 gap " << num(r2.gap) << "\n";
        } else {
            // first order in dt: fit the log-log slope over a step sweep ending at N
            const double min_order = cfg_.tol.value_or(0.9);
            const int top = std::max(scenario_.steps(), 4);
            std::vector<double> dts, gaps1, gaps2;
            for (int N = std::max(2, top - 6); N <= top; N += 2) {
                const DualityInstance d = random_duality_instance(N, m, scenario_.seed, opt, T);
                const DualityResult r1 = check_duality_1(d, mode), r2 = check_duality_2(d, mode);
                record(1, N, r1);
                record(2, N, r2);
                dts.push_back(T / N);
                gaps1.push_back(std::abs(r1.gap));
                gaps2.push_back(std::abs(r2.gap));
            }
            const double o1 = loglog_slope(dts, gaps1), o2 = loglog_slope(dts, gaps2);
            pass = dts.size() >= 2 && o1 >= min_order && o2 >= min_order;
            body = {{"order_1", o1}, {"order_2", o2}, {"min_order", min_order}};
            std::cout << "continuum gap order: identity 1 " << o1 << ", identity 2 " << o2 << "\n";
        }
        body["mode"] = cfg_.mode;
        body["pass"] = pass;
        write_reports(body, csv.str());
        return pass ? kPass : kFail;
    }

    // The candidate optimum: the QP oracle when the problem is a supported quadratic, else PG.
    AdaptedProcess optimal_control(json& body) {
        try {
            const QPOracleResult qp = qp_oracle(scenario_);
            body["source"] = "qp_oracle";
            body["J"] = qp.J;
            return qp.u;
        } catch (const std::invalid_argument&) {
        }
        const PGResult pg = projected_gradient(scenario_, start_control(), 0.5, 5000, 1e-9);
        body["source"] = "projected_gradient";
        body["J"] = pg.J.back();
        body["pg_iterations"] = pg.iterations;
        return pg.u;
    }

    int check_nc() {
        json extra;
        AdaptedProcess u;
        if (control_json_) {
            u = supplied_control();
            extra["source"] = "control";
        } else {
            u = optimal_control(extra);
        }
        Scenario s = scenario_;
        if (cfg_.tol) s.tol.nc_tol = *cfg_.tol;
        const NCReport rep = check_pointwise_nc(s, u);
        json body = to_json(rep);
        body.update(extra);
        std::cout << "worst node (" << rep.worst_level << ", " << rep.worst_node << ") min value " << num(rep.worst)
                  << (rep.pass ? " ok" : " below tolerance") << "\n";
        write_reports(body, to_csv(rep));
        return rep.pass ? kPass : kFail;
    }

    int optimize() {
        const PGResult pg = projected_gradient(scenario_, start_control(), 0.5, 5000, cfg_.tol.value_or(1e-9));
        const NCReport rep = check_pointwise_nc(scenario_, pg.u);
        std::ostringstream csv;
        csv << "iteration,J\n";
        for (std::size_t k = 0; k < pg.J.size(); ++k) csv << k << ',' << num(pg.J[k]) << "\n";
        json body = {{"J", pg.J.back()},
                     {"iterations", pg.iterations},
                     {"converged", pg.converged},
                     {"grad_map_norm", pg.grad_map_norm},
                     {"nc", to_json(rep)},
                     {"control", control_to_json(pg.u, scenario_.steps())},
                     {"pass", rep.pass}};
        try {
            const double target = qp_oracle(scenario_).J;
            body["qp_J"] = target;
        } catch (const std::invalid_argument&) {
        }
        std::cout << "J = " << num(pg.J.back()) << " after " << pg.iterations << " iterations; NC worst "
                  << num(rep.worst) << "\n";
        write_reports(body, csv.str());
        return rep.pass ? kPass : kFail;
    }

    int converge() {
        auto gen = rng();
        const AdaptedProcess u = control_json_ ? supplied_control()
                                               : project_control(scenario_, random_adapted(scenario_.grid, scenario_.l(), gen, 0.5));
        const AdaptedProcess v = random_adapted(scenario_.grid, scenario_.l(), gen);
        const std::vector<double> eps = dyadic_eps(1, cfg_.eps_sweep);
        const ConvergenceReport rep = convergence_test(scenario_, u, v, eps);
        const bool affine = scenario_.model->affine();
        bool pass;
        if (affine) {
            const double tol = cfg_.tol.value_or(1e-20);
            pass = true;
            for (std::size_t k = 0; k < eps.size(); ++k) pass = pass && rep.err_x[k] <= tol && rep.err_yz[k] <= tol;
        } else {
            // squared errors of an O(eps^2) remainder fall like eps^2 once asymptotic
            const double min_order = cfg_.tol.value_or(1.8);
            pass = rep.monotone && rep.order_x >= min_order && rep.order_yz >= min_order;
        }
        std::ostringstream csv;
        csv << "eps,err_x,err_yz\n";
        for (std::size_t k = 0; k < eps.size(); ++k)
            csv << num(eps[k]) << ',' << num(rep.err_x[k]) << ',' << num(rep.err_yz[k]) << "\n";
        json body = {{"affine", affine},         {"eps", rep.eps},          {"err_x", rep.err_x},
                     {"err_yz", rep.err_yz},     {"monotone", rep.monotone}, {"order_x", rep.order_x},
                     {"order_yz", rep.order_yz}, {"pass", pass}};
        std::cout << (affine ? "affine model, max error " : "orders ") << num(affine ? std::max(rep.err_x.front(), rep.err_yz.front()) : rep.order_x)
                  << (affine ? "" : ", " + num(rep.order_yz)) << "\n";
        write_reports(body, csv.str());
        return pass ? kPass : kFail;
    }

    // The reduction reads every coefficient on the diagonal t = s, so the scenario must not
    // depend on t at all. Probed at random points rather than trusted from the catalog.
    void require_time_independent() const {
        const Model& M = *scenario_.model;
        const TimeGrid& G = scenario_.grid;
        auto gen = rng();
        std::normal_distribution<double> nd;
        auto rv = [&](int d) { return Vec(Vec::NullaryExpr(d, [&] { return nd(gen); })); };
        const int n = scenario_.n(), m = scenario_.m(), l = scenario_.l();
        double worst = (M.phi(0.0) - M.phi(G.horizon())).cwiseAbs().maxCoeff();
        for (int k = 0; k < 8; ++k) {
            const double s = G.horizon() * (0.25 + 0.5 * k / 8.0), t1 = 0.0, t2 = s;
            const Vec x = rv(n), y = rv(m), z = rv(m), u = rv(l);
            worst = std::max(worst, (M.b(t1, s, x, u) - M.b(t2, s, x, u)).cwiseAbs().maxCoeff());
            worst = std::max(worst, (M.sigma(t1, s, x, u) - M.sigma(t2, s, x, u)).cwiseAbs().maxCoeff());
            worst = std::max(worst, (M.g(t1, s, x, y, z, u) - M.g(t2, s, x, y, z, u)).cwiseAbs().maxCoeff());
            worst = std::max(worst, (M.psi(t1, x) - M.psi(t2, x)).cwiseAbs().maxCoeff());
        }
        if (worst > 1e-14)
            throw UsageError("degenerate-fbsde: scenario coefficients depend on t (difference " + num(worst) + ")");
    }

    int degenerate_fbsde() {
        require_time_independent();
        auto gen = rng();
        const AdaptedProcess u = control_json_ ? supplied_control()
                                               : project_control(scenario_, random_adapted(scenario_.grid, scenario_.l(), gen, 0.5));
        const PipelineRun p = run_pipeline(scenario_, u);
        const FbsdeReduction red = fbsde_reduction(scenario_, p.state.fwd, p.state.bwd, u);
        const int N = scenario_.steps(), l = scenario_.l();
        double gap = 0.0;
        std::ostringstream csv;
        csv << "level,node,component,Hu,Hu_reduced\n";
        for (int i = 0; i < N; ++i)
            for (std::size_t w = 0; w < TimeGrid::nodes(i); ++w)
                for (int k = 0; k < l; ++k) {
                    const double a = p.Hu.at(i, w)(k), b = red.Hu.at(i, w)(k);
                    gap = std::max(gap, std::abs(a - b));
                    csv << i << ',' << w << ',' << k << ',' << num(a) << ',' << num(b) << "\n";
                }
        const double tol = cfg_.tol.value_or(1e-10);
        const bool pass = gap <= tol;
        json body = {{"max_gap", gap}, {"tol", tol}, {"hu_inf", p.Hu.max_abs(N - 1)}, {"pass", pass}};
        std::cout << "max |H_u - reduced H_u| = " << num(gap) << "\n";
        write_reports(body, csv.str());
        return pass ? kPass : kFail;
    }
};

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Lattice solver and checks for controlled forward-backward Volterra systems"};
    app.require_subcommand(1, 1);
    RunConfig cfg;
    std::optional<int> steps;
    std::optional<std::uint64_t> seed;
    std::optional<double> tol;

    const std::vector<std::pair<std::string, std::string>> commands = {
        {"simulate", "Solve state and adjoint for a control and report them"},
        {"check-duality", "Check the duality identities on a random linear instance"},
        {"check-nc", "Check the pointwise necessary condition at a control"},
        {"optimize", "Projected gradient descent followed by the NC check"},
        {"converge", "Convergence of the variational equations as eps -> 0"},
        {"degenerate-fbsde", "Compare H_u with the forward-backward SDE reduction"}};
    for (const auto& [name, help] : commands) {
        CLI::App* sub = app.add_subcommand(name, help);
        sub->add_option("--scenario", cfg.scenario_path, "Scenario JSON")->required();
        sub->add_option("--N", steps, "Override the number of steps");
        sub->add_option("--out", cfg.out_dir, "Report directory")->capture_default_str();
        sub->add_option("--seed", seed, "Override the scenario seed");
        sub->add_option("--tol", tol, "Override the pass tolerance of the command");
        sub->add_option("--mode", cfg.mode, "Duality convention")
            ->check(CLI::IsMember({"transpose", "continuum"}))
            ->capture_default_str();
        sub->add_option("--eps-sweep", cfg.eps_sweep, "Use eps = 2^-1 .. 2^-k")->capture_default_str();
        sub->add_option("--control", cfg.control_path, "Control JSON ({\"constant\": [...]} or {\"levels\": ...})");
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kUsage;
    }

    cfg.command = app.get_subcommands().front()->get_name();
    cfg.steps = steps;
    cfg.seed = seed;
    cfg.tol = tol;
    try {
        Runner runner(cfg);
        return runner.run();
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kUsage;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kUsage;
    } catch (const std::exception& e) {
        // solver or cone failure: the check could not be completed
        std::cerr << "check failed: " << e.what() << "\n";
        return kFail;
    }
}
