#include "fbsvie/scenario.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

using namespace fbsvie;

namespace {

const std::string kData = FBSVIE_DATA_DIR;

json lq_json() {
    std::ifstream in(kData + "/lq.json");
    return json::parse(in);
}

std::string error_field(const json& j) {
    try {
        parse_scenario(j);
    } catch (const ScenarioError& e) {
        return e.field();
    }
    return "";
}

// Delegates to a catalog model and lets a test corrupt one derivative.
class Tampered final : public Model {
public:
    Tampered(std::shared_ptr<const Model> base, double bx_factor, bool quadratic_gx)
        : Model(base->n(), base->m(), base->l()), base_(std::move(base)), bx_factor_(bx_factor), quad_(quadratic_gx) {}
    Vec phi(double t) const override { return base_->phi(t); }
    Vec b(double t, double s, const Vec& x, const Vec& u) const override { return base_->b(t, s, x, u); }
    Mat b_x(double t, double s, const Vec& x, const Vec& u) const override { return bx_factor_ * base_->b_x(t, s, x, u); }
    Mat b_u(double t, double s, const Vec& x, const Vec& u) const override { return base_->b_u(t, s, x, u); }
    Vec sigma(double t, double s, const Vec& x, const Vec& u) const override { return base_->sigma(t, s, x, u); }
    Mat sigma_x(double t, double s, const Vec& x, const Vec& u) const override { return base_->sigma_x(t, s, x, u); }
    Mat sigma_u(double t, double s, const Vec& x, const Vec& u) const override { return base_->sigma_u(t, s, x, u); }
    Vec g(double t, double s, const Vec& x, const Vec& y, const Vec& z, const Vec& u) const override {
        Vec out = base_->g(t, s, x, y, z, u);
        if (quad_) out.array() += 0.5 * x.squaredNorm();
        return out;
    }
    Mat g_x(double t, double s, const Vec& x, const Vec& y, const Vec& z, const Vec& u) const override {
        Mat out = base_->g_x(t, s, x, y, z, u);
        if (quad_) out.rowwise() += x.transpose();
        return out;
    }
    Mat g_y(double t, double s, const Vec& x, const Vec& y, const Vec& z, const Vec& u) const override { return base_->g_y(t, s, x, y, z, u); }
    Mat g_z(double t, double s, const Vec& x, const Vec& y, const Vec& z, const Vec& u) const override { return base_->g_z(t, s, x, y, z, u); }
    Mat g_u(double t, double s, const Vec& x, const Vec& y, const Vec& z, const Vec& u) const override { return base_->g_u(t, s, x, y, z, u); }
    Vec psi(double t, const Vec& x) const override { return base_->psi(t, x); }
    Mat psi_x(double t, const Vec& x) const override { return base_->psi_x(t, x); }
    double f(double s, const Vec& x, const Vec& y, const Vec& z, const Vec& u) const override { return base_->f(s, x, y, z, u); }
    Vec f_x(double s, const Vec& x, const Vec& y, const Vec& z, const Vec& u) const override { return base_->f_x(s, x, y, z, u); }
    Vec f_y(double s, const Vec& x, const Vec& y, const Vec& z, const Vec& u) const override { return base_->f_y(s, x, y, z, u); }
    Vec f_z(double s, const Vec& x, const Vec& y, const Vec& z, const Vec& u) const override { return base_->f_z(s, x, y, z, u); }
    Vec f_u(double s, const Vec& x, const Vec& y, const Vec& z, const Vec& u) const override { return base_->f_u(s, x, y, z, u); }
    double h(const Vec& xT, const Vec& y0) const override { return base_->h(xT, y0); }
    Vec h_x(const Vec& xT, const Vec& y0) const override { return base_->h_x(xT, y0); }
    Vec h_y(const Vec& xT, const Vec& y0) const override { return base_->h_y(xT, y0); }

private:
    std::shared_ptr<const Model> base_;
    double bx_factor_;
    bool quad_;
};

} // namespace

TEST(Scenario, LoadsShippedFixture) {
    const Scenario s = load_scenario(kData + "/lq.json");
    EXPECT_EQ(s.n(), 1);
    EXPECT_EQ(s.steps(), 6);
    EXPECT_EQ(s.seed, 7u);
    EXPECT_TRUE(s.model->affine());
    EXPECT_TRUE(std::holds_alternative<Unconstrained>(s.constraint));
    EXPECT_TRUE(validate(s).empty());
}

TEST(Scenario, CanonicalJsonRoundTrip) {
    const Scenario s = load_scenario(kData + "/lq.json");
    const json once = to_json(s);
    const json twice = to_json(parse_scenario(once));
    EXPECT_EQ(once.dump(), twice.dump());
}

TEST(Scenario, SaveAndReload) {
    const Scenario s = load_scenario(kData + "/lq.json");
    const auto path = std::filesystem::temp_directory_path() / "fbsvie_roundtrip.json";
    save_scenario(s, path.string());
    const Scenario r = load_scenario(path.string());
    EXPECT_EQ(to_json(s).dump(), to_json(r).dump());
    std::filesystem::remove(path);
}

TEST(Scenario, UnknownKeysNameTheField) {
    json j = lq_json();
    j["coefficients"]["psi"]["y"] = json::array({json::array({1.0})});
    EXPECT_EQ(error_field(j), "psi");
    j = lq_json();
    j["extra"] = 1;
    EXPECT_EQ(error_field(j), "scenario");
    j = lq_json();
    j["cost"]["f"]["w"] = 1;
    EXPECT_EQ(error_field(j), "cost.f");
}

TEST(Scenario, WrongShapesNameTheField) {
    json j = lq_json();
    j["coefficients"]["psi"]["x"] = json::array({json::array({1.0, 2.0})});
    EXPECT_EQ(error_field(j), "psi.x");
    j = lq_json();
    j["grid"]["N"] = 0;
    EXPECT_EQ(error_field(j), "grid");
    j = lq_json();
    j["constraint"] = {{"type", "ball"}, {"radius", -1.0}};
    EXPECT_EQ(error_field(j), "constraint.radius");
    j = lq_json();
    j["constraint"] = {{"type", "torus"}};
    EXPECT_EQ(error_field(j), "constraint");  // l = 1
}

TEST(Scenario, MissingFileIsReported) {
    EXPECT_THROW(load_scenario(kData + "/no_such_file.json"), ScenarioError);
}

TEST(Scenario, ConstraintVariantsParse) {
    json j = lq_json();
    j["dims"]["l"] = 2;
    j["coefficients"]["b"]["u"] = json::array({json::array({1.0, 0.5})});
    j["coefficients"]["sigma"]["u"] = json::array({json::array({0.3, 0.0})});
    j["coefficients"]["g"]["u"] = json::array({json::array({0.4, -0.2})});
    j["cost"]["f"]["u"] = json::array({json::array({1.0, 0.0}), json::array({0.0, 1.0})});
    j["cost"]["f"]["lin_u"] = json::array({0.3, 0.1});
    j["constraint"] = {{"type", "torus"}};
    Scenario s = parse_scenario(j);
    ASSERT_TRUE(std::holds_alternative<SmoothInequalities>(s.constraint));
    auto ann = as_annulus(std::get<SmoothInequalities>(s.constraint));
    ASSERT_TRUE(ann.has_value());
    EXPECT_EQ(ann->first, 2.0);
    EXPECT_EQ(ann->second, 4.0);
    j["constraint"] = {{"type", "polyhedron"}, {"A", {{1.0, 0.0}, {0.0, 1.0}}}, {"b", {1.0, 1.0}}};
    s = parse_scenario(j);
    EXPECT_TRUE(std::holds_alternative<Polyhedron>(s.constraint));
    EXPECT_TRUE(contains(s.constraint, Vec::Zero(2)));
    EXPECT_FALSE(contains(s.constraint, Vec::Constant(2, 2.0)));
}

TEST(Validate, FlagsDoubledDerivativeWithRatioTwo) {
    Scenario s = load_scenario(kData + "/lq.json");
    s.model = std::make_shared<Tampered>(s.model, 2.0, false);
    const auto diags = validate(s);
    ASSERT_EQ(diags.size(), 1u);
    EXPECT_EQ(diags[0].field, "b_x");
    EXPECT_NEAR(diags[0].discrepancy, 2.0, 1e-6);
}

TEST(Validate, FlagsUnboundedCoefficientDerivative) {
    Scenario s = load_scenario(kData + "/lq.json");
    s.model = std::make_shared<Tampered>(s.model, 1.0, true);
    bool found = false;
    for (const auto& d : validate(s))
        if (d.field == "g_x" && d.severity == Diagnostic::Severity::Error) found = true;
    EXPECT_TRUE(found);
}

TEST(Scenario, WithStepsKeepsCoefficients) {
    const Scenario s = load_scenario(kData + "/lq.json");
    const Scenario r = with_steps(s, 3);
    EXPECT_EQ(r.steps(), 3);
    EXPECT_EQ(r.model.get(), s.model.get());
}
