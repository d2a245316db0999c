#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "cdpd/robustness.hpp"
#include "cdpd/simulate.hpp"
#include "test_util.hpp"

using namespace cdpd;

namespace {

const VectorXd kTheta = VectorXd::Constant(1, 0.5);
const VectorXd kGamma = VectorXd::Constant(1, 1.0);

// c·ψ for an underlying estimating function.
class ScaledPsi final : public EstimatingFunction {
 public:
  ScaledPsi(const EstimatingFunction& base, double c) : base_(base), c_(c) {}
  Index dim() const override { return base_.dim(); }
  VectorXd value(double y, ConstVecRef x, const VectorXd& par) const override {
    return c_ * base_.value(y, x, par);
  }
  MatrixXd jacobian(double y, ConstVecRef x, const VectorXd& par) const override {
    return c_ * base_.jacobian(y, x, par);
  }

 private:
  const EstimatingFunction& base_;
  double c_;
};

}  // namespace

TEST(Influence, ZeroWhereScoreVanishes) {
  const auto m = make_model("erm", 1);
  // −u_θ = −(y e^{-xθ} − 1)x is zero at y = e^{xθ}; u_γ = 0 at x = γ.
  const VectorXd x0 = kGamma;
  const double y0 = std::exp(x0(0) * kTheta(0));
  for (auto variant : {Variant::joint, Variant::conditional}) {
    const VectorXd inf = influence(*m, {0.0, variant}, kTheta, kGamma, y0, x0);
    EXPECT_LT(inf.norm(), 1e-12);
  }
}

TEST(Influence, AlphaZeroGrowsWithResponse) {
  const auto m = make_model("erm", 1);
  const DpdConfig cfg{0.0, Variant::joint};
  const double a = influence(*m, cfg, kTheta, kGamma, 1e3, kGamma).norm();
  const double b = influence(*m, cfg, kTheta, kGamma, 1e6, kGamma).norm();
  EXPECT_GT(b, 100.0 * a);
}

TEST(Influence, ModelLambdaAtAlphaZeroIsFisherInformation) {
  const auto m = make_model("erm", 1);
  const MdpdePsi fn(*m, {0.0, Variant::joint});
  VectorXd par(2);
  par << kTheta, kGamma;
  const MatrixXd lam = model_lambda(fn, par);
  // E[X²] = γ² + 1, identity block for γ, zero cross terms.
  EXPECT_NEAR(lam(0, 0), 2.0, 1e-8);
  EXPECT_NEAR(lam(1, 1), 1.0, 1e-8);
  EXPECT_NEAR(lam(0, 1), 0.0, 1e-8);
  EXPECT_NEAR(lam(1, 0), 0.0, 1e-8);
}

TEST(Influence, ModelLambdaAgreesWithLargeSampleEstimate) {
  SimDesign d;
  d.model = "erm";
  d.theta0 = 0.5;
  d.gamma0 = 1.0;
  d.n = 40000;
  d.censoring = 0.0;
  const auto ws = prepare(generate(d, 0));
  const auto m = make_model("erm", 1);
  const MdpdePsi fn(*m, {0.3, Variant::joint});
  VectorXd par(2);
  par << kTheta, kGamma;
  const MatrixXd model = model_lambda(fn, par);
  const MatrixXd sample = fn.weighted_jacobian(ws.sorted, ws.weights.w, par);
  EXPECT_LT((model - sample).cwiseAbs().maxCoeff(), 0.03 * model.cwiseAbs().maxCoeff());
}

TEST(Influence, ZeroMeanUnderModel) {
  const auto m = make_model("erm", 1);
  for (auto variant : {Variant::joint, Variant::conditional}) {
    const DpdConfig cfg{0.3, variant};
    const MdpdePsi fn(*m, cfg);
    const VectorXd par = stack_parameters(kTheta, kGamma, variant);
    const MatrixXd lam = model_lambda(fn, par, kGamma);
    const MatrixXd mean = model_expectation(
        *m, kTheta, kGamma,
        [&](double y, const VectorXd& x) -> MatrixXd { return influence(fn, lam, par, y, x); },
        fn.dim(), 1);
    EXPECT_LT(mean.cwiseAbs().maxCoeff(), 1e-5);
  }
}

TEST(Influence, InvariantUnderPsiRescaling) {
  SimDesign d;
  d.model = "erm";
  d.theta0 = 0.5;
  d.gamma0 = 1.0;
  d.n = 200;
  const auto ws = prepare(generate(d, 0));
  const auto m = make_model("erm", 1);
  const MdpdePsi fn(*m, {0.3, Variant::joint});
  VectorXd par(2);
  par << kTheta, kGamma;
  const VectorXd x0 = VectorXd::Constant(1, 2.5);
  const VectorXd base = influence(fn, ws, par, 7.0, x0);
  for (double c : {0.5, 2.0}) {
    const ScaledPsi scaled(fn, c);
    EXPECT_LT((influence(scaled, ws, par, 7.0, x0) - base).cwiseAbs().maxCoeff(), 1e-10);
  }
}

TEST(Boundedness, VerdictsFollowVariantAndAlpha) {
  const auto m = make_model("erm", 1);
  auto verdict = [&](double alpha, Variant v) {
    const auto r = boundedness_report(*m, {alpha, v}, kTheta, kGamma);
    return std::pair<bool, bool>{r.bounded_in_y, r.bounded_in_x};
  };
  EXPECT_EQ(verdict(0.5, Variant::joint), std::make_pair(true, true));
  EXPECT_EQ(verdict(0.3, Variant::joint), std::make_pair(true, true));
  EXPECT_EQ(verdict(0.5, Variant::conditional), std::make_pair(true, false));
  EXPECT_EQ(verdict(0.3, Variant::conditional), std::make_pair(true, false));
  EXPECT_EQ(verdict(0.0, Variant::joint), std::make_pair(false, false));
}

TEST(Boundedness, CurveExportsCsv) {
  const auto m = make_model("erm", 1);
  const auto r = boundedness_report(*m, {0.5, Variant::joint}, kTheta, kGamma);
  EXPECT_EQ(r.curve.points.size(), 7u + 2u * 4u);
  EXPECT_TRUE(std::isfinite(r.curve.sup_norm));
  std::ostringstream os;
  write_influence_csv(os, r.curve);
  const std::string csv = os.str();
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "direction,shell,y0,x0_1,IF_theta[x1],IF_gamma[x1],norm");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 16);
}

TEST(Boundedness, GridValidation) {
  GridSpec g;
  g.y_ratio = 1.0;
  EXPECT_THROW(g.validate(), validation_error);
  g = {};
  g.growth_threshold = 0.9;
  EXPECT_THROW(g.validate(), validation_error);
}

TEST(Boundedness, SingularLambdaReported) {
  const FunctionPsi flat(1, [](double, ConstVecRef, const VectorXd&) {
    return VectorXd::Constant(1, 0.0);
  });
  EXPECT_THROW(boundedness_report(flat, MatrixXd::Zero(1, 1), VectorXd::Zero(1),
                                  VectorXd::Zero(1), 1.0, GridSpec{}),
               singular_matrix_error);
}

// Refit with one injected point; the shift tracks IF/(n+1).
TEST(Influence, SensitivityCurveTracksInfluence) {
  SimDesign d;
  d.model = "erm";
  d.theta0 = 0.5;
  d.gamma0 = 1.0;
  d.n = 500;
  d.censoring = 0.0;
  const auto clean = generate(d, 3);
  const auto m = make_model("erm", 1);
  const DpdConfig cfg{0.3, Variant::joint};
  const auto base = fit_mdpde(*m, clean, cfg);
  const double y0 = 6.0;
  const VectorXd x0 = VectorXd::Constant(1, 2.5);
  CensoredSample dirty = clean;
  dirty.z.conservativeResize(501);
  dirty.delta.conservativeResize(501);
  dirty.x.conservativeResize(501, 1);
  dirty.z(500) = y0;
  dirty.delta(500) = 1;
  dirty.x(500, 0) = x0(0);
  const auto shifted = fit_mdpde(*m, dirty, cfg);
  const VectorXd sc = (shifted.parameters() - base.parameters()) * 501.0;
  const MdpdePsi fn(*m, cfg);
  const VectorXd inf = influence(fn, prepare(clean), base.parameters(), y0, x0);
  for (Index k = 0; k < 2; ++k) EXPECT_NEAR(sc(k), inf(k), 0.25 * std::abs(inf(k))) << k;
}
