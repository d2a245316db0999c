#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "cdpd/simulate.hpp"
#include "test_util.hpp"

using namespace cdpd;

TEST(CalibrateTau, TargetsFromTheDesign) {
  EXPECT_NEAR(calibrate_tau(1.0, 5.0, 0.10), 9.0 * 5.0, 1e-12);
  EXPECT_NEAR(calibrate_tau(2.0, 3.0, 0.20), 4.0 * 6.0, 1e-12);
  EXPECT_NEAR(calibrate_tau(1.5, 2.0, 0.50), 3.0, 1e-12);
  EXPECT_THROW(calibrate_tau(1.0, 1.0, 0.0), validation_error);
  EXPECT_THROW(calibrate_tau(1.0, 1.0, 1.0), validation_error);
  EXPECT_THROW(calibrate_tau(1.0, -1.0, 0.1), domain_error);
}

TEST(CalibrateTau, MarginalRateMatchesTargetByQuadrature) {
  SimDesign d;
  d.model = "erm";
  d.theta0 = 0.5;
  d.gamma0 = 1.0;
  d.censoring = 0.1;
  const double tau = calibrate_marginal_tau(d);
  // P(Y > C) = E[μ(X)/(τ + μ(X))] with X ~ N(1, 1).
  const double rate = gk_integrate(
      [&](double x) {
        const double mu = std::exp(0.5 * x);
        return mu / (tau + mu) * std::exp(-0.5 * (x - 1.0) * (x - 1.0)) / std::sqrt(2.0 * M_PI);
      },
      -11.0, 13.0);
  EXPECT_NEAR(rate, 0.1, 1e-9);
}

TEST(Generate, DeterministicPerSeedAndReplication) {
  SimDesign d;
  d.contamination = 0.1;
  const auto a = generate(d, 4), b = generate(d, 4), c = generate(d, 5);
  EXPECT_EQ(a.z, b.z);
  EXPECT_EQ(a.delta, b.delta);
  EXPECT_EQ(a.x, b.x);
  EXPECT_NE(a.z, c.z);
  d.seed = 2;
  EXPECT_NE(generate(d, 4).z, a.z);
}

TEST(Generate, MeanCensoredFractionNearTarget) {
  for (double target : {0.1, 0.2}) {
    SimDesign d;
    d.censoring = target;
    double acc = 0.0;
    for (int r = 0; r < 1000; ++r) acc += generate(d, static_cast<std::uint64_t>(r)).censored_fraction();
    EXPECT_NEAR(acc / 1000.0, target, 0.02) << target;
  }
}

TEST(Generate, ContaminationChannels) {
  SimDesign d;
  d.n = 2000;
  d.censoring = 0.0;
  d.contamination = 0.2;
  const Index k = 400;
  auto ratio_mean = [](const CensoredSample& s, Index lo, Index hi) {
    double acc = 0.0;
    for (Index i = lo; i < hi; ++i) acc += s.z(i) / s.x(i, 0);
    return acc / static_cast<double>(hi - lo);
  };
  auto x_mean = [](const CensoredSample& s, Index lo, Index hi) {
    return s.x.col(0).segment(lo, hi - lo).mean();
  };
  d.channel = ContaminationChannel::response;
  auto s = generate(d, 0);
  EXPECT_NEAR(ratio_mean(s, 0, k), 5.0, 0.6);
  EXPECT_NEAR(ratio_mean(s, k, d.n), 1.0, 0.1);
  EXPECT_NEAR(x_mean(s, 0, k), 5.0, 0.2);
  d.channel = ContaminationChannel::covariate;
  s = generate(d, 0);
  EXPECT_NEAR(x_mean(s, 0, k), 10.0, 0.2);
  EXPECT_NEAR(ratio_mean(s, 0, k), 1.0, 0.15);
  d.channel = ContaminationChannel::both;
  s = generate(d, 0);
  EXPECT_NEAR(x_mean(s, 0, k), 10.0, 0.2);
  EXPECT_NEAR(ratio_mean(s, 0, k), 5.0, 0.6);
  EXPECT_NEAR(x_mean(s, k, d.n), 5.0, 0.1);
}

TEST(Generate, NoCensoringWhenTargetIsZero) {
  SimDesign d;
  d.censoring = 0.0;
  EXPECT_EQ(generate(d, 0).events(), d.n);
}

TEST(SimDesign, Validation) {
  SimDesign d;
  d.n = 5;
  EXPECT_THROW(d.validate(), validation_error);
  d = {};
  d.model = "aft-weibull";
  EXPECT_THROW(d.validate(), validation_error);
  d = {};
  d.contamination = 1.5;
  EXPECT_THROW(d.validate(), validation_error);
  d = {};
  d.alphas = {};
  EXPECT_THROW(d.validate(), validation_error);
  EXPECT_THROW(parse_channel("x"), validation_error);
  EXPECT_EQ(parse_censoring_mode("marginal"), CensoringMode::marginal);
}

TEST(RunStudy, SmallStudyIsDeterministicAndWellFormed) {
  SimDesign d;
  d.replications = 12;
  d.alphas = {0.0, 0.5};
  const auto a = run_study(d);
  const auto b = run_study(d);
  ASSERT_EQ(a.rows.size(), 2u);
  EXPECT_EQ(a.row(0.0).efficiency, 1.0);
  EXPECT_EQ(a.failed_fits, 0);
  EXPECT_EQ(a.total_fits, 24);
  for (std::size_t k = 0; k < 2; ++k) {
    EXPECT_EQ(a.rows[k].total_mse, b.rows[k].total_mse);
    EXPECT_EQ(a.rows[k].bias, b.rows[k].bias);
    // MSE ≥ bias² componentwise.
    EXPECT_TRUE((a.rows[k].mse.array() >= a.rows[k].bias.array().square() - 1e-15).all());
  }
  EXPECT_THROW(a.row(0.3), validation_error);

  std::ostringstream csv, table;
  write_report_csv(csv, {a});
  write_clean_table(table, {a});
  EXPECT_NE(csv.str().find("total_mse"), std::string::npos);
  EXPECT_NE(table.str().find("100%"), std::string::npos);
}

TEST(RunStudy, FailureRateEnforced) {
  SimDesign d;
  d.replications = 4;
  d.alphas = {0.3};
  d.solver.max_iterations = 1;
  d.solver.tolerance = 1e-300;
  EXPECT_THROW(run_study(d), study_error);
  const auto rep = run_study(d, false);
  EXPECT_EQ(rep.failed_fits, 4);
}
