#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "cdpd/dpd.hpp"
#include "test_util.hpp"

using namespace cdpd;

namespace {

CensoredSample erm_fixture() {
  CensoredSample s;
  s.z = Eigen::Vector2d(1.0, 2.0);
  s.delta = Eigen::Vector2i(1, 1);
  s.x = CovariateMatrix(2, 1);
  s.x << 0.5, -0.5;
  return s;
}

// Small censored sample from an ERM-like law; the largest Z is an event so
// the Stute weights sum to one.
CensoredSample random_sample(Index n, Index p, std::uint64_t seed, bool positive_x = false) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> z(0.0, 1.0);
  std::exponential_distribution<double> e(1.0);
  std::bernoulli_distribution cens(0.25);
  CensoredSample s;
  s.z.resize(n);
  s.delta.resize(n);
  s.x.resize(n, p);
  for (Index i = 0; i < n; ++i) {
    double lin = 0.0;
    for (Index j = 0; j < p; ++j) {
      s.x(i, j) = positive_x ? 3.0 + z(rng) : 0.5 * z(rng);
      lin += 0.4 * s.x(i, j);
    }
    s.z(i) = (positive_x ? lin : std::exp(lin)) * e(rng);
    s.delta(i) = cens(rng) ? 0 : 1;
  }
  Index last = 0;
  for (Index i = 1; i < n; ++i) {
    if (s.z(i) > s.z(last)) last = i;
  }
  s.delta(last) = 1;
  return s;
}

VectorXd fd_gradient(const std::function<double(const VectorXd&)>& f, const VectorXd& x) {
  VectorXd g(x.size());
  for (Index k = 0; k < x.size(); ++k) {
    const double h = 1e-5 * (1.0 + std::abs(x(k)));
    VectorXd xp = x, xm = x;
    xp(k) += h;
    xm(k) -= h;
    g(k) = (f(xp) - f(xm)) / (2.0 * h);
  }
  return g;
}

}  // namespace

TEST(Objective, ErmHandFixture) {
  const auto ws = prepare(erm_fixture());
  const auto m = make_model("erm", 1);
  const double h = objective(*m, ws.sorted, ws.weights, {0.0, Variant::joint}, VectorXd::Zero(1),
                             VectorXd::Zero(1));
  EXPECT_NEAR(h, 1.625 + 0.5 * std::log(2.0 * std::numbers::pi), 1e-12);
  EXPECT_NEAR(h, 2.5439, 1e-4);
}

TEST(Objective, UncensoredAlphaZeroIsAverageNegativeLogLikelihood) {
  auto s = random_sample(15, 2, 3);
  s.delta.setOnes();
  const auto ws = prepare(s);
  const auto m = make_model("aft-loglogistic", 2);
  VectorXd theta(3), gamma(2);
  theta << 0.2, -0.1, 0.8;
  gamma << 0.1, -0.3;
  double nll = 0.0;
  for (Index i = 0; i < s.n(); ++i) {
    const VectorXd x = s.x.row(i).transpose();
    nll -= m->cond_log_density(s.z(i), x, theta) + m->cov_log_density(x, gamma);
  }
  EXPECT_NEAR(objective(*m, ws.sorted, ws.weights, {0.0, Variant::joint}, theta, gamma),
              nll / static_cast<double>(s.n()), 1e-12);
}

TEST(Objective, ContinuousAtAlphaZero) {
  const auto ws = prepare(random_sample(12, 1, 8));
  const auto m = make_model("erm", 1);
  const VectorXd theta = VectorXd::Constant(1, 0.3), gamma = VectorXd::Constant(1, 0.1);
  const double a = 1e-8;
  const double h0 = objective(*m, ws.sorted, ws.weights, {0.0, Variant::joint}, theta, gamma);
  const double ha = objective(*m, ws.sorted, ws.weights, {a, Variant::joint}, theta, gamma);
  const double constant = m->mass_and_zeta(theta, gamma, a).mass - (1.0 + a) / a * ws.weights.total;
  EXPECT_NEAR(ha - constant, h0, 1e-5);
}

TEST(Objective, GradientMatchesFiniteDifferences) {
  for (const auto& tag : model_tags()) {
    for (auto variant : {Variant::joint, Variant::conditional}) {
      const bool lrm = tag == "lrm-exp";
      const auto s = random_sample(25, 2, 11, lrm);
      const auto ws = prepare(s);
      const auto m = make_model(tag, 2);
      VectorXd theta = VectorXd::Constant(m->theta_dim(), 0.3);
      if (m->theta_dim() == 3) theta(2) = 0.9;
      // LRM: keep the covariate law's mass on x'θ <= 0 negligible.
      const VectorXd gamma = s.x.colwise().mean().transpose().array() + (lrm ? 2.0 : 0.0);
      for (double alpha : {0.0, 0.1, 0.3, 1.0}) {
        const DpdConfig cfg{alpha, variant};
        const Index q = m->theta_dim();
        auto f = [&](const VectorXd& par) {
          return objective(*m, ws.sorted, ws.weights, cfg, par.head(q),
                           variant == Variant::joint ? VectorXd(par.tail(2)) : VectorXd());
        };
        const VectorXd par = stack_parameters(theta, gamma, variant);
        const VectorXd g = objective_gradient(*m, ws.sorted, ws.weights, cfg, theta,
                                              variant == Variant::joint ? gamma : VectorXd());
        const VectorXd fd = fd_gradient(f, par);
        EXPECT_LT(max_rel_error(g, fd, 1e-3), 1e-5) << tag << " alpha=" << alpha;
      }
    }
  }
}

TEST(Objective, GradientEqualsWeightedPsiSum) {
  const auto s = random_sample(30, 1, 5);
  const auto ws = prepare(s);
  ASSERT_NEAR(ws.weights.total, 1.0, 1e-14);
  const auto m = make_model("aft-lognormal", 1);
  VectorXd theta(2);
  theta << 0.2, 0.7;
  const VectorXd gamma = VectorXd::Constant(1, -0.1);
  for (auto variant : {Variant::joint, Variant::conditional}) {
    for (double alpha : {0.0, 0.3, 1.0}) {
      const DpdConfig cfg{alpha, variant};
      const VectorXd g = objective_gradient(*m, ws.sorted, ws.weights, cfg, theta, gamma);
      VectorXd sum = VectorXd::Zero(g.size());
      for (Index i = 0; i < s.n(); ++i) {
        sum += ws.weights.w(i) *
               psi(*m, cfg, theta, gamma, ws.sorted.z(i), ws.sorted.x.row(i).transpose()).stacked();
      }
      const double scale = alpha == 0.0 ? 1.0 : 1.0 + alpha;
      EXPECT_LT((g - scale * sum).cwiseAbs().maxCoeff(), 1e-10);
    }
  }
}

TEST(Objective, AlphaZeroUncensoredGradientIsMeanScore) {
  auto s = random_sample(10, 1, 9);
  s.delta.setOnes();
  const auto ws = prepare(s);
  const auto m = make_model("erm", 1);
  const VectorXd theta = VectorXd::Constant(1, 0.1), gamma = VectorXd::Constant(1, 0.2);
  const VectorXd g = objective_gradient(*m, ws.sorted, ws.weights, {0.0, Variant::joint}, theta, gamma);
  double st = 0.0, sg = 0.0;
  for (Index i = 0; i < s.n(); ++i) {
    const double x = s.x(i, 0);
    st += (s.z(i) * std::exp(-x * 0.1) - 1.0) * x;
    sg += x - 0.2;
  }
  EXPECT_NEAR(g(0), -st / 10.0, 1e-13);
  EXPECT_NEAR(g(1), -sg / 10.0, 1e-13);
}

TEST(Psi, AlphaZeroIsNegativeScore) {
  const auto m = make_model("aft-weibull", 1);
  VectorXd theta(2);
  theta << 0.3, 1.2;
  const VectorXd gamma = VectorXd::Constant(1, 0.4), x = VectorXd::Constant(1, 0.9);
  const auto v = psi(*m, {0.0, Variant::joint}, theta, gamma, 2.0, x);
  EXPECT_LT((v.psi1 + m->cond_score(2.0, x, theta)).norm(), 1e-15);
  EXPECT_NEAR(v.psi2(0), -(0.9 - 0.4), 1e-15);
}

// ψ is the derivative of V(y, x) = mass - (1+α)/α f^α, up to the factor 1 + α.
TEST(Psi, IsDerivativeOfPerObservationObjective) {
  const auto m = make_model("erm", 1);
  const double alpha = 0.5;
  for (auto [y, x, th, ga] : std::vector<std::array<double, 4>>{
           {1.0, 0.0, 0.0, 0.0}, {0.4, 1.2, 0.3, -0.2}, {3.0, -0.7, 0.5, 1.0}}) {
    const VectorXd xv = VectorXd::Constant(1, x);
    auto v_fn = [&](const VectorXd& par) {
      const VectorXd t = par.head(1), g = par.tail(1);
      const double l = m->cond_log_density(y, xv, t) + m->cov_log_density(xv, g);
      return m->mass_and_zeta(t, g, alpha).mass - (1.0 + alpha) / alpha * std::exp(alpha * l);
    };
    VectorXd par(2);
    par << th, ga;
    const VectorXd fd = fd_gradient(v_fn, par) / (1.0 + alpha);
    const VectorXd p = psi(*m, {alpha, Variant::joint}, par.head(1), par.tail(1), y, xv).stacked();
    EXPECT_LT((p - fd).norm(), 1e-8);
  }
}

TEST(Psi, UnbiasedUnderJointModelLaw) {
  const auto m = make_model("erm", 1);
  const VectorXd theta = VectorXd::Constant(1, 0.5), gamma = VectorXd::Constant(1, 1.0);
  for (double alpha : {0.1, 0.3, 0.5}) {
    const DpdConfig cfg{alpha, Variant::joint};
    for (int k = 0; k < 2; ++k) {
      const double e = gk_integrate(
          [&](double x) {
            const VectorXd xv = VectorXd::Constant(1, x);
            const double fx = std::exp(-0.5 * (x - 1.0) * (x - 1.0)) / std::sqrt(2 * std::numbers::pi);
            return fx * gk_integrate(
                            [&](double y) {
                              const double dens = std::exp(-y * std::exp(-0.5 * x) - 0.5 * x);
                              if (dens == 0.0) return 0.0;
                              return dens * psi(*m, cfg, theta, gamma, y, xv).stacked()(k);
                            },
                            0.0, kInf, 1e-13);
          },
          -11.0, 13.0, 1e-12);  // γ ± 12: the rest of the covariate mass is < 1e-30
      EXPECT_LT(std::abs(e), 1e-6) << "alpha=" << alpha << " k=" << k;
    }
  }
}

TEST(Psi, ConditionalUnbiasedForEachCovariate) {
  for (const std::string tag : {"erm", "aft-lognormal"}) {
    const auto m = make_model(tag, 1);
    VectorXd theta = VectorXd::Constant(m->theta_dim(), 0.5);
    const DpdConfig cfg{0.3, Variant::conditional};
    for (double x : {-2.0, -0.5, 0.0, 1.0, 3.0}) {
      const VectorXd xv = VectorXd::Constant(1, x);
      for (Index k = 0; k < m->theta_dim(); ++k) {
        const double e = gk_integrate(
            [&](double v) {
              const double y = std::exp(v);
              if (!(y > 0.0) || !std::isfinite(y)) return 0.0;
              const double dens = std::exp(m->cond_log_density(y, xv, theta) + v);
              if (dens == 0.0) return 0.0;
              return dens * psi(*m, cfg, theta, VectorXd(), y, xv).psi1(k);
            },
            -kInf, kInf, 1e-13);
        EXPECT_LT(std::abs(e), 1e-6) << tag << " x=" << x;
      }
    }
  }
}

TEST(Psi, DataTermDampedByAlphaInTail) {
  const auto m = make_model("erm", 1);
  const VectorXd theta = VectorXd::Constant(1, 0.5), gamma = VectorXd::Constant(1, 1.0);
  const VectorXd x = VectorXd::Constant(1, 1.5);
  const double y = 40.0;
  double prev = std::numeric_limits<double>::infinity();
  for (double alpha : {0.0, 0.3, 0.5, 1.0}) {
    const double l = m->cond_log_density(y, x, theta) + m->cov_log_density(x, gamma);
    ASSERT_LT(l, 0.0);
    VectorXd u(2);
    u << m->cond_score(y, x, theta), x - gamma;
    const double norm = (std::exp(alpha * l) * u).norm();
    EXPECT_LE(norm, prev);
    prev = norm;
  }
}

TEST(Psi, OverflowNamesTheRecord) {
  try {
    detail::density_power(800.0, 1.0, 4);
    FAIL();
  } catch (const overflow_error& e) {
    EXPECT_NE(std::string(e.what()).find("record 5"), std::string::npos) << e.what();
  }
  EXPECT_EQ(detail::density_power(-1e6, 1.0, 0), 0.0);
}

TEST(MdpdePsi, JacobiansMatchFiniteDifferences) {
  for (const auto& tag : model_tags()) {
    const bool lrm = tag == "lrm-exp";
    const auto s = random_sample(20, 1, 31, lrm);
    const auto ws = prepare(s);
    const auto m = make_model(tag, 1);
    for (auto variant : {Variant::joint, Variant::conditional}) {
      const MdpdePsi fn(*m, {0.3, variant});
      VectorXd theta = VectorXd::Constant(m->theta_dim(), lrm ? 1.0 : 0.3);
      if (m->theta_dim() == 2) theta(1) = 0.8;
      const VectorXd par = stack_parameters(theta, VectorXd::Constant(1, lrm ? 5.0 : 0.1), variant);
      // Per-record Jacobian vs FD of value.
      const VectorXd x = ws.sorted.x.row(3).transpose();
      const double y = ws.sorted.z(3);
      const MatrixXd j = fn.jacobian(y, x, par);
      MatrixXd fd(fn.dim(), par.size());
      for (Index k = 0; k < par.size(); ++k) {
        const double h = 1e-5 * (1.0 + std::abs(par(k)));
        VectorXd pp = par, pm = par;
        pp(k) += h;
        pm(k) -= h;
        fd.col(k) = (fn.value(y, x, pp) - fn.value(y, x, pm)) / (2 * h);
      }
      EXPECT_LT((j - fd).cwiseAbs().maxCoeff(), 1e-6) << tag;
      // Weighted Jacobian vs FD of the estimating equation.
      const MatrixXd wj = fn.weighted_jacobian(ws.sorted, ws.weights.w, par);
      for (Index k = 0; k < par.size(); ++k) {
        const double h = 1e-5 * (1.0 + std::abs(par(k)));
        VectorXd pp = par, pm = par;
        pp(k) += h;
        pm(k) -= h;
        fd.col(k) = (estimating_equation(fn, ws.sorted, ws.weights.w, pp) -
                     estimating_equation(fn, ws.sorted, ws.weights.w, pm)) / (2 * h);
      }
      EXPECT_LT((wj - fd).cwiseAbs().maxCoeff(), 1e-6) << tag;
      // values() agrees with the free function psi().
      const MatrixXd vals = fn.values(ws.sorted, par);
      for (Index i = 0; i < s.n(); ++i) {
        const VectorXd ref = psi(*m, fn.config(), fn.theta_of(par), fn.gamma_of(par),
                                 ws.sorted.z(i), ws.sorted.x.row(i).transpose())
                                 .stacked();
        EXPECT_LT((vals.row(i).transpose() - ref).norm(), 1e-12);
      }
    }
  }
}

TEST(MdpdePsi, NamesFollowCovariates) {
  const auto m = make_model("erm", 2);
  const MdpdePsi joint(*m, {0.3, Variant::joint});
  EXPECT_EQ(joint.names_for({"a", "b"}),
            (std::vector<std::string>{"theta[a]", "theta[b]", "gamma[a]", "gamma[b]"}));
  const MdpdePsi cond(*m, {0.3, Variant::conditional});
  EXPECT_EQ(cond.dim(), 2);
  EXPECT_THROW(parse_variant("marginal"), validation_error);
  EXPECT_THROW(DpdConfig({-0.1, Variant::joint}).validate(), validation_error);
}

TEST(ZhouPsi, IdentityGivesLeastSquaresEquation) {
  const ZhouPsi fn(2, ScalarPsi::identity());
  const VectorXd x = Eigen::Vector2d(1.0, 2.0), par = Eigen::Vector2d(0.5, 0.25);
  EXPECT_LT((fn.value(3.0, x, par) - (3.0 - 1.0) * x).norm(), 1e-15);
  EXPECT_LT((fn.jacobian(3.0, x, par) + x * x.transpose()).norm(), 1e-15);
}

TEST(ZhouPsi, HuberCapsLargeResiduals) {
  const ZhouPsi huber(1, ScalarPsi::huber(1.345));
  const VectorXd x = VectorXd::Constant(1, -2.0), par = VectorXd::Zero(1);
  EXPECT_NEAR(std::abs(huber.value(10.0, x, par)(0)), 1.345 * 2.0, 1e-15);
  const ZhouPsi wide(1, ScalarPsi::huber(1e6));
  const ZhouPsi ident(1, ScalarPsi::identity());
  for (double y : {0.1, 3.0, 50.0}) EXPECT_EQ(wide.value(y, x, par)(0), ident.value(y, x, par)(0));
  EXPECT_THROW(ScalarPsi::huber(0.0), validation_error);
}

TEST(WangPsi, IdentityScaleEquationIsSecondMoment) {
  const WangPsi fn(1, ScalarPsi::identity());
  VectorXd par(2);
  par << 0.2, 0.5;
  const VectorXd x = VectorXd::Constant(1, 1.0);
  const double y = std::exp(1.2);
  const double s = (1.2 - 0.2) / 0.5;
  const VectorXd v = fn.value(y, x, par);
  EXPECT_NEAR(v(0), s, 1e-14);
  EXPECT_NEAR(v(1), s * s - 1.0, 1e-14);
  par(1) = -1.0;
  EXPECT_THROW(fn.value(y, x, par), domain_error);
}

TEST(WangPsi, WeightedHuberBoundedInLocationComponents) {
  const WangPsi fn(1, ScalarPsi::huber(1.345),
                   [](ConstVecRef x) { return 1.0 / (1.0 + x.cwiseAbs().sum()); });
  VectorXd par(2);
  par << 0.1, 1.0;
  double sup = 0.0;
  for (double y : {1e-8, 1.0, 1e8}) {
    for (double x : {-1e6, -1.0, 0.0, 1.0, 1e6}) {
      sup = std::max(sup, std::abs(fn.value(y, VectorXd::Constant(1, x), par)(0)));
    }
  }
  EXPECT_LE(sup, 1.345 + 1e-12);
}

TEST(WangPsi, AnalyticJacobianMatchesFiniteDifferences) {
  const WangPsi fn(2, ScalarPsi::huber(1.5), [](ConstVecRef x) { return 1.0 / (1.0 + x.norm()); });
  VectorXd par(3), x(2);
  par << 0.2, -0.4, 0.7;
  x << 0.8, 1.1;
  const double y = 1.7;
  const MatrixXd j = fn.jacobian(y, x, par);
  const MatrixXd fd = fn.EstimatingFunction::jacobian(y, x, par);
  EXPECT_LT((j - fd).cwiseAbs().maxCoeff(), 1e-7);
}
