#pragma once

// Parametric families for (Y | X, X): the conditional response law, the
// N_p(γ, I_p) covariate marginal, their scores, and the density power
// integrals ∬ f^{1+α} f_X^{1+α} with the matching ζ terms.

#include <Eigen/Dense>
#include <boost/math/special_functions/erf.hpp>

#include <cmath>
#include <map>
#include <memory>
#include <mutex>
#include <numbers>
#include <string>
#include <string_view>
#include <vector>

#include "cdpd/error.hpp"
#include "cdpd/quadrature.hpp"
#include "cdpd/survival_data.hpp"

namespace cdpd {

using Eigen::MatrixXd;
using Eigen::VectorXi;
using Eigen::VectorXd;
using ConstVecRef = Eigen::Ref<const Eigen::VectorXd>;

inline constexpr double kEulerGamma = 0.57721566490153286061;

// ∬ f_θ(y|x)^{1+α} f_{X,γ}(x)^{1+α} dx dy with ζ_θ = ∬ u_θ (...) and
// ζ_γ = ∬ u_γ (...). At α = 0 the ζ vectors are exactly zero and mass is 1.
struct JointTerms {
  double mass = 1.0;
  VectorXd zeta_theta;
  VectorXd zeta_gamma;
};

// Per-record ∫ f_θ(y|x_i)^{1+α} dy and ζ̃_θ(x_i) = ∫ u_θ f_θ^{1+α} dy.
struct ConditionalTerms {
  VectorXd mass;   // n
  MatrixXd zeta;   // n × q
};

// Which measure the response density is taken against. `time` is the
// density of Y; `log_time` the density of log Y (AFT models only).
enum class ResponseScale { time, log_time };

namespace detail {

inline void check_alpha(double alpha) {
  if (!std::isfinite(alpha) || alpha < 0.0) {
    throw validation_error("alpha must be finite and >= 0, got " + std::to_string(alpha));
  }
}

// (1+α)^{-p/2} (2π)^{-pα/2}: ∫ f_X^{1+α} h dx = this × E[h(V)], V ~ N(γ, I/(1+α)).
inline double covariate_power_factor(Index p, double alpha) {
  const double pd = static_cast<double>(p);
  return std::pow(1.0 + alpha, -0.5 * pd) * std::pow(2.0 * std::numbers::pi, -0.5 * pd * alpha);
}

// Mean of the full covariate vector: a leading constant 1 when the design
// carries an intercept, then γ.
inline VectorXd full_mean(const VectorXd& gamma, bool intercept) {
  if (!intercept) return gamma;
  VectorXd m(gamma.size() + 1);
  m << 1.0, gamma;
  return m;
}

// Coefficients acting on the random covariates (intercept entry zeroed).
inline VectorXd random_part(const VectorXd& v, bool intercept) {
  VectorXd out = v;
  if (intercept) out(0) = 0.0;
  return out;
}

inline VectorXd weighted_least_squares(const CovariateMatrix& x, const VectorXd& y,
                                       const VectorXd& w) {
  const MatrixXd xtwx = x.transpose() * w.asDiagonal() * x;
  const VectorXd xtwy = x.transpose() * (w.array() * y.array()).matrix();
  Eigen::ColPivHouseholderQR<MatrixXd> qr(xtwx);
  if (qr.rank() < xtwx.rows()) {
    throw degenerate_data_error("weighted least squares start: covariates are collinear "
                                "among uncensored records");
  }
  return qr.solve(xtwy);
}

}  // namespace detail

class Model {
 public:
  // With `intercept`, column 0 of every covariate row is the constant 1 and
  // only the remaining p - 1 columns follow N(γ, I).
  explicit Model(Index p, QuadratureConfig quad = {}, bool intercept = false)
      : p_(p), quad_(quad), intercept_(intercept) {
    if (p < 1) throw validation_error("covariate dimension must be >= 1");
  }
  virtual ~Model() = default;

  virtual std::string tag() const = 0;
  virtual Index theta_dim() const = 0;
  Index covariate_dim() const { return p_; }
  Index gamma_dim() const { return p_ - (intercept_ ? 1 : 0); }
  bool has_intercept() const { return intercept_; }
  // E[X] under N(γ, I) for the random columns.
  VectorXd covariate_mean(const VectorXd& gamma) const {
    return detail::full_mean(gamma, intercept_);
  }
  const QuadratureConfig& quadrature() const { return quad_; }

  virtual std::vector<std::string> theta_names(const std::vector<std::string>& covariates) const {
    std::vector<std::string> out;
    for (Index j = 0; j < p_; ++j) out.push_back("theta[" + name_of(covariates, j) + "]");
    return out;
  }
  std::vector<std::string> gamma_names(const std::vector<std::string>& covariates) const {
    std::vector<std::string> out;
    for (Index j = p_ - gamma_dim(); j < p_; ++j) {
      out.push_back("gamma[" + name_of(covariates, j) + "]");
    }
    return out;
  }

  // Throws domain_error when θ lies outside the parameter space.
  virtual void check_theta(const VectorXd& theta) const {
    if (theta.size() != theta_dim()) throw validation_error("theta has the wrong dimension");
    if (!theta.allFinite()) throw domain_error("theta is not finite");
  }
  // θ admissible for every covariate row.
  virtual void check_support(const VectorXd& theta, const CovariateMatrix& x) const {
    (void)x;
    check_theta(theta);
  }

  // log f_θ(y|x), u_θ = ∂/∂θ log f_θ(y|x), and ∂u_θ/∂θ.
  virtual double cond_log_density(double y, ConstVecRef x, const VectorXd& theta) const = 0;
  virtual VectorXd cond_score(double y, ConstVecRef x, const VectorXd& theta) const = 0;
  virtual MatrixXd cond_score_jacobian(double y, ConstVecRef x, const VectorXd& theta) const = 0;
  // Inverse conditional CDF of Y (time scale) at t ∈ (0, 1).
  virtual double cond_quantile(double t, ConstVecRef x, const VectorXd& theta) const = 0;

  double cov_log_density(ConstVecRef x, const VectorXd& gamma) const {
    const Index r = gamma_dim();
    return -0.5 * static_cast<double>(r) * std::log(2.0 * std::numbers::pi) -
           0.5 * (x.tail(r) - gamma).squaredNorm();
  }
  VectorXd cov_score(ConstVecRef x, const VectorXd& gamma) const {
    return x.tail(gamma_dim()) - gamma;
  }

  // The intercept column, when declared, must be identically one.
  void check_design(const CovariateMatrix& x) const {
    if (x.cols() != p_) {
      throw validation_error("design has " + std::to_string(x.cols()) +
                             " covariate columns, model expects " + std::to_string(p_));
    }
    if (intercept_ && !(x.col(0).array() == 1.0).all()) {
      throw validation_error("intercept column (first covariate) must be identically 1");
    }
  }

  virtual JointTerms mass_and_zeta(const VectorXd& theta, const VectorXd& gamma,
                                   double alpha) const = 0;
  virtual ConditionalTerms conditional_mass_and_zeta(const CovariateMatrix& x,
                                                     const VectorXd& theta,
                                                     double alpha) const = 0;

  // Unconstrained coordinates used by the optimizer; dθ/dfree is diagonal.
  virtual VectorXd to_free(const VectorXd& theta) const { return theta; }
  virtual VectorXd from_free(const VectorXd& free) const { return free; }
  virtual VectorXd free_derivative(const VectorXd& free) const {
    return VectorXd::Ones(free.size());
  }

  // Starting value for the α = 0 fit.
  virtual VectorXd initial_theta(const WeightedSample& s) const = 0;

 protected:
  static std::string name_of(const std::vector<std::string>& names, Index j) {
    if (j < static_cast<Index>(names.size())) return names[static_cast<std::size_t>(j)];
    return "x" + std::to_string(j + 1);
  }

  Index p_;
  QuadratureConfig quad_;
  bool intercept_ = false;
};

// ---------------------------------------------------------------------------
// Y | X ~ Exponential with mean x'θ, X ~ N_p(γ, I).

// ψ⁽⁰⁾ = E[(V'θ)^{-α}] and ψ̄⁽⁰⁾ = E[V (V'θ)^{-α}] for V ~ N(γ, I/(1+α)).
struct LrmMoments {
  double psi0 = 0.0;
  VectorXd psi0_bar;
  // Same with exponent -1-α; used by ζ_θ.
  double psi1 = 0.0;
  VectorXd psi1_bar;
};

// Projects onto S = V'θ ~ N(m'θ, |θr|²/(1+α)) so a 1-D Gauss–Hermite rule
// serves any p: E[V h(S)] = m E[h(S)] + θr/|θr|² E[(S - m'θ) h(S)], with m
// the full covariate mean and θr the coefficients of the random columns.
// Nodes with S <= 0 are skipped; more than 1e-6 of skipped weight is an error.
inline LrmMoments lrm_moments(const VectorXd& theta, const VectorXd& gamma, double alpha,
                              const QuadratureConfig& quad = {}, bool intercept = false) {
  if (!(theta.squaredNorm() > 0.0)) throw domain_error("lrm: theta = 0 gives a zero mean");
  const VectorXd m_full = detail::full_mean(gamma, intercept);
  const VectorXd theta_r = detail::random_part(theta, intercept);
  const double norm2 = theta_r.squaredNorm();
  const double mean = m_full.dot(theta);
  const double sd = std::sqrt(norm2 / (1.0 + alpha));
  const auto& rule = gauss_hermite(quad.hermite_nodes);
  double e0 = 0.0, e1 = 0.0, c0 = 0.0, c1 = 0.0, dropped = 0.0;
  Index worst = -1;
  for (Index k = 0; k < rule.nodes.size(); ++k) {
    const double s = mean + sd * rule.nodes(k);
    const double w = rule.weights(k);
    if (s <= 0.0) {
      dropped += w;
      if (worst < 0 || rule.weights(worst) < w) worst = k;
      continue;
    }
    const double pa = std::pow(s, -alpha);
    e0 += w * pa;
    e1 += w * pa / s;
    c0 += w * (s - mean) * pa;
    c1 += w * (s - mean) * pa / s;
  }
  if (dropped > 1e-6) {
    throw domain_error("lrm quadrature node " + std::to_string(worst) + " at x'theta = " +
                       std::to_string(mean + sd * rule.nodes(worst)) +
                       " <= 0 carries non-negligible weight (" + std::to_string(dropped) + ")");
  }
  LrmMoments m;
  m.psi0 = e0;
  m.psi1 = e1;
  m.psi0_bar = m_full * e0;
  m.psi1_bar = m_full * e1;
  if (norm2 > 0.0) {
    m.psi0_bar += theta_r * (c0 / norm2);
    m.psi1_bar += theta_r * (c1 / norm2);
  }
  return m;
}

inline JointTerms lrm_mass_and_zeta(const VectorXd& theta, const VectorXd& gamma, double alpha,
                                    const QuadratureConfig& quad = {}, bool intercept = false) {
  detail::check_alpha(alpha);
  const Index r = gamma.size();
  if (alpha == 0.0) return {1.0, VectorXd::Zero(theta.size()), VectorXd::Zero(r)};
  const LrmMoments m = lrm_moments(theta, gamma, alpha, quad, intercept);
  const double cx = detail::covariate_power_factor(r, alpha);
  JointTerms t;
  t.mass = cx / (1.0 + alpha) * m.psi0;
  t.zeta_theta = -alpha / ((1.0 + alpha) * (1.0 + alpha)) * cx * m.psi1_bar;
  t.zeta_gamma = cx / (1.0 + alpha) *
                 (m.psi0_bar - detail::full_mean(gamma, intercept) * m.psi0).tail(r);
  return t;
}

class LinearExpModel final : public Model {
 public:
  using Model::Model;

  std::string tag() const override { return "lrm-exp"; }
  Index theta_dim() const override { return p_; }

  void check_support(const VectorXd& theta, const CovariateMatrix& x) const override {
    check_theta(theta);
    for (Index i = 0; i < x.rows(); ++i) {
      if (!(x.row(i).dot(theta) > 0.0)) {
        throw domain_error("lrm-exp: x'theta <= 0 at record " + std::to_string(i + 1));
      }
    }
  }

  double cond_log_density(double y, ConstVecRef x, const VectorXd& theta) const override {
    const double mu = mean(x, theta);
    return -std::log(mu) - y / mu;
  }
  VectorXd cond_score(double y, ConstVecRef x, const VectorXd& theta) const override {
    const double mu = mean(x, theta);
    return x * ((y - mu) / (mu * mu));
  }
  MatrixXd cond_score_jacobian(double y, ConstVecRef x, const VectorXd& theta) const override {
    const double mu = mean(x, theta);
    return (x * x.transpose()) * ((mu - 2.0 * y) / (mu * mu * mu));
  }
  double cond_quantile(double t, ConstVecRef x, const VectorXd& theta) const override {
    return -mean(x, theta) * std::log1p(-t);
  }

  JointTerms mass_and_zeta(const VectorXd& theta, const VectorXd& gamma,
                           double alpha) const override {
    check_theta(theta);
    return lrm_mass_and_zeta(theta, gamma, alpha, quad_, intercept_);
  }

  ConditionalTerms conditional_mass_and_zeta(const CovariateMatrix& x, const VectorXd& theta,
                                             double alpha) const override {
    detail::check_alpha(alpha);
    ConditionalTerms t{VectorXd(x.rows()), MatrixXd::Zero(x.rows(), p_)};
    for (Index i = 0; i < x.rows(); ++i) {
      const double mu = mean(x.row(i).transpose(), theta);
      const double pa = std::pow(mu, -alpha);
      t.mass(i) = pa / (1.0 + alpha);
      t.zeta.row(i) = x.row(i) * (-alpha * pa / (mu * (1.0 + alpha) * (1.0 + alpha)));
    }
    return t;
  }

  // Weighted least squares of Z on X, falling back to a scaled mean
  // direction when the fit leaves the support.
  VectorXd initial_theta(const WeightedSample& s) const override {
    const auto& x = s.sorted.x;
    VectorXd theta;
    try {
      theta = detail::weighted_least_squares(x, s.sorted.z, s.weights.w);
    } catch (const degenerate_data_error&) {
      theta = VectorXd::Zero(p_);
    }
    if (((x * theta).array() > 0.0).all()) return theta;
    const VectorXd xbar = x.transpose() * s.weights.w / s.weights.total;
    const double zbar = s.weights.w.dot(s.sorted.z) / s.weights.total;
    theta = xbar * (zbar / xbar.squaredNorm());
    if (((x * theta).array() > 0.0).all()) return theta;
    throw domain_error("lrm-exp: no starting value with x'theta > 0 for all records");
  }

 private:
  static double mean(ConstVecRef x, const VectorXd& theta) {
    const double mu = x.dot(theta);
    if (!(mu > 0.0)) throw domain_error("lrm-exp: x'theta must be positive, got " +
                                        std::to_string(mu));
    return mu;
  }
};

// ---------------------------------------------------------------------------
// Y | X ~ Exponential with mean exp(x'θ), X ~ N_p(γ, I).

inline JointTerms erm_mass_and_zeta(const VectorXd& theta, const VectorXd& gamma, double alpha,
                                    bool intercept = false) {
  detail::check_alpha(alpha);
  const Index r = gamma.size();
  if (alpha == 0.0) return {1.0, VectorXd::Zero(theta.size()), VectorXd::Zero(r)};
  const VectorXd m_full = detail::full_mean(gamma, intercept);
  const VectorXd theta_r = detail::random_part(theta, intercept);
  const double exponent =
      -alpha * m_full.dot(theta) + alpha * alpha * theta_r.squaredNorm() / (2.0 * (1.0 + alpha));
  JointTerms t;
  t.mass = detail::covariate_power_factor(r, alpha) / (1.0 + alpha) * std::exp(exponent);
  if (!std::isfinite(t.mass)) {
    throw overflow_error("erm: mass integral overflows (exponent " + std::to_string(exponent) +
                         ")");
  }
  const VectorXd tilted_mean = m_full - theta_r * (alpha / (1.0 + alpha));
  t.zeta_theta = tilted_mean * (-alpha / (1.0 + alpha) * t.mass);
  t.zeta_gamma = theta_r.tail(r) * (-alpha / (1.0 + alpha) * t.mass);
  return t;
}

class ExpRegModel final : public Model {
 public:
  using Model::Model;

  std::string tag() const override { return "erm"; }
  Index theta_dim() const override { return p_; }

  double cond_log_density(double y, ConstVecRef x, const VectorXd& theta) const override {
    const double eta = x.dot(theta);
    return -eta - y * std::exp(-eta);
  }
  VectorXd cond_score(double y, ConstVecRef x, const VectorXd& theta) const override {
    return x * (y * std::exp(-x.dot(theta)) - 1.0);
  }
  MatrixXd cond_score_jacobian(double y, ConstVecRef x, const VectorXd& theta) const override {
    return (x * x.transpose()) * (-y * std::exp(-x.dot(theta)));
  }
  double cond_quantile(double t, ConstVecRef x, const VectorXd& theta) const override {
    return -std::exp(x.dot(theta)) * std::log1p(-t);
  }

  JointTerms mass_and_zeta(const VectorXd& theta, const VectorXd& gamma,
                           double alpha) const override {
    check_theta(theta);
    return erm_mass_and_zeta(theta, gamma, alpha, intercept_);
  }

  ConditionalTerms conditional_mass_and_zeta(const CovariateMatrix& x, const VectorXd& theta,
                                             double alpha) const override {
    detail::check_alpha(alpha);
    ConditionalTerms t{VectorXd(x.rows()), MatrixXd::Zero(x.rows(), p_)};
    for (Index i = 0; i < x.rows(); ++i) {
      const double tilt = std::exp(-alpha * x.row(i).dot(theta));
      t.mass(i) = tilt / (1.0 + alpha);
      t.zeta.row(i) = x.row(i) * (-alpha * tilt / ((1.0 + alpha) * (1.0 + alpha)));
    }
    return t;
  }

  // log Y = x'θ + log E with E[log E] = -γ_Euler.
  VectorXd initial_theta(const WeightedSample& s) const override {
    const VectorXd logz = s.sorted.z.array().log() + kEulerGamma;
    return detail::weighted_least_squares(s.sorted.x, logz, s.weights.w);
  }
};

// ---------------------------------------------------------------------------
// Accelerated failure time: log Y = x'β + σ ε, X ~ N_p(γ, I), θ = (β, σ).

enum class ErrorFamily { extreme_value, normal, logistic };

namespace detail {

inline double error_log_density(ErrorFamily f, double u) {
  switch (f) {
    case ErrorFamily::extreme_value:
      return u - std::exp(u);
    case ErrorFamily::normal:
      return -0.5 * u * u - 0.5 * std::log(2.0 * std::numbers::pi);
    case ErrorFamily::logistic:
      return u > 0.0 ? -u - 2.0 * std::log1p(std::exp(-u)) : u - 2.0 * std::log1p(std::exp(u));
  }
  return 0.0;
}

// d/du log f0
inline double error_score(ErrorFamily f, double u) {
  switch (f) {
    case ErrorFamily::extreme_value:
      return 1.0 - std::exp(u);
    case ErrorFamily::normal:
      return -u;
    case ErrorFamily::logistic:
      return -std::tanh(0.5 * u);
  }
  return 0.0;
}

inline double error_score_derivative(ErrorFamily f, double u) {
  switch (f) {
    case ErrorFamily::extreme_value:
      return -std::exp(u);
    case ErrorFamily::normal:
      return -1.0;
    case ErrorFamily::logistic: {
      const double th = std::tanh(0.5 * u);
      return -0.5 * (1.0 - th * th);
    }
  }
  return 0.0;
}

inline double error_quantile(ErrorFamily f, double t) {
  switch (f) {
    case ErrorFamily::extreme_value:
      return std::log(-std::log1p(-t));
    case ErrorFamily::normal:
      return -std::numbers::sqrt2 * boost::math::erfc_inv(2.0 * t);
    case ErrorFamily::logistic:
      return std::log(t / (1.0 - t));
  }
  return 0.0;
}

inline double error_sd(ErrorFamily f) {
  switch (f) {
    case ErrorFamily::extreme_value:
      return std::numbers::pi / std::sqrt(6.0);
    case ErrorFamily::normal:
      return 1.0;
    case ErrorFamily::logistic:
      return std::numbers::pi / std::sqrt(3.0);
  }
  return 1.0;
}

inline const char* family_name(ErrorFamily f) {
  switch (f) {
    case ErrorFamily::extreme_value:
      return "extreme-value";
    case ErrorFamily::normal:
      return "normal";
    case ErrorFamily::logistic:
      return "logistic";
  }
  return "?";
}

}  // namespace detail

// I0 = ∫ f0^{1+α} e^{-t u} du, I1 = ∫ (...) g(u) du, I2 = ∫ (...) u g(u) du
// with g = (log f0)' and tilt t = ασ on the time scale, 0 on log time.
struct TiltIntegrals {
  double i0 = 0.0;
  double i1 = 0.0;
  double i2 = 0.0;
};

inline TiltIntegrals aft_tilt_integrals(ErrorFamily family, double tilt, double alpha,
                                        const QuadratureConfig& quad = {}) {
  if (family != ErrorFamily::normal && tilt >= 1.0 + alpha) {
    throw overflow_error(std::string("aft: ") + detail::family_name(family) +
                         " density power is not integrable (alpha = " + std::to_string(alpha) +
                         ", alpha*sigma = " + std::to_string(tilt) + " >= 1 + alpha)");
  }
  auto base = [=](double u) {
    return std::exp((1.0 + alpha) * detail::error_log_density(family, u) - tilt * u);
  };
  // Far in the tails base underflows to 0 while the score term blows up.
  auto times_base = [&](double u, double h) {
    const double b = base(u);
    return b == 0.0 ? 0.0 : b * h;
  };
  TiltIntegrals t;
  const double inf = std::numeric_limits<double>::infinity();
  t.i0 = integrate(base, -inf, inf, quad);
  t.i1 = integrate([&](double u) { return times_base(u, detail::error_score(family, u)); }, -inf,
                   inf, quad);
  t.i2 = integrate([&](double u) { return times_base(u, u * detail::error_score(family, u)); },
                   -inf, inf, quad);
  if (!std::isfinite(t.i0) || !std::isfinite(t.i1) || !std::isfinite(t.i2)) {
    throw overflow_error("aft: tilt integrals overflow (alpha = " + std::to_string(alpha) +
                         ", tilt = " + std::to_string(tilt) + ")");
  }
  return t;
}

namespace detail {

inline JointTerms aft_joint_terms(const TiltIntegrals& ti, ResponseScale scale,
                                  const VectorXd& theta, const VectorXd& gamma, double alpha,
                                  bool intercept = false) {
  const Index r = gamma.size();
  const Index p = theta.size() - 1;
  const VectorXd beta = theta.head(p);
  const VectorXd beta_r = random_part(beta, intercept);
  const VectorXd m_full = full_mean(gamma, intercept);
  const double sigma = theta(p);
  const bool on_time = scale == ResponseScale::time;

  // E[e^{-αV'β}] and E[V e^{-αV'β}] / E[e^{-αV'β}] for V ~ N(γ, I/(1+α)) on the
  // time scale; on log time the response integral does not depend on x.
  double tilt_mgf = 1.0;
  VectorXd tilted_mean = m_full;
  if (on_time) {
    tilt_mgf = std::exp(-alpha * m_full.dot(beta) +
                        alpha * alpha * beta_r.squaredNorm() / (2.0 * (1.0 + alpha)));
    tilted_mean = m_full - beta_r * (alpha / (1.0 + alpha));
  }
  const double front = covariate_power_factor(r, alpha) * std::pow(sigma, -alpha);
  JointTerms t;
  t.mass = front * ti.i0 * tilt_mgf;
  if (!std::isfinite(t.mass)) {
    throw overflow_error("aft: mass integral overflows (alpha = " + std::to_string(alpha) +
                         ", sigma = " + std::to_string(sigma) + ")");
  }
  t.zeta_theta.resize(p + 1);
  t.zeta_theta.head(p) = tilted_mean * (-front * ti.i1 / sigma * tilt_mgf);
  t.zeta_theta(p) = -front * (ti.i0 + ti.i2) / sigma * tilt_mgf;
  t.zeta_gamma = on_time ? VectorXd(beta_r.tail(r) * (-alpha / (1.0 + alpha) * t.mass))
                         : VectorXd(VectorXd::Zero(r));
  return t;
}

}  // namespace detail

inline JointTerms aft_mass_and_zeta(ErrorFamily family, ResponseScale scale, const VectorXd& theta,
                                    const VectorXd& gamma, double alpha,
                                    const QuadratureConfig& quad = {}, bool intercept = false) {
  detail::check_alpha(alpha);
  const Index p = theta.size() - 1;
  const double sigma = theta(p);
  if (!(sigma > 0.0)) throw domain_error("aft: sigma must be positive");
  if (alpha == 0.0) return {1.0, VectorXd::Zero(p + 1), VectorXd::Zero(gamma.size())};
  const double tilt = scale == ResponseScale::time ? alpha * sigma : 0.0;
  return detail::aft_joint_terms(aft_tilt_integrals(family, tilt, alpha, quad), scale, theta,
                                 gamma, alpha, intercept);
}

class AftModel final : public Model {
 public:
  AftModel(Index p, ErrorFamily family, ResponseScale scale = ResponseScale::time,
           QuadratureConfig quad = {}, bool intercept = false)
      : Model(p, quad, intercept), family_(family), scale_(scale) {}

  std::string tag() const override {
    switch (family_) {
      case ErrorFamily::extreme_value:
        return "aft-weibull";
      case ErrorFamily::normal:
        return "aft-lognormal";
      case ErrorFamily::logistic:
        return "aft-loglogistic";
    }
    return "aft";
  }
  Index theta_dim() const override { return p_ + 1; }
  ErrorFamily family() const { return family_; }
  ResponseScale scale() const { return scale_; }

  std::vector<std::string> theta_names(
      const std::vector<std::string>& covariates) const override {
    std::vector<std::string> out;
    for (Index j = 0; j < p_; ++j) out.push_back("beta[" + name_of(covariates, j) + "]");
    out.push_back("sigma");
    return out;
  }

  void check_theta(const VectorXd& theta) const override {
    Model::check_theta(theta);
    if (!(theta(p_) > 0.0)) throw domain_error("aft: sigma must be positive");
  }

  double cond_log_density(double y, ConstVecRef x, const VectorXd& theta) const override {
    const double sigma = theta(p_);
    const double u = standardized(y, x, theta);
    const double jac = scale_ == ResponseScale::time ? std::log(y) : 0.0;
    return detail::error_log_density(family_, u) - std::log(sigma) - jac;
  }

  VectorXd cond_score(double y, ConstVecRef x, const VectorXd& theta) const override {
    const double sigma = theta(p_);
    const double u = standardized(y, x, theta);
    const double g = detail::error_score(family_, u);
    VectorXd s(p_ + 1);
    s.head(p_) = x * (-g / sigma);
    s(p_) = -(1.0 + g * u) / sigma;
    return s;
  }

  MatrixXd cond_score_jacobian(double y, ConstVecRef x, const VectorXd& theta) const override {
    const double sigma = theta(p_);
    const double u = standardized(y, x, theta);
    const double g = detail::error_score(family_, u);
    const double dg = detail::error_score_derivative(family_, u);
    const double s2 = sigma * sigma;
    MatrixXd j(p_ + 1, p_ + 1);
    j.topLeftCorner(p_, p_) = (x * x.transpose()) * (dg / s2);
    const VectorXd cross = x * ((dg * u + g) / s2);
    j.topRightCorner(p_, 1) = cross;
    j.bottomLeftCorner(1, p_) = cross.transpose();
    j(p_, p_) = (1.0 + dg * u * u + 2.0 * g * u) / s2;
    return j;
  }

  double cond_quantile(double t, ConstVecRef x, const VectorXd& theta) const override {
    return std::exp(x.dot(theta.head(p_)) + theta(p_) * detail::error_quantile(family_, t));
  }

  JointTerms mass_and_zeta(const VectorXd& theta, const VectorXd& gamma,
                           double alpha) const override {
    check_theta(theta);
    detail::check_alpha(alpha);
    if (alpha == 0.0) return {1.0, VectorXd::Zero(p_ + 1), VectorXd::Zero(gamma_dim())};
    const double tilt = scale_ == ResponseScale::time ? alpha * theta(p_) : 0.0;
    return detail::aft_joint_terms(tilt_integrals(tilt, alpha), scale_, theta, gamma, alpha,
                                   intercept_);
  }

  // The u-integrals depend only on (tilt, α); repeated evaluations at the
  // same σ (finite differences, per-record ψ) hit this cache.
  TiltIntegrals tilt_integrals(double tilt, double alpha) const {
    const std::pair<double, double> key{tilt, alpha};
    {
      std::lock_guard<std::mutex> lock(cache_->mutex);
      auto it = cache_->values.find(key);
      if (it != cache_->values.end()) return it->second;
    }
    const TiltIntegrals ti = aft_tilt_integrals(family_, tilt, alpha, quad_);
    std::lock_guard<std::mutex> lock(cache_->mutex);
    if (cache_->values.size() > 256) cache_->values.clear();
    cache_->values.emplace(key, ti);
    return ti;
  }

  ConditionalTerms conditional_mass_and_zeta(const CovariateMatrix& x, const VectorXd& theta,
                                             double alpha) const override {
    detail::check_alpha(alpha);
    check_theta(theta);
    const double sigma = theta(p_);
    ConditionalTerms t{VectorXd::Ones(x.rows()), MatrixXd::Zero(x.rows(), p_ + 1)};
    if (alpha == 0.0) return t;
    const bool on_time = scale_ == ResponseScale::time;
    const TiltIntegrals ti = tilt_integrals(on_time ? alpha * sigma : 0.0, alpha);
    for (Index i = 0; i < x.rows(); ++i) {
      double front = std::pow(sigma, -alpha);
      if (on_time) front *= std::exp(-alpha * x.row(i).dot(theta.head(p_)));
      if (!std::isfinite(front)) {
        throw overflow_error("aft: conditional density power overflows at record " +
                             std::to_string(i + 1));
      }
      t.mass(i) = front * ti.i0;
      t.zeta.row(i).head(p_) = x.row(i) * (-front * ti.i1 / sigma);
      t.zeta(i, p_) = -front * (ti.i0 + ti.i2) / sigma;
    }
    return t;
  }

  VectorXd to_free(const VectorXd& theta) const override {
    VectorXd f = theta;
    f(p_) = std::log(theta(p_));
    return f;
  }
  VectorXd from_free(const VectorXd& free) const override {
    VectorXd t = free;
    t(p_) = std::exp(free(p_));
    return t;
  }
  VectorXd free_derivative(const VectorXd& free) const override {
    VectorXd d = VectorXd::Ones(free.size());
    d(p_) = std::exp(free(p_));
    return d;
  }

  // Weighted least squares on log time; σ from the weighted residual spread.
  VectorXd initial_theta(const WeightedSample& s) const override {
    VectorXd logz = s.sorted.z.array().log();
    if (family_ == ErrorFamily::extreme_value) logz.array() += kEulerGamma;
    VectorXd theta(p_ + 1);
    theta.head(p_) = detail::weighted_least_squares(s.sorted.x, logz, s.weights.w);
    const VectorXd resid = logz - s.sorted.x * theta.head(p_);
    const double var = s.weights.w.dot(resid.cwiseProduct(resid)) / s.weights.total;
    theta(p_) = std::max(std::sqrt(var) / detail::error_sd(family_), 1e-3);
    return theta;
  }

 private:
  double standardized(double y, ConstVecRef x, const VectorXd& theta) const {
    const double sigma = theta(p_);
    if (!(sigma > 0.0)) throw domain_error("aft: sigma must be positive");
    return (std::log(y) - x.dot(theta.head(p_))) / sigma;
  }

  struct TiltCache {
    std::mutex mutex;
    std::map<std::pair<double, double>, TiltIntegrals> values;
  };

  ErrorFamily family_;
  ResponseScale scale_;
  std::shared_ptr<TiltCache> cache_ = std::make_shared<TiltCache>();
};

// ---------------------------------------------------------------------------

struct ModelOptions {
  ResponseScale scale = ResponseScale::time;
  QuadratureConfig quadrature{};
  bool intercept = false;  // first covariate column is a constant 1
};

inline const std::vector<std::string>& model_tags() {
  static const std::vector<std::string> tags = {"lrm-exp", "erm", "aft-weibull", "aft-lognormal",
                                                "aft-loglogistic"};
  return tags;
}

inline std::unique_ptr<Model> make_model(std::string_view tag, Index p,
                                         const ModelOptions& options = {}) {
  if (options.scale == ResponseScale::log_time && tag.substr(0, 4) != "aft-") {
    throw validation_error("log-time response scale is only available for AFT models");
  }
  if (options.intercept && p < 2) {
    throw validation_error("an intercept needs at least one further covariate");
  }
  const auto& q = options.quadrature;
  const bool ic = options.intercept;
  if (tag == "lrm-exp") return std::make_unique<LinearExpModel>(p, q, ic);
  if (tag == "erm") return std::make_unique<ExpRegModel>(p, q, ic);
  if (tag == "aft-weibull") {
    return std::make_unique<AftModel>(p, ErrorFamily::extreme_value, options.scale, q, ic);
  }
  if (tag == "aft-lognormal") {
    return std::make_unique<AftModel>(p, ErrorFamily::normal, options.scale, q, ic);
  }
  if (tag == "aft-loglogistic") {
    return std::make_unique<AftModel>(p, ErrorFamily::logistic, options.scale, q, ic);
  }
  std::string list;
  for (const auto& t : model_tags()) list += (list.empty() ? "" : ", ") + t;
  throw validation_error("unknown model '" + std::string(tag) + "' (expected one of: " + list +
                         ")");
}

}  // namespace cdpd
