#pragma once

// Density power divergence objective H_{n,α}, its gradient, and the ψ
// functions behind the estimating equations. Besides the MDPDE ψ this
// header carries the generic estimating-function interface used by the
// M-estimation, sandwich and influence code, and two classical censored
// regression ψ's (Zhou-type linear, Wang-type AFT).

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include "cdpd/error.hpp"
#include "cdpd/models.hpp"
#include "cdpd/survival_data.hpp"

namespace cdpd {

enum class Variant { joint, conditional };

inline const char* variant_name(Variant v) {
  return v == Variant::joint ? "joint" : "conditional";
}

inline Variant parse_variant(const std::string& s) {
  if (s == "joint") return Variant::joint;
  if (s == "conditional") return Variant::conditional;
  throw validation_error("unknown variant '" + s + "' (expected joint or conditional)");
}

struct DpdConfig {
  double alpha = 0.3;
  Variant variant = Variant::joint;

  void validate() const {
    if (!std::isfinite(alpha) || alpha < 0.0) {
      throw validation_error("alpha must be finite and >= 0, got " + std::to_string(alpha));
    }
  }
};

struct PsiValue {
  VectorXd psi1;  // θ block
  VectorXd psi2;  // γ block; empty for the conditional variant

  VectorXd stacked() const {
    VectorXd out(psi1.size() + psi2.size());
    out << psi1, psi2;
    return out;
  }
};

// Length of the stacked parameter (θ, γ) or θ alone.
inline Index parameter_dim(const Model& m, Variant v) {
  return m.theta_dim() + (v == Variant::joint ? m.gamma_dim() : 0);
}

inline VectorXd stack_parameters(const VectorXd& theta, const VectorXd& gamma, Variant v) {
  if (v == Variant::conditional) return theta;
  VectorXd out(theta.size() + gamma.size());
  out << theta, gamma;
  return out;
}

namespace detail {

// e^{αL} with L = log density; an underflow is a legitimate 0.
inline double density_power(double log_density, double alpha, Index record) {
  const double v = std::exp(alpha * log_density);
  if (!std::isfinite(v)) {
    throw overflow_error("density power overflows at record " + std::to_string(record + 1) +
                         " (log density " + std::to_string(log_density) + ")");
  }
  return v;
}

inline double log_density(const Model& m, Variant v, double y, ConstVecRef x,
                          const VectorXd& theta, const VectorXd& gamma) {
  double l = m.cond_log_density(y, x, theta);
  if (v == Variant::joint) l += m.cov_log_density(x, gamma);
  return l;
}

inline VectorXd full_score(const Model& m, Variant v, double y, ConstVecRef x,
                           const VectorXd& theta, const VectorXd& gamma) {
  if (v == Variant::conditional) return m.cond_score(y, x, theta);
  VectorXd u(m.theta_dim() + m.gamma_dim());
  u << m.cond_score(y, x, theta), m.cov_score(x, gamma);
  return u;
}

inline MatrixXd full_score_jacobian(const Model& m, Variant v, double y, ConstVecRef x,
                                    const VectorXd& theta) {
  const MatrixXd jt = m.cond_score_jacobian(y, x, theta);
  if (v == Variant::conditional) return jt;
  const Index q = m.theta_dim(), r = m.gamma_dim();
  MatrixXd j = MatrixXd::Zero(q + r, q + r);
  j.topLeftCorner(q, q) = jt;
  j.bottomRightCorner(r, r) = -MatrixXd::Identity(r, r);
  return j;
}

inline double fd_step(double v) { return 1e-6 * (1.0 + std::abs(v)); }

}  // namespace detail

// H_{n,α}. For α = 0 the (constant) mass term is dropped, leaving the
// Stute-weighted negative log-likelihood.
inline double objective(const Model& model, const SortedSample& s, const KmWeights& w,
                        const DpdConfig& cfg, const VectorXd& theta, const VectorXd& gamma) {
  cfg.validate();
  model.check_support(theta, s.x);
  const double a = cfg.alpha;
  double data = 0.0;
  for (Index i = 0; i < s.n(); ++i) {
    if (w.w(i) == 0.0) continue;
    const double l = detail::log_density(model, cfg.variant, s.z(i), s.x.row(i).transpose(),
                                         theta, gamma);
    data += w.w(i) * (a == 0.0 ? l : detail::density_power(l, a, i));
  }
  if (a == 0.0) return -data;
  double mass = 0.0;
  if (cfg.variant == Variant::joint) {
    mass = model.mass_and_zeta(theta, gamma, a).mass;
  } else {
    mass = w.w.dot(model.conditional_mass_and_zeta(s.x, theta, a).mass);
  }
  return mass - (1.0 + a) / a * data;
}

// ∇H_{n,α} with respect to (θ, γ) (joint) or θ (conditional).
inline VectorXd objective_gradient(const Model& model, const SortedSample& s,
                                   const KmWeights& w, const DpdConfig& cfg,
                                   const VectorXd& theta, const VectorXd& gamma) {
  cfg.validate();
  model.check_support(theta, s.x);
  const double a = cfg.alpha;
  const Index d = parameter_dim(model, cfg.variant);
  VectorXd data = VectorXd::Zero(d);
  for (Index i = 0; i < s.n(); ++i) {
    if (w.w(i) == 0.0) continue;
    const auto x = s.x.row(i).transpose();
    const double power =
        a == 0.0 ? 1.0
                 : detail::density_power(
                       detail::log_density(model, cfg.variant, s.z(i), x, theta, gamma), a, i);
    if (power == 0.0) continue;
    data += w.w(i) * power * detail::full_score(model, cfg.variant, s.z(i), x, theta, gamma);
  }
  if (a == 0.0) return -data;
  VectorXd zeta;
  if (cfg.variant == Variant::joint) {
    const JointTerms t = model.mass_and_zeta(theta, gamma, a);
    zeta = stack_parameters(t.zeta_theta, t.zeta_gamma, Variant::joint);
  } else {
    zeta = model.conditional_mass_and_zeta(s.x, theta, a).zeta.transpose() * w.w;
  }
  return (1.0 + a) * (zeta - data);
}

// ψ(y, x; θ, γ) = ζ - u f^α (joint: f = f_θ(y|x) f_γ(x); conditional: f_θ(y|x)
// and ζ̃_θ(x)). At α = 0 this is minus the score.
inline PsiValue psi(const Model& model, const DpdConfig& cfg, const VectorXd& theta,
                    const VectorXd& gamma, double y, ConstVecRef x) {
  cfg.validate();
  const double a = cfg.alpha;
  const double power =
      a == 0.0 ? 1.0
               : detail::density_power(detail::log_density(model, cfg.variant, y, x, theta, gamma),
                                       a, 0);
  const Index q = model.theta_dim();
  PsiValue out;
  VectorXd data = VectorXd::Zero(parameter_dim(model, cfg.variant));
  if (power != 0.0) data = power * detail::full_score(model, cfg.variant, y, x, theta, gamma);
  if (cfg.variant == Variant::joint) {
    const JointTerms t = model.mass_and_zeta(theta, gamma, a);
    out.psi1 = t.zeta_theta - data.head(q);
    out.psi2 = t.zeta_gamma - data.tail(model.gamma_dim());
  } else {
    CovariateMatrix row = x.transpose();
    out.psi1 = model.conditional_mass_and_zeta(row, theta, a).zeta.row(0).transpose() - data;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Estimating functions. The parameter is always a single stacked vector.

class EstimatingFunction {
 public:
  virtual ~EstimatingFunction() = default;

  virtual Index dim() const = 0;
  virtual VectorXd value(double y, ConstVecRef x, const VectorXd& par) const = 0;

  virtual std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (Index k = 0; k < dim(); ++k) out.push_back("par[" + std::to_string(k + 1) + "]");
    return out;
  }

  // Whether par lies in the parameter space for every record of s.
  virtual bool admissible(const SortedSample& s, const VectorXd& par) const {
    (void)s;
    return par.allFinite();
  }

  // ψ at every record (one row per record).
  virtual MatrixXd values(const SortedSample& s, const VectorXd& par) const {
    MatrixXd out(s.n(), dim());
    for (Index i = 0; i < s.n(); ++i) out.row(i) = value(s.z(i), s.x.row(i).transpose(), par);
    return out;
  }

  // ∂ψ(y, x; par)/∂par; central differences unless overridden.
  virtual MatrixXd jacobian(double y, ConstVecRef x, const VectorXd& par) const {
    MatrixXd j(dim(), par.size());
    VectorXd pp = par, pm = par;
    for (Index k = 0; k < par.size(); ++k) {
      const double h = detail::fd_step(par(k));
      pp(k) = par(k) + h;
      pm(k) = par(k) - h;
      j.col(k) = (value(y, x, pp) - value(y, x, pm)) / (2.0 * h);
      pp(k) = pm(k) = par(k);
    }
    return j;
  }

  // Σ_i w_i ∂ψ(Z_i, X_i; par)/∂par.
  virtual MatrixXd weighted_jacobian(const SortedSample& s, const VectorXd& w,
                                     const VectorXd& par) const {
    MatrixXd j = MatrixXd::Zero(dim(), par.size());
    for (Index i = 0; i < s.n(); ++i) {
      if (w(i) != 0.0) j += w(i) * jacobian(s.z(i), s.x.row(i).transpose(), par);
    }
    return j;
  }
};

// λ_n(par) = Σ W_in ψ(Z_i, X_i; par).
inline VectorXd estimating_equation(const EstimatingFunction& psi_fn, const SortedSample& s,
                                    const VectorXd& w, const VectorXd& par) {
  return psi_fn.values(s, par).transpose() * w;
}

// The MDPDE ψ as an estimating function of par = (θ, γ) or θ.
class MdpdePsi final : public EstimatingFunction {
 public:
  MdpdePsi(const Model& model, DpdConfig cfg) : model_(model), cfg_(cfg) { cfg_.validate(); }

  const Model& model() const { return model_; }
  const DpdConfig& config() const { return cfg_; }
  Index dim() const override { return parameter_dim(model_, cfg_.variant); }

  VectorXd theta_of(const VectorXd& par) const { return par.head(model_.theta_dim()); }
  VectorXd gamma_of(const VectorXd& par) const {
    return cfg_.variant == Variant::joint ? VectorXd(par.tail(model_.gamma_dim())) : VectorXd();
  }

  std::vector<std::string> names() const override { return names_for({}); }
  std::vector<std::string> names_for(const std::vector<std::string>& covariates) const {
    auto out = model_.theta_names(covariates);
    if (cfg_.variant == Variant::joint) {
      for (auto& g : model_.gamma_names(covariates)) out.push_back(g);
    }
    return out;
  }

  bool admissible(const SortedSample& s, const VectorXd& par) const override {
    if (!par.allFinite()) return false;
    try {
      model_.check_support(theta_of(par), s.x);
      return true;
    } catch (const domain_error&) {
      return false;
    }
  }

  VectorXd value(double y, ConstVecRef x, const VectorXd& par) const override {
    return data_free_term(x, par) - data_term(y, x, par, 0);
  }

  MatrixXd values(const SortedSample& s, const VectorXd& par) const override {
    const Index d = dim();
    MatrixXd out(s.n(), d);
    if (cfg_.variant == Variant::joint) {
      const VectorXd zeta = joint_zeta(par);
      for (Index i = 0; i < s.n(); ++i) {
        out.row(i) = (zeta - data_term(s.z(i), s.x.row(i).transpose(), par, i)).transpose();
      }
    } else {
      out = conditional_zeta(s.x, theta_of(par));
      for (Index i = 0; i < s.n(); ++i) {
        out.row(i) -= data_term(s.z(i), s.x.row(i).transpose(), par, i).transpose();
      }
    }
    return out;
  }

  MatrixXd jacobian(double y, ConstVecRef x, const VectorXd& par) const override {
    MatrixXd j;
    if (cfg_.variant == Variant::joint) {
      j = joint_zeta_jacobian(par);
    } else {
      CovariateMatrix row = x.transpose();
      j = conditional_zeta_jacobian(row, VectorXd::Ones(1), theta_of(par));
    }
    return j - data_jacobian(y, x, par, 0);
  }

  MatrixXd weighted_jacobian(const SortedSample& s, const VectorXd& w,
                             const VectorXd& par) const override {
    MatrixXd j = cfg_.variant == Variant::joint
                     ? MatrixXd(joint_zeta_jacobian(par) * w.sum())
                     : conditional_zeta_jacobian(s.x, w, theta_of(par));
    for (Index i = 0; i < s.n(); ++i) {
      if (w(i) != 0.0) j -= w(i) * data_jacobian(s.z(i), s.x.row(i).transpose(), par, i);
    }
    return j;
  }

 private:
  // u f^α
  VectorXd data_term(double y, ConstVecRef x, const VectorXd& par, Index record) const {
    const VectorXd theta = theta_of(par), gamma = gamma_of(par);
    const double a = cfg_.alpha;
    const double power =
        a == 0.0 ? 1.0
                 : detail::density_power(
                       detail::log_density(model_, cfg_.variant, y, x, theta, gamma), a, record);
    if (power == 0.0) return VectorXd::Zero(dim());
    return power * detail::full_score(model_, cfg_.variant, y, x, theta, gamma);
  }

  // ∂(u f^α) = f^α (∂u + α u uᵀ)
  MatrixXd data_jacobian(double y, ConstVecRef x, const VectorXd& par, Index record) const {
    const VectorXd theta = theta_of(par), gamma = gamma_of(par);
    const double a = cfg_.alpha;
    const double power =
        a == 0.0 ? 1.0
                 : detail::density_power(
                       detail::log_density(model_, cfg_.variant, y, x, theta, gamma), a, record);
    const Index d = dim();
    if (power == 0.0) return MatrixXd::Zero(d, d);
    const VectorXd u = detail::full_score(model_, cfg_.variant, y, x, theta, gamma);
    MatrixXd j = detail::full_score_jacobian(model_, cfg_.variant, y, x, theta);
    j.topLeftCorner(d, d) += a * u * u.transpose();
    return power * j;
  }

  VectorXd data_free_term(ConstVecRef x, const VectorXd& par) const {
    if (cfg_.variant == Variant::joint) return joint_zeta(par);
    CovariateMatrix row = x.transpose();
    return conditional_zeta(row, theta_of(par)).row(0).transpose();
  }

  VectorXd joint_zeta(const VectorXd& par) const {
    if (cfg_.alpha == 0.0) return VectorXd::Zero(dim());
    std::lock_guard<std::mutex> lock(cache_->mutex);
    auto it = cache_->zeta.find(key(par));
    if (it != cache_->zeta.end()) return it->second;
    const JointTerms t = model_.mass_and_zeta(theta_of(par), gamma_of(par), cfg_.alpha);
    const VectorXd z = stack_parameters(t.zeta_theta, t.zeta_gamma, Variant::joint);
    if (cache_->zeta.size() > 512) cache_->zeta.clear();
    cache_->zeta.emplace(key(par), z);
    return z;
  }

  MatrixXd joint_zeta_jacobian(const VectorXd& par) const {
    const Index d = dim();
    MatrixXd j = MatrixXd::Zero(d, d);
    if (cfg_.alpha == 0.0) return j;
    VectorXd pp = par, pm = par;
    for (Index k = 0; k < d; ++k) {
      const double h = detail::fd_step(par(k));
      pp(k) = par(k) + h;
      pm(k) = par(k) - h;
      j.col(k) = (joint_zeta(pp) - joint_zeta(pm)) / (2.0 * h);
      pp(k) = pm(k) = par(k);
    }
    return j;
  }

  MatrixXd conditional_zeta(const CovariateMatrix& x, const VectorXd& theta) const {
    if (cfg_.alpha == 0.0) return MatrixXd::Zero(x.rows(), model_.theta_dim());
    return model_.conditional_mass_and_zeta(x, theta, cfg_.alpha).zeta;
  }

  // Σ_i w_i ∂ζ̃(x_i)/∂θ by central differences of the batched terms.
  MatrixXd conditional_zeta_jacobian(const CovariateMatrix& x, const VectorXd& w,
                                     const VectorXd& theta) const {
    const Index q = model_.theta_dim();
    MatrixXd j = MatrixXd::Zero(q, q);
    if (cfg_.alpha == 0.0) return j;
    VectorXd tp = theta, tm = theta;
    for (Index k = 0; k < q; ++k) {
      const double h = detail::fd_step(theta(k));
      tp(k) = theta(k) + h;
      tm(k) = theta(k) - h;
      const MatrixXd diff = conditional_zeta(x, tp) - conditional_zeta(x, tm);
      j.col(k) = diff.transpose() * w / (2.0 * h);
      tp(k) = tm(k) = theta(k);
    }
    return j;
  }

  static std::vector<double> key(const VectorXd& par) {
    return std::vector<double>(par.data(), par.data() + par.size());
  }

  struct Cache {
    std::mutex mutex;
    std::map<std::vector<double>, VectorXd> zeta;
  };

  const Model& model_;
  DpdConfig cfg_;
  std::shared_ptr<Cache> cache_ = std::make_shared<Cache>();
};

// ---------------------------------------------------------------------------
// Scalar ψ0 building blocks for the classical censored regression ψ's.

struct ScalarPsi {
  std::function<double(double)> f;
  std::function<double(double)> derivative;

  double operator()(double r) const { return f(r); }

  static ScalarPsi identity() {
    return {[](double r) { return r; }, [](double) { return 1.0; }};
  }
  static ScalarPsi huber(double k) {
    if (!(k > 0.0)) throw validation_error("Huber cutoff must be positive");
    return {[k](double r) { return std::clamp(r, -k, k); },
            [k](double r) { return std::abs(r) < k ? 1.0 : 0.0; }};
  }
};

// ψ(y, x; θ) = ψ0(y - x'θ) x. With log_response the residual is taken on log y.
class ZhouPsi final : public EstimatingFunction {
 public:
  ZhouPsi(Index p, ScalarPsi psi0, bool log_response = false)
      : p_(p), psi0_(std::move(psi0)), log_response_(log_response) {}

  Index dim() const override { return p_; }

  VectorXd value(double y, ConstVecRef x, const VectorXd& par) const override {
    return psi0_(response(y) - x.dot(par)) * x;
  }
  MatrixXd jacobian(double y, ConstVecRef x, const VectorXd& par) const override {
    return -psi0_.derivative(response(y) - x.dot(par)) * (x * x.transpose());
  }

 private:
  double response(double y) const { return log_response_ ? std::log(y) : y; }

  Index p_;
  ScalarPsi psi0_;
  bool log_response_;
};

// AFT location-scale ψ on log time, par = (β, σ):
//   s = ω(x)(log y - x'β)/σ,  ψ = [ψ0(s) ω(x) x ; s ψ0(s) - 1].
class WangPsi final : public EstimatingFunction {
 public:
  using Weight = std::function<double(ConstVecRef)>;

  WangPsi(Index p, ScalarPsi psi0, Weight omega = {})
      : p_(p), psi0_(std::move(psi0)), omega_(std::move(omega)) {}

  Index dim() const override { return p_ + 1; }

  bool admissible(const SortedSample&, const VectorXd& par) const override {
    return par.allFinite() && par(p_) > 0.0;
  }

  VectorXd value(double y, ConstVecRef x, const VectorXd& par) const override {
    const double om = weight(x);
    const double s = standardized(y, x, par, om);
    const double v = psi0_(s);
    VectorXd out(p_ + 1);
    out.head(p_) = v * om * x;
    out(p_) = s * v - 1.0;
    return out;
  }

  MatrixXd jacobian(double y, ConstVecRef x, const VectorXd& par) const override {
    const double om = weight(x);
    const double sigma = par(p_);
    const double s = standardized(y, x, par, om);
    const double v = psi0_(s), dv = psi0_.derivative(s);
    VectorXd ds(p_ + 1);
    ds.head(p_) = -om * x / sigma;
    ds(p_) = -s / sigma;
    MatrixXd j(p_ + 1, p_ + 1);
    j.topRows(p_) = (dv * om * x) * ds.transpose();
    j.row(p_) = (v + s * dv) * ds.transpose();
    return j;
  }

 private:
  double weight(ConstVecRef x) const {
    const double om = omega_ ? omega_(x) : 1.0;
    if (!(om > 0.0)) throw domain_error("covariate weight must be positive");
    return om;
  }
  double standardized(double y, ConstVecRef x, const VectorXd& par, double om) const {
    const double sigma = par(p_);
    if (!(sigma > 0.0)) throw domain_error("sigma must be positive");
    return om * (std::log(y) - x.dot(par.head(p_))) / sigma;
  }

  Index p_;
  ScalarPsi psi0_;
  Weight omega_;
};

// Arbitrary user ψ.
class FunctionPsi final : public EstimatingFunction {
 public:
  using Fn = std::function<VectorXd(double, ConstVecRef, const VectorXd&)>;

  FunctionPsi(Index dim, Fn fn) : dim_(dim), fn_(std::move(fn)) {}

  Index dim() const override { return dim_; }
  VectorXd value(double y, ConstVecRef x, const VectorXd& par) const override {
    return fn_(y, x, par);
  }

 private:
  Index dim_;
  Fn fn_;
};

}  // namespace cdpd
