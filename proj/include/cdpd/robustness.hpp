#pragma once

// Influence functions IF((y0, x0); T_ψ, G) = -Λ_G⁻¹ ψ(y0, x0) and a
// shell-growth heuristic for deciding whether they stay bounded as the
// contamination point moves out in the response or the covariates.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <ostream>
#include <string>
#include <tuple>
#include <vector>

#include "cdpd/dpd.hpp"
#include "cdpd/error.hpp"
#include "cdpd/models.hpp"
#include "cdpd/quadrature.hpp"
#include "cdpd/survival_data.hpp"

namespace cdpd {

namespace detail {

// Tensor Gauss–Hermite grid for N_p(mean, I); fewer nodes per axis as p grows.
inline void for_each_normal_node(const VectorXd& mean, int nodes_1d,
                                 const std::function<void(const VectorXd&, double)>& fn) {
  const Index p = mean.size();
  int per_axis = nodes_1d;
  if (p == 2) per_axis = std::min(nodes_1d, 24);
  if (p >= 3) per_axis = std::min(nodes_1d, 10);
  const auto& rule = gauss_hermite(per_axis);
  std::vector<int> idx(static_cast<std::size_t>(p), 0);
  VectorXd x(p);
  while (true) {
    double w = 1.0;
    for (Index j = 0; j < p; ++j) {
      const int k = idx[static_cast<std::size_t>(j)];
      x(j) = mean(j) + rule.nodes(k);
      w *= rule.weights(k);
    }
    fn(x, w);
    Index j = 0;
    while (j < p && ++idx[static_cast<std::size_t>(j)] == per_axis) {
      idx[static_cast<std::size_t>(j)] = 0;
      ++j;
    }
    if (j == p) break;
  }
}

}  // namespace detail

// E_G[h(Y, X)] under the model law of the fitted parameters: X ~ N_p(γ, I)
// by Gauss–Hermite, Y | X through the conditional quantile on t ∈ (0, 1)
// by tanh–sinh (componentwise). LRM nodes with x'θ <= 0 are skipped.
inline MatrixXd model_expectation(const Model& model, const VectorXd& theta,
                                  const VectorXd& gamma,
                                  const std::function<MatrixXd(double, const VectorXd&)>& h,
                                  Index rows, Index cols, double tolerance = 1e-10) {
  MatrixXd acc = MatrixXd::Zero(rows, cols);
  detail::for_each_normal_node(gamma, model.quadrature().hermite_nodes,
                               [&](const VectorXd& x_random, double w) {
    VectorXd x = x_random;
    if (model.has_intercept()) {
      x.resize(x_random.size() + 1);
      x << 1.0, x_random;
    }
    try {
      CovariateMatrix row = x.transpose();
      model.check_support(theta, row);
    } catch (const domain_error&) {
      return;
    }
    for (Index r = 0; r < rows; ++r) {
      for (Index c = 0; c < cols; ++c) {
        auto f = [&](double t) {
          const MatrixXd v = h(model.cond_quantile(t, x, theta), x);
          return v(r, c);
        };
        acc(r, c) += w * integrate_open(f, 0.0, 1.0, tolerance);
      }
    }
  });
  return acc;
}

// Λ_G = E_G[∂ψ/∂par] under the model law at par. The conditional variant
// carries no γ, so the covariate mean is passed separately.
inline MatrixXd model_lambda(const MdpdePsi& psi_fn, const VectorXd& par,
                             const VectorXd& covariate_mean) {
  const Index d = psi_fn.dim();
  return model_expectation(
      psi_fn.model(), psi_fn.theta_of(par), covariate_mean,
      [&](double y, const VectorXd& x) { return psi_fn.jacobian(y, x, par); }, d, d);
}

inline MatrixXd model_lambda(const MdpdePsi& psi_fn, const VectorXd& par) {
  if (psi_fn.config().variant != Variant::joint) {
    throw validation_error("conditional variant: pass the covariate mean to model_lambda");
  }
  return model_lambda(psi_fn, par, psi_fn.gamma_of(par));
}

inline VectorXd influence(const EstimatingFunction& psi_fn, const MatrixXd& lambda,
                          const VectorXd& par, double y0, ConstVecRef x0) {
  Eigen::FullPivLU<MatrixXd> lu(lambda);
  if (!lambda.allFinite() || !lu.isInvertible()) {
    throw singular_matrix_error("Lambda is singular; the influence function is undefined");
  }
  return -lu.solve(psi_fn.value(y0, x0, par));
}

// Λ_G by model quadrature; the covariate law is N_p(γ, I) in both variants.
inline VectorXd influence(const Model& model, const DpdConfig& cfg, const VectorXd& theta,
                          const VectorXd& gamma, double y0, ConstVecRef x0) {
  const MdpdePsi psi_fn(model, cfg);
  const VectorXd par = stack_parameters(theta, gamma, cfg.variant);
  return influence(psi_fn, model_lambda(psi_fn, par, gamma), par, y0, x0);
}

// Λ̂ from a sample instead of the model law.
inline VectorXd influence(const EstimatingFunction& psi_fn, const WeightedSample& ws,
                          const VectorXd& par, double y0, ConstVecRef x0) {
  return influence(psi_fn, psi_fn.weighted_jacobian(ws.sorted, ws.weights.w, par), par, y0, x0);
}

// ---------------------------------------------------------------------------

struct GridSpec {
  // Response direction: y0 = y_first, y_first·ratio, ... at x0 = x_ref.
  double y_first = 1.0;
  double y_last = 1e6;
  double y_ratio = 10.0;
  // Leverage direction: x0 = x_ref ± c·1 for c = x_first, x_first·ratio,
  // ..., x_last, at y0 = y_ref.
  double x_first = 1.0;
  double x_last = 1e3;
  double x_ratio = 10.0;
  std::optional<VectorXd> x_ref;  // default: the covariate mean γ
  // Leverage direction; default all ones (zero on an intercept column).
  std::optional<VectorXd> x_direction;
  std::optional<double> y_ref;    // default: the conditional median at x_ref
  double growth_threshold = 1.05;

  void validate() const {
    if (!(y_first > 0.0 && y_last >= y_first && y_ratio > 1.0)) {
      throw validation_error("invalid response grid");
    }
    if (!(x_first > 0.0 && x_last >= x_first && x_ratio > 1.0)) {
      throw validation_error("invalid covariate grid");
    }
    if (!(growth_threshold > 1.0)) throw validation_error("growth threshold must exceed 1");
  }
};

enum class GridDirection { response, leverage };

struct InfluencePoint {
  GridDirection direction;
  int shell = 0;
  double y0 = 0.0;
  VectorXd x0;
  VectorXd value;  // IF; non-finite entries when the evaluation overflowed
  double norm = 0.0;
};

struct InfluenceCurve {
  std::vector<InfluencePoint> points;
  std::vector<std::string> names;
  double sup_norm = 0.0;
};

struct BoundednessReport {
  InfluenceCurve curve;
  bool bounded_in_y = false;
  bool bounded_in_x = false;
  double y_growth = 0.0;  // cumulative sup over the last shell / previous shells
  double x_growth = 0.0;
};

namespace detail {

inline std::vector<double> geometric_shells(double first, double last, double ratio) {
  std::vector<double> out;
  for (double v = first; v <= last * (1.0 + 1e-12); v *= ratio) out.push_back(v);
  return out;
}

// Verdict from the per-shell sup norms: bounded when every value is finite
// and the running sup barely grows over the last shell.
inline std::pair<bool, double> shell_verdict(const std::vector<double>& shell_sup,
                                             double threshold) {
  if (shell_sup.size() < 2) return {false, std::numeric_limits<double>::infinity()};
  double before = 0.0;
  for (std::size_t k = 0; k + 1 < shell_sup.size(); ++k) {
    if (!std::isfinite(shell_sup[k])) return {false, std::numeric_limits<double>::infinity()};
    before = std::max(before, shell_sup[k]);
  }
  const double last = shell_sup.back();
  if (!std::isfinite(last)) return {false, std::numeric_limits<double>::infinity()};
  const double all = std::max(before, last);
  double growth = 1.0;
  if (before > 0.0) {
    growth = all / before;
  } else if (all > 0.0) {
    growth = std::numeric_limits<double>::infinity();
  }
  return {growth < threshold, growth};
}

}  // namespace detail

// Evaluates IF over the response and leverage shells and reports verdicts.
// `lambda` is Λ at par (model_lambda or a sample Λ̂).
inline BoundednessReport boundedness_report(const EstimatingFunction& psi_fn,
                                            const MatrixXd& lambda, const VectorXd& par,
                                            const VectorXd& x_ref, double y_ref,
                                            const GridSpec& grid) {
  grid.validate();
  Eigen::FullPivLU<MatrixXd> lu(lambda);
  if (!lambda.allFinite() || !lu.isInvertible()) {
    throw singular_matrix_error("Lambda is singular; the influence function is undefined");
  }
  BoundednessReport rep;
  rep.curve.names = psi_fn.names();
  auto eval = [&](GridDirection dir, int shell, double y0, const VectorXd& x0) {
    InfluencePoint pt{dir, shell, y0, x0, VectorXd(), 0.0};
    try {
      pt.value = -lu.solve(psi_fn.value(y0, x0, par));
    } catch (const overflow_error&) {
      pt.value = VectorXd::Constant(psi_fn.dim(), std::numeric_limits<double>::infinity());
    } catch (const domain_error&) {
      pt.value = VectorXd::Constant(psi_fn.dim(), std::numeric_limits<double>::quiet_NaN());
    }
    pt.norm = pt.value.allFinite() ? pt.value.norm() : std::numeric_limits<double>::infinity();
    rep.curve.points.push_back(pt);
    return pt.norm;
  };

  std::vector<double> y_sup, x_sup;
  int shell = 0;
  for (double y0 : detail::geometric_shells(grid.y_first, grid.y_last, grid.y_ratio)) {
    y_sup.push_back(eval(GridDirection::response, shell++, y0, x_ref));
  }
  shell = 0;
  for (double c : detail::geometric_shells(grid.x_first, grid.x_last, grid.x_ratio)) {
    const VectorXd dir = grid.x_direction.value_or(VectorXd::Ones(x_ref.size()));
    if (dir.size() != x_ref.size()) throw validation_error("leverage direction has wrong size");
    const double up = eval(GridDirection::leverage, shell, y_ref, x_ref + c * dir);
    const double down = eval(GridDirection::leverage, shell, y_ref, x_ref - c * dir);
    x_sup.push_back(std::max(up, down));
    ++shell;
  }
  std::tie(rep.bounded_in_y, rep.y_growth) = detail::shell_verdict(y_sup, grid.growth_threshold);
  std::tie(rep.bounded_in_x, rep.x_growth) = detail::shell_verdict(x_sup, grid.growth_threshold);
  for (const auto& pt : rep.curve.points) rep.curve.sup_norm = std::max(rep.curve.sup_norm, pt.norm);
  return rep;
}

// Model-law version: Λ_G by quadrature, reference point (γ, median of Y | γ).
inline BoundednessReport boundedness_report(const Model& model, const DpdConfig& cfg,
                                            const VectorXd& theta, const VectorXd& gamma,
                                            const GridSpec& grid = {}) {
  const MdpdePsi psi_fn(model, cfg);
  const VectorXd par = stack_parameters(theta, gamma, cfg.variant);
  const MatrixXd lambda = model_lambda(psi_fn, par, gamma);
  const VectorXd x_ref = grid.x_ref.value_or(model.covariate_mean(gamma));
  const double y_ref = grid.y_ref.value_or(model.cond_quantile(0.5, x_ref, theta));
  GridSpec g = grid;
  if (!g.x_direction) {
    g.x_direction = VectorXd::Ones(x_ref.size());
    if (model.has_intercept()) (*g.x_direction)(0) = 0.0;
  }
  return boundedness_report(psi_fn, lambda, par, x_ref, y_ref, g);
}

inline void write_influence_csv(std::ostream& os, const InfluenceCurve& curve) {
  os.precision(12);
  const Index p = curve.points.empty() ? 0 : curve.points.front().x0.size();
  os << "direction,shell,y0";
  for (Index j = 0; j < p; ++j) os << ",x0_" << (j + 1);
  for (const auto& name : curve.names) os << "," << "IF_" << name;
  os << ",norm\n";
  for (const auto& pt : curve.points) {
    os << (pt.direction == GridDirection::response ? "response" : "leverage") << ","
       << pt.shell << "," << pt.y0;
    for (Index j = 0; j < pt.x0.size(); ++j) os << "," << pt.x0(j);
    for (Index k = 0; k < pt.value.size(); ++k) os << "," << pt.value(k);
    os << "," << pt.norm << "\n";
  }
}

}  // namespace cdpd
