#pragma once

// MDPDE fitting (multi-start quasi-Newton on H_{n,α}), root finding for
// general weighted estimating equations, and the one-step M-estimator.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "cdpd/dpd.hpp"
#include "cdpd/error.hpp"
#include "cdpd/models.hpp"
#include "cdpd/optimize.hpp"
#include "cdpd/survival_data.hpp"

namespace cdpd {

struct SolverConfig {
  double tolerance = 1e-8;
  int max_iterations = 500;
  int restarts = 5;             // total starts, including the initial point
  double restart_scale = 0.1;   // perturbation sd relative to 1 + |param|
  std::uint64_t seed = 0;

  void validate() const {
    if (!(tolerance > 0.0)) throw validation_error("solver tolerance must be positive");
    if (restarts < 1) throw validation_error("restarts must be >= 1");
    if (max_iterations < 1) throw validation_error("max_iterations must be >= 1");
    if (!(restart_scale >= 0.0)) throw validation_error("restart_scale must be >= 0");
  }
};

struct FitResult {
  VectorXd theta_hat;
  VectorXd gamma_hat;  // empty for the conditional variant and bare M-estimators
  double alpha = 0.0;
  Variant variant = Variant::joint;
  double objective_value = std::numeric_limits<double>::quiet_NaN();
  double grad_norm = std::numeric_limits<double>::infinity();
  int iterations = 0;
  bool converged = false;
  int starts_used = 0;
  std::optional<MatrixXd> covariance;
  std::vector<VectorXd> roots;  // distinct roots seen (solve_mest)
  std::vector<std::string> names;

  VectorXd parameters() const { return stack_parameters(theta_hat, gamma_hat, variant); }
};

namespace detail {

inline std::mt19937_64 substream(std::uint64_t seed, std::uint64_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
  return std::mt19937_64(seq);
}

inline VectorXd perturb(const VectorXd& x, double scale, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  VectorXd out = x;
  for (Index k = 0; k < x.size(); ++k) out(k) += scale * (1.0 + std::abs(x(k))) * normal(rng);
  return out;
}

inline std::string format_vector(const VectorXd& v) {
  std::ostringstream os;
  os.precision(10);
  os << "(";
  for (Index k = 0; k < v.size(); ++k) os << (k ? ", " : "") << v(k);
  os << ")";
  return os.str();
}

}  // namespace detail

// Stute-weighted covariate mean: the α = 0 estimate of γ under N_p(γ, I).
inline VectorXd weighted_covariate_mean(const WeightedSample& s) {
  if (!(s.weights.total > 0.0)) {
    throw degenerate_data_error("every observation is censored; nothing to fit");
  }
  return s.sorted.x.transpose() * s.weights.w / s.weights.total;
}

struct InitialValue {
  VectorXd theta;
  VectorXd gamma;
};

inline FitResult fit_mdpde(const Model& model, const WeightedSample& ws, const DpdConfig& cfg,
                           const SolverConfig& solver = {},
                           std::optional<InitialValue> init = std::nullopt);

inline FitResult fit_mdpde(const Model& model, const CensoredSample& sample, const DpdConfig& cfg,
                           const SolverConfig& solver = {},
                           std::optional<InitialValue> init = std::nullopt) {
  if (sample.p() != model.covariate_dim()) {
    throw validation_error("sample has " + std::to_string(sample.p()) +
                           " covariates, model expects " + std::to_string(model.covariate_dim()));
  }
  return fit_mdpde(model, prepare(sample), cfg, solver, std::move(init));
}

// Minimizes H_{n,α} from `init` (default: the α = 0 fit, itself started
// from weighted least squares) plus solver.restarts - 1 random
// perturbations; the converged run with the smallest objective wins.
inline FitResult fit_mdpde(const Model& model, const WeightedSample& ws, const DpdConfig& cfg,
                           const SolverConfig& solver, std::optional<InitialValue> init) {
  cfg.validate();
  solver.validate();
  if (ws.sorted.delta.sum() == 0) {
    throw degenerate_data_error("every observation is censored; nothing to fit");
  }
  model.check_design(ws.sorted.x);
  const auto& s = ws.sorted;
  const auto& w = ws.weights;
  const Index q = model.theta_dim();
  const bool joint = cfg.variant == Variant::joint;

  if (!init) {
    InitialValue start{model.initial_theta(ws),
                       joint ? VectorXd(weighted_covariate_mean(ws).tail(model.gamma_dim()))
                             : VectorXd()};
    if (cfg.alpha > 0.0) {
      DpdConfig mle = cfg;
      mle.alpha = 0.0;
      SolverConfig single = solver;
      single.restarts = 1;
      try {
        const FitResult r0 = fit_mdpde(model, ws, mle, single, start);
        start = {r0.theta_hat, r0.gamma_hat};
      } catch (const convergence_error&) {
        // keep the least-squares start
      }
    }
    init = start;
  }
  if (joint && init->gamma.size() != model.gamma_dim()) {
    throw validation_error("initial gamma has the wrong dimension");
  }
  model.check_support(init->theta, s.x);

  auto split = [&](const VectorXd& free) {
    return std::pair<VectorXd, VectorXd>{model.from_free(free.head(q)),
                                         joint ? VectorXd(free.tail(model.gamma_dim()))
                                               : VectorXd()};
  };
  Objective f;
  f.value = [&](const VectorXd& free) {
    const auto [theta, gamma] = split(free);
    return objective(model, s, w, cfg, theta, gamma);
  };
  f.gradient = [&](const VectorXd& free) {
    const auto [theta, gamma] = split(free);
    VectorXd g = objective_gradient(model, s, w, cfg, theta, gamma);
    g.head(q) = g.head(q).cwiseProduct(model.free_derivative(free.head(q)));
    return g;
  };
  // Convergence is judged on the gradient in the natural parameters.
  f.stop_norm = [&](const VectorXd& free, const VectorXd& g) {
    VectorXd natural = g;
    natural.head(q) = g.head(q).cwiseQuotient(model.free_derivative(free.head(q)));
    return natural.norm();
  };

  VectorXd x0(parameter_dim(model, cfg.variant));
  x0.head(q) = model.to_free(init->theta);
  if (joint) x0.tail(model.gamma_dim()) = init->gamma;

  MinimizeOptions opt;
  opt.tolerance = solver.tolerance;
  opt.max_iterations = solver.max_iterations;

  std::optional<MinimizeResult> best, best_any;
  int iterations = 0;
  for (int k = 0; k < solver.restarts; ++k) {
    VectorXd start = x0;
    if (k > 0) {
      auto rng = detail::substream(solver.seed, static_cast<std::uint64_t>(k));
      start = detail::perturb(x0, solver.restart_scale, rng);
      if (!std::isfinite(detail::safe_value(f, start))) continue;
    }
    MinimizeResult r;
    try {
      r = minimize(f, start, opt);
    } catch (const domain_error&) {
      continue;
    } catch (const overflow_error&) {
      continue;
    }
    iterations += r.iterations;
    if (!best_any || r.value < best_any->value) best_any = r;
    if (r.converged && (!best || r.value < best->value)) best = r;
  }
  if (!best) {
    std::string msg = "MDPDE did not converge (alpha = " + std::to_string(cfg.alpha) + ")";
    if (best_any) {
      const auto [theta, gamma] = split(best_any->x);
      msg += "; best iterate theta = " + detail::format_vector(theta) +
             (joint ? ", gamma = " + detail::format_vector(gamma) : std::string()) +
             ", gradient norm " + std::to_string(best_any->stop_norm);
    }
    throw convergence_error(msg);
  }
  FitResult out;
  std::tie(out.theta_hat, out.gamma_hat) = split(best->x);
  out.alpha = cfg.alpha;
  out.variant = cfg.variant;
  out.objective_value = best->value;
  out.grad_norm = best->stop_norm;
  out.iterations = iterations;
  out.converged = true;
  out.starts_used = solver.restarts;
  return out;
}

// ---------------------------------------------------------------------------
// Bare estimating equations λ_n(par) = Σ W_in ψ(Z_i, X_i; par) = 0.

namespace detail {

struct NewtonRun {
  VectorXd x;
  double norm = std::numeric_limits<double>::infinity();
  int iterations = 0;
  bool converged = false;
};

inline NewtonRun damped_newton(const EstimatingFunction& psi_fn, const WeightedSample& ws,
                               VectorXd x, const SolverConfig& solver) {
  const auto& s = ws.sorted;
  const auto& w = ws.weights.w;
  NewtonRun run;
  auto lambda_at = [&](const VectorXd& par) -> std::optional<VectorXd> {
    if (!psi_fn.admissible(s, par)) return std::nullopt;
    try {
      VectorXd l = estimating_equation(psi_fn, s, w, par);
      if (!l.allFinite()) return std::nullopt;
      return l;
    } catch (const domain_error&) {
      return std::nullopt;
    } catch (const overflow_error&) {
      return std::nullopt;
    }
  };
  auto lam = lambda_at(x);
  if (!lam) throw domain_error("estimating equation undefined at the starting point");
  run.x = x;
  run.norm = lam->norm();
  for (int it = 0; it < solver.max_iterations && run.norm > solver.tolerance; ++it) {
    run.iterations = it + 1;
    const MatrixXd jac = psi_fn.weighted_jacobian(s, w, run.x);
    Eigen::FullPivLU<MatrixXd> lu(jac);
    if (!jac.allFinite() || !lu.isInvertible()) {
      throw singular_matrix_error("estimating-equation Jacobian is singular at " +
                                  format_vector(run.x));
    }
    const VectorXd dir = -lu.solve(*lam);
    double step = 1.0;
    bool moved = false;
    for (int k = 0; k < 40; ++k) {
      const VectorXd xn = run.x + step * dir;
      auto ln = lambda_at(xn);
      if (ln && ln->norm() < run.norm) {
        run.x = xn;
        lam = ln;
        run.norm = ln->norm();
        moved = true;
        break;
      }
      step *= 0.5;
    }
    if (!moved) break;
  }
  run.converged = run.norm <= solver.tolerance;
  return run;
}

}  // namespace detail

// Damped Newton from `init` and solver.restarts - 1 perturbations. All
// distinct roots are kept; the one closest to `init` is reported.
inline FitResult solve_mest(const EstimatingFunction& psi_fn, const WeightedSample& ws,
                            const SolverConfig& solver, const VectorXd& init) {
  solver.validate();
  if (init.size() != psi_fn.dim()) throw validation_error("initial value has the wrong dimension");
  if (ws.sorted.delta.sum() == 0) {
    throw degenerate_data_error("every observation is censored; nothing to fit");
  }
  std::vector<VectorXd> roots;
  int iterations = 0;
  double best_norm = std::numeric_limits<double>::infinity();
  VectorXd best_x = init;
  std::optional<singular_matrix_error> singular;
  for (int k = 0; k < solver.restarts; ++k) {
    VectorXd start = init;
    if (k > 0) {
      auto rng = detail::substream(solver.seed, static_cast<std::uint64_t>(k));
      start = detail::perturb(init, solver.restart_scale, rng);
    }
    detail::NewtonRun run;
    try {
      run = detail::damped_newton(psi_fn, ws, start, solver);
    } catch (const singular_matrix_error& e) {
      if (!singular) singular = e;
      continue;
    } catch (const domain_error&) {
      continue;
    }
    iterations += run.iterations;
    if (run.norm < best_norm) {
      best_norm = run.norm;
      best_x = run.x;
    }
    if (!run.converged) continue;
    const bool seen = std::any_of(roots.begin(), roots.end(), [&](const VectorXd& r) {
      return (r - run.x).norm() <= 1e-6 * (1.0 + r.norm());
    });
    if (!seen) roots.push_back(run.x);
  }
  if (roots.empty()) {
    if (singular && !std::isfinite(best_norm)) throw *singular;
    throw convergence_error("estimating equation diverged: no root found from " +
                            std::to_string(solver.restarts) + " start(s); smallest |lambda_n| = " +
                            std::to_string(best_norm) + " at " + detail::format_vector(best_x));
  }
  const auto closest = std::min_element(roots.begin(), roots.end(), [&](const auto& a, const auto& b) {
    return (a - init).norm() < (b - init).norm();
  });
  FitResult out;
  out.theta_hat = *closest;
  out.variant = Variant::conditional;
  const VectorXd lam = estimating_equation(psi_fn, ws.sorted, ws.weights.w, *closest);
  out.grad_norm = lam.norm();
  out.objective_value = 0.5 * lam.squaredNorm();
  out.iterations = iterations;
  out.converged = true;
  out.starts_used = solver.restarts;
  out.roots = roots;
  out.names = psi_fn.names();
  return out;
}

inline FitResult solve_mest(const EstimatingFunction& psi_fn, const CensoredSample& sample,
                            const SolverConfig& solver, const VectorXd& init) {
  return solve_mest(psi_fn, prepare(sample), solver, init);
}

// start - Λ̂(start)^{-1} λ_n(start), Λ̂ = Σ W_in ∂ψ/∂par.
inline FitResult one_step(const EstimatingFunction& psi_fn, const WeightedSample& ws,
                          const VectorXd& start) {
  if (start.size() != psi_fn.dim()) throw validation_error("start has the wrong dimension");
  const auto& s = ws.sorted;
  const auto& w = ws.weights.w;
  const VectorXd lam = estimating_equation(psi_fn, s, w, start);
  const MatrixXd jac = psi_fn.weighted_jacobian(s, w, start);
  Eigen::FullPivLU<MatrixXd> lu(jac);
  if (!jac.allFinite() || !lu.isInvertible()) {
    throw singular_matrix_error("Lambda is singular at the one-step start " +
                                detail::format_vector(start));
  }
  FitResult out;
  out.theta_hat = start - lu.solve(lam);
  out.variant = Variant::conditional;
  out.iterations = 1;
  out.starts_used = 1;
  out.converged = true;
  try {
    const VectorXd after = estimating_equation(psi_fn, s, w, out.theta_hat);
    out.grad_norm = after.norm();
    out.objective_value = 0.5 * after.squaredNorm();
  } catch (const error&) {
    // the step may leave the support; the point itself is still the estimate
  }
  out.names = psi_fn.names();
  return out;
}

inline FitResult one_step(const EstimatingFunction& psi_fn, const CensoredSample& sample,
                          const VectorXd& start) {
  return one_step(psi_fn, prepare(sample), start);
}

// Splits a stacked MDPDE parameter back into (θ, γ) form.
inline FitResult as_mdpde_fit(const FitResult& r, const MdpdePsi& psi_fn) {
  FitResult out = r;
  const VectorXd par = r.theta_hat;
  out.theta_hat = psi_fn.theta_of(par);
  out.gamma_hat = psi_fn.gamma_of(par);
  out.alpha = psi_fn.config().alpha;
  out.variant = psi_fn.config().variant;
  return out;
}

}  // namespace cdpd
