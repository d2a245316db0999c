#pragma once

// Small unconstrained minimizer: BFGS with Armijo backtracking, then Newton
// polishing on the gradient (finite-difference Hessian of the analytic
// gradient) so tight gradient tolerances are reachable. Points where the
// objective throws cdpd::domain_error / overflow_error count as +inf.

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <limits>

#include "cdpd/error.hpp"

namespace cdpd {

struct MinimizeOptions {
  double tolerance = 1e-8;   // on stop_norm(x, g)
  int max_iterations = 500;  // BFGS iterations; polishing adds at most 50
  bool polish = true;
};

struct MinimizeResult {
  Eigen::VectorXd x;
  double value = std::numeric_limits<double>::infinity();
  Eigen::VectorXd gradient;
  double stop_norm = std::numeric_limits<double>::infinity();
  int iterations = 0;
  bool converged = false;
};

struct Objective {
  std::function<double(const Eigen::VectorXd&)> value;
  std::function<Eigen::VectorXd(const Eigen::VectorXd&)> gradient;
  // Convergence measure; defaults to the 2-norm of the gradient. Lets the
  // caller test a gradient in different coordinates than the optimizer's.
  std::function<double(const Eigen::VectorXd&, const Eigen::VectorXd&)> stop_norm;
};

namespace detail {

inline double safe_value(const Objective& f, const Eigen::VectorXd& x) {
  if (!x.allFinite()) return std::numeric_limits<double>::infinity();
  try {
    const double v = f.value(x);
    return std::isfinite(v) ? v : std::numeric_limits<double>::infinity();
  } catch (const domain_error&) {
    return std::numeric_limits<double>::infinity();
  } catch (const overflow_error&) {
    return std::numeric_limits<double>::infinity();
  }
}

inline double stop_measure(const Objective& f, const Eigen::VectorXd& x,
                           const Eigen::VectorXd& g) {
  return f.stop_norm ? f.stop_norm(x, g) : g.norm();
}

}  // namespace detail

inline MinimizeResult minimize(const Objective& f, const Eigen::VectorXd& x0,
                               const MinimizeOptions& opt = {}) {
  using Eigen::MatrixXd;
  using Eigen::VectorXd;
  const Eigen::Index n = x0.size();
  MinimizeResult r;
  r.x = x0;
  r.value = detail::safe_value(f, x0);
  if (!std::isfinite(r.value)) throw domain_error("starting point is outside the parameter space");
  r.gradient = f.gradient(x0);
  r.stop_norm = detail::stop_measure(f, r.x, r.gradient);

  MatrixXd hinv = MatrixXd::Identity(n, n);
  bool scaled = false;
  int stall = 0;
  for (int it = 0; it < opt.max_iterations && r.stop_norm > opt.tolerance; ++it) {
    r.iterations = it + 1;
    VectorXd dir = -hinv * r.gradient;
    double slope = r.gradient.dot(dir);
    if (!(slope < 0.0)) {
      hinv.setIdentity();
      dir = -r.gradient;
      slope = -r.gradient.squaredNorm();
    }
    double step = 1.0;
    VectorXd xn;
    double fn = std::numeric_limits<double>::infinity();
    bool accepted = false;
    for (int k = 0; k < 60; ++k) {
      xn = r.x + step * dir;
      fn = detail::safe_value(f, xn);
      if (fn <= r.value + 1e-4 * step * slope) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) {
      // Curvature model is stale; retry once along steepest descent.
      if (!hinv.isIdentity()) {
        hinv.setIdentity();
        continue;
      }
      break;
    }
    const VectorXd gn = f.gradient(xn);
    const VectorXd s = xn - r.x;
    const VectorXd y = gn - r.gradient;
    const double sy = s.dot(y);
    if (sy > 1e-12 * s.norm() * y.norm()) {
      if (!scaled) {
        hinv *= sy / y.squaredNorm();
        scaled = true;
      }
      const double rho = 1.0 / sy;
      const MatrixXd v = MatrixXd::Identity(n, n) - rho * s * y.transpose();
      hinv = v * hinv * v.transpose() + rho * s * s.transpose();
    }
    stall = (r.value - fn <= 1e-15 * (1.0 + std::abs(r.value))) ? stall + 1 : 0;
    r.x = xn;
    r.value = fn;
    r.gradient = gn;
    r.stop_norm = detail::stop_measure(f, r.x, r.gradient);
    if (stall >= 3) break;
  }

  if (opt.polish && r.stop_norm > opt.tolerance) {
    // Newton on ∇f = 0 with a gradient-norm merit function.
    for (int it = 0; it < 50 && r.stop_norm > opt.tolerance; ++it) {
      MatrixXd h(n, n);
      VectorXd xp = r.x, xm = r.x;
      bool ok = true;
      for (Eigen::Index k = 0; k < n && ok; ++k) {
        const double e = 1e-6 * (1.0 + std::abs(r.x(k)));
        xp(k) = r.x(k) + e;
        xm(k) = r.x(k) - e;
        try {
          h.col(k) = (f.gradient(xp) - f.gradient(xm)) / (2.0 * e);
        } catch (const domain_error&) {
          ok = false;
        } catch (const overflow_error&) {
          ok = false;
        }
        xp(k) = xm(k) = r.x(k);
      }
      if (!ok || !h.allFinite()) break;
      h = 0.5 * (h + h.transpose());
      Eigen::LDLT<MatrixXd> ldlt(h);
      VectorXd dir;
      if (ldlt.info() == Eigen::Success && ldlt.isPositive() && (ldlt.vectorD().array() > 0).all()) {
        dir = -ldlt.solve(r.gradient);
      } else {
        const double shift = 1e-6 * (1.0 + h.diagonal().cwiseAbs().maxCoeff());
        Eigen::SelfAdjointEigenSolver<MatrixXd> eig(h);
        const VectorXd lam = eig.eigenvalues().cwiseAbs().cwiseMax(shift);
        dir = -eig.eigenvectors() * (eig.eigenvectors().transpose() * r.gradient).cwiseQuotient(lam);
      }
      double step = 1.0;
      bool moved = false;
      for (int k = 0; k < 30; ++k) {
        const VectorXd xn = r.x + step * dir;
        const double fn = detail::safe_value(f, xn);
        if (std::isfinite(fn)) {
          const VectorXd gn = f.gradient(xn);
          const double sn = detail::stop_measure(f, xn, gn);
          if (sn < r.stop_norm && fn <= r.value + 1e-8 * (1.0 + std::abs(r.value))) {
            r.x = xn;
            r.value = fn;
            r.gradient = gn;
            r.stop_norm = sn;
            moved = true;
            break;
          }
        }
        step *= 0.5;
      }
      ++r.iterations;
      if (!moved) break;
    }
  }
  r.converged = r.stop_norm <= opt.tolerance;
  return r;
}

}  // namespace cdpd
