#pragma once

#include <Eigen/Dense>
#include <boost/math/quadrature/gauss_kronrod.hpp>
#include <boost/math/quadrature/tanh_sinh.hpp>

#include <cmath>
#include <limits>
#include <map>
#include <mutex>
#include <string>

#include "cdpd/error.hpp"

namespace cdpd {

inline constexpr int kDefaultHermiteNodes = 64;

// Gauss–Hermite rule for expectations under the standard normal:
// E[h(Z)] ≈ Σ weights[k] h(nodes[k]), Σ weights = 1.
struct GaussHermiteRule {
  Eigen::VectorXd nodes;
  Eigen::VectorXd weights;
};

namespace detail {

// Golub–Welsch on the Jacobi matrix of the probabilists' Hermite
// polynomials (zero diagonal, off-diagonal sqrt(k)).
inline GaussHermiteRule compute_gauss_hermite(int n) {
  Eigen::MatrixXd jacobi = Eigen::MatrixXd::Zero(n, n);
  for (int k = 1; k < n; ++k) {
    jacobi(k, k - 1) = jacobi(k - 1, k) = std::sqrt(static_cast<double>(k));
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(jacobi);
  GaussHermiteRule rule;
  rule.nodes = eig.eigenvalues();
  rule.weights = eig.eigenvectors().row(0).transpose().array().square();
  // Symmetrize: the exact rule is symmetric, the eigen solver is not quite.
  for (int k = 0; k < n / 2; ++k) {
    const int m = n - 1 - k;
    const double node = 0.5 * (rule.nodes(m) - rule.nodes(k));
    const double weight = 0.5 * (rule.weights(m) + rule.weights(k));
    rule.nodes(k) = -node;
    rule.nodes(m) = node;
    rule.weights(k) = rule.weights(m) = weight;
  }
  if (n % 2 == 1) rule.nodes(n / 2) = 0.0;
  rule.weights /= rule.weights.sum();
  return rule;
}

}  // namespace detail

// Rules are computed once per node count and cached for the process.
inline const GaussHermiteRule& gauss_hermite(int n = kDefaultHermiteNodes) {
  if (n < 1 || n > 512) {
    throw validation_error("Gauss-Hermite node count must be in [1, 512], got " +
                           std::to_string(n));
  }
  static std::mutex mutex;
  static std::map<int, GaussHermiteRule> cache;
  std::lock_guard<std::mutex> lock(mutex);
  auto it = cache.find(n);
  if (it == cache.end()) it = cache.emplace(n, detail::compute_gauss_hermite(n)).first;
  return it->second;
}

struct QuadratureConfig {
  int hermite_nodes = kDefaultHermiteNodes;
  double tolerance = 1e-12;  // relative, adaptive 1-D rules
  unsigned max_depth = 20;
};

// Adaptive Gauss–Kronrod over (lo, hi); either bound may be infinite.
template <class F>
double integrate(F&& f, double lo, double hi, const QuadratureConfig& cfg = {},
                 double* error_estimate = nullptr) {
  double err = 0.0;
  const double value = boost::math::quadrature::gauss_kronrod<double, 61>::integrate(
      f, lo, hi, cfg.max_depth, cfg.tolerance, &err);
  if (error_estimate) *error_estimate = err;
  return value;
}

// Tanh–sinh over the open interval (lo, hi); tolerates integrable endpoint
// singularities such as log(1 - t) at t = 1.
template <class F>
double integrate_open(F&& f, double lo, double hi, double tolerance = 1e-10) {
  static thread_local boost::math::quadrature::tanh_sinh<double> rule;
  return rule.integrate(f, lo, hi, tolerance);
}

}  // namespace cdpd
