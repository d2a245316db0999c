#pragma once

// Plug-in estimates of the variance functionals in the central limit
// theorem for Stute-weighted sums, and the resulting sandwich covariance
// Λ⁻¹ Σ_ψ Λ⁻ᵀ / n of an M-estimator.
//
// Conventions (sorted sample, ties: events first):
//   at_risk(z)  = #{j : Z_j >= z}            (left-continuous 1 - Ĝ_Z, times n)
//   γ0(z)       = exp Σ_{δ_k = 0, Z_k < z} 1 / at_risk(Z_k)
//   S(z)        = Σ_{δ_j = 1, Z_j > z} ψ_j γ0(Z_j)
//   γ1(z)       = S(z) / at_risk(z)
//   γ2(z)       = Σ_{δ_k = 0, Z_k < z} S(Z_k) / at_risk(Z_k)²
// and every evaluation point is capped at the largest uncensored Z.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <vector>

#include "cdpd/dpd.hpp"
#include "cdpd/error.hpp"
#include "cdpd/estimate.hpp"
#include "cdpd/survival_data.hpp"

namespace cdpd {

struct VarianceFunctionals {
  // Values at the sorted records.
  VectorXd gamma0;  // n
  MatrixXd gamma1;  // n × d
  MatrixXd gamma2;  // n × d
  // Sub-distribution P̂(Z <= z, δ = 0) (the censored part of Ĝ_Z).
  StepFunction g_z0;
  // Point masses of the uncensored sub-distribution: 1/n at each event.
  VectorXd g11;

  // Evaluation at an arbitrary z (capped at the largest uncensored Z).
  double gamma0_at(double z) const { return eval_scalar(z); }
  VectorXd gamma1_at(double z) const { return eval_row(z, true); }
  VectorXd gamma2_at(double z) const { return eval_row(z, false); }

  // Internal data for evaluation.
  VectorXd z_sorted;
  VectorXi delta_sorted;
  VectorXd at_risk;
  MatrixXd weighted_psi;  // ψ_j γ0_j δ_j
  double cap = 0.0;

 private:
  double eval_scalar(double z) const {
    z = std::min(z, cap);
    double acc = 0.0;
    for (Index k = 0; k < z_sorted.size() && z_sorted(k) < z; ++k) {
      if (delta_sorted(k) == 0) acc += 1.0 / at_risk(k);
    }
    return std::exp(acc);
  }
  VectorXd eval_row(double z, bool first) const {
    z = std::min(z, cap);
    const Index d = weighted_psi.cols();
    auto tail_sum = [&](double v) {
      VectorXd s = VectorXd::Zero(d);
      for (Index j = 0; j < z_sorted.size(); ++j) {
        if (z_sorted(j) > v) s += weighted_psi.row(j).transpose();
      }
      return s;
    };
    if (first) {
      double risk = 0.0;
      for (Index j = 0; j < z_sorted.size(); ++j) risk += z_sorted(j) >= z ? 1.0 : 0.0;
      if (risk == 0.0) return VectorXd::Zero(d);
      return tail_sum(z) / risk;
    }
    VectorXd acc = VectorXd::Zero(d);
    for (Index k = 0; k < z_sorted.size() && z_sorted(k) < z; ++k) {
      if (delta_sorted(k) == 0) acc += tail_sum(z_sorted(k)) / (at_risk(k) * at_risk(k));
    }
    return acc;
  }
};

// psi: n × d matrix of ψ at the sorted records.
inline VarianceFunctionals estimate_functionals(const SortedSample& s, const MatrixXd& psi) {
  const Index n = s.n();
  if (psi.rows() != n) throw validation_error("psi must have one row per record");
  const Index d = psi.cols();
  VarianceFunctionals f;
  f.z_sorted = s.z;
  f.delta_sorted = s.delta;
  f.at_risk.resize(n);
  f.gamma0.resize(n);
  f.gamma1 = MatrixXd::Zero(n, d);
  f.gamma2 = MatrixXd::Zero(n, d);
  f.g11 = VectorXd::Zero(n);
  f.cap = 0.0;
  for (Index i = 0; i < n; ++i) {
    if (s.delta(i) == 1) {
      f.cap = std::max(f.cap, s.z(i));
      f.g11(i) = 1.0 / static_cast<double>(n);
    }
  }

  // Tie groups [begin, end) share z.
  std::vector<Index> group_begin(static_cast<std::size_t>(n)), group_end(static_cast<std::size_t>(n));
  for (Index i = 0; i < n;) {
    Index j = i;
    while (j < n && s.z(j) == s.z(i)) ++j;
    for (Index k = i; k < j; ++k) {
      group_begin[static_cast<std::size_t>(k)] = i;
      group_end[static_cast<std::size_t>(k)] = j;
    }
    i = j;
  }
  for (Index i = 0; i < n; ++i) {
    f.at_risk(i) = static_cast<double>(n - group_begin[static_cast<std::size_t>(i)]);
  }

  // γ0 at each record: censored mass strictly below its z.
  {
    double acc = 0.0;
    for (Index i = 0; i < n;) {
      const Index end = group_end[static_cast<std::size_t>(i)];
      for (Index k = i; k < end; ++k) f.gamma0(k) = std::exp(acc);
      for (Index k = i; k < end; ++k) {
        if (s.delta(k) == 0) acc += 1.0 / f.at_risk(k);
      }
      i = end;
    }
  }

  f.weighted_psi = MatrixXd::Zero(n, d);
  for (Index j = 0; j < n; ++j) {
    if (s.delta(j) == 1) f.weighted_psi.row(j) = psi.row(j) * f.gamma0(j);
  }
  // strictly_above.row(i) = Σ_{j: Z_j > Z_i} weighted_psi_j
  MatrixXd strictly_above = MatrixXd::Zero(n, d);
  {
    VectorXd suffix = VectorXd::Zero(d);
    for (Index i = n - 1; i >= 0;) {
      const Index begin = group_begin[static_cast<std::size_t>(i)];
      for (Index k = begin; k <= i; ++k) strictly_above.row(k) = suffix.transpose();
      for (Index k = begin; k <= i; ++k) suffix += f.weighted_psi.row(k).transpose();
      i = begin - 1;
    }
  }
  for (Index i = 0; i < n; ++i) f.gamma1.row(i) = strictly_above.row(i) / f.at_risk(i);
  {
    VectorXd acc = VectorXd::Zero(d);
    for (Index i = 0; i < n;) {
      const Index end = group_end[static_cast<std::size_t>(i)];
      for (Index k = i; k < end; ++k) f.gamma2.row(k) = acc.transpose();
      for (Index k = i; k < end; ++k) {
        if (s.delta(k) == 0) acc += strictly_above.row(k).transpose() / (f.at_risk(k) * f.at_risk(k));
      }
      i = end;
    }
  }

  std::vector<double> jumps, values;
  double cum = 0.0;
  for (Index i = 0; i < n; ++i) {
    if (s.delta(i) != 0) continue;
    cum += 1.0 / static_cast<double>(n);
    if (!jumps.empty() && jumps.back() == s.z(i)) {
      values.back() = cum;
    } else {
      jumps.push_back(s.z(i));
      values.push_back(cum);
    }
  }
  f.g_z0 = StepFunction{jumps, values, 0.0};
  return f;
}

// η_i = ψ_i γ0_i δ_i + γ1_i (1 - δ_i) - γ2_i, one row per record.
inline MatrixXd influence_terms(const SortedSample& s, const MatrixXd& psi,
                                const VarianceFunctionals& f) {
  const Index n = s.n();
  MatrixXd eta(n, psi.cols());
  for (Index i = 0; i < n; ++i) {
    eta.row(i) = s.delta(i) == 1 ? VectorXd(psi.row(i).transpose() * f.gamma0(i))
                                 : VectorXd(f.gamma1.row(i).transpose());
    eta.row(i) -= f.gamma2.row(i);
  }
  return eta;
}

// Σ̂_ψ: empirical covariance (divisor n) of the η_i.
inline MatrixXd sigma_psi(const SortedSample& s, const MatrixXd& psi,
                          const VarianceFunctionals& f) {
  const MatrixXd eta = influence_terms(s, psi, f);
  const VectorXd mean = eta.colwise().mean().transpose();
  const MatrixXd centered = eta.rowwise() - mean.transpose();
  MatrixXd sigma = centered.transpose() * centered / static_cast<double>(s.n());
  return 0.5 * (sigma + sigma.transpose());
}

struct SandwichCovariance {
  MatrixXd lambda;
  MatrixXd sigma;
  MatrixXd cov;
  VectorXd standard_errors;
};

inline SandwichCovariance sandwich(const EstimatingFunction& psi_fn, const WeightedSample& ws,
                                   const VectorXd& par) {
  const auto& s = ws.sorted;
  const MatrixXd psi = psi_fn.values(s, par);
  SandwichCovariance out;
  out.lambda = psi_fn.weighted_jacobian(s, ws.weights.w, par);
  out.sigma = sigma_psi(s, psi, estimate_functionals(s, psi));
  Eigen::FullPivLU<MatrixXd> lu(out.lambda);
  if (!out.lambda.allFinite() || !lu.isInvertible()) {
    throw singular_matrix_error(
        "Lambda is singular at the estimate; try a larger sample or a different alpha");
  }
  const MatrixXd inv = lu.inverse();
  out.cov = inv * out.sigma * inv.transpose() / static_cast<double>(s.n());
  out.cov = 0.5 * (out.cov + out.cov.transpose());
  out.standard_errors = out.cov.diagonal().cwiseMax(0.0).cwiseSqrt();
  return out;
}

inline SandwichCovariance sandwich(const Model& model, const WeightedSample& ws,
                                   const FitResult& fit, const DpdConfig& cfg) {
  const MdpdePsi psi_fn(model, cfg);
  return sandwich(psi_fn, ws, stack_parameters(fit.theta_hat, fit.gamma_hat, cfg.variant));
}

inline SandwichCovariance sandwich(const Model& model, const CensoredSample& sample,
                                   const FitResult& fit, const DpdConfig& cfg) {
  return sandwich(model, prepare(sample), fit, cfg);
}

}  // namespace cdpd
