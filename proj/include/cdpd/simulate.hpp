#pragma once

// Monte Carlo harness: exponential lifetimes with a normal covariate,
// exponential censoring calibrated to a target rate, optional gross-error
// contamination, MDPDE fits over an α grid, bias / MSE / efficiency.

#include <Eigen/Dense>
#include <boost/math/tools/roots.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <limits>
#include <optional>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "cdpd/dpd.hpp"
#include "cdpd/error.hpp"
#include "cdpd/estimate.hpp"
#include "cdpd/models.hpp"
#include "cdpd/parallel.hpp"
#include "cdpd/quadrature.hpp"
#include "cdpd/survival_data.hpp"

namespace cdpd {

enum class ContaminationChannel { both, response, covariate };
enum class CensoringMode { per_record, marginal };

inline const char* channel_name(ContaminationChannel c) {
  switch (c) {
    case ContaminationChannel::both:
      return "both";
    case ContaminationChannel::response:
      return "response";
    case ContaminationChannel::covariate:
      return "covariate";
  }
  return "?";
}

inline ContaminationChannel parse_channel(const std::string& s) {
  if (s == "both") return ContaminationChannel::both;
  if (s == "response") return ContaminationChannel::response;
  if (s == "covariate") return ContaminationChannel::covariate;
  throw validation_error("unknown contamination channel '" + s +
                         "' (expected both, response or covariate)");
}

inline const char* censoring_mode_name(CensoringMode m) {
  return m == CensoringMode::per_record ? "per-record" : "marginal";
}

inline CensoringMode parse_censoring_mode(const std::string& s) {
  if (s == "per-record") return CensoringMode::per_record;
  if (s == "marginal") return CensoringMode::marginal;
  throw validation_error("unknown censoring mode '" + s + "' (expected per-record or marginal)");
}

struct SimDesign {
  Index n = 100;
  int replications = 1000;
  double theta0 = 1.0;
  double gamma0 = 5.0;
  std::string model = "lrm-exp";  // lrm-exp or erm, one covariate
  double censoring = 0.10;
  CensoringMode censoring_mode = CensoringMode::per_record;
  double contamination = 0.0;
  ContaminationChannel channel = ContaminationChannel::both;
  double contamination_theta = 5.0;    // outlying responses: Exp with mean m(5, x)
  double contamination_x_mean = 10.0;  // outlying covariates: N(10, 1)
  std::vector<double> alphas{0.0, 0.01, 0.1, 0.3, 0.5, 0.7, 1.0};
  Variant variant = Variant::joint;
  std::uint64_t seed = 1;
  SolverConfig solver{1e-8, 500, 1, 0.1, 0};
  double max_failure_rate = 0.02;

  void validate() const {
    if (n < 10) throw validation_error("simulation needs n >= 10");
    if (replications < 1) throw validation_error("replications must be >= 1");
    if (model != "lrm-exp" && model != "erm") {
      throw validation_error("simulation supports models lrm-exp and erm, got '" + model + "'");
    }
    if (!(censoring >= 0.0 && censoring < 1.0)) {
      throw validation_error("censoring proportion must be in [0, 1)");
    }
    if (!(contamination >= 0.0 && contamination <= 1.0)) {
      throw validation_error("contamination proportion must be in [0, 1]");
    }
    if (alphas.empty()) throw validation_error("alpha grid is empty");
    for (double a : alphas) {
      if (!std::isfinite(a) || a < 0.0) throw validation_error("alpha grid values must be >= 0");
    }
    if (model == "lrm-exp" && !(theta0 > 0.0)) {
      throw validation_error("lrm-exp simulation needs theta0 > 0");
    }
    solver.validate();
  }
};

// Mean of Y | X = x for the one-covariate simulation models.
inline double simulation_mean(const std::string& model, double theta, double x) {
  return model == "erm" ? std::exp(theta * x) : theta * x;
}

// With C ~ Exp(mean τ), Y ~ Exp(mean μ): P(Y > C) = μ/(τ + μ); solved for τ.
inline double calibrate_tau(double theta, double x, double target) {
  if (!(target > 0.0 && target < 1.0)) {
    throw validation_error("censoring target must be in (0, 1), got " + std::to_string(target));
  }
  const double mu = theta * x;
  if (!(mu > 0.0)) throw domain_error("calibrate_tau needs theta*x > 0");
  return mu * (1.0 - target) / target;
}

// Single τ with E_X[μ(X)/(τ + μ(X))] = target, X ~ N(γ0, 1).
inline double calibrate_marginal_tau(const SimDesign& d) {
  if (!(d.censoring > 0.0 && d.censoring < 1.0)) {
    throw validation_error("censoring target must be in (0, 1)");
  }
  const auto& rule = gauss_hermite(kDefaultHermiteNodes);
  auto rate = [&](double tau) {
    double acc = 0.0, mass = 0.0;
    for (Index k = 0; k < rule.nodes.size(); ++k) {
      const double mu = simulation_mean(d.model, d.theta0, d.gamma0 + rule.nodes(k));
      if (!(mu > 0.0)) continue;
      acc += rule.weights(k) * mu / (tau + mu);
      mass += rule.weights(k);
    }
    return acc / mass - d.censoring;
  };
  double lo = 1e-12, hi = 1.0;
  while (rate(hi) > 0.0) {
    hi *= 2.0;
    if (hi > 1e300) throw domain_error("cannot calibrate censoring rate");
  }
  boost::uintmax_t iters = 200;
  const auto root = boost::math::tools::toms748_solve(
      rate, lo, hi, boost::math::tools::eps_tolerance<double>(50), iters);
  return 0.5 * (root.first + root.second);
}

// Replication `rep` of the design; a fixed (seed, rep) gives the same sample.
// Records 0 .. k-1 (k = round(contamination · n)) are the contaminated ones.
inline CensoredSample generate(const SimDesign& d, std::uint64_t rep,
                               std::optional<double> marginal_tau = std::nullopt) {
  d.validate();
  auto rng = detail::substream(d.seed, rep);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::exponential_distribution<double> unit_exp(1.0);
  const bool positive_mean = d.model == "lrm-exp";
  const Index k = static_cast<Index>(std::llround(d.contamination * static_cast<double>(d.n)));
  double tau_marginal = 0.0;
  if (d.censoring > 0.0 && d.censoring_mode == CensoringMode::marginal) {
    tau_marginal = marginal_tau ? *marginal_tau : calibrate_marginal_tau(d);
  }

  CensoredSample s;
  s.z.resize(d.n);
  s.delta.resize(d.n);
  s.x.resize(d.n, 1);
  s.covariate_names = {"x"};
  for (Index i = 0; i < d.n; ++i) {
    const bool outlier = i < k;
    const bool outlying_x = outlier && d.channel != ContaminationChannel::response;
    const bool outlying_y = outlier && d.channel != ContaminationChannel::covariate;
    const double theta_y = outlying_y ? d.contamination_theta : d.theta0;
    const double x_mean = outlying_x ? d.contamination_x_mean : d.gamma0;
    double x = x_mean + normal(rng);
    int draws = 1;
    while (positive_mean &&
           (simulation_mean(d.model, d.theta0, x) <= 0.0 ||
            simulation_mean(d.model, theta_y, x) <= 0.0)) {
      if (++draws > 100) {
        throw domain_error("covariate resampling exceeded 100 draws (x'theta <= 0)");
      }
      x = x_mean + normal(rng);
    }
    const double y = simulation_mean(d.model, theta_y, x) * unit_exp(rng);
    double c = std::numeric_limits<double>::infinity();
    if (d.censoring > 0.0) {
      const double tau = d.censoring_mode == CensoringMode::marginal
                             ? tau_marginal
                             : simulation_mean(d.model, d.theta0, x) * (1.0 - d.censoring) /
                                   d.censoring;
      c = tau * unit_exp(rng);
    }
    s.x(i, 0) = x;
    s.z(i) = std::min(y, c);
    s.delta(i) = y <= c ? 1 : 0;
  }
  return s;
}

struct MonteCarloRow {
  double alpha = 0.0;
  VectorXd bias;  // (θ, γ)
  VectorXd mse;
  VectorXd mae;
  double total_abs_bias = 0.0;
  double total_mse = 0.0;
  double total_mae = 0.0;  // Σ mean |estimate - truth|
  double efficiency = 1.0;
  int successes = 0;
  int failures = 0;
};

struct MonteCarloReport {
  SimDesign design;
  std::vector<MonteCarloRow> rows;
  double mean_censored_fraction = 0.0;
  int failed_fits = 0;
  int total_fits = 0;
  double failure_rate() const {
    return total_fits ? static_cast<double>(failed_fits) / total_fits : 0.0;
  }
  const MonteCarloRow& row(double alpha) const {
    for (const auto& r : rows) {
      if (std::abs(r.alpha - alpha) < 1e-12) return r;
    }
    throw validation_error("alpha " + std::to_string(alpha) + " is not in the report");
  }
};

// Estimates per replication and α: θ̂ then γ̂ (joint variant).
struct ReplicationFits {
  std::vector<std::optional<VectorXd>> estimates;
  double censored_fraction = 0.0;
};

inline ReplicationFits fit_replication(const SimDesign& d, const Model& model,
                                       const CensoredSample& sample) {
  ReplicationFits out;
  out.censored_fraction = sample.censored_fraction();
  out.estimates.resize(d.alphas.size());
  const WeightedSample ws = prepare(sample);
  std::optional<InitialValue> mle;
  // α = 0 first so it can seed the others.
  std::vector<std::size_t> order(d.alphas.size());
  for (std::size_t a = 0; a < order.size(); ++a) order[a] = a;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t l, std::size_t r) { return d.alphas[l] < d.alphas[r]; });
  for (std::size_t a : order) {
    const DpdConfig cfg{d.alphas[a], d.variant};
    try {
      std::optional<InitialValue> init;
      if (cfg.alpha > 0.0 && mle) init = mle;
      const FitResult fit = fit_mdpde(model, ws, cfg, d.solver, init);
      if (cfg.alpha == 0.0) mle = InitialValue{fit.theta_hat, fit.gamma_hat};
      out.estimates[a] = fit.parameters();
    } catch (const error&) {
      // counted as a failed fit
    }
  }
  return out;
}

inline MonteCarloReport summarize(const SimDesign& d, const std::vector<ReplicationFits>& reps) {
  MonteCarloReport rep;
  rep.design = d;
  VectorXd truth(d.variant == Variant::joint ? 2 : 1);
  truth(0) = d.theta0;
  if (d.variant == Variant::joint) truth(1) = d.gamma0;
  double cens = 0.0;
  for (const auto& r : reps) cens += r.censored_fraction;
  rep.mean_censored_fraction = reps.empty() ? 0.0 : cens / static_cast<double>(reps.size());
  for (std::size_t a = 0; a < d.alphas.size(); ++a) {
    MonteCarloRow row;
    row.alpha = d.alphas[a];
    VectorXd sum = VectorXd::Zero(truth.size()), sq = sum, ab = sum;
    for (const auto& r : reps) {
      if (!r.estimates[a]) {
        ++row.failures;
        continue;
      }
      const VectorXd e = *r.estimates[a] - truth;
      sum += e;
      sq += e.cwiseProduct(e);
      ab += e.cwiseAbs();
      ++row.successes;
    }
    if (row.successes > 0) {
      const double m = row.successes;
      row.bias = sum / m;
      row.mse = sq / m;
      row.mae = ab / m;
    } else {
      row.bias = row.mse = row.mae =
          VectorXd::Constant(truth.size(), std::numeric_limits<double>::quiet_NaN());
    }
    row.total_abs_bias = row.bias.cwiseAbs().sum();
    row.total_mse = row.mse.sum();
    row.total_mae = row.mae.sum();
    rep.failed_fits += row.failures;
    rep.total_fits += row.failures + row.successes;
    rep.rows.push_back(row);
  }
  // Efficiency relative to the smallest α in the grid (α = 0 when present).
  std::size_t base = 0;
  for (std::size_t a = 1; a < rep.rows.size(); ++a) {
    if (rep.rows[a].alpha < rep.rows[base].alpha) base = a;
  }
  for (auto& row : rep.rows) row.efficiency = rep.rows[base].total_mse / row.total_mse;
  return rep;
}

inline MonteCarloReport run_study(const SimDesign& d, bool enforce_failure_limit = true) {
  d.validate();
  std::optional<double> tau;
  if (d.censoring > 0.0 && d.censoring_mode == CensoringMode::marginal) {
    tau = calibrate_marginal_tau(d);
  }
  const auto model = make_model(d.model, 1);
  std::vector<ReplicationFits> reps(static_cast<std::size_t>(d.replications));
  parallel_for(reps.size(), [&](std::size_t r) {
    reps[r] = fit_replication(d, *model, generate(d, r, tau));
  });
  MonteCarloReport rep = summarize(d, reps);
  if (enforce_failure_limit && rep.failure_rate() > d.max_failure_rate) {
    std::ostringstream os;
    os << "study failed: " << rep.failed_fits << " of " << rep.total_fits
       << " fits did not converge (limit " << d.max_failure_rate * 100.0 << "%)";
    throw study_error(os.str());
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Output

inline void write_report_csv(std::ostream& os, const std::vector<MonteCarloReport>& reports) {
  os << std::setprecision(10);
  os << "model,n,replications,seed,censoring,censoring_mode,contamination,channel,"
        "mean_censored_fraction,alpha,bias_theta,bias_gamma,mse_theta,mse_gamma,"
        "total_abs_bias,total_mse,total_mae,relative_efficiency,successes,failures\n";
  for (const auto& r : reports) {
    const auto& d = r.design;
    for (const auto& row : r.rows) {
      const bool joint = row.bias.size() > 1;
      os << d.model << "," << d.n << "," << d.replications << "," << d.seed << "," << d.censoring
         << "," << censoring_mode_name(d.censoring_mode) << "," << d.contamination << ","
         << channel_name(d.channel) << "," << r.mean_censored_fraction << "," << row.alpha << ","
         << row.bias(0) << "," << (joint ? row.bias(1) : 0.0) << "," << row.mse(0) << ","
         << (joint ? row.mse(1) : 0.0) << "," << row.total_abs_bias << "," << row.total_mse
         << "," << row.total_mae << "," << row.efficiency << "," << row.successes << ","
         << row.failures << "\n";
    }
  }
}

namespace detail {

inline void table_header(std::ostream& os, const std::string& left, const std::vector<double>& alphas) {
  os << std::left << std::setw(24) << left << std::right;
  for (double a : alphas) os << std::setw(10) << std::fixed << std::setprecision(2) << a;
  os << "\n" << std::string(24 + 10 * alphas.size(), '-') << "\n";
}

inline std::string pct(double v) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(0) << 100.0 * v << "%";
  return os.str();
}

}  // namespace detail

// Clean-data table: total abs. bias, total MSE, efficiency by censoring level.
inline void write_clean_table(std::ostream& os, const std::vector<MonteCarloReport>& reports) {
  if (reports.empty()) return;
  const auto& alphas = reports.front().design.alphas;
  os << "Summary measures, no contamination\n";
  detail::table_header(os, "measure, cens. \\ alpha", alphas);
  auto line = [&](const std::string& label, const MonteCarloReport& r, auto get) {
    os << std::left << std::setw(24) << label << std::right;
    for (const auto& row : r.rows) os << std::setw(10) << get(row);
    os << "\n";
  };
  for (const auto& r : reports) {
    line("total abs. bias " + detail::pct(r.design.censoring), r, [](const MonteCarloRow& row) {
      std::ostringstream s;
      s << std::fixed << std::setprecision(4) << row.total_abs_bias;
      return s.str();
    });
  }
  for (const auto& r : reports) {
    line("total MSE " + detail::pct(r.design.censoring), r, [](const MonteCarloRow& row) {
      std::ostringstream s;
      s << std::fixed << std::setprecision(4) << row.total_mse;
      return s.str();
    });
  }
  for (const auto& r : reports) {
    line("rel. efficiency " + detail::pct(r.design.censoring), r,
         [](const MonteCarloRow& row) { return detail::pct(row.efficiency); });
  }
  os << "\n";
}

// One measure across (censoring, contamination) cells.
inline void write_contamination_table(std::ostream& os, const std::string& title,
                                      const std::vector<MonteCarloReport>& reports,
                                      bool mse) {
  if (reports.empty()) return;
  os << title << "\n";
  detail::table_header(os, "cens. / cont. \\ alpha", reports.front().design.alphas);
  for (const auto& r : reports) {
    os << std::left << std::setw(24)
       << (detail::pct(r.design.censoring) + " / " + detail::pct(r.design.contamination))
       << std::right;
    for (const auto& row : r.rows) {
      os << std::setw(10) << std::fixed << std::setprecision(3)
         << (mse ? row.total_mse : row.total_abs_bias);
    }
    os << "\n";
  }
  os << "\n";
}

}  // namespace cdpd
