#pragma once

// Censored samples, their Z-ordering, and the Kaplan–Meier/Stute jump
// weights that every estimator in the library integrates against.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <limits>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "cdpd/error.hpp"

namespace cdpd {

using Eigen::Index;
using CovariateMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Observed (Z, δ, X) records. δ = 1 marks an observed event.
struct CensoredSample {
  Eigen::VectorXd z;
  Eigen::VectorXi delta;
  CovariateMatrix x;
  std::vector<std::string> covariate_names;
  std::vector<std::string> ids;  // optional record labels, one per row

  Index n() const { return z.size(); }
  Index p() const { return x.cols(); }

  void validate() const {
    if (z.size() == 0) throw validation_error("sample is empty");
    if (delta.size() != z.size() || x.rows() != z.size()) {
      throw validation_error("z, delta and x must have the same number of rows");
    }
    if (x.cols() < 1) throw validation_error("at least one covariate is required");
    if (!ids.empty() && static_cast<Index>(ids.size()) != z.size()) {
      throw validation_error("ids must have one entry per row");
    }
    for (Index i = 0; i < z.size(); ++i) {
      if (!std::isfinite(z(i)) || z(i) <= 0.0) {
        throw validation_error("row " + std::to_string(i + 1) +
                               ": observed time must be finite and positive");
      }
      if (delta(i) != 0 && delta(i) != 1) {
        throw validation_error("row " + std::to_string(i + 1) + ": status must be 0 or 1");
      }
      for (Index j = 0; j < x.cols(); ++j) {
        if (!std::isfinite(x(i, j))) {
          throw validation_error("row " + std::to_string(i + 1) + ": covariate " +
                                 std::to_string(j + 1) + " is not finite");
        }
      }
    }
  }

  Index events() const { return delta.sum(); }

  double censored_fraction() const {
    return 1.0 - static_cast<double>(events()) / static_cast<double>(n());
  }

  // Copy without the rows whose id is listed.
  CensoredSample without_ids(const std::vector<std::string>& excluded) const {
    if (ids.empty()) throw validation_error("sample has no id column; cannot exclude by id");
    std::vector<Index> keep;
    for (Index i = 0; i < n(); ++i) {
      if (std::find(excluded.begin(), excluded.end(), ids[i]) == excluded.end()) keep.push_back(i);
    }
    return subset(keep);
  }

  CensoredSample subset(const std::vector<Index>& rows) const {
    CensoredSample out;
    out.z.resize(static_cast<Index>(rows.size()));
    out.delta.resize(static_cast<Index>(rows.size()));
    out.x.resize(static_cast<Index>(rows.size()), p());
    out.covariate_names = covariate_names;
    for (std::size_t k = 0; k < rows.size(); ++k) {
      const auto i = rows[k];
      out.z(k) = z(i);
      out.delta(k) = delta(i);
      out.x.row(k) = x.row(i);
      if (!ids.empty()) out.ids.push_back(ids[i]);
    }
    return out;
  }

  // Inserts a constant-one covariate column in front.
  CensoredSample with_intercept() const {
    CensoredSample out = *this;
    out.x.resize(n(), p() + 1);
    out.x.col(0).setOnes();
    out.x.rightCols(p()) = x;
    out.covariate_names.insert(out.covariate_names.begin(), "(intercept)");
    return out;
  }
};

// Records rearranged by ascending Z. Ties: events before censored
// observations, then original index.
struct SortedSample {
  std::vector<Index> order;  // order[i] = original row of the i-th order statistic
  Eigen::VectorXd z;
  Eigen::VectorXi delta;
  CovariateMatrix x;

  Index n() const { return z.size(); }
  Index p() const { return x.cols(); }
};

struct KmWeights {
  Eigen::VectorXd w;  // aligned with SortedSample order
  double total = 0.0;
};

inline SortedSample sort_sample(const CensoredSample& s) {
  const Index n = s.n();
  SortedSample out;
  out.order.resize(static_cast<std::size_t>(n));
  std::iota(out.order.begin(), out.order.end(), Index{0});
  std::sort(out.order.begin(), out.order.end(), [&](Index a, Index b) {
    if (s.z(a) != s.z(b)) return s.z(a) < s.z(b);
    if (s.delta(a) != s.delta(b)) return s.delta(a) > s.delta(b);
    return a < b;
  });
  out.z.resize(n);
  out.delta.resize(n);
  out.x.resize(n, s.p());
  for (Index i = 0; i < n; ++i) {
    const Index src = out.order[static_cast<std::size_t>(i)];
    out.z(i) = s.z(src);
    out.delta(i) = s.delta(src);
    out.x.row(i) = s.x.row(src);
  }
  return out;
}

// W_in = δ_[i]/(n-i+1) Π_{j<i} [(n-j)/(n-j+1)]^δ_[j]  (1-based i).
inline KmWeights km_weights(const SortedSample& s) {
  const Index n = s.n();
  KmWeights out;
  out.w = Eigen::VectorXd::Zero(n);
  double survivor = 1.0;
  for (Index i = 0; i < n; ++i) {
    const double at_risk = static_cast<double>(n - i);
    if (s.delta(i) == 1) {
      out.w(i) = survivor / at_risk;
      survivor *= (at_risk - 1.0) / at_risk;
    }
  }
  out.total = out.w.sum();
  return out;
}

// Sorted sample together with its Stute weights.
struct WeightedSample {
  SortedSample sorted;
  KmWeights weights;

  Index n() const { return sorted.n(); }
  Index p() const { return sorted.p(); }
};

inline WeightedSample prepare(const CensoredSample& s) {
  s.validate();
  WeightedSample out;
  out.sorted = sort_sample(s);
  out.weights = km_weights(out.sorted);
  return out;
}

// Ĝ(x0, y0) = Σ W_in I(X_[i] <= x0 componentwise, Z_(i) <= y0).
inline double stute_cdf(const SortedSample& s, const KmWeights& w,
                        const Eigen::Ref<const Eigen::VectorXd>& x0, double y0) {
  if (x0.size() != s.p()) throw validation_error("stute_cdf: covariate dimension mismatch");
  double sum = 0.0;
  for (Index i = 0; i < s.n() && s.z(i) <= y0; ++i) {
    if ((s.x.row(i).transpose().array() <= x0.array()).all()) sum += w.w(i);
  }
  return std::min(sum, 1.0);
}

// Right-continuous step function: value(t) = initial for t < jumps[0],
// values[k] for jumps[k] <= t < jumps[k+1].
struct StepFunction {
  std::vector<double> jumps;
  std::vector<double> values;
  double initial = 1.0;

  double operator()(double t) const {
    auto it = std::upper_bound(jumps.begin(), jumps.end(), t);
    if (it == jumps.begin()) return initial;
    return values[static_cast<std::size_t>(it - jumps.begin() - 1)];
  }
};

enum class SurvivalCurve { event, censoring };

// Product-limit survival estimate of Y (event) or C (censoring, δ -> 1-δ).
inline StepFunction marginal_km_survival(const SortedSample& s, SurvivalCurve which) {
  StepFunction out;
  const Index n = s.n();
  double survivor = 1.0;
  for (Index i = 0; i < n; ++i) {
    const int d = which == SurvivalCurve::event ? s.delta(i) : 1 - s.delta(i);
    if (d == 0) continue;
    survivor *= 1.0 - 1.0 / static_cast<double>(n - i);
    if (!out.jumps.empty() && out.jumps.back() == s.z(i)) {
      out.values.back() = survivor;
    } else {
      out.jumps.push_back(s.z(i));
      out.values.push_back(survivor);
    }
  }
  return out;
}

// Column selection for load_csv.
struct CsvSchema {
  std::string time_col;
  std::string status_col;
  std::vector<std::string> covariate_cols;
  std::string id_col;         // optional
  bool drop_missing = false;  // otherwise rows with missing cells are rejected
};

struct CsvLoadReport {
  std::size_t rows_read = 0;
  std::size_t rows_dropped = 0;
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  bool quoted = false;
  for (std::size_t k = 0; k < line.size(); ++k) {
    const char c = line[k];
    if (quoted) {
      if (c == '"' && k + 1 < line.size() && line[k + 1] == '"') {
        cell += '"';
        ++k;
      } else if (c == '"') {
        quoted = false;
      } else {
        cell += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      cells.push_back(cell);
      cell.clear();
    } else if (c != '\r') {
      cell += c;
    }
  }
  cells.push_back(cell);
  for (auto& s : cells) {
    const auto b = s.find_first_not_of(" \t");
    const auto e = s.find_last_not_of(" \t");
    s = b == std::string::npos ? std::string{} : s.substr(b, e - b + 1);
  }
  return cells;
}

inline bool is_missing(const std::string& cell) {
  return cell.empty() || cell == "NA" || cell == "NaN" || cell == "nan" || cell == ".";
}

inline double parse_number(const std::string& cell, std::size_t row, const std::string& col) {
  std::size_t used = 0;
  double value = 0.0;
  try {
    value = std::stod(cell, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != cell.size() || cell.empty()) {
    throw validation_error("row " + std::to_string(row) + ", column '" + col +
                           "': malformed numeric cell '" + cell + "'");
  }
  return value;
}

}  // namespace detail

inline CensoredSample parse_csv(std::istream& in, const CsvSchema& schema,
                                CsvLoadReport* report = nullptr) {
  if (schema.covariate_cols.empty()) throw validation_error("no covariate columns selected");
  std::string line;
  if (!std::getline(in, line) || line.find_first_not_of(" \t\r") == std::string::npos) {
    throw validation_error("empty CSV file (header row required)");
  }
  const auto header = detail::split_csv_line(line);
  auto column = [&](const std::string& name) {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw validation_error("column '" + name + "' not found in header");
    return static_cast<std::size_t>(it - header.begin());
  };
  const std::size_t time_idx = column(schema.time_col);
  const std::size_t status_idx = column(schema.status_col);
  std::vector<std::size_t> cov_idx;
  for (const auto& c : schema.covariate_cols) cov_idx.push_back(column(c));
  const std::optional<std::size_t> id_idx =
      schema.id_col.empty() ? std::nullopt : std::optional<std::size_t>(column(schema.id_col));

  std::vector<double> z;
  std::vector<int> delta;
  std::vector<double> x;
  std::vector<std::string> ids;
  CsvLoadReport local;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    ++row;
    ++local.rows_read;
    const auto cells = detail::split_csv_line(line);
    if (cells.size() != header.size()) {
      throw validation_error("row " + std::to_string(row) + ": expected " +
                             std::to_string(header.size()) + " cells, found " +
                             std::to_string(cells.size()));
    }
    std::vector<std::size_t> needed = cov_idx;
    needed.push_back(time_idx);
    needed.push_back(status_idx);
    bool missing = false;
    for (auto k : needed) missing = missing || detail::is_missing(cells[k]);
    if (missing) {
      if (!schema.drop_missing) {
        throw validation_error("row " + std::to_string(row) + ": missing value");
      }
      ++local.rows_dropped;
      continue;
    }
    const double t = detail::parse_number(cells[time_idx], row, schema.time_col);
    if (!std::isfinite(t) || t <= 0.0) {
      throw validation_error("row " + std::to_string(row) + ": time must be positive, got '" +
                             cells[time_idx] + "'");
    }
    const double status = detail::parse_number(cells[status_idx], row, schema.status_col);
    if (status != 0.0 && status != 1.0) {
      throw validation_error("row " + std::to_string(row) + ": status must be 0 or 1, got '" +
                             cells[status_idx] + "'");
    }
    z.push_back(t);
    delta.push_back(static_cast<int>(status));
    for (std::size_t j = 0; j < cov_idx.size(); ++j) {
      x.push_back(detail::parse_number(cells[cov_idx[j]], row, schema.covariate_cols[j]));
    }
    if (id_idx) ids.push_back(cells[*id_idx]);
  }
  if (z.empty()) throw validation_error("CSV file has no usable data rows");

  CensoredSample s;
  const auto n = static_cast<Index>(z.size());
  const auto p = static_cast<Index>(cov_idx.size());
  s.z = Eigen::Map<Eigen::VectorXd>(z.data(), n);
  s.delta = Eigen::Map<Eigen::VectorXi>(delta.data(), n);
  s.x = Eigen::Map<CovariateMatrix>(x.data(), n, p);
  s.covariate_names = schema.covariate_cols;
  s.ids = std::move(ids);
  s.validate();
  if (report) *report = local;
  return s;
}

inline CensoredSample load_csv(const std::string& path, const CsvSchema& schema,
                               CsvLoadReport* report = nullptr) {
  std::ifstream in(path);
  if (!in) throw validation_error("cannot open '" + path + "'");
  return parse_csv(in, schema, report);
}

}  // namespace cdpd
