#pragma once

// Command-line front end: fit, sweep, simulate, influence. Kept in a header so
// the test suite can drive run_cli() in-process.

#include <openssl/evp.h>

#include <CLI11.hpp>
#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <json.hpp>
#include <sstream>
#include <string>
#include <vector>

#include "cdpd/cdpd.hpp"

namespace cdpd::cli {

using json = nlohmann::json;

enum ExitCode : int { exit_ok = 0, exit_validation = 2, exit_numerical = 3, exit_study = 4 };

// ---------------------------------------------------------------------------
// Small utilities

inline std::string sha256_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw validation_error("cannot open '" + path + "'");
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
  std::vector<char> buf(1 << 16);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (in.gcount() > 0) EVP_DigestUpdate(ctx, buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, md, &len);
  EVP_MD_CTX_free(ctx);
  std::ostringstream os;
  for (unsigned i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int(md[i]);
  return os.str();
}

// Non-finite values become null.
inline json to_json(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

inline json to_json(const VectorXd& v) {
  json out = json::array();
  for (Index i = 0; i < v.size(); ++i) out.push_back(to_json(v(i)));
  return out;
}

inline VectorXd vector_from(const std::vector<double>& v) {
  VectorXd out(static_cast<Index>(v.size()));
  for (std::size_t i = 0; i < v.size(); ++i) out(static_cast<Index>(i)) = v[i];
  return out;
}

inline std::string iso_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

inline ResponseScale parse_scale(const std::string& s) {
  if (s == "time") return ResponseScale::time;
  if (s == "log-time") return ResponseScale::log_time;
  throw validation_error("unknown response scale '" + s + "' (expected time or log-time)");
}

// Output directory bookkeeping; the manifest is written last.
class OutputDir {
 public:
  explicit OutputDir(std::string dir) : dir_(std::move(dir)) {
    if (dir_.empty()) return;
    std::error_code ec;
    std::filesystem::create_directories(dir_, ec);
    if (ec) throw validation_error("cannot create output directory '" + dir_ + "'");
  }
  bool enabled() const { return !dir_.empty(); }
  void write(const std::string& name, const std::string& content) {
    if (!enabled()) return;
    const auto path = std::filesystem::path(dir_) / name;
    std::ofstream f(path, std::ios::binary);
    if (!f) throw validation_error("cannot write '" + path.string() + "'");
    f << content;
    artifacts_.push_back(name);
  }
  void manifest(const std::string& subcommand, const json& config,
                const std::vector<std::string>& inputs, std::uint64_t seed,
                const std::string& started) {
    if (!enabled()) return;
    json m;
    m["subcommand"] = subcommand;
    m["config"] = config;
    m["inputs"] = json::array();
    for (const auto& p : inputs) m["inputs"].push_back({{"path", p}, {"sha256", sha256_file(p)}});
    m["seed"] = seed;
    m["artifacts"] = artifacts_;
    m["started_at"] = started;
    m["finished_at"] = iso_now();
    std::ofstream f(std::filesystem::path(dir_) / "manifest.json", std::ios::binary);
    f << m.dump(2) << "\n";
  }

 private:
  std::string dir_;
  std::vector<std::string> artifacts_;
};

// ---------------------------------------------------------------------------
// Options

struct DataOptions {
  std::string input;
  std::string time_col = "time";
  std::string status_col = "status";
  std::vector<std::string> covariate_cols;
  std::string id_col;
  bool drop_missing = false;
  bool intercept = false;
  std::vector<std::string> exclude_ids;

  json to_json() const {
    return {{"input", input},           {"time-col", time_col},
            {"status-col", status_col}, {"covariate-cols", covariate_cols},
            {"id-col", id_col},         {"drop-missing", drop_missing},
            {"intercept", intercept},   {"exclude-ids", exclude_ids}};
  }
};

struct FitOptions {
  std::string model;
  std::string variant = "joint";
  double alpha = 0.3;
  std::string response_scale = "time";
  std::uint64_t seed = 1;
  int restarts = 5;
  double tolerance = 1e-8;
  int max_iterations = 500;

  json to_json() const {
    return {{"model", model},         {"variant", variant},       {"alpha", alpha},
            {"response-scale", response_scale}, {"seed", seed},  {"restarts", restarts},
            {"tolerance", tolerance}, {"max-iterations", max_iterations}};
  }
  SolverConfig solver() const {
    SolverConfig s;
    s.tolerance = tolerance;
    s.max_iterations = max_iterations;
    s.restarts = restarts;
    s.seed = seed;
    return s;
  }
};

inline void add_data_options(CLI::App* app, DataOptions& d) {
  app->add_option("input", d.input, "CSV file with a header row")->required();
  app->add_option("--time-col", d.time_col, "observed time column")->capture_default_str();
  app->add_option("--status-col", d.status_col, "status column (1 event, 0 censored)")
      ->capture_default_str();
  app->add_option("--covariate-cols", d.covariate_cols, "comma-separated covariate columns")
      ->delimiter(',')
      ->required();
  app->add_option("--id-col", d.id_col, "record id column");
  app->add_flag("--drop-missing", d.drop_missing, "drop rows with missing cells");
  app->add_flag("--intercept", d.intercept, "add a constant-1 covariate column");
  app->add_option("--exclude-ids", d.exclude_ids, "comma-separated ids to leave out")
      ->delimiter(',');
}

inline void add_fit_options(CLI::App* app, FitOptions& f) {
  app->add_option("--model", f.model, "lrm-exp, erm, aft-weibull, aft-lognormal, aft-loglogistic")
      ->required();
  app->add_option("--variant", f.variant, "joint or conditional")->capture_default_str();
  app->add_option("--alpha", f.alpha, "DPD tuning parameter")->capture_default_str();
  app->add_option("--response-scale", f.response_scale, "time or log-time (AFT only)")
      ->capture_default_str();
  app->add_option("--seed", f.seed, "seed for random restarts")->capture_default_str();
  app->add_option("--restarts", f.restarts, "optimizer starts")->capture_default_str();
  app->add_option("--tolerance", f.tolerance, "gradient tolerance")->capture_default_str();
  app->add_option("--max-iterations", f.max_iterations)->capture_default_str();
}

// ---------------------------------------------------------------------------
// Data and fitting

struct LoadedData {
  CensoredSample sample;
  CsvLoadReport report;
};

inline LoadedData load_data(const DataOptions& d, const std::string& path,
                            const std::vector<std::string>& exclude) {
  LoadedData out;
  out.sample = load_csv(path, CsvSchema{d.time_col, d.status_col, d.covariate_cols, d.id_col,
                                        d.drop_missing},
                        &out.report);
  if (!exclude.empty()) {
    if (d.id_col.empty()) throw validation_error("--exclude-ids needs --id-col");
    for (const auto& id : exclude) {
      if (std::find(out.sample.ids.begin(), out.sample.ids.end(), id) == out.sample.ids.end()) {
        throw validation_error("excluded id '" + id + "' does not occur in " + path);
      }
    }
    out.sample = out.sample.without_ids(exclude);
  }
  if (d.intercept) out.sample = out.sample.with_intercept();
  return out;
}

struct FitSetup {
  std::unique_ptr<Model> model;
  DpdConfig cfg;
};

inline FitSetup make_setup(const FitOptions& f, const DataOptions& d, Index p) {
  DpdConfig cfg{f.alpha, parse_variant(f.variant)};
  cfg.validate();
  ModelOptions mo;
  mo.scale = parse_scale(f.response_scale);
  mo.intercept = d.intercept;
  return {make_model(f.model, p, mo), cfg};
}

struct FitOutput {
  FitResult fit;
  SandwichCovariance cov;
  std::vector<std::string> names;
};

inline FitOutput fit_sample(const FitSetup& setup, const FitOptions& f, const CensoredSample& s) {
  FitOutput out;
  const auto ws = prepare(s);
  out.fit = fit_mdpde(*setup.model, ws, setup.cfg, f.solver());
  out.cov = sandwich(*setup.model, ws, out.fit, setup.cfg);
  out.names = MdpdePsi(*setup.model, setup.cfg).names_for(s.covariate_names);
  return out;
}

inline json fit_to_json(const FitOutput& o) {
  const auto& r = o.fit;
  const Index q = r.theta_hat.size();
  json j;
  j["theta"] = to_json(r.theta_hat);
  j["gamma"] = to_json(r.gamma_hat);
  j["names"] = o.names;
  j["standard_errors"] = {{"theta", to_json(VectorXd(o.cov.standard_errors.head(q)))},
                          {"gamma", to_json(VectorXd(o.cov.standard_errors.tail(
                                        o.cov.standard_errors.size() - q)))}};
  j["objective"] = to_json(r.objective_value);
  j["grad_norm"] = to_json(r.grad_norm);
  j["iterations"] = r.iterations;
  j["converged"] = r.converged;
  j["starts_used"] = r.starts_used;
  return j;
}

inline std::string fit_table(const json& j) {
  std::ostringstream os;
  os << j["model"].get<std::string>() << " (" << j["variant"].get<std::string>()
     << "), alpha = " << j["alpha"].dump() << ", n = " << j["n"].dump()
     << ", events = " << j["events"].dump() << "\n";
  os << std::left << std::setw(28) << "parameter" << std::right << std::setw(14) << "estimate"
     << std::setw(14) << "std. error" << "\n";
  std::vector<json> est, se;
  for (const auto& v : j["theta"]) est.push_back(v);
  for (const auto& v : j["gamma"]) est.push_back(v);
  for (const auto& v : j["standard_errors"]["theta"]) se.push_back(v);
  for (const auto& v : j["standard_errors"]["gamma"]) se.push_back(v);
  const auto& names = j["names"];
  for (std::size_t k = 0; k < est.size(); ++k) {
    auto num = [](const json& v) {
      if (v.is_null()) return std::string("NA");
      std::ostringstream s;
      s << std::fixed << std::setprecision(6) << v.get<double>();
      return s.str();
    };
    os << std::left << std::setw(28) << names[k].get<std::string>() << std::right << std::setw(14)
       << num(est[k]) << std::setw(14) << num(se[k]) << "\n";
  }
  os << "gradient norm " << j["grad_norm"].dump() << ", iterations " << j["iterations"].dump()
     << (j["converged"].get<bool>() ? ", converged" : ", NOT converged") << "\n";
  return os.str();
}

// ---------------------------------------------------------------------------
// Subcommands

struct CommonOptions {
  std::string out_dir;
  std::string format = "json";
};

inline int cmd_fit(const DataOptions& d, const FitOptions& f, const CommonOptions& c,
                   std::ostream& out) {
  const std::string started = iso_now();
  OutputDir dir(c.out_dir);
  const auto data = load_data(d, d.input, d.exclude_ids);
  const auto setup = make_setup(f, d, data.sample.p());
  const auto o = fit_sample(setup, f, data.sample);
  json j = fit_to_json(o);
  j["model"] = f.model;
  j["variant"] = f.variant;
  j["alpha"] = f.alpha;
  j["response_scale"] = f.response_scale;
  j["intercept"] = d.intercept;
  j["n"] = data.sample.n();
  j["events"] = data.sample.events();
  j["rows_read"] = data.report.rows_read;
  j["rows_dropped"] = data.report.rows_dropped;
  j["excluded_ids"] = d.exclude_ids;
  const std::string text = j.dump(2) + "\n";
  const std::string table = fit_table(j);
  out << (c.format == "text" ? table : text);
  dir.write("fit.json", text);
  dir.write("fit.txt", table);
  json config = d.to_json();
  config.update(f.to_json());
  dir.manifest("fit", config, {d.input}, f.seed, started);
  return exit_ok;
}

inline const std::vector<double>& default_sweep_alphas() {
  static const std::vector<double> a{0.0, 0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.7, 0.9, 1.0};
  return a;
}

// |θ_full - θ_cleaned| / |θ_full| per parameter across an α grid.
inline int cmd_sweep(const DataOptions& d, const FitOptions& f, const std::string& cleaned_path,
                     std::vector<double> alphas, const CommonOptions& c, std::ostream& out) {
  const std::string started = iso_now();
  OutputDir dir(c.out_dir);
  if (cleaned_path.empty() && d.exclude_ids.empty()) {
    throw validation_error("sweep needs --cleaned FILE or --exclude-ids");
  }
  if (alphas.empty()) throw validation_error("alpha grid is empty");
  const auto full = load_data(d, d.input, {});
  const auto cleaned = cleaned_path.empty() ? load_data(d, d.input, d.exclude_ids)
                                            : load_data(d, cleaned_path, d.exclude_ids);
  json j;
  j["model"] = f.model;
  j["variant"] = f.variant;
  j["response_scale"] = f.response_scale;
  j["intercept"] = d.intercept;
  j["n_full"] = full.sample.n();
  j["n_cleaned"] = cleaned.sample.n();
  j["rows"] = json::array();
  std::vector<std::string> names;
  std::vector<VectorXd> variation;
  for (double a : alphas) {
    FitOptions fa = f;
    fa.alpha = a;
    const auto setup = make_setup(fa, d, full.sample.p());
    const auto of = fit_sample(setup, fa, full.sample);
    const auto oc = fit_sample(setup, fa, cleaned.sample);
    names = of.names;
    const VectorXd pf = of.fit.parameters(), pc = oc.fit.parameters();
    const VectorXd rv = (pf - pc).cwiseAbs().cwiseQuotient(pf.cwiseAbs());
    variation.push_back(rv);
    json row;
    row["alpha"] = a;
    row["full"] = fit_to_json(of);
    row["cleaned"] = fit_to_json(oc);
    row["relative_variation"] = to_json(rv);
    j["rows"].push_back(row);
  }
  j["names"] = names;

  std::ostringstream table;
  table << "Relative variation, full (n = " << full.sample.n() << ") vs cleaned (n = "
        << cleaned.sample.n() << ")\n";
  table << std::left << std::setw(8) << "alpha" << std::right;
  for (const auto& nm : names) table << std::setw(std::max<int>(14, int(nm.size()) + 2)) << nm;
  table << "\n";
  for (std::size_t k = 0; k < alphas.size(); ++k) {
    table << std::left << std::setw(8) << alphas[k] << std::right << std::fixed
          << std::setprecision(4);
    for (std::size_t m = 0; m < names.size(); ++m) {
      table << std::setw(std::max<int>(14, int(names[m].size()) + 2))
            << variation[k](static_cast<Index>(m));
    }
    table << std::defaultfloat << "\n";
  }
  const std::string text = j.dump(2) + "\n";
  out << (c.format == "text" ? table.str() : text);
  dir.write("sweep.json", text);
  dir.write("sweep.txt", table.str());
  json config = d.to_json();
  config.update(f.to_json());
  config.erase("alpha");
  config["alphas"] = alphas;
  config["cleaned"] = cleaned_path;
  std::vector<std::string> inputs{d.input};
  if (!cleaned_path.empty()) inputs.push_back(cleaned_path);
  dir.manifest("sweep", config, inputs, f.seed, started);
  return exit_ok;
}

struct SimulateOptions {
  SimDesign design;
  std::vector<double> censoring_levels{0.1, 0.2};
  std::vector<double> contamination_levels{0.0, 0.1, 0.2};
  std::string censoring_mode = "per-record";
  std::string channel = "both";
  std::string variant = "joint";

  json to_json() const {
    const auto& d = design;
    return {{"model", d.model},
            {"n", d.n},
            {"replications", d.replications},
            {"theta0", d.theta0},
            {"gamma0", d.gamma0},
            {"censoring-levels", censoring_levels},
            {"contamination-levels", contamination_levels},
            {"censoring-mode", censoring_mode},
            {"channel", channel},
            {"alphas", d.alphas},
            {"variant", variant},
            {"seed", d.seed},
            {"max-failure-rate", d.max_failure_rate},
            {"max-iterations", d.solver.max_iterations},
            {"tolerance", d.solver.tolerance}};
  }
};

inline json report_to_json(const MonteCarloReport& r) {
  json j;
  j["censoring"] = r.design.censoring;
  j["contamination"] = r.design.contamination;
  j["mean_censored_fraction"] = to_json(r.mean_censored_fraction);
  j["failed_fits"] = r.failed_fits;
  j["total_fits"] = r.total_fits;
  j["rows"] = json::array();
  for (const auto& row : r.rows) {
    j["rows"].push_back({{"alpha", row.alpha},
                         {"bias", to_json(row.bias)},
                         {"mse", to_json(row.mse)},
                         {"total_abs_bias", to_json(row.total_abs_bias)},
                         {"total_mse", to_json(row.total_mse)},
                         {"total_mae", to_json(row.total_mae)},
                         {"relative_efficiency", to_json(row.efficiency)},
                         {"failures", row.failures}});
  }
  return j;
}

inline int cmd_simulate(SimulateOptions o, const CommonOptions& c, std::ostream& out) {
  const std::string started = iso_now();
  OutputDir dir(c.out_dir);
  o.design.censoring_mode = parse_censoring_mode(o.censoring_mode);
  o.design.channel = parse_channel(o.channel);
  o.design.variant = parse_variant(o.variant);
  if (o.censoring_levels.empty() || o.contamination_levels.empty()) {
    throw validation_error("censoring and contamination levels must be non-empty");
  }
  std::vector<MonteCarloReport> clean, dirty;
  json cells = json::array();
  for (double cont : o.contamination_levels) {
    for (double cens : o.censoring_levels) {
      SimDesign d = o.design;
      d.censoring = cens;
      d.contamination = cont;
      auto rep = run_study(d);
      cells.push_back(report_to_json(rep));
      (cont == 0.0 ? clean : dirty).push_back(std::move(rep));
    }
  }
  std::ostringstream tables, csv;
  write_clean_table(tables, clean);
  write_contamination_table(tables, "Total absolute bias under contamination", dirty, false);
  write_contamination_table(tables, "Total MSE under contamination", dirty, true);
  std::vector<MonteCarloReport> all = clean;
  all.insert(all.end(), dirty.begin(), dirty.end());
  write_report_csv(csv, all);
  json j;
  j["config"] = o.to_json();
  j["cells"] = cells;
  const std::string text = j.dump(2) + "\n";
  out << (c.format == "text" ? tables.str() : c.format == "csv" ? csv.str() : text);
  dir.write("study.json", text);
  dir.write("study.csv", csv.str());
  dir.write("tables.txt", tables.str());
  dir.manifest("simulate", o.to_json(), {}, o.design.seed, started);
  return exit_ok;
}

struct InfluenceOptions {
  std::string model = "erm";
  std::string variant = "joint";
  double alpha = 0.3;
  std::string response_scale = "time";
  bool intercept = false;
  std::vector<double> theta{0.5};
  std::vector<double> gamma{1.0};
  std::string fit_file;
  std::vector<double> x_ref;
  double y_ref = std::numeric_limits<double>::quiet_NaN();
  GridSpec grid;

  json to_json() const {
    json j = {{"model", model},
              {"variant", variant},
              {"alpha", alpha},
              {"response-scale", response_scale},
              {"intercept", intercept},
              {"theta", theta},
              {"gamma", gamma},
              {"fit", fit_file},
              {"x-ref", x_ref},
              {"y-first", grid.y_first},
              {"y-last", grid.y_last},
              {"y-ratio", grid.y_ratio},
              {"x-first", grid.x_first},
              {"x-last", grid.x_last},
              {"x-ratio", grid.x_ratio},
              {"growth-threshold", grid.growth_threshold}};
    j["y-ref"] = cli::to_json(y_ref);
    return j;
  }
};

// Parameters, model and α may come from a fit JSON; explicit flags for
// γ still apply when the fit carries none (conditional variant).
inline void apply_fit_file(InfluenceOptions& o) {
  std::ifstream in(o.fit_file);
  if (!in) throw validation_error("cannot open '" + o.fit_file + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw validation_error("'" + o.fit_file + "' is not valid JSON: " + e.what());
  }
  try {
    o.model = j.at("model").get<std::string>();
    o.alpha = j.at("alpha").get<double>();
    o.variant = j.at("variant").get<std::string>();
    o.response_scale = j.value("response_scale", std::string("time"));
    o.intercept = j.value("intercept", false);
    o.theta = j.at("theta").get<std::vector<double>>();
    const auto g = j.at("gamma").get<std::vector<double>>();
    if (!g.empty()) o.gamma = g;
  } catch (const json::exception& e) {
    throw validation_error("fit file lacks a required field: " + std::string(e.what()));
  }
}

inline int cmd_influence(InfluenceOptions o, const CommonOptions& c, std::ostream& out) {
  const std::string started = iso_now();
  OutputDir dir(c.out_dir);
  if (!o.fit_file.empty()) apply_fit_file(o);
  const DpdConfig cfg{o.alpha, parse_variant(o.variant)};
  cfg.validate();
  ModelOptions mo;
  mo.scale = parse_scale(o.response_scale);
  mo.intercept = o.intercept;
  const Index p = static_cast<Index>(o.gamma.size()) + (o.intercept ? 1 : 0);
  const auto model = make_model(o.model, p, mo);
  const VectorXd theta = vector_from(o.theta), gamma = vector_from(o.gamma);
  if (theta.size() != model->theta_dim()) {
    throw validation_error("--theta has " + std::to_string(theta.size()) + " values, model " +
                           o.model + " expects " + std::to_string(model->theta_dim()));
  }
  model->check_theta(theta);
  GridSpec grid = o.grid;
  if (!o.x_ref.empty()) {
    if (static_cast<Index>(o.x_ref.size()) != p) {
      throw validation_error("--x-ref must have " + std::to_string(p) + " values");
    }
    grid.x_ref = vector_from(o.x_ref);
  }
  if (std::isfinite(o.y_ref)) grid.y_ref = o.y_ref;
  const auto rep = boundedness_report(*model, cfg, theta, gamma, grid);

  std::ostringstream csv;
  write_influence_csv(csv, rep.curve);
  json j;
  j["model"] = o.model;
  j["variant"] = o.variant;
  j["alpha"] = o.alpha;
  j["bounded_in_y"] = rep.bounded_in_y;
  j["bounded_in_x"] = rep.bounded_in_x;
  j["y_growth"] = to_json(rep.y_growth);
  j["x_growth"] = to_json(rep.x_growth);
  j["sup_norm"] = to_json(rep.curve.sup_norm);
  j["names"] = rep.curve.names;
  std::ostringstream text;
  text << "bounded in y: " << (rep.bounded_in_y ? "yes" : "no") << " (growth " << rep.y_growth
       << ")\nbounded in x: " << (rep.bounded_in_x ? "yes" : "no") << " (growth " << rep.x_growth
       << ")\n";
  const std::string js = j.dump(2) + "\n";
  out << (c.format == "text" ? text.str() : c.format == "csv" ? csv.str() : js);
  dir.write("influence.csv", csv.str());
  dir.write("influence.json", js);
  std::vector<std::string> inputs;
  if (!o.fit_file.empty()) inputs.push_back(o.fit_file);
  dir.manifest("influence", o.to_json(), inputs, 0, started);
  return exit_ok;
}

// ---------------------------------------------------------------------------
// Config files: a JSON object whose keys are long flag names (without the
// dashes). Flags given on the command line win; "input" is the positional.

inline std::vector<std::string> merge_config(std::vector<std::string> args) {
  std::string path;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) {
      path = args[i + 1];
      args.erase(args.begin() + static_cast<long>(i), args.begin() + static_cast<long>(i) + 2);
      break;
    }
    if (args[i].rfind("--config=", 0) == 0) {
      path = args[i].substr(9);
      args.erase(args.begin() + static_cast<long>(i));
      break;
    }
  }
  if (path.empty()) return args;
  std::ifstream in(path);
  if (!in) throw validation_error("cannot open config '" + path + "'");
  json cfg;
  try {
    cfg = json::parse(in);
  } catch (const json::exception& e) {
    throw validation_error("config '" + path + "' is not valid JSON: " + e.what());
  }
  if (!cfg.is_object()) throw validation_error("config must be a JSON object");
  auto given = [&](const std::string& flag) {
    for (const auto& a : args) {
      if (a == flag || a.rfind(flag + "=", 0) == 0) return true;
    }
    return false;
  };
  auto scalar = [](const json& v) {
    if (v.is_string()) return v.get<std::string>();
    return v.dump();
  };
  for (const auto& [key, value] : cfg.items()) {
    if (key == "input") {
      if (value.is_string()) args.push_back(value.get<std::string>());
      continue;
    }
    const std::string flag = "--" + key;
    if (given(flag) || value.is_null()) continue;
    if (value.is_boolean()) {
      if (value.get<bool>()) args.push_back(flag);
    } else if (value.is_array()) {
      if (value.empty()) continue;
      std::string joined;
      for (const auto& v : value) joined += (joined.empty() ? "" : ",") + scalar(v);
      args.push_back(flag);
      args.push_back(joined);
    } else {
      args.push_back(flag);
      args.push_back(scalar(value));
    }
  }
  return args;
}

// ---------------------------------------------------------------------------

inline int run_cli(std::vector<std::string> args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Robust density power divergence and M-estimation for censored regression"};
  app.require_subcommand(1);
  app.footer("Any subcommand accepts --config FILE: a JSON object keyed by long flag names\n"
             "(\"input\" for the data file). Command-line flags take precedence.");

  CommonOptions common;
  auto add_common = [&](CLI::App* sub, const std::vector<std::string>& formats) {
    sub->add_option("--out", common.out_dir, "output directory (files + manifest.json)");
    sub->add_option("--format", common.format, "stdout format")
        ->check(CLI::IsMember(formats))
        ->capture_default_str();
  };

  DataOptions data;
  FitOptions fit;
  auto* fit_cmd = app.add_subcommand("fit", "fit one model at one alpha");
  add_data_options(fit_cmd, data);
  add_fit_options(fit_cmd, fit);
  add_common(fit_cmd, {"json", "text"});

  DataOptions sweep_data;
  FitOptions sweep_fit;
  sweep_fit.variant = "conditional";
  std::string cleaned;
  std::vector<double> sweep_alphas = default_sweep_alphas();
  auto* sweep_cmd = app.add_subcommand("sweep", "fits over an alpha grid, full vs cleaned data");
  add_data_options(sweep_cmd, sweep_data);
  add_fit_options(sweep_cmd, sweep_fit);
  sweep_cmd->add_option("--cleaned", cleaned, "cleaned CSV (default: input minus --exclude-ids)");
  sweep_cmd->add_option("--alphas", sweep_alphas, "comma-separated alpha grid")->delimiter(',');
  add_common(sweep_cmd, {"json", "text"});

  SimulateOptions sim;
  auto* sim_cmd = app.add_subcommand("simulate", "Monte Carlo study");
  auto& d = sim.design;
  sim_cmd->add_option("--model", d.model, "lrm-exp or erm")->capture_default_str();
  sim_cmd->add_option("--n", d.n, "sample size")->capture_default_str();
  sim_cmd->add_option("--replications", d.replications)->capture_default_str();
  sim_cmd->add_option("--theta0", d.theta0)->capture_default_str();
  sim_cmd->add_option("--gamma0", d.gamma0)->capture_default_str();
  sim_cmd->add_option("--censoring-levels", sim.censoring_levels)->delimiter(',');
  sim_cmd->add_option("--contamination-levels", sim.contamination_levels)->delimiter(',');
  sim_cmd->add_option("--censoring-mode", sim.censoring_mode, "per-record or marginal")
      ->capture_default_str();
  sim_cmd->add_option("--channel", sim.channel, "both, response or covariate")
      ->capture_default_str();
  sim_cmd->add_option("--alphas", d.alphas)->delimiter(',');
  sim_cmd->add_option("--variant", sim.variant)->capture_default_str();
  sim_cmd->add_option("--seed", d.seed)->capture_default_str();
  sim_cmd->add_option("--max-failure-rate", d.max_failure_rate)->capture_default_str();
  sim_cmd->add_option("--max-iterations", d.solver.max_iterations)->capture_default_str();
  sim_cmd->add_option("--tolerance", d.solver.tolerance)->capture_default_str();
  add_common(sim_cmd, {"json", "text", "csv"});

  InfluenceOptions inf;
  auto* inf_cmd = app.add_subcommand("influence", "influence function and boundedness verdicts");
  inf_cmd->add_option("--model", inf.model)->capture_default_str();
  inf_cmd->add_option("--variant", inf.variant)->capture_default_str();
  inf_cmd->add_option("--alpha", inf.alpha)->capture_default_str();
  inf_cmd->add_option("--response-scale", inf.response_scale)->capture_default_str();
  inf_cmd->add_flag("--intercept", inf.intercept);
  inf_cmd->add_option("--theta", inf.theta)->delimiter(',');
  inf_cmd->add_option("--gamma", inf.gamma)->delimiter(',');
  inf_cmd->add_option("--fit", inf.fit_file, "take model and parameters from a fit JSON");
  inf_cmd->add_option("--x-ref", inf.x_ref)->delimiter(',');
  inf_cmd->add_option("--y-ref", inf.y_ref);
  inf_cmd->add_option("--y-first", inf.grid.y_first)->capture_default_str();
  inf_cmd->add_option("--y-last", inf.grid.y_last)->capture_default_str();
  inf_cmd->add_option("--y-ratio", inf.grid.y_ratio)->capture_default_str();
  inf_cmd->add_option("--x-first", inf.grid.x_first)->capture_default_str();
  inf_cmd->add_option("--x-last", inf.grid.x_last)->capture_default_str();
  inf_cmd->add_option("--x-ratio", inf.grid.x_ratio)->capture_default_str();
  inf_cmd->add_option("--growth-threshold", inf.grid.growth_threshold)->capture_default_str();
  add_common(inf_cmd, {"json", "text", "csv"});

  try {
    args = merge_config(std::move(args));
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(std::move(reversed));
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {  // --help
      out << app.help();
      return exit_ok;
    }
    err << "error: " << e.what() << "\n";
    return exit_validation;
  } catch (const validation_error& e) {
    err << "error: " << e.what() << "\n";
    return exit_validation;
  }

  try {
    if (fit_cmd->parsed()) return cmd_fit(data, fit, common, out);
    if (sweep_cmd->parsed()) {
      return cmd_sweep(sweep_data, sweep_fit, cleaned, sweep_alphas, common, out);
    }
    if (sim_cmd->parsed()) return cmd_simulate(sim, common, out);
    if (inf_cmd->parsed()) return cmd_influence(inf, common, out);
  } catch (const validation_error& e) {
    err << "error: " << e.what() << "\n";
    return exit_validation;
  } catch (const degenerate_data_error& e) {
    err << "error: " << e.what() << "\n";
    return exit_validation;
  } catch (const study_error& e) {
    err << "error: " << e.what() << "\n";
    return exit_study;
  } catch (const cdpd::error& e) {
    // domain, overflow, singular matrix, non-convergence
    err << "numerical failure: " << e.what() << "\n";
    return exit_numerical;
  }
  return exit_validation;
}

}  // namespace cdpd::cli
