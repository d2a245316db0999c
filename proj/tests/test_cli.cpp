#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "cli.hpp"
#include "test_util.hpp"

using cdpd::cli::json;

namespace {

struct Run {
  int code;
  std::string out, err;
};

Run run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cdpd::cli::run_cli(std::move(args), out, err);
  return {code, out.str(), err.str()};
}

std::vector<std::string> heart_args(const std::string& cmd) {
  return {cmd, test_data_path("stanford2.csv"), "--time-col", "TIME", "--status-col", "status",
          "--covariate-cols", "AGE,T5", "--id-col", "ID", "--drop-missing"};
}

std::vector<std::string> operator+(std::vector<std::string> a, const std::vector<std::string>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("cdpd_cli_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace

TEST(Cli, UnknownModelListsTags) {
  const auto r = run(heart_args("fit") + std::vector<std::string>{"--model", "cox"});
  EXPECT_EQ(r.code, 2);
  for (const auto& tag : cdpd::model_tags()) EXPECT_NE(r.err.find(tag), std::string::npos) << tag;
}

TEST(Cli, BadFlagsAreValidationErrors) {
  EXPECT_EQ(run({"fit"}).code, 2);
  EXPECT_EQ(run({"frobnicate"}).code, 2);
  EXPECT_EQ(run(heart_args("fit") + std::vector<std::string>{"--model", "erm", "--alpha", "-1"})
                .code,
            2);
  // Missing cells without --drop-missing.
  EXPECT_EQ(run({"fit", test_data_path("stanford2.csv"), "--time-col", "TIME", "--status-col",
                 "status", "--covariate-cols", "AGE,T5", "--model", "erm"})
                .code,
            2);
  EXPECT_EQ(run({"--help"}).code, 0);
}

TEST(Cli, FitWithInterceptDefaultsAndRoundTrips) {
  const auto r = run(heart_args("fit") +
                     std::vector<std::string>{"--model", "aft-lognormal", "--intercept",
                                              "--response-scale", "log-time"});
  ASSERT_EQ(r.code, 0) << r.err;
  const json j = json::parse(r.out);
  EXPECT_EQ(j["alpha"].get<double>(), 0.3);
  EXPECT_EQ(j["theta"].size(), 4u);  // β0, β_AGE, β_T5, σ
  EXPECT_EQ(j["gamma"].size(), 2u);
  EXPECT_EQ(j["standard_errors"]["theta"].size(), 4u);
  EXPECT_EQ(j["n"].get<int>(), 157);
  EXPECT_EQ(j["rows_dropped"].get<int>(), 27);
  EXPECT_EQ(j["names"][0].get<std::string>(), "beta[(intercept)]");
  EXPECT_TRUE(j["converged"].get<bool>());
  EXPECT_EQ(j.dump(2) + "\n", r.out);
}

TEST(Cli, ErmExampleHasInterceptDimensions) {
  const auto r = run(heart_args("fit") +
                     std::vector<std::string>{"--model", "erm", "--alpha", "0.3", "--intercept"});
  ASSERT_EQ(r.code, 0) << r.err;
  const json j = json::parse(r.out);
  EXPECT_EQ(j["theta"].size(), 3u);
  EXPECT_EQ(j["gamma"].size(), 2u);
  for (const auto& v : j["standard_errors"]["theta"]) EXPECT_TRUE(v.is_number());
}

TEST(Cli, NonConvergenceIsNumericalFailure) {
  const auto r = run(heart_args("fit") +
                     std::vector<std::string>{"--model", "aft-lognormal", "--max-iterations", "1",
                                              "--restarts", "1", "--tolerance", "1e-300"});
  EXPECT_EQ(r.code, 3) << r.err;
}

TEST(Cli, IdenticalFilesGiveZeroVariation) {
  const auto r = run(heart_args("sweep") +
                     std::vector<std::string>{"--model", "aft-lognormal", "--intercept",
                                              "--response-scale", "log-time", "--cleaned",
                                              test_data_path("stanford2.csv"), "--alphas",
                                              "0,0.5"});
  ASSERT_EQ(r.code, 0) << r.err;
  const json j = json::parse(r.out);
  ASSERT_EQ(j["rows"].size(), 2u);
  for (const auto& row : j["rows"]) {
    for (const auto& v : row["relative_variation"]) EXPECT_EQ(v.get<double>(), 0.0);
  }
}

TEST(Cli, SweepAlphaZeroRowReproducesFit) {
  const std::vector<std::string> common{"--model", "aft-lognormal", "--intercept",
                                        "--response-scale", "log-time", "--variant",
                                        "conditional"};
  const auto s = run(heart_args("sweep") + common +
                     std::vector<std::string>{"--exclude-ids", "2,16,21", "--alphas", "0"});
  ASSERT_EQ(s.code, 0) << s.err;
  const auto f = run(heart_args("fit") + common + std::vector<std::string>{"--alpha", "0"});
  ASSERT_EQ(f.code, 0) << f.err;
  const json sj = json::parse(s.out), fj = json::parse(f.out);
  EXPECT_EQ(sj["rows"][0]["full"]["theta"], fj["theta"]);
  EXPECT_EQ(sj["n_cleaned"].get<int>(), 154);
}

TEST(Cli, UnknownExcludedIdRejected) {
  const auto r = run(heart_args("sweep") +
                     std::vector<std::string>{"--model", "aft-lognormal", "--exclude-ids", "9999"});
  EXPECT_EQ(r.code, 2);
}

TEST(Cli, SimulateIsSeedDeterministic) {
  const std::vector<std::string> args{"simulate", "--n", "40", "--replications", "6",
                                      "--alphas", "0,0.5", "--censoring-levels", "0.1",
                                      "--contamination-levels", "0,0.1", "--seed", "7"};
  const auto a = run(args), b = run(args);
  ASSERT_EQ(a.code, 0) << a.err;
  EXPECT_EQ(a.out, b.out);
  const json j = json::parse(a.out);
  EXPECT_EQ(j["cells"].size(), 2u);
  auto other = args;
  other.back() = "8";
  EXPECT_NE(run(other).out, a.out);
  auto text = args + std::vector<std::string>{"--format", "text"};
  const auto t = run(text);
  EXPECT_NE(t.out.find("rel. efficiency 10%"), std::string::npos) << t.out;
  EXPECT_NE(t.out.find("Total MSE under contamination"), std::string::npos);
}

TEST(Cli, SimulateFailureRateIsStudyFailure) {
  const auto r = run({"simulate", "--n", "30", "--replications", "4", "--alphas", "0.5",
                      "--censoring-levels", "0.1", "--contamination-levels", "0",
                      "--max-iterations", "1", "--tolerance", "1e-300"});
  EXPECT_EQ(r.code, 4) << r.err;
}

TEST(Cli, InfluenceVerdicts) {
  auto verdict = [](const std::string& variant, const std::string& alpha) {
    const auto r = run({"influence", "--model", "erm", "--variant", variant, "--alpha", alpha,
                        "--theta", "0.5", "--gamma", "1"});
    EXPECT_EQ(r.code, 0) << r.err;
    const json j = json::parse(r.out);
    return std::make_pair(j["bounded_in_y"].get<bool>(), j["bounded_in_x"].get<bool>());
  };
  EXPECT_EQ(verdict("joint", "0.5"), std::make_pair(true, true));
  EXPECT_EQ(verdict("conditional", "0.5"), std::make_pair(true, false));
  EXPECT_EQ(verdict("joint", "0"), std::make_pair(false, false));
  EXPECT_EQ(run({"influence", "--theta", "0.5,1"}).code, 2);
}

TEST(Cli, OutputDirectoryCarriesManifest) {
  const auto dir = temp_dir("manifest");
  // SHA-256("abc") is a published test vector.
  const auto input = dir / "abc.txt";
  std::ofstream(input) << "abc";
  EXPECT_EQ(cdpd::cli::sha256_file(input.string()),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");

  const auto out = dir / "fit";
  const auto r = run(heart_args("fit") + std::vector<std::string>{"--model", "erm", "--alpha",
                                                                  "0", "--out", out.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  std::ifstream mf(out / "manifest.json");
  const json m = json::parse(mf);
  EXPECT_EQ(m["subcommand"], "fit");
  EXPECT_EQ(m["inputs"][0]["sha256"].get<std::string>().size(), 64u);
  EXPECT_EQ(m["config"]["alpha"].get<double>(), 0.0);
  std::ifstream ff(out / "fit.json");
  std::stringstream buf;
  buf << ff.rdbuf();
  EXPECT_EQ(buf.str(), r.out);
  int manifests = 0;
  for (const auto& e : std::filesystem::directory_iterator(out)) {
    manifests += e.path().filename() == "manifest.json";
  }
  EXPECT_EQ(manifests, 1);
}

TEST(Cli, JsonConfigMirrorsFlags) {
  const auto dir = temp_dir("config");
  const auto cfg = dir / "fit.json";
  std::ofstream(cfg) << json{{"input", test_data_path("stanford2.csv")},
                             {"time-col", "TIME"},
                             {"status-col", "status"},
                             {"covariate-cols", {"AGE", "T5"}},
                             {"drop-missing", true},
                             {"model", "erm"},
                             {"alpha", 0.5}}
                            .dump();
  const auto a = run({"fit", "--config", cfg.string()});
  ASSERT_EQ(a.code, 0) << a.err;
  EXPECT_EQ(json::parse(a.out)["alpha"].get<double>(), 0.5);
  // Command line wins over the file.
  const auto b = run({"fit", "--config", cfg.string(), "--alpha", "0.1"});
  ASSERT_EQ(b.code, 0) << b.err;
  EXPECT_EQ(json::parse(b.out)["alpha"].get<double>(), 0.1);
}
