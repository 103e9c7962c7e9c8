#include <gtest/gtest.h>

#include <cstdlib>
#include <sstream>

#include "oracles.hpp"

using namespace nids_xray;

namespace {

// Short trace and tiny explanation budgets so a full run stays in seconds.
PipelineConfig small_config(const std::string& models) {
  std::istringstream in(
      "seed = 5\n"
      "synthetic.duration = 120\n"
      "synthetic.attack_start = 60\n"
      "synthetic.attack_packets = 3000\n"
      "train.rows = 3000\n"
      "models = " + models + "\n"
      "distill.iterations = 3\n"
      "shap.budget = 128\n"
      "shap.background = 10\n"
      "shap.rows = 8\n"
      "agree.rows = 8\n"
      "agree.min_rows = 100\n"
      "tamper.bands = 10:50\n");
  return PipelineConfig::parse(in, "small");
}

nlohmann::json model_row(const std::string& id, nlohmann::json f1, nlohmann::json fidelity, nlohmann::json s) {
  return {{"id", id},
          {"metrics", {{"f1", f1}, {"auc", nullptr}}},
          {"fidelity", fidelity},
          {"fidelity_pruned", nullptr},
          {"tree", nullptr},
          {"agreement", {{"A", nullptr}}},
          {"bias", {{"verdict", nullptr}}},
          {"selection", nlohmann::json::array({{{"alpha", 0.5}, {"s", s}}})},
          {"top_features", nlohmann::json::array()},
          {"shap_top", nlohmann::json::array()},
          {"failures", nlohmann::json::object()}};
}

nlohmann::json bare_report(nlohmann::json models) {
  PipelineConfig cfg;
  return {{"schema_version", kReportSchemaVersion}, {"config", cfg.to_json()}, {"models", std::move(models)}};
}

}  // namespace

TEST(ReportCli, SelectionScore) {
  EXPECT_EQ(selection_score(0.8, 0.3, 1.0).s, 0.8);
  EXPECT_EQ(selection_score(0.8, 0.3, 0.0).s, 0.3);
  EXPECT_NEAR(selection_score(0.9, 0.7, 0.5).s, 0.8, 1e-15);
  EXPECT_NEAR(selection_score(0.9, -3.0, 0.5).s, -1.05, 1e-15);
  EXPECT_THROW(selection_score(0.9, 0.7, 1.5), InvalidArgument);
  EXPECT_THROW(selection_score(0.9, 0.7, -0.1), InvalidArgument);
  EXPECT_THROW(selection_score(1.2, 0.7, 0.5), InvalidArgument);
}

TEST(ReportCli, ConfigParsing) {
  std::istringstream in("# comment\nshap.budget = 0\nmodels = size_zscore, ensemble_ae\ntamper.bands = 10:50,50:90\n");
  const auto cfg = PipelineConfig::parse(in);
  EXPECT_EQ(cfg.shap_budget, 0);
  EXPECT_EQ(cfg.models, (std::vector<std::string>{"size_zscore", "ensemble_ae"}));
  EXPECT_EQ(cfg.tamper_bands, (std::vector<Band>{{10, 50}, {50, 90}}));
  EXPECT_EQ(cfg.values().at("shap.budget"), "exact");

  std::istringstream bad("shap.bugdet = 3\n");
  try {
    PipelineConfig::parse(bad, "x.cfg");
    FAIL() << "expected unknown key";
  } catch (const InvalidArgument& e) {
    EXPECT_NE(std::string(e.what()).find("x.cfg:1"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("shap.bugdet"), std::string::npos);
  }
  PipelineConfig c;
  EXPECT_THROW(c.set("tamper.bands", "50:10"), InvalidArgument);
  EXPECT_THROW(c.set("report.alphas", "0.5,2"), InvalidArgument);
  EXPECT_THROW(c.set("train.rows", "lots"), InvalidArgument);
  std::istringstream noeq("seed 3\n");
  EXPECT_THROW(PipelineConfig::parse(noeq), FormatError);
  EXPECT_THROW(PipelineConfig::load("/nonexistent/cfg"), IoError);
}

TEST(ReportCli, RenderNegativeFidelityAndNa) {
  const auto text = render_report(bare_report({model_row("m1", 0.9, -3.0, -1.05)}));
  EXPECT_NE(text.find("DT explanation fits predictions worse than the mean"), std::string::npos);
  EXPECT_NE(text.find("-3"), std::string::npos);
  EXPECT_NE(text.find("n/a"), std::string::npos);
}

TEST(ReportCli, RenderEmptyModelList) {
  const auto text = render_report(bare_report(nlohmann::json::array()));
  EXPECT_NE(text.find("model"), std::string::npos);
  EXPECT_NE(text.find("S@0.5"), std::string::npos);
  // header line only after the preamble
  const auto table = text.substr(text.find("\n\n") + 2);
  EXPECT_EQ(std::count(table.begin(), table.end(), '\n'), 1);
}

TEST(ReportCli, RenderThreeSignificantDigits) {
  const auto text = render_report(bare_report({model_row("m1", 0.912345, 0.5, 0.706172)}));
  EXPECT_NE(text.find("0.912"), std::string::npos);
  EXPECT_NE(text.find("0.706"), std::string::npos);
  EXPECT_EQ(text.find("0.9123"), std::string::npos);
}

TEST(ReportCli, BrokenModelLeavesNaCells) {
  oracle::TempDir dir("broken");
  const auto cfg = small_config("broken_score,size_zscore");
  const auto res = run_pipeline(cfg, dir.path);
  EXPECT_EQ(res.exit_code, 2);
  const auto& models = res.report.at("models");
  ASSERT_EQ(models.size(), 2u);
  const bool broken_first = models[0].at("id") == "broken_score";
  const auto& broken = models[broken_first ? 0 : 1];
  const auto& healthy = models[broken_first ? 1 : 0];
  EXPECT_EQ(healthy.at("id"), "size_zscore");
  EXPECT_TRUE(broken.at("metrics").at("auc").is_null());
  EXPECT_TRUE(broken.at("agreement").at("A").is_null());
  EXPECT_TRUE(broken.at("failures").contains("shap"));
  EXPECT_GT(res.report.at("na_cells").get<std::size_t>(), 0u);
  EXPECT_NE(res.text.find("failed shap"), std::string::npos);
  EXPECT_TRUE(std::filesystem::exists(dir / "report.json"));
  EXPECT_FALSE(healthy.at("metrics").at("auc").is_null());
  // labels still come through predict, so F1 survives
  EXPECT_FALSE(broken.at("metrics").at("f1").is_null());
}

TEST(ReportCli, RerunReusesArtifacts) {
  oracle::TempDir dir("rerun");
  auto cfg = small_config("size_zscore");
  const auto first = run_pipeline(cfg, dir.path);
  EXPECT_TRUE(first.skipped.empty());
  const auto report = oracle::TempDir::slurp(dir / "report.json");
  const auto second = run_pipeline(cfg, dir.path);
  EXPECT_TRUE(second.executed.empty()) << second.executed.front();
  EXPECT_EQ(second.skipped.size(), first.executed.size());
  EXPECT_EQ(oracle::TempDir::slurp(dir / "report.json"), report);

  // a changed knob reruns only what depends on it
  cfg.set("cart.min_leaf", "7");
  const auto third = run_pipeline(cfg, dir.path);
  for (const auto& s : third.executed) {
    EXPECT_TRUE(s == "models/size_zscore/distill" || s == "models/size_zscore/agree" || s == "report") << s;
  }
  EXPECT_FALSE(third.executed.empty());
}

TEST(ReportCli, CommandLine) {
#ifdef NIDS_XRAY_CLI
  const char* cli = NIDS_XRAY_CLI;
#else
  const char* cli = std::getenv("NIDS_XRAY_CLI");
  if (cli == nullptr) GTEST_SKIP() << "NIDS_XRAY_CLI not set";
#endif
  oracle::TempDir dir("cli");
  const std::string exe = cli;
  auto sh = [](const std::string& cmd) {
    const int rc = std::system(cmd.c_str());
    return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
  };
  const auto trace = (dir / "t.csv").string();
  ASSERT_EQ(sh(exe + " --seed 2 synth --out " + trace + " > /dev/null"), 0);
  const auto tampered = (dir / "t10.csv").string();
  ASSERT_EQ(sh(exe + " --seed 2 tamper --in " + trace + " --out " + tampered + " > /dev/null"), 0);
  EXPECT_NE(oracle::TempDir::slurp(trace), oracle::TempDir::slurp(tampered));
  EXPECT_NE(sh(exe + " tamper --in /nonexistent.csv --out " + tampered + " 2> /dev/null"), 0);
  EXPECT_NE(sh(exe + " --bogus 2> /dev/null > /dev/null"), 0);

  const auto out = (dir / "run").string();
  const std::string sets =
      " --set synthetic.duration=120 --set synthetic.attack_start=60 --set synthetic.attack_packets=3000"
      " --set train.rows=3000 --set models=size_zscore --set distill.iterations=2 --set shap.budget=64"
      " --set shap.background=5 --set shap.rows=4 --set agree.rows=4 --set agree.min_rows=100 --set tamper.bands=10:50";
  const int rc = sh(exe + " --seed 4 --out-dir " + out + " run" + sets + " > " + (dir / "run.txt").string() + " 2>&1");
  EXPECT_TRUE(rc == 0 || rc == 2) << rc;
  EXPECT_NE(oracle::TempDir::slurp(dir / "run.txt").find("size_zscore"), std::string::npos);
  ASSERT_EQ(sh(exe + " report --in " + out + "/report.json > " + (dir / "r.txt").string()), 0);
  EXPECT_EQ(oracle::TempDir::slurp(dir / "r.txt"), oracle::TempDir::slurp(dir / "run" / "report.txt"));
}
