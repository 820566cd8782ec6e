#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include "json.hpp"
#include <sstream>

#include "safeft/checkpoint.hpp"
#include "safeft/runner.hpp"

using namespace safeft;
namespace fs = std::filesystem;

namespace {

const char* kTiny = R"({
  "seed": 3,
  "task": {"kind": "parity", "n": 400, "seq_len": 6},
  "model": {"n_layers": 4, "d_model": 16, "n_heads": 2, "d_ff": 32, "vocab_size": 16, "max_seq": 8},
  "train": {"epochs": 5, "batch_size": 16, "probe_rows": 64},
  "optimizer": {"lr": 0.01},
  "schedule": {"warmup": 1, "t_f": 3},
  "analysis": {"landscape_steps": 3, "spectrum_k": 2, "spectrum_max_iter": 60}
})";

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::string> lines(const fs::path& p) {
  std::ifstream in(p);
  std::vector<std::string> out;
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  for (std::string f; std::getline(ss, f, ',');) out.push_back(f);
  return out;
}

fs::path fresh_dir(const std::string& name) {
  const auto d = fs::temp_directory_path() / ("safeft_test_" + name);
  fs::remove_all(d);
  return d;
}

std::string config_error(const std::string& text) {
  try {
    parse_config(text);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

RunConfig tiny(const std::string& patch = "{}") {
  auto j = nlohmann::json::parse(kTiny);
  j.merge_patch(nlohmann::json::parse(patch));
  return parse_config(j.dump());
}

/// Trained once and shared by the analysis tests.
const fs::path& forced_run() {
  static const fs::path dir = [] {
    auto d = fresh_dir("forced");
    cmd_train(tiny(R"({"schedule": {"tau_T": 0.99}})"), d);
    return d;
  }();
  return dir;
}

const fs::path& none_run() {
  static const fs::path dir = [] {
    auto d = fresh_dir("none");
    cmd_train(tiny(R"({"schedule": {"policy": "none"}})"), d);
    return d;
  }();
  return dir;
}

#ifdef SAFEFT_CLI
int run_cli(const std::string& args) {
  const std::string cmd = std::string(SAFEFT_CLI) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}
#endif

}  // namespace

TEST(Config, DefaultsResolve) {
  const auto c = parse_config("{}");
  EXPECT_EQ(c.train.epochs, 40);
  EXPECT_EQ(c.schedule.total_epochs, 40);
  EXPECT_EQ(c.schedule.final_epoch, 24);
  EXPECT_EQ(c.schedule.warmup_cap, 12);
  EXPECT_FALSE(c.schedule.warmup_epochs.has_value());
  EXPECT_EQ(c.schedule.tau_final, 0.1);
  EXPECT_EQ(c.model.n_layers, 4);
  EXPECT_EQ(c.train.probe_rows, 512u);
  const auto e = parse_config(R"({"train": {"epochs": 10}})");
  EXPECT_EQ(e.schedule.final_epoch, 6);
  EXPECT_EQ(e.schedule.warmup_cap, 3);
}

TEST(Config, ErrorsNameTheField) {
  EXPECT_EQ(config_error(R"({"model": {"d_modle": 8}})").rfind("model.d_modle", 0), 0u);
  EXPECT_EQ(config_error(R"({"colour": 1})").rfind("colour", 0), 0u);
  EXPECT_EQ(config_error(R"({"train": {"epochs": "ten"}})").rfind("train.epochs", 0), 0u);
  EXPECT_EQ(config_error(R"({"schedule": {"tau_T": 1.5}})").rfind("schedule.tau_T", 0), 0u);
  EXPECT_EQ(config_error(R"({"schedule": {"policy": "sometimes"}})").rfind("schedule.policy", 0), 0u);
  EXPECT_EQ(config_error(R"({"task": {"kind": "sorting"}})").rfind("task.kind", 0), 0u);
  EXPECT_EQ(config_error(R"({"model": {"n_heads": 5}})").rfind("model.", 0), 0u);
  EXPECT_NE(config_error("{not json"), "");
}

TEST(Config, OverridesAndRoundTrip) {
  ConfigOverrides o;
  o.seed = 99;
  o.policy = "none";
  const auto c = parse_config(kTiny, o);
  EXPECT_EQ(c.seed, 99u);
  EXPECT_EQ(c.schedule.policy, FreezePolicy::None);
  const auto text = dump_config(c);
  EXPECT_EQ(dump_config(parse_config(text)), text);
  EXPECT_THROW(load_config("/nonexistent/config.json"), IoError);
}

TEST(Train, WritesRunDirectory) {
  const auto& d = none_run();
  for (const char* f : {run_files::config, run_files::metrics, run_files::freeze_pattern, run_files::resources,
                        run_files::summary, run_files::final_checkpoint}) {
    EXPECT_TRUE(fs::exists(d / f)) << f;
  }
  EXPECT_EQ(slurp(d / run_files::status), "complete\n");
  EXPECT_TRUE(fs::exists(d / run_files::snapshot(4)));
  EXPECT_EQ(lines(d / run_files::metrics).size(), 5u);
  EXPECT_EQ(lines(d / run_files::freeze_pattern).front(), "epoch,adapter,frozen,importance");
  EXPECT_EQ(lines(d / run_files::resources).front(), "epoch,activation_bytes,optimizer_bytes,fwd_flops,bwd_flops");
}

TEST(Train, NonePolicyNeverFreezesAndReportsConstant) {
  const auto& d = none_run();
  const auto rows = lines(d / run_files::resources);
  ASSERT_EQ(rows.size(), 6u);
  for (std::size_t i = 2; i < rows.size(); ++i) {
    EXPECT_EQ(rows[i].substr(rows[i].find(',')), rows[1].substr(rows[1].find(',')));
  }
  for (const auto& l : lines(d / run_files::metrics)) EXPECT_TRUE(nlohmann::json::parse(l)["freeze_events"].empty());
  const auto s = nlohmann::json::parse(slurp(d / run_files::summary));
  EXPECT_EQ(s["reduction_final_epoch"]["activation_bytes"], "0.00%");
}

TEST(Train, DeterministicMetrics) {
  const auto a = fresh_dir("det_a"), b = fresh_dir("det_b");
  const auto c = tiny(R"({"train": {"epochs": 3}, "schedule": {"t_f": 2}})");
  cmd_train(c, a);
  cmd_train(parse_config(slurp(a / run_files::config)), b);
  EXPECT_EQ(slurp(a / run_files::metrics), slurp(b / run_files::metrics));
  EXPECT_EQ(slurp(a / run_files::final_checkpoint), slurp(b / run_files::final_checkpoint));
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(Train, ForcedFreezeFreezesAllCandidatesByFinalEpoch) {
  const auto& d = forced_run();
  const auto s = nlohmann::json::parse(slurp(d / run_files::summary));
  for (const auto& e : s["freeze_epochs"]) {
    ASSERT_FALSE(e.is_null());
    EXPECT_LE(e.get<int>(), 3);
    EXPECT_GE(e.get<int>(), 2);
  }
  EXPECT_GT(s["reduction_after_warmup_fraction"]["activation_bytes"].get<double>(), 0.0);
  EXPECT_EQ(s["frozen_fraction"].get<double>(), 1.0);

  // Frozen bytes never move after the freeze epoch.
  const auto final_model = load_model(d / run_files::final_checkpoint);
  for (int i = 0; i < 4; ++i) {
    const int fe = *final_model.adapter(i).freeze_epoch;
    for (int e = fe; e < 5; ++e) {
      const auto snap = read_checkpoint(d / run_files::snapshot(e));
      for (const auto& n : final_model.adapter_parameter_names(i)) {
        EXPECT_EQ(tensor_bytes(snap.tensors.at(n)), tensor_bytes(*final_model.parameter(n).value)) << n << " @" << e;
      }
    }
  }
}

TEST(Analyze, LandscapeCenterIsFinalEvalLoss) {
  const auto& d = forced_run();
  const auto path = cmd_analyze(d, AnalysisKind::Landscape, 1);
  const auto rows = lines(path);
  ASSERT_EQ(rows.size(), 10u);
  EXPECT_EQ(rows[0], "alpha,beta,loss");
  const auto center = split_csv(rows[5]);
  EXPECT_EQ(std::stod(center[0]), 0.0);
  EXPECT_EQ(std::stod(center[1]), 0.0);
  const auto s = nlohmann::json::parse(slurp(d / run_files::summary));
  EXPECT_EQ(std::stod(center[2]), s["final_eval_loss"].get<double>());
}

TEST(Analyze, SpectrumHasKEntries) {
  const auto path = cmd_analyze(forced_run(), AnalysisKind::Spectrum);
  const auto j = nlohmann::json::parse(slurp(path));
  ASSERT_EQ(j["eigenvalues"].size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_TRUE(j["converged"][i].get<bool>() == (j["residuals"][i].get<double>() < 1e-4));
  }
}

TEST(Analyze, PenaltyBookkeeping) {
  const auto none_rows = lines(cmd_analyze(none_run(), AnalysisKind::Penalty));
  ASSERT_EQ(none_rows.size(), 7u);
  for (std::size_t i = 1; i < none_rows.size(); ++i) EXPECT_EQ(std::stod(split_csv(none_rows[i])[1]), 0.0);

  const auto& d = forced_run();
  const auto rows = lines(cmd_analyze(d, AnalysisKind::Penalty));
  const auto final_model = load_model(d / run_files::final_checkpoint);
  for (int i = 0; i < 4; ++i) {
    const int fe = *final_model.adapter(i).freeze_epoch;
    const auto at_freeze = split_csv(rows[static_cast<std::size_t>(fe) + 1])[static_cast<std::size_t>(i) + 2];
    for (std::size_t r = static_cast<std::size_t>(fe) + 1; r < rows.size(); ++r) {
      EXPECT_EQ(split_csv(rows[r])[static_cast<std::size_t>(i) + 2], at_freeze) << "adapter " << i;
    }
  }
}

TEST(Analyze, TrajectoryFinalRowIsOne) {
  const auto rows = lines(cmd_analyze(forced_run(), AnalysisKind::Trajectory));
  ASSERT_EQ(rows.size(), 7u);
  const auto last = split_csv(rows.back());
  EXPECT_EQ(last[0], "5");
  for (std::size_t i = 1; i < last.size(); ++i) EXPECT_NEAR(std::stod(last[i]), 1.0, 1e-12);
}

TEST(Analyze, MissingCheckpointRejected) {
  const auto d = fresh_dir("nockpt");
  fs::create_directories(d);
  std::ofstream(d / run_files::config) << dump_config(tiny());
  EXPECT_THROW(cmd_analyze(d, AnalysisKind::Landscape), IoError);
  EXPECT_THROW(parse_analysis("curvature"), ConfigError);
  fs::remove_all(d);
}

TEST(Report, SelfComparisonAndHeader) {
  const auto t = cmd_report({none_run(), none_run()});
  const auto rows = [&] {
    std::vector<std::string> out;
    std::stringstream ss(t.comparison);
    for (std::string l; std::getline(ss, l);) out.push_back(l);
    return out;
  }();
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[0], kReportHeader);
  const auto f = split_csv(rows[2]);
  ASSERT_EQ(f.size(), 11u);
  for (std::size_t i = 6; i < 11; ++i) EXPECT_EQ(f[i], "0.00") << i;
}

TEST(Report, SafeShowsNegativeDeltas) {
  const auto t = cmd_report({none_run(), forced_run()});
  std::stringstream ss(t.comparison);
  std::string header, base, safe;
  std::getline(ss, header);
  std::getline(ss, base);
  std::getline(ss, safe);
  const auto f = split_csv(safe);
  EXPECT_LT(std::stod(f[7]), 0.0);
  EXPECT_LT(std::stod(f[8]), 0.0);
  EXPECT_LT(std::stod(f[9]), 0.0);
  EXPECT_GT(std::stod(f[10]), 0.0);
}

TEST(Report, TaskMismatchRejected) {
  const auto d = fresh_dir("majority");
  cmd_train(tiny(R"({"task": {"kind": "majority"}, "train": {"epochs": 1}, "schedule": {"warmup": 0, "t_f": 1}})"), d);
  EXPECT_THROW(cmd_report({none_run(), d}), ConfigError);
  EXPECT_THROW(cmd_report({none_run()}), ConfigError);
  fs::remove_all(d);
}

#ifdef SAFEFT_CLI
TEST(Cli, ExitCodes) {
  const auto dir = fresh_dir("cli");
  fs::create_directories(dir);
  std::ofstream(dir / "bad.json") << R"({"model": {"d_modle": 8}})";
  std::ofstream(dir / "tiny.json") << kTiny;
  const auto d = dir.string();
  EXPECT_EQ(run_cli(""), 1);
  EXPECT_EQ(run_cli("train --config " + d + "/bad.json --out " + d + "/r"), 1);
  EXPECT_EQ(run_cli("train --config " + d + "/missing.json --out " + d + "/r"), 3);
  EXPECT_EQ(run_cli("train --config " + d + "/tiny.json --policy bogus --out " + d + "/r"), 1);
  EXPECT_EQ(run_cli("analyze " + d + " --which landscape"), 3);
  EXPECT_EQ(run_cli("train --config " + d + "/tiny.json --seed 4 --policy none --out " + d + "/r"), 0);
  EXPECT_EQ(parse_config(slurp(dir / "r" / run_files::config)).seed, 4u);
  EXPECT_EQ(run_cli("analyze " + d + "/r --which penalty"), 0);
  EXPECT_EQ(run_cli("report " + d + "/r " + d + "/r --out " + d + "/cmp.csv"), 0);
  EXPECT_EQ(lines(dir / "cmp.csv").front(), kReportHeader);
  fs::remove_all(dir);
}
#endif
