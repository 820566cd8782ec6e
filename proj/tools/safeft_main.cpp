// safeft: train, profile, analyze and compare selective adapter freezing runs.
//
// Exit codes: 0 success, 1 configuration or input error, 2 numeric or
// internal failure, 3 IO failure.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "safeft/checkpoint.hpp"
#include "safeft/runner.hpp"

namespace fs = std::filesystem;

namespace {

enum Exit { kOk = 0, kConfig = 1, kNumeric = 2, kIo = 3 };

safeft::RunConfig load(const std::string& path, const std::optional<std::uint64_t>& seed,
                       const std::optional<std::string>& policy) {
  safeft::ConfigOverrides o;
  o.seed = seed;
  o.policy = policy;
  if (path.empty()) {
    return safeft::parse_config("{}", o);
  }
  return safeft::load_config(path, o);
}

void write_or_print(const std::string& out, const std::string& text) {
  if (out.empty()) {
    std::cout << text;
    return;
  }
  std::ofstream f(out, std::ios::binary | std::ios::trunc);
  if (!f) throw safeft::IoError("cannot open " + out + " for writing");
  f << text;
  if (!f) throw safeft::IoError("write failed for " + out);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Selective adapter freezing for LoRA fine-tuning on a small transformer"};
  app.require_subcommand(1);

  std::string config_path, out, which;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> policy;
  std::vector<std::string> runs;
  unsigned threads = 0;
  bool verbose = false;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "JSON config file (defaults apply when omitted)");
    sub->add_option("--seed", seed, "Override the config seed");
    sub->add_option("--policy", policy, "Override the freezing policy")
        ->check(CLI::IsMember({"safe", "none", "random"}));
    sub->add_flag("-v,--verbose", verbose, "Per-epoch progress on stderr");
  };

  auto* train = app.add_subcommand("train", "Train one run and write its run directory");
  add_common(train);
  train->add_option("--out", out, "Run directory")->required();

  auto* profile = app.add_subcommand("profile", "Per-layer single-adapter ablation and similarity trajectory");
  add_common(profile);
  profile->add_option("--out", out, "Output directory")->required();

  auto* analyze = app.add_subcommand("analyze", "Post-hoc analysis of a completed run");
  analyze->add_option("run_dir", config_path, "Completed run directory")->required();
  analyze->add_option("--which", which, "Instrument to run")
      ->required()
      ->check(CLI::IsMember({"landscape", "spectrum", "penalty", "trajectory"}));
  analyze->add_option("--threads", threads, "Worker threads (default: SAFEFT_NUM_THREADS or all cores)");

  auto* report = app.add_subcommand("report", "Compare runs against the first one");
  report->add_option("runs", runs, "Run directories")->required()->expected(2, -1);
  report->add_option("--out", out, "CSV output file (stdout when omitted)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfig;
  }

  try {
    if (*train) {
      const auto config = load(config_path, seed, policy);
      const auto summary = safeft::cmd_train(config, out, verbose);
      std::printf("run complete: %s\n", out.c_str());
      std::printf("final valid accuracy %.4f, eval loss %.6f\n", summary.final_valid_accuracy,
                  summary.final_eval_loss);
      std::printf("reduction after warm-up: activation %s, optimizer %s, backward FLOPs %s\n",
                  safeft::format_percent(summary.after_warmup.activation_bytes).c_str(),
                  safeft::format_percent(summary.after_warmup.optimizer_bytes).c_str(),
                  safeft::format_percent(summary.after_warmup.backward_flops).c_str());
    } else if (*profile) {
      const auto config = load(config_path, seed, policy);
      const auto result = safeft::cmd_profile(config, out, verbose);
      std::printf("layer,valid_accuracy,activation_bytes\n");
      for (const auto& r : result.rows) std::printf("%d,%.4f,%zu\n", r.layer, r.valid_accuracy, r.activation_bytes);
    } else if (*analyze) {
      const auto path = safeft::cmd_analyze(config_path, safeft::parse_analysis(which), threads);
      std::printf("%s\n", path.string().c_str());
    } else if (*report) {
      std::vector<fs::path> dirs(runs.begin(), runs.end());
      const auto tables = safeft::cmd_report(dirs);
      write_or_print(out, tables.comparison);
      if (tables.flatness) {
        if (out.empty()) {
          std::cout << '\n' << *tables.flatness;
        } else {
          write_or_print(fs::path(out).replace_extension(".flatness.csv").string(), *tables.flatness);
        }
      }
    }
  } catch (const safeft::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kConfig;
  } catch (const safeft::DataError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return kConfig;
  } catch (const safeft::IoError& e) {
    std::fprintf(stderr, "io error: %s\n", e.what());
    return kIo;
  } catch (const safeft::CheckpointError& e) {
    std::fprintf(stderr, "io error: %s\n", e.what());
    return kIo;
  } catch (const fs::filesystem_error& e) {
    std::fprintf(stderr, "io error: %s\n", e.what());
    return kIo;
  } catch (const safeft::NumericError& e) {
    std::fprintf(stderr, "numeric error: %s\n", e.what());
    return kNumeric;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kNumeric;
  }
  return kOk;
}
