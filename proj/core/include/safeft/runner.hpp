#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "safeft/analysis.hpp"
#include "safeft/data.hpp"
#include "safeft/importance.hpp"
#include "safeft/model.hpp"
#include "safeft/resource_model.hpp"
#include "safeft/run_config.hpp"
#include "safeft/scheduler.hpp"

namespace safeft {

struct PreparedData {
  Dataset dataset;
  std::vector<Example> train;
  std::size_t seq = 0;
  /// Evaluation batches over the validation split.
  std::vector<Batch> valid;
  /// CKA probe batches drawn from the probe split.
  std::vector<Batch> probe;
};

/// Generates or loads the task and cuts it into batches.
PreparedData prepare_data(const RunConfig& config);

struct StepInfo {
  int epoch;
  std::uint64_t step;
  int cut_layer;
  const std::vector<bool>& frozen;
  const GradMap& grads;
  std::size_t retained_bytes;
};

struct TrainOptions {
  /// Adapters frozen before the first step and never trained. The frozen
  /// adapters keep B = 0, so the model behaves as if they were absent.
  std::vector<int> disabled_adapters;
  /// Compare modeled bytes and FLOPs against the tape on every step.
  bool verify_accounting = true;
  std::function<void(const StepInfo&)> on_step;
  bool verbose = false;
};

struct EpochLog {
  int epoch = 0;
  double train_loss = 0.0;
  double valid_loss = 0.0;
  double valid_accuracy = 0.0;
  double threshold = 0.0;
  std::optional<int> warmup_end;
  ImportanceRecord importance;
  std::vector<bool> frozen;
  std::vector<FreezeEvent> events;
  ResourceReport resources;
};

struct Reduction {
  double activation_bytes = 0.0;
  double optimizer_bytes = 0.0;
  double backward_flops = 0.0;
};

struct RunSummary {
  std::string policy;
  int epochs = 0;
  std::optional<int> warmup_end;
  double final_valid_accuracy = 0.0;
  double final_eval_loss = 0.0;
  std::vector<std::optional<int>> freeze_epochs;
  double frozen_fraction = 0.0;
  /// Fractional savings summed over epochs from t_w on, relative to the
  /// epoch-0 report at every such epoch.
  Reduction after_warmup;
  /// Savings at the last epoch relative to epoch 0.
  Reduction final_epoch;
};

struct RunResult {
  Model model;
  std::vector<EpochLog> epochs;
  std::vector<FreezeEvent> events;
  RunSummary summary;
};

/// Output files of a run directory.
namespace run_files {
inline constexpr const char* config = "config.json";
inline constexpr const char* metrics = "metrics.jsonl";
inline constexpr const char* freeze_pattern = "freeze_pattern.csv";
inline constexpr const char* resources = "resources.csv";
inline constexpr const char* summary = "summary.json";
inline constexpr const char* status = "status";
inline constexpr const char* checkpoints = "checkpoints";
inline constexpr const char* final_checkpoint = "checkpoints/final.ckpt";
std::filesystem::path snapshot(int epoch);
}  // namespace run_files

/// Per-epoch training loop: probe, schedule, snapshot, train, evaluate,
/// report. With `out_dir` set, every run-directory file is written as it
/// becomes available.
RunResult train(const RunConfig& config, const PreparedData& data, const TrainOptions& options = {},
                const std::optional<std::filesystem::path>& out_dir = std::nullopt);

/// Reduction as a percentage string with two decimals, e.g. "42.85%".
std::string format_percent(double fraction);

RunSummary cmd_train(const RunConfig& config, const std::filesystem::path& out_dir, bool verbose = false);

struct ProfileRow {
  int layer;
  double valid_accuracy;
  std::size_t activation_bytes;
  std::size_t optimizer_bytes;
  std::uint64_t backward_flops;
};

struct ProfileResult {
  std::vector<ProfileRow> rows;
  TrajectoryGrid trajectory;
};

/// Trains one single-adapter variant per layer plus an all-adapter run
/// without freezing, and writes profile.csv and trajectory.csv.
ProfileResult cmd_profile(const RunConfig& config, const std::filesystem::path& out_dir, bool verbose = false);

enum class AnalysisKind { Landscape, Spectrum, Penalty, Trajectory };
AnalysisKind parse_analysis(const std::string& name);

/// Runs one instrument on a completed run directory and writes its output
/// under <run_dir>/analysis. Returns the written file.
std::filesystem::path cmd_analyze(const std::filesystem::path& run_dir, AnalysisKind which, unsigned threads = 0);

struct ReportTables {
  std::string comparison;
  /// Present when every run has a spectrum: run,lambda_max.
  std::optional<std::string> flatness;
};

inline constexpr const char* kReportHeader =
    "run,accuracy,activation_bytes,optimizer_bytes,backward_flops,frozen_fraction,accuracy_delta_pts,"
    "activation_bytes_delta_pct,optimizer_bytes_delta_pct,backward_flops_delta_pct,frozen_fraction_delta_pts";

/// Side-by-side comparison against the first run. Byte and FLOP columns are
/// per-step means over epochs, read from resources.csv.
ReportTables cmd_report(const std::vector<std::filesystem::path>& run_dirs);

}  // namespace safeft
