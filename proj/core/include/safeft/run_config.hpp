#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include "safeft/data.hpp"
#include "safeft/model.hpp"
#include "safeft/optimizer.hpp"
#include "safeft/scheduler.hpp"

namespace safeft {

struct TaskConfig {
  TaskKind kind = TaskKind::Parity;
  std::size_t n = 10000;
  std::size_t seq_len = 8;
  TaskOptions options;
  /// JSONL file to load instead of generating; `kind` is then only a label.
  std::optional<std::filesystem::path> path;
};

struct TrainConfig {
  int epochs = 40;
  std::size_t batch_size = 32;
  /// Minimum number of (example, position) rows fed to each CKA probe.
  std::size_t probe_rows = 512;
};

struct AnalysisConfig {
  double landscape_range = 1.0;
  int landscape_steps = 11;
  int spectrum_k = 5;
  double spectrum_tol = 1e-4;
  int spectrum_max_iter = 200;
  std::uint64_t seed = 0;
};

struct RunConfig {
  std::uint64_t seed = 0;
  ModelConfig model;
  TaskConfig task;
  ScheduleConfig schedule;
  AdamWConfig optimizer;
  TrainConfig train;
  AnalysisConfig analysis;

  /// Throws ConfigError naming the offending field.
  void validate() const;
};

/// Command-line values that replace entries of the config tree before
/// parsing, so derived defaults (e.g. the random-drop seed) follow them.
struct ConfigOverrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::string> policy;
};

/// Parses a JSON config tree. Missing keys take defaults; unknown keys and
/// ill-typed values raise ConfigError with the dotted field path. Epoch
/// defaults (t_f at 60%, warm-up cap at 30% of train.epochs) are resolved.
RunConfig parse_config(const std::string& text, const ConfigOverrides& overrides = {});
RunConfig load_config(const std::filesystem::path& path, const ConfigOverrides& overrides = {});

/// Fully resolved config as pretty-printed JSON with a fixed key order.
std::string dump_config(const RunConfig& config);

}  // namespace safeft
