#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "safeft/importance.hpp"
#include "safeft/model.hpp"

namespace safeft {

enum class FreezePolicy : std::uint8_t { Safe, None, RandomDrop };

std::string policy_name(FreezePolicy policy);
FreezePolicy parse_policy(const std::string& name);

struct ScheduleConfig {
  FreezePolicy policy = FreezePolicy::Safe;
  double tau_final = 0.1;
  int total_epochs = 40;
  /// Final freezing epoch t_f.
  int final_epoch = 24;
  /// Fixed warm-up length; nullopt selects the 5% convergence rule.
  std::optional<int> warmup_epochs;
  /// Upper bound on the auto-detected warm-up.
  int warmup_cap = 12;
  double random_rate = 0.5;
  std::uint64_t random_seed = 0;

  void validate(const std::string& prefix = "schedule") const;
};

/// Cubic ramp: 0 before t_w, tau_T - tau_T (1 - (t - t_w)/(t_f - t_w))^3
/// between, tau_T from t_f on. An unresolved warm-up yields 0.
double threshold(int epoch, std::optional<int> warmup_end, int final_epoch, double tau_final);

inline constexpr double kWarmupTolerance = 0.05;

/// True iff every adapter's relative change between the last two records is
/// strictly below 5%. A previous score under the floor compares the absolute
/// change against the floor instead.
bool warmup_converged(std::span<const ImportanceRecord> history);

/// { i : Imp_i < tau_T }.
std::vector<int> select_candidates(const ImportanceRecord& record, double tau_final);

struct FreezeEvent {
  int epoch;
  int adapter;
  double importance;
  double threshold;
};

struct FreezeDecision {
  std::vector<int> newly_frozen;
  int cut_layer;
  double threshold;
};

/// Epoch-boundary state machine over adapter status.
class FreezeScheduler {
 public:
  FreezeScheduler(ScheduleConfig config, int n_adapters);

  /// Runs the epoch-start decision on the record probed at `epoch` and
  /// applies freezes to `model`. Must be called once per epoch, in order.
  FreezeDecision on_epoch_start(int epoch, const ImportanceRecord& record, Model& model);

  /// Freezes `adapters` at `epoch`, given the per-adapter scores used to
  /// decide. Rejects any adapter outside the candidate set.
  FreezeDecision apply_freezing(int epoch, const std::vector<int>& adapters, const ImportanceRecord& record,
                                double tau, Model& model);

  const ScheduleConfig& config() const noexcept { return config_; }
  std::optional<int> warmup_end() const noexcept { return warmup_end_; }
  const std::vector<bool>& candidates() const noexcept { return candidate_; }
  bool candidates_selected() const noexcept { return candidates_selected_; }
  const std::vector<FreezeEvent>& events() const noexcept { return events_; }
  const std::vector<ImportanceRecord>& history() const noexcept { return history_; }

 private:
  void resolve_warmup(int epoch);
  void choose_candidates(const ImportanceRecord& record);

  ScheduleConfig config_;
  int n_adapters_;
  std::optional<int> warmup_end_;
  std::vector<bool> candidate_;
  bool candidates_selected_ = false;
  std::vector<FreezeEvent> events_;
  std::vector<ImportanceRecord> history_;
};

}  // namespace safeft
