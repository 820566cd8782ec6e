#include "safeft/scheduler.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>

namespace safeft {

std::string policy_name(FreezePolicy policy) {
  switch (policy) {
    case FreezePolicy::Safe: return "safe";
    case FreezePolicy::None: return "none";
    case FreezePolicy::RandomDrop: return "random";
  }
  return "unknown";
}

FreezePolicy parse_policy(const std::string& name) {
  if (name == "safe") return FreezePolicy::Safe;
  if (name == "none") return FreezePolicy::None;
  if (name == "random" || name == "random_drop") return FreezePolicy::RandomDrop;
  throw ConfigError("schedule.policy: unknown policy '" + name + "' (expected safe, none or random)");
}

void ScheduleConfig::validate(const std::string& prefix) const {
  auto fail = [&](const std::string& field, const std::string& why) {
    throw ConfigError(prefix + "." + field + ": " + why);
  };
  if (!(tau_final > 0.0 && tau_final < 1.0)) fail("tau_T", "must lie in (0, 1)");
  if (total_epochs < 1) fail("total_epochs", "must be >= 1");
  if (final_epoch < 1 || final_epoch > total_epochs) fail("t_f", "must lie in [1, total_epochs]");
  if (warmup_epochs) {
    if (*warmup_epochs < 0) fail("warmup", "must be >= 0");
    if (*warmup_epochs >= final_epoch) fail("warmup", "must be < t_f");
  }
  if (warmup_cap < 0 || warmup_cap >= final_epoch) fail("warmup_cap", "must lie in [0, t_f)");
  if (!(random_rate >= 0.0 && random_rate <= 1.0)) fail("random_rate", "must lie in [0, 1]");
}

double threshold(int epoch, std::optional<int> warmup_end, int final_epoch, double tau_final) {
  if (!warmup_end || epoch < *warmup_end) return 0.0;
  if (epoch >= final_epoch) return tau_final;
  const double progress =
      static_cast<double>(epoch - *warmup_end) / static_cast<double>(final_epoch - *warmup_end);
  const double rest = 1.0 - progress;
  return tau_final - tau_final * rest * rest * rest;
}

bool warmup_converged(std::span<const ImportanceRecord> history) {
  if (history.size() < 2) return false;
  const auto& prev = history[history.size() - 2];
  const auto& cur = history.back();
  if (prev.scores.size() != cur.scores.size()) throw std::invalid_argument("warmup_converged: adapter count changed");
  // Guard band so that decimal boundary inputs (0.20 -> 0.21) land on the
  // non-converged side of the strict comparison.
  constexpr double guard = 1e-12;
  for (std::size_t i = 0; i < cur.scores.size(); ++i) {
    const double p = prev.effective(i);
    const double c = cur.effective(i);
    const double delta = std::abs(c - p);
    if (p < kRelativeChangeFloor) {
      if (!(delta < kRelativeChangeFloor)) return false;
    } else if (!(delta / p < kWarmupTolerance - guard)) {
      return false;
    }
  }
  return true;
}

std::vector<int> select_candidates(const ImportanceRecord& record, double tau_final) {
  std::vector<int> out;
  for (std::size_t i = 0; i < record.scores.size(); ++i) {
    if (record.effective(i) < tau_final) out.push_back(static_cast<int>(i));
  }
  return out;
}

FreezeScheduler::FreezeScheduler(ScheduleConfig config, int n_adapters)
    : config_(config), n_adapters_(n_adapters), candidate_(static_cast<std::size_t>(n_adapters), false) {
  config_.validate();
}

void FreezeScheduler::resolve_warmup(int epoch) {
  if (warmup_end_) return;
  if (config_.warmup_epochs) {
    if (epoch >= *config_.warmup_epochs) warmup_end_ = epoch;
    return;
  }
  if (warmup_converged(history_) || epoch >= config_.warmup_cap) warmup_end_ = epoch;
}

void FreezeScheduler::choose_candidates(const ImportanceRecord& record) {
  candidates_selected_ = true;
  switch (config_.policy) {
    case FreezePolicy::None:
      break;
    case FreezePolicy::Safe:
      for (int i : select_candidates(record, config_.tau_final)) candidate_[static_cast<std::size_t>(i)] = true;
      break;
    case FreezePolicy::RandomDrop: {
      std::vector<int> order(static_cast<std::size_t>(n_adapters_));
      std::iota(order.begin(), order.end(), 0);
      std::mt19937_64 rng(config_.random_seed);
      std::shuffle(order.begin(), order.end(), rng);
      const auto count = static_cast<std::size_t>(std::lround(config_.random_rate * n_adapters_));
      for (std::size_t i = 0; i < count; ++i) candidate_[static_cast<std::size_t>(order[i])] = true;
      break;
    }
  }
}

FreezeDecision FreezeScheduler::apply_freezing(int epoch, const std::vector<int>& adapters,
                                               const ImportanceRecord& record, double tau, Model& model) {
  FreezeDecision decision{{}, model.cut_layer(), tau};
  for (int i : adapters) {
    if (i < 0 || i >= n_adapters_ || !candidate_[static_cast<std::size_t>(i)]) {
      throw std::logic_error("apply_freezing: adapter " + std::to_string(i) + " is not a freezing candidate");
    }
    if (model.adapter(i).frozen()) continue;
    model.set_adapter(i, AdapterState{AdapterStatus::Frozen, epoch});
    events_.push_back(FreezeEvent{epoch, i, record.effective(static_cast<std::size_t>(i)), tau});
    decision.newly_frozen.push_back(i);
  }
  decision.cut_layer = model.cut_layer();
  return decision;
}

FreezeDecision FreezeScheduler::on_epoch_start(int epoch, const ImportanceRecord& record, Model& model) {
  if (static_cast<int>(record.scores.size()) != n_adapters_) {
    throw std::invalid_argument("importance record has the wrong adapter count");
  }
  history_.push_back(record);
  const bool was_resolved = warmup_end_.has_value();
  resolve_warmup(epoch);
  if (!was_resolved && warmup_end_) choose_candidates(record);

  const double tau = threshold(epoch, warmup_end_, config_.final_epoch, config_.tau_final);
  std::vector<int> to_freeze;
  if (warmup_end_) {
    switch (config_.policy) {
      case FreezePolicy::None:
        break;
      case FreezePolicy::Safe:
        for (int i = 0; i < n_adapters_; ++i) {
          if (candidate_[static_cast<std::size_t>(i)] && !model.adapter(i).frozen() &&
              record.effective(static_cast<std::size_t>(i)) < tau) {
            to_freeze.push_back(i);
          }
        }
        break;
      case FreezePolicy::RandomDrop:
        if (epoch == *warmup_end_) {
          for (int i = 0; i < n_adapters_; ++i) {
            if (candidate_[static_cast<std::size_t>(i)]) to_freeze.push_back(i);
          }
        }
        break;
    }
  }
  return apply_freezing(epoch, to_freeze, record, tau, model);
}

}  // namespace safeft
