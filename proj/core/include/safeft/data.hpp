#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "safeft/model.hpp"

namespace safeft {

/// Malformed or out-of-range dataset content.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Filesystem failure (open, read, write).
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Split : std::uint8_t { Train, Valid, Probe };

std::string split_name(Split split);
std::optional<Split> parse_split(const std::string& name);

struct Example {
  std::vector<std::int64_t> tokens;
  std::int64_t label = 0;
  Split split = Split::Train;

  bool operator==(const Example&) const = default;
};

/// Token id 0 is reserved for padding and never appears in examples.
struct Dataset {
  std::vector<Example> examples;
  std::size_t n_classes = 2;
  std::size_t vocab_size = 0;

  std::vector<Example> split(Split which) const;
  std::size_t max_length() const;

  bool operator==(const Dataset&) const = default;
};

enum class TaskKind : std::uint8_t { Parity, Majority, CopyFirstToken };

std::string task_name(TaskKind kind);
/// Throws ConfigError under `field` for an unknown name.
TaskKind parse_task(const std::string& name, const std::string& field = "task.kind");

struct TaskOptions {
  /// parity: probability that a position holds the marker token 1.
  double marker_prob = 0.25;
  /// copy_first_token: number of buckets.
  std::size_t n_buckets = 4;
};

/// Fixed-length synthetic task, split 80/10/10 into train/valid/probe by a
/// seeded shuffle.
///   parity:           label = (number of 1 tokens) mod 2
///   majority:         an odd number of markers 1 and 2; label 0 if 1 wins
///   copy_first_token: label = bucket of the first token id
Dataset gen_task(TaskKind kind, std::size_t n, std::size_t seq_len, std::size_t vocab_size, std::uint64_t seed,
                 const TaskOptions& options = {});

/// Assigns 80/10/10 splits in place by a seeded shuffle of example order.
void assign_splits(Dataset& dataset, std::uint64_t seed);

/// One object per line: {"tokens": [...], "label": k, "split": "train"}.
void save_jsonl(const Dataset& dataset, const std::filesystem::path& path);

struct LoadOptions {
  std::size_t vocab_size = 64;
  /// Inferred as max label + 1 (at least 2) when unset.
  std::optional<std::size_t> n_classes;
  std::size_t max_seq = 32;
  /// Used to assign splits when no line carries one.
  std::uint64_t seed = 0;
};

/// Parses and validates a JSONL dataset. Errors cite the 1-based line number.
Dataset load_jsonl(const std::filesystem::path& path, const LoadOptions& options);
Dataset parse_jsonl(std::istream& in, const LoadOptions& options);

/// Packs examples into padded batches of at most `batch_size`, in order.
/// Every batch is padded to `seq` positions.
std::vector<Batch> make_batches(std::span<const Example> examples, std::size_t batch_size, std::size_t seq);

/// Deterministic per-epoch permutation of [0, n).
std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int epoch);

}  // namespace safeft
