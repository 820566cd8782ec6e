#include "safeft/data.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "json.hpp"

namespace safeft {

namespace {

using json = nlohmann::json;

std::uint64_t mix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace

std::string split_name(Split split) {
  switch (split) {
    case Split::Train: return "train";
    case Split::Valid: return "valid";
    case Split::Probe: return "probe";
  }
  return "train";
}

std::optional<Split> parse_split(const std::string& name) {
  if (name == "train") return Split::Train;
  if (name == "valid") return Split::Valid;
  if (name == "probe") return Split::Probe;
  return std::nullopt;
}

std::vector<Example> Dataset::split(Split which) const {
  std::vector<Example> out;
  for (const auto& e : examples) {
    if (e.split == which) out.push_back(e);
  }
  return out;
}

std::size_t Dataset::max_length() const {
  std::size_t n = 0;
  for (const auto& e : examples) n = std::max(n, e.tokens.size());
  return n;
}

std::string task_name(TaskKind kind) {
  switch (kind) {
    case TaskKind::Parity: return "parity";
    case TaskKind::Majority: return "majority";
    case TaskKind::CopyFirstToken: return "copy_first_token";
  }
  return "parity";
}

TaskKind parse_task(const std::string& name, const std::string& field) {
  if (name == "parity") return TaskKind::Parity;
  if (name == "majority") return TaskKind::Majority;
  if (name == "copy_first_token") return TaskKind::CopyFirstToken;
  throw ConfigError(field + ": unknown task '" + name + "' (expected parity, majority or copy_first_token)");
}

void assign_splits(Dataset& dataset, std::uint64_t seed) {
  const std::size_t n = dataset.examples.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(mix(seed ^ 0x5151));
  std::shuffle(order.begin(), order.end(), rng);
  const std::size_t n_train = n * 8 / 10;
  const std::size_t n_valid = n / 10;
  for (std::size_t i = 0; i < n; ++i) {
    Split s = i < n_train ? Split::Train : (i < n_train + n_valid ? Split::Valid : Split::Probe);
    dataset.examples[order[i]].split = s;
  }
}

Dataset gen_task(TaskKind kind, std::size_t n, std::size_t seq_len, std::size_t vocab_size, std::uint64_t seed,
                 const TaskOptions& options) {
  if (n < 10) throw ConfigError("task.n: must be >= 10");
  if (seq_len < 1) throw ConfigError("task.seq_len: must be >= 1");
  Dataset ds;
  ds.vocab_size = vocab_size;
  std::mt19937_64 rng(mix(seed));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  ds.examples.resize(n);

  switch (kind) {
    case TaskKind::Parity: {
      if (vocab_size < 3) throw ConfigError("model.vocab_size: parity needs at least 3 tokens");
      if (!(options.marker_prob > 0.0 && options.marker_prob < 1.0)) {
        throw ConfigError("task.marker_prob: must lie in (0, 1)");
      }
      std::uniform_int_distribution<std::int64_t> filler(2, static_cast<std::int64_t>(vocab_size) - 1);
      for (auto& e : ds.examples) {
        e.tokens.resize(seq_len);
        std::int64_t count = 0;
        for (auto& t : e.tokens) {
          if (unit(rng) < options.marker_prob) {
            t = 1;
            ++count;
          } else {
            t = filler(rng);
          }
        }
        e.label = count % 2;
      }
      ds.n_classes = 2;
      break;
    }
    case TaskKind::Majority: {
      if (vocab_size < 4) throw ConfigError("model.vocab_size: majority needs at least 4 tokens");
      std::uniform_int_distribution<std::int64_t> filler(3, static_cast<std::int64_t>(vocab_size) - 1);
      const std::size_t odd_counts = (seq_len + 1) / 2;
      std::uniform_int_distribution<std::size_t> pick_count(0, odd_counts - 1);
      std::bernoulli_distribution coin(0.5);
      for (auto& e : ds.examples) {
        const std::size_t markers = 2 * pick_count(rng) + 1;
        std::vector<std::size_t> pos(seq_len);
        std::iota(pos.begin(), pos.end(), 0);
        std::shuffle(pos.begin(), pos.end(), rng);
        e.tokens.resize(seq_len);
        for (auto& t : e.tokens) t = filler(rng);
        std::size_t ones = 0;
        for (std::size_t m = 0; m < markers; ++m) {
          const bool one = coin(rng);
          e.tokens[pos[m]] = one ? 1 : 2;
          ones += one ? 1 : 0;
        }
        e.label = 2 * ones > markers ? 0 : 1;
      }
      ds.n_classes = 2;
      break;
    }
    case TaskKind::CopyFirstToken: {
      const std::size_t buckets = options.n_buckets;
      if (buckets < 2) throw ConfigError("task.n_buckets: must be >= 2");
      if (vocab_size < buckets + 1) throw ConfigError("model.vocab_size: must exceed task.n_buckets");
      std::uniform_int_distribution<std::int64_t> token(1, static_cast<std::int64_t>(vocab_size) - 1);
      const auto usable = static_cast<std::int64_t>(vocab_size - 1);
      for (auto& e : ds.examples) {
        e.tokens.resize(seq_len);
        for (auto& t : e.tokens) t = token(rng);
        e.label = (e.tokens[0] - 1) * static_cast<std::int64_t>(buckets) / usable;
      }
      ds.n_classes = buckets;
      break;
    }
  }
  assign_splits(ds, seed);
  return ds;
}

void save_jsonl(const Dataset& dataset, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  for (const auto& e : dataset.examples) {
    json line = json::object();
    line["tokens"] = e.tokens;
    line["label"] = e.label;
    line["split"] = split_name(e.split);
    out << line.dump() << '\n';
  }
  if (!out) throw IoError("write failed for " + path.string());
}

Dataset parse_jsonl(std::istream& in, const LoadOptions& options) {
  Dataset ds;
  ds.vocab_size = options.vocab_size;
  std::string text;
  std::size_t line_no = 0;
  bool any_split = false, all_split = true;
  std::int64_t max_label = 0;
  auto fail = [&](const std::string& why) -> DataError {
    return DataError("line " + std::to_string(line_no) + ": " + why);
  };
  while (std::getline(in, text)) {
    ++line_no;
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    json obj;
    try {
      obj = json::parse(text);
    } catch (const json::parse_error& e) {
      throw fail(std::string("malformed JSON (") + e.what() + ")");
    }
    if (!obj.is_object()) throw fail("expected a JSON object");
    if (!obj.contains("tokens") || !obj["tokens"].is_array()) throw fail("missing integer array \"tokens\"");
    if (!obj.contains("label") || !obj["label"].is_number_integer()) throw fail("missing integer \"label\"");
    Example e;
    for (const auto& t : obj["tokens"]) {
      if (!t.is_number_integer()) throw fail("token is not an integer");
      const auto id = t.get<std::int64_t>();
      if (id < 1 || static_cast<std::size_t>(id) >= options.vocab_size) {
        throw fail("token id " + std::to_string(id) + " outside [1, " + std::to_string(options.vocab_size) + ")");
      }
      e.tokens.push_back(id);
    }
    if (e.tokens.empty()) throw fail("empty token sequence");
    if (e.tokens.size() > options.max_seq) {
      throw fail("sequence length " + std::to_string(e.tokens.size()) + " exceeds max_seq " +
                 std::to_string(options.max_seq));
    }
    e.label = obj["label"].get<std::int64_t>();
    if (e.label < 0) throw fail("negative label");
    if (options.n_classes && static_cast<std::size_t>(e.label) >= *options.n_classes) {
      throw fail("label " + std::to_string(e.label) + " outside [0, " + std::to_string(*options.n_classes) + ")");
    }
    max_label = std::max(max_label, e.label);
    if (obj.contains("split")) {
      if (!obj["split"].is_string()) throw fail("\"split\" must be a string");
      const auto s = parse_split(obj["split"].get<std::string>());
      if (!s) throw fail("unknown split \"" + obj["split"].get<std::string>() + "\"");
      e.split = *s;
      any_split = true;
    } else {
      all_split = false;
    }
    ds.examples.push_back(std::move(e));
  }
  if (ds.examples.empty()) throw DataError("empty dataset");
  if (any_split && !all_split) throw DataError("either every line or no line may carry \"split\"");
  ds.n_classes = options.n_classes.value_or(std::max<std::size_t>(2, static_cast<std::size_t>(max_label) + 1));
  if (!any_split) assign_splits(ds, options.seed);
  return ds;
}

Dataset load_jsonl(const std::filesystem::path& path, const LoadOptions& options) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open dataset " + path.string());
  return parse_jsonl(in, options);
}

std::vector<Batch> make_batches(std::span<const Example> examples, std::size_t batch_size, std::size_t seq) {
  if (batch_size == 0) throw std::invalid_argument("batch size must be positive");
  std::vector<Batch> out;
  for (std::size_t start = 0; start < examples.size(); start += batch_size) {
    const std::size_t n = std::min(batch_size, examples.size() - start);
    Batch b;
    b.size = n;
    b.seq = seq;
    b.tokens.assign(n * seq, 0);
    for (std::size_t i = 0; i < n; ++i) {
      const auto& e = examples[start + i];
      if (e.tokens.size() > seq) throw std::invalid_argument("example longer than batch width");
      std::copy(e.tokens.begin(), e.tokens.end(), b.tokens.begin() + static_cast<std::ptrdiff_t>(i * seq));
      b.lengths.push_back(static_cast<std::int64_t>(e.tokens.size()));
      b.labels.push_back(e.label);
    }
    out.push_back(std::move(b));
  }
  return out;
}

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(mix(seed ^ mix(static_cast<std::uint64_t>(epoch) + 1)));
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

}  // namespace safeft
