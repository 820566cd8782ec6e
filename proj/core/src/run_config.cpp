#include "safeft/run_config.hpp"

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"

namespace safeft {

namespace {

using json = nlohmann::ordered_json;

// Typed access to one JSON object that remembers which keys were read, so
// leftovers can be reported as unknown fields.
class Section {
 public:
  Section(const json& node, std::string path) : node_(node), path_(std::move(path)) {
    if (!node_.is_object()) throw ConfigError(label() + ": expected an object");
  }

  std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  bool has(const std::string& key) const { return node_.contains(key) && !node_.at(key).is_null(); }

  Section child(const std::string& key) {
    seen_.insert(key);
    static const json empty = json::object();
    return Section(has(key) ? node_.at(key) : empty, field(key));
  }

  const json& raw(const std::string& key) {
    seen_.insert(key);
    return node_.at(key);
  }

  double number(const std::string& key, double fallback) {
    seen_.insert(key);
    if (!has(key)) return fallback;
    const auto& v = node_.at(key);
    if (!v.is_number()) throw ConfigError(field(key) + ": expected a number");
    const double d = v.get<double>();
    if (!std::isfinite(d)) throw ConfigError(field(key) + ": must be finite");
    return d;
  }

  std::int64_t integer(const std::string& key, std::int64_t fallback) {
    seen_.insert(key);
    if (!has(key)) return fallback;
    const auto& v = node_.at(key);
    if (!v.is_number_integer()) throw ConfigError(field(key) + ": expected an integer");
    return v.get<std::int64_t>();
  }

  std::size_t count(const std::string& key, std::size_t fallback) {
    const auto v = integer(key, static_cast<std::int64_t>(fallback));
    if (v < 0) throw ConfigError(field(key) + ": must be non-negative");
    return static_cast<std::size_t>(v);
  }

  std::uint64_t seed(const std::string& key, std::uint64_t fallback) {
    seen_.insert(key);
    if (!has(key)) return fallback;
    const auto& v = node_.at(key);
    if (!v.is_number_unsigned()) throw ConfigError(field(key) + ": expected a non-negative integer");
    return v.get<std::uint64_t>();
  }

  std::string text(const std::string& key, const std::string& fallback) {
    seen_.insert(key);
    if (!has(key)) return fallback;
    const auto& v = node_.at(key);
    if (!v.is_string()) throw ConfigError(field(key) + ": expected a string");
    return v.get<std::string>();
  }

  void reject_unknown() const {
    for (const auto& [key, value] : node_.items()) {
      if (!seen_.count(key)) throw ConfigError(field(key) + ": unknown field");
    }
  }

 private:
  std::string label() const { return path_.empty() ? "config" : path_; }

  const json& node_;
  std::string path_;
  std::set<std::string> seen_;
};

}  // namespace

void RunConfig::validate() const {
  model.validate("model");
  schedule.validate("schedule");
  if (train.epochs < 1) throw ConfigError("train.epochs: must be >= 1");
  if (train.batch_size < 1) throw ConfigError("train.batch_size: must be >= 1");
  if (train.probe_rows < 2) throw ConfigError("train.probe_rows: must be >= 2");
  if (schedule.total_epochs != train.epochs) throw ConfigError("schedule.total_epochs: must equal train.epochs");
  if (task.n < 10) throw ConfigError("task.n: must be >= 10");
  if (task.seq_len < 1 || task.seq_len > model.max_seq) throw ConfigError("task.seq_len: must lie in [1, model.max_seq]");
  if (!(optimizer.lr > 0.0)) throw ConfigError("optimizer.lr: must be positive");
  if (!(optimizer.beta1 >= 0.0 && optimizer.beta1 < 1.0)) throw ConfigError("optimizer.beta1: must lie in [0, 1)");
  if (!(optimizer.beta2 >= 0.0 && optimizer.beta2 < 1.0)) throw ConfigError("optimizer.beta2: must lie in [0, 1)");
  if (!(optimizer.eps > 0.0)) throw ConfigError("optimizer.eps: must be positive");
  if (optimizer.weight_decay < 0.0) throw ConfigError("optimizer.weight_decay: must be non-negative");
  if (!(analysis.landscape_range > 0.0)) throw ConfigError("analysis.landscape_range: must be positive");
  if (analysis.landscape_steps < 1 || analysis.landscape_steps % 2 == 0) {
    throw ConfigError("analysis.landscape_steps: must be a positive odd integer");
  }
  if (analysis.spectrum_k < 1) throw ConfigError("analysis.spectrum_k: must be >= 1");
  if (!(analysis.spectrum_tol > 0.0)) throw ConfigError("analysis.spectrum_tol: must be positive");
  if (analysis.spectrum_max_iter < 1) throw ConfigError("analysis.spectrum_max_iter: must be >= 1");
}

RunConfig parse_config(const std::string& text, const ConfigOverrides& overrides) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config: malformed JSON (") + e.what() + ")");
  }
  if (!root.is_object()) throw ConfigError("config: expected an object");
  if (overrides.seed) root["seed"] = *overrides.seed;
  if (overrides.policy) {
    if (!root.contains("schedule") || root["schedule"].is_null()) root["schedule"] = json::object();
    if (!root["schedule"].is_object()) throw ConfigError("schedule: expected an object");
    root["schedule"]["policy"] = *overrides.policy;
  }
  RunConfig c;
  Section top(root, "");
  c.seed = top.seed("seed", 0);

  auto t = top.child("train");
  c.train.epochs = static_cast<int>(t.integer("epochs", c.train.epochs));
  c.train.batch_size = t.count("batch_size", c.train.batch_size);
  c.train.probe_rows = t.count("probe_rows", c.train.probe_rows);
  t.reject_unknown();

  auto task = top.child("task");
  c.task.kind = parse_task(task.text("kind", "parity"), "task.kind");
  c.task.n = task.count("n", c.task.n);
  c.task.seq_len = task.count("seq_len", c.task.seq_len);
  c.task.options.marker_prob = task.number("marker_prob", c.task.options.marker_prob);
  c.task.options.n_buckets = task.count("n_buckets", c.task.options.n_buckets);
  if (task.has("path")) c.task.path = task.text("path", "");
  else task.text("path", "");
  task.reject_unknown();

  auto m = top.child("model");
  c.model.n_layers = static_cast<int>(m.integer("n_layers", c.model.n_layers));
  c.model.d_model = m.count("d_model", c.model.d_model);
  c.model.n_heads = m.count("n_heads", c.model.n_heads);
  c.model.d_ff = m.count("d_ff", c.model.d_ff);
  c.model.vocab_size = m.count("vocab_size", c.model.vocab_size);
  c.model.max_seq = m.count("max_seq", c.model.max_seq);
  c.model.lora_rank = m.count("lora_rank", c.model.lora_rank);
  c.model.lora_alpha = m.number("lora_alpha", c.model.lora_alpha);
  c.model.lora_dropout = m.number("lora_dropout", c.model.lora_dropout);
  const std::size_t task_classes = c.task.kind == TaskKind::CopyFirstToken ? c.task.options.n_buckets : 2;
  c.model.n_classes = m.count("n_classes", task_classes);
  m.reject_unknown();

  auto s = top.child("schedule");
  c.schedule.policy = parse_policy(s.text("policy", "safe"));
  c.schedule.tau_final = s.number("tau_T", c.schedule.tau_final);
  c.schedule.total_epochs = c.train.epochs;
  c.schedule.final_epoch =
      static_cast<int>(s.integer("t_f", static_cast<std::int64_t>(std::lround(0.6 * c.train.epochs))));
  if (s.has("warmup")) {
    const auto& w = s.raw("warmup");
    if (w.is_string()) {
      if (w.get<std::string>() != "auto") throw ConfigError("schedule.warmup: expected \"auto\" or an integer");
    } else if (w.is_number_integer()) {
      c.schedule.warmup_epochs = static_cast<int>(w.get<std::int64_t>());
    } else {
      throw ConfigError("schedule.warmup: expected \"auto\" or an integer");
    }
  } else {
    s.text("warmup", "auto");
  }
  c.schedule.warmup_cap =
      static_cast<int>(s.integer("warmup_cap", static_cast<std::int64_t>(std::lround(0.3 * c.train.epochs))));
  c.schedule.random_rate = s.number("random_rate", c.schedule.random_rate);
  c.schedule.random_seed = s.seed("random_seed", c.seed);
  s.reject_unknown();

  auto o = top.child("optimizer");
  c.optimizer.lr = o.number("lr", c.optimizer.lr);
  c.optimizer.beta1 = o.number("beta1", c.optimizer.beta1);
  c.optimizer.beta2 = o.number("beta2", c.optimizer.beta2);
  c.optimizer.eps = o.number("eps", c.optimizer.eps);
  c.optimizer.weight_decay = o.number("weight_decay", c.optimizer.weight_decay);
  o.reject_unknown();

  auto a = top.child("analysis");
  c.analysis.landscape_range = a.number("landscape_range", c.analysis.landscape_range);
  c.analysis.landscape_steps = static_cast<int>(a.integer("landscape_steps", c.analysis.landscape_steps));
  c.analysis.spectrum_k = static_cast<int>(a.integer("spectrum_k", c.analysis.spectrum_k));
  c.analysis.spectrum_tol = a.number("spectrum_tol", c.analysis.spectrum_tol);
  c.analysis.spectrum_max_iter = static_cast<int>(a.integer("spectrum_max_iter", c.analysis.spectrum_max_iter));
  c.analysis.seed = a.seed("seed", c.seed);
  a.reject_unknown();

  top.reject_unknown();
  c.validate();
  return c;
}

RunConfig load_config(const std::filesystem::path& path, const ConfigOverrides& overrides) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open config " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str(), overrides);
}

std::string dump_config(const RunConfig& c) {
  json root;
  root["seed"] = c.seed;
  root["model"] = {{"n_layers", c.model.n_layers},       {"d_model", c.model.d_model},
                   {"n_heads", c.model.n_heads},         {"d_ff", c.model.d_ff},
                   {"vocab_size", c.model.vocab_size},   {"max_seq", c.model.max_seq},
                   {"n_classes", c.model.n_classes},     {"lora_rank", c.model.lora_rank},
                   {"lora_alpha", c.model.lora_alpha},   {"lora_dropout", c.model.lora_dropout}};
  json task = {{"kind", task_name(c.task.kind)},
               {"n", c.task.n},
               {"seq_len", c.task.seq_len},
               {"marker_prob", c.task.options.marker_prob},
               {"n_buckets", c.task.options.n_buckets}};
  if (c.task.path) task["path"] = c.task.path->string();
  root["task"] = task;
  json sched = {{"policy", policy_name(c.schedule.policy)}, {"tau_T", c.schedule.tau_final},
                {"t_f", c.schedule.final_epoch}};
  if (c.schedule.warmup_epochs) sched["warmup"] = *c.schedule.warmup_epochs;
  else sched["warmup"] = "auto";
  sched["warmup_cap"] = c.schedule.warmup_cap;
  sched["random_rate"] = c.schedule.random_rate;
  sched["random_seed"] = c.schedule.random_seed;
  root["schedule"] = sched;
  root["optimizer"] = {{"lr", c.optimizer.lr},
                       {"beta1", c.optimizer.beta1},
                       {"beta2", c.optimizer.beta2},
                       {"eps", c.optimizer.eps},
                       {"weight_decay", c.optimizer.weight_decay}};
  root["train"] = {{"epochs", c.train.epochs}, {"batch_size", c.train.batch_size}, {"probe_rows", c.train.probe_rows}};
  root["analysis"] = {{"landscape_range", c.analysis.landscape_range},
                      {"landscape_steps", c.analysis.landscape_steps},
                      {"spectrum_k", c.analysis.spectrum_k},
                      {"spectrum_tol", c.analysis.spectrum_tol},
                      {"spectrum_max_iter", c.analysis.spectrum_max_iter},
                      {"seed", c.analysis.seed}};
  return root.dump(2) + "\n";
}

}  // namespace safeft
