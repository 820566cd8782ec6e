#include "safeft/runner.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <limits>
#include <map>
#include <sstream>

#include "json.hpp"
#include "safeft/checkpoint.hpp"
#include "safeft/optimizer.hpp"

namespace safeft {

namespace fs = std::filesystem;

namespace {

using json = nlohmann::ordered_json;

std::string fmt(const char* pattern, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, pattern, v);
  return buf;
}

std::string num(double v) {
  if (std::isnan(v)) return "nan";
  return fmt("%.17g", v);
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << text;
  out.flush();
  if (!out) throw IoError("write failed for " + path.string());
}

void make_dirs(const fs::path& path) {
  std::error_code ec;
  fs::create_directories(path, ec);
  if (ec) throw IoError("cannot create " + path.string() + ": " + ec.message());
}

json optional_int(const std::optional<int>& v) { return v ? json(*v) : json(nullptr); }

json report_json(const ResourceReport& r) {
  return {{"cut_layer", r.cut_layer},
          {"activation_bytes", r.activation_bytes},
          {"optimizer_bytes", r.optimizer_bytes},
          {"gradient_bytes", r.gradient_bytes},
          {"parameter_bytes", r.parameter_bytes},
          {"trainable_parameter_count", r.trainable_parameter_count},
          {"forward_flops", r.forward_flops},
          {"backward_flops", r.backward_flops}};
}

json epoch_json(const EpochLog& e) {
  json scores = json::array();
  for (const auto& s : e.importance.scores) scores.push_back(s ? json(*s) : json(nullptr));
  json events = json::array();
  for (const auto& ev : e.events) {
    events.push_back({{"adapter", ev.adapter}, {"importance", ev.importance}, {"threshold", ev.threshold}});
  }
  return {{"epoch", e.epoch},
          {"train_loss", e.train_loss},
          {"valid_loss", e.valid_loss},
          {"valid_accuracy", e.valid_accuracy},
          {"warmup_end", optional_int(e.warmup_end)},
          {"threshold", e.threshold},
          {"importance", scores},
          {"relative_change", e.importance.relative_change},
          {"frozen", e.frozen},
          {"freeze_events", events},
          {"resources", report_json(e.resources)}};
}

json reduction_json(const Reduction& r, bool formatted) {
  if (formatted) {
    return {{"activation_bytes", format_percent(r.activation_bytes)},
            {"optimizer_bytes", format_percent(r.optimizer_bytes)},
            {"backward_flops", format_percent(r.backward_flops)}};
  }
  return {{"activation_bytes", r.activation_bytes},
          {"optimizer_bytes", r.optimizer_bytes},
          {"backward_flops", r.backward_flops}};
}

json summary_json(const RunSummary& s) {
  json freeze = json::array();
  for (const auto& f : s.freeze_epochs) freeze.push_back(optional_int(f));
  return {{"policy", s.policy},
          {"epochs", s.epochs},
          {"warmup_end", optional_int(s.warmup_end)},
          {"final_valid_accuracy", s.final_valid_accuracy},
          {"final_eval_loss", s.final_eval_loss},
          {"freeze_epochs", freeze},
          {"frozen_fraction", s.frozen_fraction},
          {"reduction_after_warmup", reduction_json(s.after_warmup, true)},
          {"reduction_final_epoch", reduction_json(s.final_epoch, true)},
          {"reduction_after_warmup_fraction", reduction_json(s.after_warmup, false)},
          {"reduction_final_epoch_fraction", reduction_json(s.final_epoch, false)}};
}

// Append-only files of a run directory; every line is flushed so a crash
// leaves a readable prefix.
class RunWriter {
 public:
  explicit RunWriter(fs::path dir) : dir_(std::move(dir)) {
    make_dirs(dir_ / run_files::checkpoints);
    open(metrics_, run_files::metrics);
    open(pattern_, run_files::freeze_pattern);
    open(resources_, run_files::resources);
    pattern_ << "epoch,adapter,frozen,importance\n";
    resources_ << "epoch,activation_bytes,optimizer_bytes,fwd_flops,bwd_flops\n";
    check(pattern_, run_files::freeze_pattern);
    check(resources_, run_files::resources);
  }

  void snapshot(const Model& model, int epoch) {
    std::vector<std::string> names;
    for (int i = 0; i < model.n_layers(); ++i) {
      for (auto& n : model.adapter_parameter_names(i)) names.push_back(std::move(n));
    }
    names.push_back(param_names::head_weight);
    names.push_back(param_names::head_bias);
    save(model, run_files::snapshot(epoch), names);
  }

  void epoch(const EpochLog& e) {
    metrics_ << epoch_json(e).dump() << '\n';
    check(metrics_, run_files::metrics);
    for (std::size_t i = 0; i < e.frozen.size(); ++i) {
      const auto& s = e.importance.scores[i];
      pattern_ << e.epoch << ',' << i << ',' << (e.frozen[i] ? 1 : 0) << ',' << (s ? num(*s) : "") << '\n';
    }
    check(pattern_, run_files::freeze_pattern);
    const auto& r = e.resources;
    resources_ << e.epoch << ',' << r.activation_bytes << ',' << r.optimizer_bytes << ',' << r.forward_flops << ','
               << r.backward_flops << '\n';
    check(resources_, run_files::resources);
  }

  void finish(const Model& model, const RunSummary& summary) {
    save(model, run_files::final_checkpoint, {});
    write_file(dir_ / run_files::summary, summary_json(summary).dump(2) + "\n");
  }

 private:
  void open(std::ofstream& out, const char* name) {
    out.open(dir_ / name, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + (dir_ / name).string() + " for writing");
  }

  void check(std::ofstream& out, const char* name) {
    out.flush();
    if (!out) throw IoError("write failed for " + (dir_ / name).string());
  }

  void save(const Model& model, const fs::path& rel, const std::vector<std::string>& names) {
    try {
      save_checkpoint(model, dir_ / rel, names);
    } catch (const CheckpointError& e) {
      throw IoError(e.what());
    }
  }

  fs::path dir_;
  std::ofstream metrics_, pattern_, resources_;
};

Reduction reduction(const ResourceReport& base, double act, double opt, double bwd, double epochs) {
  auto frac = [&](double total, double per_epoch) {
    const double denom = per_epoch * epochs;
    return denom > 0.0 ? 1.0 - total / denom : 0.0;
  };
  return Reduction{frac(act, static_cast<double>(base.activation_bytes)),
                   frac(opt, static_cast<double>(base.optimizer_bytes)),
                   frac(bwd, static_cast<double>(base.backward_flops))};
}

RunSummary summarize(const ScheduleConfig& schedule, const Model& model, const std::vector<EpochLog>& epochs,
                     std::optional<int> warmup_end) {
  RunSummary s;
  s.policy = policy_name(schedule.policy);
  s.epochs = static_cast<int>(epochs.size());
  s.warmup_end = warmup_end;
  s.final_valid_accuracy = epochs.back().valid_accuracy;
  s.final_eval_loss = epochs.back().valid_loss;
  int frozen = 0;
  for (const auto& a : model.adapters()) {
    s.freeze_epochs.push_back(a.frozen() ? a.freeze_epoch : std::nullopt);
    frozen += a.frozen() ? 1 : 0;
  }
  s.frozen_fraction = static_cast<double>(frozen) / static_cast<double>(model.n_layers());
  const auto& base = epochs.front().resources;
  const auto start = static_cast<std::size_t>(warmup_end.value_or(s.epochs));
  double act = 0.0, opt = 0.0, bwd = 0.0;
  for (std::size_t e = start; e < epochs.size(); ++e) {
    act += static_cast<double>(epochs[e].resources.activation_bytes);
    opt += static_cast<double>(epochs[e].resources.optimizer_bytes);
    bwd += static_cast<double>(epochs[e].resources.backward_flops);
  }
  s.after_warmup = reduction(base, act, opt, bwd, static_cast<double>(epochs.size() - std::min(start, epochs.size())));
  const auto& last = epochs.back().resources;
  s.final_epoch = reduction(base, static_cast<double>(last.activation_bytes), static_cast<double>(last.optimizer_bytes),
                            static_cast<double>(last.backward_flops), 1.0);
  return s;
}

std::vector<std::string> snapshot_names(const Model& model) { return ModelObjective::adapter_and_head_names(model); }

struct RunDir {
  RunConfig config;
  PreparedData data;
  Model final_model;
};

RunDir open_run(const fs::path& run_dir) {
  const auto ckpt = run_dir / run_files::final_checkpoint;
  if (!fs::exists(ckpt)) throw IoError("missing checkpoint " + ckpt.string());
  auto config = load_config(run_dir / run_files::config);
  auto data = prepare_data(config);
  Model model = [&] {
    try {
      return load_model(ckpt);
    } catch (const CheckpointError& e) {
      throw IoError(e.what());
    }
  }();
  if (!(model.config() == config.model)) throw ConfigError("model: checkpoint does not match config.json");
  return RunDir{std::move(config), std::move(data), std::move(model)};
}

// Snapshots written at the start of each epoch, as full models.
std::vector<std::pair<int, Model>> load_snapshots(const fs::path& run_dir, const RunDir& run) {
  std::vector<std::pair<int, Model>> out;
  for (int e = 0; e < run.config.train.epochs; ++e) {
    const auto path = run_dir / run_files::snapshot(e);
    if (!fs::exists(path)) throw IoError("missing snapshot " + path.string());
    Model m = run.final_model.clone();
    try {
      apply_checkpoint(m, read_checkpoint(path));
    } catch (const CheckpointError& err) {
      throw IoError(err.what());
    }
    out.emplace_back(e, std::move(m));
  }
  return out;
}

TrajectoryGrid run_trajectory(const fs::path& run_dir, const RunDir& run) {
  const auto snaps = load_snapshots(run_dir, run);
  std::vector<EpochModel> models;
  for (const auto& [e, m] : snaps) models.push_back(EpochModel{e, &m});
  models.push_back(EpochModel{run.config.train.epochs, &run.final_model});
  return trajectory_similarity(models, run.final_model, run.data.probe);
}

std::string trajectory_csv(const TrajectoryGrid& grid) {
  std::ostringstream out;
  out << "epoch";
  const std::size_t layers = grid.similarity.empty() ? 0 : grid.similarity.front().size();
  for (std::size_t i = 0; i < layers; ++i) out << ",layer_" << i;
  out << '\n';
  for (std::size_t r = 0; r < grid.epochs.size(); ++r) {
    out << grid.epochs[r];
    for (double v : grid.similarity[r]) out << ',' << num(v);
    out << '\n';
  }
  return out.str();
}

std::vector<double> flatten(const Model& model, const std::vector<std::string>& names) {
  std::vector<double> out;
  for (const auto& n : names) {
    const auto d = model.parameter(n).value->data();
    out.insert(out.end(), d.begin(), d.end());
  }
  return out;
}

struct ResourceMeans {
  double activation_bytes = 0.0;
  double optimizer_bytes = 0.0;
  double backward_flops = 0.0;
};

ResourceMeans read_resource_means(const fs::path& path) {
  std::istringstream in(read_file(path));
  std::string line;
  std::getline(in, line);
  if (line != "epoch,activation_bytes,optimizer_bytes,fwd_flops,bwd_flops") {
    throw IoError(path.string() + ": unexpected header");
  }
  ResourceMeans m;
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<double> cols;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cols.push_back(std::stod(cell));
    if (cols.size() != 5) throw IoError(path.string() + ": malformed row");
    m.activation_bytes += cols[1];
    m.optimizer_bytes += cols[2];
    m.backward_flops += cols[4];
    ++rows;
  }
  if (rows == 0) throw IoError(path.string() + ": no rows");
  m.activation_bytes /= static_cast<double>(rows);
  m.optimizer_bytes /= static_cast<double>(rows);
  m.backward_flops /= static_cast<double>(rows);
  return m;
}

}  // namespace

fs::path run_files::snapshot(int epoch) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "epoch_%03d.ckpt", epoch);
  return fs::path(checkpoints) / buf;
}

std::string format_percent(double fraction) { return fmt("%.2f%%", 100.0 * fraction); }

PreparedData prepare_data(const RunConfig& config) {
  PreparedData d;
  if (config.task.path) {
    LoadOptions lo;
    lo.vocab_size = config.model.vocab_size;
    lo.n_classes = config.model.n_classes;
    lo.max_seq = config.model.max_seq;
    lo.seed = config.seed;
    d.dataset = load_jsonl(*config.task.path, lo);
  } else {
    d.dataset = gen_task(config.task.kind, config.task.n, config.task.seq_len, config.model.vocab_size, config.seed,
                         config.task.options);
  }
  if (d.dataset.n_classes != config.model.n_classes) {
    throw ConfigError("model.n_classes: task has " + std::to_string(d.dataset.n_classes) + " classes");
  }
  d.seq = d.dataset.max_length();
  d.train = d.dataset.split(Split::Train);
  const auto valid = d.dataset.split(Split::Valid);
  auto probe = d.dataset.split(Split::Probe);
  if (d.train.empty()) throw DataError("dataset has no training examples");
  if (valid.empty()) throw DataError("dataset has no validation examples");
  std::size_t rows = 0, take = 0;
  while (take < probe.size() && rows < config.train.probe_rows) rows += probe[take++].tokens.size();
  if (rows < 2) throw DataError("probe split too small for CKA");
  probe.resize(take);
  d.valid = make_batches(valid, config.train.batch_size, d.seq);
  d.probe = make_batches(probe, config.train.batch_size, d.seq);
  return d;
}

RunResult train(const RunConfig& config, const PreparedData& data, const TrainOptions& options,
                const std::optional<fs::path>& out_dir) {
  config.validate();
  RunResult result{Model::init(config.model, config.seed), {}, {}, {}};
  Model& model = result.model;
  for (int i : options.disabled_adapters) model.set_adapter(i, AdapterState{AdapterStatus::Frozen, 0});

  AdamW opt(config.optimizer);
  for (const auto& name : model.trainable_parameter_names()) opt.add_parameter(name, model.parameter(name).value);
  FreezeScheduler scheduler(config.schedule, model.n_layers());
  std::optional<RunWriter> writer;
  if (out_dir) writer.emplace(*out_dir);

  const std::size_t seq = data.seq;
  const std::size_t report_batch = std::min(config.train.batch_size, data.train.size());
  std::uint64_t step = 0;

  for (int epoch = 0; epoch < config.train.epochs; ++epoch) {
    EpochLog log;
    log.epoch = epoch;
    const ImportanceRecord* previous = result.epochs.empty() ? nullptr : &result.epochs.back().importance;
    log.importance = epoch_importances(model, data.probe, epoch, previous);
    const auto decision = scheduler.on_epoch_start(epoch, log.importance, model);
    for (int i : decision.newly_frozen) {
      for (const auto& name : model.adapter_parameter_names(i)) opt.remove_parameter(name);
    }
    if (writer) writer->snapshot(model, epoch);
    for (const auto& ev : scheduler.events()) {
      if (ev.epoch == epoch) log.events.push_back(ev);
    }
    log.threshold = decision.threshold;
    log.warmup_end = scheduler.warmup_end();
    log.frozen = model.frozen_mask();
    log.resources = epoch_report(epoch, model, report_batch, seq);
    if (opt.moment_bytes() != log.resources.optimizer_bytes) {
      throw std::logic_error("optimizer holds " + std::to_string(opt.moment_bytes()) + " moment bytes, model predicts " +
                             std::to_string(log.resources.optimizer_bytes));
    }

    std::map<std::size_t, StepCost> costs;
    const auto order = epoch_order(data.train.size(), config.seed, epoch);
    std::vector<Example> shuffled;
    shuffled.reserve(order.size());
    for (auto i : order) shuffled.push_back(data.train[i]);
    const auto batches = make_batches(shuffled, config.train.batch_size, seq);
    const int cut = model.cut_layer();
    double loss_sum = 0.0;
    std::size_t seen = 0;
    for (const auto& batch : batches) {
      ForwardOptions fo;
      fo.seed = config.seed;
      fo.step = step;
      auto fwd = model.forward(batch, fo);
      const std::size_t retained = fwd.tape.retained_bytes();
      const StepCost* expected = nullptr;
      if (options.verify_accounting) {
        auto it = costs.find(batch.size);
        if (it == costs.end()) it = costs.emplace(batch.size, step_cost(config.model, log.frozen, batch.size, seq)).first;
        expected = &it->second;
        if (retained != expected->activation_bytes || fwd.tape.forward_flops() != expected->forward_flops) {
          throw std::logic_error("step " + std::to_string(step) + ": tape retained " + std::to_string(retained) +
                                 " bytes, model predicts " + std::to_string(expected->activation_bytes));
        }
      }
      const double loss = fwd.loss.tensor().item();
      const auto grads = fwd.tape.backward(fwd.loss);
      if (expected && fwd.tape.backward_flops() != expected->backward_flops) {
        throw std::logic_error("step " + std::to_string(step) + ": backward FLOPs differ from the model");
      }
      if (options.on_step) options.on_step(StepInfo{epoch, step, cut, log.frozen, grads, retained});
      opt.step(grads);
      loss_sum += loss * static_cast<double>(batch.size);
      seen += batch.size;
      ++step;
    }
    log.train_loss = loss_sum / static_cast<double>(seen);
    const auto eval = evaluate(model, data.valid);
    log.valid_loss = eval.loss;
    log.valid_accuracy = eval.accuracy;
    if (options.verbose) {
      std::fprintf(stderr, "epoch %3d  train %.4f  valid %.4f  acc %.4f  tau %.4f  cut %d\n", epoch, log.train_loss,
                   log.valid_loss, log.valid_accuracy, log.threshold, log.resources.cut_layer);
    }
    if (writer) writer->epoch(log);
    result.epochs.push_back(std::move(log));
  }
  result.events = scheduler.events();
  result.summary = summarize(config.schedule, model, result.epochs, scheduler.warmup_end());
  if (writer) writer->finish(model, result.summary);
  return result;
}

RunSummary cmd_train(const RunConfig& config, const fs::path& out_dir, bool verbose) {
  make_dirs(out_dir);
  write_file(out_dir / run_files::config, dump_config(config));
  write_file(out_dir / run_files::status, "running\n");
  try {
    const auto data = prepare_data(config);
    TrainOptions opts;
    opts.verbose = verbose;
    auto result = train(config, data, opts, out_dir);
    write_file(out_dir / run_files::status, "complete\n");
    return result.summary;
  } catch (...) {
    std::ofstream(out_dir / run_files::status, std::ios::trunc) << "incomplete\n";
    throw;
  }
}

ProfileResult cmd_profile(const RunConfig& config, const fs::path& out_dir, bool verbose) {
  make_dirs(out_dir);
  RunConfig base = config;
  base.schedule.policy = FreezePolicy::None;
  write_file(out_dir / run_files::config, dump_config(base));
  const auto data = prepare_data(base);
  ProfileResult result;
  const int L = base.model.n_layers;
  for (int layer = 0; layer < L; ++layer) {
    TrainOptions opts;
    opts.verbose = verbose;
    for (int j = 0; j < L; ++j) {
      if (j != layer) opts.disabled_adapters.push_back(j);
    }
    if (verbose) std::fprintf(stderr, "profile: adapter at layer %d only\n", layer);
    const auto run = train(base, data, opts);
    const auto& r = run.epochs.front().resources;
    result.rows.push_back(
        ProfileRow{layer, run.summary.final_valid_accuracy, r.activation_bytes, r.optimizer_bytes, r.backward_flops});
  }

  const auto full_dir = out_dir / "full";
  if (verbose) std::fprintf(stderr, "profile: all adapters\n");
  cmd_train(base, full_dir, verbose);
  const auto run = open_run(full_dir);
  result.trajectory = run_trajectory(full_dir, run);

  std::ostringstream csv;
  csv << "layer,valid_accuracy,activation_bytes,optimizer_bytes,backward_flops\n";
  for (const auto& row : result.rows) {
    csv << row.layer << ',' << num(row.valid_accuracy) << ',' << row.activation_bytes << ',' << row.optimizer_bytes
        << ',' << row.backward_flops << '\n';
  }
  write_file(out_dir / "profile.csv", csv.str());
  write_file(out_dir / "trajectory.csv", trajectory_csv(result.trajectory));
  return result;
}

AnalysisKind parse_analysis(const std::string& name) {
  if (name == "landscape") return AnalysisKind::Landscape;
  if (name == "spectrum") return AnalysisKind::Spectrum;
  if (name == "penalty") return AnalysisKind::Penalty;
  if (name == "trajectory") return AnalysisKind::Trajectory;
  throw ConfigError("which: unknown analysis '" + name + "' (expected landscape, spectrum, penalty or trajectory)");
}

fs::path cmd_analyze(const fs::path& run_dir, AnalysisKind which, unsigned threads) {
  const auto run = open_run(run_dir);
  const auto out = run_dir / "analysis";
  make_dirs(out);
  const auto& ac = run.config.analysis;

  switch (which) {
    case AnalysisKind::Landscape: {
      ModelObjective obj(run.final_model, ModelObjective::adapter_and_head_names(run.final_model), run.data.valid);
      const auto theta = obj.flatten();
      const auto grid = landscape(obj, theta, obj.blocks(),
                                  LandscapeConfig{ac.landscape_range, ac.landscape_steps, ac.seed, threads});
      std::ostringstream csv;
      csv << "alpha,beta,loss\n";
      for (std::size_t i = 0; i < grid.steps(); ++i) {
        for (std::size_t j = 0; j < grid.steps(); ++j) {
          csv << num(grid.axis[i]) << ',' << num(grid.axis[j]) << ',' << num(grid.at(i, j)) << '\n';
        }
      }
      const auto path = out / "landscape.csv";
      write_file(path, csv.str());
      return path;
    }
    case AnalysisKind::Spectrum: {
      ModelObjective obj(run.final_model, ModelObjective::adapter_and_head_names(run.final_model), run.data.valid);
      const auto theta = obj.flatten();
      const auto s =
          top_k_eigs(obj, theta, PowerIterationConfig{ac.spectrum_k, ac.spectrum_tol, ac.spectrum_max_iter, ac.seed});
      json j = {{"k", ac.spectrum_k},
                {"tol", ac.spectrum_tol},
                {"max_iter", ac.spectrum_max_iter},
                {"dimension", obj.dim()},
                {"eigenvalues", s.eigenvalues},
                {"residuals", s.residuals},
                {"iterations", s.iterations},
                {"converged", s.converged},
                {"all_converged", s.all_converged()}};
      const auto path = out / "spectrum.json";
      write_file(path, j.dump(2) + "\n");
      return path;
    }
    case AnalysisKind::Penalty: {
      const auto snaps = load_snapshots(run_dir, run);
      const auto names = snapshot_names(run.final_model);
      const auto theta0 = flatten(snaps.front().second, names);
      std::ostringstream csv;
      csv << "epoch,penalty";
      for (int i = 0; i < run.final_model.n_layers(); ++i) csv << ",adapter_" << i;
      csv << '\n';
      auto row = [&](int epoch, const Model& m) {
        MaskedDelta delta{flatten(m, names), theta0, {}};
        std::vector<double> per_adapter(static_cast<std::size_t>(m.n_layers()), 0.0);
        for (const auto& n : names) {
          const auto& p = m.parameter(n);
          const bool active = p.role != ParamRole::Adapter || !m.adapter(p.layer).frozen();
          for (std::size_t k = 0; k < p.value->numel(); ++k) delta.active.push_back(active);
          if (!active) {
            const auto cur = p.value->data();
            const auto init = snaps.front().second.parameter(n).value->data();
            for (std::size_t k = 0; k < cur.size(); ++k) {
              per_adapter[static_cast<std::size_t>(p.layer)] += (cur[k] - init[k]) * (cur[k] - init[k]);
            }
          }
        }
        csv << epoch << ',' << num(reg_penalty(delta));
        for (double v : per_adapter) csv << ',' << num(v);
        csv << '\n';
      };
      for (const auto& [e, m] : snaps) row(e, m);
      row(run.config.train.epochs, run.final_model);
      const auto path = out / "penalty.csv";
      write_file(path, csv.str());
      return path;
    }
    case AnalysisKind::Trajectory: {
      const auto path = out / "trajectory.csv";
      write_file(path, trajectory_csv(run_trajectory(run_dir, run)));
      return path;
    }
  }
  throw std::logic_error("unhandled analysis kind");
}

ReportTables cmd_report(const std::vector<fs::path>& run_dirs) {
  if (run_dirs.size() < 2) throw ConfigError("report: at least two run directories are required");
  struct Row {
    std::string name;
    double accuracy, frozen;
    ResourceMeans means;
    std::optional<double> lambda_max;
  };
  std::vector<Row> rows;
  json first_task;
  for (const auto& dir : run_dirs) {
    const auto config = json::parse(read_file(dir / run_files::config));
    const auto summary = json::parse(read_file(dir / run_files::summary));
    if (rows.empty()) {
      first_task = config.at("task");
    } else if (config.at("task") != first_task) {
      throw ConfigError("report: " + dir.string() + " was trained on a different task than " + run_dirs[0].string());
    }
    Row r{dir.filename().string(), summary.at("final_valid_accuracy").get<double>(),
          summary.at("frozen_fraction").get<double>(), read_resource_means(dir / run_files::resources), std::nullopt};
    if (r.name.empty()) r.name = dir.parent_path().filename().string();
    const auto spectrum = dir / "analysis" / "spectrum.json";
    if (fs::exists(spectrum)) {
      const auto s = json::parse(read_file(spectrum));
      if (!s.at("eigenvalues").empty()) r.lambda_max = s.at("eigenvalues").at(0).get<double>();
    }
    rows.push_back(std::move(r));
  }
  auto pct = [](double x, double base) { return base != 0.0 ? 100.0 * (x - base) / base : 0.0; };
  const auto& b = rows.front();
  std::ostringstream out;
  out << kReportHeader << '\n';
  for (const auto& r : rows) {
    out << r.name << ',' << num(r.accuracy) << ',' << num(r.means.activation_bytes) << ','
        << num(r.means.optimizer_bytes) << ',' << num(r.means.backward_flops) << ',' << num(r.frozen) << ','
        << fmt("%.2f", 100.0 * (r.accuracy - b.accuracy)) << ','
        << fmt("%.2f", pct(r.means.activation_bytes, b.means.activation_bytes)) << ','
        << fmt("%.2f", pct(r.means.optimizer_bytes, b.means.optimizer_bytes)) << ','
        << fmt("%.2f", pct(r.means.backward_flops, b.means.backward_flops)) << ','
        << fmt("%.2f", 100.0 * (r.frozen - b.frozen)) << '\n';
  }
  ReportTables tables{out.str(), std::nullopt};
  if (std::all_of(rows.begin(), rows.end(), [](const Row& r) { return r.lambda_max.has_value(); })) {
    std::ostringstream f;
    f << "run,lambda_max\n";
    for (const auto& r : rows) f << r.name << ',' << num(*r.lambda_max) << '\n';
    tables.flatness = f.str();
  }
  return tables;
}

}  // namespace safeft
