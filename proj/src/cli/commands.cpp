// SPDX-License-Identifier: Apache-2.0
#include "dprob/cli/commands.hpp"

#include "CLI11.hpp"

#include <fstream>
#include <sstream>

namespace dprob {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

void write_file(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

Dataset open_dataset(const ExperimentConfig& config) {
  Dataset ds = load_dataset(config.data_path());
  const json want = ExperimentConfig(config).to_json().at("data");
  // The dataset must come from this config's protocol and seed.
  ProtocolSpec p = config.protocol;
  if (ds.protocol.seed != p.seed || ds.protocol.class_groups != p.class_groups ||
      ds.protocol.train_scenes != p.train_scenes || ds.protocol.test_scenes != p.test_scenes ||
      ds.protocol.scene.image_size != p.scene.image_size)
    throw DataError("dataset at " + config.data_path().string() + " was generated from a different protocol or seed; run `dprob generate`");
  return ds;
}

void write_run_config(const ExperimentConfig& config) {
  json j = {{"config", config.to_json()}, {"config_hash", config.hash()}, {"seed", config.seed}};
  write_file(config.run_path() / "config.json", j.dump(2) + "\n");
}

std::string epochs_csv_header() { return "task,phase,epoch,lr,mean_loss,steps,config_hash,seed\n"; }

std::string epoch_row(const EpochLog& l, const ExperimentConfig& c) {
  std::ostringstream os;
  os << l.task_id << ',' << to_string(l.phase) << ',' << l.epoch << ',' << format_number(l.lr) << ','
     << format_number(l.mean_loss) << ',' << l.steps << ',' << c.hash() << ',' << c.seed << '\n';
  return os.str();
}

}  // namespace

void cmd_generate(const ExperimentConfig& config, std::ostream& log) {
  const auto tasks = build_task_splits(config.protocol);
  write_dataset(config.protocol, tasks, config.data_path());
  const Dataset ds = load_dataset(config.data_path());
  log << "generated " << tasks.size() << " tasks at " << config.data_path().string() << " (dataset hash " << ds.hash
      << ", config " << config.hash() << ", seed " << config.seed << ")\n";
}

void cmd_train(const ExperimentConfig& config, int task_id, bool resume, std::ostream& log) {
  const Dataset ds = open_dataset(config);
  const TaskSpec& task = ds.task(task_id);
  const RunLayout layout{config.run_path()};
  write_run_config(config);
  OwodModel model = config.make_model();

  const fs::path train_ckpt = layout.task_dir(task_id) / "checkpoints" / ("task" + std::to_string(task_id) + "_train");
  const fs::path ft_ckpt = layout.task_dir(task_id) / "checkpoints" / ("task" + std::to_string(task_id) + "_finetune");
  int train_start = 0, ft_start = 0;
  bool resumed = false;
  if (resume) {
    const fs::path latest = fs::exists(ft_ckpt / "manifest.json") ? ft_ckpt : train_ckpt;
    if (fs::exists(latest / "manifest.json")) {
      const CheckpointMeta meta = load_checkpoint(latest, model, config.hash());
      if (meta.task_id != task_id) throw std::runtime_error("resume mismatch: checkpoint belongs to task " + std::to_string(meta.task_id));
      if (meta.phase == Phase::train) {
        train_start = meta.epoch;
      } else {
        train_start = config.train.epochs;
        ft_start = meta.epoch;
      }
      resumed = true;
      log << "resuming task " << task_id << " " << to_string(meta.phase) << " after epoch " << meta.epoch << "\n";
    }
  }
  if (!resumed && task_id > 1) {
    const fs::path prev = layout.final_checkpoint(task_id - 1);
    if (!fs::exists(prev / "manifest.json"))
      throw DataError("task " + std::to_string(task_id) + " needs the final checkpoint of task " +
                               std::to_string(task_id - 1) + " at " + prev.string());
    load_checkpoint(prev, model, config.hash());
  }

  fs::create_directories(layout.task_dir(task_id));
  std::ofstream loss_csv(layout.task_dir(task_id) / "loss.csv", resumed ? std::ios::app : std::ios::trunc);
  if (!resumed) write_loss_csv_header(loss_csv);
  const fs::path epochs_path = layout.task_dir(task_id) / "epochs.csv";
  std::ofstream epochs_csv(epochs_path, resumed ? std::ios::app : std::ios::trunc);
  if (!resumed) epochs_csv << epochs_csv_header();

  RunOptions opts;
  opts.out_dir = layout.task_dir(task_id);
  opts.config_hash = config.hash();
  opts.master_seed = config.seed;
  opts.loss_csv = &loss_csv;
  opts.on_epoch = [&](const EpochLog& l) {
    epochs_csv << epoch_row(l, config);
    epochs_csv.flush();
    log << "task " << l.task_id << " " << to_string(l.phase) << " epoch " << l.epoch << " loss " << l.mean_loss << "\n";
  };
  run_task(model, task, config.session(Phase::train, task_id), opts, std::min(train_start, config.train.epochs));
  if (task_id > 1) {
    std::vector<Scene> pool;
    for (const auto& t : ds.tasks)
      if (t.task_id <= task_id) pool.insert(pool.end(), t.train.begin(), t.train.end());
    const ExemplarStore store = build_exemplar_store(pool, task.known_classes, config.exemplars_per_class, config.seed);
    finetune(model, ds, store, task, config.session(Phase::finetune, task_id), opts, ft_start);
  }
  save_checkpoint(layout.final_checkpoint(task_id), model,
                  {config.hash(), config.seed, task_id, task_id > 1 ? Phase::finetune : Phase::train,
                   task_id > 1 ? config.finetune.epochs : config.train.epochs});
  log << "final checkpoint " << layout.final_checkpoint(task_id).string() << "\n";
}

EvalReport cmd_eval(const ExperimentConfig& config, int task_id, const std::optional<fs::path>& checkpoint,
                    std::ostream& log) {
  const Dataset ds = open_dataset(config);
  const TaskSpec& task = ds.task(task_id);
  const RunLayout layout{config.run_path()};
  const fs::path ckpt = checkpoint ? *checkpoint : layout.final_checkpoint(task_id);
  OwodModel model = config.make_model();
  load_checkpoint(ckpt, model, config.hash());
  const std::vector<Scene>& scenes = config.eval_split == "val" ? task.val : task.test;
  std::vector<std::vector<Detection>> dets;
  const EvalReport r = evaluate(model, task, scenes, config.eval, &dets);
  const Provenance prov{config.hash(), config.seed, ds.hash};
  const fs::path dir = layout.eval_dir(task_id);
  write_file(dir / "report.json", report_json(r, prov).dump(2) + "\n");
  std::ostringstream csv, attr, det;
  write_report_csv(csv, r, prov);
  write_attribution_csv(attr, r, prov);
  write_detections_jsonl(det, scenes, dets);
  write_file(dir / "report.csv", csv.str());
  write_file(dir / "attribution.csv", attr.str());
  write_file(dir / "detections.jsonl", det.str());
  log << "task " << task_id << ":";
  if (r.map_both) log << " mAP(both) " << *r.map_both;
  if (r.map_prev) log << " mAP(prev) " << *r.map_prev;
  if (r.map_curr) log << " mAP(curr) " << *r.map_curr;
  if (r.u_recall) log << " U-Recall " << *r.u_recall;
  log << "\n";
  return r;
}

std::vector<std::pair<std::string, std::vector<std::string>>> ablation_cells(const std::string& sweep) {
  std::vector<std::pair<std::string, std::vector<std::string>>> cells;
  if (sweep == "tdqi_ratio") {
    const int ratios[][2] = {{10, 90}, {20, 80}, {30, 70}, {50, 50}, {80, 20}, {100, 0}, {0, 100}};
    for (const auto& r : ratios)
      cells.push_back({"qs" + std::to_string(r[0]) + "_lq" + std::to_string(r[1]),
                       {"tdqi.n_qs=" + std::to_string(r[0]), "tdqi.n_lq=" + std::to_string(r[1])}});
  } else if (sweep == "etop_layer") {
    for (int n = 1; n <= 6; ++n) cells.push_back({"layer" + std::to_string(n), {"etop.etop_stop_layer=" + std::to_string(n), "etop.schedule=\"etop\""}});
  } else if (sweep == "schedule") {
    for (const char* s : {"etop", "dol", "none"}) cells.push_back({s, {std::string("etop.schedule=\"") + s + "\""}});
  } else {
    throw ConfigError("/sweep", "unknown sweep '" + sweep + "' (expected tdqi_ratio, etop_layer or schedule)");
  }
  return cells;
}

namespace {

std::string opt_number(const std::optional<double>& v) { return v ? format_number(*v) : std::string(); }

}  // namespace

std::vector<AblationRow> cmd_ablate(const ExperimentConfig& config, const std::string& sweep, std::ostream& log) {
  const auto cells = ablation_cells(sweep);
  const Dataset ds = open_dataset(config);
  const TaskSpec& task = ds.task(1);
  const fs::path root = config.run_path() / "ablate" / sweep;
  std::vector<AblationRow> rows;
  std::ostringstream csv;
  if (sweep == "tdqi_ratio")
    csv << "n_qs,n_lq,u_recall,map,config_hash,seed\n";
  else if (sweep == "etop_layer")
    csv << "stop_layer,u_recall,map,config_hash,seed\n";
  else
    csv << "schedule,stop_layer,u_recall,map,config_hash,seed\n";

  for (const auto& [name, overrides] : cells) {
    json doc = config.to_json();
    for (const auto& o : overrides) apply_override(doc, o);
    if (sweep == "tdqi_ratio" && doc["tdqi"]["n_qs"] == 0) doc["tdqi"]["enabled"] = false;
    ExperimentConfig cell = config_from_json(doc);
    cell.run_dir = (root / name).string();
    OwodModel model = cell.make_model();
    RunOptions opts;
    opts.out_dir = root / name;
    opts.config_hash = cell.hash();
    opts.master_seed = cell.seed;
    opts.write_checkpoints = false;
    run_task(model, task, cell.session(Phase::train, 1), opts);
    save_checkpoint(root / name / "final", model, {cell.hash(), cell.seed, 1, Phase::train, cell.train.epochs});
    const EvalReport r = evaluate(model, task, task.test, cell.eval);

    AblationRow row{name, cell.tdqi.n_qs, cell.tdqi.n_lq, cell.etop.effective_stop_layer(), to_string(cell.etop.schedule),
                    r.u_recall, r.map_both};
    const std::string tail = "," + cell.hash() + "," + std::to_string(cell.seed) + "\n";
    if (sweep == "tdqi_ratio")
      csv << row.n_qs << ',' << row.n_lq << ',' << opt_number(row.u_recall) << ',' << opt_number(row.map) << tail;
    else if (sweep == "etop_layer")
      csv << row.stop_layer << ',' << opt_number(row.u_recall) << ',' << opt_number(row.map) << tail;
    else
      csv << row.schedule << ',' << row.stop_layer << ',' << opt_number(row.u_recall) << ',' << opt_number(row.map) << tail;
    log << sweep << " " << name << ": U-Recall " << opt_number(row.u_recall) << " mAP " << opt_number(row.map) << "\n";
    rows.push_back(row);
  }
  write_file(config.run_path() / ("ablate_" + sweep + ".csv"), csv.str());
  return rows;
}

void cmd_report(const std::vector<fs::path>& run_dirs, std::ostream& log) {
  if (run_dirs.empty()) throw ConfigError("/run_dir", "no run directory given");
  struct Entry {
    fs::path run;
    json report;
  };
  std::vector<Entry> entries;
  std::optional<std::string> dataset_hash;
  for (const auto& run : run_dirs) {
    if (!fs::is_directory(run)) throw DataError("run directory " + run.string() + " does not exist");
    std::vector<fs::path> reports;
    for (const auto& e : fs::directory_iterator(run))
      if (e.is_directory() && fs::exists(e.path() / "eval" / "report.json")) reports.push_back(e.path() / "eval" / "report.json");
    std::sort(reports.begin(), reports.end());
    for (const auto& p : reports) {
      std::ifstream in(p);
      json j = json::parse(in);
      const std::string h = j.at("dataset_hash").get<std::string>();
      if (dataset_hash && *dataset_hash != h)
        throw DataError("cannot merge runs: " + p.string() + " was evaluated on dataset " + h + ", others on " + *dataset_hash);
      dataset_hash = h;
      entries.push_back({run, std::move(j)});
    }
  }
  if (entries.empty()) throw DataError("no eval reports found; run `dprob eval` first");

  std::ostringstream md, csv;
  md << "# Run summary\n\nDataset hash `" << *dataset_hash << "`.\n\n";
  md << "| run | task | config | seed | U-Recall | mAP prev | mAP curr | mAP both |\n|---|---|---|---|---|---|---|---|\n";
  csv << "run,task,config_hash,seed,dataset_hash,u_recall,map_prev,map_curr,map_both\n";
  auto cell = [](const json& j, const char* k) { return j.contains(k) ? format_number(j.at(k).get<double>()) : std::string(); };
  auto pct = [](const json& j, const char* k) {
    if (!j.contains(k)) return std::string("-");
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.1f", 100.0 * j.at(k).get<double>());
    return std::string(buf);
  };
  for (const auto& e : entries) {
    const json& j = e.report;
    const std::string run = e.run.filename().string();
    md << "| " << run << " | " << j.at("task_id") << " | " << j.at("config_hash").get<std::string>() << " | " << j.at("seed")
       << " | " << pct(j, "u_recall") << " | " << pct(j, "map_prev") << " | " << pct(j, "map_curr") << " | "
       << pct(j, "map_both") << " |\n";
    csv << run << ',' << j.at("task_id") << ',' << j.at("config_hash").get<std::string>() << ',' << j.at("seed") << ','
        << *dataset_hash << ',' << cell(j, "u_recall") << ',' << cell(j, "map_prev") << ',' << cell(j, "map_curr") << ','
        << cell(j, "map_both") << '\n';
  }
  write_file(run_dirs.front() / "summary.md", md.str());
  write_file(run_dirs.front() / "summary.csv", csv.str());
  log << "wrote " << (run_dirs.front() / "summary.md").string() << " (" << entries.size() << " reports)\n";
}

int run_cli(int argc, char** argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Open-world detection on a synthetic shape world"};
  app.require_subcommand(1);
  std::optional<std::string> config_file;
  std::vector<std::string> overrides;
  auto add_config = [&](CLI::App* sub) {
    sub->add_option("-c,--config", config_file, "experiment config JSON");
    sub->add_option("--set", overrides, "dotted-path override, e.g. tdqi.n_qs=30")->take_all();
  };
  auto* gen = app.add_subcommand("generate", "generate the dataset");
  add_config(gen);
  int task_id = 1;
  bool resume = false;
  auto* train = app.add_subcommand("train", "train one task (and fine-tune from task 2)");
  add_config(train);
  train->add_option("--task", task_id, "task id")->check(CLI::PositiveNumber);
  train->add_flag("--resume", resume, "continue from the latest checkpoint of this task");
  std::optional<std::string> checkpoint;
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  add_config(eval);
  eval->add_option("--task", task_id, "task id")->check(CLI::PositiveNumber);
  eval->add_option("--checkpoint", checkpoint, "checkpoint directory (default: the task's final checkpoint)");
  std::string sweep;
  auto* ablate = app.add_subcommand("ablate", "run a configuration sweep on task 1");
  add_config(ablate);
  ablate->add_option("--sweep", sweep, "tdqi_ratio, etop_layer or schedule")->required();
  std::vector<std::string> runs;
  auto* report = app.add_subcommand("report", "summarize eval reports across tasks");
  report->add_option("runs", runs, "run directories")->required();
  app.add_subcommand("schema", "print the experiment config schema");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitConfig;
  }
  try {
    auto config = [&] {
      std::optional<fs::path> file;
      if (config_file) file = fs::path(*config_file);
      return load_config(file, overrides);
    };
    if (gen->parsed()) cmd_generate(config(), out);
    if (train->parsed()) cmd_train(config(), task_id, resume, out);
    if (eval->parsed()) cmd_eval(config(), task_id, checkpoint ? std::optional<fs::path>(*checkpoint) : std::nullopt, out);
    if (ablate->parsed()) cmd_ablate(config(), sweep, out);
    if (report->parsed()) cmd_report(std::vector<fs::path>(runs.begin(), runs.end()), out);
    if (app.got_subcommand("schema")) out << experiment_schema().dump(2) << "\n";
  } catch (const ConfigError& e) {
    err << e.what() << "\n";
    return kExitConfig;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitOk;
}

}  // namespace dprob
