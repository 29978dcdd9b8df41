// SPDX-License-Identifier: Apache-2.0
//
// Acceptance gate. Prints one PASS/FAIL line per criterion and exits non-zero
// if any criterion fails. Experiment results are cached under --work-dir,
// keyed by config hash, so a re-run only repeats what changed.
#define DOCTEST_CONFIG_IMPLEMENT
#include "doctest.h"

#include "CLI11.hpp"
#include "dprob/cli/commands.hpp"

#include <algorithm>
#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <regex>
#include <set>
#include <sstream>

using namespace dprob;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr double kOracleBudgetSeconds = 60;
constexpr double kGradientBudgetSeconds = 300;
constexpr double kTaskOneBudgetSeconds = 15 * 60;
constexpr double kTaskOneMapFloor = 0.50;
constexpr double kRetentionRatio = 0.8;

struct Verdict {
  bool pass = false;
  std::string detail;
};

void print(int id, const std::string& title, const Verdict& v) {
  std::cout << (v.pass ? "PASS" : "FAIL") << "  [" << id << "] " << title << ": " << v.detail << std::endl;
}

std::string fmt(double v, int digits = 4) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(digits);
  os << v;
  return os.str();
}

double mean(const std::vector<double>& v) { return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size()); }

std::string join(const std::vector<double>& v) {
  std::string s;
  for (double x : v) s += (s.empty() ? "" : "/") + fmt(x, 3);
  return s;
}

std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

// ---- criteria 1-3: tagged unit-test suites ------------------------------------

Verdict run_suite(const std::string& suite, double budget_seconds) {
  doctest::Context ctx;
  ctx.setOption("test-suite", suite.c_str());
  ctx.setOption("no-version", true);
  ctx.setOption("no-intro", true);
  std::ostringstream sink;
  ctx.setCout(&sink);
  const auto start = std::chrono::steady_clock::now();
  const int failed = ctx.run();
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  const std::string text = sink.str();
  std::smatch m;
  std::string cases = "?", asserts = "?";
  if (std::regex_search(text, m, std::regex(R"(test cases:\s*(\d+))"))) cases = m[1];
  if (std::regex_search(text, m, std::regex(R"(assertions:\s*(\d+))"))) asserts = m[1];
  if (failed != 0) std::cerr << text;
  const bool ok = failed == 0 && cases != "0" && secs < budget_seconds;
  return {ok, cases + " cases, " + asserts + " assertions, " + (failed ? "failures present" : "all passed") + ", " +
                  fmt(secs, 1) + " s (budget " + fmt(budget_seconds, 0) + " s)"};
}

// ---- criteria 4-6: toy experiments --------------------------------------------

struct TaskResult {
  json report;
  double cpu_seconds = 0;
};

class Experiments {
 public:
  Experiments(fs::path root, std::vector<std::uint64_t> seeds) : root_(std::move(root)), seeds_(std::move(seeds)) {}

  const std::vector<std::uint64_t>& seeds() const { return seeds_; }

  ExperimentConfig config(const std::string& cell, std::uint64_t seed, const std::vector<std::string>& sets) const {
    std::vector<std::string> all = {"seed=" + std::to_string(seed),
                                    "data.root=" + json((root_ / "data" / ("seed" + std::to_string(seed))).string()).dump(),
                                    "run_dir=" + json((root_ / "runs" / (cell + "_seed" + std::to_string(seed))).string()).dump()};
    all.insert(all.end(), sets.begin(), sets.end());
    return load_config(std::nullopt, all);
  }

  /// Trains (if not cached) and evaluates `task` of one cell and seed. Earlier
  /// tasks of the same cell are produced first.
  TaskResult task(const std::string& cell, std::uint64_t seed, const std::vector<std::string>& sets, int task_id) {
    const ExperimentConfig c = config(cell, seed, sets);
    const RunLayout layout{c.run_path()};
    const fs::path marker = layout.task_dir(task_id) / "acceptance.json";
    if (fs::exists(marker)) {
      const json m = json::parse(std::ifstream(marker));
      if (m.at("config_hash") == c.hash()) return {m.at("report"), m.at("cpu_seconds").get<double>()};
    }
    if (task_id > 1) task(cell, seed, sets, task_id - 1);
    ensure_data(c);
    std::ostringstream log;
    std::cerr << "  training " << cell << " seed " << seed << " task " << task_id << std::endl;
    const std::clock_t cpu0 = std::clock();
    cmd_train(c, task_id, false, log);
    const double cpu = static_cast<double>(std::clock() - cpu0) / CLOCKS_PER_SEC;
    cmd_eval(c, task_id, std::nullopt, log);
    const json report = json::parse(std::ifstream(layout.eval_dir(task_id) / "report.json"));
    std::ofstream(marker) << json{{"config_hash", c.hash()}, {"cpu_seconds", cpu}, {"report", report}}.dump(2) << "\n";
    return {report, cpu};
  }

 private:
  void ensure_data(const ExperimentConfig& c) {
    if (fs::exists(c.data_path() / "manifest.json")) {
      try {
        const Dataset ds = load_dataset(c.data_path());
        if (ds.protocol.seed == c.protocol.seed) return;
      } catch (const std::exception&) {
      }
    }
    std::ostringstream log;
    cmd_generate(c, log);
  }

  fs::path root_;
  std::vector<std::uint64_t> seeds_;
};

double metric(const json& report, const char* key) { return report.contains(key) ? report.at(key).get<double>() : 0.0; }

const std::vector<std::string> kDefault = {};
const std::vector<std::string> kPureSelection = {"tdqi.n_qs=100", "tdqi.n_lq=0"};
const std::vector<std::string> kNoEarlyStop = {"etop.schedule=\"none\""};

Verdict criterion_task_one(Experiments& ex) {
  std::vector<double> maps, recalls, secs;
  for (auto seed : ex.seeds()) {
    const TaskResult r = ex.task("default", seed, kDefault, 1);
    maps.push_back(metric(r.report, "map_both"));
    recalls.push_back(metric(r.report, "u_recall"));
    secs.push_back(r.cpu_seconds);
  }
  bool ok = true;
  for (std::size_t i = 0; i < maps.size(); ++i)
    ok = ok && maps[i] >= kTaskOneMapFloor && recalls[i] > 0 && secs[i] <= kTaskOneBudgetSeconds;
  return {ok, "mAP@0.5 " + join(maps) + " (floor " + fmt(kTaskOneMapFloor, 2) + "), U-Recall " + join(recalls) +
                  " (> 0), train CPU s " + join(secs) + " (<= " + fmt(kTaskOneBudgetSeconds, 0) + ")"};
}

Verdict criterion_relative(Experiments& ex, const std::string& cell, const std::vector<std::string>& sets, bool strict) {
  std::vector<double> base, other;
  for (auto seed : ex.seeds()) {
    base.push_back(metric(ex.task("default", seed, kDefault, 1).report, "u_recall"));
    other.push_back(metric(ex.task(cell, seed, sets, 1).report, "u_recall"));
  }
  const double a = mean(other), b = mean(base);
  const bool ok = strict ? a < b : a <= b;
  return {ok, "mean U-Recall " + cell + " " + fmt(a) + " (" + join(other) + ") vs default " + fmt(b) + " (" + join(base) +
                  "), required " + cell + (strict ? " < " : " <= ") + "default"};
}

Verdict criterion_retention(Experiments& ex) {
  std::vector<double> before, after;
  for (auto seed : ex.seeds()) {
    before.push_back(metric(ex.task("default", seed, kDefault, 1).report, "map_both"));
    after.push_back(metric(ex.task("default", seed, kDefault, 2).report, "map_prev"));
  }
  const double a = mean(after), b = mean(before);
  return {a >= kRetentionRatio * b, "mean previously-known mAP after task 2 " + fmt(a) + " (" + join(after) + ") vs " +
                                        fmt(kRetentionRatio, 1) + " x task-1 mAP " + fmt(b) + " = " + fmt(kRetentionRatio * b)};
}

// ---- criterion 7: reproducibility ---------------------------------------------

std::vector<std::string> tiny_overrides() {
  return {"data.train_scenes=8",  "data.val_scenes=2",        "data.test_scenes=4",   "data.scene.image_size=32",
          "data.scene.min_size=6", "data.scene.max_size=12",  "model.image_size=32",  "model.embed_dim=16",
          "model.heads=2",         "model.points=2",          "model.ffn_dim=32",     "model.encoder_layers=1",
          "model.decoder_layers=3", "model.backbone_channels=[4,8]", "tdqi.n_qs=2",  "tdqi.n_lq=6",
          "train.epochs=2",        "seed=13"};
}

/// Relative path -> bytes for every regular file under `dir`.
std::map<std::string, std::string> tree_bytes(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) out[fs::relative(e.path(), dir).string()] = read_bytes(e.path());
  return out;
}

std::string eval_csv(OwodModel& model, const ExperimentConfig& c, const Dataset& ds) {
  const TaskSpec& task = ds.task(1);
  const EvalReport r = evaluate(model, task, task.test, c.eval);
  std::ostringstream os;
  write_report_csv(os, r, {c.hash(), c.seed, ds.hash});
  return os.str();
}

bool same_scenes(const std::vector<Scene>& a, const std::vector<Scene>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i].scene_id != b[i].scene_id || a[i].image != b[i].image || a[i].annotations != b[i].annotations) return false;
  return true;
}

Verdict criterion_reproducibility(const fs::path& root) {
  const fs::path base = root / "repro";
  fs::remove_all(base);
  std::vector<std::string> failures;
  auto cfg = [&](const std::string& run) {
    auto sets = tiny_overrides();
    sets.push_back("data.root=" + json((base / "data").string()).dump());
    sets.push_back("run_dir=" + json((base / run).string()).dump());
    return load_config(std::nullopt, sets);
  };
  std::ostringstream log;
  const ExperimentConfig a = cfg("a"), b = cfg("b");
  cmd_generate(a, log);

  // Identical runs give identical checkpoints, logs and reports.
  for (const auto* c : {&a, &b}) {
    cmd_train(*c, 1, false, log);
    cmd_eval(*c, 1, std::nullopt, log);
  }
  const RunLayout la{a.run_path()}, lb{b.run_path()};
  const auto ta = tree_bytes(la.task_dir(1)), tb = tree_bytes(lb.task_dir(1));
  if (ta.empty() || ta != tb) failures.push_back("two identical runs differ");

  // Save -> load reproduces the evaluation CSV of the in-memory model.
  const Dataset ds = load_dataset(a.data_path());
  OwodModel trained = a.make_model();
  RunOptions opts;
  opts.write_checkpoints = false;
  run_task(trained, ds.task(1), a.session(Phase::train, 1), opts);
  const std::string before = eval_csv(trained, a, ds);
  save_checkpoint(base / "saved", trained, {a.hash(), a.seed, 1, Phase::train, a.train.epochs});
  OwodModel restored = a.make_model();
  load_checkpoint(base / "saved", restored, a.hash());
  if (eval_csv(restored, a, ds) != before) failures.push_back("eval CSV changed after save/load");
  if (tree_bytes(base / "saved") != tree_bytes(la.final_checkpoint(1))) failures.push_back("in-process and CLI checkpoints differ");

  // Dataset write -> load -> write is exact.
  const auto tasks = build_task_splits(a.protocol);
  write_dataset(ds.protocol, ds.tasks, base / "data_copy");
  const Dataset copy = load_dataset(base / "data_copy");
  bool same = copy.hash == ds.hash && copy.tasks.size() == tasks.size();
  for (std::size_t t = 0; same && t < tasks.size(); ++t)
    same = same_scenes(copy.tasks[t].train, tasks[t].train) && same_scenes(copy.tasks[t].val, tasks[t].val) &&
           same_scenes(copy.tasks[t].test, tasks[t].test);
  if (!same || tree_bytes(base / "data_copy") != tree_bytes(base / "data")) failures.push_back("dataset round-trip differs");

  std::string detail = failures.empty() ? "identical runs, save/load eval CSV, dataset round-trip all byte-exact" : "";
  for (const auto& f : failures) detail += (detail.empty() ? "" : "; ") + f;
  return {failures.empty(), detail};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance gate"};
  fs::path work = "acceptance_runs";
  std::vector<int> only;
  int seeds = 3;
  app.add_option("--work-dir", work, "cache for experiment runs");
  app.add_option("--only", only, "run only these criteria");
  app.add_option("--seeds", seeds, "seeds for the toy experiments")->check(CLI::Range(1, 10));
  CLI11_PARSE(app, argc, argv);
  fs::create_directories(work);
  work = fs::absolute(work);
  const auto wanted = [&](int id) { return only.empty() || std::count(only.begin(), only.end(), id) > 0; };

  std::vector<std::uint64_t> seed_list;
  for (int s = 1; s <= seeds; ++s) seed_list.push_back(static_cast<std::uint64_t>(s));
  Experiments ex(work, seed_list);

  int failed = 0;
  auto check = [&](int id, const std::string& title, auto&& fn) {
    if (!wanted(id)) return;
    Verdict v;
    try {
      v = fn();
    } catch (const std::exception& e) {
      v = {false, std::string("error: ") + e.what()};
    }
    print(id, title, v);
    failed += v.pass ? 0 : 1;
  };

  check(1, "math-core oracles", [] { return run_suite("oracle", kOracleBudgetSeconds); });
  check(2, "finite-difference gradients", [] { return run_suite("gradient", kGradientBudgetSeconds); });
  check(3, "ETOP/TDQI structural invariants", [] { return run_suite("structure", kOracleBudgetSeconds); });
  check(4, "toy task 1, default protocol", [&] { return criterion_task_one(ex); });
  check(5, "(a) pure query selection lowers U-Recall",
        [&] { return criterion_relative(ex, "qs100_lq0", kPureSelection, true); });
  check(5, "(b) no early termination does not raise U-Recall",
        [&] { return criterion_relative(ex, "schedule_none", kNoEarlyStop, false); });
  check(6, "previously-known mAP retained after task 2", [&] { return criterion_retention(ex); });
  check(7, "reproducibility and round-trips", [&] { return criterion_reproducibility(work); });
  return failed == 0 ? 0 : 1;
}
