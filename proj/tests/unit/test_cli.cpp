// SPDX-License-Identifier: Apache-2.0
#include "doctest.h"

#include "dprob/cli/commands.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

using namespace dprob;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::vector<SchemaIssue> issues_of(const std::optional<fs::path>& file, const std::vector<std::string>& overrides) {
  try {
    load_config(file, overrides);
  } catch (const ConfigError& e) {
    return e.issues();
  }
  return {};
}

bool has_pointer(const std::vector<SchemaIssue>& issues, const std::string& pointer) {
  for (const auto& i : issues)
    if (i.pointer == pointer) return true;
  return false;
}

struct CliResult {
  int code;
  std::string out, err;
};

CliResult cli(std::vector<std::string> args) {
  args.insert(args.begin(), "dprob");
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  std::ostringstream out, err;
  const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

/// A miniature experiment that trains in seconds.
std::vector<std::string> tiny_overrides() {
  return {"data.train_scenes=8",  "data.val_scenes=2",        "data.test_scenes=4",   "data.scene.image_size=32",
          "data.scene.min_size=6", "data.scene.max_size=12",  "model.image_size=32",  "model.embed_dim=16",
          "model.heads=2",         "model.points=2",          "model.ffn_dim=32",     "model.encoder_layers=1",
          "model.decoder_layers=3", "model.backbone_channels=[4,8]", "tdqi.n_qs=2",  "tdqi.n_lq=6",
          "train.epochs=1",        "finetune.epochs=1",       "exemplars_per_class=2", "seed=4"};
}

std::vector<std::string> with_sets(std::vector<std::string> head, const std::vector<std::string>& sets) {
  head.push_back("--set");
  head.insert(head.end(), sets.begin(), sets.end());
  return head;
}

}  // namespace

TEST_CASE("default config validates and hashes stably") {
  const ExperimentConfig a = load_config(std::nullopt, {});
  const ExperimentConfig b = load_config(std::nullopt, {});
  CHECK(a.hash() == b.hash());
  CHECK(a.tdqi.n_qs == 20);
  CHECK(a.tdqi.n_lq == 80);
  CHECK(a.etop.stop_layer == 2);
  CHECK(validate_schema(a.to_json(), experiment_schema()).empty());
  CHECK(load_config(std::nullopt, {"run_dir=\"elsewhere\""}).hash() == a.hash());
  CHECK(load_config(std::nullopt, {"tdqi.n_qs=30"}).hash() != a.hash());
  CHECK(config_from_json(a.to_json()).hash() == a.hash());
}

TEST_CASE("overrides") {
  const ExperimentConfig c = load_config(std::nullopt, {"tdqi.n_qs=30", "tdqi.n_lq=70", "etop.schedule=dol", "eval.u_recall_top_k=50"});
  CHECK(c.tdqi.n_qs == 30);
  CHECK(c.etop.schedule == Schedule::dol);
  CHECK(*c.eval.u_recall_top_k == 50);
  CHECK(has_pointer(issues_of(std::nullopt, {"tdqi.n_qs"}), ""));
  CHECK(has_pointer(issues_of(std::nullopt, {"tdqi.bogus=1"}), "/tdqi/bogus"));
}

TEST_CASE("schema diagnostics point at the offending field") {
  CHECK(has_pointer(issues_of(std::nullopt, {"model.embed_dim=\"wide\""}), "/model/embed_dim"));
  CHECK(has_pointer(issues_of(std::nullopt, {"etop.etop_stop_layer=0"}), "/etop/etop_stop_layer"));
  CHECK(has_pointer(issues_of(std::nullopt, {"etop.schedule=sometimes"}), "/etop/schedule"));
  CHECK(has_pointer(issues_of(std::nullopt, {"etop.etop_stop_layer=7"}), "/etop/etop_stop_layer"));
  CHECK(has_pointer(issues_of(std::nullopt, {"model.image_size=32"}), "/model/image_size"));
  CHECK(has_pointer(issues_of(std::nullopt, {"tdqi.enabled=false"}), "/tdqi/n_qs"));
  CHECK(has_pointer(issues_of(std::nullopt, {"data.class_groups=[[0,1],[1,2],[3,4,5]]"}), "/data/class_groups"));

  const fs::path file = fs::temp_directory_path() / "dprob_unit_bad_config.json";
  std::ofstream(file) << R"({"model": {"embed_dims": 8}})";
  const auto issues = issues_of(file, {});
  REQUIRE_FALSE(issues.empty());
  CHECK(issues[0].pointer == "/model/embed_dims");
  CHECK(issues[0].message.find("unknown key") != std::string::npos);

  std::ofstream(file, std::ios::trunc) << load_config(std::nullopt, {"seed=9"}).to_json().dump();
  CHECK(load_config(file, {}).hash() == load_config(std::nullopt, {"seed=9"}).hash());

  std::ofstream(file, std::ios::trunc) << R"({"tdqi": {"n_qs": 10, "n_lq": 90}})";
  CHECK(load_config(file, {}).tdqi.n_qs == 10);
  CHECK(load_config(file, {"tdqi.n_qs=5"}).tdqi.n_qs == 5);
  fs::remove(file);
}

TEST_CASE("ablation sweeps") {
  CHECK(ablation_cells("tdqi_ratio").size() == 7);
  CHECK(ablation_cells("etop_layer").size() == 6);
  CHECK(ablation_cells("schedule").size() == 3);
  CHECK_THROWS_AS(ablation_cells("depth"), ConfigError);
  for (const std::string sweep : {"tdqi_ratio", "etop_layer", "schedule"})
    for (const auto& [name, sets] : ablation_cells(sweep)) CHECK_NOTHROW(load_config(std::nullopt, sets));
}

TEST_CASE("exit codes") {
  CHECK(cli({}).code == kExitConfig);
  CHECK(cli({"frobnicate"}).code == kExitConfig);
  CHECK(cli({"ablate"}).code == kExitConfig);
  const CliResult schema = cli({"schema"});
  CHECK(schema.code == kExitOk);
  CHECK(json::parse(schema.out) == experiment_schema());
  const CliResult bad = cli({"train", "--set", "model.heads=0"});
  CHECK(bad.code == kExitConfig);
  CHECK(bad.err.find("/model/heads") != std::string::npos);

  const fs::path root = fs::temp_directory_path() / "dprob_unit_cli_missing";
  fs::remove_all(root);
  ::setenv(kRunRootEnv, root.c_str(), 1);
  const CliResult missing = cli({"train"});
  CHECK(missing.code == kExitData);
  CHECK(missing.err.find("missing manifest") != std::string::npos);
  ::unsetenv(kRunRootEnv);
}

TEST_CASE("generate, train, eval and report through the command line") {
  const fs::path root = fs::temp_directory_path() / "dprob_unit_cli_run";
  fs::remove_all(root);
  ::setenv(kRunRootEnv, root.c_str(), 1);
  const auto sets = tiny_overrides();
  REQUIRE(cli(with_sets({"generate"}, sets)).code == kExitOk);
  REQUIRE(cli(with_sets({"train", "--task", "1"}, sets)).code == kExitOk);
  const CliResult ev = cli(with_sets({"eval", "--task", "1"}, sets));
  REQUIRE(ev.code == kExitOk);
  const fs::path run = root / "runs" / "default";
  const ExperimentConfig config = load_config(std::nullopt, sets);
  const json report = json::parse(std::ifstream(run / "task1" / "eval" / "report.json"));
  CHECK(report.at("config_hash") == config.hash());
  CHECK(report.at("seed") == 4);
  CHECK(report.contains("u_recall"));
  CHECK(fs::exists(run / "task1" / "eval" / "detections.jsonl"));
  CHECK(fs::exists(run / "task1" / "eval" / "attribution.csv"));

  SUBCASE("evaluation is byte-reproducible") {
    std::ifstream first(run / "task1" / "eval" / "report.csv");
    const std::string a((std::istreambuf_iterator<char>(first)), {});
    REQUIRE(cli(with_sets({"eval", "--task", "1"}, sets)).code == kExitOk);
    std::ifstream second(run / "task1" / "eval" / "report.csv");
    CHECK(a == std::string((std::istreambuf_iterator<char>(second)), {}));
  }
  SUBCASE("task 2 continues from task 1 and fine-tunes") {
    REQUIRE(cli(with_sets({"train", "--task", "2"}, sets)).code == kExitOk);
    REQUIRE(cli(with_sets({"eval", "--task", "2"}, sets)).code == kExitOk);
    const json r2 = json::parse(std::ifstream(run / "task2" / "eval" / "report.json"));
    CHECK(r2.contains("map_prev"));
    std::ifstream epochs(run / "task2" / "epochs.csv");
    const std::string text((std::istreambuf_iterator<char>(epochs)), {});
    CHECK(text.find(",finetune,") != std::string::npos);
    CHECK(cli({"report", run.string()}).code == kExitOk);
    CHECK(fs::exists(run / "summary.md"));
  }
  SUBCASE("resume refuses a changed config") {
    auto changed = sets;
    changed.push_back("loss.l1_weight=4");
    const CliResult r = cli(with_sets({"train", "--task", "1", "--resume"}, changed));
    CHECK(r.code == kExitRuntime);
    CHECK(r.err.find("config_hash") != std::string::npos);
  }
  SUBCASE("task 3 without task 2 is a data error") {
    CHECK(cli(with_sets({"train", "--task", "3"}, sets)).code == kExitData);
  }
  ::unsetenv(kRunRootEnv);
}
