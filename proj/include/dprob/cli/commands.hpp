// SPDX-License-Identifier: Apache-2.0
//
// Batch commands behind the `dprob` executable. Each writes its artifacts under
// the configured run directory; every artifact carries the config hash and seed.
#pragma once

#include "dprob/cli/config.hpp"

#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

namespace dprob {

enum ExitCode : int { kExitOk = 0, kExitConfig = 2, kExitData = 3, kExitRuntime = 4 };

/// Run-directory layout.
struct RunLayout {
  std::filesystem::path root;

  std::filesystem::path task_dir(int t) const { return root / ("task" + std::to_string(t)); }
  std::filesystem::path final_checkpoint(int t) const { return task_dir(t) / "final"; }
  std::filesystem::path eval_dir(int t) const { return task_dir(t) / "eval"; }
};

void cmd_generate(const ExperimentConfig& config, std::ostream& log);

/// Task training (and, from task 2, exemplar fine-tuning) starting from the
/// previous task's final checkpoint. `resume` continues from the latest
/// per-epoch checkpoint of this task.
void cmd_train(const ExperimentConfig& config, int task_id, bool resume, std::ostream& log);

EvalReport cmd_eval(const ExperimentConfig& config, int task_id, const std::optional<std::filesystem::path>& checkpoint,
                    std::ostream& log);

struct AblationRow {
  std::string cell;
  int n_qs = 0;
  int n_lq = 0;
  int stop_layer = 0;
  std::string schedule;
  std::optional<double> u_recall;
  std::optional<double> map;
};

/// Cells of a sweep as config overrides, in table order.
std::vector<std::pair<std::string, std::vector<std::string>>> ablation_cells(const std::string& sweep);

/// Trains task 1 from scratch for every cell with identical seed and budget and
/// writes ablate_<sweep>.csv into the run directory.
std::vector<AblationRow> cmd_ablate(const ExperimentConfig& config, const std::string& sweep, std::ostream& log);

/// Consolidates eval reports of one or more run directories into summary.md
/// and summary.csv under the first. Refuses runs with different dataset hashes.
void cmd_report(const std::vector<std::filesystem::path>& run_dirs, std::ostream& log);

/// Full command-line entry point; returns the process exit code.
int run_cli(int argc, char** argv, std::ostream& out, std::ostream& err);

}  // namespace dprob
