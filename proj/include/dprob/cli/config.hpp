// SPDX-License-Identifier: Apache-2.0
//
// Experiment configuration: one JSON document, every key namespaced by module,
// validated against the published schema before any run.
#pragma once

#include "dprob/cli/schema.hpp"
#include "dprob/data/dataset.hpp"
#include "dprob/eval/metrics.hpp"
#include "dprob/loss/detection_loss.hpp"
#include "dprob/protocol/owod.hpp"

#include "json.hpp"

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace dprob {

class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(std::vector<SchemaIssue> issues);
  ConfigError(std::string pointer, std::string message);
  const std::vector<SchemaIssue>& issues() const { return issues_; }

 private:
  std::vector<SchemaIssue> issues_;
};

/// Environment variable that relative run and data paths resolve against.
inline constexpr const char* kRunRootEnv = "DPROB_RUN_ROOT";

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::string run_dir = "runs/default";
  std::string data_root = "data/shapeworld";
  ProtocolSpec protocol;
  ModelConfig model;
  bool tdqi_enabled = true;
  TdqiConfig tdqi;
  EtopConfig etop;
  double stats_momentum = 0.1;
  double stats_regularizer = 1e-6;
  bool stats_diagonal = true;
  /// Objectness scoring temperature; unset means 1.3 / embed_dim.
  std::optional<double> objectness_temperature;
  double effective_temperature() const { return objectness_temperature ? *objectness_temperature : 1.3 / model.embed_dim; }
  CostWeights loss;
  TrainSession train;
  TrainSession finetune;
  int exemplars_per_class = 25;
  AdamWConfig optimizer;
  EvalOptions eval;
  std::string eval_split = "test";

  ExperimentConfig();

  nlohmann::json to_json() const;
  /// CRC-32 of the canonical JSON without the two path entries.
  std::string hash() const;

  /// Resolved against $DPROB_RUN_ROOT when relative.
  std::filesystem::path run_path() const;
  std::filesystem::path data_path() const;

  TrainSession session(Phase phase, int task_id) const;
  OwodModel make_model() const;
};

const nlohmann::json& experiment_schema();

/// Defaults, merged with `file` (if any), then dotted-path overrides
/// "a.b=value" (value parsed as JSON, else taken as a string); validated
/// against the schema and cross-field rules. Throws ConfigError.
ExperimentConfig load_config(const std::optional<std::filesystem::path>& file, const std::vector<std::string>& overrides);
ExperimentConfig config_from_json(const nlohmann::json& j);

/// Applies "a.b.c=value" to a JSON document.
void apply_override(nlohmann::json& doc, const std::string& assignment);

}  // namespace dprob
