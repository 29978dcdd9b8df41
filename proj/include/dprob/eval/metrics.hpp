// SPDX-License-Identifier: Apache-2.0
//
// Detection metrics: all-point AP at an IoU threshold, unknown recall, and the
// per-task report split into previously known / current / all known classes.
#pragma once

#include "dprob/data/dataset.hpp"
#include "dprob/model/tdqi.hpp"

#include "json.hpp"

#include <map>
#include <optional>
#include <ostream>
#include <vector>

namespace dprob {

struct ScoredBox {
  Index image = 0;
  Box box = Box::Zero();
  double confidence = 0;
};

struct GtBox {
  Index image = 0;
  Box box = Box::Zero();
};

/// True/false-positive flags in confidence order (stable for ties); each
/// detection claims its highest-IoU ground truth in the same image and is a
/// true positive only if that one is still free and overlaps >= iou_threshold.
std::vector<bool> greedy_match(std::vector<ScoredBox> detections, const std::vector<GtBox>& gts, double iou_threshold,
                               Index* matched_gt = nullptr);

/// Area under the monotone precision envelope. nullopt when there is no ground truth.
std::optional<double> compute_ap(const std::vector<ScoredBox>& detections, const std::vector<GtBox>& gts,
                                 double iou_threshold = 0.5);

/// Matched unknown ground truth over all unknown ground truth; 0 when there is
/// none. `top_k_per_image` keeps only the most confident unknown detections of each image.
double compute_u_recall(const std::vector<ScoredBox>& unknown_detections, const std::vector<GtBox>& unknown_gts,
                        double iou_threshold = 0.5, std::optional<Index> top_k_per_image = std::nullopt);

struct EvalOptions {
  double iou_threshold = 0.5;
  std::optional<Index> u_recall_top_k;
  /// Confidence floor for the origin-attribution table.
  double attribution_threshold = 0.0;
};

struct DetectionStats {
  Index images = 0;
  Index detections = 0;
  Index known_labeled = 0;
  Index unknown_labeled = 0;
  Index unknown_gt = 0;
};

struct EvalReport {
  int task_id = 1;
  std::optional<double> u_recall;
  std::optional<double> map_prev;
  std::optional<double> map_curr;
  std::optional<double> map_both;
  std::map<int, std::optional<double>> per_class_ap;
  DetectionStats stats;
  OriginAttribution attribution;
};

/// `detections[i]` belongs to `scenes[i]`. Known-class AP ranks every query by
/// its factorized confidence for that class; U-Recall uses queries whose label
/// is unknown, ranked by unknown confidence.
EvalReport report_task(const TaskSpec& task, const std::vector<Scene>& scenes,
                       const std::vector<std::vector<Detection>>& detections, const EvalOptions& options);

/// Identifies the run an artifact came from.
struct Provenance {
  std::string config_hash;
  std::uint64_t seed = 0;
  std::string dataset_hash;
};

nlohmann::json report_json(const EvalReport& r, const Provenance& p);
/// Rows "task,metric,value,config_hash,seed,dataset_hash"; absent metrics are omitted.
void write_report_csv(std::ostream& os, const EvalReport& r, const Provenance& p, bool header = true);
void write_detections_jsonl(std::ostream& os, const std::vector<Scene>& scenes,
                            const std::vector<std::vector<Detection>>& detections);
/// Rows "task,category,origin,fraction,config_hash,seed".
void write_attribution_csv(std::ostream& os, const EvalReport& r, const Provenance& p, bool header = true);

/// Formats with round-trip precision, so re-running on the same inputs yields identical bytes.
std::string format_number(double v);

}  // namespace dprob
