// SPDX-License-Identifier: Apache-2.0
#include "dprob/eval/metrics.hpp"

#include <algorithm>
#include <cstdio>
#include <numeric>

namespace dprob {

using nlohmann::json;

std::vector<bool> greedy_match(std::vector<ScoredBox> dets, const std::vector<GtBox>& gts, double iou_threshold,
                               Index* matched_gt) {
  std::stable_sort(dets.begin(), dets.end(), [](const ScoredBox& a, const ScoredBox& b) { return a.confidence > b.confidence; });
  std::map<Index, std::vector<std::size_t>> by_image;
  for (std::size_t g = 0; g < gts.size(); ++g) by_image[gts[g].image].push_back(g);
  std::vector<char> taken(gts.size(), 0);
  std::vector<bool> tp(dets.size(), false);
  Index matched = 0;
  for (std::size_t i = 0; i < dets.size(); ++i) {
    auto it = by_image.find(dets[i].image);
    if (it == by_image.end()) continue;
    double best = -1;
    std::size_t best_g = 0;
    for (std::size_t g : it->second) {
      const double iou = box_iou(dets[i].box, gts[g].box);
      if (iou > best) {
        best = iou;
        best_g = g;
      }
    }
    if (best >= iou_threshold && !taken[best_g]) {
      taken[best_g] = 1;
      tp[i] = true;
      ++matched;
    }
  }
  if (matched_gt) *matched_gt = matched;
  return tp;
}

std::optional<double> compute_ap(const std::vector<ScoredBox>& detections, const std::vector<GtBox>& gts,
                                 double iou_threshold) {
  if (gts.empty()) return std::nullopt;
  const std::vector<bool> tp = greedy_match(detections, gts, iou_threshold);
  const double n_gt = static_cast<double>(gts.size());
  std::vector<double> recall, precision;
  double tps = 0;
  for (std::size_t i = 0; i < tp.size(); ++i) {
    if (tp[i]) tps += 1;
    recall.push_back(tps / n_gt);
    precision.push_back(tps / static_cast<double>(i + 1));
  }
  // Envelope from the right, then integrate over recall steps.
  for (std::size_t i = precision.size(); i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double ap = 0, prev_recall = 0;
  for (std::size_t i = 0; i < recall.size(); ++i) {
    ap += (recall[i] - prev_recall) * precision[i];
    prev_recall = recall[i];
  }
  return ap;
}

double compute_u_recall(const std::vector<ScoredBox>& unknown_detections, const std::vector<GtBox>& unknown_gts,
                        double iou_threshold, std::optional<Index> top_k_per_image) {
  if (unknown_gts.empty()) return 0.0;
  std::vector<ScoredBox> dets = unknown_detections;
  if (top_k_per_image) {
    std::stable_sort(dets.begin(), dets.end(), [](const ScoredBox& a, const ScoredBox& b) { return a.confidence > b.confidence; });
    std::map<Index, Index> kept;
    std::erase_if(dets, [&](const ScoredBox& d) { return ++kept[d.image] > *top_k_per_image; });
  }
  Index matched = 0;
  greedy_match(std::move(dets), unknown_gts, iou_threshold, &matched);
  return static_cast<double>(matched) / static_cast<double>(unknown_gts.size());
}

namespace {

std::optional<double> mean_of(const std::map<int, std::optional<double>>& ap, const std::vector<int>& classes) {
  double sum = 0;
  int n = 0;
  for (int c : classes) {
    auto it = ap.find(c);
    if (it != ap.end() && it->second) {
      sum += *it->second;
      ++n;
    }
  }
  if (n == 0) return std::nullopt;
  return sum / n;
}

}  // namespace

EvalReport report_task(const TaskSpec& task, const std::vector<Scene>& scenes,
                       const std::vector<std::vector<Detection>>& detections, const EvalOptions& options) {
  if (scenes.size() != detections.size()) throw std::invalid_argument("report_task: one detection list per scene is required");
  EvalReport r;
  r.task_id = task.task_id;
  const TaskView view{task.known_classes, 0};
  const std::size_t known = task.known_classes.size();

  std::vector<std::vector<ScoredBox>> per_class(known);
  std::vector<std::vector<GtBox>> gt_class(known);
  std::vector<ScoredBox> unknown_dets;
  std::vector<GtBox> unknown_gts;
  std::vector<Detection> all;
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    const Index img = static_cast<Index>(i);
    for (const auto& a : scenes[i].annotations) {
      const int col = view.column_of(a.class_id);
      if (col >= 0)
        gt_class[static_cast<std::size_t>(col)].push_back({img, a.box});
      else
        unknown_gts.push_back({img, a.box});
    }
    for (const auto& d : detections[i]) {
      if (d.known_conf.size() != known) throw std::invalid_argument("report_task: detection confidences do not match the task");
      for (std::size_t c = 0; c < known; ++c) per_class[c].push_back({img, d.box, d.known_conf[c]});
      if (d.label == kUnknownLabel) {
        unknown_dets.push_back({img, d.box, d.unknown_conf});
        ++r.stats.unknown_labeled;
      } else {
        ++r.stats.known_labeled;
      }
      ++r.stats.detections;
      all.push_back(d);
    }
  }
  r.stats.images = static_cast<Index>(scenes.size());
  r.stats.unknown_gt = static_cast<Index>(unknown_gts.size());

  for (std::size_t c = 0; c < known; ++c)
    r.per_class_ap[task.known_classes[c]] = compute_ap(per_class[c], gt_class[c], options.iou_threshold);
  r.map_both = mean_of(r.per_class_ap, task.known_classes);
  r.map_curr = mean_of(r.per_class_ap, task.introduced_classes);
  if (!task.previous_classes.empty()) r.map_prev = mean_of(r.per_class_ap, task.previous_classes);
  if (!task.unknown_classes.empty())
    r.u_recall = compute_u_recall(unknown_dets, unknown_gts, options.iou_threshold, options.u_recall_top_k);
  r.attribution = origin_attribution(all, options.attribution_threshold);
  return r;
}

std::string format_number(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

namespace {

json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

json fractions_json(const OriginFractions& f) {
  return {{"count", f.count}, {"qs", optional_json(f.query_selected)}, {"lq", optional_json(f.learnable)}};
}

}  // namespace

json report_json(const EvalReport& r, const Provenance& p) {
  json j = {{"task_id", r.task_id}, {"config_hash", p.config_hash}, {"seed", p.seed}, {"dataset_hash", p.dataset_hash}};
  if (r.u_recall) j["u_recall"] = *r.u_recall;
  if (r.map_prev) j["map_prev"] = *r.map_prev;
  if (r.map_curr) j["map_curr"] = *r.map_curr;
  if (r.map_both) j["map_both"] = *r.map_both;
  json ap = json::object();
  for (const auto& [c, v] : r.per_class_ap) ap[std::to_string(c)] = optional_json(v);
  j["per_class_ap"] = ap;
  j["detection_stats"] = {{"images", r.stats.images},
                          {"detections", r.stats.detections},
                          {"known_labeled", r.stats.known_labeled},
                          {"unknown_labeled", r.stats.unknown_labeled},
                          {"unknown_gt", r.stats.unknown_gt}};
  j["origin_attribution"] = {{"known", fractions_json(r.attribution.known)}, {"unknown", fractions_json(r.attribution.unknown)}};
  return j;
}

void write_report_csv(std::ostream& os, const EvalReport& r, const Provenance& p, bool header) {
  if (header) os << "task,metric,value,config_hash,seed,dataset_hash\n";
  auto row = [&](const std::string& name, const std::optional<double>& v) {
    if (v)
      os << r.task_id << ',' << name << ',' << format_number(*v) << ',' << p.config_hash << ',' << p.seed << ','
         << p.dataset_hash << '\n';
  };
  row("u_recall", r.u_recall);
  row("map_prev", r.map_prev);
  row("map_curr", r.map_curr);
  row("map_both", r.map_both);
  for (const auto& [c, v] : r.per_class_ap) row("ap_class_" + std::to_string(c), v);
  row("detections", static_cast<double>(r.stats.detections));
  row("unknown_labeled", static_cast<double>(r.stats.unknown_labeled));
}

void write_detections_jsonl(std::ostream& os, const std::vector<Scene>& scenes,
                            const std::vector<std::vector<Detection>>& detections) {
  for (std::size_t i = 0; i < scenes.size() && i < detections.size(); ++i)
    for (const auto& d : detections[i]) {
      json rec = {{"scene_id", scenes[i].scene_id},
                  {"label", d.label == kUnknownLabel ? json("unknown") : json(d.label)},
                  {"confidence", d.confidence},
                  {"box", {d.box(0), d.box(1), d.box(2), d.box(3)}},
                  {"origin", to_string(d.origin)},
                  {"query", d.query},
                  {"known_conf", d.known_conf},
                  {"unknown_conf", d.unknown_conf}};
      os << rec.dump() << '\n';
    }
}

void write_attribution_csv(std::ostream& os, const EvalReport& r, const Provenance& p, bool header) {
  if (header) os << "task,category,origin,fraction,config_hash,seed\n";
  auto rows = [&](const char* category, const OriginFractions& f) {
    const std::string tail = "," + p.config_hash + "," + std::to_string(p.seed) + "\n";
    if (f.query_selected) os << r.task_id << ',' << category << ",qs," << format_number(*f.query_selected) << tail;
    if (f.learnable) os << r.task_id << ',' << category << ",lq," << format_number(*f.learnable) << tail;
  };
  rows("known", r.attribution.known);
  rows("unknown", r.attribution.unknown);
}

}  // namespace dprob
