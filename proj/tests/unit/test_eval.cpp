// SPDX-License-Identifier: Apache-2.0
#include "doctest.h"
#include "helpers.hpp"

#include "dprob/eval/metrics.hpp"

#include <algorithm>
#include <numeric>
#include <random>
#include <sstream>

using namespace dprob;
using test::box;

namespace {

/// Independent VOC-style AP: walk detections by confidence, claim the best-IoU
/// ground truth, then integrate the precision envelope over every recall step.
double oracle_ap(const std::vector<ScoredBox>& dets, const std::vector<GtBox>& gts, double thr) {
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return dets[a].confidence > dets[b].confidence; });
  std::vector<bool> used(gts.size(), false);
  std::vector<double> prec, rec;
  double tp = 0, fp = 0;
  for (std::size_t i : order) {
    double best = -1;
    std::size_t arg = gts.size();
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (gts[g].image != dets[i].image) continue;
      const double iou = box_iou(dets[i].box, gts[g].box);
      if (iou > best) best = iou, arg = g;
    }
    if (arg < gts.size() && best >= thr && !used[arg]) {
      used[arg] = true;
      ++tp;
    } else {
      ++fp;
    }
    prec.push_back(tp / (tp + fp));
    rec.push_back(tp / static_cast<double>(gts.size()));
  }
  double ap = 0, prev_r = 0;
  for (std::size_t i = 0; i < prec.size(); ++i) {
    const double envelope = *std::max_element(prec.begin() + static_cast<long>(i), prec.end());
    ap += (rec[i] - prev_r) * envelope;
    prev_r = rec[i];
  }
  return ap;
}

Detection det(const Box& b, int label, std::vector<double> known, double unknown) {
  Detection d;
  d.box = b;
  d.label = label;
  d.known_conf = std::move(known);
  d.unknown_conf = unknown;
  d.confidence = label == kUnknownLabel ? unknown : *std::max_element(d.known_conf.begin(), d.known_conf.end());
  return d;
}

}  // namespace

TEST_CASE("AP trivial cases" * doctest::test_suite("oracle")) {
  const std::vector<GtBox> gts{{0, box(0.3, 0.3, 0.2, 0.2)}, {1, box(0.6, 0.6, 0.2, 0.2)}};
  SUBCASE("perfect detections") {
    CHECK(*compute_ap({{0, gts[0].box, 0.9}, {1, gts[1].box, 0.8}}, gts) == doctest::Approx(1.0));
  }
  SUBCASE("no ground truth is undefined") { CHECK_FALSE(compute_ap({{0, gts[0].box, 0.9}}, {}).has_value()); }
  SUBCASE("no detections is zero") { CHECK(*compute_ap({}, gts) == 0.0); }
  SUBCASE("a false positive ranked first halves the precision") {
    const double ap = *compute_ap({{0, box(0.8, 0.8, 0.1, 0.1), 0.9}, {0, gts[0].box, 0.8}, {1, gts[1].box, 0.7}}, gts);
    CHECK(ap == doctest::Approx(2.0 / 3.0));
  }
  SUBCASE("duplicates are false positives") {
    CHECK(*compute_ap({{0, gts[0].box, 0.9}, {0, gts[0].box, 0.8}}, gts) == doctest::Approx(0.5));
  }
  SUBCASE("detections in the wrong image never match") {
    CHECK(*compute_ap({{1, gts[0].box, 0.9}}, gts) == 0.0);
  }
}

TEST_CASE("AP equals an independent matcher on random sets" * doctest::test_suite("oracle")) {
  std::mt19937_64 rng(31);
  std::uniform_real_distribution<double> u(0.15, 0.85), s(0.05, 0.3), conf(0, 1);
  std::uniform_int_distribution<int> count(0, 8), image(0, 2);
  for (int trial = 0; trial < 300; ++trial) {
    std::vector<GtBox> gts;
    std::vector<ScoredBox> dets;
    const int g = count(rng) + 1;
    for (int i = 0; i < g; ++i) gts.push_back({image(rng), box(u(rng), u(rng), s(rng), s(rng))});
    const int d = count(rng) * 2;
    for (int i = 0; i < d; ++i) {
      if (i % 2 == 0) {
        const auto& t = gts[static_cast<std::size_t>(i / 2) % gts.size()];
        Box b = t.box;
        b(0) += (conf(rng) - 0.5) * 0.1;
        dets.push_back({t.image, b, conf(rng)});
      } else {
        dets.push_back({image(rng), box(u(rng), u(rng), s(rng), s(rng)), conf(rng)});
      }
    }
    for (double thr : {0.3, 0.5, 0.7}) CHECK(*compute_ap(dets, gts, thr) == doctest::Approx(oracle_ap(dets, gts, thr)).epsilon(1e-12));
  }
}

TEST_CASE("U-Recall" * doctest::test_suite("oracle")) {
  const std::vector<GtBox> gts{{0, box(0.3, 0.3, 0.2, 0.2)}, {0, box(0.7, 0.7, 0.2, 0.2)}, {1, box(0.5, 0.5, 0.2, 0.2)}};
  CHECK(compute_u_recall({}, gts) == 0.0);
  CHECK(compute_u_recall({{0, gts[0].box, 0.5}}, {}) == 0.0);
  CHECK(compute_u_recall({{0, gts[0].box, 0.5}, {1, gts[2].box, 0.1}}, gts) == doctest::Approx(2.0 / 3.0));
  CHECK(compute_u_recall({{0, gts[0].box, 0.5}, {0, gts[0].box, 0.6}}, gts) == doctest::Approx(1.0 / 3.0));
  SUBCASE("per-image cap keeps the most confident") {
    const std::vector<ScoredBox> dets{{0, box(0.1, 0.9, 0.05, 0.05), 0.9}, {0, gts[0].box, 0.2}, {0, gts[1].box, 0.3}};
    CHECK(compute_u_recall(dets, gts, 0.5, 1) == 0.0);
    CHECK(compute_u_recall(dets, gts, 0.5, 2) == doctest::Approx(1.0 / 3.0));
    CHECK(compute_u_recall(dets, gts, 0.5, std::nullopt) == doctest::Approx(2.0 / 3.0));
  }
  SUBCASE("monotone in the detection set") {
    std::vector<ScoredBox> dets;
    double last = 0;
    for (const auto& g : gts) {
      dets.push_back({g.image, g.box, 0.5});
      const double r = compute_u_recall(dets, gts);
      CHECK(r >= last);
      last = r;
    }
    CHECK(last == doctest::Approx(1.0));
  }
}

TEST_CASE("report_task splits metrics by class group") {
  TaskSpec task;
  task.task_id = 2;
  task.previous_classes = {0};
  task.introduced_classes = {1};
  task.known_classes = {0, 1};
  task.unknown_classes = {2};
  Scene scene;
  scene.scene_id = "s0";
  scene.annotations = {{0, box(0.25, 0.25, 0.2, 0.2)}, {1, box(0.75, 0.25, 0.2, 0.2)}, {2, box(0.5, 0.75, 0.2, 0.2)}};
  std::vector<Detection> dets{
      det(box(0.25, 0.25, 0.2, 0.2), 0, {0.9, 0.1}, 0.0),
      det(box(0.75, 0.25, 0.2, 0.2), 0, {0.6, 0.3}, 0.0),  // wrong label, still ranked for class 1
      det(box(0.5, 0.75, 0.2, 0.2), kUnknownLabel, {0.1, 0.1}, 0.7),
  };
  dets[0].origin = QueryOrigin::query_selected;
  const EvalReport r = report_task(task, {scene}, {dets}, EvalOptions{});
  CHECK(*r.per_class_ap.at(0) == doctest::Approx(1.0));
  CHECK(*r.per_class_ap.at(1) == doctest::Approx(1.0));
  CHECK(*r.map_prev == doctest::Approx(1.0));
  CHECK(*r.map_curr == doctest::Approx(1.0));
  CHECK(*r.map_both == doctest::Approx(1.0));
  CHECK(*r.u_recall == doctest::Approx(1.0));
  CHECK(r.stats.unknown_gt == 1);
  CHECK(r.stats.known_labeled == 2);
  CHECK(r.stats.unknown_labeled == 1);
  CHECK(r.attribution.known.count == 2);
  CHECK(*r.attribution.known.query_selected == doctest::Approx(0.5));

  SUBCASE("first task has no previous group") {
    TaskSpec t1 = task;
    t1.task_id = 1;
    t1.previous_classes.clear();
    t1.introduced_classes = {0, 1};
    CHECK_FALSE(report_task(t1, {scene}, {dets}, EvalOptions{}).map_prev.has_value());
  }
  SUBCASE("reports are byte-stable and carry provenance") {
    const Provenance p{"abc123", 7, "dead"};
    std::ostringstream a, b;
    write_report_csv(a, r, p);
    write_report_csv(b, report_task(task, {scene}, {dets}, EvalOptions{}), p);
    CHECK(a.str() == b.str());
    CHECK(a.str().find("abc123,7,dead") != std::string::npos);
    const auto j = report_json(r, p);
    CHECK(j.at("config_hash") == "abc123");
    CHECK(j.at("seed") == 7);
  }
  SUBCASE("mismatched detection lists are rejected") {
    CHECK_THROWS(report_task(task, {scene}, {}, EvalOptions{}));
  }
}

TEST_CASE("format_number round-trips") {
  for (double v : {0.1, 1.0 / 3.0, 0.0, 1e-17, 123456.789}) CHECK(std::stod(format_number(v)) == v);
}
