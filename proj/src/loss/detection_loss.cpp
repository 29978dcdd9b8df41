// SPDX-License-Identifier: Apache-2.0
#include "dprob/loss/detection_loss.hpp"

#include <cmath>
#include <iomanip>
#include <stdexcept>

namespace dprob {

void CostWeights::validate() const {
  if (class_weight < 0 || l1_weight < 0 || giou_weight < 0 || objectness_weight < 0)
    throw std::invalid_argument("loss weights must be >= 0");
  if (focal_gamma < 0) throw std::invalid_argument("loss.focal_gamma must be >= 0");
}

Matrix<double> match_cost(const Matrix<double>* logits, const Matrix<double>& boxes, const GroundTruth& gt,
                          const CostWeights& w) {
  const Index n = boxes.rows();
  const Index g = gt.size();
  if (gt.boxes.rows() != g) throw std::invalid_argument("match_cost: ground-truth boxes and columns disagree");
  Matrix<double> cost = Matrix<double>::Zero(n, g);
  if (g == 0) return cost;
  for (Index j = 0; j < g; ++j) {
    const Box t = gt.boxes.row(j);
    for (Index i = 0; i < n; ++i) {
      const Box b = boxes.row(i);
      double c = w.l1_weight * (b - t).cwiseAbs().sum() - w.giou_weight * giou(b, t);
      if (logits) {
        const double p = 1.0 / (1.0 + std::exp(-(*logits)(i, gt.columns[static_cast<std::size_t>(j)])));
        const double pos = w.focal_alpha * std::pow(1.0 - p, w.focal_gamma) * -std::log(p + 1e-8);
        const double neg = (1.0 - w.focal_alpha) * std::pow(p, w.focal_gamma) * -std::log(1.0 - p + 1e-8);
        c += w.class_weight * (pos - neg);
      }
      cost(i, j) = c;
    }
  }
  return cost;
}

double LossBreakdown::weighted_total(const CostWeights& w) const {
  double t = 0;
  auto add = [&](const LayerLoss& l) {
    t += w.class_weight * l.l_class + w.l1_weight * l.l_l1 + w.giou_weight * l.l_giou;
    if (l.l_obj) t += w.objectness_weight * *l.l_obj;
  };
  for (const auto& l : layers) add(l);
  if (encoder) add(*encoder);
  return t;
}

namespace {

template <typename T>
struct Terms {
  Var<T> weighted;
  LayerLoss record;
  std::vector<Index> matched_queries;
};

// Class and box terms for one prediction set; the objectness term is added by the caller.
template <typename T>
Terms<T> set_loss(Tape<T>& tape, const std::optional<Var<T>>& logits, Var<T> boxes, bool box_loss, const GroundTruth& gt,
                  const CostWeights& w) {
  Terms<T> out;
  const Index n = boxes.rows();
  const Index g = gt.size();
  const Matrix<double> logit_values =
      logits ? Matrix<double>(logits->value().template cast<double>()) : Matrix<double>(0, 0);
  const Matrix<double> cost =
      match_cost(logits ? &logit_values : nullptr, boxes.value().template cast<double>(), gt, w);
  const Assignment a = hungarian_match(cost);
  out.record.matches = a.pairs;

  std::vector<Index> targets_idx;
  for (const auto& [q, j] : a.pairs) {
    out.matched_queries.push_back(q);
    targets_idx.push_back(j);
  }

  Var<T> total = tape.constant(Matrix<T>::Zero(1, 1));
  if (logits) {
    const Index cols = logits->cols();
    Matrix<T> target = Matrix<T>::Zero(n, cols);
    std::vector<char> matched(static_cast<std::size_t>(n), 0);
    for (const auto& [q, j] : a.pairs) {
      target(q, gt.columns[static_cast<std::size_t>(j)]) = T(1);
      matched[static_cast<std::size_t>(q)] = 1;
    }
    if (w.background_column_target)
      for (Index q = 0; q < n; ++q)
        if (!matched[static_cast<std::size_t>(q)]) target(q, cols - 1) = T(1);
    Var<T> l = sigmoid_focal(*logits, target, static_cast<T>(w.focal_alpha), static_cast<T>(w.focal_gamma), g);
    out.record.l_class = static_cast<double>(l.item());
    total = add(total, scale(l, static_cast<T>(w.class_weight)));
  }
  if (box_loss && !a.pairs.empty()) {
    Matrix<T> tgt(static_cast<Index>(targets_idx.size()), 4);
    for (Index r = 0; r < tgt.rows(); ++r) tgt.row(r) = gt.boxes.row(targets_idx[static_cast<std::size_t>(r)]).template cast<T>();
    Var<T> pred = gather_rows(boxes, out.matched_queries);
    Var<T> tv = tape.constant(std::move(tgt));
    const T norm = T(1) / static_cast<T>(std::max<Index>(g, 1));
    Var<T> l1 = scale(sum(abs(sub(pred, tv))), norm);
    Var<T> gl = scale(add_scalar(scale(sum(giou_rows(pred, tv)), T(-1)), static_cast<T>(pred.rows())), norm);
    out.record.l_l1 = static_cast<double>(l1.item());
    out.record.l_giou = static_cast<double>(gl.item());
    total = add(total, add(scale(l1, static_cast<T>(w.l1_weight)), scale(gl, static_cast<T>(w.giou_weight))));
  }
  out.weighted = total;
  return out;
}

}  // namespace

template <typename T>
LossResult<T> detection_loss(const ForwardResult<T>& outputs, const GroundTruth& gt, const CostWeights& weights,
                             const EtopConfig& etop, const GaussianStats<T>& stats) {
  weights.validate();
  if (outputs.layers.empty()) throw std::invalid_argument("detection_loss: no decoder layers");
  if (outputs.routes.size() != outputs.layers.size()) throw std::invalid_argument("detection_loss: routes and layers disagree");
  for (Index c : gt.columns)
    if (c < 0) throw std::invalid_argument("detection_loss: ground truth outside the task view");
  Tape<T>& tape = outputs.layers.front().boxes.tape();

  LossResult<T> result;
  Var<T> total = tape.constant(Matrix<T>::Zero(1, 1));
  const int stop = etop.effective_stop_layer();
  const int stats_layer = etop.effective_stats_layer();
  const Index d = outputs.layers.front().embeddings.cols();
  result.stats_embeddings = Matrix<T>(0, d);

  for (std::size_t l = 0; l < outputs.layers.size(); ++l) {
    const auto& layer = outputs.layers[l];
    const LayerRoute& route = outputs.routes[l];
    Terms<T> terms = set_loss(tape, layer.class_logits, layer.boxes, route.class_box, gt, weights);
    total = add(total, terms.weighted);
    if (route.objectness) {
      Var<T> emb = gather_rows(layer.embeddings, terms.matched_queries);
      if (etop.detach_early_objectness && static_cast<int>(l) + 1 < stop) emb = detach(emb);
      Var<T> obj = objectness_loss(stats, emb);
      terms.record.l_obj = static_cast<double>(obj.item());
      total = add(total, scale(obj, static_cast<T>(weights.objectness_weight)));
    }
    if (static_cast<int>(l) + 1 == stats_layer) result.stats_embeddings = gather_rows(layer.embeddings, terms.matched_queries).value();
    result.breakdown.layers.push_back(std::move(terms.record));
  }

  if (outputs.proposals) {
    Terms<T> terms = set_loss(tape, std::optional<Var<T>>(outputs.proposals->logits), outputs.proposals->boxes, true, gt, weights);
    total = add(total, terms.weighted);
    result.breakdown.encoder = std::move(terms.record);
  }
  result.total = total;
  result.breakdown.total = static_cast<double>(total.item());
  return result;
}

void write_loss_csv_header(std::ostream& os) { os << "step,layer,l_class,l_l1,l_giou,l_obj\n"; }

void write_loss_csv_rows(std::ostream& os, std::int64_t step, const LossBreakdown& b) {
  const auto old = os.precision(std::numeric_limits<double>::max_digits10);
  auto row = [&](int layer, const LayerLoss& l) {
    os << step << ',' << layer << ',' << l.l_class << ',' << l.l_l1 << ',' << l.l_giou << ',';
    if (l.l_obj) os << *l.l_obj;
    os << '\n';
  };
  if (b.encoder) row(0, *b.encoder);
  for (std::size_t i = 0; i < b.layers.size(); ++i) row(static_cast<int>(i) + 1, b.layers[i]);
  os.precision(old);
}

template LossResult<float> detection_loss(const ForwardResult<float>&, const GroundTruth&, const CostWeights&,
                                          const EtopConfig&, const GaussianStats<float>&);
template LossResult<double> detection_loss(const ForwardResult<double>&, const GroundTruth&, const CostWeights&,
                                           const EtopConfig&, const GaussianStats<double>&);

}  // namespace dprob
