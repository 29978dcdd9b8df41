// SPDX-License-Identifier: Apache-2.0
#include "dprob/model/etop.hpp"

#include "dprob/model/objectness.hpp"

#include <stdexcept>

namespace dprob {

std::vector<bool> objectness_layer_mask(const EtopConfig& config) {
  config.validate();
  const int n = config.effective_stop_layer();
  std::vector<bool> mask(static_cast<std::size_t>(config.total_layers));
  for (int l = 1; l <= config.total_layers; ++l) mask[static_cast<std::size_t>(l - 1)] = l <= n;
  return mask;
}

std::vector<LayerRoute> layer_routing(const EtopConfig& config) {
  const auto mask = objectness_layer_mask(config);
  std::vector<LayerRoute> routes(mask.size());
  for (std::size_t i = 0; i < mask.size(); ++i) {
    routes[i].objectness = mask[i];
    routes[i].class_box = config.schedule != Schedule::dol || !mask[i];
  }
  return routes;
}

std::vector<LayerRoute> dol_variant_schedule(const EtopConfig& config) {
  EtopConfig dol = config;
  dol.schedule = Schedule::dol;
  return layer_routing(dol);
}

std::vector<Detection> assemble_inference(const std::vector<LayerValues>& layers, const EtopConfig& config,
                                          const TaskView& view, const std::vector<QueryOrigin>& origins) {
  if (layers.empty()) throw std::invalid_argument("assemble_inference: no layers");
  const int n = config.effective_stop_layer();
  if (n < 1 || n > static_cast<int>(layers.size())) throw std::invalid_argument("assemble_inference: stop layer out of range");
  const LayerValues& last = layers.back();
  const LayerValues& obj_layer = layers[static_cast<std::size_t>(n - 1)];
  if (!obj_layer.objectness) throw std::invalid_argument("assemble_inference: stop layer carries no objectness");
  if (!last.class_logits) throw std::invalid_argument("assemble_inference: last layer carries no class logits");
  const Index queries = last.boxes.rows();
  const int known = view.known_count();
  if (last.class_logits->cols() != known + 1) throw std::invalid_argument("assemble_inference: logits do not match the task view");

  const Matrix<double> probs = sigmoid_value(*last.class_logits);
  std::vector<Detection> out;
  out.reserve(static_cast<std::size_t>(queries));
  for (Index q = 0; q < queries; ++q) {
    const double obj = (*obj_layer.objectness)(q);
    const RowVector<double> fact = factorized_class_prob<double>(probs.row(q), obj);
    Detection d;
    d.box = last.boxes.row(q);
    d.query = q;
    d.origin = q < static_cast<Index>(origins.size()) ? origins[static_cast<std::size_t>(q)] : QueryOrigin::learnable;
    d.known_conf.assign(fact.data(), fact.data() + known);
    const double unknown_fact = fact(known);
    d.unknown_conf = config.unknown_ranking == UnknownRanking::objectness ? obj : unknown_fact;
    int best = -1;
    double best_conf = -1;
    for (int c = 0; c < known; ++c)
      if (fact(c) > best_conf) {
        best_conf = fact(c);
        best = c;
      }
    if (best < 0 || unknown_fact > best_conf) {
      d.label = kUnknownLabel;
      d.confidence = d.unknown_conf;
    } else {
      d.label = view.known_classes[static_cast<std::size_t>(best)];
      d.confidence = best_conf;
    }
    out.push_back(std::move(d));
  }
  return out;
}

}  // namespace dprob
