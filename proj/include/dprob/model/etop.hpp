// SPDX-License-Identifier: Apache-2.0
//
// Early termination of objectness prediction: which decoder layers predict and
// are supervised on objectness, and how the final detections are assembled.
#pragma once

#include "dprob/model/config.hpp"
#include "dprob/model/detection.hpp"

#include <optional>
#include <vector>

namespace dprob {

/// Entry l-1 is true iff layer l predicts objectness.
std::vector<bool> objectness_layer_mask(const EtopConfig& config);

struct LayerRoute {
  bool class_box = true;   ///< class/box heads run and are supervised
  bool objectness = false; ///< objectness predicted and supervised
};

/// Per-layer routing for the configured schedule. ETOP keeps class/box on every
/// layer; DOL drops them on the objectness layers (whose boxes pass through).
std::vector<LayerRoute> layer_routing(const EtopConfig& config);

/// The DOL comparison schedule at the same stop layer.
std::vector<LayerRoute> dol_variant_schedule(const EtopConfig& config);

/// Plain-valued per-layer outputs (no tape attached).
struct LayerValues {
  std::optional<Matrix<double>> class_logits;  ///< N x (C+1)
  Matrix<double> boxes;                        ///< N x 4
  Matrix<double> embeddings;                   ///< N x d
  std::optional<Vector<double>> objectness;    ///< N
};

/// One detection per query: class probabilities and box from the last layer,
/// objectness from the stop layer, combined by the factorized rule.
/// Throws when the stop layer carries no objectness.
std::vector<Detection> assemble_inference(const std::vector<LayerValues>& layers, const EtopConfig& config,
                                          const TaskView& view, const std::vector<QueryOrigin>& origins);

}  // namespace dprob
