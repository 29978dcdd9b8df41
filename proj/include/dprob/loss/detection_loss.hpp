// SPDX-License-Identifier: Apache-2.0
//
// Set-prediction loss: per-layer Hungarian matching, sigmoid focal class loss,
// L1 + gIoU box losses, and the Mahalanobis objectness term on the layers that
// predict objectness.
#pragma once

#include "dprob/loss/box_ops.hpp"
#include "dprob/loss/hungarian.hpp"
#include "dprob/model/detector.hpp"

#include <optional>
#include <ostream>
#include <vector>

namespace dprob {

struct CostWeights {
  double class_weight = 2.0;
  double l1_weight = 5.0;
  double giou_weight = 2.0;
  double focal_alpha = 0.25;
  double focal_gamma = 2.0;
  /// Weight of the objectness term in the total loss.
  double objectness_weight = 8e-4;
  /// Unmatched queries take a positive target on the unknown/background
  /// column. Off means all-zero targets for them.
  bool background_column_target = true;

  void validate() const;
};

/// Ground truth in view coordinates: one row per box, `columns[i]` is the view
/// column of box i (always a known class).
struct GroundTruth {
  Matrix<double> boxes = Matrix<double>(0, 4);
  std::vector<Index> columns;

  Index size() const { return static_cast<Index>(columns.size()); }
};

/// N x G matching cost. Without logits (layers that carry no class head) the
/// class term is dropped.
Matrix<double> match_cost(const Matrix<double>* logits, const Matrix<double>& boxes, const GroundTruth& gt,
                          const CostWeights& weights);

/// Mean-normalized sigmoid focal loss: sum over entries divided by max(G, 1).
template <typename T>
Var<T> sigmoid_focal(Var<T> logits, const Matrix<T>& targets, T alpha, T gamma, Index num_boxes) {
  return scale(sigmoid_focal_sum(logits, targets, alpha, gamma), T(1) / static_cast<T>(std::max<Index>(num_boxes, 1)));
}

struct LayerLoss {
  double l_class = 0;
  double l_l1 = 0;
  double l_giou = 0;
  std::optional<double> l_obj;
  std::vector<std::pair<Index, Index>> matches;  ///< (query, gt)
};

struct LossBreakdown {
  std::vector<LayerLoss> layers;
  std::optional<LayerLoss> encoder;
  double total = 0;

  /// Weighted sum of the recorded components.
  double weighted_total(const CostWeights& w) const;
};

template <typename T>
struct LossResult {
  Var<T> total;
  LossBreakdown breakdown;
  /// Matched embeddings of the stats layer, for the Gaussian update.
  Matrix<T> stats_embeddings;
};

template <typename T>
LossResult<T> detection_loss(const ForwardResult<T>& outputs, const GroundTruth& gt, const CostWeights& weights,
                             const EtopConfig& etop, const GaussianStats<T>& stats);

/// One CSV row per layer: step,layer,l_class,l_l1,l_giou,l_obj (encoder rows use layer 0).
void write_loss_csv_header(std::ostream& os);
void write_loss_csv_rows(std::ostream& os, std::int64_t step, const LossBreakdown& b);

extern template LossResult<float> detection_loss(const ForwardResult<float>&, const GroundTruth&, const CostWeights&,
                                                 const EtopConfig&, const GaussianStats<float>&);
extern template LossResult<double> detection_loss(const ForwardResult<double>&, const GroundTruth&, const CostWeights&,
                                                  const EtopConfig&, const GaussianStats<double>&);

}  // namespace dprob
