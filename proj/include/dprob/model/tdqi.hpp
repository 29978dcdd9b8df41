// SPDX-License-Identifier: Apache-2.0
//
// Task-decoupled query initialization: the first n_qs queries come from the
// top-scoring encoder tokens (known-class columns only), the rest are learnable.
#pragma once

#include "dprob/model/detection.hpp"
#include "dprob/model/layers.hpp"

#include <optional>
#include <vector>

namespace dprob {

template <typename T>
struct SelectedProposal {
  Index token_index = 0;
  T score = 0;
  RowVector<T> box;
};

/// Encoder-side heads, separate from every decoder head.
template <typename T>
struct ProposalHeads {
  Linear<T> project;
  LayerNorm<T> norm;
  Linear<T> class_head;
  Mlp<T> box_head;
};

template <typename T>
struct Proposals {
  Var<T> memory;  ///< projected tokens the selected content is taken from
  Var<T> logits;  ///< tokens x (C+1), view columns
  Var<T> boxes;   ///< tokens x 4
};

template <typename T>
Proposals<T> encoder_proposals(ParamBinder<T>& bind, const ProposalHeads<T>& heads, Var<T> memory,
                               const Matrix<T>& anchor_boxes, const std::vector<Index>& view_columns) {
  Var<T> projected = heads.norm(bind, heads.project(bind, memory));
  Var<T> logits = select_cols(heads.class_head(bind, projected), view_columns);
  Var<T> anchors = bind.tape().constant(anchor_boxes);
  Var<T> boxes = sigmoid(add(inverse_sigmoid(anchors), heads.box_head(bind, projected)));
  return {projected, logits, boxes};
}

/// Top-k tokens by their best known-class score. The last column (unknown /
/// background) never takes part in the ranking. Ties go to the lower index.
template <typename T>
std::vector<SelectedProposal<T>> query_select(const Matrix<T>& scores, const Matrix<T>& boxes, Index k,
                                              Index known_count) {
  if (k > scores.rows()) throw std::invalid_argument("query_select: k exceeds the token count");
  if (known_count < 0 || known_count >= scores.cols())
    throw std::invalid_argument("query_select: known_count must leave the unknown column out");
  std::vector<SelectedProposal<T>> all(static_cast<std::size_t>(scores.rows()));
  for (Index i = 0; i < scores.rows(); ++i) {
    auto& s = all[static_cast<std::size_t>(i)];
    s.token_index = i;
    s.score = known_count > 0 ? scores.row(i).head(known_count).maxCoeff() : T(0);
    s.box = boxes.row(i);
  }
  std::stable_sort(all.begin(), all.end(), [](const auto& a, const auto& b) { return a.score > b.score; });
  all.resize(static_cast<std::size_t>(k));
  return all;
}

template <typename T>
struct QueryBatch {
  Var<T> content;
  Var<T> reference;
  std::vector<QueryOrigin> origin;

  Index count(QueryOrigin o) const { return std::count(origin.begin(), origin.end(), o); }
};

/// Concatenates selected and learnable queries, selected first. Selected
/// reference boxes enter as constants.
template <typename T>
QueryBatch<T> init_queries(Tape<T>& tape, std::optional<Var<T>> selected_content,
                           const std::vector<SelectedProposal<T>>& selected, std::optional<Var<T>> learnable_content,
                           std::optional<Var<T>> learnable_ref) {
  const Index n_qs = static_cast<Index>(selected.size());
  const Index n_lq = learnable_content ? learnable_content->rows() : 0;
  if (n_qs > 0 && (!selected_content || selected_content->rows() != n_qs))
    throw std::invalid_argument("init_queries: selected content must have one row per proposal");
  if (n_lq > 0 && (!learnable_ref || learnable_ref->rows() != n_lq))
    throw std::invalid_argument("init_queries: learnable content and reference sizes differ");
  if (n_qs + n_lq == 0) throw std::invalid_argument("init_queries: empty query batch");

  QueryBatch<T> batch;
  std::vector<Var<T>> content, reference;
  if (n_qs > 0) {
    Matrix<T> boxes(n_qs, 4);
    for (Index i = 0; i < n_qs; ++i) boxes.row(i) = selected[static_cast<std::size_t>(i)].box;
    content.push_back(*selected_content);
    reference.push_back(tape.constant(std::move(boxes)));
    batch.origin.insert(batch.origin.end(), static_cast<std::size_t>(n_qs), QueryOrigin::query_selected);
  }
  if (n_lq > 0) {
    content.push_back(*learnable_content);
    reference.push_back(*learnable_ref);
    batch.origin.insert(batch.origin.end(), static_cast<std::size_t>(n_lq), QueryOrigin::learnable);
  }
  batch.content = content.size() == 1 ? content.front() : concat_rows(content);
  batch.reference = reference.size() == 1 ? reference.front() : concat_rows(reference);
  return batch;
}

struct OriginFractions {
  Index count = 0;
  /// Absent when `count` is zero.
  std::optional<double> query_selected;
  std::optional<double> learnable;
};

struct OriginAttribution {
  OriginFractions known;
  OriginFractions unknown;
};

/// Share of detections (confidence >= threshold) produced by each query origin,
/// split by whether the detection is labelled known or unknown.
OriginAttribution origin_attribution(const std::vector<Detection>& detections, double threshold);

}  // namespace dprob
