// SPDX-License-Identifier: Apache-2.0
//
// Miniature query-based detector: strided conv backbone, single-scale
// deformable encoder, and a decoder with per-layer heads and iterative box
// refinement. Templated on the scalar so the same graph trains in float and is
// gradient-checked in double.
#pragma once

#include "dprob/model/config.hpp"
#include "dprob/model/etop.hpp"
#include "dprob/model/layers.hpp"
#include "dprob/model/objectness.hpp"
#include "dprob/model/tdqi.hpp"

#include <optional>
#include <vector>

namespace dprob {

template <typename T>
struct DecoderLayerOutput {
  std::optional<Var<T>> class_logits;  ///< N x (C+1), view columns
  Var<T> boxes;                        ///< N x 4
  Var<T> embeddings;                   ///< N x d
  std::optional<Vector<double>> objectness;  ///< present iff the layer predicts objectness
};

template <typename T>
struct ForwardResult {
  std::vector<DecoderLayerOutput<T>> layers;
  std::vector<LayerRoute> routes;
  std::vector<QueryOrigin> origins;
  std::optional<Proposals<T>> proposals;
  std::vector<SelectedProposal<T>> selected;

  std::vector<LayerValues> values() const;
};

/// sigmoid(logit(box) + delta) per coordinate, with box clamped into
/// (1e-6, 1 - 1e-6) before the logit.
template <typename T>
Var<T> iterative_refine(Var<T> reference_box, Var<T> delta) {
  return sigmoid(add(inverse_sigmoid(reference_box, T(1e-6)), delta));
}

template <typename T>
class Detector {
 public:
  /// `with_tdqi = false` builds the selection-free variant (no encoder heads at all).
  Detector(ModelConfig model, TdqiConfig tdqi, EtopConfig etop, bool with_tdqi = true);

  ForwardResult<T> forward(Tape<T>& tape, const Matrix<T>& image, const TaskView& view,
                           const GaussianStats<T>& stats, bool trainable = true);

  /// image (S x S) -> (S/8 * S/8) x d tokens.
  Var<T> backbone_forward(ParamBinder<T>& bind, const Matrix<T>& image) const;

  /// Encoder input: the tokens of every level stacked, coarsest first.
  Var<T> backbone_levels(ParamBinder<T>& bind, const Matrix<T>& image) const;

  /// `cells[i]` is the cell (row-major within its level, levels stacked as in
  /// feature_levels()) of token i.
  Var<T> encoder_forward(ParamBinder<T>& bind, Var<T> tokens, const std::vector<Index>& cells) const;

  /// One decoder layer (0-based index): self-attention, deformable
  /// cross-attention into `memory`, feed-forward. Returns the new content.
  Var<T> decoder_layer_forward(ParamBinder<T>& bind, Var<T> content, Var<T> reference, Var<T> memory,
                               int layer_index) const;

  Var<T> class_head(ParamBinder<T>& bind, Var<T> embeddings, int layer_index, const TaskView& view) const;
  Var<T> box_head(ParamBinder<T>& bind, Var<T> embeddings, int layer_index) const;

  ParameterStore<T>& parameters() { return store_; }
  const ParameterStore<T>& parameters() const { return store_; }
  const ModelConfig& model_config() const { return model_; }
  const TdqiConfig& tdqi_config() const { return tdqi_; }
  const EtopConfig& etop_config() const { return etop_; }
  bool with_tdqi() const { return with_tdqi_; }

  Index feature_size() const { return model_.image_size / 8; }
  Index token_count() const { return model_.token_count(); }
  const std::vector<FeatureLevel>& feature_levels() const { return levels_; }
  /// Normalized (cx, cy) of every token, levels stacked.
  const Matrix<T>& token_centers() const { return token_centers_; }
  /// Anchor boxes attached to encoder tokens for proposals.
  Matrix<T> proposal_anchors() const;

 private:
  struct EncoderLayer {
    DeformableAttention<T> attn;
    LayerNorm<T> norm1, norm2;
    Linear<T> ffn1, ffn2;
  };
  struct DecoderLayer {
    MultiheadAttention<T> self_attn;
    DeformableAttention<T> cross_attn;
    LayerNorm<T> norm1, norm2, norm3;
    Linear<T> ffn1, ffn2;
    Linear<T> class_head;
    Mlp<T> box_head;
  };

  ModelConfig model_;
  TdqiConfig tdqi_;
  EtopConfig etop_;
  bool with_tdqi_;
  ParameterStore<T> store_;

  std::vector<Parameter<T>*> conv_weights_, conv_biases_;
  Linear<T> input_proj_;
  LayerNorm<T> input_norm_;
  Linear<T> fine_proj_;
  LayerNorm<T> fine_norm_;
  Parameter<T>* level_embed_ = nullptr;
  std::vector<EncoderLayer> encoder_;
  std::vector<DecoderLayer> decoder_;
  Mlp<T> query_pos_;
  std::optional<ProposalHeads<T>> proposal_heads_;
  Linear<T> selected_proj_;
  LayerNorm<T> selected_norm_;
  Parameter<T>* learnable_content_ = nullptr;
  Parameter<T>* learnable_ref_logits_ = nullptr;

  std::vector<FeatureLevel> levels_;
  std::vector<Index> token_level_;
  Matrix<T> token_centers_;
  Matrix<T> token_pos_;

  std::vector<Var<T>> conv_stack(ParamBinder<T>& bind, const Matrix<T>& image) const;
};

extern template class Detector<float>;
extern template class Detector<double>;

}  // namespace dprob
