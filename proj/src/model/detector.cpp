// SPDX-License-Identifier: Apache-2.0
#include "dprob/model/detector.hpp"

#include <cmath>
#include <numeric>
#include <random>

namespace dprob {

namespace {

double logit(double p) { return std::log(p / (1.0 - p)); }

}  // namespace

template <typename T>
std::vector<LayerValues> ForwardResult<T>::values() const {
  std::vector<LayerValues> out;
  out.reserve(layers.size());
  for (const auto& l : layers) {
    LayerValues v;
    if (l.class_logits) v.class_logits = l.class_logits->value().template cast<double>();
    v.boxes = l.boxes.value().template cast<double>();
    v.embeddings = l.embeddings.value().template cast<double>();
    v.objectness = l.objectness;
    out.push_back(std::move(v));
  }
  return out;
}

template <typename T>
Detector<T>::Detector(ModelConfig model, TdqiConfig tdqi, EtopConfig etop, bool with_tdqi)
    : model_(std::move(model)), tdqi_(tdqi), etop_(etop), with_tdqi_(with_tdqi), store_(model_.init_seed) {
  model_.validate();
  tdqi_.validate();
  etop_.validate();
  if (etop_.total_layers != model_.decoder_layers)
    throw std::invalid_argument("etop.total_layers must equal model.decoder_layers");
  if (!with_tdqi_ && tdqi_.n_qs != 0) throw std::invalid_argument("a detector without TDQI needs n_qs = 0");

  const Index d = model_.embed_dim;
  const Index heads = model_.heads;
  const Index points = model_.points;
  const Index columns = model_.total_classes + 1;
  const T prior_bias = static_cast<T>(-std::log((1.0 - 0.01) / 0.01));

  // Backbone: 3x3 stride-2 convolutions, the last one widening to d.
  std::vector<int> channels = {1};
  channels.insert(channels.end(), model_.backbone_channels.begin(), model_.backbone_channels.end());
  while (channels.size() < 4) channels.push_back(static_cast<int>(d));
  channels.back() = static_cast<int>(d);
  for (std::size_t i = 0; i + 1 < channels.size(); ++i) {
    const std::string name = "backbone.conv" + std::to_string(i);
    conv_weights_.push_back(&store_.add_xavier(name + ".weight", 9 * channels[i], channels[i + 1], std::sqrt(2.0)));
    conv_biases_.push_back(&store_.add_constant(name + ".bias", 1, channels[i + 1], T(0)));
  }
  input_proj_ = Linear<T>::create(store_, "backbone.proj", d, d);
  input_norm_ = LayerNorm<T>::create(store_, "backbone.norm", d);
  const Index levels = model_.encoder_levels;
  if (levels > 1) {
    fine_proj_ = Linear<T>::create(store_, "backbone.fine_proj", channels[2], d);
    fine_norm_ = LayerNorm<T>::create(store_, "backbone.fine_norm", d);
    level_embed_ = &store_.add_xavier("backbone.level_embed", levels, d);
  }

  for (int l = 0; l < model_.encoder_layers; ++l) {
    const std::string name = "encoder." + std::to_string(l);
    encoder_.push_back(EncoderLayer{DeformableAttention<T>::create(store_, name + ".attn", d, heads, points, levels),
                                    LayerNorm<T>::create(store_, name + ".norm1", d),
                                    LayerNorm<T>::create(store_, name + ".norm2", d),
                                    Linear<T>::create(store_, name + ".ffn1", d, model_.ffn_dim),
                                    Linear<T>::create(store_, name + ".ffn2", model_.ffn_dim, d)});
  }

  for (int l = 0; l < model_.decoder_layers; ++l) {
    const std::string name = "decoder." + std::to_string(l);
    DecoderLayer layer{MultiheadAttention<T>::create(store_, name + ".self_attn", d, heads),
                       DeformableAttention<T>::create(store_, name + ".cross_attn", d, heads, points, levels),
                       LayerNorm<T>::create(store_, name + ".norm1", d),
                       LayerNorm<T>::create(store_, name + ".norm2", d),
                       LayerNorm<T>::create(store_, name + ".norm3", d),
                       Linear<T>::create(store_, name + ".ffn1", d, model_.ffn_dim),
                       Linear<T>::create(store_, name + ".ffn2", model_.ffn_dim, d),
                       Linear<T>::create(store_, name + ".class", d, columns),
                       Mlp<T>::create(store_, name + ".box", d, d, 4, 3)};
    layer.class_head.bias->value.setConstant(prior_bias);
    layer.box_head.layers.back().weight->value.setZero();
    layer.box_head.layers.back().bias->value.setZero();
    decoder_.push_back(std::move(layer));
  }
  query_pos_ = Mlp<T>::create(store_, "query_pos", d, d, d, 2);

  if (with_tdqi_ && tdqi_.n_qs > 0) {
    ProposalHeads<T> heads_{Linear<T>::create(store_, "proposal.project", d, d), LayerNorm<T>::create(store_, "proposal.norm", d),
                            Linear<T>::create(store_, "proposal.class", d, columns),
                            Mlp<T>::create(store_, "proposal.box", d, d, 4, 3)};
    heads_.class_head.bias->value.setConstant(prior_bias);
    heads_.box_head.layers.back().weight->value.setZero();
    heads_.box_head.layers.back().bias->value.setZero();
    proposal_heads_ = std::move(heads_);
    selected_proj_ = Linear<T>::create(store_, "selected.proj", d, d);
    selected_norm_ = LayerNorm<T>::create(store_, "selected.norm", d);
  }

  // Learnable queries: content drawn per name; reference centres on an even
  // grid of logits, sides at learnable_ref_size.
  const Index n_lq = tdqi_.n_lq;
  const Index n_content = tdqi_.mixed_selection ? tdqi_.num_queries() : n_lq;
  if (n_content > 0) learnable_content_ = &store_.add_xavier("queries.content", n_content, d);
  if (n_lq > 0) {
    const Index grid_cols = static_cast<Index>(std::ceil(std::sqrt(static_cast<double>(n_lq))));
    const Index grid_rows = (n_lq + grid_cols - 1) / grid_cols;
    const double span = logit(0.9);
    auto spread = [&](Index i, Index count) {
      return count <= 1 ? 0.0 : -span + 2.0 * span * static_cast<double>(i) / static_cast<double>(count - 1);
    };
    Matrix<T> ref(n_lq, 4);
    for (Index i = 0; i < n_lq; ++i) {
      ref(i, 0) = static_cast<T>(spread(i % grid_cols, grid_cols));
      ref(i, 1) = static_cast<T>(spread(i / grid_cols, grid_rows));
      ref(i, 2) = ref(i, 3) = static_cast<T>(logit(model_.learnable_ref_size));
    }
    learnable_ref_logits_ = &store_.add("queries.ref_logits", std::move(ref));
  }

  Index first = 0;
  for (Index l = 0; l < levels; ++l) {
    const Index side = feature_size() << l;
    levels_.push_back({side, side, first});
    first += side * side;
  }
  token_centers_.resize(first, 2);
  for (Index l = 0; l < levels; ++l) {
    const FeatureLevel& f = levels_[static_cast<std::size_t>(l)];
    for (Index r = 0; r < f.height; ++r)
      for (Index c = 0; c < f.width; ++c) {
        const Index i = f.first_row + r * f.width + c;
        token_centers_(i, 0) = static_cast<T>((static_cast<double>(c) + 0.5) / static_cast<double>(f.width));
        token_centers_(i, 1) = static_cast<T>((static_cast<double>(r) + 0.5) / static_cast<double>(f.height));
        token_level_.push_back(l);
      }
  }
  token_pos_ = sine_embed(token_centers_, d / 2);
}

template <typename T>
Matrix<T> Detector<T>::proposal_anchors() const {
  // Finer levels get proportionally smaller anchors.
  Matrix<T> a(token_count(), 4);
  a.leftCols(2) = token_centers_;
  for (Index i = 0; i < a.rows(); ++i)
    a.row(i).tail(2).setConstant(static_cast<T>(model_.proposal_anchor_size / static_cast<double>(1 << token_level_[static_cast<std::size_t>(i)])));
  return a;
}

template <typename T>
std::vector<Var<T>> Detector<T>::conv_stack(ParamBinder<T>& bind, const Matrix<T>& image) const {
  const Index size = model_.image_size;
  if (image.rows() != size || image.cols() != size)
    throw std::invalid_argument("backbone: image must be " + std::to_string(size) + "x" + std::to_string(size));
  Tape<T>& tape = bind.tape();
  Var<T> x = tape.constant(Eigen::Map<const Matrix<T>>(image.data(), size * size, 1));
  std::vector<Var<T>> outputs;
  Index h = size;
  for (std::size_t i = 0; i < conv_weights_.size(); ++i) {
    x = relu(conv2d(x, h, h, bind(*conv_weights_[i]), bind(*conv_biases_[i]), 3, 2, 1));
    h = (h + 1) / 2;
    outputs.push_back(x);
  }
  return outputs;
}

template <typename T>
Var<T> Detector<T>::backbone_forward(ParamBinder<T>& bind, const Matrix<T>& image) const {
  return input_norm_(bind, input_proj_(bind, conv_stack(bind, image).back()));
}

template <typename T>
Var<T> Detector<T>::backbone_levels(ParamBinder<T>& bind, const Matrix<T>& image) const {
  const std::vector<Var<T>> convs = conv_stack(bind, image);
  Var<T> coarse = input_norm_(bind, input_proj_(bind, convs.back()));
  if (model_.encoder_levels == 1) return coarse;
  return concat_rows<T>({coarse, fine_norm_(bind, fine_proj_(bind, convs[1]))});
}

template <typename T>
Var<T> Detector<T>::encoder_forward(ParamBinder<T>& bind, Var<T> tokens, const std::vector<Index>& cells) const {
  const Index n = tokens.rows();
  if (n == 0) throw std::invalid_argument("encoder: empty feature map");
  if (static_cast<Index>(cells.size()) != n || n != token_count())
    throw std::invalid_argument("encoder: one cell per token over the full feature map is required");
  Tape<T>& tape = bind.tape();

  bool identity = true;
  std::vector<Index> grid_to_token(static_cast<std::size_t>(n), -1), level_of(static_cast<std::size_t>(n));
  Matrix<T> pos(n, model_.embed_dim), ref(n, 4);
  for (Index i = 0; i < n; ++i) {
    const Index cell = cells[static_cast<std::size_t>(i)];
    if (cell < 0 || cell >= n || grid_to_token[static_cast<std::size_t>(cell)] != -1)
      throw std::invalid_argument("encoder: cells must be a permutation of the grid");
    grid_to_token[static_cast<std::size_t>(cell)] = i;
    identity = identity && cell == i;
    const Index level = token_level_[static_cast<std::size_t>(cell)];
    level_of[static_cast<std::size_t>(i)] = level;
    pos.row(i) = token_pos_.row(cell);
    ref(i, 0) = token_centers_(cell, 0);
    ref(i, 1) = token_centers_(cell, 1);
    ref(i, 2) = ref(i, 3) = static_cast<T>(model_.encoder_ref_cells / static_cast<double>(levels_[static_cast<std::size_t>(level)].width));
  }
  Var<T> pos_v = tape.constant(std::move(pos));
  if (level_embed_) pos_v = add(pos_v, gather_rows(bind(*level_embed_), level_of));
  Var<T> ref_v = tape.constant(std::move(ref));

  Var<T> src = tokens;
  for (const auto& layer : encoder_) {
    Var<T> grid_values = identity ? src : gather_rows(src, grid_to_token);
    Var<T> attn = layer.attn(bind, add(src, pos_v), ref_v, grid_values, levels_);
    src = layer.norm1(bind, add(src, attn));
    src = layer.norm2(bind, add(src, layer.ffn2(bind, relu(layer.ffn1(bind, src)))));
  }
  return src;
}

template <typename T>
Var<T> Detector<T>::decoder_layer_forward(ParamBinder<T>& bind, Var<T> content, Var<T> reference, Var<T> memory,
                                          int layer_index) const {
  const auto& layer = decoder_.at(static_cast<std::size_t>(layer_index));
  Tape<T>& tape = bind.tape();
  // The positional embedding sees the reference box but passes no gradient to it.
  Var<T> pos = query_pos_(bind, tape.constant(sine_embed(detach(reference).value(), model_.embed_dim / 4)));
  Var<T> q = add(content, pos);
  content = layer.norm1(bind, add(content, layer.self_attn(bind, q, q, content)));
  Var<T> cross = layer.cross_attn(bind, add(content, pos), reference, memory, levels_);
  content = layer.norm2(bind, add(content, cross));
  return layer.norm3(bind, add(content, layer.ffn2(bind, relu(layer.ffn1(bind, content)))));
}

template <typename T>
Var<T> Detector<T>::class_head(ParamBinder<T>& bind, Var<T> embeddings, int layer_index, const TaskView& view) const {
  return select_cols(decoder_.at(static_cast<std::size_t>(layer_index)).class_head(bind, embeddings), view.columns());
}

template <typename T>
Var<T> Detector<T>::box_head(ParamBinder<T>& bind, Var<T> embeddings, int layer_index) const {
  return decoder_.at(static_cast<std::size_t>(layer_index)).box_head(bind, embeddings);
}

template <typename T>
ForwardResult<T> Detector<T>::forward(Tape<T>& tape, const Matrix<T>& image, const TaskView& view,
                                      const GaussianStats<T>& stats, bool trainable) {
  if (view.total_classes != model_.total_classes) throw std::invalid_argument("forward: task view class count mismatch");
  ParamBinder<T> bind(tape, trainable);
  ForwardResult<T> result;
  result.routes = layer_routing(etop_);

  Var<T> tokens = backbone_levels(bind, image);
  std::vector<Index> cells(static_cast<std::size_t>(tokens.rows()));
  std::iota(cells.begin(), cells.end(), Index{0});
  Var<T> memory = encoder_forward(bind, tokens, cells);

  std::optional<Var<T>> selected_content;
  if (with_tdqi_ && tdqi_.n_qs > 0) {
    Proposals<T> proposals = encoder_proposals(bind, *proposal_heads_, memory, proposal_anchors(), view.columns());
    const Matrix<T> scores = sigmoid_value(proposals.logits.value());
    result.selected = query_select(scores, proposals.boxes.value(), tdqi_.n_qs, view.known_count());
    std::vector<Index> idx;
    for (const auto& s : result.selected) idx.push_back(s.token_index);
    const Matrix<T> boxes = detach(gather_rows(proposals.boxes, idx)).value();
    for (Index i = 0; i < boxes.rows(); ++i) result.selected[static_cast<std::size_t>(i)].box = boxes.row(i);
    if (!tdqi_.mixed_selection)
      selected_content = selected_norm_(bind, selected_proj_(bind, gather_rows(proposals.memory, idx)));
    result.proposals = proposals;
  }

  std::optional<Var<T>> learnable_content, learnable_ref;
  if (learnable_content_) {
    Var<T> all = bind(*learnable_content_);
    if (tdqi_.mixed_selection && tdqi_.n_qs > 0) {
      selected_content = slice_rows(all, 0, tdqi_.n_qs);
      if (tdqi_.n_lq > 0) learnable_content = slice_rows(all, tdqi_.n_qs, tdqi_.n_lq);
    } else {
      learnable_content = all;
    }
  }
  if (learnable_ref_logits_) learnable_ref = sigmoid(bind(*learnable_ref_logits_));

  QueryBatch<T> queries = init_queries(tape, selected_content, result.selected, learnable_content, learnable_ref);
  result.origins = queries.origin;

  Var<T> content = queries.content;
  Var<T> reference = queries.reference;
  for (int l = 0; l < model_.decoder_layers; ++l) {
    const LayerRoute& route = result.routes[static_cast<std::size_t>(l)];
    content = decoder_layer_forward(bind, content, reference, memory, l);
    DecoderLayerOutput<T> out;
    out.embeddings = content;
    if (route.class_box) {
      out.class_logits = class_head(bind, content, l, view);
      out.boxes = iterative_refine(reference, box_head(bind, content, l));
    } else {
      out.boxes = reference;
    }
    if (route.objectness) out.objectness = objectness_scores_f64(stats, content.value());
    reference = detach(out.boxes);
    result.layers.push_back(std::move(out));
  }
  return result;
}

template struct ForwardResult<float>;
template struct ForwardResult<double>;
template class Detector<float>;
template class Detector<double>;

}  // namespace dprob
