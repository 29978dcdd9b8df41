// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace dprob {

struct ModelConfig {
  int image_size = 64;
  int embed_dim = 64;
  int heads = 4;
  int points = 4;
  int ffn_dim = 128;
  int encoder_layers = 2;
  int decoder_layers = 6;
  /// Every class id the protocol can ever introduce; the head has one extra
  /// column for unknown/background.
  int total_classes = 6;
  std::vector<int> backbone_channels = {16, 32};
  /// 1: encoder reads the stride-8 map only. 2: also the stride-4 map of the
  /// second conv block, so query selection ranks S^2/64 + S^2/16 tokens.
  int encoder_levels = 2;
  /// Width/height of the anchor box attached to each encoder token.
  double proposal_anchor_size = 0.2;
  /// Initial width/height of learnable reference boxes.
  double learnable_ref_size = 0.1;
  /// Offsets of each encoder token's deformable sampling, in cells.
  double encoder_ref_cells = 2.0;
  std::uint64_t init_seed = 0;

  void validate() const {
    if (image_size % 8 != 0 || image_size < 8) throw std::invalid_argument("model.image_size must be a positive multiple of 8");
    if (embed_dim <= 0 || heads <= 0 || embed_dim % heads != 0) throw std::invalid_argument("model.embed_dim must divide by model.heads");
    if (embed_dim % 4 != 0) throw std::invalid_argument("model.embed_dim must be a multiple of 4");
    if (encoder_levels < 1 || encoder_levels > 2) throw std::invalid_argument("model.encoder_levels must be 1 or 2");
    if (points <= 0 || ffn_dim <= 0 || encoder_layers < 0 || decoder_layers <= 0 || total_classes <= 0)
      throw std::invalid_argument("model sizes must be positive");
  }
  /// Encoder tokens over all levels.
  int token_count() const {
    const int s = image_size / 8;
    return s * s + (encoder_levels > 1 ? 4 * s * s : 0);
  }
};

struct TdqiConfig {
  int n_qs = 20;
  int n_lq = 80;
  /// DINO-style mixed selection: selected queries keep learnable content and
  /// take only their reference box from the proposal.
  bool mixed_selection = false;

  int num_queries() const { return n_qs + n_lq; }
  void validate() const {
    if (n_qs < 0 || n_lq < 0 || n_qs + n_lq <= 0) throw std::invalid_argument("tdqi: n_qs, n_lq must be >= 0 with a positive sum");
  }
};

enum class Schedule { etop, dol, none };

inline std::string to_string(Schedule s) {
  switch (s) {
    case Schedule::etop: return "etop";
    case Schedule::dol: return "dol";
    case Schedule::none: return "none";
  }
  return "etop";
}

inline Schedule schedule_from_string(const std::string& s) {
  if (s == "etop") return Schedule::etop;
  if (s == "dol") return Schedule::dol;
  if (s == "none") return Schedule::none;
  throw std::invalid_argument("unknown schedule '" + s + "'");
}

enum class UnknownRanking { factorized, objectness };

struct EtopConfig {
  int stop_layer = 2;
  int total_layers = 6;
  Schedule schedule = Schedule::etop;
  /// Unknown confidence: factorized unknown column, or objectness alone.
  UnknownRanking unknown_ranking = UnknownRanking::factorized;
  /// Layer whose matched embeddings feed the Gaussian; 0 means the stop layer.
  int stats_layer = 0;
  /// Objectness loss at layers below the stop layer reads detached embeddings.
  bool detach_early_objectness = false;

  /// Stop layer after applying the schedule: "none" predicts objectness everywhere.
  int effective_stop_layer() const { return schedule == Schedule::none ? total_layers : stop_layer; }
  int effective_stats_layer() const { return stats_layer > 0 ? stats_layer : effective_stop_layer(); }

  void validate() const {
    if (total_layers <= 0) throw std::invalid_argument("etop.total_layers must be positive");
    if (stop_layer < 1 || stop_layer > total_layers) throw std::invalid_argument("etop.stop_layer must lie in [1, total_layers]");
    if (stats_layer < 0 || stats_layer > effective_stop_layer())
      throw std::invalid_argument("etop.stats_layer must lie in [0, stop layer]");
  }
};

enum class QueryOrigin : std::uint8_t { query_selected, learnable };

inline const char* to_string(QueryOrigin o) { return o == QueryOrigin::query_selected ? "qs" : "lq"; }

}  // namespace dprob
