// SPDX-License-Identifier: Apache-2.0
#include "dprob/model/tdqi.hpp"

namespace dprob {

namespace {

OriginFractions fractions(Index qs, Index lq) {
  OriginFractions f;
  f.count = qs + lq;
  if (f.count > 0) {
    f.query_selected = static_cast<double>(qs) / static_cast<double>(f.count);
    f.learnable = static_cast<double>(lq) / static_cast<double>(f.count);
  }
  return f;
}

}  // namespace

OriginAttribution origin_attribution(const std::vector<Detection>& detections, double threshold) {
  Index known_qs = 0, known_lq = 0, unknown_qs = 0, unknown_lq = 0;
  for (const auto& d : detections) {
    if (d.confidence < threshold) continue;
    const bool qs = d.origin == QueryOrigin::query_selected;
    if (d.label == kUnknownLabel)
      (qs ? unknown_qs : unknown_lq)++;
    else
      (qs ? known_qs : known_lq)++;
  }
  return {fractions(known_qs, known_lq), fractions(unknown_qs, unknown_lq)};
}

}  // namespace dprob
