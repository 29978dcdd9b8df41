// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "dprob/numerics/ops.hpp"

#include <algorithm>

namespace dprob {

/// Boxes are (cx, cy, w, h) unless a name says xyxy.
using Box = Eigen::Matrix<double, 1, 4>;

inline Box cxcywh_to_xyxy(const Box& b) {
  return Box(b(0) - 0.5 * b(2), b(1) - 0.5 * b(3), b(0) + 0.5 * b(2), b(1) + 0.5 * b(3));
}

inline double box_area_xyxy(const Box& b) { return std::max(0.0, b(2) - b(0)) * std::max(0.0, b(3) - b(1)); }

/// IoU on corner-converted boxes; 0 when the union is empty.
inline double box_iou(const Box& a, const Box& b) {
  const Box x = cxcywh_to_xyxy(a), y = cxcywh_to_xyxy(b);
  const double iw = std::max(0.0, std::min(x(2), y(2)) - std::max(x(0), y(0)));
  const double ih = std::max(0.0, std::min(x(3), y(3)) - std::max(x(1), y(1)));
  const double inter = iw * ih;
  const double uni = box_area_xyxy(x) + box_area_xyxy(y) - inter;
  return uni > 0 ? inter / uni : 0.0;
}

/// Generalized IoU in (-1, 1].
inline double giou(const Box& a, const Box& b) {
  const Box x = cxcywh_to_xyxy(a), y = cxcywh_to_xyxy(b);
  const double iw = std::max(0.0, std::min(x(2), y(2)) - std::max(x(0), y(0)));
  const double ih = std::max(0.0, std::min(x(3), y(3)) - std::max(x(1), y(1)));
  const double inter = iw * ih;
  const double uni = box_area_xyxy(x) + box_area_xyxy(y) - inter;
  const double ew = std::max(x(2), y(2)) - std::min(x(0), y(0));
  const double eh = std::max(x(3), y(3)) - std::min(x(1), y(1));
  const double enclose = ew * eh;
  return inter / uni - (enclose - uni) / enclose;
}

/// Row-wise differentiable gIoU between k predicted and k target boxes; k x 1.
template <typename T>
Var<T> giou_rows(Var<T> pred, Var<T> target) {
  auto corners = [](Var<T> b) {
    Var<T> c = slice_cols(b, 0, 2);
    Var<T> half = scale(slice_cols(b, 2, 2), T(0.5));
    return std::pair{sub(c, half), add(c, half)};  // (x0,y0), (x1,y1)
  };
  auto [p0, p1] = corners(pred);
  auto [t0, t1] = corners(target);
  auto area = [](Var<T> lo, Var<T> hi) {
    Var<T> wh = relu(sub(hi, lo));
    return mul(slice_cols(wh, 0, 1), slice_cols(wh, 1, 1));
  };
  Var<T> inter = area(maximum(p0, t0), minimum(p1, t1));
  Var<T> uni = sub(add(area(p0, p1), area(t0, t1)), inter);
  Var<T> enclose = area(minimum(p0, t0), maximum(p1, t1));
  return sub(div(inter, uni), div(sub(enclose, uni), enclose));
}

}  // namespace dprob
