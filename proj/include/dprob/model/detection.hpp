// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "dprob/loss/box_ops.hpp"
#include "dprob/model/config.hpp"

#include <algorithm>
#include <vector>

namespace dprob {

/// Which classes are known at a task. Head columns outside the view are masked
/// out of losses, selection and inference; the view always ends with the
/// unknown/background column.
struct TaskView {
  std::vector<int> known_classes;
  int total_classes = 0;

  int known_count() const { return static_cast<int>(known_classes.size()); }
  std::vector<Index> columns() const {
    std::vector<Index> c(known_classes.begin(), known_classes.end());
    c.push_back(total_classes);
    return c;
  }
  /// Column of a class inside the view, or -1 when the class is not known.
  int column_of(int class_id) const {
    auto it = std::find(known_classes.begin(), known_classes.end(), class_id);
    return it == known_classes.end() ? -1 : static_cast<int>(it - known_classes.begin());
  }
};

inline constexpr int kUnknownLabel = -1;

struct Detection {
  Box box = Box::Zero();
  /// Factorized confidences of the known classes, in view order.
  std::vector<double> known_conf;
  double unknown_conf = 0;
  /// Known class id, or kUnknownLabel.
  int label = kUnknownLabel;
  double confidence = 0;
  QueryOrigin origin = QueryOrigin::learnable;
  Index query = 0;
};

}  // namespace dprob
