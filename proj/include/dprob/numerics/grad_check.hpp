// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "dprob/numerics/tape.hpp"

#include <functional>
#include <string>
#include <vector>

namespace dprob {

struct GradEntryError {
  std::string name;
  double max_abs_err = 0;
  double max_rel_err = 0;
  Index checked = 0;
};

struct GradReport {
  double max_abs_err = 0;
  double max_rel_err = 0;
  std::vector<GradEntryError> per_parameter;

  bool passed(double rel_tol) const { return max_rel_err <= rel_tol; }
};

struct GradCheckOptions {
  double eps = 1e-5;
  /// Denominator floor for the relative error, so entries whose true gradient is
  /// ~0 are judged by absolute error instead.
  double rel_floor = 1e-6;
  /// Checks at most this many entries per parameter (evenly strided); 0 = all.
  Index max_entries_per_param = 0;
  /// Perturbed evaluations reuse the detached values of the unperturbed one, so
  /// the numeric side differentiates the same stop-gradient graph as the tape.
  bool freeze_detached = true;
};

/// Scalar objective built on a fresh tape. It must bind the checked parameters
/// through `tape.param(p)`.
using Objective = std::function<Var<double>(Tape<double>&)>;

/// Compares reverse-mode gradients against central finite differences.
/// Throws std::domain_error when either side produces a non-finite value.
GradReport grad_check(const Objective& f, const std::vector<Parameter<double>*>& params,
                      const GradCheckOptions& options = {});

/// Convenience form for free-standing inputs: `f` receives one leaf per input.
GradReport grad_check(const std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)>& f,
                      std::vector<Matrix<double>> inputs, const GradCheckOptions& options = {});

}  // namespace dprob
