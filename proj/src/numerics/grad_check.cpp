// SPDX-License-Identifier: Apache-2.0
#include "dprob/numerics/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace dprob {

namespace {

double evaluate(const Objective& f, std::vector<Matrix<double>>* frozen) {
  Tape<double> tape;
  if (frozen) tape.freeze_detached(frozen, false);
  const double v = f(tape).item();
  if (!std::isfinite(v)) throw std::domain_error("grad_check: objective is not finite");
  return v;
}

}  // namespace

GradReport grad_check(const Objective& f, const std::vector<Parameter<double>*>& params,
                      const GradCheckOptions& options) {
  for (auto* p : params) p->zero_grad();
  std::vector<Matrix<double>> detached;
  std::vector<Matrix<double>>* frozen = options.freeze_detached ? &detached : nullptr;
  {
    Tape<double> tape;
    if (frozen) tape.freeze_detached(frozen, true);
    Var<double> root = f(tape);
    if (!std::isfinite(root.item())) throw std::domain_error("grad_check: objective is not finite");
    tape.backward(root);
  }

  GradReport report;
  for (auto* p : params) {
    if (!p->grad.allFinite()) throw std::domain_error("grad_check: reverse gradient of " + p->name + " is not finite");
    GradEntryError entry{p->name};
    const Index total = p->value.size();
    const Index stride =
        options.max_entries_per_param > 0 ? std::max<Index>(1, total / options.max_entries_per_param) : 1;
    for (Index i = 0; i < total; i += stride) {
      double& x = p->value.data()[i];
      const double saved = x;
      x = saved + options.eps;
      const double up = evaluate(f, frozen);
      x = saved - options.eps;
      const double down = evaluate(f, frozen);
      x = saved;
      const double numeric = (up - down) / (2 * options.eps);
      const double analytic = p->grad.data()[i];
      const double abs_err = std::abs(numeric - analytic);
      const double rel_err = abs_err / std::max({std::abs(numeric), std::abs(analytic), options.rel_floor});
      entry.max_abs_err = std::max(entry.max_abs_err, abs_err);
      entry.max_rel_err = std::max(entry.max_rel_err, rel_err);
      ++entry.checked;
    }
    report.max_abs_err = std::max(report.max_abs_err, entry.max_abs_err);
    report.max_rel_err = std::max(report.max_rel_err, entry.max_rel_err);
    report.per_parameter.push_back(std::move(entry));
  }
  return report;
}

GradReport grad_check(const std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)>& f,
                      std::vector<Matrix<double>> inputs, const GradCheckOptions& options) {
  std::vector<Parameter<double>> params;
  params.reserve(inputs.size());
  for (std::size_t i = 0; i < inputs.size(); ++i) params.emplace_back("input" + std::to_string(i), std::move(inputs[i]));
  std::vector<Parameter<double>*> ptrs;
  for (auto& p : params) ptrs.push_back(&p);
  Objective objective = [&](Tape<double>& tape) {
    std::vector<Var<double>> leaves;
    for (auto& p : params) leaves.push_back(tape.param(p));
    return f(tape, leaves);
  };
  return grad_check(objective, ptrs, options);
}

}  // namespace dprob
