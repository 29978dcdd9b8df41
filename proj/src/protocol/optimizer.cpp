// SPDX-License-Identifier: Apache-2.0
#include "dprob/protocol/optimizer.hpp"

#include <cmath>

namespace dprob {

void AdamW::step(ParameterStore<float>& store, double lr) {
  ++steps_;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(steps_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(steps_));
  const float b1 = static_cast<float>(config_.beta1), b2 = static_cast<float>(config_.beta2);
  for (auto& [name, p] : store.all()) {
    auto [mi, m_new] = m_.try_emplace(name, Matrix<float>::Zero(p.value.rows(), p.value.cols()));
    auto [vi, v_new] = v_.try_emplace(name, Matrix<float>::Zero(p.value.rows(), p.value.cols()));
    Matrix<float>& m = mi->second;
    Matrix<float>& v = vi->second;
    m = b1 * m + (1.0f - b1) * p.grad;
    v = b2 * v + (1.0f - b2) * p.grad.cwiseAbs2();
    p.value *= static_cast<float>(1.0 - lr * config_.weight_decay);
    const float step = static_cast<float>(lr / bc1);
    const float root_bc2 = static_cast<float>(std::sqrt(bc2));
    p.value.array() -= step * m.array() / (v.array().sqrt() / root_bc2 + static_cast<float>(config_.eps));
  }
}

double clip_grad_norm(ParameterStore<float>& store, double max_norm) {
  double sq = 0;
  for (const auto& [_, p] : store.all()) sq += p.grad.cast<double>().squaredNorm();
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const float s = static_cast<float>(max_norm / (norm + 1e-6));
    for (auto& [_, p] : store.all()) p.grad *= s;
  }
  return norm;
}

}  // namespace dprob
