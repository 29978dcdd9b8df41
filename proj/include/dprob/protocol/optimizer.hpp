// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "dprob/model/layers.hpp"

#include <map>
#include <string>

namespace dprob {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
};

/// Adam with decoupled weight decay over every parameter of a store.
class AdamW {
 public:
  explicit AdamW(AdamWConfig config = {}) : config_(config) {}

  void step(ParameterStore<float>& store, double lr);

  const AdamWConfig& config() const { return config_; }
  std::int64_t steps() const { return steps_; }
  void set_steps(std::int64_t s) { steps_ = s; }
  std::map<std::string, Matrix<float>>& first_moments() { return m_; }
  std::map<std::string, Matrix<float>>& second_moments() { return v_; }
  const std::map<std::string, Matrix<float>>& first_moments() const { return m_; }
  const std::map<std::string, Matrix<float>>& second_moments() const { return v_; }

 private:
  AdamWConfig config_;
  std::int64_t steps_ = 0;
  std::map<std::string, Matrix<float>> m_, v_;
};

/// Scales all gradients so their global L2 norm is at most max_norm; returns
/// the norm before clipping. max_norm <= 0 disables clipping.
double clip_grad_norm(ParameterStore<float>& store, double max_norm);

}  // namespace dprob
