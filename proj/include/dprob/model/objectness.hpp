// SPDX-License-Identifier: Apache-2.0
//
// Probabilistic objectness: a Gaussian over matched query embeddings, tracked
// with an exponential moving average, scored through the Mahalanobis distance.
#pragma once

#include "dprob/numerics/ops.hpp"

#include <cmath>
#include <cstdint>
#include <stdexcept>

namespace dprob {

template <typename T>
struct GaussianStats {
  RowVector<T> mean;
  Matrix<T> covariance;
  T momentum = T(0.1);
  T regularizer = T(1e-6);
  std::int64_t step_count = 0;
  /// Keeps only the diagonal of the batch covariance (for wide embeddings).
  bool diagonal = false;
  /// Scoring uses exp(-temperature * d^2); 1 is the plain Gaussian likelihood proxy.
  T temperature = T(1);

  GaussianStats() = default;
  explicit GaussianStats(Index dim, T momentum_ = T(0.1), T regularizer_ = T(1e-6))
      : mean(RowVector<T>::Zero(dim)), covariance(Matrix<T>::Identity(dim, dim)), momentum(momentum_),
        regularizer(regularizer_) {}

  Index dim() const { return mean.cols(); }

  /// Lower Cholesky factor of covariance + regularizer * I. Throws when the
  /// factorization fails even after regularization.
  Matrix<T> cholesky() const {
    Matrix<T> reg = covariance;
    reg.diagonal().array() += regularizer;
    Eigen::LLT<Matrix<T>> llt(reg);
    if (llt.info() != Eigen::Success)
      throw std::runtime_error("objectness: covariance factorization failed (corrupted stats)");
    return llt.matrixL();
  }
};

/// Blends batch statistics of the matched embeddings (m x d) into `stats`.
/// Batches with fewer than two rows are skipped. The first accepted batch
/// replaces the state instead of blending. Uses the biased (1/m) covariance.
template <typename T>
void ema_update(GaussianStats<T>& stats, const Matrix<T>& matched) {
  if (matched.rows() < 2) return;
  if (matched.cols() != stats.dim()) throw std::invalid_argument("ema_update: embedding width mismatch");
  if (!matched.allFinite()) throw std::domain_error("ema_update: non-finite embeddings");
  const RowVector<T> batch_mean = matched.colwise().mean();
  const Matrix<T> centered = matched.rowwise() - batch_mean;
  Matrix<T> batch_cov = (centered.transpose() * centered) / static_cast<T>(matched.rows());
  if (stats.diagonal) batch_cov = Matrix<T>(batch_cov.diagonal().asDiagonal());
  if (stats.step_count == 0) {
    stats.mean = batch_mean;
    stats.covariance = batch_cov;
  } else {
    const T rho = stats.momentum;
    stats.mean = (T(1) - rho) * stats.mean + rho * batch_mean;
    stats.covariance = (T(1) - rho) * stats.covariance + rho * batch_cov;
  }
  ++stats.step_count;
}

/// (q - mu)^T (Sigma + eps I)^{-1} (q - mu) via a Cholesky solve.
template <typename T>
T mahalanobis_sq(const GaussianStats<T>& stats, const RowVector<T>& q) {
  const Matrix<T> lower = stats.cholesky();
  const Vector<T> z = lower.template triangularView<Eigen::Lower>().solve((q - stats.mean).transpose());
  return z.squaredNorm();
}

/// Squared distances for every row of `queries`, reusing one factorization.
template <typename T>
Vector<T> mahalanobis_sq_rows(const GaussianStats<T>& stats, const Matrix<T>& queries) {
  const Matrix<T> lower = stats.cholesky();
  const Matrix<T> z = lower.template triangularView<Eigen::Lower>().solve((queries.rowwise() - stats.mean).transpose());
  return z.colwise().squaredNorm().transpose();
}

/// exp(-tau * d_M^2): in (0, 1], equal to 1 exactly at the mean.
template <typename T>
T objectness_score(const GaussianStats<T>& stats, const RowVector<T>& q) {
  return std::exp(-stats.temperature * mahalanobis_sq(stats, q));
}

template <typename T>
Vector<T> objectness_scores(const GaussianStats<T>& stats, const Matrix<T>& queries) {
  return (-stats.temperature * mahalanobis_sq_rows(stats, queries).array()).exp().matrix();
}

/// Scores in double precision whatever the training scalar: exp(-d^2)
/// underflows single precision for d^2 beyond ~87.
template <typename T>
Vector<double> objectness_scores_f64(const GaussianStats<T>& stats, const Matrix<T>& queries) {
  GaussianStats<double> s;
  s.mean = stats.mean.template cast<double>();
  s.covariance = stats.covariance.template cast<double>();
  s.momentum = static_cast<double>(stats.momentum);
  s.regularizer = static_cast<double>(stats.regularizer);
  s.step_count = stats.step_count;
  s.diagonal = stats.diagonal;
  s.temperature = static_cast<double>(stats.temperature);
  return objectness_scores(s, Matrix<double>(queries.template cast<double>()));
}

/// Sum of squared Mahalanobis distances of the matched embeddings. The stats are
/// constants; the gradient reaches only the embeddings. Empty input gives 0.
template <typename T>
Var<T> objectness_loss(const GaussianStats<T>& stats, Var<T> matched) {
  if (matched.rows() == 0) return matched.tape().constant(Matrix<T>::Zero(1, 1));
  return sum(mahalanobis_rows(matched, stats.mean, stats.cholesky()));
}

/// p(c|q) = p(c|o,q) * p(o|q), elementwise over the (C+1) independent sigmoids.
template <typename T>
RowVector<T> factorized_class_prob(const RowVector<T>& class_probs, T objectness) {
  return class_probs * objectness;
}

}  // namespace dprob
