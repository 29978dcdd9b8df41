// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace dprob {

/// Dense row-major matrix; every tensor in the library is a 2-D view of one.
template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using RowVector = Eigen::Matrix<T, 1, Eigen::Dynamic>;
template <typename T>
using Vector = Eigen::Matrix<T, Eigen::Dynamic, 1>;

using Index = Eigen::Index;

template <typename T>
class Tape;

/// A trainable tensor that outlives any single tape.
template <typename T>
struct Parameter {
  std::string name;
  Matrix<T> value;
  Matrix<T> grad;

  Parameter() = default;
  Parameter(std::string n, Matrix<T> v)
      : name(std::move(n)), value(std::move(v)), grad(Matrix<T>::Zero(value.rows(), value.cols())) {}

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

/// Handle to a node recorded on a tape. Cheap to copy.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, Index id) : tape_(tape), id_(id) {}

  const Matrix<T>& value() const;
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  Index size() const { return value().size(); }
  T item() const { return value()(0, 0); }

  Tape<T>& tape() const { return *tape_; }
  Index id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }
  bool needs_grad() const;

 private:
  Tape<T>* tape_ = nullptr;
  Index id_ = -1;
};

/// Reverse-mode recording. Nodes are appended in evaluation order, so a reverse
/// sweep visits every consumer before its producers.
template <typename T>
class Tape {
 public:
  using Backward = std::function<void(Tape&, Index)>;

  Tape() { nodes_.reserve(1024); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Matrix<T> value) { return push(std::move(value), false, nullptr); }
  Var<T> variable(Matrix<T> value) { return push(std::move(value), true, nullptr); }

  /// Leaf bound to a parameter; backward accumulates into `p.grad`.
  Var<T> param(Parameter<T>& p) {
    Parameter<T>* target = &p;
    return push(p.value, true, [target](Tape& t, Index self) {
      if (target->grad.rows() != target->value.rows() || target->grad.cols() != target->value.cols())
        target->grad.setZero(target->value.rows(), target->value.cols());
      target->grad += t.grad(self);
    });
  }

  /// Records an op output. `needs_grad` is the OR over the op's inputs.
  Var<T> push(Matrix<T> value, bool needs_grad, Backward backward) {
    nodes_.push_back(Node{std::move(value), Matrix<T>(), needs_grad, false, std::move(backward)});
    return Var<T>(this, static_cast<Index>(nodes_.size()) - 1);
  }

  const Matrix<T>& value(Index id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  bool needs_grad(Index id) const { return nodes_[static_cast<std::size_t>(id)].needs_grad; }

  /// Gradient buffer of a node, zero-initialized on first touch.
  Matrix<T>& grad(Index id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.has_grad) {
      n.grad.setZero(n.value.rows(), n.value.cols());
      n.has_grad = true;
    }
    return n.grad;
  }
  bool has_grad(Index id) const { return nodes_[static_cast<std::size_t>(id)].has_grad; }

  /// Seeds d(root)/d(root) = 1 (root must be 1x1) and sweeps backwards.
  void backward(const Var<T>& root) {
    if (root.value().size() != 1) throw std::invalid_argument("backward: root must be a scalar");
    grad(root.id()).setOnes();
    for (Index i = root.id(); i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (!n.needs_grad || !n.has_grad || !n.backward) continue;
      n.backward(*this, i);
    }
  }

  std::size_t size() const { return nodes_.size(); }

  /// Detached values, in call order. With `record`, each detach appends its
  /// value to `store`; otherwise each detach returns the next stored value, so
  /// a perturbed re-evaluation holds every stop-gradient input fixed.
  void freeze_detached(std::vector<Matrix<T>>* store, bool record) {
    frozen_ = store;
    record_ = record;
    cursor_ = 0;
  }
  Matrix<T> detached_value(const Matrix<T>& live) {
    if (!frozen_) return live;
    if (record_) {
      frozen_->push_back(live);
      return live;
    }
    if (cursor_ >= frozen_->size()) throw std::logic_error("detach replay ran past the recorded values");
    return (*frozen_)[cursor_++];
  }

 private:
  struct Node {
    Matrix<T> value;
    Matrix<T> grad;
    bool needs_grad;
    bool has_grad;
    Backward backward;
  };
  std::vector<Node> nodes_;
  std::vector<Matrix<T>>* frozen_ = nullptr;
  bool record_ = false;
  std::size_t cursor_ = 0;
};

template <typename T>
const Matrix<T>& Var<T>::value() const {
  return tape_->value(id_);
}

template <typename T>
bool Var<T>::needs_grad() const {
  return tape_->needs_grad(id_);
}

}  // namespace dprob
