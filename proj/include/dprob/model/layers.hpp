// SPDX-License-Identifier: Apache-2.0
//
// Parameter storage and the small building blocks the detector is made of.
#pragma once

#include "dprob/numerics/ops.hpp"

#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <unordered_map>

namespace dprob {

/// Named parameters with stable addresses, iterated in name order.
template <typename T>
class ParameterStore {
 public:
  explicit ParameterStore(std::uint64_t seed = 0) : seed_(seed) {}

  Parameter<T>& add(const std::string& name, Matrix<T> init) {
    auto [it, inserted] = params_.try_emplace(name, name, std::move(init));
    if (!inserted) throw std::logic_error("duplicate parameter " + name);
    return it->second;
  }

  /// Xavier-uniform weight. Every parameter draws from its own generator keyed
  /// by (seed, name), so values do not depend on construction order.
  Parameter<T>& add_xavier(const std::string& name, Index rows, Index cols, double gain = 1.0) {
    auto rng = generator(name);
    const double bound = gain * std::sqrt(6.0 / static_cast<double>(rows + cols));
    std::uniform_real_distribution<double> dist(-bound, bound);
    Matrix<T> m(rows, cols);
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(dist(rng));
    return add(name, std::move(m));
  }

  Parameter<T>& add_constant(const std::string& name, Index rows, Index cols, T v) {
    return add(name, Matrix<T>::Constant(rows, cols, v));
  }

  Parameter<T>& get(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("no parameter named " + name);
    return it->second;
  }
  const Parameter<T>& get(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("no parameter named " + name);
    return it->second;
  }
  bool contains(const std::string& name) const { return params_.count(name) != 0; }

  std::map<std::string, Parameter<T>>& all() { return params_; }
  const std::map<std::string, Parameter<T>>& all() const { return params_; }

  void zero_grad() {
    for (auto& [_, p] : params_) p.zero_grad();
  }

  std::mt19937_64 generator(const std::string& name) const {
    std::uint64_t h = 1469598103934665603ull ^ seed_;
    for (unsigned char c : name) h = (h ^ c) * 1099511628211ull;
    return std::mt19937_64(h);
  }

 private:
  std::uint64_t seed_;
  std::map<std::string, Parameter<T>> params_;
};

/// Binds each parameter to a tape leaf at most once per tape.
template <typename T>
class ParamBinder {
 public:
  explicit ParamBinder(Tape<T>& tape, bool trainable = true) : tape_(tape), trainable_(trainable) {}

  Var<T> operator()(Parameter<T>& p) {
    auto it = cache_.find(&p);
    if (it != cache_.end()) return it->second;
    Var<T> v = trainable_ ? tape_.param(p) : tape_.constant(p.value);
    cache_.emplace(&p, v);
    return v;
  }
  Tape<T>& tape() { return tape_; }

 private:
  Tape<T>& tape_;
  bool trainable_;
  std::unordered_map<Parameter<T>*, Var<T>> cache_;
};

template <typename T>
struct Linear {
  Parameter<T>* weight = nullptr;
  Parameter<T>* bias = nullptr;

  static Linear create(ParameterStore<T>& store, const std::string& name, Index in, Index out) {
    Linear l;
    l.weight = &store.add_xavier(name + ".weight", in, out);
    l.bias = &store.add_constant(name + ".bias", 1, out, T(0));
    return l;
  }
  Var<T> operator()(ParamBinder<T>& bind, Var<T> x) const { return add_row(matmul(x, bind(*weight)), bind(*bias)); }
};

template <typename T>
struct LayerNorm {
  Parameter<T>* gain = nullptr;
  Parameter<T>* bias = nullptr;

  static LayerNorm create(ParameterStore<T>& store, const std::string& name, Index width) {
    return LayerNorm{&store.add_constant(name + ".gain", 1, width, T(1)), &store.add_constant(name + ".bias", 1, width, T(0))};
  }
  Var<T> operator()(ParamBinder<T>& bind, Var<T> x) const { return layer_norm(x, bind(*gain), bind(*bias)); }
};

/// Linear -> ReLU -> ... -> Linear.
template <typename T>
struct Mlp {
  std::vector<Linear<T>> layers;

  static Mlp create(ParameterStore<T>& store, const std::string& name, Index in, Index hidden, Index out, int depth) {
    Mlp m;
    for (int i = 0; i < depth; ++i) {
      const Index a = i == 0 ? in : hidden;
      const Index b = i == depth - 1 ? out : hidden;
      m.layers.push_back(Linear<T>::create(store, name + "." + std::to_string(i), a, b));
    }
    return m;
  }
  Var<T> operator()(ParamBinder<T>& bind, Var<T> x) const {
    for (std::size_t i = 0; i < layers.size(); ++i) {
      x = layers[i](bind, x);
      if (i + 1 < layers.size()) x = relu(x);
    }
    return x;
  }
};

/// Sinusoidal embedding of each column of `coords` (values in [0, 1]) into
/// `feats` channels, interleaving sin/cos. Result is n x (k * feats).
template <typename T>
Matrix<T> sine_embed(const Matrix<T>& coords, Index feats, double temperature = 20.0) {
  constexpr double two_pi = 6.283185307179586;
  Matrix<T> out(coords.rows(), coords.cols() * feats);
  for (Index r = 0; r < coords.rows(); ++r)
    for (Index c = 0; c < coords.cols(); ++c)
      for (Index i = 0; i < feats; ++i) {
        const double dim_t = std::pow(temperature, 2.0 * static_cast<double>(i / 2) / static_cast<double>(feats));
        const double arg = static_cast<double>(coords(r, c)) * two_pi / dim_t;
        out(r, c * feats + i) = static_cast<T>(i % 2 == 0 ? std::sin(arg) : std::cos(arg));
      }
  return out;
}

/// Standard multi-head scaled dot-product attention with fused projections.
template <typename T>
struct MultiheadAttention {
  Linear<T> q, k, v, out;
  Index heads = 1;

  static MultiheadAttention create(ParameterStore<T>& store, const std::string& name, Index dim, Index heads) {
    return MultiheadAttention{Linear<T>::create(store, name + ".q", dim, dim), Linear<T>::create(store, name + ".k", dim, dim),
                              Linear<T>::create(store, name + ".v", dim, dim), Linear<T>::create(store, name + ".out", dim, dim),
                              heads};
  }

  Var<T> operator()(ParamBinder<T>& bind, Var<T> query, Var<T> key, Var<T> value) const {
    const Index dim = query.cols();
    const Index dh = dim / heads;
    Var<T> qp = q(bind, query), kp = k(bind, key), vp = v(bind, value);
    const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));
    std::vector<Var<T>> per_head;
    per_head.reserve(static_cast<std::size_t>(heads));
    for (Index h = 0; h < heads; ++h) {
      Var<T> scores = scale(matmul_nt(slice_cols(qp, h * dh, dh), slice_cols(kp, h * dh, dh)), inv_sqrt);
      per_head.push_back(matmul(softmax_rows(scores), slice_cols(vp, h * dh, dh)));
    }
    return out(bind, heads == 1 ? per_head.front() : concat_cols(per_head));
  }
};

/// One feature level inside a row-concatenated multi-level map.
struct FeatureLevel {
  Index height = 0;
  Index width = 0;
  Index first_row = 0;  ///< offset of the level's rows in the concatenated map
};

/// Deformable attention: each query samples `points` locations per head and
/// level around its reference box and blends them with softmax weights.
template <typename T>
struct DeformableAttention {
  Linear<T> offsets, weights, value, out;
  Index heads = 1;
  Index levels = 1;
  Index points = 1;

  static DeformableAttention create(ParameterStore<T>& store, const std::string& name, Index dim, Index heads,
                                    Index points, Index levels = 1) {
    DeformableAttention a;
    a.heads = heads;
    a.levels = levels;
    a.points = points;
    const Index samples = heads * levels * points;
    a.offsets.weight = &store.add_constant(name + ".offsets.weight", dim, samples * 2, T(0));
    // Offsets start on rays in `heads` directions, point p at radius p+1 on every level.
    Matrix<T> bias(1, samples * 2);
    for (Index h = 0; h < heads; ++h) {
      const double theta = 6.283185307179586 * static_cast<double>(h) / static_cast<double>(heads);
      double cx = std::cos(theta), cy = std::sin(theta);
      const double norm = std::max(std::abs(cx), std::abs(cy));
      cx /= norm;
      cy /= norm;
      for (Index l = 0; l < levels; ++l)
        for (Index p = 0; p < points; ++p) {
          const Index c = ((h * levels + l) * points + p) * 2;
          bias(0, c) = static_cast<T>(cx * static_cast<double>(p + 1));
          bias(0, c + 1) = static_cast<T>(cy * static_cast<double>(p + 1));
        }
    }
    a.offsets.bias = &store.add(name + ".offsets.bias", std::move(bias));
    a.weights.weight = &store.add_constant(name + ".weights.weight", dim, samples, T(0));
    a.weights.bias = &store.add_constant(name + ".weights.bias", 1, samples, T(0));
    a.value = Linear<T>::create(store, name + ".value", dim, dim);
    a.out = Linear<T>::create(store, name + ".out", dim, dim);
    return a;
  }

  /// `query` N x d drives offsets and weights; `value_input` stacks the rows of
  /// every level. Attention weights are normalized jointly over levels and points.
  Var<T> operator()(ParamBinder<T>& bind, Var<T> query, Var<T> reference, Var<T> value_input,
                    const std::vector<FeatureLevel>& shape) const {
    if (static_cast<Index>(shape.size()) != levels) throw std::invalid_argument("deformable attention: level count mismatch");
    const Index n = query.rows();
    Var<T> off = offsets(bind, query);
    Var<T> w = reshape(softmax_rows(reshape(weights(bind, query), n * heads, levels * points)), n, heads * levels * points);
    Var<T> v = value(bind, value_input);
    if (levels == 1) return out(bind, deformable_aggregate(v, shape[0].height, shape[0].width, heads, points, reference, off, w));
    std::optional<Var<T>> sum;
    for (Index l = 0; l < levels; ++l) {
      std::vector<Index> wcols, ocols;
      for (Index h = 0; h < heads; ++h)
        for (Index p = 0; p < points; ++p) {
          const Index c = (h * levels + l) * points + p;
          wcols.push_back(c);
          ocols.push_back(2 * c);
          ocols.push_back(2 * c + 1);
        }
      const FeatureLevel& f = shape[static_cast<std::size_t>(l)];
      Var<T> part = deformable_aggregate(slice_rows(v, f.first_row, f.height * f.width), f.height, f.width, heads, points,
                                         reference, select_cols(off, ocols), select_cols(w, wcols));
      sum = sum ? add(*sum, part) : part;
    }
    return out(bind, *sum);
  }

  Var<T> operator()(ParamBinder<T>& bind, Var<T> query, Var<T> reference, Var<T> value_input, Index height,
                    Index width) const {
    return (*this)(bind, query, reference, value_input, std::vector<FeatureLevel>{{height, width, 0}});
  }
};

}  // namespace dprob
