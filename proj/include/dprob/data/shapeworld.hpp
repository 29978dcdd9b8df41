// SPDX-License-Identifier: Apache-2.0
//
// Synthetic shape-world scenes: grayscale canvases with a few filled shapes,
// one archetype per class, annotated with tight normalized boxes.
#pragma once

#include "dprob/loss/box_ops.hpp"

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace dprob {

/// Raised for malformed or inconsistent dataset content on disk.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class ShapeKind { square, disc, triangle, cross, ring, bar };

std::string to_string(ShapeKind k);
ShapeKind shape_from_string(const std::string& s);

struct Annotation {
  int class_id = 0;
  Box box = Box::Zero();  ///< (cx, cy, w, h), normalized

  bool operator==(const Annotation&) const = default;
};

/// Throws std::invalid_argument naming `where` when the box leaves [0,1] or has no area.
void validate_annotation(const Annotation& a, int total_classes, const std::string& where);

struct Scene {
  std::string scene_id;
  Matrix<float> image;  ///< H x W, values k/255
  std::vector<Annotation> annotations;
  std::uint64_t seed = 0;
};

struct ClassStyle {
  int class_id = 0;
  ShapeKind shape = ShapeKind::square;
};

struct SceneSpec {
  int image_size = 64;
  std::vector<ClassStyle> classes;
  /// Side of the shape's bounding square, in pixels.
  int min_size = 10;
  int max_size = 22;
  int min_count = 1;
  int max_count = 4;
  /// Background pixels are uniform in [0, noise].
  double noise = 0.05;
  double min_intensity = 0.5;
  double max_iou = 0.3;
  int max_attempts = 200;

  void validate() const;
};

/// Six classes, one archetype each, in the order square, disc, triangle,
/// cross, ring, bar.
SceneSpec default_scene_spec();

/// Pixel mask of one shape inside a size x size square; `vertical` only
/// affects bars.
std::vector<std::uint8_t> shape_mask(ShapeKind kind, int size, bool vertical);

Scene generate_scene(const SceneSpec& spec, std::uint64_t seed);

/// Mixes a master seed with stream indices into one scene seed.
std::uint64_t derive_seed(std::uint64_t master, std::uint64_t a, std::uint64_t b, std::uint64_t c);

}  // namespace dprob
