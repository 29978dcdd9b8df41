// SPDX-License-Identifier: Apache-2.0
#include "dprob/data/shapeworld.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace dprob {

std::string to_string(ShapeKind k) {
  switch (k) {
    case ShapeKind::square: return "square";
    case ShapeKind::disc: return "disc";
    case ShapeKind::triangle: return "triangle";
    case ShapeKind::cross: return "cross";
    case ShapeKind::ring: return "ring";
    case ShapeKind::bar: return "bar";
  }
  return "square";
}

ShapeKind shape_from_string(const std::string& s) {
  for (ShapeKind k : {ShapeKind::square, ShapeKind::disc, ShapeKind::triangle, ShapeKind::cross, ShapeKind::ring,
                      ShapeKind::bar})
    if (to_string(k) == s) return k;
  throw std::invalid_argument("unknown shape '" + s + "'");
}

void validate_annotation(const Annotation& a, int total_classes, const std::string& where) {
  const Box& b = a.box;
  if (a.class_id < 0 || a.class_id >= total_classes)
    throw std::invalid_argument(where + ": class " + std::to_string(a.class_id) + " out of range");
  if (!b.allFinite() || !(b(2) > 0) || !(b(3) > 0)) throw std::invalid_argument(where + ": box must have w > 0 and h > 0");
  const double eps = 1e-9;
  if (b(0) - b(2) / 2 < -eps || b(0) + b(2) / 2 > 1 + eps || b(1) - b(3) / 2 < -eps || b(1) + b(3) / 2 > 1 + eps)
    throw std::invalid_argument(where + ": box leaves the image");
}

void SceneSpec::validate() const {
  if (image_size <= 0) throw std::invalid_argument("scene.image_size must be positive");
  if (classes.empty()) throw std::invalid_argument("scene.classes must not be empty");
  if (min_size < 3 || min_size > max_size) throw std::invalid_argument("scene size range must satisfy 3 <= min <= max");
  if (max_size > image_size) throw std::invalid_argument("scene size range cannot fit in the image");
  if (min_count < 0 || min_count > max_count) throw std::invalid_argument("scene count range must satisfy 0 <= min <= max");
  if (noise < 0 || noise >= min_intensity || min_intensity > 1) throw std::invalid_argument("scene.noise must lie below min_intensity <= 1");
  if (max_iou < 0 || max_iou > 1) throw std::invalid_argument("scene.max_iou must lie in [0, 1]");
  if (max_attempts <= 0) throw std::invalid_argument("scene.max_attempts must be positive");
}

SceneSpec default_scene_spec() {
  SceneSpec s;
  const ShapeKind kinds[] = {ShapeKind::square, ShapeKind::disc, ShapeKind::triangle,
                             ShapeKind::cross, ShapeKind::ring, ShapeKind::bar};
  for (int c = 0; c < 6; ++c) s.classes.push_back({c, kinds[c]});
  return s;
}

std::vector<std::uint8_t> shape_mask(ShapeKind kind, int size, bool vertical) {
  std::vector<std::uint8_t> m(static_cast<std::size_t>(size * size), 0);
  const double r = size / 2.0;
  const double thick = std::max(2.0, std::round(size / 3.0));
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const double px = x + 0.5 - r, py = y + 0.5 - r;
      const double d2 = px * px + py * py;
      bool on = false;
      switch (kind) {
        case ShapeKind::square: on = true; break;
        case ShapeKind::disc: on = d2 <= r * r; break;
        case ShapeKind::ring: on = d2 <= r * r && d2 >= (r * 0.55) * (r * 0.55); break;
        case ShapeKind::triangle: {
          const double t = (y + 1.0) / size;  // apex at the top row
          on = std::abs(px) <= t * r;
          break;
        }
        case ShapeKind::cross: on = std::abs(px) <= thick / 2 || std::abs(py) <= thick / 2; break;
        case ShapeKind::bar: {
          const double half = std::max(1.0, std::round(size / 4.0)) / 2.0;
          on = vertical ? std::abs(px) <= half : std::abs(py) <= half;
          break;
        }
      }
      m[static_cast<std::size_t>(y * size + x)] = on ? 1 : 0;
    }
  return m;
}

std::uint64_t derive_seed(std::uint64_t master, std::uint64_t a, std::uint64_t b, std::uint64_t c) {
  auto mix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  return mix(mix(mix(mix(master) ^ a) ^ b) ^ c);
}

namespace {

double uniform(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

int uniform_int(std::mt19937_64& rng, int lo, int hi) {
  return lo + static_cast<int>(rng() % static_cast<std::uint64_t>(hi - lo + 1));
}

float quantize(double v) {
  const long k = std::lround(std::clamp(v, 0.0, 1.0) * 255.0);
  return static_cast<float>(k) / 255.0f;
}

}  // namespace

Scene generate_scene(const SceneSpec& spec, std::uint64_t seed) {
  spec.validate();
  std::mt19937_64 rng(seed);
  const int n = spec.image_size;
  Matrix<double> canvas(n, n);
  for (Index y = 0; y < n; ++y)
    for (Index x = 0; x < n; ++x) canvas(y, x) = uniform(rng) * spec.noise;

  Scene scene;
  scene.seed = seed;
  const int count = uniform_int(rng, spec.min_count, spec.max_count);
  std::vector<Box> placed;
  for (int k = 0; k < count; ++k) {
    const ClassStyle& style = spec.classes[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(spec.classes.size()) - 1))];
    const double intensity = spec.min_intensity + uniform(rng) * (1.0 - spec.min_intensity);
    bool done = false;
    for (int attempt = 0; attempt < spec.max_attempts && !done; ++attempt) {
      const int size = uniform_int(rng, spec.min_size, spec.max_size);
      const bool vertical = (rng() & 1) != 0;
      const int x0 = uniform_int(rng, 0, n - size);
      const int y0 = uniform_int(rng, 0, n - size);
      const auto mask = shape_mask(style.shape, size, vertical);
      int lx = n, ly = n, hx = -1, hy = -1;
      for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x)
          if (mask[static_cast<std::size_t>(y * size + x)]) {
            lx = std::min(lx, x0 + x);
            hx = std::max(hx, x0 + x);
            ly = std::min(ly, y0 + y);
            hy = std::max(hy, y0 + y);
          }
      const Box box((lx + hx + 1) / (2.0 * n), (ly + hy + 1) / (2.0 * n), (hx - lx + 1) / static_cast<double>(n),
                    (hy - ly + 1) / static_cast<double>(n));
      bool ok = true;
      for (const Box& other : placed) ok = ok && box_iou(box, other) <= spec.max_iou;
      if (!ok) continue;
      for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x)
          if (mask[static_cast<std::size_t>(y * size + x)]) canvas(y0 + y, x0 + x) = intensity;
      placed.push_back(box);
      scene.annotations.push_back({style.class_id, box});
      done = true;
    }
    if (!done)
      throw std::runtime_error("generate_scene: could not place object " + std::to_string(k) + " after " +
                               std::to_string(spec.max_attempts) + " attempts (seed " + std::to_string(seed) + ")");
  }
  scene.image.resize(n, n);
  for (Index y = 0; y < n; ++y)
    for (Index x = 0; x < n; ++x) scene.image(y, x) = quantize(canvas(y, x));
  return scene;
}

}  // namespace dprob
