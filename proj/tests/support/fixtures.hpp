#pragma once

// Shared access to the frozen fixture dataset plus small seeded generators.

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "fmask/baselines.hpp"
#include "fmask/io.hpp"
#include "fmask/models.hpp"

#ifndef FMASK_FIXTURES
#error "FMASK_FIXTURES must point at tests/fixtures"
#endif

namespace fx {

namespace fs = std::filesystem;
using namespace fmask;

inline fs::path root() { return fs::path(FMASK_FIXTURES); }

inline const ToyModel& embedder() {
  static const ToyModel m = ToyModel::load(root() / "models" / "embedder.json");
  return m;
}

inline const ToyModel& detector() {
  static const ToyModel m = ToyModel::load(root() / "models" / "detector.json");
  return m;
}

struct Face {
  Image image;
  LandmarkSet landmarks;
};

/// `set` is probes, gallery or templates; `name` has no extension.
inline Face face(const std::string& set, const std::string& name) {
  const fs::path base = root() / set;
  return {io::read_png(base / (name + ".png")), io::read_landmarks(base / (name + ".landmarks.json"))};
}

inline std::string probe_name(int i) {
  return "id" + std::string(i < 10 ? "0" : "") + std::to_string(i) + "_1";
}

inline std::string template_name(int i) { return "dx0" + std::to_string(i) + "_1"; }

inline double uniform(std::mt19937_64& rng, double lo = 0.0, double hi = 1.0) {
  return lo + (hi - lo) * detail::uniform01(rng);
}

inline Image random_image(std::mt19937_64& rng, int h, int w, double lo = 0.0, double hi = 1.0) {
  Image img(h, w);
  for (double& v : img.values()) v = uniform(rng, lo, hi);
  return img;
}

/// Small random conv stack with the same layer structure as the fixtures.
inline ToyModelSpec random_toy_spec(std::mt19937_64& rng, ModelKind kind, int h, int w, double dense_scale = 1.0) {
  ToyModelSpec s;
  s.kind = kind;
  s.input_height = h;
  s.input_width = w;
  auto tensor = [&](std::vector<std::size_t> shape, double scale) {
    Tensor t;
    t.shape = std::move(shape);
    t.data.resize(t.element_count());
    for (double& v : t.data) v = scale * uniform(rng, -1.0, 1.0);
    return t;
  };
  const int c1 = 4, c2 = 5, out = kind == ModelKind::Embedder ? 6 : 2;
  s.weights["conv1.w"] = tensor({std::size_t(c1), 3, 3, 3}, 0.5);
  s.weights["conv1.b"] = tensor({std::size_t(c1)}, 0.1);
  s.weights["conv2.w"] = tensor({std::size_t(c2), std::size_t(c1), 3, 3}, 0.5);
  s.weights["conv2.b"] = tensor({std::size_t(c2)}, 0.1);
  s.weights["fc.w"] = tensor({std::size_t(out), std::size_t(c2)}, dense_scale);
  s.weights["fc.b"] = tensor({std::size_t(out)}, 0.1 * dense_scale);
  s.layers = {layers::Conv2d{"conv1.w", "conv1.b", 3, c1, 3, 2, 1},
              layers::LeakyRelu{0.1},
              layers::Conv2d{"conv2.w", "conv2.b", c1, c2, 3, 2, 1},
              layers::LeakyRelu{0.1},
              layers::GlobalAvgPool{},
              layers::Dense{"fc.w", "fc.b", c2, out}};
  if (kind == ModelKind::Embedder) s.layers.emplace_back(layers::L2Normalize{});
  return s;
}

/// Flat indices spread over the image, deterministic in `seed`.
inline std::vector<std::size_t> sample_coords(std::size_t total, std::size_t count, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < count; ++i) out.push_back(static_cast<std::size_t>(rng() % total));
  return out;
}

}  // namespace fx
