// SPDX-License-Identifier: Apache-2.0

#include "textprune/synth.hpp"

#include <algorithm>
#include <cstdio>

#include "textprune/rng.hpp"

namespace textprune {

std::string shape_name(ShapeKind kind) {
  switch (kind) {
    case ShapeKind::Rectangle: return "rectangle";
    case ShapeKind::Circle: return "circle";
    case ShapeKind::Triangle: return "triangle";
  }
  return "unknown";
}

std::vector<PaletteColor> SceneSpec::default_palette() {
  return {
      {"red", {220, 40, 40}},     {"green", {40, 180, 60}},   {"blue", {40, 90, 230}},
      {"yellow", {235, 215, 40}}, {"purple", {150, 60, 200}}, {"orange", {245, 140, 20}},
  };
}

void SceneSpec::validate() const {
  if (canvas == 0) throw Error("scene spec: canvas must be positive");
  if (palette.empty() || shapes.empty()) throw Error("scene spec: palette and shape list must be non-empty");
  if (min_objects > max_objects) throw Error("scene spec: min_objects exceeds max_objects");
  if (max_objects > palette.size() * shapes.size()) throw Error("scene spec: more objects than distinct classes");
  if (min_size == 0 || min_size > max_size) throw Error("scene spec: invalid object size range");
  if (max_size > canvas) throw Error("scene spec: objects larger than the canvas");
  if (max_overlap < 0.0 || max_overlap > 1.0) throw Error("scene spec: max_overlap must lie in [0, 1]");
  if (background_min > background_max) throw Error("scene spec: invalid background range");
}

namespace {

struct Placement {
  std::int64_t x0, y0, w, h;
};

bool overlap_ok(const Placement& a, const Placement& b, double max_overlap) {
  const std::int64_t ix = std::min(a.x0 + a.w, b.x0 + b.w) - std::max(a.x0, b.x0);
  const std::int64_t iy = std::min(a.y0 + a.h, b.y0 + b.h) - std::max(a.y0, b.y0);
  if (ix <= 0 || iy <= 0) return true;
  const double inter = static_cast<double>(ix * iy);
  const double smaller = static_cast<double>(std::min(a.w * a.h, b.w * b.h));
  return inter <= max_overlap * smaller;
}

// Pixel-center inside tests in integer arithmetic.
bool covers(ShapeKind kind, const Placement& p, std::int64_t x, std::int64_t y) {
  const std::int64_t dx = x - p.x0, dy = y - p.y0;
  switch (kind) {
    case ShapeKind::Rectangle: return true;
    case ShapeKind::Circle: {
      const std::int64_t cx = 2 * dx + 1 - p.w, cy = 2 * dy + 1 - p.h;
      return cx * cx + cy * cy <= p.w * p.w;
    }
    case ShapeKind::Triangle: {
      // Apex at top center, base along the bottom edge.
      const std::int64_t off = 2 * dx + 1 - p.w;
      return std::abs(off) * 2 * p.h <= p.w * (2 * dy + 1);
    }
  }
  return false;
}

constexpr int kLayoutAttempts = 32;
constexpr int kPositionAttempts = 200;

}  // namespace

Scene generate_scene(std::uint64_t seed, const SceneSpec& spec) {
  spec.validate();
  Rng rng(seed);
  const auto count = static_cast<std::size_t>(
      rng.uniform_int(static_cast<std::int64_t>(spec.min_objects), static_cast<std::int64_t>(spec.max_objects)));

  // Distinct (color, shape) classes so a caption names exactly one object.
  const std::size_t n_classes = spec.palette.size() * spec.shapes.size();
  std::vector<std::size_t> classes(n_classes);
  for (std::size_t i = 0; i < n_classes; ++i) classes[i] = i;
  for (std::size_t i = 0; i < count; ++i) {
    const auto j = static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(i), static_cast<std::int64_t>(n_classes - 1)));
    std::swap(classes[i], classes[j]);
  }

  const auto canvas = static_cast<std::int64_t>(spec.canvas);
  const auto lo = static_cast<std::int64_t>(spec.min_size), hi = static_cast<std::int64_t>(spec.max_size);
  std::vector<Placement> placed;
  bool done = false;
  for (int layout = 0; layout < kLayoutAttempts && !done; ++layout) {
    placed.clear();
    done = true;
    for (std::size_t i = 0; i < count && done; ++i) {
      const ShapeKind kind = spec.shapes[classes[i] % spec.shapes.size()];
      Placement p{};
      p.w = rng.uniform_int(lo, hi);
      p.h = kind == ShapeKind::Rectangle ? rng.uniform_int(lo, hi) : p.w;
      bool ok = false;
      for (int attempt = 0; attempt < kPositionAttempts && !ok; ++attempt) {
        p.x0 = rng.uniform_int(0, canvas - p.w);
        p.y0 = rng.uniform_int(0, canvas - p.h);
        ok = std::all_of(placed.begin(), placed.end(), [&](const Placement& q) { return overlap_ok(p, q, spec.max_overlap); });
      }
      if (ok) {
        placed.push_back(p);
      } else {
        done = false;
      }
    }
  }
  if (!done) throw Error("cannot place " + std::to_string(count) + " objects within the overlap budget");

  Scene scene;
  scene.seed = seed;
  scene.image = Image(spec.canvas, spec.canvas, 3);
  const auto bg = static_cast<std::uint8_t>(rng.uniform_int(spec.background_min, spec.background_max));
  std::fill(scene.image.pixels.begin(), scene.image.pixels.end(), bg);
  for (std::size_t i = 0; i < count; ++i) {
    const auto& color = spec.palette[classes[i] / spec.shapes.size()];
    const ShapeKind kind = spec.shapes[classes[i] % spec.shapes.size()];
    const auto& p = placed[i];
    for (std::int64_t y = p.y0; y < p.y0 + p.h; ++y)
      for (std::int64_t x = p.x0; x < p.x0 + p.w; ++x) {
        if (!covers(kind, p, x, y)) continue;
        for (std::size_t c = 0; c < 3; ++c)
          scene.image.at(static_cast<std::size_t>(x), static_cast<std::size_t>(y), c) = color.rgb[c];
      }
    scene.objects.push_back(BoundingBox{p.x0, p.y0, p.w, p.h, color.name + " " + shape_name(kind), false});
    scene.kinds.push_back(kind);
  }
  if (scene.objects.empty()) throw Error("scene has no object to caption");
  scene.captioned = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(count) - 1));
  scene.caption = box_to_text(scene.objects[scene.captioned]);
  return scene;
}

std::vector<PtaExample> sample_pta_batch(std::uint64_t batch_seed, const SceneSpec& spec, std::size_t batch_size,
                                         std::size_t patch, const Vocabulary& vocab) {
  if (batch_size == 0) throw Error("object batch size must be at least 1");
  std::vector<PtaExample> batch;
  batch.reserve(batch_size);
  for (std::size_t i = 0; i < batch_size; ++i) {
    Scene scene = generate_scene(derive_seed(batch_seed, i), spec);
    const BoundingBox& box = scene.objects[scene.captioned];
    PtaExample ex;
    ex.labels = bbox_to_patch_labels(scene.image.width, scene.image.height, patch, box);
    ex.caption_ids = vocab.encode(box_to_text(box));
    ex.box = box;
    ex.image = std::move(scene.image);
    batch.push_back(std::move(ex));
  }
  return batch;
}

std::vector<PairExample> sample_pair_batch(std::uint64_t batch_seed, const SceneSpec& spec, std::size_t batch_size,
                                           const Vocabulary& vocab) {
  if (batch_size == 0) throw Error("pair batch size must be at least 1");
  std::vector<PairExample> batch;
  batch.reserve(batch_size);
  for (std::size_t i = 0; i < batch_size; ++i) {
    Scene scene = generate_scene(derive_seed(batch_seed, i), spec);
    PairExample ex;
    ex.caption_ids = vocab.encode(scene.caption);
    ex.caption = std::move(scene.caption);
    ex.caption_class = scene.objects[scene.captioned].label;
    for (const auto& box : scene.objects) ex.object_classes.push_back(box.label);
    ex.image = std::move(scene.image);
    batch.push_back(std::move(ex));
  }
  return batch;
}

std::vector<std::size_t> caption_derangement(std::size_t batch_size) {
  std::vector<std::size_t> perm(batch_size);
  for (std::size_t i = 0; i < batch_size; ++i) perm[i] = (i + 1) % batch_size;
  return perm;
}

void export_scenes(const std::filesystem::path& dir, std::uint64_t seed, const SceneSpec& spec, std::size_t count) {
  std::vector<DatasetEntry> entries;
  entries.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    Scene scene = generate_scene(derive_seed(seed, i), spec);
    char id[32];
    std::snprintf(id, sizeof id, "scene_%06zu", i);
    entries.push_back(DatasetEntry{AnnotatedImage{id, scene.objects}, std::move(scene.image)});
  }
  save_dataset(dir, entries);
}

}  // namespace textprune
