// SPDX-License-Identifier: Apache-2.0
//
// Deterministic synthetic shape scenes with exact boxes and templated
// captions. Scene i of a batch is generated from derive_seed(batch_seed, i),
// so batches can be produced in any order or in parallel.

#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "textprune/annotation.hpp"
#include "textprune/image.hpp"
#include "textprune/nn.hpp"

namespace textprune {

enum class ShapeKind { Rectangle, Circle, Triangle };

std::string shape_name(ShapeKind kind);

struct PaletteColor {
  std::string name;
  std::array<std::uint8_t, 3> rgb{};
};

struct SceneSpec {
  std::size_t canvas = 64;
  std::vector<PaletteColor> palette = default_palette();
  std::vector<ShapeKind> shapes = {ShapeKind::Rectangle, ShapeKind::Circle, ShapeKind::Triangle};
  std::size_t min_objects = 1;
  std::size_t max_objects = 3;
  std::size_t min_size = 12;
  std::size_t max_size = 28;
  // Largest allowed intersection area between two boxes, as a fraction of the
  // smaller box.
  double max_overlap = 0.0;
  // Background is a uniform gray drawn from [background_min, background_max].
  std::uint8_t background_min = 24;
  std::uint8_t background_max = 72;

  static std::vector<PaletteColor> default_palette();
  void validate() const;
};

struct Scene {
  Image image;
  std::vector<BoundingBox> objects;  // label "<color> <shape>"
  std::vector<ShapeKind> kinds;      // parallel to objects
  std::size_t captioned = 0;         // index into objects
  std::string caption;
  std::uint64_t seed = 0;
};

Scene generate_scene(std::uint64_t seed, const SceneSpec& spec);

struct PtaExample {
  Image image;
  PatchLabels labels;
  std::vector<std::int32_t> caption_ids;
  BoundingBox box;
};

struct PairExample {
  Image image;
  std::vector<std::int32_t> caption_ids;
  std::string caption;
  std::string caption_class;               // "<color> <shape>" of the captioned object
  std::vector<std::string> object_classes;  // every object in the image
};

std::vector<PtaExample> sample_pta_batch(std::uint64_t batch_seed, const SceneSpec& spec, std::size_t batch_size,
                                         std::size_t patch, const Vocabulary& vocab);

std::vector<PairExample> sample_pair_batch(std::uint64_t batch_seed, const SceneSpec& spec, std::size_t batch_size,
                                           const Vocabulary& vocab);

// Fixed derangement used to build mismatched pairs: i -> (i + 1) mod B.
std::vector<std::size_t> caption_derangement(std::size_t batch_size);

// Writes scenes [0, count) of the stream to the annotated dataset layout.
void export_scenes(const std::filesystem::path& dir, std::uint64_t seed, const SceneSpec& spec, std::size_t count);

}  // namespace textprune
