// SPDX-License-Identifier: Apache-2.0
//
// Bounding-box annotations to patch-level supervision.

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "textprune/image.hpp"

namespace textprune {

// Axis-aligned box in pixels: columns [x0, x0 + w), rows [y0, y0 + h).
struct BoundingBox {
  std::int64_t x0 = 0;
  std::int64_t y0 = 0;
  std::int64_t w = 0;
  std::int64_t h = 0;
  std::string label;       // class name, or free text when is_region
  bool is_region = false;

  bool operator==(const BoundingBox&) const = default;
};

struct PatchLabels {
  std::vector<std::uint8_t> labels;  // row-major over the patch grid, values 0/1
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t patch = 0;

  std::size_t size() const { return labels.size(); }
  std::size_t popcount() const;
};

// Label 1 for every patch whose half-open pixel square has positive-area
// intersection with the box after clipping it to the image.
PatchLabels bbox_to_patch_labels(std::size_t image_w, std::size_t image_h, std::size_t patch, const BoundingBox& box);

// "This is a <label>." for class labels; region descriptions pass through.
std::string class_to_text(const std::string& label, bool is_region = false);
inline std::string box_to_text(const BoundingBox& box) { return class_to_text(box.label, box.is_region); }

// ---- annotated dataset directory: images/<id>.ppm + annotations.json --------

struct AnnotatedImage {
  std::string image_id;
  std::vector<BoundingBox> boxes;
};

std::vector<AnnotatedImage> parse_annotations(const std::string& json_text);
std::string serialize_annotations(const std::vector<AnnotatedImage>& records);

struct DatasetEntry {
  AnnotatedImage annotation;
  Image image;
};

std::vector<DatasetEntry> load_dataset(const std::filesystem::path& dir);
void save_dataset(const std::filesystem::path& dir, const std::vector<DatasetEntry>& entries);

}  // namespace textprune
