// SPDX-License-Identifier: Apache-2.0

#include "textprune/annotation.hpp"

#include <algorithm>
#include <fstream>
#include <iterator>

#include <json.hpp>

#include "textprune/autodiff.hpp"

namespace textprune {

std::size_t PatchLabels::popcount() const {
  return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), std::uint8_t{1}));
}

PatchLabels bbox_to_patch_labels(std::size_t image_w, std::size_t image_h, std::size_t patch, const BoundingBox& box) {
  if (patch == 0 || image_w == 0 || image_h == 0 || image_w % patch != 0 || image_h % patch != 0) {
    throw Error("image " + std::to_string(image_w) + "x" + std::to_string(image_h) +
                " is not divisible into patches of " + std::to_string(patch));
  }
  if (box.w <= 0 || box.h <= 0) throw Error("degenerate box");
  const auto W = static_cast<std::int64_t>(image_w);
  const auto H = static_cast<std::int64_t>(image_h);
  const std::int64_t x0 = std::max<std::int64_t>(box.x0, 0);
  const std::int64_t y0 = std::max<std::int64_t>(box.y0, 0);
  const std::int64_t x1 = std::min<std::int64_t>(box.x0 + box.w, W);
  const std::int64_t y1 = std::min<std::int64_t>(box.y0 + box.h, H);
  if (x1 <= x0 || y1 <= y0) throw Error("degenerate box");

  const auto P = static_cast<std::int64_t>(patch);
  PatchLabels out;
  out.patch = patch;
  out.cols = image_w / patch;
  out.rows = image_h / patch;
  out.labels.assign(out.rows * out.cols, 0);
  // Patch column c spans [cP, (c+1)P); it overlaps [x0, x1) iff cP < x1 and (c+1)P > x0.
  const std::int64_t c_first = x0 / P, c_last = (x1 - 1) / P;
  const std::int64_t r_first = y0 / P, r_last = (y1 - 1) / P;
  for (std::int64_t r = r_first; r <= r_last; ++r)
    for (std::int64_t c = c_first; c <= c_last; ++c)
      out.labels[static_cast<std::size_t>(r) * out.cols + static_cast<std::size_t>(c)] = 1;
  return out;
}

std::string class_to_text(const std::string& label, bool is_region) {
  if (label.empty()) throw Error("empty class label");
  if (is_region) return label;
  return "This is a " + label + ".";
}

// ---- dataset I/O -------------------------------------------------------------

using nlohmann::json;

std::vector<AnnotatedImage> parse_annotations(const std::string& json_text) {
  json doc;
  try {
    doc = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw Error(std::string("annotations.json: ") + e.what());
  }
  if (!doc.is_array()) throw Error("annotations.json: expected a list of records");
  std::vector<AnnotatedImage> records;
  try {
    for (const auto& rec : doc) {
      AnnotatedImage ai;
      ai.image_id = rec.at("image_id").get<std::string>();
      for (const auto& b : rec.at("boxes")) {
        BoundingBox box;
        box.x0 = b.at("x0").get<std::int64_t>();
        box.y0 = b.at("y0").get<std::int64_t>();
        box.w = b.at("w").get<std::int64_t>();
        box.h = b.at("h").get<std::int64_t>();
        box.label = b.at("label").get<std::string>();
        box.is_region = b.value("is_region", false);
        ai.boxes.push_back(std::move(box));
      }
      records.push_back(std::move(ai));
    }
  } catch (const json::exception& e) {
    throw Error(std::string("annotations.json: ") + e.what());
  }
  return records;
}

std::string serialize_annotations(const std::vector<AnnotatedImage>& records) {
  json doc = json::array();
  for (const auto& rec : records) {
    json boxes = json::array();
    for (const auto& b : rec.boxes) {
      boxes.push_back({{"x0", b.x0}, {"y0", b.y0}, {"w", b.w}, {"h", b.h}, {"label", b.label}, {"is_region", b.is_region}});
    }
    doc.push_back({{"image_id", rec.image_id}, {"boxes", std::move(boxes)}});
  }
  return doc.dump(2) + "\n";
}

std::vector<DatasetEntry> load_dataset(const std::filesystem::path& dir) {
  std::ifstream in(dir / "annotations.json");
  if (!in) throw Error("cannot open " + (dir / "annotations.json").string());
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  std::vector<DatasetEntry> entries;
  for (auto& rec : parse_annotations(text)) {
    Image img = read_ppm(dir / "images" / (rec.image_id + ".ppm"));
    entries.push_back(DatasetEntry{std::move(rec), std::move(img)});
  }
  return entries;
}

void save_dataset(const std::filesystem::path& dir, const std::vector<DatasetEntry>& entries) {
  std::filesystem::create_directories(dir / "images");
  std::vector<AnnotatedImage> records;
  records.reserve(entries.size());
  for (const auto& e : entries) {
    write_ppm(dir / "images" / (e.annotation.image_id + ".ppm"), e.image);
    records.push_back(e.annotation);
  }
  std::ofstream out(dir / "annotations.json");
  if (!out) throw Error("cannot write " + (dir / "annotations.json").string());
  out << serialize_annotations(records);
}

}  // namespace textprune
