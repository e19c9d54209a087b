// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <filesystem>

#include "support.hpp"
#include "textprune/image.hpp"

using namespace textprune;

namespace {

std::vector<std::size_t> ones(const PatchLabels& l) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < l.size(); ++i)
    if (l.labels[i]) out.push_back(i);
  return out;
}

}  // namespace

TEST_CASE("box to patch labels: documented cases") {
  CHECK(bbox_to_patch_labels(64, 64, 16, {0, 0, 64, 64, "x"}).popcount() == 16);
  CHECK(ones(bbox_to_patch_labels(64, 64, 16, {0, 0, 16, 16, "x"})) == std::vector<std::size_t>{0});
  CHECK(ones(bbox_to_patch_labels(64, 64, 16, {8, 8, 16, 16, "x"})) == std::vector<std::size_t>{0, 1, 4, 5});
}

TEST_CASE("box to patch labels: clipping and errors") {
  auto l = bbox_to_patch_labels(64, 64, 16, {-10, 50, 30, 40, "x"});
  CHECK(l.labels == textprune::testing::brute_force_labels(64, 64, 16, {-10, 50, 30, 40, "x"}));
  CHECK_THROWS_WITH_AS(bbox_to_patch_labels(64, 64, 16, {70, 0, 5, 5, "x"}), "degenerate box", Error);
  CHECK_THROWS_WITH_AS(bbox_to_patch_labels(64, 64, 16, {3, 3, 0, 5, "x"}), "degenerate box", Error);
  CHECK_THROWS_AS(bbox_to_patch_labels(60, 64, 16, {0, 0, 5, 5, "x"}), Error);
}

TEST_CASE("box labels: monotone, translation and popcount bounds") {
  std::mt19937_64 gen(77);
  std::uniform_int_distribution<int> pos(0, 40), ext(1, 24);
  for (int t = 0; t < 200; ++t) {
    const BoundingBox b{pos(gen), pos(gen), ext(gen), ext(gen), "x"};
    const auto base = bbox_to_patch_labels(64, 64, 8, b);
    BoundingBox grown = b;
    grown.w += 3;
    grown.h += 2;
    const auto g = bbox_to_patch_labels(64, 64, 8, grown);
    for (std::size_t i = 0; i < base.size(); ++i)
      if (base.labels[i]) CHECK(g.labels[i] == 1);

    if (b.x0 + 8 + b.w <= 64) {
      BoundingBox shifted = b;
      shifted.x0 += 8;
      const auto s = bbox_to_patch_labels(64, 64, 8, shifted);
      for (std::size_t r = 0; r < 8; ++r)
        for (std::size_t c = 0; c + 1 < 8; ++c) CHECK(s.labels[r * 8 + c + 1] == base.labels[r * 8 + c]);
    }
    const auto pc = base.popcount();
    // Any-overlap labels: at least ceil(w/P) columns, at most one more when the box straddles a boundary.
    const auto cw = static_cast<std::size_t>((b.w + 7) / 8), ch = static_cast<std::size_t>((b.h + 7) / 8);
    const auto low = cw * ch, up = (cw + 1) * (ch + 1);
    CHECK(pc <= up);
    CHECK(pc >= low);
  }
}

TEST_CASE("class labels to captions") {
  CHECK(class_to_text("red circle") == "This is a red circle.");
  CHECK(class_to_text("dog") == "This is a dog.");
  CHECK(class_to_text("the large blue triangle", true) == "the large blue triangle");
  CHECK_THROWS_AS(class_to_text(""), Error);
}

TEST_CASE("annotation JSON round trip") {
  std::vector<AnnotatedImage> recs{{"img_1", {{1, 2, 3, 4, "red circle", false}, {0, 0, 5, 5, "a region", true}}},
                                   {"img_2", {}}};
  const auto text = serialize_annotations(recs);
  const auto back = parse_annotations(text);
  REQUIRE(back.size() == 2);
  CHECK(back[0].image_id == "img_1");
  CHECK(back[0].boxes == recs[0].boxes);
  CHECK(back[1].boxes.empty());
  CHECK_THROWS_AS(parse_annotations("{\"not\": \"a list\"}"), Error);
  CHECK_THROWS_AS(parse_annotations("[{\"image_id\": \"a\", \"boxes\": [{\"x0\": 1}]}]"), Error);
}

TEST_CASE("PPM encode/decode and dataset directory round trip") {
  Image img(5, 3, 3);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = static_cast<std::uint8_t>(i * 7);
  const auto bytes = encode_ppm(img);
  CHECK(bytes.rfind("P6\n5 3\n255\n", 0) == 0);
  CHECK(decode_ppm(bytes) == img);
  CHECK_THROWS_AS(decode_ppm("P5\n1 1\n255\n\x01"), Error);
  CHECK_THROWS_AS(decode_ppm(bytes.substr(0, bytes.size() - 1)), Error);

  const auto dir = std::filesystem::temp_directory_path() / "textprune_dataset_test";
  std::filesystem::remove_all(dir);
  std::vector<DatasetEntry> entries{{{"a", {{0, 0, 2, 2, "blue square", false}}}, img}};
  save_dataset(dir, entries);
  const auto loaded = load_dataset(dir);
  REQUIRE(loaded.size() == 1);
  CHECK(loaded[0].image == img);
  CHECK(loaded[0].annotation.boxes == entries[0].annotation.boxes);
  std::filesystem::remove_all(dir);
}
