// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <filesystem>
#include <set>

#include "support.hpp"
#include "textprune/synth.hpp"

using namespace textprune;

TEST_CASE("scenes are reproducible from their seed") {
  const SceneSpec spec;
  for (std::uint64_t seed : {0ull, 1ull, 99ull, 123456789ull}) {
    const auto a = generate_scene(seed, spec);
    const auto b = generate_scene(seed, spec);
    CHECK(a.image == b.image);
    CHECK(a.objects == b.objects);
    CHECK(a.caption == b.caption);
  }
  CHECK_FALSE(generate_scene(1, spec).image == generate_scene(2, spec).image);
}

TEST_CASE("a 16 pixel object covers 1, 2 or 4 patches") {
  SceneSpec spec;
  spec.min_objects = spec.max_objects = 1;
  spec.min_size = spec.max_size = 16;
  std::set<std::size_t> seen;
  for (std::uint64_t seed = 0; seed < 400; ++seed) {
    const auto sc = generate_scene(seed, spec);
    const auto pc = bbox_to_patch_labels(64, 64, 16, sc.objects[0]).popcount();
    CHECK((pc == 1 || pc == 2 || pc == 4));
    seen.insert(pc);
  }
  CHECK(seen.count(4) == 1);
}

TEST_CASE("an empty scene cannot be captioned") {
  SceneSpec spec;
  spec.min_objects = spec.max_objects = 0;
  CHECK_THROWS_WITH_AS(generate_scene(5, spec), "scene has no object to caption", Error);
}

TEST_CASE("impossible layouts fail after bounded retries") {
  SceneSpec spec;
  spec.min_objects = spec.max_objects = 3;
  spec.min_size = spec.max_size = 40;
  CHECK_THROWS_AS(generate_scene(1, spec), Error);
}

TEST_CASE("rendered pixels stay inside their boxes and boxes are sound") {
  const SceneSpec spec;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto sc = generate_scene(seed, spec);
    std::set<std::string> classes;
    for (const auto& o : sc.objects) {
      CHECK(classes.insert(o.label).second);
      CHECK(o.x0 >= 0);
      CHECK(o.y0 >= 0);
      CHECK(o.x0 + o.w <= 64);
      CHECK(o.y0 + o.h <= 64);
    }
    for (std::size_t i = 0; i < sc.objects.size(); ++i)
      for (std::size_t j = i + 1; j < sc.objects.size(); ++j) {
        const auto& a = sc.objects[i];
        const auto& b = sc.objects[j];
        const bool disjoint = a.x0 + a.w <= b.x0 || b.x0 + b.w <= a.x0 || a.y0 + a.h <= b.y0 || b.y0 + b.h <= a.y0;
        CHECK(disjoint);
      }
    std::vector<std::vector<std::uint8_t>> painted(sc.objects.size(), std::vector<std::uint8_t>(16, 0));
    for (std::size_t y = 0; y < 64; ++y)
      for (std::size_t x = 0; x < 64; ++x) {
        const bool gray = sc.image.at(x, y, 0) == sc.image.at(x, y, 1) && sc.image.at(x, y, 1) == sc.image.at(x, y, 2);
        if (gray) continue;
        bool inside = false;
        for (std::size_t o = 0; o < sc.objects.size(); ++o) {
          const auto& b = sc.objects[o];
          const auto xi = static_cast<std::int64_t>(x), yi = static_cast<std::int64_t>(y);
          if (xi >= b.x0 && xi < b.x0 + b.w && yi >= b.y0 && yi < b.y0 + b.h) {
            inside = true;
            painted[o][(y / 16) * 4 + x / 16] = 1;
          }
        }
        CHECK(inside);
      }
    for (std::size_t o = 0; o < sc.objects.size(); ++o) {
      const auto labels = bbox_to_patch_labels(64, 64, 16, sc.objects[o]).labels;
      for (std::size_t p = 0; p < 16; ++p)
        if (painted[o][p]) CHECK(labels[p] == 1);
    }
  }
}

TEST_CASE("captions name the chosen object once") {
  const SceneSpec spec;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto sc = generate_scene(seed, spec);
    const auto& obj = sc.objects.at(sc.captioned);
    CHECK(sc.caption == "This is a " + obj.label + ".");
    const auto space = obj.label.find(' ');
    const auto color = obj.label.substr(0, space), shape = obj.label.substr(space + 1);
    auto count = [&](const std::string& w) {
      std::size_t n = 0;
      for (auto pos = sc.caption.find(w); pos != std::string::npos; pos = sc.caption.find(w, pos + 1)) ++n;
      return n;
    };
    CHECK(count(color) == 1);
    CHECK(count(shape) == 1);
  }
}

TEST_CASE("object and pair batches") {
  const SceneSpec spec;
  const Vocabulary vocab;
  const auto pta = sample_pta_batch(17, spec, 4, 16, vocab);
  REQUIRE(pta.size() == 4);
  for (const auto& ex : pta) {
    CHECK(ex.labels.popcount() >= 1);
    CHECK(ex.labels.labels == textprune::testing::brute_force_labels(64, 64, 16, ex.box));
    CHECK(ex.caption_ids == vocab.encode(class_to_text(ex.box.label)));
  }
  const auto again = sample_pta_batch(17, spec, 4, 16, vocab);
  for (std::size_t i = 0; i < 4; ++i) CHECK(again[i].image == pta[i].image);

  const auto pairs = sample_pair_batch(23, spec, 8, vocab);
  REQUIRE(pairs.size() == 8);
  for (const auto& ex : pairs) {
    for (auto id : ex.caption_ids) CHECK(id != Vocabulary::kUnk);
    CHECK(ex.caption == class_to_text(ex.caption_class));
    CHECK(std::count(ex.object_classes.begin(), ex.object_classes.end(), ex.caption_class) == 1);
  }
  const auto pairs2 = sample_pair_batch(23, spec, 8, vocab);
  for (std::size_t i = 0; i < 8; ++i) CHECK(pairs2[i].caption == pairs[i].caption);
  CHECK_THROWS_AS(sample_pair_batch(1, spec, 0, vocab), Error);
}

TEST_CASE("caption derangement has no fixed points") {
  for (std::size_t b = 2; b < 10; ++b) {
    const auto perm = caption_derangement(b);
    std::set<std::size_t> uniq(perm.begin(), perm.end());
    CHECK(uniq.size() == b);
    for (std::size_t i = 0; i < b; ++i) CHECK(perm[i] != i);
  }
}

TEST_CASE("exported scenes load back through the dataset reader") {
  const auto dir = std::filesystem::temp_directory_path() / "textprune_export_test";
  std::filesystem::remove_all(dir);
  export_scenes(dir, 3, SceneSpec{}, 4);
  const auto loaded = load_dataset(dir);
  REQUIRE(loaded.size() == 4);
  CHECK(loaded[0].annotation.image_id == "scene_000000");
  CHECK(std::filesystem::exists(dir / "images" / "scene_000003.ppm"));
  std::filesystem::remove_all(dir);
}
