// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "../tools/cli.hpp"
#include "support.hpp"
#include "textprune/annotation.hpp"
#include "textprune/checkpoint.hpp"
#include "textprune/visualize.hpp"
#include "toy_config.hpp"

using namespace textprune;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result invoke(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / ("textprune_cli_" + name)) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

std::string write_toy_config(const fs::path& dir, std::size_t steps) {
  const auto path = dir / "toy.json";
  std::ofstream(path) << to_json(textprune::testing::toy_run(steps)).dump(2);
  return path.string();
}

}  // namespace

TEST_CASE("flops prints the reference numbers") {
  auto r = invoke({"flops"});
  CHECK(r.code == 0);
  CHECK(r.out.find("ratio=0.748683") != std::string::npos);
  CHECK(r.out.find("layer_macs=" + std::to_string(6ULL * 1453954560ULL + 6ULL * 723148800ULL)) != std::string::npos);
  r = invoke({"flops", "--ratio", "1"});
  CHECK(r.code == 0);
  CHECK(r.out.find("ratio=1.000000") != std::string::npos);
  r = invoke({"flops", "--sweep"});
  CHECK(r.code == 0);
  CHECK(std::count(r.out.begin(), r.out.end(), '\n') == 13);
  CHECK(invoke({"flops", "--ratio", "1.5"}).code == cli::kExitUsage);
  CHECK(invoke({"flops", "--location", "12"}).code == cli::kExitUsage);
}

TEST_CASE("usage errors") {
  CHECK(invoke({}).code == cli::kExitUsage);
  CHECK(invoke({"frobnicate"}).code == cli::kExitUsage);
  CHECK(invoke({"train"}).code == cli::kExitUsage);
  TempDir dir("usage");
  auto r = invoke({"train", "--config", (dir.path / "missing.json").string(), "--out", (dir.path / "o").string()});
  CHECK(r.code == cli::kExitUsage);
  CHECK(!r.err.empty());
  std::ofstream(dir.path / "bad.json") << R"({"train": {"stepz": 3}})";
  r = invoke({"train", "--config", (dir.path / "bad.json").string(), "--out", (dir.path / "o").string()});
  CHECK(r.code == cli::kExitUsage);
  CHECK(r.err.find("stepz") != std::string::npos);
}

TEST_CASE("eval and visualize reject bad inputs") {
  TempDir dir("bad");
  std::ofstream(dir.path / "junk.copa") << "not a checkpoint";
  const auto junk = (dir.path / "junk.copa").string();
  CHECK(invoke({"eval-detector", "--ckpt", junk}).code == cli::kExitRuntime);
  CHECK(invoke({"eval-detector", "--ckpt", (dir.path / "nope.copa").string()}).code == cli::kExitRuntime);
  auto state = init_train_state(textprune::testing::toy_run(4).model, textprune::testing::toy_run(4).train,
                                textprune::testing::toy_run(4).data);
  save_checkpoint(state, dir.path / "init.copa");
  const auto ckpt = (dir.path / "init.copa").string();
  CHECK(invoke({"eval-detector", "--ckpt", ckpt, "--n-scenes", "0"}).code == cli::kExitUsage);
  CHECK(invoke({"eval-detector", "--ckpt", ckpt, "--alpha", "0"}).code == cli::kExitUsage);
  auto r = invoke({"eval-detector", "--ckpt", ckpt, "--n-scenes", "20"});
  CHECK(r.code == 0);
  CHECK(r.out.find("accuracy=") != std::string::npos);
  CHECK(r.out.find("recall=") != std::string::npos);
  CHECK(invoke({"visualize", "--ckpt", ckpt, "--scene-seed", "1", "--text", "red circle", "--alpha",
                "2", "--out", (dir.path / "v.ppm").string()})
            .code == cli::kExitUsage);
}

TEST_CASE("train writes a reproducible run and visualize renders it") {
  TempDir dir("train");
  const auto config = write_toy_config(dir.path, 50);
  const auto a = dir.path / "a", b = dir.path / "b";
  auto r = invoke({"train", "--config", config, "--out", a.string(), "--quiet"});
  REQUIRE(r.code == 0);
  REQUIRE(invoke({"train", "--config", config, "--out", b.string(), "--quiet"}).code == 0);

  std::size_t ckpts = 0;
  for (const auto& e : fs::directory_iterator(a)) ckpts += e.path().extension() == ".copa";
  CHECK(ckpts == 1);
  CHECK(fs::exists(a / "ckpt_50.copa"));
  CHECK(fs::exists(a / "config.json"));
  const auto csv = slurp(a / "train.csv");
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 51);
  CHECK(csv == slurp(b / "train.csv"));
  CHECK(slurp(a / "ckpt_50.copa") == slurp(b / "ckpt_50.copa"));

  // Resume from a partial run lands on the same checkpoint.
  const auto c = dir.path / "c";
  REQUIRE(invoke({"train", "--config", config, "--out", c.string(), "--until", "20", "--quiet"}).code == 0);
  REQUIRE(fs::exists(c / "ckpt_20.copa"));
  REQUIRE(invoke({"train", "--out", c.string(), "--resume", (c / "ckpt_20.copa").string(), "--quiet"}).code == 0);
  CHECK(slurp(c / "ckpt_50.copa") == slurp(a / "ckpt_50.copa"));
  CHECK(slurp(c / "train.csv") == csv);

  const auto ckpt = (a / "ckpt_50.copa").string();
  const auto state = load_checkpoint(ckpt);
  SceneSpec spec = state.data;
  const auto scene = generate_scene(11, spec);
  const auto out = dir.path / "v.ppm";
  r = invoke({"visualize", "--ckpt", ckpt, "--scene-seed", "11", "--text", scene.caption, "--out", out.string()});
  REQUIRE(r.code == 0);
  const Image img = read_ppm(out);
  CHECK(img.width == 32);
  // Exactly K patches are left at full brightness.
  const std::size_t p = state.model.patch_size, grid = 32 / p;
  std::size_t undimmed = 0;
  for (std::size_t py = 0; py < grid; ++py)
    for (std::size_t px = 0; px < grid; ++px) {
      bool same = true;
      for (std::size_t y = py * p; y < (py + 1) * p; ++y)
        for (std::size_t x = px * p; x < (px + 1) * p; ++x)
          for (std::size_t ch = 0; ch < 3; ++ch) same = same && img.at(x, y, ch) == scene.image.at(x, y, ch);
      undimmed += same;
    }
  CHECK(undimmed == keep_count(grid * grid, state.model.keep_ratio));

  r = invoke({"visualize", "--ckpt", ckpt, "--scene-seed", "11", "--text", scene.caption, "--alpha", "1", "--out",
              out.string()});
  REQUIRE(r.code == 0);
  CHECK(read_ppm(out).pixels == scene.image.pixels);
}

TEST_CASE("export writes a loadable dataset") {
  TempDir dir("export");
  const auto out = dir.path / "data";
  auto r = invoke({"export", "--out", out.string(), "--count", "5", "--seed", "3"});
  REQUIRE(r.code == 0);
  const auto entries = load_dataset(out);
  REQUIRE(entries.size() == 5);
  const auto first = generate_scene(derive_seed(3, 0), SceneSpec{});
  CHECK(entries[0].image.pixels == first.image.pixels);
  CHECK(entries[0].annotation.boxes.size() == first.objects.size());
  CHECK(invoke({"export", "--out", out.string(), "--count", "0"}).code == cli::kExitUsage);
}
