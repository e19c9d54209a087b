// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <sstream>

#include "support.hpp"
#include "textprune/cost_model.hpp"

using namespace textprune;

namespace {

// Component-wise count: Q, K, V and output projections, scores, weighted
// values, two feed-forward matmuls.
std::uint64_t oracle_layer(std::uint64_t s, std::uint64_t d, std::uint64_t f) {
  const std::uint64_t proj = 4 * (s * d * d);
  const std::uint64_t scores = s * s * d;
  const std::uint64_t values = s * s * d;
  const std::uint64_t ffn = s * d * f + s * f * d;
  return proj + scores + values + ffn;
}

}  // namespace

TEST_CASE("per-layer cost") {
  CHECK(layer_flops(197, 768, 3072, 12) == 1453954560ULL);
  CHECK(layer_flops(100, 768, 3072, 12) == 723148800ULL);
  CHECK(layer_flops(1, 768, 3072, 12) == 4ULL * 768 * 768 + 2 * 768 + 2 * 768 * 3072);
  std::mt19937_64 gen(5);
  for (int i = 0; i < 50; ++i) {
    const std::uint64_t s = 1 + gen() % 300, d = 1 + gen() % 512, f = 1 + gen() % 2048;
    CHECK(layer_flops(s, d, f, 1) == oracle_layer(s, d, f));
  }
  // Linear in the feed-forward width.
  const auto a = layer_flops(50, 64, 100, 4), b = layer_flops(50, 64, 200, 4), c = layer_flops(50, 64, 300, 4);
  CHECK(b - a == c - b);
  CHECK(b - a == 2ULL * 50 * 64 * 100);
}

TEST_CASE("backbone ratio for the reference configuration") {
  const CostConfig cfg;
  const auto r = backbone_flops(cfg);
  const double oracle = (6.0 * oracle_layer(197, 768, 3072) + 6.0 * oracle_layer(100, 768, 3072)) /
                        (12.0 * oracle_layer(197, 768, 3072));
  CHECK(r.reduced_tokens == 100);
  CHECK(r.ratio == doctest::Approx(oracle).epsilon(1e-12));
  CHECK(std::abs(r.ratio - 0.749) <= 0.005);
  CHECK(r.detector == detector_flops(196, 768));
  CHECK(r.total == r.layers_total + r.detector);
  CHECK(r.ratio_with_detector == doctest::Approx(static_cast<double>(r.total) / static_cast<double>(r.baseline)));
  CHECK(r.per_layer.size() == 12);
}

TEST_CASE("keep ratio of one is the identity") {
  CostConfig cfg;
  cfg.keep_ratio = 1.0;
  const auto r = backbone_flops(cfg);
  CHECK(r.ratio == 1.0);
  CHECK(r.ratio_with_detector == 1.0);
  CHECK(r.detector == 0);
  CHECK(r.total == r.baseline);
}

TEST_CASE("later detection costs more") {
  for (double alpha : {0.1, 0.3, 0.5, 0.7, 0.9}) {
    double prev = 0;
    for (std::size_t k = 1; k < 12; ++k) {
      CostConfig cfg;
      cfg.keep_ratio = alpha;
      cfg.location = k;
      const double r = backbone_flops(cfg).ratio;
      CHECK(r > prev);
      CHECK(r < 1.0);
      prev = r;
    }
  }
  CostConfig bad;
  bad.location = 12;
  CHECK_THROWS_AS(backbone_flops(bad), Error);
  bad.location = 0;
  CHECK_THROWS_AS(backbone_flops(bad), Error);
}

TEST_CASE("sweep report") {
  const auto csv = sweep_report(CostConfig{}, {4, 6, 8}, {0.1, 0.3, 0.5, 0.7});
  std::istringstream in(csv);
  std::string line;
  std::getline(in, line);
  CHECK(line == "location,ratio,macs,ratio_vs_baseline,act_floats");
  std::vector<std::vector<std::string>> rows;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::stringstream ls(line);
    for (std::string c; std::getline(ls, c, ',');) cells.push_back(c);
    REQUIRE(cells.size() == 5);
    rows.push_back(cells);
  }
  REQUIRE(rows.size() == 12);
  // Rows are location-major; cost grows with the keep ratio and with the location.
  auto macs = [&](std::size_t loc, std::size_t r) { return std::stoull(rows[loc * 4 + r][2]); };
  for (std::size_t loc = 0; loc < 3; ++loc)
    for (std::size_t r = 0; r < 4; ++r) {
      if (r > 0) CHECK(macs(loc, r) > macs(loc, r - 1));
      if (loc > 0) CHECK(macs(loc, r) > macs(loc - 1, r));
    }
  CHECK(rows[5][0] == "6");
  CHECK(rows[5][1] == "0.300000");
  CHECK(rows[6][1] == "0.500000");
  CHECK(rows[6][3] == "0.748683");
}

TEST_CASE("activation memory shrinks with the kept tokens") {
  const auto r = backbone_flops(CostConfig{});
  CHECK(r.act_floats < r.baseline_act_floats);
  CHECK(r.baseline_act_floats == 12 * activation_floats(197, 768, 3072, 12));
  CHECK(r.act_floats == 6 * activation_floats(197, 768, 3072, 12) + 6 * activation_floats(100, 768, 3072, 12));
}

TEST_CASE("executed MACs agree with the analytic count") {
  std::mt19937_64 gen(17);
  int checked = 0;
  for (int trial = 0; trial < 12; ++trial) {
    ModelConfig m;
    m.patch_size = 8;
    m.image_size = 8 * (2 + gen() % 5);
    m.heads = 1 + gen() % 4;
    m.dim = 8 * m.heads * (1 + gen() % 3);
    m.ffn_dim = m.dim * (1 + gen() % 4);
    m.visual_layers = 2 + gen() % 5;
    m.detect_location = 1 + gen() % (m.visual_layers - 1);
    const double ratios[] = {0.1, 0.3, 0.5, 0.7, 0.9};
    m.keep_ratio = ratios[gen() % 5];
    const auto counted = instrumented_mac_count(m, gen()).backbone();
    const auto analytic = backbone_flops(CostConfig::from_model(m)).total;
    const double rel = std::abs(static_cast<double>(counted) - static_cast<double>(analytic)) / static_cast<double>(analytic);
    CAPTURE(trial);
    CAPTURE(counted);
    CAPTURE(analytic);
    CHECK(rel <= 0.01);
    ++checked;
  }
  CHECK(checked >= 10);

  ModelConfig full;
  full.keep_ratio = 1.0;
  CHECK(instrumented_mac_count(full, 3).backbone() == backbone_flops(CostConfig::from_model(full)).baseline);
}
