// SPDX-License-Identifier: Apache-2.0

#include "textprune/cost_model.hpp"

#include <cstdio>

#include "textprune/rng.hpp"

namespace textprune {

void CostConfig::validate() const {
  auto fail = [](const std::string& msg) { throw Error("cost config: " + msg); };
  if (layers < 2) fail("need at least 2 layers");
  if (dim == 0 || heads == 0 || dim % heads != 0) fail("heads must divide dim");
  if (dim % 2 != 0) fail("dim must be even");
  if (ffn_dim == 0) fail("ffn must be positive");
  if (tokens < 3) fail("need at least 2 patch tokens plus [CLS]");
  if (location < 1 || location >= layers) fail("location must satisfy 1 <= k < layers");
  if (!(keep_ratio > 0.0) || keep_ratio > 1.0) fail("keep ratio must lie in (0, 1]");
}

CostConfig CostConfig::from_model(const ModelConfig& m) {
  return CostConfig{m.visual_layers, m.dim, m.heads, m.ffn_dim, m.num_patches() + 1, m.detect_location, m.keep_ratio};
}

std::uint64_t layer_flops(std::uint64_t s, std::uint64_t d, std::uint64_t d_ff, std::uint64_t /*heads*/) {
  return 4 * s * d * d + 2 * s * s * d + 2 * s * d * d_ff;
}

std::uint64_t detector_flops(std::uint64_t n, std::uint64_t d) { return n * (2 * d * d + d * d / 2 + d / 2); }

std::uint64_t activation_floats(std::uint64_t s, std::uint64_t d, std::uint64_t d_ff, std::uint64_t heads) {
  return s * (8 * d + 2 * d_ff) + heads * s * s;
}

CostReport backbone_flops(const CostConfig& c) {
  c.validate();
  CostReport r;
  const std::size_t n = c.patches();
  const bool pruned = c.keep_ratio < 1.0;
  r.reduced_tokens = pruned ? keep_count(n, c.keep_ratio) + 2 : c.tokens;
  const std::uint64_t full = layer_flops(c.tokens, c.dim, c.ffn_dim, c.heads);
  const std::uint64_t reduced = layer_flops(r.reduced_tokens, c.dim, c.ffn_dim, c.heads);
  const std::uint64_t full_act = activation_floats(c.tokens, c.dim, c.ffn_dim, c.heads);
  const std::uint64_t reduced_act = activation_floats(r.reduced_tokens, c.dim, c.ffn_dim, c.heads);
  for (std::size_t l = 1; l <= c.layers; ++l) {
    const bool after = l > c.location;
    r.per_layer.push_back(after ? reduced : full);
    r.layers_total += r.per_layer.back();
    r.act_floats += after ? reduced_act : full_act;
  }
  r.detector = pruned ? detector_flops(n, c.dim) : 0;
  r.total = r.layers_total + r.detector;
  r.baseline = c.layers * full;
  r.baseline_act_floats = c.layers * full_act;
  r.ratio = static_cast<double>(r.layers_total) / static_cast<double>(r.baseline);
  r.ratio_with_detector = static_cast<double>(r.total) / static_cast<double>(r.baseline);
  return r;
}

std::string sweep_report(const CostConfig& base, const std::vector<std::size_t>& locations,
                         const std::vector<double>& ratios) {
  if (locations.empty() || ratios.empty()) throw Error("sweep needs at least one location and one ratio");
  std::string out = "location,ratio,macs,ratio_vs_baseline,act_floats\n";
  for (auto k : locations) {
    for (double a : ratios) {
      CostConfig c = base;
      c.location = k;
      c.keep_ratio = a;
      const auto r = backbone_flops(c);
      char line[160];
      std::snprintf(line, sizeof line, "%zu,%.6f,%llu,%.6f,%llu\n", k, a, static_cast<unsigned long long>(r.total),
                    r.ratio, static_cast<unsigned long long>(r.act_floats));
      out += line;
    }
  }
  return out;
}

InstrumentedCount instrumented_mac_count(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  const auto params = init_model<float>(config, seed);
  Rng rng(derive_seed(seed, 7));
  Image image(config.image_size, config.image_size, config.channels);
  for (auto& p : image.pixels) p = static_cast<std::uint8_t>(rng.uniform_int(0, 255));
  std::vector<float> cls(config.dim);
  for (auto& v : cls) v = static_cast<float>(rng.normal());
  const Tensor<float> t_cls({1, config.dim}, std::move(cls));
  const Image* images[] = {&image};

  InstrumentedCount out;
  const std::uint64_t n = config.num_patches();
  out.embedding = n * config.patch_size * config.patch_size * config.channels * config.dim;
  MacCounter counter;
  vit_tpd_forward<float>(images, &t_cls, config, params,
                         config.keep_ratio < 1.0 ? DetectorMode::Learned : DetectorMode::Bypass);
  out.counted = counter.count();
  return out;
}

}  // namespace textprune
