// SPDX-License-Identifier: Apache-2.0
//
// Analytic multiply-accumulate (MAC) model of the visual backbone with the
// patch detector plugged after layer k. One FLOP is counted as one MAC.

#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "textprune/model.hpp"

namespace textprune {

struct CostConfig {
  std::size_t layers = 12;
  std::size_t dim = 768;
  std::size_t heads = 12;
  std::size_t ffn_dim = 3072;
  std::size_t tokens = 197;  // s = n + 1
  std::size_t location = 6;  // k
  double keep_ratio = 0.5;

  void validate() const;
  std::size_t patches() const { return tokens - 1; }
  static CostConfig from_model(const ModelConfig& config);
};

// 4 s d^2 + 2 s^2 d + 2 s d d_ff
std::uint64_t layer_flops(std::uint64_t s, std::uint64_t d, std::uint64_t d_ff, std::uint64_t heads);

// n (2d d + d d/2 + d/2) for the 2d -> d -> d/2 -> 1 scoring MLP.
std::uint64_t detector_flops(std::uint64_t n, std::uint64_t d);

// Floats kept for the backward pass by one layer: token-sized activations
// (s (8d + 2 d_ff)) plus the attention probabilities (heads s^2).
std::uint64_t activation_floats(std::uint64_t s, std::uint64_t d, std::uint64_t d_ff, std::uint64_t heads);

struct CostReport {
  std::vector<std::uint64_t> per_layer;
  std::size_t reduced_tokens = 0;  // K + 2, or s when nothing is pruned
  std::uint64_t layers_total = 0;
  std::uint64_t detector = 0;
  std::uint64_t total = 0;         // layers_total + detector
  std::uint64_t baseline = 0;      // N layer_flops(s), no detector
  // Transformer-layer MACs relative to the unpruned backbone. The detector is
  // excluded here and reported through ratio_with_detector.
  double ratio = 1.0;
  double ratio_with_detector = 1.0;
  std::uint64_t act_floats = 0;
  std::uint64_t baseline_act_floats = 0;
};

CostReport backbone_flops(const CostConfig& config);

// CSV with header `location,ratio,macs,ratio_vs_baseline,act_floats`, one row
// per (location, keep ratio) in the given order. `macs` is the backbone total
// including the detector.
std::string sweep_report(const CostConfig& base, const std::vector<std::size_t>& locations,
                         const std::vector<double>& ratios);

struct InstrumentedCount {
  std::uint64_t counted = 0;    // every MAC executed by the visual forward
  std::uint64_t embedding = 0;  // patch projection, outside the analytic model
  std::uint64_t backbone() const { return counted - embedding; }
};

// Runs one single-image visual forward (learned detector fed a random text
// [CLS]) on a randomly initialized model and counts its MACs.
InstrumentedCount instrumented_mac_count(const ModelConfig& config, std::uint64_t seed);

}  // namespace textprune
