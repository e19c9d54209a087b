// SPDX-License-Identifier: Apache-2.0
//
// Patch-mask overlays: kept patches keep their color, undetected patches are
// dimmed to 40% with integer arithmetic so output is bit-exact everywhere.

#pragma once

#include <string>

#include "textprune/image.hpp"
#include "textprune/model.hpp"

namespace textprune {

inline constexpr unsigned kDimPercent = 40;

// Dims every patch not listed in sel.kept. A bypass selection returns the
// input unchanged.
Image render_patch_mask(const Image& image, std::size_t patch, const SelectionResult& sel);

struct Visualization {
  Image overlay;
  SelectionResult selection;
  std::vector<double> scores;  // empty when nothing was pruned
};

// Scores the scene against `text` with the learned detector and renders the
// top-K selection for `keep_ratio`.
Visualization visualize_detection(const ModelParams<float>& params, const ModelConfig& config, const Image& image,
                                  const std::string& text, double keep_ratio);

}  // namespace textprune
