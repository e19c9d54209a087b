// SPDX-License-Identifier: Apache-2.0
//
// Training objectives: patch-text alignment (binary cross-entropy on detector
// scores), in-batch image-text contrastive loss and image-text matching.

#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "textprune/autodiff.hpp"

namespace textprune {

// Mean BCE over all entries. `scores` holds n values in (0, 1), any shape;
// labels are 0/1. Scores are clipped by log_clipped.
template <typename T>
Tensor<T> pta_loss(const Tensor<T>& scores, std::span<const std::uint8_t> labels);

// Symmetric InfoNCE over B x d unit rows with logits = cosine / temperature.
template <typename T>
Tensor<T> itc_loss(const Tensor<T>& image_embeds, const Tensor<T>& text_embeds, const Tensor<T>& temperature);

// Mean two-class cross-entropy; label 1 means matched.
template <typename T>
Tensor<T> itm_loss(const Tensor<T>& logits, std::span<const std::uint8_t> match_labels);

struct HardNegatives {
  std::vector<std::size_t> text_for_image;  // negative caption for image i
  std::vector<std::size_t> image_for_text;  // negative image for caption j
};

// Off-diagonal argmax per row (image -> text) and per column (text -> image)
// of a row-major B x B similarity matrix; ties go to the lower index. When
// `eligible` is given (B x B, nonzero = usable) candidates it rules out are
// skipped unless nothing else is left.
HardNegatives select_hard_negatives(std::span<const double> sim, std::size_t batch,
                                    std::span<const std::uint8_t> eligible = {});

struct LossSet {
  bool pta = false;
  bool itc = false;
  bool itm = false;

  bool empty() const { return !pta && !itc && !itm; }
  static LossSet all() { return {true, true, true}; }
};

template <typename T>
struct LossBundle {
  std::optional<Tensor<T>> pta;
  std::optional<Tensor<T>> itc;
  std::optional<Tensor<T>> itm;
  Tensor<T> total;
  LossSet enabled;
};

// Unweighted sum of the enabled components. Disabled components are kept in
// the bundle for logging but do not enter the total.
template <typename T>
LossBundle<T> total_loss(std::optional<Tensor<T>> pta, std::optional<Tensor<T>> itc, std::optional<Tensor<T>> itm,
                         LossSet enabled);

}  // namespace textprune
